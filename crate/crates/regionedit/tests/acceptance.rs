//! End-to-end acceptance suite. Prints one line per criterion.
//!
//! The exit status is non-zero when an exact criterion (1-4, 9, 10) fails or
//! any criterion errors out. The trained-model criteria (5-8) are measured
//! outcomes: their PASS/FAIL lines and the summary report them as they are,
//! without failing the test run.
//!
//! The training-backed criteria use the desk preset with three seeds
//! (`REGIONEDIT_ACCEPT_PRESET` selects another preset for smoke runs). Set
//! `REGIONEDIT_ACCEPT_DIR` to keep checkpoints between runs; otherwise they
//! live in a temporary directory.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use diffcore::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use regionedit::config::{ExperimentConfig, ModelConfig};
use regionedit::harness::ablation::median;
use regionedit::harness::checks::{decoupling_check, gradcheck_variant, identity_check};
use regionedit::harness::{compare_regimes, run_ablation, run_robustness, AblationTable, RobustnessTable, Workspace};
use regionedit::model::{Regime, Variant};
use regionedit::morph::{morph_perturb, PerturbFamily, PerturbationSpec};
use regionedit::objectives::region_weighted_edit_loss;
use regionedit::synthdata::Split;

type Outcome = (bool, String);

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Exact,
    Measured,
}

struct Suite {
    /// `(name, kind, passed, errored)`
    results: Vec<(String, Kind, bool, bool)>,
}

impl Suite {
    fn run(&mut self, name: &str, kind: Kind, f: impl FnOnce() -> anyhow::Result<Outcome>) {
        let t = Instant::now();
        let (ok, errored, detail) = match f() {
            Ok((ok, d)) => (ok, false, d),
            Err(e) => (false, true, format!("error: {e:#}")),
        };
        let secs = t.elapsed().as_secs_f64();
        println!("[{}] {name}: {detail} ({secs:.1}s)", if ok { "PASS" } else { "FAIL" });
        self.results.push((name.to_string(), kind, ok, errored));
    }
}

fn c1_identity() -> anyhow::Result<Outcome> {
    let r = identity_check(&ModelConfig::desk(), 100, 11)?;
    Ok((r.bitwise_equal == r.cases, format!("{}/{} bitwise equal", r.bitwise_equal, r.cases)))
}

fn c2_alpha_zero() -> anyhow::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (b, l, c) = (rng.random_range(1..4), rng.random_range(1..20), rng.random_range(1..5));
        let mut draw = |n: usize, s: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-s..s)).collect() };
        let vp = draw(b * l * c, 3.0);
        let vs = draw(b * l * c, 3.0);
        let m: Vec<f64> = draw(b * l, 1.0).into_iter().map(|x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
        let mut g = Graph::<f64>::new();
        let v = g.input(Tensor::new(vec![b, l, c], vp.clone())?);
        let loss = region_weighted_edit_loss(&mut g, v, &Tensor::new(vec![b, l, c], vs.clone())?, &Tensor::new(vec![b, l, 1], m)?, 0.0)?;
        let got = g.value(loss).item();
        let mse = vp.iter().zip(&vs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (b * l) as f64;
        worst = worst.max((got - mse).abs() / mse.abs().max(f64::MIN_POSITIVE));
    }
    Ok((worst <= 1e-12, format!("max relative difference {worst:.2e} over 1000 cases")))
}

fn c3_gradcheck() -> anyhow::Result<Outcome> {
    let r = gradcheck_variant(&ModelConfig::micro(), Variant::G, 1, 1e-6)?;
    Ok((
        r.max_rel_error <= 1e-4 && r.frozen_grads_zero,
        format!(
            "max rel error {:.2e} at {} over {} scalars, frozen grads zero: {}",
            r.max_rel_error, r.worst_param, r.n_checked, r.frozen_grads_zero
        ),
    ))
}

fn c4_decoupling() -> anyhow::Result<Outcome> {
    let r = decoupling_check(&ModelConfig::desk(), 4, 2)?;
    let ok = r.mask_leaks.is_empty() && r.edit_leaks.is_empty() && r.both_paths_live;
    Ok((ok, format!("mask-loss leaks {:?}, edit-loss leaks {:?}, both paths live {}", r.mask_leaks, r.edit_leaks, r.both_paths_live)))
}

fn c5_ordering(t: &AblationTable) -> anyhow::Result<Outcome> {
    let l1 = |v: Variant| t.gt(v).map(|r| r.l1_global).ok_or_else(|| anyhow::anyhow!("no row for {v:?}"));
    let (a, b, c, d, g) = (l1(Variant::A)?, l1(Variant::B)?, l1(Variant::C)?, l1(Variant::D)?, l1(Variant::G)?);
    let keep = |v: Variant| t.gt(v).map(|r| r.l1_keep).unwrap_or(f64::NAN);
    let (keep_d, keep_e) = (keep(Variant::D), keep(Variant::E));
    let others = Variant::ALL.iter().filter(|&&v| v != Variant::G).map(|&v| l1(v)).collect::<anyhow::Result<Vec<_>>>()?;
    let pa = b <= 0.5 * a;
    let pb = d <= b && d <= c;
    let pc = keep_e < keep_d;
    let pd = others.iter().all(|&o| g <= o);
    let mut s = String::new();
    for v in Variant::ALL {
        s.push_str(&format!("{v:?}={:.4} ", l1(v)?));
    }
    Ok((
        pa && pb && pc && pd,
        format!(
            "L1_global {s}| (a) B/A {:.3} {} (b) {} (c) keep E {keep_e:.4} vs D {keep_d:.4} {} (d) {}",
            b / a,
            mark(pa),
            mark(pb),
            mark(pc),
            mark(pd)
        ),
    ))
}

fn c6_predictor(ws: &Workspace, seeds: &[u64]) -> anyhow::Result<Outcome> {
    let cmp = compare_regimes(ws, seeds, Split::Test)?;
    let (dec, cou) = (cmp.median_iou(Regime::Decoupled), cmp.median_iou(Regime::Coupled));
    let ok = dec >= 0.8 && dec >= cou;
    Ok((ok, format!("median IoU decoupled {dec:.4} (need >= 0.8), coupled {cou:.4}")))
}

fn c7_deployed_gap(t: &AblationTable) -> anyhow::Result<Outcome> {
    let gt = t.row(Variant::G, "gt").ok_or_else(|| anyhow::anyhow!("no G gt row"))?;
    let pred = t.row(Variant::G, "predicted").ok_or_else(|| anyhow::anyhow!("no G predicted row"))?;
    let gaps: Vec<f64> = gt
        .per_seed
        .iter()
        .zip(&pred.per_seed)
        .map(|((_, g), (_, p))| (p.l1_global - g.l1_global) / g.l1_global)
        .collect();
    let gap = median(&gaps);
    Ok((gap <= 0.25, format!("median relative gap {:.1}% (need <= 25%)", 100.0 * gap)))
}

fn c8_robustness(t: &RobustnessTable, magnitudes: &[usize], shift: usize) -> anyhow::Result<Outcome> {
    let l1 = |label: &str| t.median(label).map(|r| r.l1_global).ok_or_else(|| anyhow::anyhow!("no bucket {label}"));
    let mut ok = true;
    let mut s = String::new();
    for family in [PerturbFamily::Erode, PerturbFamily::Dilate] {
        let mut series = vec![l1("gt")?];
        for &m in magnitudes {
            series.push(l1(&PerturbationSpec { family, magnitude: m }.label())?);
        }
        let drops: Vec<f64> = series.windows(2).filter(|w| w[1] < w[0]).map(|w| (w[0] - w[1]) / w[0]).collect();
        let fam_ok = drops.is_empty() || (drops.len() == 1 && drops[0] <= 0.02);
        ok &= fam_ok;
        let shown: Vec<String> = series.iter().map(|x| format!("{x:.4}")).collect();
        s.push_str(&format!("{} [{}] {}; ", family.name(), shown.join(" "), mark(fam_ok)));
    }
    let dilate = l1(&PerturbationSpec { family: PerturbFamily::Dilate, magnitude: shift }.label())?;
    for family in [PerturbFamily::ShiftX, PerturbFamily::ShiftY, PerturbFamily::ShiftXy] {
        let v = l1(&PerturbationSpec { family, magnitude: shift }.label())?;
        ok &= v < dilate;
        s.push_str(&format!("{} {v:.4} vs dilate {dilate:.4} {}; ", family.name(), mark(v < dilate)));
    }
    Ok((ok, s.trim_end_matches("; ").to_string()))
}

fn c9_morphology() -> anyhow::Result<Outcome> {
    let mut mismatches = 0;
    let mut checked = 0;
    for i in 0..50u64 {
        let m = common::random_mask(32, 1000 + i);
        for family in common::FAMILIES {
            for magnitude in [1, 2, 4, 8] {
                let spec = PerturbationSpec { family, magnitude };
                checked += 1;
                if morph_perturb(&m, spec)?.mask != common::brute_force(&m, spec) {
                    mismatches += 1;
                }
            }
        }
    }
    Ok((mismatches == 0, format!("{mismatches} mismatches in {checked} perturbations of 50 masks")))
}

fn cli(workdir: &Path, args: &[&str]) -> anyhow::Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_regionedit")).arg("--workdir").arg(workdir).args(args).output()?;
    anyhow::ensure!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn csv_files(dir: &Path) -> anyhow::Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.insert(p.strip_prefix(dir)?.to_path_buf(), std::fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

fn c10_replay() -> anyhow::Result<Outcome> {
    let tmp = tempfile::tempdir()?;
    let t = tmp.path();
    let commands: [&[&str]; 7] = [
        &["train", "--variant", "G", "--seed", "2"],
        &["eval", "--variant", "G", "--mask-source", "predicted"],
        &["eval", "--variant", "D", "--mask-source", "gt", "--split", "val"],
        &["ablate", "--seeds", "1,2"],
        &["robustness", "--seeds", "1"],
        &["gradcheck"],
        &["plot-data"],
    ];
    let (from_train, from_ablate) = (t.join("first0"), t.join("first3"));
    let (mut files, mut cells) = (0, 0);
    for (i, args) in commands.iter().enumerate() {
        let first = t.join(format!("first{i}"));
        let mut full = vec!["--preset", "micro"];
        full.extend_from_slice(args);
        full.extend(["--out", first.to_str().unwrap()]);
        if args[0] == "plot-data" {
            full.extend(["--from", from_train.to_str().unwrap(), "--from", from_ablate.to_str().unwrap()]);
        }
        cli(&t.join("w1"), &full)?;
        let second = t.join(format!("second{i}"));
        let manifest = first.join("manifest.json");
        cli(&t.join(format!("w2_{i}")), &["replay", "--of", manifest.to_str().unwrap(), "--out", second.to_str().unwrap()])?;
        let (a, b) = (csv_files(&first)?, csv_files(&second)?);
        anyhow::ensure!(!a.is_empty(), "{args:?} wrote no CSV");
        if a != b {
            let bad: Vec<_> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
            return Ok((false, format!("{args:?}: {bad:?} differ after replay")));
        }
        files += a.len();
        cells += a.values().map(|v| v.iter().filter(|&&c| c == b',' || c == b'\n').count()).sum::<usize>();
    }
    Ok((true, format!("{} commands, {files} CSV files, ~{cells} cells bitwise identical in fresh workdirs", commands.len())))
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "MISS"
    }
}

fn main() -> ExitCode {
    let mut suite = Suite { results: Vec::new() };
    suite.run("1 identity recovery", Kind::Exact, c1_identity);
    suite.run("2 loss degeneration", Kind::Exact, c2_alpha_zero);
    suite.run("3 gradient correctness", Kind::Exact, c3_gradcheck);
    suite.run("4 decoupling", Kind::Exact, c4_decoupling);

    let preset = std::env::var("REGIONEDIT_ACCEPT_PRESET").unwrap_or_else(|_| "desk".into());
    let cfg = ExperimentConfig::preset(&preset).expect("known preset");
    println!("trained criteria on the {preset} preset");
    let seeds = cfg.seeds.clone();
    let (magnitudes, shift) = (cfg.robustness.magnitudes.clone(), cfg.robustness.shift);
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = std::env::var_os("REGIONEDIT_ACCEPT_DIR").map(PathBuf::from).unwrap_or_else(|| tmp.path().to_path_buf());
    let ws = Workspace::new(cfg, Some(&root));
    match ws {
        Ok(ws) => {
            let t0 = Instant::now();
            let table = run_ablation(&ws, &Variant::ALL, &seeds, Split::Test);
            println!("ablation grid ready ({:.0}s)", t0.elapsed().as_secs_f64());
            match table {
                Ok(t) => {
                    print!("{}", t.render());
                    suite.run("5 learnability and locality ordering", Kind::Measured, || c5_ordering(&t));
                    suite.run("6 mask predictor quality", Kind::Measured, || c6_predictor(&ws, &seeds));
                    suite.run("7 deployed gap", Kind::Measured, || c7_deployed_gap(&t));
                }
                Err(e) => {
                    for name in ["5 learnability and locality ordering", "6 mask predictor quality", "7 deployed gap"] {
                        suite.run(name, Kind::Measured, || Err(anyhow::anyhow!("ablation failed: {e}")));
                    }
                }
            }
            suite.run("8 robustness shape", Kind::Measured, || {
                let t = run_robustness(&ws, &seeds, Split::Test)?;
                print!("{}", t.render());
                c8_robustness(&t, &magnitudes, shift)
            });
        }
        Err(e) => {
            for name in ["5", "6", "7", "8"] {
                suite.run(name, Kind::Measured, || Err(anyhow::anyhow!("workspace: {e}")));
            }
        }
    }

    suite.run("9 morphology oracle", Kind::Exact, c9_morphology);
    suite.run("10 determinism", Kind::Exact, c10_replay);

    let failed: Vec<_> = suite.results.iter().filter(|r| !r.2).map(|r| r.0.as_str()).collect();
    println!("acceptance: {}/{} criteria passed", suite.results.len() - failed.len(), suite.results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
    }
    let fatal: Vec<_> = suite.results.iter().filter(|r| r.3 || (r.1 == Kind::Exact && !r.2)).map(|r| r.0.as_str()).collect();
    if fatal.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("fatal: {}", fatal.join(", "));
        ExitCode::FAILURE
    }
}
