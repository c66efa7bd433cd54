use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use regionedit::config::ExperimentConfig;
use regionedit::harness::ablation::{eval_samples, median, median_report};
use regionedit::harness::checks::gradcheck_variant;
use regionedit::harness::io::{
    git_describe, read_manifest, read_metrics_csv, read_pgm, read_step_log, write_manifest, write_metrics_csv,
    write_pgm, write_step_log, METRIC_SPACE,
};
use regionedit::harness::{
    compare_regimes, run_ablation, run_robustness, Editor, MaskSource, MetricsRow, RunManifest, Workspace,
};
use regionedit::latent::Grid;
use regionedit::model::{Regime, Variant};
use regionedit::synthdata::Split;

#[derive(Parser)]
#[command(name = "regionedit", version, about = "Region-aware adapter experiments on a toy diffusion transformer")]
struct Cli {
    #[command(flatten)]
    source: ConfigSource,
    /// Checkpoint cache root; runs land in a per-config subdirectory.
    #[arg(long, global = true, default_value = "runs")]
    workdir: PathBuf,
    /// Progress messages on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
#[group(multiple = false)]
struct ConfigSource {
    /// Built-in preset: toy, desk or micro.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Take the config from an earlier run manifest.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
}

fn variant_arg(s: &str) -> Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

fn regime_arg(s: &str) -> Result<Regime, String> {
    Regime::parse(s).map_err(|e| e.to_string())
}

fn split_arg(s: &str) -> Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

#[derive(Args, Clone, Serialize, Deserialize)]
struct RunArgs {
    #[arg(long, value_parser = variant_arg, default_value = "G")]
    variant: Variant,
    #[arg(long, value_parser = regime_arg, default_value = "decoupled")]
    regime: Regime,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Subcommand, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Cmd {
    /// Print the resolved config as TOML.
    Config,
    /// Write the corpus shards.
    GenCorpus {
        #[arg(long)]
        #[serde(skip)]
        out: PathBuf,
    },
    /// Pretrain (or load) the shared frozen backbone.
    Pretrain {
        #[arg(long)]
        #[serde(skip)]
        out: Option<PathBuf>,
    },
    /// Train (or load) one variant.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        #[serde(skip)]
        out: Option<PathBuf>,
    },
    /// Sample and score one trained variant.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// gt, predicted or supplied.
        #[arg(long, default_value = "gt")]
        mask_source: String,
        /// Directory of `NNNN.pgm` generation-grid masks, one per evaluated sample.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long, value_parser = split_arg, default_value = "test")]
        split: Split,
        #[arg(long)]
        #[serde(skip)]
        out: PathBuf,
    },
    /// The A..G grid plus the decoupled/coupled predictor comparison.
    Ablate {
        #[arg(long, value_parser = split_arg, default_value = "test")]
        split: Split,
        /// Comma-separated; defaults to the config's seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        #[serde(skip)]
        out: PathBuf,
    },
    /// Variant G under eroded, dilated and shifted masks.
    Robustness {
        #[arg(long, value_parser = split_arg, default_value = "test")]
        split: Split,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        #[serde(skip)]
        out: PathBuf,
    },
    /// Finite-difference check of a variant's full loss in f64.
    Gradcheck {
        #[arg(long, value_parser = variant_arg, default_value = "G")]
        variant: Variant,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        /// Model size to check; the configured model when absent.
        #[arg(long)]
        model_preset: Option<String>,
        #[arg(long)]
        #[serde(skip)]
        out: Option<PathBuf>,
    },
    /// Write predicted masks as PGM.
    PredictMask {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = split_arg, default_value = "test")]
        split: Split,
        /// Sample index within the split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Every evaluated sample; `--out` is then a directory.
        #[arg(long)]
        all: bool,
        /// Write probabilities instead of the deployed binary mask.
        #[arg(long)]
        probs: bool,
        #[arg(long)]
        #[serde(skip)]
        out: PathBuf,
    },
    /// CSV series for plotting: loss curves and medians of earlier runs.
    PlotData {
        /// Output directories of earlier `train`, `pretrain`, `ablate` or `robustness` runs.
        #[arg(long)]
        from: Vec<PathBuf>,
        #[arg(long)]
        #[serde(skip)]
        out: PathBuf,
    },
    /// Rerun the command recorded in a manifest under its config.
    Replay {
        #[arg(long = "of")]
        of: PathBuf,
        #[arg(long)]
        #[serde(skip)]
        out: PathBuf,
    },
}

impl Cmd {
    fn set_out(&mut self, dir: PathBuf) {
        match self {
            Cmd::Config => {}
            Cmd::GenCorpus { out }
            | Cmd::Eval { out, .. }
            | Cmd::Ablate { out, .. }
            | Cmd::Robustness { out, .. }
            | Cmd::PredictMask { out, .. }
            | Cmd::PlotData { out, .. }
            | Cmd::Replay { out, .. } => *out = dir,
            Cmd::Pretrain { out } | Cmd::Train { out, .. } | Cmd::Gradcheck { out, .. } => *out = Some(dir),
        }
    }

    fn out(&self) -> Option<&Path> {
        match self {
            Cmd::Config => None,
            Cmd::GenCorpus { out }
            | Cmd::Eval { out, .. }
            | Cmd::Ablate { out, .. }
            | Cmd::Robustness { out, .. }
            | Cmd::PlotData { out, .. }
            | Cmd::Replay { out, .. } => Some(out),
            Cmd::PredictMask { out, all, .. } => Some(if *all { out } else { out.parent().unwrap_or(Path::new("")) }),
            Cmd::Pretrain { out } | Cmd::Train { out, .. } | Cmd::Gradcheck { out, .. } => out.as_deref(),
        }
    }
}

fn load_config(src: &ConfigSource) -> Result<ExperimentConfig> {
    if let Some(p) = &src.config {
        return ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()));
    }
    if let Some(p) = &src.manifest {
        let m = read_manifest(p).with_context(|| format!("reading {}", p.display()))?;
        m.config.validate()?;
        return Ok(m.config);
    }
    Ok(ExperimentConfig::preset(src.preset.as_deref().unwrap_or("desk"))?)
}

/// What a command hands back for the manifest.
struct Outcome {
    seeds: Vec<u64>,
    metrics: serde_json::Value,
}

impl Outcome {
    fn new(seeds: Vec<u64>, metrics: serde_json::Value) -> Self {
        Self { seeds, metrics }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli.source)?;
    let mut cmd = cli.cmd;
    if let Cmd::Replay { of, out } = &cmd {
        let m = read_manifest(of).with_context(|| format!("reading {}", of.display()))?;
        let out = out.clone();
        cmd = serde_json::from_value(m.command).context("manifest command")?;
        if matches!(cmd, Cmd::Replay { .. }) {
            bail!("a replay manifest cannot be replayed");
        }
        cmd.set_out(out);
        return execute(m.config, &cli.workdir, cli.verbose, cmd);
    }
    execute(cfg, &cli.workdir, cli.verbose, cmd)
}

fn execute(cfg: ExperimentConfig, workdir: &Path, verbose: bool, cmd: Cmd) -> Result<()> {
    let mut ws = Workspace::new(cfg, Some(workdir))?;
    ws.verbose = verbose;
    let result = run(&ws, &cmd);
    let Some(dir) = cmd.out() else { return result.map(|_| ()) };
    let (outcome, error) = match result {
        Ok(o) => (o, None),
        Err(e) => (Outcome::new(Vec::new(), serde_json::Value::Null), Some(e)),
    };
    let manifest = RunManifest {
        command: serde_json::to_value(&cmd)?,
        config_hash: ws.config_hash().to_string(),
        config: ws.cfg.clone(),
        seeds: outcome.seeds,
        git_describe: git_describe(),
        metric_space: METRIC_SPACE.into(),
        error: error.as_ref().map(|e| format!("{e:#}")),
        metrics: outcome.metrics,
    };
    write_manifest(&dir.join("manifest.json"), &manifest)?;
    match error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn run(ws: &Workspace, cmd: &Cmd) -> Result<Outcome> {
    let cfg = &ws.cfg;
    match cmd {
        Cmd::Config => {
            print!("{}", cfg.to_toml()?);
            Ok(Outcome::new(Vec::new(), json!(null)))
        }
        Cmd::GenCorpus { out } => {
            let corpus = ws.corpus()?;
            corpus.save(out)?;
            let counts = json!({
                "train": corpus.train.len(),
                "val": corpus.val.len(),
                "test": corpus.test.len(),
            });
            println!("wrote corpus to {}: {counts}", out.display());
            Ok(Outcome::new(Vec::new(), counts))
        }
        Cmd::Pretrain { out } => {
            ws.stage0()?;
            let dir = ws.dir().expect("workspace has a directory");
            let log = read_step_log(&dir.join("ckpt/stage0.steps.csv"))?;
            if let Some(o) = out {
                write_step_log(&o.join("steps.csv"), &log)?;
            }
            let last = log.last().map(|s| s.total);
            println!("backbone ready in {} (final loss {last:?})", dir.display());
            Ok(Outcome::new(Vec::new(), json!({ "steps": log.len(), "final_loss": last })))
        }
        Cmd::Train { run, out } => {
            let ck = ws.trained(run.variant, run.regime, run.seed)?;
            let name = Workspace::checkpoint_name(run.variant, run.regime, run.seed);
            let dir = ws.dir().expect("workspace has a directory").join("ckpt");
            let log = read_step_log(&dir.join(name.replace(".ckpt", ".steps.csv")))?;
            if let Some(o) = out {
                write_step_log(&o.join("steps.csv"), &log)?;
            }
            println!("{} ready ({} steps)", dir.join(&name).display(), ck.vc.steps);
            Ok(Outcome::new(vec![run.seed], json!({ "final_loss": log.last().map(|s| s.total) })))
        }
        Cmd::Eval { run, mask_source, masks, split, out } => {
            let samples = eval_samples(ws, *split)?;
            let source = match (mask_source.as_str(), masks) {
                ("supplied", Some(dir)) => MaskSource::Supplied(read_mask_dir(dir, samples.len(), cfg)?),
                ("supplied", None) => bail!("--mask-source supplied needs --masks"),
                (s, None) => MaskSource::parse(s)?,
                (_, Some(_)) => bail!("--masks only applies to --mask-source supplied"),
            };
            let ck = ws.trained(run.variant, run.regime, run.seed)?;
            let ed = editor(ws, &ck, run.variant);
            let report = ed.evaluate(&samples, &source)?;
            let row = MetricsRow::new(
                "eval",
                &run.variant.to_string(),
                run.regime.name(),
                source.name(),
                split.name(),
                run.seed,
                "none",
                &report,
            );
            write_metrics_csv(&out.join("metrics.csv"), std::slice::from_ref(&row))?;
            println!(
                "{} {} mask={} split={} L1 {:.5} L2 {:.5} keep {:.5} edit {:.5} ({METRIC_SPACE} space)",
                run.variant,
                run.regime.name(),
                source.name(),
                split.name(),
                report.l1_global,
                report.l2_global,
                report.l1_keep,
                report.l1_edit
            );
            Ok(Outcome::new(vec![run.seed], serde_json::to_value(&report)?))
        }
        Cmd::Ablate { split, seeds, out } => {
            let seeds = seeds.clone().unwrap_or_else(|| cfg.seeds.clone());
            let table = run_ablation(ws, &Variant::ALL, &seeds, *split)?;
            let regimes = compare_regimes(ws, &seeds, *split)?;
            write_metrics_csv(&out.join("ablation.csv"), &table.csv_rows())?;
            let mut w = csv::Writer::from_path(out.join("regimes.csv"))?;
            w.write_record(["regime", "seed", "mask_iou", "mask_dice"])?;
            for (r, s, iou, dice) in &regimes.cells {
                w.write_record([r.name().to_string(), s.to_string(), iou.to_string(), dice.to_string()])?;
            }
            w.flush()?;
            let text = table.render();
            std::fs::write(out.join("ablation.txt"), &text)?;
            print!("{text}");
            for r in [Regime::Decoupled, Regime::Coupled] {
                println!("G predictor {:<9} median IoU {:.4} Dice {:.4}", r.name(), regimes.median_iou(r), regimes.median_dice(r));
            }
            let mut medians = serde_json::Map::new();
            for row in table.rows.iter().chain(&table.extra) {
                medians.insert(format!("{}-{}", row.variant, row.mask_source), serde_json::to_value(row.median())?);
            }
            let metrics = json!({
                "medians": medians,
                "iou_decoupled": regimes.median_iou(Regime::Decoupled),
                "iou_coupled": regimes.median_iou(Regime::Coupled),
            });
            Ok(Outcome::new(seeds, metrics))
        }
        Cmd::Robustness { split, seeds, out } => {
            let seeds = seeds.clone().unwrap_or_else(|| cfg.seeds.clone());
            let table = run_robustness(ws, &seeds, *split)?;
            write_metrics_csv(&out.join("robustness.csv"), &table.csv_rows())?;
            let text = table.render();
            std::fs::write(out.join("robustness.txt"), &text)?;
            print!("{text}");
            let mut medians = serde_json::Map::new();
            for b in table.buckets() {
                medians.insert(b.clone(), serde_json::to_value(table.median(&b))?);
            }
            Ok(Outcome::new(seeds, json!({ "medians": medians })))
        }
        Cmd::Gradcheck { variant, seed, eps, model_preset, out } => {
            let model = match model_preset {
                Some(p) => ExperimentConfig::preset(p)?.model,
                None => cfg.model.clone(),
            };
            let r = gradcheck_variant(&model, *variant, *seed, *eps)?;
            println!(
                "{variant}: max relative error {:.3e} over {} scalars (worst {}), frozen grads zero: {}",
                r.max_rel_error, r.n_checked, r.worst_param, r.frozen_grads_zero
            );
            if let Some(o) = out {
                std::fs::create_dir_all(o)?;
                let mut w = csv::Writer::from_path(o.join("gradcheck.csv"))?;
                w.write_record(["variant", "seed", "eps", "n_checked", "max_rel_error", "worst_param", "frozen_grads_zero"])?;
                w.write_record([
                    variant.to_string(),
                    seed.to_string(),
                    eps.to_string(),
                    r.n_checked.to_string(),
                    r.max_rel_error.to_string(),
                    r.worst_param.clone(),
                    r.frozen_grads_zero.to_string(),
                ])?;
                w.flush()?;
            }
            let metrics = json!({
                "max_rel_error": r.max_rel_error,
                "n_checked": r.n_checked,
                "worst_param": r.worst_param,
                "frozen_grads_zero": r.frozen_grads_zero,
            });
            Ok(Outcome::new(vec![*seed], metrics))
        }
        Cmd::PredictMask { run, split, index, all, probs, out } => {
            let samples = eval_samples(ws, *split)?;
            let picked: Vec<_> = if *all {
                samples.clone()
            } else {
                vec![*samples.get(*index).with_context(|| format!("index {index} outside the {} evaluated samples", samples.len()))?]
            };
            let ck = ws.trained(run.variant, run.regime, run.seed)?;
            let preds = editor(ws, &ck, run.variant).predict_masks(&picked)?;
            // Written at generation resolution so `eval --masks` can read them back.
            let k = cfg.model.gen_scale;
            let pick = |p: &regionedit::maskpred::PredictedMask| if *probs { p.probs.upsample(k) } else { p.binary.upsample(k) };
            if *all {
                for (i, p) in preds.iter().enumerate() {
                    write_pgm(&out.join(format!("{i:04}.pgm")), &pick(p))?;
                }
                println!("wrote {} masks to {}", preds.len(), out.display());
            } else {
                write_pgm(out, &pick(&preds[0]))?;
                println!("wrote {}", out.display());
            }
            Ok(Outcome::new(vec![run.seed], json!({ "masks": preds.len() })))
        }
        Cmd::PlotData { from, out } => plot_data(from, out),
        Cmd::Replay { .. } => unreachable!("handled in main"),
    }
}

fn editor<'a>(ws: &'a Workspace, ck: &'a regionedit::harness::Checkpoint, variant: Variant) -> Editor<'a> {
    Editor { model: &ck.model, store: &ck.store, variant, eval: &ws.cfg.eval, post: &ws.cfg.mask }
}

/// `NNNN.pgm` for each of the first `n` evaluated samples, binarized at 0.5.
fn read_mask_dir(dir: &Path, n: usize, cfg: &ExperimentConfig) -> Result<Vec<Grid>> {
    let (h, w) = (cfg.model.gen_h(), cfg.model.gen_w());
    (0..n)
        .map(|i| {
            let p = dir.join(format!("{i:04}.pgm"));
            let g = read_pgm(&p).with_context(|| format!("reading {}", p.display()))?;
            if (g.h, g.w) != (h, w) {
                bail!("{} is {}x{}, expected {h}x{w}", p.display(), g.h, g.w);
            }
            Ok(Grid::new(h, w, g.data.iter().map(|&v| (v >= 0.5) as u8 as f32).collect())?)
        })
        .collect()
}

fn plot_data(from: &[PathBuf], out: &Path) -> Result<Outcome> {
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("loss_curves.csv"))?;
    w.write_record(["run", "step", "total", "edit", "mask", "grad_norm", "lr", "ratio"])?;
    let mut curves = 0;
    for dir in from {
        let p = dir.join("steps.csv");
        if !p.exists() {
            continue;
        }
        curves += 1;
        let run = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        for s in read_step_log(&p)? {
            w.write_record([
                run.clone(),
                s.step.to_string(),
                s.total.to_string(),
                s.edit.to_string(),
                s.mask.map_or(String::new(), |m| m.to_string()),
                s.grad_norm.to_string(),
                s.lr.to_string(),
                s.ratio.to_string(),
            ])?;
        }
    }
    w.flush()?;

    let mut rows: Vec<MetricsRow> = Vec::new();
    for dir in from {
        for name in ["ablation.csv", "robustness.csv"] {
            let p = dir.join(name);
            if p.exists() {
                rows.extend(read_metrics_csv(&p)?);
            }
        }
    }
    // Median over seeds of every (table, variant, mask source, bucket) series point.
    let mut keys: Vec<(String, String, String, String)> = Vec::new();
    for r in &rows {
        let k = (r.table.clone(), r.variant.clone(), r.mask_source.clone(), r.bucket.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut w = csv::Writer::from_path(out.join("medians.csv"))?;
    w.write_record([
        "table", "variant", "mask_source", "bucket", "family", "magnitude", "seeds", "space", "l1_global",
        "l2_global", "l1_keep", "l1_edit", "mask_iou",
    ])?;
    for (table, variant, source, bucket) in &keys {
        let reports: Vec<_> = rows
            .iter()
            .filter(|r| &r.table == table && &r.variant == variant && &r.mask_source == source && &r.bucket == bucket)
            .map(MetricsRow::report)
            .collect();
        let m = median_report(&reports.iter().collect::<Vec<_>>());
        let (family, magnitude) = match bucket.rsplit_once('-') {
            Some((f, n)) if n.parse::<usize>().is_ok() => (f.to_string(), n.to_string()),
            _ => (bucket.clone(), "0".into()),
        };
        let iou: Vec<f64> = reports.iter().filter_map(|r| r.mask_iou).collect();
        w.write_record([
            table.clone(),
            variant.clone(),
            source.clone(),
            bucket.clone(),
            family,
            magnitude,
            reports.len().to_string(),
            METRIC_SPACE.to_string(),
            m.l1_global.to_string(),
            m.l2_global.to_string(),
            m.l1_keep.to_string(),
            m.l1_edit.to_string(),
            if iou.is_empty() { String::new() } else { median(&iou).to_string() },
        ])?;
    }
    w.flush()?;
    println!("wrote {} loss curves and {} median points to {}", curves, keys.len(), out.display());
    Ok(Outcome::new(Vec::new(), json!({ "loss_curves": curves, "median_points": keys.len() })))
}
