//! The A..G ablation grid and the decoupled-vs-coupled predictor comparison.

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::harness::eval::{Editor, MaskSource, MetricsReport};
use crate::harness::io::MetricsRow;
use crate::harness::train::VariantConfig;
use crate::harness::workspace::Workspace;
use crate::model::{Regime, Variant};
use crate::synthdata::{EditSample, Split};

/// Median of `v`; the mean of the middle pair for even lengths.
pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Field-wise median over seeds.
pub fn median_report(reports: &[&MetricsReport]) -> MetricsReport {
    let f = |get: &dyn Fn(&MetricsReport) -> f64| median(&reports.iter().map(|r| get(r)).collect::<Vec<_>>());
    let o = |get: &dyn Fn(&MetricsReport) -> Option<f64>| {
        let v: Vec<f64> = reports.iter().filter_map(|r| get(r)).collect();
        (!v.is_empty()).then(|| median(&v))
    };
    MetricsReport {
        l1_global: f(&|r| r.l1_global),
        l2_global: f(&|r| r.l2_global),
        l1_keep: f(&|r| r.l1_keep),
        l1_edit: f(&|r| r.l1_edit),
        mask_iou: o(&|r| r.mask_iou),
        mask_dice: o(&|r| r.mask_dice),
        n_samples: reports.iter().map(|r| r.n_samples).min().unwrap_or(0),
        n_skipped: reports.iter().map(|r| r.n_skipped).max().unwrap_or(0),
    }
}

/// The first `max` samples of a split (all when `max` is 0).
pub fn eval_samples(ws: &Workspace, split: Split) -> Result<Vec<&EditSample>> {
    let all = ws.corpus()?.get(split);
    let max = ws.cfg.eval.max_samples;
    let n = if max == 0 { all.len() } else { max.min(all.len()) };
    if n == 0 {
        return Err(Error::Usage(format!("split {} is empty", split.name())));
    }
    Ok(all[..n].iter().collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub mask_source: &'static str,
    pub per_seed: Vec<(u64, MetricsReport)>,
}

impl AblationRow {
    pub fn median(&self) -> MetricsReport {
        median_report(&self.per_seed.iter().map(|(_, r)| r).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub split: Split,
    /// One ground-truth-mask row per variant, then the deployed G row.
    pub rows: Vec<AblationRow>,
    /// Predicted-mask rows of other mask-predicting variants (F).
    pub extra: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant, mask_source: &str) -> Option<&AblationRow> {
        self.rows.iter().chain(&self.extra).find(|r| r.variant == variant && r.mask_source == mask_source)
    }

    /// Median ground-truth-mask report of a variant.
    pub fn gt(&self, variant: Variant) -> Option<MetricsReport> {
        self.row(variant, "gt").map(AblationRow::median)
    }

    pub fn csv_rows(&self) -> Vec<MetricsRow> {
        let mut out = Vec::new();
        for row in self.rows.iter().chain(&self.extra) {
            for (seed, r) in &row.per_seed {
                out.push(MetricsRow::new(
                    "ablation",
                    &row.variant.to_string(),
                    Regime::Decoupled.name(),
                    row.mask_source,
                    self.split.name(),
                    *seed,
                    "none",
                    r,
                ));
            }
        }
        out
    }

    /// Human-readable medians.
    pub fn render(&self) -> String {
        let mut s = format!(
            "ablation, split {}, median over seeds, latent-space distances\n{:<4} {:<10} {:>9} {:>9} {:>9} {:>9} {:>7} {:>7}\n",
            self.split.name(),
            "var",
            "mask",
            "L1",
            "L2",
            "L1_keep",
            "L1_edit",
            "IoU",
            "Dice"
        );
        for row in self.rows.iter().chain(&self.extra) {
            let m = row.median();
            let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
            s.push_str(&format!(
                "{:<4} {:<10} {:>9.5} {:>9.5} {:>9.5} {:>9.5} {:>7} {:>7}\n",
                row.variant.to_string(),
                row.mask_source,
                m.l1_global,
                m.l2_global,
                m.l1_keep,
                m.l1_edit,
                opt(m.mask_iou),
                opt(m.mask_dice)
            ));
        }
        s
    }
}

/// Rows may differ only in the flag set and what the flags switch off.
pub fn assert_protocol_purity(configs: &[VariantConfig], base: LossWeights) -> Result<()> {
    let Some(first) = configs.first() else { return Ok(()) };
    for vc in configs {
        let bad: Vec<_> =
            first.diff(vc).into_iter().filter(|f| !matches!(*f, "variant" | "flags" | "loss")).collect();
        if !bad.is_empty() {
            return Err(Error::Config(format!("ablation rows {} and {} differ in {bad:?}", first.variant, vc.variant)));
        }
        if vc.loss != vc.variant.loss_weights(base) {
            return Err(Error::Config(format!("variant {} loss weights are not flag-derived", vc.variant)));
        }
    }
    Ok(())
}

/// Trains (or loads) every variant for every seed and evaluates it on `split`.
pub fn run_ablation(ws: &Workspace, variants: &[Variant], seeds: &[u64], split: Split) -> Result<AblationTable> {
    let samples = eval_samples(ws, split)?;
    for &seed in seeds {
        let planned: Vec<_> = variants.iter().map(|&v| VariantConfig::new(&ws.cfg, v, Regime::Decoupled, seed)).collect();
        assert_protocol_purity(&planned, ws.cfg.train.loss)?;
    }
    let mut rows: Vec<AblationRow> = Vec::new();
    let mut deployed: Vec<AblationRow> = Vec::new();
    for &v in variants {
        let mut gt_row = AblationRow { variant: v, mask_source: "gt", per_seed: Vec::new() };
        let mut pred_row = AblationRow { variant: v, mask_source: "predicted", per_seed: Vec::new() };
        for &seed in seeds {
            let ck = ws.trained(v, Regime::Decoupled, seed)?;
            if ck.vc != VariantConfig::new(&ws.cfg, v, Regime::Decoupled, seed) {
                return Err(Error::Config(format!("checkpoint of {v} seed {seed} does not match the planned run")));
            }
            let ed = Editor { model: &ck.model, store: &ck.store, variant: v, eval: &ws.cfg.eval, post: &ws.cfg.mask };
            gt_row.per_seed.push((seed, ed.evaluate(&samples, &MaskSource::Gt)?));
            if v.flags().mp {
                pred_row.per_seed.push((seed, ed.evaluate(&samples, &MaskSource::Predicted)?));
            }
        }
        rows.push(gt_row);
        if v.flags().mp {
            deployed.push(pred_row);
        }
    }
    let (g_rows, extra): (Vec<_>, Vec<_>) = deployed.into_iter().partition(|r| r.variant == Variant::G);
    rows.extend(g_rows);
    Ok(AblationTable { split, rows, extra })
}

/// Mask IoU/Dice of variant G's predictor under each regime, per seed.
#[derive(Clone, Debug, PartialEq)]
pub struct RegimeComparison {
    pub split: Split,
    /// `(regime, seed, iou, dice)`
    pub cells: Vec<(Regime, u64, f64, f64)>,
}

impl RegimeComparison {
    pub fn median_iou(&self, regime: Regime) -> f64 {
        median(&self.cells.iter().filter(|c| c.0 == regime).map(|c| c.2).collect::<Vec<_>>())
    }

    pub fn median_dice(&self, regime: Regime) -> f64 {
        median(&self.cells.iter().filter(|c| c.0 == regime).map(|c| c.3).collect::<Vec<_>>())
    }
}

pub fn compare_regimes(ws: &Workspace, seeds: &[u64], split: Split) -> Result<RegimeComparison> {
    let samples = eval_samples(ws, split)?;
    let mut cells = Vec::new();
    for regime in [Regime::Decoupled, Regime::Coupled] {
        for &seed in seeds {
            let ck = ws.trained(Variant::G, regime, seed)?;
            let ed = Editor {
                model: &ck.model,
                store: &ck.store,
                variant: Variant::G,
                eval: &ws.cfg.eval,
                post: &ws.cfg.mask,
            };
            let (iou, dice) = ed.mask_quality(&samples)?;
            cells.push((regime, seed, iou, dice));
        }
    }
    Ok(RegimeComparison { split, cells })
}
