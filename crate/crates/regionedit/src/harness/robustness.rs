//! Variant G under deliberately wrong masks: eroded, dilated and shifted
//! versions of the ground truth fed through the supplied-mask path.

use crate::config::RobustnessConfig;
use crate::error::Result;
use crate::harness::ablation::{eval_samples, median_report};
use crate::harness::eval::{Editor, MaskSource, MetricsReport};
use crate::harness::io::MetricsRow;
use crate::harness::workspace::Workspace;
use crate::model::{Regime, Variant};
use crate::morph::{morph_perturb, PerturbFamily, PerturbationSpec};
use crate::synthdata::{EditSample, Split};

pub const ANCHOR_GT: &str = "gt";
pub const ANCHOR_PREDICTED: &str = "predicted";

/// Erode and dilate at every magnitude, then the three shifts.
pub fn robustness_specs(cfg: &RobustnessConfig) -> Vec<PerturbationSpec> {
    let mut out = Vec::new();
    for family in [PerturbFamily::Erode, PerturbFamily::Dilate] {
        for &magnitude in &cfg.magnitudes {
            out.push(PerturbationSpec { family, magnitude });
        }
    }
    for family in [PerturbFamily::ShiftX, PerturbFamily::ShiftY, PerturbFamily::ShiftXy] {
        out.push(PerturbationSpec { family, magnitude: cfg.shift });
    }
    out
}

/// Evaluates with every sample's mask perturbed by `spec`. Samples whose
/// mask erodes away entirely are skipped and counted.
pub fn evaluate_perturbed(editor: &Editor, samples: &[&EditSample], spec: PerturbationSpec) -> Result<MetricsReport> {
    let mut kept = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    let mut skipped = 0;
    for s in samples {
        let p = morph_perturb(&s.mask_hi, spec)?;
        if p.emptied {
            skipped += 1;
        } else {
            kept.push(*s);
            masks.push(p.mask);
        }
    }
    let mut report = if kept.is_empty() {
        crate::harness::eval::MetricsAccumulator::default().finish()
    } else {
        editor.evaluate(&kept, &MaskSource::Supplied(masks))?
    };
    report.n_skipped = skipped;
    Ok(report)
}

/// One table of buckets for a single checkpoint: the two anchors, then one
/// row per perturbation.
pub fn robustness_sweep(
    editor: &Editor,
    samples: &[&EditSample],
    specs: &[PerturbationSpec],
) -> Result<Vec<(String, MetricsReport)>> {
    let mut rows = vec![(ANCHOR_GT.to_string(), editor.evaluate(samples, &MaskSource::Gt)?)];
    for &spec in specs {
        rows.push((spec.label(), evaluate_perturbed(editor, samples, spec)?));
    }
    rows.push((ANCHOR_PREDICTED.to_string(), editor.evaluate(samples, &MaskSource::Predicted)?));
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessTable {
    pub split: Split,
    pub specs: Vec<PerturbationSpec>,
    /// `(seed, buckets)`
    pub per_seed: Vec<(u64, Vec<(String, MetricsReport)>)>,
}

impl RobustnessTable {
    pub fn buckets(&self) -> Vec<String> {
        self.per_seed.first().map(|(_, b)| b.iter().map(|(n, _)| n.clone()).collect()).unwrap_or_default()
    }

    pub fn median(&self, bucket: &str) -> Option<MetricsReport> {
        let reports: Vec<&MetricsReport> = self
            .per_seed
            .iter()
            .filter_map(|(_, rows)| rows.iter().find(|(n, _)| n == bucket).map(|(_, r)| r))
            .collect();
        (!reports.is_empty()).then(|| median_report(&reports))
    }

    pub fn csv_rows(&self) -> Vec<MetricsRow> {
        let mut out = Vec::new();
        for (seed, rows) in &self.per_seed {
            for (bucket, r) in rows {
                let source = if bucket == ANCHOR_PREDICTED {
                    "predicted"
                } else if bucket == ANCHOR_GT {
                    "gt"
                } else {
                    "supplied"
                };
                out.push(MetricsRow::new(
                    "robustness",
                    "G",
                    Regime::Decoupled.name(),
                    source,
                    self.split.name(),
                    *seed,
                    bucket,
                    r,
                ));
            }
        }
        out
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "robustness of G, split {}, median over seeds, latent-space distances\n{:<12} {:>9} {:>9} {:>9} {:>9} {:>8}\n",
            self.split.name(),
            "bucket",
            "L1",
            "L2",
            "L1_keep",
            "L1_edit",
            "skipped"
        );
        for b in self.buckets() {
            if let Some(m) = self.median(&b) {
                s.push_str(&format!(
                    "{:<12} {:>9.5} {:>9.5} {:>9.5} {:>9.5} {:>8}\n",
                    b, m.l1_global, m.l2_global, m.l1_keep, m.l1_edit, m.n_skipped
                ));
            }
        }
        s
    }
}

pub fn run_robustness(ws: &Workspace, seeds: &[u64], split: Split) -> Result<RobustnessTable> {
    let samples = eval_samples(ws, split)?;
    let specs = robustness_specs(&ws.cfg.robustness);
    let mut per_seed = Vec::new();
    for &seed in seeds {
        let ck = ws.trained(Variant::G, Regime::Decoupled, seed)?;
        let ed = Editor { model: &ck.model, store: &ck.store, variant: Variant::G, eval: &ws.cfg.eval, post: &ws.cfg.mask };
        per_seed.push((seed, robustness_sweep(&ed, &samples, &specs)?));
    }
    Ok(RobustnessTable { split, specs, per_seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_grid_matches_config() {
        let specs = robustness_specs(&RobustnessConfig::for_grid(64));
        let labels: Vec<_> = specs.iter().map(|s| s.label()).collect();
        assert_eq!(
            labels,
            ["erode-4", "erode-8", "erode-16", "dilate-4", "dilate-8", "dilate-16", "shift-x-8", "shift-y-8", "shift-xy-8"]
        );
    }
}
