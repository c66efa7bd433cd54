//! Euler sampling of edits and latent-space metrics.

use diffcore::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{EvalConfig, MaskPostConfig};
use crate::error::{Error, Result};
use crate::latent::{Grid, LatentGrid};
use crate::maskpred::{postprocess_mask, PredictedMask};
use crate::model::{stack_grids, Batch, EditMasks, EditModel, GateMode, Variant};
use crate::synthdata::EditSample;

/// Where the editing path's mask comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskSource {
    Gt,
    Predicted,
    /// One generation-resolution mask per sample.
    Supplied(Vec<Grid>),
}

impl MaskSource {
    pub fn name(&self) -> &'static str {
        match self {
            MaskSource::Gt => "gt",
            MaskSource::Predicted => "predicted",
            MaskSource::Supplied(_) => "supplied",
        }
    }

    /// Parses `gt` or `predicted`; `supplied` needs masks and is built directly.
    pub fn parse(s: &str) -> Result<MaskSource> {
        match s {
            "gt" => Ok(MaskSource::Gt),
            "predicted" => Ok(MaskSource::Predicted),
            other => Err(Error::UnknownMaskSource(other.to_string())),
        }
    }
}

/// Everything needed to run a trained variant.
pub struct Editor<'a> {
    pub model: &'a EditModel,
    pub store: &'a ParamStore<f32>,
    pub variant: Variant,
    pub eval: &'a EvalConfig,
    pub post: &'a MaskPostConfig,
}

pub struct EditOutput {
    pub output: LatentGrid,
    pub predicted: Option<PredictedMask>,
}

/// Starting noise of a sample; independent of batch composition.
pub fn sample_noise(noise_seed: u64, sample_seed: u64, n: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed ^ sample_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

impl Editor<'_> {
    /// Integrates the velocity field from noise (t = 0) to t = 1 with uniform
    /// Euler steps. The condition stream and gate are computed once.
    pub fn sample_edit(&self, samples: &[&EditSample], source: &MaskSource) -> Result<Vec<EditOutput>> {
        let cfg = &self.model.cfg;
        let flags = self.variant.flags();
        let (b, l, c) = (samples.len(), cfg.tokens(), cfg.channels);
        if b == 0 {
            return Ok(Vec::new());
        }
        let batch = Batch::<f32>::new(samples, cfg)?;
        let mut z: Vec<f32> = samples
            .iter()
            .flat_map(|s| sample_noise(self.eval.noise_seed, s.seed, l * c))
            .collect();

        let mut predicted: Vec<Option<PredictedMask>> = vec![None; b];
        let cond = if flags.adp {
            let mut g = Graph::new();
            let s = self.store;
            let hidden = g.input(batch.hidden_stack.clone());
            let (c_inst, _) = self.model.cond.instruction_perceiver(&mut g, s, hidden)?;
            let masks: Vec<EditMasks> = match source {
                MaskSource::Gt => batch.gt.clone(),
                MaskSource::Supplied(m) => {
                    if m.len() != b {
                        return Err(Error::Length(format!("{} supplied masks for {b} samples", m.len())));
                    }
                    m.iter().map(|hi| EditMasks::from_hi(hi, cfg)).collect::<Result<_>>()?
                }
                MaskSource::Predicted => {
                    if !flags.mp {
                        return Err(Error::Usage(format!("variant {} has no mask predictor", self.variant)));
                    }
                    let pms = self.run_predictor(&mut g, c_inst, &batch, &z)?;
                    let masks = pms.iter().map(|pm| EditMasks::from_binary(pm.binary.clone())).collect();
                    predicted = pms.into_iter().map(Some).collect();
                    masks
                }
            };
            let eq3 = stack_grids::<f32>(&masks.iter().map(|m| m.eq3(cfg.mask_input)).collect::<Vec<_>>())?;
            let gate_mask = stack_grids::<f32>(&masks.iter().map(|m| &m.bin).collect::<Vec<_>>())?;
            let m_s = self.model.cond.mask_spatial_encode(&mut g, s, &eq3)?;
            let cv = self.model.cond.fuse(&mut g, s, m_s, c_inst)?;
            let gv = self.model.gate(&mut g, s, GateMode::for_flags(flags, cfg), &gate_mask)?;
            Some((g.value(cv).clone(), g.value(gv).clone()))
        } else {
            if matches!(source, MaskSource::Predicted) {
                return Err(Error::Usage(format!("variant {} has no mask predictor", self.variant)));
            }
            None
        };

        let n = self.eval.sampler_steps.max(1);
        let dt = 1.0 / n as f32;
        for k in 0..n {
            let t = vec![k as f64 / n as f64; b];
            let mut g = Graph::new();
            let src = g.input(batch.source.clone());
            let text = g.input(batch.hidden_last.clone());
            let zv = g.input(Tensor::new(vec![b, l, c], z.clone())?);
            let adapter = cond.as_ref().map(|(cv, gv)| (g.input(cv.clone()), g.input(gv.clone())));
            let out = self.model.velocity(&mut g, self.store, src, zv, text, &t, adapter, false)?;
            for (zi, vi) in z.iter_mut().zip(g.value(out.v_pred).data()) {
                *zi += dt * vi;
            }
        }
        (0..b)
            .map(|i| {
                Ok(EditOutput {
                    output: LatentGrid::from_tokens(&z[i * l * c..(i + 1) * l * c], c, cfg.latent_h, cfg.latent_w)?,
                    predicted: predicted[i].take(),
                })
            })
            .collect()
    }

    /// Predictor output for a batch whose starting noise is `z`.
    fn run_predictor(
        &self,
        g: &mut Graph<f32>,
        c_inst: diffcore::Var,
        batch: &Batch<f32>,
        z: &[f32],
    ) -> Result<Vec<PredictedMask>> {
        let cfg = &self.model.cfg;
        let (b, l, c) = (batch.size, cfg.tokens(), cfg.channels);
        let src = g.input(batch.source.clone());
        let text = g.input(batch.hidden_last.clone());
        let z0 = g.input(Tensor::new(vec![b, l, c], z.to_vec())?);
        let out = self.model.predict(g, self.store, c_inst, src, z0, text)?;
        let probs = g.value(out.probs).data();
        (0..b)
            .map(|i| {
                let grid = Grid::new(cfg.latent_h, cfg.latent_w, probs[i * l..(i + 1) * l].to_vec())?;
                Ok(postprocess_mask(&grid, self.post))
            })
            .collect()
    }

    /// The deployed mask of each sample, exactly as `sample_edit` would use it,
    /// without running the sampler.
    pub fn predict_masks(&self, samples: &[&EditSample]) -> Result<Vec<PredictedMask>> {
        let flags = self.variant.flags();
        if !flags.adp || !flags.mp {
            return Err(Error::Usage(format!("variant {} has no mask predictor", self.variant)));
        }
        let cfg = &self.model.cfg;
        let per = cfg.tokens() * cfg.channels;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.eval.batch.max(1)) {
            let batch = Batch::<f32>::new(chunk, cfg)?;
            let z: Vec<f32> = chunk.iter().flat_map(|s| sample_noise(self.eval.noise_seed, s.seed, per)).collect();
            let mut g = Graph::new();
            let hidden = g.input(batch.hidden_stack.clone());
            let (c_inst, _) = self.model.cond.instruction_perceiver(&mut g, self.store, hidden)?;
            out.extend(self.run_predictor(&mut g, c_inst, &batch, &z)?);
        }
        Ok(out)
    }

    /// Mean IoU and Dice of the thresholded predictions against the GT masks.
    pub fn mask_quality(&self, samples: &[&EditSample]) -> Result<(f64, f64)> {
        let preds = self.predict_masks(samples)?;
        let mut acc = MetricsAccumulator::default();
        for (smp, pm) in samples.iter().zip(&preds) {
            let gt = EditMasks::from_hi(&smp.mask_hi, &self.model.cfg)?;
            let (iou, dice) = overlap(&pm.thresholded, &gt.bin);
            acc.iou.0 += iou;
            acc.iou.1 += 1;
            acc.dice.0 += dice;
            acc.dice.1 += 1;
        }
        let r = acc.finish();
        Ok((r.mask_iou.unwrap_or(f64::NAN), r.mask_dice.unwrap_or(f64::NAN)))
    }

    /// Samples and scores `samples` in fixed order, in chunks of the eval batch size.
    pub fn evaluate(&self, samples: &[&EditSample], source: &MaskSource) -> Result<MetricsReport> {
        if samples.is_empty() {
            return Err(Error::Usage("evaluation split is empty".into()));
        }
        let supplied = match source {
            MaskSource::Supplied(m) if m.len() != samples.len() => {
                return Err(Error::Length(format!("{} supplied masks for {} samples", m.len(), samples.len())))
            }
            MaskSource::Supplied(m) => Some(m),
            _ => None,
        };
        let mut acc = MetricsAccumulator::default();
        let bs = self.eval.batch.max(1);
        for (ci, chunk) in samples.chunks(bs).enumerate() {
            let src = match supplied {
                Some(m) => MaskSource::Supplied(m[ci * bs..ci * bs + chunk.len()].to_vec()),
                None => source.clone(),
            };
            let outs = self.sample_edit(chunk, &src)?;
            for (smp, out) in chunk.iter().zip(&outs) {
                let gt = EditMasks::from_hi(&smp.mask_hi, &self.model.cfg)?;
                acc.add(&sample_metrics(&out.output, smp, &gt.bin, out.predicted.as_ref().map(|p| &p.thresholded)));
            }
        }
        Ok(acc.finish())
    }
}

/// Per-sample metrics; regions follow the latent-grid binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub l1_global: f64,
    pub l2_global: f64,
    pub l1_keep: Option<f64>,
    pub l1_edit: Option<f64>,
    /// Output vs target outside the mask; with `l1_edit` it recombines into `l1_global`.
    pub l1_keep_vs_target: Option<f64>,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub n_keep: usize,
    pub n_edit: usize,
}

pub fn sample_metrics(output: &LatentGrid, sample: &EditSample, gt_bin: &Grid, pred: Option<&Grid>) -> SampleMetrics {
    let (c, l) = (output.channels, output.tokens());
    let (mut l1, mut l2) = (0.0f64, 0.0f64);
    let (mut keep, mut keep_t, mut edit) = (0.0f64, 0.0f64, 0.0f64);
    let (mut n_keep, mut n_edit) = (0usize, 0usize);
    for ch in 0..c {
        for i in 0..l {
            let k = ch * l + i;
            let o = output.data[k] as f64;
            let t = sample.target.data[k] as f64;
            let s = sample.source.data[k] as f64;
            l1 += (o - t).abs();
            l2 += (o - t).powi(2);
            if gt_bin.data[i] == 1.0 {
                edit += (o - t).abs();
                n_edit += 1;
            } else {
                keep += (o - s).abs();
                keep_t += (o - t).abs();
                n_keep += 1;
            }
        }
    }
    let n = (c * l) as f64;
    let ratio = |a: f64, m: usize| if m == 0 { None } else { Some(a / m as f64) };
    let (iou, dice) = match pred {
        Some(p) => {
            let (iou, dice) = overlap(p, gt_bin);
            (Some(iou), Some(dice))
        }
        None => (None, None),
    };
    SampleMetrics {
        l1_global: l1 / n,
        l2_global: l2 / n,
        l1_keep: ratio(keep, n_keep),
        l1_edit: ratio(edit, n_edit),
        l1_keep_vs_target: ratio(keep_t, n_keep),
        iou,
        dice,
        n_keep,
        n_edit,
    }
}

/// IoU and Dice of two binary grids; both are 1 when both masks are empty.
pub fn overlap(pred: &Grid, gt: &Grid) -> (f64, f64) {
    let (mut inter, mut sp, mut sg) = (0usize, 0usize, 0usize);
    for (a, b) in pred.data.iter().zip(&gt.data) {
        let (a, b) = (*a == 1.0, *b == 1.0);
        inter += (a && b) as usize;
        sp += a as usize;
        sg += b as usize;
    }
    let union = sp + sg - inter;
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    let dice = if sp + sg == 0 { 1.0 } else { 2.0 * inter as f64 / (sp + sg) as f64 };
    (iou, dice)
}

/// Split-level averages. Mask metrics are present only when a predictor ran.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub l1_global: f64,
    pub l2_global: f64,
    pub l1_keep: f64,
    pub l1_edit: f64,
    pub mask_iou: Option<f64>,
    pub mask_dice: Option<f64>,
    pub n_samples: usize,
    pub n_skipped: usize,
}

impl MetricsReport {
    pub fn all_finite(&self) -> bool {
        [self.l1_global, self.l2_global, self.l1_keep, self.l1_edit].iter().all(|v| v.is_finite())
            && self.mask_iou.is_none_or(|v| v.is_finite())
            && self.mask_dice.is_none_or(|v| v.is_finite())
    }
}

#[derive(Default)]
pub struct MetricsAccumulator {
    n: usize,
    skipped: usize,
    l1: f64,
    l2: f64,
    keep: (f64, usize),
    edit: (f64, usize),
    iou: (f64, usize),
    dice: (f64, usize),
}

impl MetricsAccumulator {
    pub fn add(&mut self, m: &SampleMetrics) {
        self.n += 1;
        self.l1 += m.l1_global;
        self.l2 += m.l2_global;
        let push = |acc: &mut (f64, usize), v: Option<f64>| {
            if let Some(v) = v {
                acc.0 += v;
                acc.1 += 1;
            }
        };
        push(&mut self.keep, m.l1_keep);
        push(&mut self.edit, m.l1_edit);
        push(&mut self.iou, m.iou);
        push(&mut self.dice, m.dice);
    }

    pub fn skip(&mut self) {
        self.skipped += 1;
    }

    pub fn finish(&self) -> MetricsReport {
        let mean = |a: (f64, usize)| if a.1 == 0 { f64::NAN } else { a.0 / a.1 as f64 };
        let opt = |a: (f64, usize)| if a.1 == 0 { None } else { Some(a.0 / a.1 as f64) };
        let n = self.n.max(1) as f64;
        MetricsReport {
            l1_global: if self.n == 0 { f64::NAN } else { self.l1 / n },
            l2_global: if self.n == 0 { f64::NAN } else { self.l2 / n },
            l1_keep: mean(self.keep),
            l1_edit: mean(self.edit),
            mask_iou: opt(self.iou),
            mask_dice: opt(self.dice),
            n_samples: self.n,
            n_skipped: self.skipped,
        }
    }
}
