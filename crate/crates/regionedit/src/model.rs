//! Full editing model: frozen backbone, condition encoder, adapter stack and
//! mask predictor, wired according to the ablation flags.

use std::fmt;

use diffcore::{Float, Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterStack;
use crate::backbone::{Backbone, BackboneOut};
use crate::condenc::{downsample_mask, ConditionEncoder};
use crate::config::{LossWeights, MaskInput, MaskPostConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::latent::Grid;
use crate::maskpred::{postprocess_mask, MaskPredOut, MaskPredictor};
use crate::objectives::{mask_loss, region_weighted_edit_loss, total_loss};
use crate::synthdata::EditSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Flags {
    pub adp: bool,
    pub rl: bool,
    pub sg: bool,
    pub mp: bool,
}

/// Ablation rows. C fine-tunes the whole backbone with the region loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
}

impl Variant {
    pub const ALL: [Variant; 7] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E, Variant::F, Variant::G];

    pub fn flags(self) -> Flags {
        let f = |adp, rl, sg, mp| Flags { adp, rl, sg, mp };
        match self {
            Variant::A => f(false, false, false, false),
            Variant::B => f(true, false, false, false),
            Variant::C => f(false, true, false, false),
            Variant::D => f(true, true, false, false),
            Variant::E => f(true, true, true, false),
            Variant::F => f(true, true, false, true),
            Variant::G => f(true, true, true, true),
        }
    }

    pub fn from_flags(flags: Flags) -> Option<Variant> {
        Self::ALL.into_iter().find(|v| v.flags() == flags)
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Self::ALL
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Usage(format!("unknown variant {s:?} (expected A..G)")))
    }

    /// Loss weights after switching off the terms this variant lacks.
    pub fn loss_weights(self, base: LossWeights) -> LossWeights {
        let f = self.flags();
        LossWeights {
            alpha: if f.rl { base.alpha } else { 0.0 },
            lambda_mask: if f.mp { base.lambda_mask } else { 0.0 },
            lambda_dice: base.lambda_dice,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Decoupled,
    Coupled,
}

impl Regime {
    pub fn parse(s: &str) -> Result<Regime> {
        match s {
            "decoupled" => Ok(Regime::Decoupled),
            "coupled" => Ok(Regime::Coupled),
            other => Err(Error::Usage(format!("unknown regime {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Decoupled => "decoupled",
            Regime::Coupled => "coupled",
        }
    }
}

/// How the target-token gate is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Learned,
    /// Gate equals the binary mask.
    Hard,
    Ones,
    Zero,
}

impl GateMode {
    pub fn for_flags(flags: Flags, cfg: &ModelConfig) -> GateMode {
        match (flags.sg, cfg.hard_gate) {
            (false, _) => GateMode::Ones,
            (true, false) => GateMode::Learned,
            (true, true) => GateMode::Hard,
        }
    }
}

/// Prefixes of each parameter group in the shared store.
pub const BACKBONE: &str = "bb.";
pub const COND: &str = "cond.";
pub const ADAPTER_BLOCKS: &str = "adp.block";
pub const GATE: &str = "adp.gate.";
pub const MASKPRED: &str = "mp.";

pub struct EditModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub cond: ConditionEncoder,
    pub adapters: AdapterStack,
    pub maskpred: MaskPredictor,
}

impl EditModel {
    /// Registers every module's parameters; all start trainable.
    pub fn new<T: Float>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            backbone: Backbone::new(store, cfg)?,
            cond: ConditionEncoder::new(store, cfg)?,
            adapters: AdapterStack::new(store, cfg)?,
            maskpred: MaskPredictor::new(store, cfg)?,
            cfg: cfg.clone(),
        })
    }

    /// Freezes everything, then unfreezes the groups the variant trains.
    pub fn configure_trainable<T: Float>(store: &mut ParamStore<T>, variant: Variant) {
        let f = variant.flags();
        for id in store.ids().collect::<Vec<_>>() {
            store.set_frozen(id, true);
        }
        if variant == Variant::C {
            store.set_frozen_prefix(BACKBONE, false);
        }
        if f.adp {
            store.set_frozen_prefix(COND, false);
            store.set_frozen_prefix(ADAPTER_BLOCKS, false);
        }
        if f.adp && f.sg {
            store.set_frozen_prefix(GATE, false);
        }
        if f.mp {
            store.set_frozen_prefix(MASKPRED, false);
        }
    }

    /// Target-token gate `[B, L, 1]`. Samples whose gate mask is empty get a
    /// zero gate, so an empty edit region falls back to the plain backbone.
    pub fn gate<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        mode: GateMode,
        gate_mask: &Tensor<T>,
    ) -> Result<Var> {
        let shape = gate_mask.shape().to_vec();
        let gate = match mode {
            GateMode::Learned => self.adapters.gate.forward(g, s, gate_mask)?,
            GateMode::Hard => g.input(gate_mask.clone()),
            GateMode::Ones => g.input(Tensor::full(&shape, T::one())),
            GateMode::Zero => g.input(Tensor::zeros(&shape)),
        };
        let (b, l) = (shape[0], shape[1]);
        let live: Vec<T> = (0..b)
            .map(|i| {
                let any = gate_mask.data()[i * l..(i + 1) * l].iter().any(|&v| v != T::zero());
                if any {
                    T::one()
                } else {
                    T::zero()
                }
            })
            .collect();
        if live.iter().all(|&v| v == T::one()) {
            return Ok(gate);
        }
        let ind = g.input(Tensor::new(vec![b, 1, 1], live)?);
        Ok(g.mul(gate, ind)?)
    }

    /// Velocity for `source, z_t: [B, L, C]`, `text: [B, T, E]`. With
    /// `adapter = Some((c, gate))` every block's target tokens pass through
    /// their adapter; source and text tokens bypass it unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn velocity<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        source: Var,
        z_t: Var,
        text: Var,
        t: &[f64],
        adapter: Option<(Var, Var)>,
        collect_states: bool,
    ) -> Result<BackboneOut> {
        let seq = self.backbone.assemble_sequence(g, s, source, z_t, text)?;
        let l = self.cfg.tokens();
        let rest = self.cfg.instr_len + l;
        match adapter {
            None => self.backbone.forward(g, s, &seq, t, None, collect_states),
            Some((c, gate)) => {
                let blocks = &self.adapters.blocks;
                let mut hook = |g: &mut Graph<T>, i: usize, h0: Var| -> Result<Var> {
                    let tgt = g.slice(h0, 1, 0, l)?;
                    let other = g.slice(h0, 1, l, rest)?;
                    let h = blocks[i].forward(g, s, tgt, c, gate)?;
                    Ok(g.concat(&[h, other], 1)?)
                };
                self.backbone.forward(g, s, &seq, t, Some(&mut hook), collect_states)
            }
        }
    }

    /// Mask prediction from the token sequence at the noisy end (`z_t = z0`).
    pub fn predict<T: Float>(
        &self,
        g: &mut Graph<T>,
        s: &ParamStore<T>,
        c_inst: Var,
        source: Var,
        z0: Var,
        text: Var,
    ) -> Result<MaskPredOut> {
        let seq = self.backbone.assemble_sequence(g, s, source, z0, text)?;
        let img = g.slice(seq.tokens, 1, 0, 2 * self.cfg.tokens())?;
        self.maskpred.forward(g, s, c_inst, img)
    }
}

/// Latent-grid masks feeding the editing path.
#[derive(Clone, Debug, PartialEq)]
pub struct EditMasks {
    /// Consumed by the mask-token interpolation.
    pub soft: Grid,
    /// Consumed by the gate and the region loss.
    pub bin: Grid,
}

impl EditMasks {
    pub fn from_hi(m_hi: &Grid, cfg: &ModelConfig) -> Result<Self> {
        let p = downsample_mask(m_hi, cfg.latent_h, cfg.latent_w)?;
        Ok(Self { soft: p.m_soft, bin: p.m_bin })
    }

    pub fn from_binary(bin: Grid) -> Self {
        Self { soft: bin.clone(), bin }
    }

    pub fn eq3(&self, input: MaskInput) -> &Grid {
        match input {
            MaskInput::Fractional => &self.soft,
            MaskInput::Binary => &self.bin,
        }
    }
}

/// Stacks per-sample grids into `[B, L, 1]`.
pub fn stack_grids<T: Float>(grids: &[&Grid]) -> Result<Tensor<T>> {
    let l = grids.first().map(|g| g.data.len()).unwrap_or(0);
    let data = grids.iter().flat_map(|g| g.data.iter().map(|&v| T::from_f64_lossy(v as f64))).collect();
    Ok(Tensor::new(vec![grids.len(), l, 1], data)?)
}

/// Per-batch constant inputs gathered from samples.
pub struct Batch<T> {
    pub size: usize,
    /// `[B, L, C]`
    pub source: Tensor<T>,
    pub target: Tensor<T>,
    /// `[B, T, L_h * E]`
    pub hidden_stack: Tensor<T>,
    /// `[B, T, E]`
    pub hidden_last: Tensor<T>,
    pub gt: Vec<EditMasks>,
}

impl<T: Float> Batch<T> {
    pub fn new(samples: &[&EditSample], cfg: &ModelConfig) -> Result<Self> {
        let b = samples.len();
        let (l, c, tl, e, nh) = (cfg.tokens(), cfg.channels, cfg.instr_len, cfg.enc_dim, cfg.hidden_layers);
        let cast = |v: f32| T::from_f64_lossy(v as f64);
        let mut source = Vec::with_capacity(b * l * c);
        let mut target = Vec::with_capacity(b * l * c);
        let mut stack = Vec::with_capacity(b * tl * nh * e);
        let mut last = Vec::with_capacity(b * tl * e);
        let mut gt = Vec::with_capacity(b);
        for smp in samples {
            if smp.instr_hidden.len() != nh || smp.instr_hidden.iter().any(|h| h.shape() != [tl, e]) {
                return Err(Error::Length(format!("sample {} has mismatched instruction states", smp.seed)));
            }
            source.extend(smp.source.to_tokens().into_iter().map(cast));
            target.extend(smp.target.to_tokens().into_iter().map(cast));
            for t in 0..tl {
                for h in &smp.instr_hidden {
                    stack.extend(h.data()[t * e..(t + 1) * e].iter().map(|&v| cast(v)));
                }
            }
            last.extend(smp.instr_hidden[nh - 1].data().iter().map(|&v| cast(v)));
            gt.push(EditMasks::from_hi(&smp.mask_hi, cfg)?);
        }
        Ok(Self {
            size: b,
            source: Tensor::new(vec![b, l, c], source)?,
            target: Tensor::new(vec![b, l, c], target)?,
            hidden_stack: Tensor::new(vec![b, tl, nh * e], stack)?,
            hidden_last: Tensor::new(vec![b, tl, e], last)?,
            gt,
        })
    }
}

/// Noise, times and per-sample decisions that make one training step.
pub struct StepDraw<T> {
    /// `[B, L, C]`
    pub z0: Tensor<T>,
    pub t: Vec<f64>,
    /// Coupled regime: samples whose editing path uses the predicted mask.
    pub use_predicted: Vec<bool>,
}

pub struct LossOut {
    pub total: Var,
    pub edit: Var,
    pub mask: Option<Var>,
    pub c_inst: Option<Var>,
    pub probs: Option<Var>,
    pub v_pred: Var,
}

/// Builds the training objective of a variant on `batch`. The editing path
/// uses ground-truth masks except where `draw.use_predicted` substitutes the
/// predictor's post-processed mask.
#[allow(clippy::too_many_arguments)]
pub fn training_loss<T: Float>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    model: &EditModel,
    variant: Variant,
    weights: LossWeights,
    post: &MaskPostConfig,
    batch: &Batch<T>,
    draw: &StepDraw<T>,
) -> Result<LossOut> {
    let cfg = &model.cfg;
    let f = variant.flags();
    let w = variant.loss_weights(weights);
    let b = batch.size;
    let l = cfg.tokens();

    let mut zt = Vec::with_capacity(batch.target.len());
    let mut vs = Vec::with_capacity(batch.target.len());
    let per = l * cfg.channels;
    for i in 0..b {
        let t = T::from_f64_lossy(draw.t[i]);
        for k in i * per..(i + 1) * per {
            let (a, z1) = (draw.z0.data()[k], batch.target.data()[k]);
            zt.push((T::one() - t) * a + t * z1);
            vs.push(z1 - a);
        }
    }
    let zt = Tensor::new(vec![b, l, cfg.channels], zt)?;
    let v_star = Tensor::new(vec![b, l, cfg.channels], vs)?;

    let source = g.input(batch.source.clone());
    let text = g.input(batch.hidden_last.clone());
    let zt_v = g.input(zt);

    let mut masks: Vec<EditMasks> = batch.gt.clone();
    let mut c_inst = None;
    let mut probs = None;
    let mut mask_term = None;
    let gt_bin = stack_grids::<T>(&batch.gt.iter().map(|m| &m.bin).collect::<Vec<_>>())?;

    let adapter = if f.adp {
        let hidden = g.input(batch.hidden_stack.clone());
        let (ci, _) = model.cond.instruction_perceiver(g, s, hidden)?;
        c_inst = Some(ci);
        if f.mp {
            let z0 = g.input(draw.z0.clone());
            let out = model.predict(g, s, ci, source, z0, text)?;
            let target = gt_bin.clone().reshaped(&[b, l])?;
            let ml = mask_loss(g, out.probs, &target, w.lambda_dice)?;
            mask_term = Some(ml);
            probs = Some(out.probs);
            for (i, sub) in draw.use_predicted.iter().enumerate() {
                if *sub {
                    let p = &g.value(out.probs).data()[i * l..(i + 1) * l];
                    let grid = Grid::new(cfg.latent_h, cfg.latent_w, p.iter().map(|v| v.to_f64_lossy() as f32).collect())?;
                    masks[i] = EditMasks::from_binary(postprocess_mask(&grid, post).binary);
                }
            }
        }
        let eq3 = stack_grids::<T>(&masks.iter().map(|m| m.eq3(cfg.mask_input)).collect::<Vec<_>>())?;
        let gate_mask = stack_grids::<T>(&masks.iter().map(|m| &m.bin).collect::<Vec<_>>())?;
        let m_s = model.cond.mask_spatial_encode(g, s, &eq3)?;
        let c = model.cond.fuse(g, s, m_s, ci)?;
        let gate = model.gate(g, s, GateMode::for_flags(f, cfg), &gate_mask)?;
        Some((c, gate))
    } else {
        None
    };

    let out = model.velocity(g, s, source, zt_v, text, &draw.t, adapter, false)?;
    // The region weights always follow the ground-truth mask.
    let edit = region_weighted_edit_loss(g, out.v_pred, &v_star, &gt_bin, w.alpha)?;
    let total = total_loss(g, edit, mask_term, w.lambda_mask)?;
    Ok(LossOut { total, edit, mask: mask_term, c_inst, probs, v_pred: out.v_pred })
}
