//! Exact structural checks on small random models: the identity gate,
//! gradient correctness, and loss decoupling.

use diffcore::{grad_check, seeded_init, Float, GradCheckReport, Graph, Init, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{LossWeights, MaskPostConfig, ModelConfig};
use crate::error::Result;
use crate::model::{stack_grids, training_loss, Batch, EditModel, GateMode, StepDraw, Variant, BACKBONE, MASKPRED};
use crate::synthdata::{sample_for_seed, EditSample, Split, ToyEncoder};

/// Adds `N(0, std^2)` noise to every parameter, so zero-initialized heads do
/// not hide gradient paths.
pub fn jitter_params<T: Float>(store: &mut ParamStore<T>, seed: u64, std: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let noise: Tensor<T> = seeded_init(&shape, seed ^ store.entry(id).seed, Init::Normal { std });
        for (v, n) in store.get_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v = *v + *n;
        }
    }
}

/// `n` corpus-style samples drawn from the training distribution.
pub fn random_samples(cfg: &ModelConfig, n: usize, seed: u64) -> Result<Vec<EditSample>> {
    let encoder = ToyEncoder::new(cfg, seed)?;
    (0..n as u64).map(|i| sample_for_seed(seed.wrapping_mul(31).wrapping_add(i), Split::Train, cfg, &encoder)).collect()
}

fn random_draw<T: Float>(cfg: &ModelConfig, b: usize, rng: &mut ChaCha8Rng) -> Result<StepDraw<T>> {
    let n = b * cfg.tokens() * cfg.channels;
    let z0: Vec<T> = (0..n).map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal))).collect();
    Ok(StepDraw {
        z0: Tensor::new(vec![b, cfg.tokens(), cfg.channels], z0)?,
        t: (0..b).map(|_| rng.random::<f64>()).collect(),
        use_predicted: vec![false; b],
    })
}

/// Outcome of the zero-gate identity check.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityReport {
    pub cases: usize,
    pub bitwise_equal: usize,
}

/// For `cases` random inputs and random adapter parameters, compares variant
/// G's velocity under a zero gate with the hook-free backbone, bit for bit.
pub fn identity_check(cfg: &ModelConfig, cases: usize, seed: u64) -> Result<IdentityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut equal = 0;
    for case in 0..cases {
        let mut store = ParamStore::<f32>::new(seed ^ (case as u64).wrapping_mul(0x9e37_79b9));
        let model = EditModel::new(&mut store, cfg)?;
        jitter_params(&mut store, rng.random(), 0.5);
        let smp = random_samples(cfg, 1, rng.random())?;
        let batch = Batch::<f32>::new(&[&smp[0]], cfg)?;
        let draw = random_draw::<f32>(cfg, 1, &mut rng)?;

        let mut g = Graph::new();
        let src = g.input(batch.source.clone());
        let text = g.input(batch.hidden_last.clone());
        let z = g.input(draw.z0.clone());
        let plain = model.velocity(&mut g, &store, src, z, text, &draw.t, None, false)?;

        let hidden = g.input(batch.hidden_stack.clone());
        let (c_inst, _) = model.cond.instruction_perceiver(&mut g, &store, hidden)?;
        let eq3 = stack_grids::<f32>(&[&batch.gt[0].soft])?;
        let m_s = model.cond.mask_spatial_encode(&mut g, &store, &eq3)?;
        let c = model.cond.fuse(&mut g, &store, m_s, c_inst)?;
        let bin = stack_grids::<f32>(&[&batch.gt[0].bin])?;
        let gate = model.gate(&mut g, &store, GateMode::Zero, &bin)?;
        let adapted = model.velocity(&mut g, &store, src, z, text, &draw.t, Some((c, gate)), false)?;
        if g.value(plain.v_pred).bit_eq(g.value(adapted.v_pred)) {
            equal += 1;
        }
    }
    Ok(IdentityReport { cases, bitwise_equal: equal })
}

/// Central-difference check of a variant's full training loss in f64 on a
/// one-sample batch, over every trainable parameter.
pub fn gradcheck_variant(cfg: &ModelConfig, variant: Variant, seed: u64, eps: f64) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new(seed);
    let model = EditModel::new(&mut store, cfg)?;
    jitter_params(&mut store, seed ^ 0x6a4d, 0.3);
    EditModel::configure_trainable(&mut store, variant);
    let smp = random_samples(cfg, 1, seed)?;
    let batch = Batch::<f64>::new(&[&smp[0]], cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd4a3);
    let draw = random_draw::<f64>(cfg, 1, &mut rng)?;
    let weights = LossWeights::default();
    let post = MaskPostConfig::default();
    Ok(grad_check(&mut store, eps, |g, s| {
        training_loss(g, s, &model, variant, weights, &post, &batch, &draw)
            .map(|o| o.total)
            .map_err(|e| diffcore::DiffError::Invalid { op: "training_loss", msg: e.to_string() })
    })?)
}

/// Which parameter groups each loss term reaches.
#[derive(Clone, Debug, PartialEq)]
pub struct DecouplingReport {
    /// Parameters outside the predictor with a nonzero mask-loss gradient.
    pub mask_leaks: Vec<String>,
    /// Predictor parameters with a nonzero edit-loss gradient.
    pub edit_leaks: Vec<String>,
    /// The mask loss does reach the predictor and the edit loss does reach the rest.
    pub both_paths_live: bool,
}

/// Differentiates `lambda_mask * mask_loss` and the edit loss separately,
/// with every parameter (backbone included) trainable.
pub fn decoupling_check(cfg: &ModelConfig, seed: u64, batch_size: usize) -> Result<DecouplingReport> {
    let mut store = ParamStore::<f64>::new(seed);
    let model = EditModel::new(&mut store, cfg)?;
    jitter_params(&mut store, seed ^ 0x77, 0.3);
    for id in store.ids().collect::<Vec<_>>() {
        store.set_frozen(id, false);
    }
    let samples = random_samples(cfg, batch_size, seed)?;
    let refs: Vec<&EditSample> = samples.iter().collect();
    let batch = Batch::<f64>::new(&refs, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1234);
    let draw = random_draw::<f64>(cfg, batch_size, &mut rng)?;
    let weights = LossWeights::default();
    let mut g = Graph::new();
    let out = training_loss(&mut g, &store, &model, Variant::G, weights, &MaskPostConfig::default(), &batch, &draw)?;
    let mask = out.mask.expect("variant G has a mask loss");
    let scaled = g.scale(mask, weights.lambda_mask);
    let gm = g.backward(scaled)?.params(&g, &store);
    let ge = g.backward(out.edit)?.params(&g, &store);
    let mut mask_leaks = Vec::new();
    let mut edit_leaks = Vec::new();
    let (mut mask_live, mut edit_live) = (false, false);
    let mut backbone_live = false;
    for id in store.ids() {
        let name = &store.entry(id).name;
        if name.starts_with(MASKPRED) {
            if !ge.is_all_zero(id) {
                edit_leaks.push(name.clone());
            }
            mask_live |= !gm.is_all_zero(id);
        } else {
            if !gm.is_all_zero(id) {
                mask_leaks.push(name.clone());
            }
            edit_live |= !ge.is_all_zero(id);
            backbone_live |= name.starts_with(BACKBONE) && !ge.is_all_zero(id);
        }
    }
    Ok(DecouplingReport { mask_leaks, edit_leaks, both_paths_live: mask_live && edit_live && backbone_live })
}
