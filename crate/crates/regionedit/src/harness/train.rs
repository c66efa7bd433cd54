//! Stage-0 backbone pretraining and per-variant adapter training.

use diffcore::{AdamW, AdamWConfig, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, LossWeights};
use crate::error::{Error, Result};
use crate::model::{training_loss, Batch, EditModel, Flags, Regime, StepDraw, Variant, BACKBONE};
use crate::synthdata::Corpus;

/// Seed of the shared Stage-0 parameter store.
pub const STAGE0_SEED: u64 = 0x57a6e0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub edit: f64,
    pub mask: Option<f64>,
    pub grad_norm: f64,
    pub lr: f64,
    /// Coupled-curriculum substitution probability at this step.
    pub ratio: f64,
}

/// Everything that determines one variant's training run beyond the shared
/// corpus and Stage-0 backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantConfig {
    pub variant: Variant,
    pub flags: Flags,
    pub regime: Regime,
    pub loss: LossWeights,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl VariantConfig {
    pub fn new(cfg: &ExperimentConfig, variant: Variant, regime: Regime, seed: u64) -> Self {
        Self {
            variant,
            flags: variant.flags(),
            regime,
            loss: variant.loss_weights(cfg.train.loss),
            steps: cfg.train.steps,
            batch: cfg.train.batch,
            seed,
            optimizer: cfg.train.optimizer.clone(),
        }
    }

    /// Names of the fields that differ from `other`.
    pub fn diff(&self, other: &VariantConfig) -> Vec<&'static str> {
        let mut d = Vec::new();
        let mut check = |name, same: bool| {
            if !same {
                d.push(name);
            }
        };
        check("variant", self.variant == other.variant);
        check("flags", self.flags == other.flags);
        check("regime", self.regime == other.regime);
        check("loss", self.loss == other.loss);
        check("steps", self.steps == other.steps);
        check("batch", self.batch == other.batch);
        check("seed", self.seed == other.seed);
        check("optimizer", self.optimizer == other.optimizer);
        d
    }
}

pub struct Trained {
    pub store: ParamStore<f32>,
    pub log: Vec<StepLog>,
}

/// Fresh store with every module registered from `seed`.
pub fn init_store(cfg: &ExperimentConfig, seed: u64) -> Result<(ParamStore<f32>, EditModel)> {
    let mut store = ParamStore::new(seed);
    let model = EditModel::new(&mut store, &cfg.model)?;
    Ok((store, model))
}

/// Copies the backbone tensors (values and frozen flags) from `from`.
pub fn adopt_backbone(store: &mut ParamStore<f32>, from: &ParamStore<f32>) -> Result<()> {
    for e in from.entries().iter().filter(|e| e.name.starts_with(BACKBONE)) {
        let id = store.id(&e.name)?;
        if store.get(id).shape() != e.value.shape() {
            return Err(Error::Config(format!("backbone tensor {} changed shape", e.name)));
        }
        *store.get_mut(id) = e.value.clone();
    }
    Ok(())
}

struct Loop<'a> {
    cfg: &'a ExperimentConfig,
    corpus: &'a Corpus,
    model: &'a EditModel,
    vc: &'a VariantConfig,
}

impl Loop<'_> {
    fn run(&self, store: &mut ParamStore<f32>) -> Result<Vec<StepLog>> {
        let mcfg = &self.cfg.model;
        let vc = self.vc;
        let mut opt = AdamW::new(vc.optimizer.clone(), store);
        let mut rng = ChaCha8Rng::seed_from_u64(vc.seed ^ 0x0ba7_c4e5);
        let train = &self.corpus.train;
        let b = vc.batch;
        let per = mcfg.tokens() * mcfg.channels;
        let mut log = Vec::with_capacity(vc.steps);
        for step in 0..vc.steps {
            let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..train.len())).collect();
            let samples: Vec<_> = idx.iter().map(|&i| &train[i]).collect();
            let batch = Batch::<f32>::new(&samples, mcfg)?;
            let z0: Vec<f32> = (0..b * per).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            let t: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
            let ratio = match vc.regime {
                Regime::Decoupled => 0.0,
                Regime::Coupled if vc.steps > 1 => step as f64 / (vc.steps - 1) as f64,
                Regime::Coupled => 1.0,
            };
            let use_predicted: Vec<bool> = (0..b).map(|_| rng.random::<f64>() < ratio).collect();
            let draw = StepDraw { z0: Tensor::new(vec![b, mcfg.tokens(), mcfg.channels], z0)?, t, use_predicted };

            let mut g = Graph::new();
            let out = training_loss(&mut g, store, self.model, vc.variant, vc.loss, &self.cfg.mask, &batch, &draw)?;
            let total = g.value(out.total).item() as f64;
            if !total.is_finite() {
                return Err(Error::Diverged { step });
            }
            let grads = g.backward(out.total)?.params(&g, store);
            let stats = opt.step(store, &grads);
            log.push(StepLog {
                step,
                total,
                edit: g.value(out.edit).item() as f64,
                mask: out.mask.map(|m| g.value(m).item() as f64),
                grad_norm: stats.grad_norm,
                lr: stats.lr,
                ratio,
            });
        }
        Ok(log)
    }
}

/// Run settings of Stage-0 pretraining: the main run's optimizer and batch,
/// the whole backbone trainable, uniform flow loss.
pub fn stage0_config(cfg: &ExperimentConfig, steps: usize) -> VariantConfig {
    let mut vc = VariantConfig::new(cfg, Variant::C, Regime::Decoupled, STAGE0_SEED);
    vc.loss.alpha = 0.0;
    vc.steps = steps;
    vc
}

/// Trains the backbone alone with the uniform flow loss, then freezes it.
pub fn pretrain_backbone(cfg: &ExperimentConfig, corpus: &Corpus, steps: usize) -> Result<(EditModel, Trained)> {
    let (mut store, model) = init_store(cfg, STAGE0_SEED)?;
    EditModel::configure_trainable(&mut store, Variant::C);
    let vc = stage0_config(cfg, steps);
    let log = Loop { cfg, corpus, model: &model, vc: &vc }.run(&mut store)?;
    for id in store.ids().collect::<Vec<_>>() {
        store.set_frozen(id, true);
    }
    Ok((model, Trained { store, log }))
}

/// Trains one ablation variant on top of the shared Stage-0 backbone.
pub fn train_variant(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    stage0: &ParamStore<f32>,
    vc: &VariantConfig,
) -> Result<(EditModel, Trained)> {
    let (mut store, model) = init_store(cfg, vc.seed)?;
    adopt_backbone(&mut store, stage0)?;
    EditModel::configure_trainable(&mut store, vc.variant);
    if store.n_trainable_scalars() == 0 {
        return Ok((model, Trained { store, log: Vec::new() }));
    }
    let log = Loop { cfg, corpus, model: &model, vc }.run(&mut store)?;
    Ok((model, Trained { store, log }))
}
