//! Experiment configuration. A single TOML file carries every hyperparameter.

use std::path::Path;

use diffcore::AdamWConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which downsampled mask the mask-token interpolation consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskInput {
    Fractional,
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub channels: usize,
    /// Generation grid = latent grid times this factor.
    pub gen_scale: usize,
    pub instr_len: usize,
    pub vocab: usize,
    pub enc_dim: usize,
    pub enc_layers: usize,
    /// Number of trailing encoder layers fed to the perceiver.
    pub hidden_layers: usize,
    pub n_queries: usize,
    pub fusion_layers: usize,
    pub mlp_ratio: usize,
    /// Side of the mask predictor's query grid.
    pub mask_grid: usize,
    pub mask_input: MaskInput,
    /// Reference mode: gate equals the binary mask instead of the learned MLP.
    pub hard_gate: bool,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Reference toy scale: 4 blocks, D=64, 16x16 latents.
    pub fn toy() -> Self {
        Self {
            n_blocks: 4,
            dim: 64,
            heads: 4,
            latent_h: 16,
            latent_w: 16,
            channels: 4,
            gen_scale: 4,
            instr_len: 16,
            vocab: 80,
            enc_dim: 64,
            enc_layers: 2,
            hidden_layers: 2,
            n_queries: 8,
            fusion_layers: 2,
            mlp_ratio: 4,
            mask_grid: 8,
            mask_input: MaskInput::Fractional,
            hard_gate: false,
            ln_eps: 1e-6,
        }
    }

    /// Reduced scale that fits the acceptance budget on a single core.
    pub fn desk() -> Self {
        Self {
            dim: 32,
            latent_h: 8,
            latent_w: 8,
            instr_len: 8,
            enc_dim: 32,
            vocab: 64,
            n_queries: 4,
            mask_grid: 8,
            ..Self::toy()
        }
    }

    /// Smallest shapes that still exercise every code path; used for gradient checks.
    pub fn micro() -> Self {
        Self {
            n_blocks: 2,
            dim: 8,
            heads: 2,
            latent_h: 4,
            latent_w: 4,
            channels: 2,
            gen_scale: 2,
            instr_len: 6,
            vocab: 64,
            enc_dim: 8,
            enc_layers: 2,
            hidden_layers: 2,
            n_queries: 2,
            fusion_layers: 1,
            mlp_ratio: 2,
            mask_grid: 2,
            mask_input: MaskInput::Fractional,
            hard_gate: false,
            ln_eps: 1e-6,
        }
    }

    pub fn tokens(&self) -> usize {
        self.latent_h * self.latent_w
    }

    pub fn gen_h(&self) -> usize {
        self.latent_h * self.gen_scale
    }

    pub fn gen_w(&self) -> usize {
        self.latent_w * self.gen_scale
    }

    pub fn seq_len(&self) -> usize {
        2 * self.tokens() + self.instr_len
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail("dim must be a positive multiple of heads");
        }
        if !self.dim.is_multiple_of(4) {
            return fail("dim must be divisible by 4 for the 2D position encoding");
        }
        if !self.enc_dim.is_multiple_of(self.heads) {
            return fail("enc_dim must be a multiple of heads");
        }
        if self.gen_scale < 2 || !self.gen_scale.is_multiple_of(2) {
            return fail("gen_scale must be an even number >= 2");
        }
        if self.instr_len < 6 {
            return fail("instr_len must hold at least the 6 structured symbols");
        }
        if self.hidden_layers == 0 || self.hidden_layers > self.enc_layers {
            return fail("hidden_layers must be in 1..=enc_layers");
        }
        if self.mask_grid == 0 || self.mask_grid > self.latent_h.min(self.latent_w) {
            return fail("mask_grid must be in 1..=latent side");
        }
        if self.n_blocks == 0 || self.n_queries == 0 || self.channels == 0 {
            return fail("n_blocks, n_queries and channels must be positive");
        }
        if crate::synthdata::vocab_needed(self) > self.vocab {
            return fail("vocab too small for the coordinate symbols of this grid");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub master_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { master_seed: 20_240_601, n_train: 4096, n_val: 256, n_test: 256 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda_mask: f64,
    pub lambda_dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 2.0, lambda_mask: 0.1, lambda_dice: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub pretrain_steps: usize,
    pub optimizer: AdamWConfig,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            pretrain_steps: 2000,
            optimizer: AdamWConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskPostConfig {
    pub threshold: f64,
    pub dilate_radius: usize,
}

impl Default for MaskPostConfig {
    fn default() -> Self {
        Self { threshold: 0.5, dilate_radius: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub sampler_steps: usize,
    /// Evaluate at most this many samples of a split (0 = all).
    pub max_samples: usize,
    pub batch: usize,
    pub noise_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { sampler_steps: 20, max_samples: 0, batch: 32, noise_seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessConfig {
    /// Erode/dilate magnitudes in generation-grid pixels.
    pub magnitudes: Vec<usize>,
    /// Shift magnitude in generation-grid pixels.
    pub shift: usize,
}

impl RobustnessConfig {
    /// Magnitudes proportional to the generation grid: W/16, W/8, W/4, with
    /// shifts at the middle magnitude. Gives {4, 8, 16} and 8 on a 64 grid.
    pub fn for_grid(gen_w: usize) -> Self {
        let m = |d: usize| (gen_w / d).max(1);
        Self { magnitudes: vec![m(16), m(8), m(4)], shift: m(8) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub mask: MaskPostConfig,
    pub eval: EvalConfig,
    pub robustness: RobustnessConfig,
    /// Training seeds for multi-seed protocols.
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn toy() -> Self {
        let model = ModelConfig::toy();
        let robustness = RobustnessConfig::for_grid(model.gen_w());
        Self {
            model,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            mask: MaskPostConfig::default(),
            eval: EvalConfig::default(),
            robustness,
            seeds: vec![1, 2, 3],
        }
    }

    pub fn desk() -> Self {
        let model = ModelConfig::desk();
        let robustness = RobustnessConfig::for_grid(model.gen_w());
        Self {
            model,
            train: TrainConfig {
                optimizer: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
                ..TrainConfig::default()
            },
            eval: EvalConfig { max_samples: 128, ..EvalConfig::default() },
            robustness,
            ..Self::toy()
        }
    }

    /// Seconds-scale end-to-end runs for tests and smoke checks.
    pub fn micro() -> Self {
        let model = ModelConfig::micro();
        let robustness = RobustnessConfig { magnitudes: vec![1, 2], shift: 1 };
        Self {
            model,
            data: DataConfig { n_train: 64, n_val: 8, n_test: 8, ..DataConfig::default() },
            train: TrainConfig { steps: 12, batch: 4, pretrain_steps: 12, ..TrainConfig::default() },
            eval: EvalConfig { sampler_steps: 4, max_samples: 0, batch: 4, noise_seed: 7 },
            robustness,
            seeds: vec![1, 2],
            ..Self::toy()
        }
    }

    pub const PRESETS: [&'static str; 3] = ["toy", "desk", "micro"];

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "desk" => Ok(Self::desk()),
            "micro" => Ok(Self::micro()),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected toy, desk or micro)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.batch == 0 || self.eval.batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.data.n_train == 0 || self.data.n_val == 0 || self.data.n_test == 0 {
            return Err(Error::Config("split sizes must be positive".into()));
        }
        if !(self.mask.threshold > 0.0 && self.mask.threshold < 1.0) {
            return Err(Error::Config("mask threshold must lie in (0, 1)".into()));
        }
        if self.robustness.magnitudes.contains(&0) || self.robustness.shift == 0 {
            return Err(Error::Config("perturbation magnitudes must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical TOML serialization, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ExperimentConfig::toy().validate().unwrap();
        ExperimentConfig::desk().validate().unwrap();
        ExperimentConfig::micro().validate().unwrap();
        ModelConfig::micro().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_preserves_hash() {
        let cfg = ExperimentConfig::desk();
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash().unwrap(), back.hash().unwrap());
    }

    #[test]
    fn toy_perturbation_magnitudes() {
        let r = ExperimentConfig::toy().robustness;
        assert_eq!(r.magnitudes, vec![4, 8, 16]);
        assert_eq!(r.shift, 8);
    }

    #[test]
    fn defaults_match_reference_weights() {
        let l = LossWeights::default();
        assert_eq!((l.alpha, l.lambda_mask, l.lambda_dice), (2.0, 0.1, 1.0));
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = ExperimentConfig::desk().to_toml().unwrap();
        text = text.replace("[model]", "[model]\nbogus = 1");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }
}
