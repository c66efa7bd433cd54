//! Cached run artifacts. Everything is regenerable from the config, so the
//! cache only saves time: a checkpoint is reused when its recorded config
//! hash and run settings match, and retrained otherwise.

use std::cell::OnceCell;
use std::path::{Path, PathBuf};

use diffcore::{checkpoint, ParamStore};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::harness::io::write_step_log;
use crate::harness::train::{init_store, pretrain_backbone, stage0_config, train_variant, StepLog, VariantConfig};
use crate::model::{EditModel, Regime, Variant};
use crate::synthdata::Corpus;

pub struct Workspace {
    pub cfg: ExperimentConfig,
    hash: String,
    dir: Option<PathBuf>,
    corpus: OnceCell<Corpus>,
    stage0: OnceCell<ParamStore<f32>>,
    pub verbose: bool,
}

/// A trained variant ready for evaluation.
pub struct Checkpoint {
    pub model: EditModel,
    pub store: ParamStore<f32>,
    pub vc: VariantConfig,
    pub log: Vec<StepLog>,
}

impl Workspace {
    /// Artifacts go to `<root>/<first 16 hex of the config hash>/` when a
    /// root is given, and stay in memory otherwise.
    pub fn new(cfg: ExperimentConfig, root: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash()?;
        let dir = match root {
            Some(r) => {
                let d = r.join(&hash[..16]);
                std::fs::create_dir_all(d.join("ckpt"))?;
                std::fs::write(d.join("config.toml"), cfg.to_toml()?)?;
                Some(d)
            }
            None => None,
        };
        Ok(Self {
            cfg,
            hash,
            dir,
            corpus: OnceCell::new(),
            stage0: OnceCell::new(),
            verbose: false,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn note(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    pub fn corpus(&self) -> Result<&Corpus> {
        if let Some(c) = self.corpus.get() {
            return Ok(c);
        }
        let c = Corpus::generate(&self.cfg.model, &self.cfg.data)?;
        Ok(self.corpus.get_or_init(|| c))
    }

    fn meta(&self, vc: &VariantConfig) -> serde_json::Value {
        json!({ "config_hash": self.hash, "run": vc })
    }

    fn cached(&self, name: &str, vc: &VariantConfig) -> Result<Option<ParamStore<f32>>> {
        let Some(d) = &self.dir else { return Ok(None) };
        let path = d.join("ckpt").join(name);
        if !path.exists() {
            return Ok(None);
        }
        let (store, header) = checkpoint::load::<f32>(&path)?;
        Ok((header.meta == self.meta(vc)).then_some(store))
    }

    fn persist(&self, name: &str, store: &ParamStore<f32>, vc: &VariantConfig, log: &[StepLog]) -> Result<()> {
        if let Some(d) = &self.dir {
            checkpoint::save(&d.join("ckpt").join(name), store, self.meta(vc))?;
            let stem = name.trim_end_matches(".ckpt");
            write_step_log(&d.join("ckpt").join(format!("{stem}.steps.csv")), log)?;
        }
        Ok(())
    }

    /// The frozen Stage-0 backbone store.
    pub fn stage0(&self) -> Result<&ParamStore<f32>> {
        if let Some(s) = self.stage0.get() {
            return Ok(s);
        }
        let vc = stage0_config(&self.cfg, self.cfg.train.pretrain_steps);
        let store = match self.cached("stage0.ckpt", &vc)? {
            Some(s) => s,
            None => {
                self.note(format!("pretraining backbone for {} steps", vc.steps));
                let (_, tr) = pretrain_backbone(&self.cfg, self.corpus()?, vc.steps)?;
                self.persist("stage0.ckpt", &tr.store, &vc, &tr.log)?;
                tr.store
            }
        };
        Ok(self.stage0.get_or_init(|| store))
    }

    pub fn checkpoint_name(variant: Variant, regime: Regime, seed: u64) -> String {
        format!("{variant}-{}-s{seed}.ckpt", regime.name())
    }

    /// Loads or trains one variant.
    pub fn trained(&self, variant: Variant, regime: Regime, seed: u64) -> Result<Checkpoint> {
        let vc = VariantConfig::new(&self.cfg, variant, regime, seed);
        let name = Self::checkpoint_name(variant, regime, seed);
        if let Some(store) = self.cached(&name, &vc)? {
            let (fresh, model) = init_store(&self.cfg, seed)?;
            check_layout(&store, &fresh)?;
            return Ok(Checkpoint { model, store, vc, log: Vec::new() });
        }
        self.note(format!("training {variant} ({}) seed {seed}", regime.name()));
        let (model, tr) = train_variant(&self.cfg, self.corpus()?, self.stage0()?, &vc)?;
        self.persist(&name, &tr.store, &vc, &tr.log)?;
        Ok(Checkpoint { model, store: tr.store, vc, log: tr.log })
    }

    /// Loads an explicit checkpoint file written by [`Workspace::trained`].
    pub fn load_checkpoint(&self, path: &Path) -> Result<Checkpoint> {
        let (store, header) = checkpoint::load::<f32>(path)?;
        let vc: VariantConfig = serde_json::from_value(header.meta["run"].clone())
            .map_err(|e| Error::Config(format!("{}: not a variant checkpoint ({e})", path.display())))?;
        if header.meta["config_hash"] != self.hash.as_str() {
            return Err(Error::Config(format!("{} was trained under a different config", path.display())));
        }
        let (fresh, model) = init_store(&self.cfg, vc.seed)?;
        check_layout(&store, &fresh)?;
        Ok(Checkpoint { model, store, vc, log: Vec::new() })
    }
}

fn check_layout(store: &ParamStore<f32>, fresh: &ParamStore<f32>) -> Result<()> {
    let same = fresh.len() == store.len()
        && fresh.entries().iter().zip(store.entries()).all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape());
    if same {
        Ok(())
    } else {
        Err(Error::Config("checkpoint layout does not match the model config".into()))
    }
}
