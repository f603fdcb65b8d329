//! Experiment configuration: a single TOML document with explicit keys.
//!
//! Unknown keys are rejected so a typo in an ablation sweep fails loudly
//! instead of silently running the defaults. Every stochastic stage has its
//! own seed in the file; the `--seed` flag replaces all of them with values
//! derived from one number (documented offsets, see [`ExperimentConfig::override_seed`]).

use std::path::{Path, PathBuf};

use serde::Deserialize;

use fct_core::training::{LossKind, SideInfoKind, TrainConfig};
use fct_core::{Error, Result};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// Objective for the transformation stage.
    pub loss_kind: LossKind,
    pub domain: DomainConfig,
    pub splits: SplitConfig,
    pub models: ModelConfig,
    pub side_info: SideInfoConfig,
    pub train_old: TrainSection,
    pub train_new: TrainSection,
    pub train_side: TrainSection,
    pub train_transform: TrainSection,
    pub eval: EvalConfig,
    pub deployment: DeploymentConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub colors: usize,
    pub shapes: usize,
    pub ambient_dim: usize,
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Shape factors visible to the old model; the new model sees them all.
    pub old_shapes: Vec<usize>,
    pub train_per_cell: usize,
    pub eval_per_cell: usize,
    pub seed_train_old: u64,
    pub seed_train_new: u64,
    pub seed_gallery: u64,
    pub seed_query: u64,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_old: usize,
    pub d_new: usize,
    pub d_side: usize,
    pub width_multiplier: f64,
    pub normalize_output: bool,
    pub embedder_hidden: usize,
    pub embedder_depth: usize,
}

/// Side-information producer choice. The produced dimension always equals
/// `models.d_side`, so it is not repeated here.
#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SideInfoConfig {
    Zero {},
    Autoencoder { hidden: usize },
    AlternateClassifier { hidden: usize, depth: usize },
    Mixup { hidden: usize, depth: usize, alpha: f64 },
    Contrastive { hidden: usize, depth: usize, temperature: f64, noise_std: f64 },
}

impl SideInfoConfig {
    pub fn to_kind(&self, d_side: usize) -> SideInfoKind {
        match *self {
            SideInfoConfig::Zero {} => SideInfoKind::Zero { dim: d_side },
            SideInfoConfig::Autoencoder { hidden } => {
                SideInfoKind::Autoencoder { hidden, code_dim: d_side }
            }
            SideInfoConfig::AlternateClassifier { hidden, depth } => {
                SideInfoKind::AlternateClassifier { hidden, depth, embed_dim: d_side }
            }
            SideInfoConfig::Mixup { hidden, depth, alpha } => {
                SideInfoKind::Mixup { hidden, depth, embed_dim: d_side, alpha }
            }
            SideInfoConfig::Contrastive { hidden, depth, temperature, noise_std } => {
                SideInfoKind::Contrastive {
                    hidden,
                    depth,
                    embed_dim: d_side,
                    temperature,
                    noise_std,
                }
            }
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub bn_freeze_epoch: Option<usize>,
    pub seed: u64,
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_epochs: self.warmup_epochs,
            bn_freeze_epoch: self.bn_freeze_epoch,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Rank cutoffs for the CMC curve; must include 1 and 5 because the
    /// summary table reports those columns.
    pub cmc_ks: Vec<usize>,
    /// Batch size used when pushing galleries through transformations.
    pub update_batch_size: usize,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploymentConfig {
    pub device_count: u64,
    pub records_per_device: u64,
    #[serde(default = "default_image_bytes")]
    pub image_bytes: u64,
}

fn default_image_bytes() -> u64 {
    fct_core::update::DeploymentModel::DEFAULT_IMAGE_BYTES
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.domain;
        if self.splits.old_shapes.is_empty() {
            return Err(Error::Config("old model needs at least one visible shape".into()));
        }
        if let Some(&s) = self.splits.old_shapes.iter().find(|&&s| s >= d.shapes) {
            return Err(Error::Config(format!(
                "old shape {s} outside the domain of {} shapes",
                d.shapes
            )));
        }
        {
            let mut sorted = self.splits.old_shapes.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != self.splits.old_shapes.len() {
                return Err(Error::Config("old shape list repeats an entry".into()));
            }
        }
        if self.splits.train_per_cell == 0 || self.splits.eval_per_cell == 0 {
            return Err(Error::Config("per-cell sample counts must be positive".into()));
        }
        let m = &self.models;
        if m.d_old == 0 || m.d_new == 0 || m.d_side == 0 {
            return Err(Error::Config("embedding and side dims must be positive".into()));
        }
        if m.embedder_hidden == 0 || m.embedder_depth == 0 {
            return Err(Error::Config("embedder needs a positive hidden width and depth".into()));
        }
        for (name, section) in [
            ("train_old", &self.train_old),
            ("train_new", &self.train_new),
            ("train_side", &self.train_side),
            ("train_transform", &self.train_transform),
        ] {
            section
                .to_train_config()
                .validate()
                .map_err(|e| Error::Config(format!("[{name}]: {e}")))?;
        }
        if self.eval.update_batch_size == 0 {
            return Err(Error::Config("update batch size must be positive".into()));
        }
        for &required in &[1usize, 5] {
            if !self.eval.cmc_ks.contains(&required) {
                return Err(Error::Config(format!(
                    "cmc_ks must include {required} for the summary columns"
                )));
            }
        }
        if self.eval.cmc_ks.contains(&0) {
            return Err(Error::Config("cmc_ks entries must be positive".into()));
        }
        Ok(())
    }

    /// Replaces every stage seed with one derived from `seed`. Offsets:
    /// domain +0, old/new training data +1/+2, gallery +3, queries +4,
    /// old/new embedder training +5/+6, side info +7, transformation +8.
    pub fn override_seed(&mut self, seed: u64) {
        self.domain.seed = seed;
        self.splits.seed_train_old = seed.wrapping_add(1);
        self.splits.seed_train_new = seed.wrapping_add(2);
        self.splits.seed_gallery = seed.wrapping_add(3);
        self.splits.seed_query = seed.wrapping_add(4);
        self.train_old.seed = seed.wrapping_add(5);
        self.train_new.seed = seed.wrapping_add(6);
        self.train_side.seed = seed.wrapping_add(7);
        self.train_transform.seed = seed.wrapping_add(8);
    }

    /// All shape indices of the domain, for the new model's splits.
    pub fn all_shapes(&self) -> Vec<usize> {
        (0..self.domain.shapes).collect()
    }

    pub fn all_colors(&self) -> Vec<usize> {
        (0..self.domain.colors).collect()
    }
}
