//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 0
//! out = "runs/demo"
//!
//! [data]
//! path = "features.csv"          # or the [data.generate] table below
//!
//! [data.generate]
//! clusters = 10
//! per_cluster = 200
//! dim = 32
//! separation = 10.0
//!
//! [encoder]
//! hidden = [64, 64]
//! embedding_dim = 32
//!
//! [train]
//! epochs = 50                    # required
//! batch_size = 128
//! heads = [10]
//!
//! [constraint]
//! mode = "size_lb"               # greedy | size_lb | size_lb_ub | entropy
//! gamma = 0.9
//!
//! [augment]
//! noise_sigma = 0.1
//! ```
//!
//! Every key except `[data]` and `train.epochs` has a default. Unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use secu_core::centers::SeedMethod;
use secu_core::data_io::{gen_gaussian_mixture, load_features};
use secu_core::numerics::rng;
use secu_core::{
    AugmentConfig, CenterMode, ConstraintConfig, ConstraintMode, Dataset, ScoreKind, TrainConfig,
};
use serde::Deserialize;

use crate::UserError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    pub train: TrainSection,
    #[serde(default)]
    pub constraint: ConstraintSection,
    #[serde(default)]
    pub augment: AugmentConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub generate: Option<GenerateSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub clusters: usize,
    pub per_cluster: usize,
    pub dim: usize,
    pub separation: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            hidden: d.hidden,
            embedding_dim: d.embedding_dim,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub tau: Option<f64>,
    pub lambda: Option<f64>,
    pub lambda_centers: Option<f64>,
    pub center_mode: Option<CenterMode>,
    pub lr_encoder: Option<f64>,
    pub warmup_epochs: Option<usize>,
    pub encoder_momentum: Option<f64>,
    pub lr_centers: Option<f64>,
    pub center_momentum: Option<f64>,
    pub heads: Option<Vec<usize>>,
    pub disabled_heads: Option<Vec<usize>>,
    pub score: Option<ScoreKind>,
    pub seed_method: Option<SeedMethod>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    pub mode: ConstraintMode,
    pub gamma: Option<f64>,
    pub gamma_upper: Option<f64>,
    /// Absolute entropy weight; `6N/50` when absent.
    pub alpha: Option<f64>,
    pub dual_lr: Option<f64>,
    pub reset_duals: Option<bool>,
}

impl Default for ConstraintSection {
    fn default() -> Self {
        Self {
            mode: ConstraintMode::SizeLb,
            gamma: None,
            gamma_upper: None,
            alpha: None,
            dual_lr: None,
            reset_duals: None,
        }
    }
}

impl RunConfig {
    /// Parses and checks a config file. Relative data paths are resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))
            .map_err(UserError::wrap)?;
        let mut cfg = Self::parse(&text)
            .map_err(|e| UserError::wrap(e.context(format!("in {}", path.display()))))?;
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.data.path = Some(base.join(p));
            }
        }
        cfg.check_paths().map_err(UserError::wrap)?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("invalid config")?;
        match (&cfg.data.path, &cfg.data.generate) {
            (Some(_), Some(_)) => {
                bail!("[data] takes either `path` or a [data.generate] table, not both")
            }
            (None, None) => bail!("[data] needs `path` or a [data.generate] table"),
            _ => {}
        }
        Ok(cfg)
    }

    fn check_paths(&self) -> anyhow::Result<()> {
        if let Some(p) = &self.data.path {
            if !p.is_file() {
                bail!("data.path {} does not exist", p.display());
            }
        }
        Ok(())
    }

    pub fn dataset(&self) -> anyhow::Result<Dataset> {
        if let Some(p) = &self.data.path {
            return load_features(p)
                .with_context(|| format!("cannot load {}", p.display()))
                .map_err(UserError::wrap);
        }
        let g = self.data.generate.as_ref().expect("checked at parse time");
        gen_gaussian_mixture(
            g.clusters,
            g.per_cluster,
            g.dim,
            g.separation,
            &mut rng::stream(self.seed, rng::STREAM_DATA),
        )
        .context("cannot generate data")
        .map_err(UserError::wrap)
    }

    pub fn train_config(&self, n: usize) -> anyhow::Result<TrainConfig> {
        let d = TrainConfig::default();
        let t = &self.train;
        let c = &self.constraint;
        let defaults = match c.mode {
            ConstraintMode::Greedy => ConstraintConfig::greedy(),
            ConstraintMode::SizeLb => d.constraint,
            ConstraintMode::SizeLbUb => {
                ConstraintConfig::size_lb_ub(d.constraint.gamma, 1.1, d.constraint.dual_lr)
            }
            ConstraintMode::Entropy => {
                ConstraintConfig::entropy(ConstraintConfig::default_alpha(n))
            }
        };
        let constraint = ConstraintConfig {
            mode: c.mode,
            gamma: c.gamma.unwrap_or(defaults.gamma),
            gamma_upper: c.gamma_upper.unwrap_or(defaults.gamma_upper),
            alpha: c.alpha.unwrap_or(defaults.alpha),
            dual_lr: c.dual_lr.unwrap_or(defaults.dual_lr),
            reset_duals: c.reset_duals.unwrap_or(defaults.reset_duals),
        };
        let cfg = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            seed: self.seed,
            tau: t.tau.unwrap_or(d.tau),
            lambda: t.lambda.unwrap_or(d.lambda),
            lambda_centers: t.lambda_centers.or(d.lambda_centers),
            constraint,
            center_mode: t.center_mode.unwrap_or(d.center_mode),
            lr_encoder: t.lr_encoder.unwrap_or(d.lr_encoder),
            warmup_epochs: t.warmup_epochs.unwrap_or(d.warmup_epochs),
            encoder_momentum: t.encoder_momentum.unwrap_or(d.encoder_momentum),
            lr_centers: t.lr_centers.unwrap_or(d.lr_centers),
            center_momentum: t.center_momentum.unwrap_or(d.center_momentum),
            heads: t.heads.clone().unwrap_or(d.heads),
            disabled_heads: t.disabled_heads.clone().unwrap_or(d.disabled_heads),
            score: t.score.unwrap_or(d.score),
            augment: self.augment,
            seed_method: t.seed_method.unwrap_or(d.seed_method),
            hidden: self.encoder.hidden.clone(),
            embedding_dim: self.encoder.embedding_dim,
        };
        cfg.validate().map_err(|e| UserError::wrap(e.into()))?;
        Ok(cfg)
    }
}
