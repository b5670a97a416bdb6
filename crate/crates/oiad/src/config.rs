//! Run configuration: one TOML file covering data, training, morphing,
//! detection, baselines and evaluation. Every field has a documented
//! default (the reference settings: gamma 40, lambda_lkd 0.1, eta 0.1,
//! alpha 0.40, 100 morphs per code); unknown keys are rejected.

use std::path::{Path, PathBuf};

use oiad_core::consistency::Metric;
use oiad_core::morph::MorphParams;
use oiad_core::objective::Hyper;
use oiad_core::train::{DatasetId, TrainConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("config parse error: {0}")]
    Parse(String),

    #[error("config value out of range: {0}")]
    OutOfRange(String),

    #[error("dataset files missing under {dir} (expected {hint}); set --data-dir or OIAD_DATA_DIR")]
    MissingDataset { dir: PathBuf, hint: String },
}

fn default_dataset() -> String {
    "mnist".into()
}
fn default_data_dir() -> PathBuf {
    "data".into()
}
fn default_output_dir() -> PathBuf {
    "results".into()
}
fn default_seed() -> u64 {
    7
}
fn default_batch_size() -> usize {
    64
}
fn default_lr() -> f64 {
    1e-4
}
fn default_gamma() -> f64 {
    40.0
}
fn default_eta() -> f64 {
    0.1
}
fn default_lambda() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}
fn default_delta_r_frac() -> f64 {
    0.05
}
fn default_morph_batch() -> usize {
    16
}
fn default_morphs_per_code() -> usize {
    100
}
fn default_max_iters() -> usize {
    200
}
fn default_fractile_p() -> f64 {
    0.01
}
fn default_alpha() -> f64 {
    0.40
}
fn default_metric() -> String {
    "ssim".into()
}
fn default_pca_dims() -> Vec<usize> {
    vec![20, 40, 60, 80, 100]
}
fn default_gmm_min() -> usize {
    2
}
fn default_gmm_max() -> usize {
    20
}
fn default_alpha_grid() -> Vec<f64> {
    vec![0.02, 0.05, 0.07, 0.10, 0.13, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45]
}
fn default_val_sizes() -> Vec<usize> {
    vec![50, 100, 200, 500, 0]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// 0 = per-dataset default (30 for MNIST/FMNIST, 100 for CIFAR-10).
    #[serde(default)]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr_vae: f64,
    #[serde(default = "default_lr")]
    pub lr_disc: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_lambda")]
    pub lambda_lkd: f64,
    #[serde(default = "default_true")]
    pub learn_precisions: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MorphSection {
    #[serde(default = "default_delta_r_frac")]
    pub delta_r_frac: f64,
    #[serde(default = "default_morph_batch")]
    pub batch: usize,
    #[serde(default = "default_morphs_per_code")]
    pub morphs_per_code: usize,
    #[serde(default)]
    pub r0: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_fractile_p")]
    pub fractile_p: f64,
}

impl Default for MorphSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_metric")]
    pub metric: String,
    /// Number of latent codes to morph (top-k by posterior KL); 0 = all.
    #[serde(default)]
    pub k: usize,
    #[serde(default)]
    pub one_sided: bool,
}

impl Default for DetectorSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    #[serde(default = "default_pca_dims")]
    pub pca_dims: Vec<usize>,
    #[serde(default = "default_gmm_min")]
    pub gmm_components_min: usize,
    #[serde(default = "default_gmm_max")]
    pub gmm_components_max: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_alpha_grid")]
    pub alpha_grid: Vec<f64>,
    /// Cap on CLE/ANO sizes during evaluation; 0 = no cap.
    #[serde(default)]
    pub eval_cap: usize,
    /// Cap on VAL size used for SC calibration; 0 = no cap.
    #[serde(default)]
    pub val_cap: usize,
    /// Validation-size ablation grid; 0 means "all of VAL".
    #[serde(default = "default_val_sizes")]
    pub val_sizes: Vec<usize>,
    /// When nonzero, also evaluate on this many test-partition samples
    /// (all classes, normal vs rest) instead of only CLE/ANO.
    #[serde(default)]
    pub test_sample: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_dataset")]
    pub dataset: String,
    #[serde(default)]
    pub normal_class: u8,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Cap on the normal-class pool before splitting; 0 = use all.
    #[serde(default)]
    pub max_normals: usize,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub morph: MorphSection,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub baseline: BaselineSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").unwrap()
    }
}

/// CLI overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub dataset: Option<String>,
    pub normal_class: Option<u8>,
    pub seed: Option<u64>,
    pub data_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn dataset_id(&self) -> Result<DatasetId, ConfigError> {
        match self.dataset.as_str() {
            "mnist" => Ok(DatasetId::Mnist),
            "fmnist" => Ok(DatasetId::Fmnist),
            "cifar10" => Ok(DatasetId::Cifar10),
            other => Err(ConfigError::OutOfRange(format!(
                "dataset must be mnist|fmnist|cifar10, got {other:?}"
            ))),
        }
    }

    pub fn metric(&self) -> Result<Metric, ConfigError> {
        Metric::parse(&self.detector.metric).ok_or_else(|| {
            ConfigError::OutOfRange(format!(
                "metric must be mse|loss|ssim, got {:?}",
                self.detector.metric
            ))
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let dataset = self.dataset_id()?;
        let epochs = if self.train.epochs == 0 {
            dataset.default_epochs()
        } else {
            self.train.epochs
        };
        Ok(TrainConfig {
            epochs,
            batch_size: self.train.batch_size,
            lr_vae: self.train.lr_vae,
            lr_disc: self.train.lr_disc,
            hyper: Hyper {
                gamma: self.train.gamma,
                eta: self.train.eta,
                lambda_lkd: self.train.lambda_lkd,
            },
            seed: self.seed,
            latent_dim: dataset.arch().latent_dim,
            dataset,
            normal_class: self.normal_class,
            learn_precisions: self.train.learn_precisions,
        })
    }

    pub fn morph_params(&self) -> MorphParams {
        MorphParams {
            delta_r_frac: self.morph.delta_r_frac,
            batch: self.morph.batch,
            morphs_per_code: self.morph.morphs_per_code,
            r0: self.morph.r0,
            max_iters: self.morph.max_iters,
            fractile_p: self.morph.fractile_p,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.dataset_id()?;
        self.metric()?;
        let a = self.detector.alpha;
        if !(a > 0.0 && a < 0.5) {
            return Err(ConfigError::OutOfRange(format!(
                "detector.alpha must lie in (0, 0.5), got {a}"
            )));
        }
        if self.normal_class > 9 {
            return Err(ConfigError::OutOfRange(format!(
                "normal_class must be 0-9, got {}",
                self.normal_class
            )));
        }
        if self.train.batch_size < 2 {
            return Err(ConfigError::OutOfRange(
                "train.batch_size must be at least 2".into(),
            ));
        }
        if self.train.lr_vae < 0.0 || self.train.lr_disc < 0.0 {
            return Err(ConfigError::OutOfRange("learning rates must be >= 0".into()));
        }
        let p = self.morph.fractile_p;
        if !(0.0..0.5).contains(&p) {
            return Err(ConfigError::OutOfRange(format!(
                "morph.fractile_p must lie in [0, 0.5), got {p}"
            )));
        }
        if self.morph.morphs_per_code == 0 || self.morph.batch == 0 {
            return Err(ConfigError::OutOfRange(
                "morph.morphs_per_code and morph.batch must be positive".into(),
            ));
        }
        if self.morph.delta_r_frac <= 0.0 {
            return Err(ConfigError::OutOfRange(
                "morph.delta_r_frac must be positive".into(),
            ));
        }
        for &g in &self.eval.alpha_grid {
            if !(g > 0.0 && g < 0.5) {
                return Err(ConfigError::OutOfRange(format!(
                    "eval.alpha_grid entries must lie in (0, 0.5), got {g}"
                )));
            }
        }
        if self.eval.alpha_grid.is_empty() {
            return Err(ConfigError::OutOfRange("eval.alpha_grid is empty".into()));
        }
        if self.baseline.gmm_components_min < 1
            || self.baseline.gmm_components_min > self.baseline.gmm_components_max
        {
            return Err(ConfigError::OutOfRange(
                "baseline.gmm component range is invalid".into(),
            ));
        }
        if self.baseline.pca_dims.is_empty() {
            return Err(ConfigError::OutOfRange("baseline.pca_dims is empty".into()));
        }
        Ok(())
    }

    /// Effective data dir: CLI/file value, overridden by OIAD_DATA_DIR when
    /// the config left it at the default.
    pub fn resolve_data_dir(&mut self) {
        if self.data_dir == default_data_dir() {
            if let Ok(env_dir) = std::env::var("OIAD_DATA_DIR") {
                if !env_dir.is_empty() {
                    self.data_dir = PathBuf::from(env_dir);
                }
            }
        }
    }

    pub fn check_dataset_present(&self) -> Result<(), ConfigError> {
        let id = self.dataset_id()?;
        let files = crate::data::dataset_files(id, &self.data_dir);
        for f in &files {
            if !f.exists() {
                return Err(ConfigError::MissingDataset {
                    dir: self.data_dir.clone(),
                    hint: files
                        .iter()
                        .map(|p| p.display().to_string())
                        .collect::<Vec<_>>()
                        .join(", "),
                });
            }
        }
        Ok(())
    }
}

/// Loads, overrides, resolves and validates a run configuration.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, ConfigError> {
    let mut config: RunConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.to_path_buf(),
                source,
            })?;
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?
        }
        None => RunConfig::default(),
    };
    if let Some(d) = &overrides.dataset {
        config.dataset = d.clone();
    }
    if let Some(c) = overrides.normal_class {
        config.normal_class = c;
    }
    if let Some(s) = overrides.seed {
        config.seed = s;
    }
    if let Some(d) = &overrides.data_dir {
        config.data_dir = d.clone();
    }
    if let Some(d) = &overrides.output_dir {
        config.output_dir = d.clone();
    }
    config.resolve_data_dir();
    config.validate()?;
    Ok(config)
}

/// Writes the effective configuration into the run directory.
pub fn echo_config(config: &RunConfig, path: &Path) -> Result<(), ConfigError> {
    let text = toml::to_string_pretty(config).map_err(|e| ConfigError::Parse(e.to_string()))?;
    std::fs::write(path, text).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}
