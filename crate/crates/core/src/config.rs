//! Flat TOML experiment configuration.
//!
//! Every key is optional; missing keys take the library defaults and unknown
//! keys are rejected. Relative paths resolve against the config file's
//! directory.
//!
//! ```toml
//! data_dir = "data"
//! seed = 7
//!
//! # synthetic data
//! rows = 256
//! cols = 256
//! n_train = 40
//! n_test = 10
//! n_clusters = 3
//! cells_per_cluster = [8, 14]
//! n_other = [20, 35]
//! cell_radius_range = [5.0, 8.0]
//! shape_jitter = 0.4
//! stain_intensity = 0.8
//! background_noise = 0.03
//!
//! # training
//! epochs_pretrain = 10
//! epochs_main = 20
//! batch_size = 4
//! learning_rate = 0.001
//! momentum_beta1 = 0.9
//! beta2 = 0.999
//! weight_decay = 2e-5
//! alpha = 0.8
//! lambda_c = 0.5
//! lambda_p = 0.5
//! lambda_d = 1.0
//! iou_mode = "union"            # or "dice"
//! normalize_prior_loss = false
//! circle_radius = 7.0
//! dynamic_vertex_range = [3, 8]
//! dynamic_radius_range = [5.0, 9.0]
//! dynamic_jitter = 0.2
//! dynamic_seed = 0
//! prior_threshold = 0.5
//! prior_closing_radius = 5
//! base_channels = 4
//! feature_channels = 32
//! depth = 4
//! warm_start = false
//!
//! # post-processing and evaluation
//! min_distance = 6
//! prob_threshold = 0.5
//! class_exclusive = false
//! eval_radius = 8.0
//! sweep_radii = [4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detect::PostprocParams;
use crate::error::{Error, Result};
use crate::eval::{DEFAULT_RADII, DEFAULT_RADIUS};
use crate::losses::{IouMode, LossWeights};
use crate::maskgen::DynamicMaskParams;
use crate::net::Head;
use crate::synthgen::SynthSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub seed: u64,

    pub rows: usize,
    pub cols: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_clusters: usize,
    pub cells_per_cluster: [usize; 2],
    pub n_other: [usize; 2],
    pub cell_radius_range: [f64; 2],
    pub shape_jitter: f64,
    pub stain_intensity: f64,
    pub background_noise: f64,

    pub epochs_pretrain: usize,
    pub epochs_main: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum_beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub lambda_c: f64,
    pub lambda_p: f64,
    pub lambda_d: f64,
    pub iou_mode: IouMode,
    pub normalize_prior_loss: bool,
    pub circle_radius: f64,
    pub dynamic_vertex_range: [usize; 2],
    pub dynamic_radius_range: [f64; 2],
    pub dynamic_jitter: f64,
    pub dynamic_seed: u64,
    pub prior_threshold: f64,
    pub prior_closing_radius: usize,
    pub base_channels: usize,
    pub feature_channels: usize,
    pub depth: usize,
    pub warm_start: bool,

    pub min_distance: usize,
    pub prob_threshold: f64,
    pub class_exclusive: bool,
    pub eval_radius: f64,
    pub sweep_radii: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let s = SynthSpec::default();
        let t = TrainConfig::default();
        let p = PostprocParams::default();
        Self {
            data_dir: PathBuf::from("data"),
            seed: t.seed,
            rows: s.rows,
            cols: s.cols,
            n_train: 40,
            n_test: 10,
            n_clusters: s.n_clusters,
            cells_per_cluster: s.cells_per_cluster,
            n_other: s.n_other,
            cell_radius_range: s.cell_radius_range,
            shape_jitter: s.shape_jitter,
            stain_intensity: s.stain_intensity,
            background_noise: s.background_noise,
            epochs_pretrain: t.epochs_pretrain,
            epochs_main: t.epochs_main,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum_beta1: t.momentum_beta1,
            beta2: t.beta2,
            weight_decay: t.weight_decay,
            alpha: t.weights.alpha,
            lambda_c: t.weights.lambda_c,
            lambda_p: t.weights.lambda_p,
            lambda_d: t.weights.lambda_d,
            iou_mode: t.iou_mode,
            normalize_prior_loss: t.normalize_prior_loss,
            circle_radius: t.circle_radius,
            dynamic_vertex_range: t.dynamic_params.vertex_range,
            dynamic_radius_range: t.dynamic_params.radius_range,
            dynamic_jitter: t.dynamic_params.jitter,
            dynamic_seed: t.dynamic_params.seed,
            prior_threshold: t.prior_threshold,
            prior_closing_radius: t.prior_closing_radius,
            base_channels: t.base_channels,
            feature_channels: t.feature_channels,
            depth: t.depth,
            warm_start: t.warm_start,
            min_distance: p.min_distance,
            prob_threshold: p.prob_threshold,
            class_exclusive: p.class_exclusive,
            eval_radius: DEFAULT_RADIUS,
            sweep_radii: DEFAULT_RADII.to_vec(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `path` and resolves `data_dir` against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if cfg.data_dir.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data_dir = dir.join(&cfg.data_dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_spec().validate()?;
        self.train_config().validate()?;
        self.postprocess().validate()?;
        if !(self.eval_radius >= 1.0 && self.eval_radius.is_finite()) {
            return Err(Error::Config(format!("eval_radius {} must be >= 1", self.eval_radius)));
        }
        if self.sweep_radii.is_empty() || self.sweep_radii.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("sweep_radii must be non-empty and strictly ascending".into()));
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            rows: self.rows,
            cols: self.cols,
            n_clusters: self.n_clusters,
            cells_per_cluster: self.cells_per_cluster,
            n_other: self.n_other,
            cell_radius_range: self.cell_radius_range,
            shape_jitter: self.shape_jitter,
            stain_intensity: self.stain_intensity,
            background_noise: self.background_noise,
        }
    }

    /// Training settings with every head enabled; narrow them with
    /// [`crate::train::ablation_variant`].
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs_pretrain: self.epochs_pretrain,
            epochs_main: self.epochs_main,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum_beta1: self.momentum_beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            weights: LossWeights {
                alpha: self.alpha,
                lambda_c: self.lambda_c,
                lambda_p: self.lambda_p,
                lambda_d: self.lambda_d,
            },
            iou_mode: self.iou_mode,
            normalize_prior_loss: self.normalize_prior_loss,
            circle_radius: self.circle_radius,
            dynamic_params: DynamicMaskParams {
                vertex_range: self.dynamic_vertex_range,
                radius_range: self.dynamic_radius_range,
                jitter: self.dynamic_jitter,
                seed: self.dynamic_seed,
            },
            prior_threshold: self.prior_threshold,
            prior_closing_radius: self.prior_closing_radius,
            seed: self.seed,
            heads: Head::ALL.to_vec(),
            base_channels: self.base_channels,
            feature_channels: self.feature_channels,
            depth: self.depth,
            warm_start: self.warm_start,
        }
    }

    pub fn postprocess(&self) -> PostprocParams {
        PostprocParams {
            min_distance: self.min_distance,
            prob_threshold: self.prob_threshold,
            class_exclusive: self.class_exclusive,
        }
    }
}
