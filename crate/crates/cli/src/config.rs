//! Run configuration: defaults, TOML files, validation and data-path resolution.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qdiff::data::{self, ImageBatch, Split};
use qdiff::diffusion::ScheduleConfig;
use qdiff::metrics::ExtractorKind;
use qdiff::quantum::Ansatz;
use qdiff::unet::{BottleneckKind, UNetConfig};

use crate::CliError;

/// Environment variable giving the default data directory.
pub const DATA_DIR_ENV: &str = "QDIFF_DATA_DIR";

/// Criterion used to pick the retained checkpoint; echoed into every run's config.
pub const BEST_CHECKPOINT_CRITERION: &str = "lowest epoch-mean training loss";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    /// IDX image/label file pair.
    Mnist,
    /// MedMNIST-style NPZ archive.
    Medmnist,
}

impl std::fmt::Display for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mnist => "mnist",
            Self::Medmnist => "medmnist",
        })
    }
}

/// Everything a train/compare run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Dataset,
    /// Base directory for relative data paths; falls back to `$QDIFF_DATA_DIR`, then `data`.
    pub data_dir: Option<PathBuf>,
    /// IDX images file (MNIST).
    pub images: Option<PathBuf>,
    /// IDX labels file (MNIST).
    pub labels: Option<PathBuf>,
    /// NPZ archive (MedMNIST).
    pub npz: Option<PathBuf>,
    /// NPZ split to read: `train`, `val` or `test`.
    pub split: String,
    pub class_label: i64,
    pub model: BottleneckKind,
    pub ansatz: Ansatz,
    pub skip_connections: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Diffusion steps `T`.
    pub steps: usize,
    /// Cosine-schedule offset `s`.
    pub offset: f64,
    pub normalize_alpha_bar: bool,
    pub ema_beta: f64,
    pub seed: u64,
    /// Keep only the first N images of the class (low-data regime).
    pub max_train_images: Option<usize>,
    /// Images in the per-epoch EMA sample grid.
    pub grid_samples: usize,
    /// Samples drawn per variant for evaluation in `compare`.
    pub eval_samples: usize,
    pub extractor: ExtractorKind,
    /// Threads for parameter-shift evaluation. Results are bit-reproducible only at 1.
    pub workers: usize,
    pub output_dir: PathBuf,
    /// Subdirectory name under `output_dir`; derived from the config when absent.
    pub run_id: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: Dataset::Mnist,
            data_dir: None,
            images: None,
            labels: None,
            npz: None,
            split: "train".into(),
            class_label: 0,
            model: BottleneckKind::Quantum,
            ansatz: Ansatz::RyVariational,
            skip_connections: true,
            epochs: 30,
            batch_size: 64,
            lr: 3e-4,
            steps: 1000,
            offset: 0.008,
            normalize_alpha_bar: false,
            ema_beta: 0.999,
            seed: 0,
            max_train_images: None,
            grid_samples: 16,
            eval_samples: 64,
            extractor: ExtractorKind::PixelPca,
            workers: 1,
            output_dir: PathBuf::from("runs"),
            run_id: None,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

impl RunConfig {
    /// Parse a TOML config file; unknown keys are rejected.
    pub fn from_toml_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.batch_size == 0 {
            return Err(usage("batch_size must be ≥ 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(usage(format!("lr must be positive, got {}", self.lr)));
        }
        if self.steps == 0 {
            return Err(usage("steps (T) must be ≥ 1"));
        }
        if !(self.offset > 0.0 && self.offset.is_finite()) {
            return Err(usage(format!(
                "offset (s) must be positive, got {}",
                self.offset
            )));
        }
        if !(self.ema_beta > 0.0 && self.ema_beta < 1.0) {
            return Err(usage(format!(
                "ema_beta must lie in (0, 1), got {}",
                self.ema_beta
            )));
        }
        if self.workers == 0 {
            return Err(usage("workers must be ≥ 1"));
        }
        if self.max_train_images == Some(0) {
            return Err(usage("max_train_images must be ≥ 1 when given"));
        }
        if self.eval_samples < 2 {
            return Err(usage("eval_samples must be ≥ 2"));
        }
        self.split
            .parse::<Split>()
            .map_err(|e| usage(e.to_string()))?;
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                return Err(usage(format!(
                    "run_id {id:?} is not a plain directory name"
                )));
            }
        }
        self.unet_config()
            .validate()
            .map_err(|e| usage(e.to_string()))?;
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        match self.dataset {
            Dataset::Mnist => 1,
            Dataset::Medmnist => 3,
        }
    }

    pub fn unet_config(&self) -> UNetConfig {
        let mut cfg = UNetConfig::new(self.in_channels(), self.model, self.ansatz);
        cfg.skip_connections = self.skip_connections;
        cfg
    }

    pub fn schedule(&self) -> ScheduleConfig {
        let mut s = ScheduleConfig::cosine(self.steps, self.offset);
        s.normalize_alpha_bar = self.normalize_alpha_bar;
        s
    }

    /// Short name of the model variant, e.g. `classical` or `quantum-ry_variational`.
    pub fn variant_name(&self) -> String {
        match self.model {
            BottleneckKind::Classical => "classical".into(),
            BottleneckKind::Quantum => format!("quantum-{}", self.ansatz),
        }
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| {
            format!(
                "{}-class{}-{}-seed{}",
                self.dataset,
                self.class_label,
                self.variant_name(),
                self.seed
            )
        })
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.run_id())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    /// Fill in data paths from the data directory so the echoed config is fully resolved.
    pub fn resolve_paths(&mut self) -> Result<(), CliError> {
        let dir = std::path::absolute(self.data_dir())
            .map_err(|e| CliError::Data(format!("cannot resolve data directory: {e}")))?;
        let pick = |given: &Option<PathBuf>, candidates: &[&str], what: &str| {
            if let Some(p) = given {
                return Ok(if p.is_absolute() {
                    p.clone()
                } else {
                    dir.join(p)
                });
            }
            candidates
                .iter()
                .map(|c| dir.join(c))
                .find(|p| p.is_file())
                .ok_or_else(|| {
                    CliError::Data(format!(
                        "no {what} file found under {} (tried {})",
                        dir.display(),
                        candidates.join(", ")
                    ))
                })
        };
        match self.dataset {
            Dataset::Mnist => {
                self.images = Some(pick(&self.images, &IDX_IMAGE_CANDIDATES, "MNIST images")?);
                self.labels = Some(pick(&self.labels, &IDX_LABEL_CANDIDATES, "MNIST labels")?);
            }
            Dataset::Medmnist => {
                self.npz = Some(pick(
                    &self.npz,
                    &["pathmnist.npz", "medmnist/pathmnist.npz"],
                    "NPZ",
                )?);
            }
        }
        self.data_dir = Some(dir);
        Ok(())
    }

    /// Raw images of the configured class, capped at `max_train_images`, in file order.
    pub fn load_class(&self) -> Result<ImageBatch, CliError> {
        let mut cfg = self.clone();
        cfg.resolve_paths()?;
        let all = match cfg.dataset {
            Dataset::Mnist => data::load_idx(
                cfg.images.as_ref().expect("resolved"),
                cfg.labels.as_ref().expect("resolved"),
            )?,
            Dataset::Medmnist => {
                let split: Split = cfg
                    .split
                    .parse()
                    .map_err(|e: qdiff::Error| usage(e.to_string()))?;
                data::load_npz(cfg.npz.as_ref().expect("resolved"), split)?
            }
        };
        let class = data::filter_class(&all, cfg.class_label);
        if class.is_empty() {
            return Err(CliError::Data(format!(
                "class {} has no images in the {} data",
                cfg.class_label, cfg.dataset
            )));
        }
        match cfg.max_train_images {
            Some(n) if n < class.len() => Ok(class.select(&(0..n).collect::<Vec<_>>())?),
            _ => Ok(class),
        }
    }
}

const IDX_IMAGE_CANDIDATES: [&str; 6] = [
    "train-images-idx3-ubyte",
    "train-images-idx3-ubyte.gz",
    "mnist/train-images-idx3-ubyte",
    "mnist/train-images-idx3-ubyte.gz",
    "mnist5k-images-idx3-ubyte.gz",
    "mnist/mnist5k-images-idx3-ubyte.gz",
];

const IDX_LABEL_CANDIDATES: [&str; 6] = [
    "train-labels-idx1-ubyte",
    "train-labels-idx1-ubyte.gz",
    "mnist/train-labels-idx1-ubyte",
    "mnist/train-labels-idx1-ubyte.gz",
    "mnist5k-labels-idx1-ubyte.gz",
    "mnist/mnist5k-labels-idx1-ubyte.gz",
];
