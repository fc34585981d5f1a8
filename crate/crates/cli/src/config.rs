//! Experiment configuration: one JSON document fully determines one
//! experiment cell (dataset, split, training and outputs).

use anyhow::{bail, Context, Result};
use mirage_core::datasets::readers::{
    ingest_image_folder, load_cifar10, load_cifar100, load_class_mapping, load_idx_corpus,
};
use mirage_core::datasets::synthetic::{build_synthetic_corpus, SyntheticSpec};
use mirage_core::datasets::{build_one_class_split, Corpus, OneClassSplit};
use mirage_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Where the images come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic,
    Mnist,
    FashionMnist,
    Cifar10,
    Cifar100,
    Folder,
}

/// Dataset block. `source` and `normal_class` have no defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub source: Option<DatasetSource>,
    pub normal_class: Option<u32>,
    /// Directory of the corpus files for file-backed sources.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Class-name mapping JSON for folder corpora.
    #[serde(default)]
    pub mapping: Option<PathBuf>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Interpolation used when resizing; only "bilinear" is implemented, and
    /// the value is recorded in every run's config snapshot.
    #[serde(default = "default_resize")]
    pub resize: String,
    /// Shape overrides for the synthetic corpus.
    #[serde(default)]
    pub synthetic: Option<SyntheticOverrides>,
}

fn default_resize() -> String {
    "bilinear".to_string()
}

fn default_gamma() -> f64 {
    0.0
}

fn default_image_size() -> usize {
    32
}

fn default_seed() -> u64 {
    7
}

/// Optional synthetic-corpus sizing; unset fields keep their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticOverrides {
    pub train_normals: Option<usize>,
    pub train_anomaly_pool: Option<usize>,
    pub test_normals: Option<usize>,
    pub test_anomalies: Option<usize>,
    pub corruption_contrast: Option<f64>,
}

/// Output block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub run_root: PathBuf,
    /// Batch size used for evaluation passes.
    pub eval_batch: usize,
    pub export_csv: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            run_root: PathBuf::from("runs"),
            eval_batch: 256,
            export_csv: true,
        }
    }
}

/// Full experiment document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("cannot parse config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.source.is_none() {
            bail!("config error: dataset.source is required");
        }
        if self.dataset.normal_class.is_none() {
            bail!("config error: dataset.normal_class is required");
        }
        if !(0.0..1.0).contains(&self.dataset.gamma) {
            bail!(
                "config error: dataset.gamma must lie in [0, 1), got {}",
                self.dataset.gamma
            );
        }
        if self.dataset.resize != "bilinear" {
            bail!(
                "config error: dataset.resize only supports \"bilinear\", got {:?}",
                self.dataset.resize
            );
        }
        match self.dataset.source.unwrap() {
            DatasetSource::Synthetic => {}
            _ => {
                if self.dataset.path.is_none() {
                    bail!("config error: dataset.path is required for this dataset.source");
                }
            }
        }
        Ok(())
    }

    /// Stable digest of the canonical key-sorted JSON encoding.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("canonical encoding");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// Loads the corpus described by the dataset block.
    pub fn load_corpus(&self) -> Result<Corpus<mirage_core::Real>> {
        let d = &self.dataset;
        let size = d.image_size;
        let corpus = match d.source.expect("validated") {
            DatasetSource::Synthetic => {
                let o = d.synthetic.clone().unwrap_or_default();
                let defaults = SyntheticSpec::default();
                build_synthetic_corpus(&SyntheticSpec {
                    train_normals: o.train_normals.unwrap_or(defaults.train_normals),
                    train_anomaly_pool: o.train_anomaly_pool.unwrap_or(defaults.train_anomaly_pool),
                    test_normals: o.test_normals.unwrap_or(defaults.test_normals),
                    test_anomalies: o.test_anomalies.unwrap_or(defaults.test_anomalies),
                    image_size: size,
                    corruption_contrast: o
                        .corruption_contrast
                        .unwrap_or(defaults.corruption_contrast),
                    seed: d.seed,
                })?
            }
            DatasetSource::Mnist => {
                load_idx_corpus(d.path.as_ref().expect("validated"), "mnist", size)?
            }
            DatasetSource::FashionMnist => {
                load_idx_corpus(d.path.as_ref().expect("validated"), "fashion_mnist", size)?
            }
            DatasetSource::Cifar10 => load_cifar10(d.path.as_ref().expect("validated"), size)?,
            DatasetSource::Cifar100 => load_cifar100(d.path.as_ref().expect("validated"), size)?,
            DatasetSource::Folder => {
                let mapping = d
                    .mapping
                    .as_ref()
                    .map(|p| load_class_mapping(p))
                    .transpose()?;
                ingest_image_folder(d.path.as_ref().expect("validated"), mapping.as_ref(), size)?
            }
        };
        for warning in corpus.warnings() {
            eprintln!("warning: {warning}");
        }
        Ok(corpus)
    }

    /// Builds the one-class split for the loaded corpus.
    pub fn build_split(&self, corpus: &Corpus<mirage_core::Real>) -> Result<OneClassSplit> {
        Ok(build_one_class_split(
            corpus,
            self.dataset.normal_class.expect("validated"),
            self.dataset.gamma,
            self.dataset.seed,
        )?)
    }

    /// Training configuration with the element channel count resolved from
    /// the corpus.
    pub fn resolved_train(&self, corpus: &Corpus<mirage_core::Real>) -> TrainConfig {
        let mut train = self.train.clone();
        train.backbone.in_channels = corpus.channels();
        train
    }
}
