//! Experiment configuration: TOML file parsing with strict key checking,
//! range validation, and documented defaults for every field left open.

use crate::data::{ModalityKind, ModalitySpec, SynthSpec};
use crate::encoders::Activation;
use crate::error::{Error, Result};
use crate::graph::GraphKind;
use crate::trainer::{OptimizerKind, TrainConfig};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic {
        spec: SynthSpec,
        /// Fixed generation seed; when absent each run generates with its
        /// own seed, so seed sweeps also resample the data.
        seed: Option<u64>,
    },
    Manifest { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Template for per-run training configs; the run seed is filled in
    /// per sweep entry.
    pub train: TrainConfig,
    /// Fraction of instances held out for evaluation.
    pub eval_fraction: f64,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.eval_fraction) || self.eval_fraction == 0.0 {
            return Err(Error::Config(format!(
                "eval_fraction must be in (0, 1), got {}",
                self.eval_fraction
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least 1 seed".to_string()));
        }
        self.train.validate()?;
        if let DatasetSource::Synthetic { spec, .. } = &self.dataset {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn with_run_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    /// The committed five-modality benchmark: four informative views of a
    /// shared latent, one pure-noise distractor, 20% missingness on one
    /// informative modality, 2000 train / 500 eval instances.
    pub fn synthetic_benchmark() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic {
                spec: SynthSpec {
                    class_count: 3,
                    latent_dim: 6,
                    instances: 2500,
                    modalities: vec![
                        ModalitySpec::informative("tab_a", 16, 1.0, 0.0),
                        ModalitySpec::informative("tab_b", 16, 1.0, 0.2),
                        ModalitySpec::informative("img_a", 16, 1.0, 0.0),
                        ModalitySpec::informative("img_b", 16, 1.0, 0.0),
                        ModalitySpec::noise("distractor", 16, 0.0),
                    ],
                },
                seed: None,
            },
            train: TrainConfig {
                graph_kind: GraphKind::Mst,
                prune_count: 1,
                ..TrainConfig::default()
            },
            eval_fraction: 0.2,
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: PathBuf::from("runs/benchmark"),
        }
    }
}

// ── Raw TOML layer ───────────────────────────────────────────────────

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset: RawDataset,
    #[serde(default)]
    train: RawTrain,
    #[serde(default)]
    experiment: RawExperiment,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
enum RawSourceKind {
    Synthetic,
    Manifest,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDataset {
    source: RawSourceKind,
    manifest: Option<PathBuf>,
    seed: Option<u64>,
    class_count: Option<usize>,
    latent_dim: Option<usize>,
    instances: Option<usize>,
    #[serde(default)]
    modalities: Vec<RawModality>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModality {
    name: String,
    feature_dim: usize,
    kind: ModalityKind,
    #[serde(default)]
    noise_scale: Option<f64>,
    #[serde(default)]
    missing_rate: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    embedding_dim: Option<usize>,
    hidden_dims: Option<Vec<usize>>,
    activation: Option<Activation>,
    temperature: Option<f64>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    graph: Option<GraphKind>,
    update_interval: Option<usize>,
    ema_beta: Option<f64>,
    prune_count: Option<usize>,
    protected: Option<Vec<usize>>,
    min_overlap: Option<usize>,
    optimizer: Option<OptimizerKind>,
    momentum: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    eval_fraction: Option<f64>,
    seeds: Option<Vec<u64>>,
    output_dir: Option<PathBuf>,
}

fn convert(raw: RawConfig, path: &Path) -> Result<ExperimentConfig> {
    let dataset = match raw.dataset.source {
        RawSourceKind::Manifest => {
            let rel = raw.dataset.manifest.ok_or_else(|| {
                Error::Config("dataset.manifest is required when source = \"manifest\"".to_string())
            })?;
            // Manifest paths resolve relative to the config file.
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            DatasetSource::Manifest {
                path: if rel.is_absolute() { rel } else { base.join(rel) },
            }
        }
        RawSourceKind::Synthetic => {
            let modalities = raw
                .dataset
                .modalities
                .into_iter()
                .map(|m| ModalitySpec {
                    name: m.name,
                    feature_dim: m.feature_dim,
                    kind: m.kind,
                    noise_scale: m.noise_scale.unwrap_or(match m.kind {
                        ModalityKind::Informative => 0.1,
                        ModalityKind::Noise => 1.0,
                    }),
                    missing_rate: m.missing_rate.unwrap_or(0.0),
                })
                .collect();
            DatasetSource::Synthetic {
                spec: SynthSpec {
                    class_count: raw.dataset.class_count.ok_or_else(|| {
                        Error::Config("dataset.class_count is required for synthetic data".to_string())
                    })?,
                    latent_dim: raw.dataset.latent_dim.ok_or_else(|| {
                        Error::Config("dataset.latent_dim is required for synthetic data".to_string())
                    })?,
                    instances: raw.dataset.instances.ok_or_else(|| {
                        Error::Config("dataset.instances is required for synthetic data".to_string())
                    })?,
                    modalities,
                },
                seed: raw.dataset.seed,
            }
        }
    };

    let defaults = TrainConfig::default();
    let t = raw.train;
    let train = TrainConfig {
        embedding_dim: t.embedding_dim.unwrap_or(defaults.embedding_dim),
        hidden_dims: t.hidden_dims.unwrap_or_else(|| defaults.hidden_dims.clone()),
        activation: t.activation.unwrap_or(defaults.activation),
        temperature: t.temperature.unwrap_or(defaults.temperature),
        learning_rate: t.learning_rate.unwrap_or(defaults.learning_rate),
        batch_size: t.batch_size.unwrap_or(defaults.batch_size),
        epochs: t.epochs.unwrap_or(defaults.epochs),
        graph_kind: t.graph.unwrap_or(defaults.graph_kind),
        update_interval: t.update_interval.unwrap_or(defaults.update_interval),
        ema_beta: t.ema_beta.unwrap_or(defaults.ema_beta),
        prune_count: t.prune_count.unwrap_or(defaults.prune_count),
        protected: t
            .protected
            .map(|p| p.into_iter().collect::<BTreeSet<usize>>())
            .unwrap_or_default(),
        min_overlap: t.min_overlap.unwrap_or(defaults.min_overlap),
        optimizer: t.optimizer.unwrap_or(defaults.optimizer),
        momentum: t.momentum.unwrap_or(defaults.momentum),
        seed: 0,
    };

    let e = raw.experiment;
    Ok(ExperimentConfig {
        dataset,
        train,
        eval_fraction: e.eval_fraction.unwrap_or(0.2),
        seeds: e.seeds.unwrap_or_else(|| vec![0]),
        output_dir: e.output_dir.unwrap_or_else(|| PathBuf::from("runs")),
    })
}

/// Parse and validate an experiment config file, filling every default.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let raw: RawConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
    let cfg = convert(raw, path)?;
    cfg.validate()?;
    Ok(cfg)
}
