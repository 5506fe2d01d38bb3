//! Multimodal datasets: aligned per-modality feature tables with presence
//! masks, synthetic generation, and manifest/table file I/O.

mod io;
mod synth;

pub use io::{load_dataset, save_dataset};
pub use synth::{generate_synthetic, ModalityKind, ModalitySpec, SynthSpec};

use crate::error::{Error, Result};
use crate::numerics::rng::streams;
use crate::numerics::{seeded_rng, Matrix};
use rand::Rng;

/// One modality's feature matrix, aligned to the shared instance index.
/// Absent rows are all-zero and must never be read downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityTable {
    pub name: String,
    pub feature_dim: usize,
    pub features: Matrix,
    pub present: Vec<bool>,
}

impl ModalityTable {
    pub fn n_instances(&self) -> usize {
        self.present.len()
    }

    pub fn present_indices(&self) -> Vec<usize> {
        self.present
            .iter()
            .enumerate()
            .filter_map(|(i, &p)| p.then_some(i))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub instance_ids: Vec<String>,
    /// Class index per instance; optional at inference time.
    pub labels: Option<Vec<usize>>,
    pub class_count: usize,
    pub modalities: Vec<ModalityTable>,
}

impl Dataset {
    pub fn n_instances(&self) -> usize {
        self.instance_ids.len()
    }

    pub fn n_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.modalities.iter().map(|m| m.name.clone()).collect()
    }

    /// Every table shares the instance index, every instance is present in at
    /// least one modality, and labels fit in [0, class_count).
    pub fn validate(&self) -> Result<()> {
        let n = self.n_instances();
        for table in &self.modalities {
            if table.n_instances() != n || table.features.rows() != n {
                return Err(Error::Consistency(format!(
                    "modality '{}' has {} rows, expected {}",
                    table.name,
                    table.n_instances(),
                    n
                )));
            }
            if table.features.cols() != table.feature_dim {
                return Err(Error::Consistency(format!(
                    "modality '{}' declares feature_dim {} but table has {} columns",
                    table.name,
                    table.feature_dim,
                    table.features.cols()
                )));
            }
            for i in 0..n {
                if !table.present[i] && table.features.row(i).iter().any(|&v| v != 0.0) {
                    return Err(Error::Consistency(format!(
                        "modality '{}' has a non-zero absent row for instance '{}'",
                        table.name, self.instance_ids[i]
                    )));
                }
            }
        }
        for i in 0..n {
            if !self.modalities.iter().any(|m| m.present[i]) {
                return Err(Error::Consistency(format!(
                    "instance '{}' is absent in every modality",
                    self.instance_ids[i]
                )));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::Consistency(format!(
                    "{} labels for {} instances",
                    labels.len(),
                    n
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&c| c >= self.class_count) {
                return Err(Error::Consistency(format!(
                    "label {bad} outside [0, {})",
                    self.class_count
                )));
            }
        }
        Ok(())
    }

    /// Sub-dataset over the given instance indices (order preserved).
    pub fn restrict(&self, indices: &[usize]) -> Dataset {
        let modalities = self
            .modalities
            .iter()
            .map(|t| ModalityTable {
                name: t.name.clone(),
                feature_dim: t.feature_dim,
                features: t.features.select_rows(indices),
                present: indices.iter().map(|&i| t.present[i]).collect(),
            })
            .collect();
        Dataset {
            instance_ids: indices
                .iter()
                .map(|&i| self.instance_ids[i].clone())
                .collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            class_count: self.class_count,
            modalities,
        }
    }
}

/// Shuffled (train, eval) index split. `eval_fraction` of instances go to
/// the eval side, rounded down, at least one instance on each side.
pub fn split_indices(n: usize, eval_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&eval_fraction) || eval_fraction == 0.0 {
        return Err(Error::Config(format!(
            "eval_fraction must be in (0, 1), got {eval_fraction}"
        )));
    }
    if n < 2 {
        return Err(Error::Config(format!(
            "cannot split {n} instances into train and eval sides"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(seed, streams::SPLIT);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_eval = ((n as f64) * eval_fraction) as usize;
    let n_eval = n_eval.clamp(1, n.saturating_sub(1).max(1));
    let eval = order[..n_eval].to_vec();
    let train = order[n_eval..].to_vec();
    Ok((train, eval))
}

/// Independently mask each (instance, modality) cell at the given rate,
/// preserving at least one present modality per instance. Already-absent
/// entries stay absent.
pub fn apply_missingness(ds: &Dataset, rates: &[f64], seed: u64) -> Result<Dataset> {
    if rates.len() != ds.n_modalities() {
        return Err(Error::Config(format!(
            "{} rates for {} modalities",
            rates.len(),
            ds.n_modalities()
        )));
    }
    if let Some(bad) = rates.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(Error::Config(format!(
            "missing rate must be in [0, 1), got {bad}"
        )));
    }
    let mut rng = seeded_rng(seed, streams::MISSING);
    let mut out = ds.clone();
    for i in 0..ds.n_instances() {
        let before: Vec<usize> = (0..ds.n_modalities())
            .filter(|&m| ds.modalities[m].present[i])
            .collect();
        // One draw per modality regardless of current mask, so the stream does
        // not depend on prior missingness.
        let mut now_present = Vec::new();
        for m in 0..ds.n_modalities() {
            let drop: bool = rng.gen_range(0.0..1.0) < rates[m];
            let keep = ds.modalities[m].present[i] && !drop;
            out.modalities[m].present[i] = keep;
            if keep {
                now_present.push(m);
            }
        }
        if now_present.is_empty() && !before.is_empty() {
            let keep = before[rng.gen_range(0..before.len())];
            out.modalities[keep].present[i] = true;
        }
    }
    // Zero newly absent rows so they can never leak into a sum.
    for m in 0..out.n_modalities() {
        for i in 0..out.n_instances() {
            if !out.modalities[m].present[i] {
                out.modalities[m].features.row_mut(i).fill(0.0);
            }
        }
    }
    out.validate()?;
    Ok(out)
}
