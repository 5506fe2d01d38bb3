//! Synthetic multimodal benchmark data with planted class structure.
//!
//! Instances live in a shared latent space with one centroid per class;
//! informative modalities observe the latent through a fixed random linear
//! map plus modality-local noise, noise modalities observe nothing. This
//! plants exactly the structure the modality graph is supposed to find.

use super::{Dataset, ModalityTable};
use crate::error::{Error, Result};
use crate::numerics::rng::streams;
use crate::numerics::{seeded_rng, standard_normal, Matrix};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Class centroids sit at mutually orthogonal directions scaled to this
/// length, so every pair of centroids is 2*sqrt(2) apart.
const CENTROID_SCALE: f64 = 2.0;

/// Within-class latent jitter. Shared across modalities: it carries instance
/// identity for the contrastive objective, while per-modality noise is what
/// averages out when modalities are fused.
const LATENT_JITTER: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    Informative,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub feature_dim: usize,
    pub kind: ModalityKind,
    /// Std of the modality-local Gaussian noise added to informative views.
    pub noise_scale: f64,
    pub missing_rate: f64,
}

impl ModalitySpec {
    pub fn informative(name: &str, feature_dim: usize, noise_scale: f64, missing_rate: f64) -> Self {
        ModalitySpec {
            name: name.to_string(),
            feature_dim,
            kind: ModalityKind::Informative,
            noise_scale,
            missing_rate,
        }
    }

    pub fn noise(name: &str, feature_dim: usize, missing_rate: f64) -> Self {
        ModalitySpec {
            name: name.to_string(),
            feature_dim,
            kind: ModalityKind::Noise,
            noise_scale: 1.0,
            missing_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub class_count: usize,
    pub latent_dim: usize,
    pub instances: usize,
    pub modalities: Vec<ModalitySpec>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config(format!(
                "class_count must be >= 2, got {}",
                self.class_count
            )));
        }
        if self.latent_dim < self.class_count {
            return Err(Error::Config(format!(
                "latent_dim {} too small for {} orthogonal class centroids",
                self.latent_dim, self.class_count
            )));
        }
        if self.instances == 0 {
            return Err(Error::Config("instances must be >= 1".to_string()));
        }
        let informative = self
            .modalities
            .iter()
            .filter(|m| m.kind == ModalityKind::Informative)
            .count();
        if informative < 2 {
            return Err(Error::Config(format!(
                "need >= 2 informative modalities, got {informative}"
            )));
        }
        for m in &self.modalities {
            if m.feature_dim == 0 {
                return Err(Error::Config(format!(
                    "modality '{}' has zero feature_dim",
                    m.name
                )));
            }
            if !(0.0..1.0).contains(&m.missing_rate) {
                return Err(Error::Config(format!(
                    "modality '{}' missing_rate must be in [0, 1), got {}",
                    m.name, m.missing_rate
                )));
            }
            if m.noise_scale < 0.0 {
                return Err(Error::Config(format!(
                    "modality '{}' noise_scale must be >= 0, got {}",
                    m.name, m.noise_scale
                )));
            }
        }
        Ok(())
    }
}

/// Mutually orthonormal directions from Gram-Schmidt on Gaussian draws.
fn orthonormal_directions<R: Rng>(count: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(count);
    while dirs.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        for prev in &dirs {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (vi, pi) in v.iter_mut().zip(prev) {
                *vi -= dot * pi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue; // essentially impossible; redraw
        }
        for vi in &mut v {
            *vi /= norm;
        }
        dirs.push(v);
    }
    dirs
}

pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seeded_rng(seed, streams::DATA);
    let n = spec.instances;
    let c = spec.class_count;

    let centroids: Vec<Vec<f64>> = orthonormal_directions(c, spec.latent_dim, &mut rng)
        .into_iter()
        .map(|d| d.into_iter().map(|x| x * CENTROID_SCALE).collect())
        .collect();

    // Balanced labels; any ordering bias is removed by the shuffled split.
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();

    let mut latents = Matrix::zeros(n, spec.latent_dim);
    for i in 0..n {
        for d in 0..spec.latent_dim {
            latents.set(i, d, centroids[labels[i]][d] + LATENT_JITTER * standard_normal(&mut rng));
        }
    }

    // Fixed random linear view per informative modality, entries scaled so
    // |A u| stays comparable to |u|.
    let mut modalities = Vec::with_capacity(spec.modalities.len());
    for mspec in &spec.modalities {
        let features = match mspec.kind {
            ModalityKind::Informative => {
                let a = Matrix::gaussian(
                    spec.latent_dim,
                    mspec.feature_dim,
                    1.0 / (spec.latent_dim as f64).sqrt(),
                    &mut rng,
                );
                let view = latents.matmul(&a)?;
                let noise = Matrix::gaussian(n, mspec.feature_dim, mspec.noise_scale, &mut rng);
                view.add(&noise)?
            }
            ModalityKind::Noise => Matrix::gaussian(n, mspec.feature_dim, 1.0, &mut rng),
        };
        modalities.push(ModalityTable {
            name: mspec.name.clone(),
            feature_dim: mspec.feature_dim,
            features,
            present: vec![true; n],
        });
    }

    // Presence masks, re-drawn per instance until at least one modality stays.
    for i in 0..n {
        loop {
            let mask: Vec<bool> = spec
                .modalities
                .iter()
                .map(|m| rng.gen_range(0.0..1.0) >= m.missing_rate)
                .collect();
            if mask.iter().any(|&p| p) {
                for (table, &p) in modalities.iter_mut().zip(&mask) {
                    table.present[i] = p;
                }
                break;
            }
        }
    }
    for table in &mut modalities {
        for i in 0..n {
            if !table.present[i] {
                table.features.row_mut(i).fill(0.0);
            }
        }
    }

    let ds = Dataset {
        instance_ids: (0..n).map(|i| i.to_string()).collect(),
        labels: Some(labels),
        class_count: c,
        modalities,
    };
    ds.validate()?;
    Ok(ds)
}
