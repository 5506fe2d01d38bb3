//! Similarity, correlation, and the pairwise contrastive objective.
//!
//! Embeddings are unit-norm rows, so cosine between embeddings is a plain
//! dot product. The loss treats matched rows (same instance, two modalities)
//! as positives and every mismatched row in the batch as a negative,
//! symmetrized over both directions because the modality graph is undirected.

use crate::encoders::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Matrix, Tape, ValueId};

/// Guard added to the shifted correlation so the distance stays finite at
/// rho = -1. Any strictly decreasing transform preserves the edge ordering
/// that tree construction consumes.
pub const DISTANCE_EPSILON: f64 = 1e-6;

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape {
            op: "cosine_sim",
            lhs: format!("len {}", u.len()),
            rhs: format!("len {}", v.len()),
        });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < 1e-12 {
        return Err(Error::DegenerateRow { row: 0, norm: nu });
    }
    if nv < 1e-12 {
        return Err(Error::DegenerateRow { row: 1, norm: nv });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Correlation factor between two modalities: mean cosine of aligned rows
/// over instances present in both. `rho` is `None` when nothing overlaps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeCorrelation {
    pub rho: Option<f64>,
    pub overlap: usize,
}

pub fn edge_correlation(zi: &EmbeddingMatrix, zj: &EmbeddingMatrix) -> Result<EdgeCorrelation> {
    if zi.n_instances() != zj.n_instances() {
        return Err(Error::Shape {
            op: "edge_correlation",
            lhs: format!("{} instances", zi.n_instances()),
            rhs: format!("{} instances", zj.n_instances()),
        });
    }
    let mut sum = 0.0;
    let mut overlap = 0;
    for idx in 0..zi.n_instances() {
        if zi.present[idx] && zj.present[idx] {
            sum += cosine_sim(zi.embeddings.row(idx), zj.embeddings.row(idx))?;
            overlap += 1;
        }
    }
    Ok(EdgeCorrelation {
        rho: (overlap > 0).then(|| sum / overlap as f64),
        overlap,
    })
}

/// d = 1 / (rho + 1 + eps): strictly decreasing in rho, finite at rho = -1.
pub fn distance_from_correlation(rho: f64) -> Result<f64> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::Domain(format!(
            "correlation must be in [-1, 1], got {rho}"
        )));
    }
    Ok(1.0 / (rho + 1.0 + DISTANCE_EPSILON))
}

/// Aligned embedding rows for one modality pair, restricted to instances
/// present in both.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub modality_i: usize,
    pub modality_j: usize,
    pub rows_i: Matrix,
    pub rows_j: Matrix,
    pub instance_indices: Vec<usize>,
}

impl PairBatch {
    /// Align two embedding matrices on their shared present instances.
    pub fn from_embeddings(
        modality_i: usize,
        modality_j: usize,
        zi: &EmbeddingMatrix,
        zj: &EmbeddingMatrix,
    ) -> Result<PairBatch> {
        if zi.n_instances() != zj.n_instances() || zi.dim() != zj.dim() {
            return Err(Error::Shape {
                op: "pair_batch",
                lhs: format!("{}x{}", zi.n_instances(), zi.dim()),
                rhs: format!("{}x{}", zj.n_instances(), zj.dim()),
            });
        }
        let shared: Vec<usize> = (0..zi.n_instances())
            .filter(|&idx| zi.present[idx] && zj.present[idx])
            .collect();
        Ok(PairBatch {
            modality_i,
            modality_j,
            rows_i: zi.embeddings.select_rows(&shared),
            rows_j: zj.embeddings.select_rows(&shared),
            instance_indices: shared,
        })
    }

    pub fn len(&self) -> usize {
        self.instance_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instance_indices.is_empty()
    }
}

fn check_loss_preconditions(batch_len: usize, temperature: f64) -> Result<()> {
    if batch_len < 2 {
        return Err(Error::InsufficientBatch { got: batch_len });
    }
    if temperature <= 0.0 {
        return Err(Error::Domain(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    Ok(())
}

/// One direction of the batch softmax loss: mean over rows of
/// (log-sum-exp of the row minus the matched entry), on S/tau.
fn directional_loss(scores: &Matrix, temperature: f64) -> f64 {
    let b = scores.rows();
    let mut total = 0.0;
    for r in 0..b {
        let row: Vec<f64> = scores.row(r).iter().map(|s| s / temperature).collect();
        total += log_sum_exp(&row) - row[r];
    }
    total / b as f64
}

/// Symmetric contrastive loss over a pair batch. Matched rows are the
/// positives; every other row in the batch is a negative for both
/// directions. Non-differentiable reference path.
pub fn contrastive_edge_loss(batch: &PairBatch, temperature: f64) -> Result<f64> {
    check_loss_preconditions(batch.len(), temperature)?;
    let s_ij = batch.rows_i.matmul_transpose_b(&batch.rows_j)?;
    let s_ji = s_ij.transpose();
    Ok(0.5 * (directional_loss(&s_ij, temperature) + directional_loss(&s_ji, temperature)))
}

/// Differentiable twin of `contrastive_edge_loss` recorded on a tape.
/// `zi` and `zj` are aligned unit-norm row matrices already on the tape.
pub fn contrastive_edge_loss_on_tape(
    tape: &mut Tape,
    zi: ValueId,
    zj: ValueId,
    temperature: f64,
) -> Result<ValueId> {
    let (rows, dim) = tape.value(zi).shape();
    if tape.value(zj).shape() != (rows, dim) {
        let (rj, cj) = tape.value(zj).shape();
        return Err(Error::Shape {
            op: "contrastive_edge_loss",
            lhs: format!("{rows}x{dim}"),
            rhs: format!("{rj}x{cj}"),
        });
    }
    check_loss_preconditions(rows, temperature)?;
    let diag: Vec<usize> = (0..rows).collect();

    let direction = |a: ValueId, b: ValueId, tape: &mut Tape| -> Result<ValueId> {
        let scores = tape.matmul_transpose_b(a, b)?;
        let scaled = tape.scale(scores, 1.0 / temperature);
        let lse = tape.row_log_sum_exp(scaled);
        let lse_mean = tape.mean(lse);
        let pos_mean = tape.gather_mean(scaled, diag.clone())?;
        tape.sub(lse_mean, pos_mean)
    };

    let loss_ij = direction(zi, zj, tape)?;
    let loss_ji = direction(zj, zi, tape)?;
    let sum = tape.add(loss_ij, loss_ji)?;
    Ok(tape.scale(sum, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    fn embedding(rows: Vec<Vec<f64>>, present: Vec<bool>) -> EmbeddingMatrix {
        EmbeddingMatrix {
            embeddings: Matrix::from_rows(&rows).unwrap(),
            present,
        }
    }

    fn batch_of(rows_i: Vec<Vec<f64>>, rows_j: Vec<Vec<f64>>) -> PairBatch {
        let n = rows_i.len();
        PairBatch {
            modality_i: 0,
            modality_j: 1,
            rows_i: Matrix::from_rows(&rows_i).unwrap(),
            rows_j: Matrix::from_rows(&rows_j).unwrap(),
            instance_indices: (0..n).collect(),
        }
    }

    #[test]
    fn cosine_identical_orthogonal_and_hand_value() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_sim(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap();
        assert!((c - 8.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_vector_is_degenerate() {
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateRow { .. })
        ));
    }

    #[test]
    fn cosine_scale_invariance() {
        use rand::Rng;
        let mut rng = seeded_rng(2, 0);
        for _ in 0..50 {
            let u = Matrix::uniform(1, 5, -2.0, 2.0, &mut rng);
            let v = Matrix::uniform(1, 5, -2.0, 2.0, &mut rng);
            let a = 0.001 + rng.gen_range(0.0..10.0f64);
            let b = 0.001 + rng.gen_range(0.0..10.0f64);
            let us: Vec<f64> = u.data().iter().map(|x| a * x).collect();
            let vs: Vec<f64> = v.data().iter().map(|x| b * x).collect();
            let base = cosine_sim(u.data(), v.data()).unwrap();
            let scaled = cosine_sim(&us, &vs).unwrap();
            assert!((base - scaled).abs() < 1e-12);
        }
    }

    #[test]
    fn correlation_identical_embeddings_is_one() {
        let z = embedding(
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]],
            vec![true; 3],
        );
        let c = edge_correlation(&z, &z).unwrap();
        assert_eq!(c.overlap, 3);
        assert!((c.rho.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_hand_example_with_orthogonal_units() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let zi = embedding(vec![e1.clone(), e2.clone(), e1.clone()], vec![true; 3]);
        let zj = embedding(vec![e1.clone(), e1.clone(), e2.clone()], vec![true; 3]);
        let c = edge_correlation(&zi, &zj).unwrap();
        assert_eq!(c.overlap, 3);
        assert!((c.rho.unwrap() - 1.0 / 3.0).abs() < 1e-12);

        // Middle instance absent on one side: rho = (1 + 0) / 2.
        let zj_masked = embedding(vec![e1.clone(), e1, e2], vec![true, false, true]);
        let c = edge_correlation(&zi, &zj_masked).unwrap();
        assert_eq!(c.overlap, 2);
        assert!((c.rho.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn correlation_zero_overlap_flags_invalid() {
        let zi = embedding(vec![vec![1.0, 0.0], vec![1.0, 0.0]], vec![true, false]);
        let zj = embedding(vec![vec![1.0, 0.0], vec![1.0, 0.0]], vec![false, true]);
        let c = edge_correlation(&zi, &zj).unwrap();
        assert_eq!(c.overlap, 0);
        assert_eq!(c.rho, None);
    }

    #[test]
    fn distance_formula_at_boundaries() {
        assert!((distance_from_correlation(1.0).unwrap() - 1.0 / (2.0 + 1e-6)).abs() < 1e-15);
        assert!((distance_from_correlation(0.0).unwrap() - 1.0 / (1.0 + 1e-6)).abs() < 1e-15);
        assert!((distance_from_correlation(-1.0).unwrap() - 1e6).abs() < 1e-6);
        assert!(distance_from_correlation(1.5).is_err());
    }

    #[test]
    fn distance_is_strictly_decreasing() {
        let mut rng = seeded_rng(4, 0);
        use rand::Rng;
        for _ in 0..200 {
            let a: f64 = rng.gen_range(-1.0..1.0);
            let b: f64 = rng.gen_range(-1.0..1.0);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if hi - lo < 1e-12 {
                continue;
            }
            assert!(distance_from_correlation(lo).unwrap() > distance_from_correlation(hi).unwrap());
        }
    }

    #[test]
    fn loss_is_log_b_when_all_rows_identical() {
        let row = vec![0.6, 0.8];
        let batch = batch_of(vec![row.clone(); 4], vec![row; 4]);
        let loss = contrastive_edge_loss(&batch, 0.37).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_two_by_two_hand_value() {
        let batch = batch_of(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        );
        let loss = contrastive_edge_loss(&batch, 1.0).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12, "loss {loss} vs {expected}");
    }

    #[test]
    fn loss_vanishes_in_the_sharp_limit() {
        // Diagonal similarity 1, off-diagonal -1, tau -> 0+.
        let batch = batch_of(
            vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
        );
        let loss = contrastive_edge_loss(&batch, 1e-3).unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn loss_preconditions() {
        let one_row = batch_of(vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0]]);
        assert!(matches!(
            contrastive_edge_loss(&one_row, 0.1),
            Err(Error::InsufficientBatch { got: 1 })
        ));
        let batch = batch_of(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        );
        assert!(matches!(
            contrastive_edge_loss(&batch, 0.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn loss_is_symmetric_under_pair_swap() {
        let mut rng = seeded_rng(6, 0);
        let zi = Matrix::uniform(5, 4, -1.0, 1.0, &mut rng)
            .l2_normalize_rows()
            .unwrap();
        let zj = Matrix::uniform(5, 4, -1.0, 1.0, &mut rng)
            .l2_normalize_rows()
            .unwrap();
        let fwd = PairBatch {
            modality_i: 0,
            modality_j: 1,
            rows_i: zi.clone(),
            rows_j: zj.clone(),
            instance_indices: (0..5).collect(),
        };
        let rev = PairBatch {
            modality_i: 1,
            modality_j: 0,
            rows_i: zj,
            rows_j: zi,
            instance_indices: (0..5).collect(),
        };
        let a = contrastive_edge_loss(&fwd, 0.1).unwrap();
        let b = contrastive_edge_loss(&rev, 0.1).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn loss_is_nonnegative_on_random_batches() {
        let mut rng = seeded_rng(7, 0);
        for _ in 0..50 {
            let zi = Matrix::uniform(6, 3, -1.0, 1.0, &mut rng)
                .l2_normalize_rows()
                .unwrap();
            let zj = Matrix::uniform(6, 3, -1.0, 1.0, &mut rng)
                .l2_normalize_rows()
                .unwrap();
            let batch = PairBatch {
                modality_i: 0,
                modality_j: 1,
                rows_i: zi,
                rows_j: zj,
                instance_indices: (0..6).collect(),
            };
            let loss = contrastive_edge_loss(&batch, 0.1).unwrap();
            assert!(loss >= 0.0, "negative loss {loss}");
        }
    }

    #[test]
    fn tape_loss_matches_reference_path() {
        let mut rng = seeded_rng(8, 0);
        let zi = Matrix::uniform(6, 4, -1.0, 1.0, &mut rng)
            .l2_normalize_rows()
            .unwrap();
        let zj = Matrix::uniform(6, 4, -1.0, 1.0, &mut rng)
            .l2_normalize_rows()
            .unwrap();
        let batch = PairBatch {
            modality_i: 0,
            modality_j: 1,
            rows_i: zi.clone(),
            rows_j: zj.clone(),
            instance_indices: (0..6).collect(),
        };
        let reference = contrastive_edge_loss(&batch, 0.1).unwrap();

        let mut tape = Tape::new();
        let a = tape.leaf(zi);
        let b = tape.leaf(zj);
        let loss = contrastive_edge_loss_on_tape(&mut tape, a, b, 0.1).unwrap();
        assert!((tape.scalar(loss).unwrap() - reference).abs() < 1e-12);
    }

    #[test]
    fn diagonal_gain_reduces_loss() {
        // Raising a matched similarity with everything else fixed must
        // strictly reduce the loss: checked by a directional difference on
        // the score matrix route.
        let mut rng = seeded_rng(9, 0);
        let zi = Matrix::uniform(5, 4, -1.0, 1.0, &mut rng)
            .l2_normalize_rows()
            .unwrap();
        let zj = Matrix::uniform(5, 4, -1.0, 1.0, &mut rng)
            .l2_normalize_rows()
            .unwrap();
        let s = zi.matmul_transpose_b(&zj).unwrap();
        let loss_of = |scores: &Matrix| {
            0.5 * (directional_loss(scores, 0.1) + directional_loss(&scores.transpose(), 0.1))
        };
        let base = loss_of(&s);
        let mut bumped = s.clone();
        bumped.set(2, 2, bumped.get(2, 2) + 1e-4);
        assert!(loss_of(&bumped) < base);
    }
}
