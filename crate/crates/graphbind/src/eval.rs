//! Evaluation protocol: per-class per-modality prototypes, concatenated
//! cosine classification with mask-aware block removal, and confusion-derived
//! metrics.

use crate::data::Dataset;
use crate::encoders::{encode, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::trainer::TrainState;
use std::fmt::Write as _;
use std::path::Path;

/// Unit-norm mean embedding per (class, active modality).
#[derive(Debug, Clone)]
pub struct ClassPrototypes {
    /// Active modality ids, in ascending order; the block ordering for every
    /// class vector.
    pub modality_ids: Vec<usize>,
    /// prototypes[class][block] is a unit vector of embedding dimension.
    pub prototypes: Vec<Vec<Vec<f64>>>,
}

impl ClassPrototypes {
    pub fn class_count(&self) -> usize {
        self.prototypes.len()
    }
}

/// Encode every active modality of `ds` under the trained encoders. All
/// active encoders must agree on the embedding dimension.
fn encode_active(state: &TrainState, ds: &Dataset) -> Result<Vec<(usize, EmbeddingMatrix)>> {
    let mut out: Vec<(usize, EmbeddingMatrix)> = Vec::new();
    for (idx, table) in ds.modalities.iter().enumerate() {
        if state.active[idx] {
            let emb = encode(&state.encoders[idx], table)?;
            if let Some((first, prev)) = out.first() {
                if emb.dim() != prev.dim() {
                    return Err(Error::Eval(format!(
                        "embedding dimension mismatch: modality {idx} has {}, modality {first} has {}",
                        emb.dim(),
                        prev.dim()
                    )));
                }
            }
            out.push((idx, emb));
        }
    }
    if out.is_empty() {
        return Err(Error::Eval("no active modality to evaluate".to_string()));
    }
    Ok(out)
}

/// Normalized per-class mean embeddings over the labeled training set.
pub fn class_prototypes(state: &TrainState, train: &Dataset) -> Result<ClassPrototypes> {
    let labels = train
        .labels
        .as_ref()
        .ok_or_else(|| Error::Eval("prototype construction needs labels".to_string()))?;
    let encoded = encode_active(state, train)?;
    let dim = encoded[0].1.dim();

    let mut prototypes = Vec::with_capacity(train.class_count);
    for class in 0..train.class_count {
        let mut blocks = Vec::with_capacity(encoded.len());
        for (modality, emb) in &encoded {
            let mut sum = vec![0.0f64; dim];
            let mut count = 0usize;
            for i in 0..train.n_instances() {
                if labels[i] == class && emb.present[i] {
                    for (s, v) in sum.iter_mut().zip(emb.embeddings.row(i)) {
                        *s += v;
                    }
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::Eval(format!(
                    "no present training instance for class {class} in modality '{}'",
                    train.modalities[*modality].name
                )));
            }
            let norm: f64 = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Eval(format!(
                    "prototype for class {class} in modality '{}' has near-zero norm",
                    train.modalities[*modality].name
                )));
            }
            for v in &mut sum {
                *v /= norm;
            }
            blocks.push(sum);
        }
        prototypes.push(blocks);
    }
    Ok(ClassPrototypes {
        modality_ids: encoded.into_iter().map(|(idx, _)| idx).collect(),
        prototypes,
    })
}

/// Cosine between the concatenation of the instance's present blocks and the
/// same blocks of a class vector. Blocks are unit vectors, so with k present
/// blocks both concatenations have norm sqrt(k).
fn masked_cosine(query_blocks: &[&[f64]], class_blocks: &[&[f64]]) -> f64 {
    debug_assert_eq!(query_blocks.len(), class_blocks.len());
    let k = query_blocks.len() as f64;
    let mut dot = 0.0;
    let mut qnorm2 = 0.0;
    for (q, p) in query_blocks.iter().zip(class_blocks) {
        dot += q.iter().zip(*p).map(|(a, b)| a * b).sum::<f64>();
        qnorm2 += q.iter().map(|a| a * a).sum::<f64>();
    }
    dot / (qnorm2.sqrt() * k.sqrt())
}

/// Assign every instance of `ds` to the class whose concatenated prototypes
/// have the highest mask-aware cosine; ties go to the lowest class index.
pub fn classify_dataset(
    protos: &ClassPrototypes,
    state: &TrainState,
    ds: &Dataset,
) -> Result<Vec<usize>> {
    let encoded = encode_active(state, ds)?;
    if encoded.len() != protos.modality_ids.len()
        || encoded
            .iter()
            .zip(&protos.modality_ids)
            .any(|((idx, _), pid)| idx != pid)
    {
        return Err(Error::Eval(
            "active modalities disagree with prototype blocks".to_string(),
        ));
    }
    let mut preds = Vec::with_capacity(ds.n_instances());
    for i in 0..ds.n_instances() {
        let present_blocks: Vec<usize> = (0..encoded.len())
            .filter(|&b| encoded[b].1.present[i])
            .collect();
        if present_blocks.is_empty() {
            return Err(Error::Eval(format!(
                "instance '{}' is absent in every active modality",
                ds.instance_ids[i]
            )));
        }
        let query: Vec<&[f64]> = present_blocks
            .iter()
            .map(|&b| encoded[b].1.embeddings.row(i))
            .collect();
        let mut best = (0usize, f64::NEG_INFINITY);
        for class in 0..protos.class_count() {
            let class_blocks: Vec<&[f64]> = present_blocks
                .iter()
                .map(|&b| protos.prototypes[class][b].as_slice())
                .collect();
            let score = masked_cosine(&query, &class_blocks);
            if score > best.1 {
                best = (class, score);
            }
        }
        preds.push(best.0);
    }
    Ok(preds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    /// confusion[true_class][predicted_class]
    pub confusion: Vec<Vec<usize>>,
}

/// Confusion-derived macro metrics. Classes that were never predicted (or
/// never occur) contribute 0 to the corresponding macro average.
pub fn compute_metrics(preds: &[usize], labels: &[usize]) -> Result<Metrics> {
    if preds.len() != labels.len() {
        return Err(Error::Shape {
            op: "compute_metrics",
            lhs: format!("{} predictions", preds.len()),
            rhs: format!("{} labels", labels.len()),
        });
    }
    if preds.is_empty() {
        return Err(Error::Eval("metrics need at least one prediction".to_string()));
    }
    let classes = preds.iter().chain(labels).max().unwrap() + 1;
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        confusion[l][p] += 1;
    }
    let trace: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let accuracy = trace as f64 / preds.len() as f64;

    let mut precision_sum = 0.0;
    let mut recall_sum = 0.0;
    for c in 0..classes {
        let tp = confusion[c][c];
        let predicted: usize = (0..classes).map(|t| confusion[t][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        if predicted > 0 {
            precision_sum += tp as f64 / predicted as f64;
        }
        if actual > 0 {
            recall_sum += tp as f64 / actual as f64;
        }
    }
    Ok(Metrics {
        accuracy,
        macro_precision: precision_sum / classes as f64,
        macro_recall: recall_sum / classes as f64,
        confusion,
    })
}

impl Metrics {
    pub fn write_confusion_csv(&self, path: &Path) -> Result<()> {
        let classes = self.confusion.len();
        let mut text = String::from("true\\pred");
        for c in 0..classes {
            let _ = write!(text, ",{c}");
        }
        text.push('\n');
        for (t, row) in self.confusion.iter().enumerate() {
            let _ = write!(text, "{t}");
            for v in row {
                let _ = write!(text, ",{v}");
            }
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for n = 1).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Render "0.916 ± 0.014".
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.3} \u{b1} {std:.3}")
}

/// Per-seed metrics plus aggregates as CSV. The aggregate rows are exactly
/// the mean and sample std of the per-seed rows above them.
pub fn write_metrics_csv(path: &Path, rows: &[(u64, Metrics)]) -> Result<()> {
    let mut text = String::from("seed,accuracy,precision,recall\n");
    for (seed, m) in rows {
        let _ = writeln!(
            text,
            "{seed},{},{},{}",
            m.accuracy, m.macro_precision, m.macro_recall
        );
    }
    let acc: Vec<f64> = rows.iter().map(|(_, m)| m.accuracy).collect();
    let prec: Vec<f64> = rows.iter().map(|(_, m)| m.macro_precision).collect();
    let rec: Vec<f64> = rows.iter().map(|(_, m)| m.macro_recall).collect();
    let (ma, sa) = mean_std(&acc);
    let (mp, sp) = mean_std(&prec);
    let (mr, sr) = mean_std(&rec);
    let _ = writeln!(text, "mean,{ma},{mp},{mr}");
    let _ = writeln!(text, "std,{sa},{sp},{sr}");
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ModalityTable;
    use crate::encoders::{Activation, CheckpointEntry, EncoderParams, EncoderSpec, Layer};
    use crate::numerics::Matrix;

    /// A state whose encoders are the identity on already-unit rows: square
    /// identity weights, no hidden layer.
    fn identity_state(dims: &[usize], active: &[bool]) -> TrainState {
        let entries: Vec<CheckpointEntry> = dims
            .iter()
            .enumerate()
            .map(|(idx, &d)| CheckpointEntry {
                name: format!("m{idx}"),
                active: active[idx],
                params: EncoderParams {
                    spec: EncoderSpec {
                        input_dim: d,
                        hidden_dims: vec![],
                        embedding_dim: d,
                        activation: Activation::Tanh,
                    },
                    layers: vec![Layer {
                        weight: Matrix::identity(d),
                        bias: Matrix::zeros(1, d),
                    }],
                },
            })
            .collect();
        TrainState::from_checkpoint(entries)
    }

    fn dataset(
        tables: Vec<(Vec<Vec<f64>>, Vec<bool>)>,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Dataset {
        let n = labels.len();
        let modalities = tables
            .into_iter()
            .enumerate()
            .map(|(idx, (rows, present))| ModalityTable {
                name: format!("m{idx}"),
                feature_dim: rows[0].len(),
                features: Matrix::from_rows(&rows).unwrap(),
                present,
            })
            .collect();
        Dataset {
            instance_ids: (0..n).map(|i| i.to_string()).collect(),
            labels: Some(labels),
            class_count,
            modalities,
        }
    }

    #[test]
    fn prototype_of_single_instance_is_its_embedding() {
        let ds = dataset(
            vec![(
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![true, true],
            )],
            vec![0, 1],
            2,
        );
        let state = identity_state(&[2], &[true]);
        let protos = class_prototypes(&state, &ds).unwrap();
        assert_eq!(protos.prototypes[0][0], vec![1.0, 0.0]);
        assert_eq!(protos.prototypes[1][0], vec![0.0, 1.0]);
    }

    #[test]
    fn prototype_of_two_orthogonal_instances_is_their_normalized_mean() {
        let ds = dataset(
            vec![(
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![true, true],
            )],
            vec![0, 0],
            1,
        );
        let state = identity_state(&[2], &[true]);
        let protos = class_prototypes(&state, &ds).unwrap();
        let expected = 1.0 / 2.0f64.sqrt();
        for (got, want) in protos.prototypes[0][0].iter().zip([expected, expected]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn prototypes_are_unit_norm() {
        let ds = dataset(
            vec![(
                vec![
                    vec![0.8, 0.6],
                    vec![0.6, 0.8],
                    vec![-0.6, 0.8],
                    vec![0.0, 1.0],
                ],
                vec![true; 4],
            )],
            vec![0, 0, 1, 1],
            2,
        );
        let state = identity_state(&[2], &[true]);
        let protos = class_prototypes(&state, &ds).unwrap();
        for class in &protos.prototypes {
            for block in class {
                let norm: f64 = block.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_class_modality_cell_is_named() {
        let ds = dataset(
            vec![(
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![true, false],
            )],
            vec![0, 1],
            2,
        );
        let state = identity_state(&[2], &[true]);
        match class_prototypes(&state, &ds) {
            Err(Error::Eval(msg)) => {
                assert!(msg.contains("class 1") && msg.contains("m0"), "{msg}");
            }
            other => panic!("expected eval error, got {other:?}"),
        }
    }

    /// Two modalities, two classes with orthogonal prototype blocks.
    fn two_modality_fixture() -> (TrainState, Dataset) {
        let train = dataset(
            vec![
                (
                    vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                    vec![true, true],
                ),
                (
                    vec![vec![0.0, 1.0], vec![1.0, 0.0]],
                    vec![true, true],
                ),
            ],
            vec![0, 1],
            2,
        );
        (identity_state(&[2, 2], &[true, true]), train)
    }

    #[test]
    fn instance_matching_a_class_prototype_is_assigned_that_class() {
        let (state, train) = two_modality_fixture();
        let protos = class_prototypes(&state, &train).unwrap();
        // The training instances themselves sit exactly on their prototypes.
        let preds = classify_dataset(&protos, &state, &train).unwrap();
        assert_eq!(preds, vec![0, 1]);
    }

    #[test]
    fn alignment_in_every_present_block_wins() {
        let (state, train) = two_modality_fixture();
        let protos = class_prototypes(&state, &train).unwrap();
        let test = dataset(
            vec![
                (vec![vec![1.0, 0.0]], vec![true]),
                (vec![vec![0.0, 1.0]], vec![true]),
            ],
            vec![0],
            2,
        );
        let preds = classify_dataset(&protos, &state, &test).unwrap();
        assert_eq!(preds, vec![0]);
    }

    #[test]
    fn absent_blocks_are_removed_from_the_comparison() {
        let (state, train) = two_modality_fixture();
        let protos = class_prototypes(&state, &train).unwrap();
        // Missing modality 1, identical to class 1's block 0 prototype: must
        // be class 1 no matter what modality 1's prototypes look like.
        let test = dataset(
            vec![
                (vec![vec![0.0, 1.0]], vec![true]),
                (vec![vec![0.0, 0.0]], vec![false]),
            ],
            vec![1],
            2,
        );
        let preds = classify_dataset(&protos, &state, &test).unwrap();
        assert_eq!(preds, vec![1]);
    }

    #[test]
    fn instance_absent_everywhere_is_an_eval_error() {
        let (state, train) = two_modality_fixture();
        let protos = class_prototypes(&state, &train).unwrap();
        let mut test = train.clone();
        for m in &mut test.modalities {
            m.present[0] = false;
        }
        // Bypass dataset validation on purpose: classify must still refuse.
        assert!(matches!(
            classify_dataset(&protos, &state, &test),
            Err(Error::Eval(_))
        ));
    }

    #[test]
    fn masked_cosine_is_scale_invariant_at_the_argmax() {
        let q: Vec<Vec<f64>> = vec![vec![0.6, 0.8], vec![1.0, 0.0]];
        let p: Vec<Vec<f64>> = vec![vec![0.0, 1.0], vec![0.7, 0.3]];
        let qs: Vec<&[f64]> = q.iter().map(|b| b.as_slice()).collect();
        let ps: Vec<&[f64]> = p.iter().map(|b| b.as_slice()).collect();
        let base = masked_cosine(&qs, &ps);
        let scaled_q: Vec<Vec<f64>> = q
            .iter()
            .map(|b| b.iter().map(|v| v * 3.7).collect())
            .collect();
        let qs2: Vec<&[f64]> = scaled_q.iter().map(|b| b.as_slice()).collect();
        assert!((masked_cosine(&qs2, &ps) - base).abs() < 1e-12);
    }

    #[test]
    fn shared_identical_block_never_changes_the_argmax() {
        // Block 1 identical across both classes; argmax decided by block 0.
        let q: Vec<&[f64]> = vec![&[1.0, 0.0], &[0.5, 0.5]];
        let class0: Vec<&[f64]> = vec![&[1.0, 0.0], &[0.6, 0.8]];
        let class1: Vec<&[f64]> = vec![&[0.0, 1.0], &[0.6, 0.8]];
        let with_shared =
            masked_cosine(&q, &class0).total_cmp(&masked_cosine(&q, &class1));
        let without_shared = masked_cosine(&q[..1], &class0[..1])
            .total_cmp(&masked_cosine(&q[..1], &class1[..1]));
        assert_eq!(with_shared, without_shared);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let m = compute_metrics(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_precision, 1.0);
        assert_eq!(m.macro_recall, 1.0);
    }

    #[test]
    fn hand_confusion_example() {
        let m = compute_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert!((m.accuracy - 0.75).abs() < 1e-12);
        assert!((m.macro_precision - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((m.macro_recall - 0.75).abs() < 1e-12);
    }

    #[test]
    fn relabeling_permutes_confusion_but_keeps_accuracy() {
        let preds = vec![0, 1, 1, 2, 0];
        let labels = vec![0, 1, 2, 2, 1];
        let base = compute_metrics(&preds, &labels).unwrap();
        // Swap classes 0 and 2 consistently.
        let swap = |c: usize| match c {
            0 => 2,
            2 => 0,
            other => other,
        };
        let preds2: Vec<usize> = preds.iter().map(|&c| swap(c)).collect();
        let labels2: Vec<usize> = labels.iter().map(|&c| swap(c)).collect();
        let permuted = compute_metrics(&preds2, &labels2).unwrap();
        assert_eq!(base.accuracy, permuted.accuracy);
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(base.confusion[t][p], permuted.confusion[swap(t)][swap(p)]);
            }
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(compute_metrics(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn mean_std_formats_like_the_report() {
        let (m, _) = mean_std(&[0.9, 0.93, 0.918]);
        assert!((m - 0.916).abs() < 1e-12);
        let rendered = format_mean_std(0.916, 0.014);
        assert_eq!(rendered, "0.916 \u{b1} 0.014");
    }
}
