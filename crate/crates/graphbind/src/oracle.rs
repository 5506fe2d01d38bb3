//! Brute-force verifiers: exhaustive spanning-tree enumeration via Prüfer
//! sequences, the grouped-vs-mixed loss comparison on planted fixtures, and
//! central finite-difference gradient checks. Everything here is an
//! independent route against the main implementation, so nothing in this
//! module may call into the tape's backward pass.

use crate::alignment::{contrastive_edge_loss, PairBatch};
use crate::encoders::{encode, init_encoder, Activation, EncoderParams, EncoderSpec, TapeEncoder};
use crate::error::{Error, Result};
use crate::graph::EdgeWeights;
use crate::numerics::rng::streams;
use crate::numerics::{seeded_rng, Matrix, Tape};
use std::collections::BTreeSet;

// ── Spanning-tree enumeration ────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct SpanningTree {
    /// Edges as (i, j) with i < j, sorted lexicographically so totals are
    /// always summed in the same order.
    pub edges: Vec<(usize, usize)>,
    pub total_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeEnumeration {
    /// Every spanning tree whose edges are all valid.
    pub trees: Vec<SpanningTree>,
    /// Index of the minimum-distance tree; ties resolve to the
    /// lexicographically smallest edge set. None if no tree survives the
    /// validity filter.
    pub min_index: Option<usize>,
}

impl TreeEnumeration {
    pub fn minimum(&self) -> Option<&SpanningTree> {
        self.min_index.map(|i| &self.trees[i])
    }
}

/// Decode a Prüfer sequence over m labels into the m-1 edges of the
/// corresponding labeled tree (smallest-leaf-first classic decoding).
fn prufer_to_edges(seq: &[usize], m: usize) -> Vec<(usize, usize)> {
    let mut degree = vec![1usize; m];
    for &v in seq {
        degree[v] += 1;
    }
    let mut edges = Vec::with_capacity(m - 1);
    for &v in seq {
        let leaf = (0..m).find(|&u| degree[u] == 1).expect("a leaf always exists");
        edges.push((leaf.min(v), leaf.max(v)));
        degree[leaf] -= 1;
        degree[v] -= 1;
    }
    let rest: Vec<usize> = (0..m).filter(|&u| degree[u] == 1).collect();
    edges.push((rest[0], rest[1]));
    edges
}

/// Enumerate every spanning tree of the active-node graph exactly once via
/// the Prüfer bijection (m^(m-2) labeled trees on m nodes).
pub fn enumerate_spanning_trees(
    weights: &EdgeWeights,
    active: &[bool],
) -> Result<TreeEnumeration> {
    let ids: Vec<usize> = (0..active.len()).filter(|&i| active[i]).collect();
    let m = ids.len();
    if !(2..=7).contains(&m) {
        return Err(Error::Size(format!(
            "tree enumeration supports 2..=7 active nodes, got {m}"
        )));
    }

    let seq_len = m - 2;
    let total_seqs = m.pow(seq_len as u32);
    let mut trees = Vec::new();
    let mut seq = vec![0usize; seq_len];
    for counter in 0..total_seqs {
        let mut rem = counter;
        for slot in seq.iter_mut() {
            *slot = rem % m;
            rem /= m;
        }
        let mut edges: Vec<(usize, usize)> = prufer_to_edges(&seq, m)
            .into_iter()
            .map(|(a, b)| {
                let (i, j) = (ids[a], ids[b]);
                (i.min(j), i.max(j))
            })
            .collect();
        if !edges.iter().all(|&(i, j)| weights.is_valid(i, j)) {
            continue;
        }
        edges.sort_unstable();
        let total_distance = edges
            .iter()
            .map(|&(i, j)| weights.distance(i, j).expect("validated edge"))
            .sum();
        trees.push(SpanningTree {
            edges,
            total_distance,
        });
    }

    let min_index = trees
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            a.total_distance
                .total_cmp(&b.total_distance)
                .then_with(|| a.edges.cmp(&b.edges))
        })
        .map(|(i, _)| i);
    Ok(TreeEnumeration { trees, min_index })
}

// ── Grouped-vs-mixed loss comparison ─────────────────────────────────

fn sum_pair_losses(
    embeddings: &[Matrix],
    members: &[usize],
    temperature: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for (a_pos, &a) in members.iter().enumerate() {
        for &b in &members[a_pos + 1..] {
            let rows = embeddings[a].rows();
            let batch = PairBatch {
                modality_i: a,
                modality_j: b,
                rows_i: embeddings[a].clone(),
                rows_j: embeddings[b].clone(),
                instance_indices: (0..rows).collect(),
            };
            total += contrastive_edge_loss(&batch, temperature)?;
        }
    }
    Ok(total)
}

/// Sum of pairwise losses inside each group versus over the pooled set.
/// Embeddings are fixed unit-norm row matrices, one per modality.
pub fn arrangement_loss_gap(
    embeddings: &[Matrix],
    group_i: &BTreeSet<usize>,
    group_j: &BTreeSet<usize>,
    temperature: f64,
) -> Result<(f64, f64)> {
    if !group_i.is_disjoint(group_j) {
        return Err(Error::Domain(
            "groups must be disjoint modality sets".to_string(),
        ));
    }
    if group_i.len() < 2 || group_j.len() < 2 {
        return Err(Error::Domain(
            "each group needs at least 2 modalities".to_string(),
        ));
    }
    if let Some(&bad) = group_i.union(group_j).find(|&&m| m >= embeddings.len()) {
        return Err(Error::Domain(format!(
            "modality {bad} out of range for {} embedding sets",
            embeddings.len()
        )));
    }
    let members_i: Vec<usize> = group_i.iter().copied().collect();
    let members_j: Vec<usize> = group_j.iter().copied().collect();
    let grouped =
        sum_pair_losses(embeddings, &members_i, temperature)?
            + sum_pair_losses(embeddings, &members_j, temperature)?;
    let pooled: Vec<usize> = group_i.union(group_j).copied().collect();
    let mixed = sum_pair_losses(embeddings, &pooled, temperature)?;
    Ok((grouped, mixed))
}

/// Naive re-computation of the symmetric edge loss with explicit double
/// loops and no log-sum-exp rearrangement. Only safe for unit-norm rows and
/// moderate 1/temperature, which is all the cross-check needs.
pub fn naive_edge_loss(rows_i: &Matrix, rows_j: &Matrix, temperature: f64) -> f64 {
    let b = rows_i.rows();
    let sim = |a: &Matrix, r: usize, bm: &Matrix, c: usize| -> f64 {
        a.row(r).iter().zip(bm.row(c)).map(|(x, y)| x * y).sum()
    };
    let mut total = 0.0;
    for (a, bm) in [(rows_i, rows_j), (rows_j, rows_i)] {
        for r in 0..b {
            let mut denom = 0.0;
            for c in 0..b {
                denom += (sim(a, r, bm, c) / temperature).exp();
            }
            total += denom.ln() - sim(a, r, bm, r) / temperature;
        }
    }
    total / (2 * b) as f64
}

/// The planted two-group fixture: group one holds `group_size` jittered
/// copies of a random unit-row set A, group two holds jittered copies of A
/// with rows cyclically shifted, so cross-group aligned pairs are
/// decorrelated while within-group aligned pairs agree.
pub fn planted_fixture(
    group_size: usize,
    rows: usize,
    dim: usize,
    jitter: f64,
    seed: u64,
) -> Result<Vec<Matrix>> {
    let mut rng = seeded_rng(seed, streams::DATA);
    let base = Matrix::gaussian(rows, dim, 1.0, &mut rng).l2_normalize_rows()?;
    let shifted_rows: Vec<usize> = (0..rows).map(|r| (r + 1) % rows).collect();
    let shifted = base.select_rows(&shifted_rows);
    let mut out = Vec::with_capacity(2 * group_size);
    for template in [&base, &shifted] {
        for _ in 0..group_size {
            let noise = Matrix::gaussian(rows, dim, jitter, &mut rng);
            out.push(template.add(&noise)?.l2_normalize_rows()?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrangementTrial {
    pub draw: usize,
    pub grouped: f64,
    pub mixed: f64,
}

/// Run `draws` independent planted fixtures and report both sums per draw.
pub fn arrangement_trials(
    draws: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<ArrangementTrial>> {
    let group_i: BTreeSet<usize> = [0, 1, 2].into_iter().collect();
    let group_j: BTreeSet<usize> = [3, 4, 5].into_iter().collect();
    (0..draws)
        .map(|draw| {
            let embeddings = planted_fixture(3, 16, 8, 0.05, seed.wrapping_add(draw as u64))?;
            let (grouped, mixed) =
                arrangement_loss_gap(&embeddings, &group_i, &group_j, temperature)?;
            Ok(ArrangementTrial {
                draw,
                grouped,
                mixed,
            })
        })
        .collect()
}

// ── Finite-difference gradient checking ──────────────────────────────

/// Central finite differences of `f` at `point` against the supplied
/// analytic gradient. Returns max_k |g_k - fd_k| / max(1e-8, |g_k| + |fd_k|).
pub fn gradient_check(
    f: impl Fn(&[f64]) -> Result<f64>,
    analytic: &[f64],
    point: &[f64],
    h: f64,
) -> Result<f64> {
    if !(1e-8..=1e-2).contains(&h) {
        return Err(Error::Domain(format!(
            "step h must be in [1e-8, 1e-2], got {h}"
        )));
    }
    if analytic.len() != point.len() {
        return Err(Error::Shape {
            op: "gradient_check",
            lhs: format!("{} gradient entries", analytic.len()),
            rhs: format!("{} parameters", point.len()),
        });
    }
    let mut worst = 0.0f64;
    let mut perturbed = point.to_vec();
    for k in 0..point.len() {
        perturbed[k] = point[k] + h;
        let plus = f(&perturbed)?;
        perturbed[k] = point[k] - h;
        let minus = f(&perturbed)?;
        perturbed[k] = point[k];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Domain(format!(
                "non-finite loss at perturbed coordinate {k}"
            )));
        }
        let fd = (plus - minus) / (2.0 * h);
        let g = analytic[k];
        let rel = (g - fd).abs() / (g.abs() + fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Max relative gradient error of the full edge loss through two freshly
/// initialized encoders, with every weight and bias treated as a parameter.
/// The forward route for finite differences is the plain (tape-free)
/// encode + loss path.
pub fn edge_loss_gradient_error(
    batch: usize,
    feature_dim: usize,
    embedding_dim: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    let spec = EncoderSpec {
        input_dim: feature_dim,
        hidden_dims: vec![6],
        embedding_dim,
        activation: Activation::Tanh,
    };
    let params_a = init_encoder(&spec, seed)?;
    let params_b = init_encoder(&spec, seed.wrapping_add(1))?;
    let mut rng = seeded_rng(seed, streams::DATA);
    let x_a = Matrix::uniform(batch, feature_dim, -2.0, 2.0, &mut rng);
    let x_b = Matrix::uniform(batch, feature_dim, -2.0, 2.0, &mut rng);
    let temperature = 0.1;

    // Analytic gradients off the tape.
    let mut tape = Tape::new();
    let xa = tape.leaf(x_a.clone());
    let xb = tape.leaf(x_b.clone());
    let enc_a = TapeEncoder::register(&mut tape, &params_a);
    let enc_b = TapeEncoder::register(&mut tape, &params_b);
    let za = enc_a.forward(&mut tape, xa)?;
    let zb = enc_b.forward(&mut tape, xb)?;
    let loss = crate::alignment::contrastive_edge_loss_on_tape(&mut tape, za, zb, temperature)?;
    tape.backward(loss)?;
    let mut analytic = Vec::new();
    for layer in enc_a.grads(&tape, &params_a) {
        analytic.extend_from_slice(layer.weight.data());
        analytic.extend_from_slice(layer.bias.data());
    }
    for layer in enc_b.grads(&tape, &params_b) {
        analytic.extend_from_slice(layer.weight.data());
        analytic.extend_from_slice(layer.bias.data());
    }

    let point: Vec<f64> = flatten_params(&params_a)
        .into_iter()
        .chain(flatten_params(&params_b))
        .collect();
    let split = flatten_params(&params_a).len();

    let f = move |flat: &[f64]| -> Result<f64> {
        let pa = unflatten_params(&spec, &flat[..split])?;
        let pb = unflatten_params(&spec, &flat[split..])?;
        let table = |x: &Matrix| crate::data::ModalityTable {
            name: "probe".to_string(),
            feature_dim: x.cols(),
            features: x.clone(),
            present: vec![true; x.rows()],
        };
        let za = encode(&pa, &table(&x_a))?;
        let zb = encode(&pb, &table(&x_b))?;
        let pair = PairBatch::from_embeddings(0, 1, &za, &zb)?;
        contrastive_edge_loss(&pair, temperature)
    };
    gradient_check(f, &analytic, &point, h)
}

pub fn flatten_params(params: &EncoderParams) -> Vec<f64> {
    let mut flat = Vec::new();
    for layer in &params.layers {
        flat.extend_from_slice(layer.weight.data());
        flat.extend_from_slice(layer.bias.data());
    }
    flat
}

pub fn unflatten_params(spec: &EncoderSpec, flat: &[f64]) -> Result<EncoderParams> {
    let template = init_encoder(spec, 0)?;
    let mut layers = Vec::with_capacity(template.layers.len());
    let mut offset = 0;
    for layer in &template.layers {
        let (rows, cols) = layer.weight.shape();
        let w_len = rows * cols;
        let weight = Matrix::from_vec(rows, cols, flat[offset..offset + w_len].to_vec())?;
        offset += w_len;
        let bias = Matrix::from_vec(1, cols, flat[offset..offset + cols].to_vec())?;
        offset += cols;
        layers.push(crate::encoders::Layer { weight, bias });
    }
    if offset != flat.len() {
        return Err(Error::Shape {
            op: "unflatten_params",
            lhs: format!("{} values", flat.len()),
            rhs: format!("{offset} expected"),
        });
    }
    Ok(EncoderParams {
        spec: spec.clone(),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::kruskal_mst;
    use rand::Rng;

    fn full_random_weights(n: usize, rng: &mut impl Rng) -> EdgeWeights {
        let mut w = EdgeWeights::new(n);
        for i in 0..n {
            for j in (i + 1)..n {
                w.set_edge(i, j, rng.gen_range(-0.99..0.99)).unwrap();
            }
        }
        w
    }

    #[test]
    fn cayley_counts_for_all_supported_sizes() {
        let mut rng = seeded_rng(31, 0);
        for m in 2..=7usize {
            let w = full_random_weights(m, &mut rng);
            let trees = enumerate_spanning_trees(&w, &vec![true; m]).unwrap();
            assert_eq!(
                trees.trees.len(),
                m.pow(m as u32 - 2),
                "Cayley count failed for m={m}"
            );
        }
    }

    #[test]
    fn three_nodes_have_three_trees_two_have_one() {
        let mut rng = seeded_rng(32, 0);
        let w3 = full_random_weights(3, &mut rng);
        assert_eq!(enumerate_spanning_trees(&w3, &[true; 3]).unwrap().trees.len(), 3);
        let w2 = full_random_weights(2, &mut rng);
        assert_eq!(enumerate_spanning_trees(&w2, &[true; 2]).unwrap().trees.len(), 1);
    }

    #[test]
    fn oversized_enumeration_is_a_size_error() {
        let mut rng = seeded_rng(33, 0);
        let w = full_random_weights(8, &mut rng);
        assert!(matches!(
            enumerate_spanning_trees(&w, &[true; 8]),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn every_enumerated_tree_is_distinct() {
        let mut rng = seeded_rng(34, 0);
        let w = full_random_weights(5, &mut rng);
        let e = enumerate_spanning_trees(&w, &[true; 5]).unwrap();
        let mut seen: Vec<&Vec<(usize, usize)>> = e.trees.iter().map(|t| &t.edges).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 125);
    }

    #[test]
    fn kruskal_matches_enumeration_minimum_on_random_draws() {
        let mut rng = seeded_rng(35, 0);
        for _ in 0..100 {
            let m = rng.gen_range(3..=5usize);
            let w = full_random_weights(m, &mut rng);
            let active = vec![true; m];
            let mst = kruskal_mst(&w, &active).unwrap();
            let mut mst_edges: Vec<(usize, usize)> =
                mst.edges.iter().map(|e| (e.i, e.j)).collect();
            mst_edges.sort_unstable();
            let mst_total: f64 = mst_edges
                .iter()
                .map(|&(i, j)| w.distance(i, j).unwrap())
                .sum();
            let best = enumerate_spanning_trees(&w, &active).unwrap();
            let best = best.minimum().unwrap();
            assert_eq!(mst_edges, best.edges);
            assert_eq!(mst_total.to_bits(), best.total_distance.to_bits());
        }
    }

    #[test]
    fn enumeration_skips_invalid_edges() {
        let mut w = EdgeWeights::new(3);
        w.set_edge(0, 1, 0.5).unwrap();
        w.set_edge(1, 2, 0.5).unwrap();
        // (0,2) invalid: only the path tree remains.
        let e = enumerate_spanning_trees(&w, &[true; 3]).unwrap();
        assert_eq!(e.trees.len(), 1);
        assert_eq!(e.minimum().unwrap().edges, vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn quadratic_gradient_check_is_exact() {
        let f = |x: &[f64]| Ok(x[0] * x[0]);
        let err = gradient_check(f, &[6.0], &[3.0], 1e-5).unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn truncation_error_grows_with_h() {
        let f = |x: &[f64]| Ok(x[0].powi(4));
        let g = [4.0 * 1.3f64.powi(3)];
        let coarse = gradient_check(&f, &g, &[1.3], 1e-2).unwrap();
        let fine = gradient_check(&f, &g, &[1.3], 1e-5).unwrap();
        assert!(coarse > fine, "coarse {coarse} vs fine {fine}");
    }

    #[test]
    fn gradient_check_domain_errors() {
        let f = |x: &[f64]| Ok(x[0]);
        assert!(gradient_check(&f, &[1.0], &[0.0], 1e-9).is_err());
        assert!(gradient_check(&f, &[1.0], &[0.0], 0.1).is_err());
        let nan_f = |x: &[f64]| Ok(if x[0] > 0.0 { f64::NAN } else { x[0] });
        assert!(gradient_check(&nan_f, &[1.0], &[0.0], 1e-5).is_err());
    }

    #[test]
    fn edge_loss_through_encoders_passes_fd_check() {
        let err = edge_loss_gradient_error(8, 5, 4, 1e-5, 41).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    /// Flatten a list of matrices into one parameter vector and back.
    fn pack(mats: &[Matrix]) -> Vec<f64> {
        mats.iter().flat_map(|m| m.data().to_vec()).collect()
    }

    fn unpack(shapes: &[(usize, usize)], flat: &[f64]) -> Vec<Matrix> {
        let mut mats = Vec::new();
        let mut offset = 0;
        for &(r, c) in shapes {
            mats.push(Matrix::from_vec(r, c, flat[offset..offset + r * c].to_vec()).unwrap());
            offset += r * c;
        }
        mats
    }

    /// FD-check one tape op: builds the graph via `build`, reduces to a
    /// scalar with `sum` when needed, and differentiates w.r.t. all inputs.
    fn op_gradient_error(
        inputs: &[Matrix],
        build: impl Fn(&mut Tape, &[crate::numerics::ValueId]) -> Result<crate::numerics::ValueId>,
    ) -> f64 {
        let shapes: Vec<(usize, usize)> = inputs.iter().map(Matrix::shape).collect();
        let forward = |flat: &[f64]| -> Result<f64> {
            let mut tape = Tape::new();
            let ids: Vec<_> = unpack(&shapes, flat)
                .into_iter()
                .map(|m| tape.param(m))
                .collect();
            let out = build(&mut tape, &ids)?;
            let scalar = if tape.value(out).is_scalar() {
                out
            } else {
                tape.sum(out)
            };
            tape.scalar(scalar)
        };

        let mut tape = Tape::new();
        let ids: Vec<_> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let out = build(&mut tape, &ids).unwrap();
        let scalar = if tape.value(out).is_scalar() {
            out
        } else {
            tape.sum(out)
        };
        tape.backward(scalar).unwrap();
        let analytic: Vec<f64> = ids
            .iter()
            .flat_map(|&id| tape.grad(id).unwrap().data().to_vec())
            .collect();
        gradient_check(forward, &analytic, &pack(inputs), 1e-5).unwrap()
    }

    #[test]
    fn every_tape_op_matches_finite_differences() {
        let mut rng = seeded_rng(40, 0);
        let rand = |r: usize, c: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            Matrix::uniform(r, c, -2.0, 2.0, rng)
        };
        // Keep relu inputs away from its kink at zero.
        let rand_off_zero = |r: usize, c: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            Matrix::uniform(r, c, -2.0, 2.0, rng).map(|v| v + 0.05 * v.signum())
        };

        let bound = 1e-4;
        let a43 = rand(4, 3, &mut rng);
        let b35 = rand(3, 5, &mut rng);
        let err = op_gradient_error(&[a43, b35], |t, ids| t.matmul(ids[0], ids[1]));
        assert!(err < bound, "matmul {err}");

        let a = rand(4, 3, &mut rng);
        let b = rand(5, 3, &mut rng);
        let err = op_gradient_error(&[a, b], |t, ids| t.matmul_transpose_b(ids[0], ids[1]));
        assert!(err < bound, "matmul_transpose_b {err}");

        let a = rand(4, 3, &mut rng);
        let bias = rand(1, 3, &mut rng);
        let err = op_gradient_error(&[a, bias], |t, ids| t.add_row_broadcast(ids[0], ids[1]));
        assert!(err < bound, "add_row_broadcast {err}");

        let a = rand(3, 4, &mut rng);
        let b = rand(3, 4, &mut rng);
        let err = op_gradient_error(&[a.clone(), b.clone()], |t, ids| t.add(ids[0], ids[1]));
        assert!(err < bound, "add {err}");
        let err = op_gradient_error(&[a.clone(), b.clone()], |t, ids| t.sub(ids[0], ids[1]));
        assert!(err < bound, "sub {err}");
        let err = op_gradient_error(&[a.clone(), b], |t, ids| t.mul_elem(ids[0], ids[1]));
        assert!(err < bound, "mul_elem {err}");
        let err = op_gradient_error(&[a.clone()], |t, ids| Ok(t.scale(ids[0], -1.7)));
        assert!(err < bound, "scale {err}");
        let err = op_gradient_error(&[a.clone()], |t, ids| Ok(t.tanh(ids[0])));
        assert!(err < bound, "tanh {err}");

        let off = rand_off_zero(3, 4, &mut rng);
        let err = op_gradient_error(&[off], |t, ids| Ok(t.relu(ids[0])));
        assert!(err < bound, "relu {err}");

        let a = rand(4, 3, &mut rng);
        let err = op_gradient_error(&[a], |t, ids| t.l2_normalize_rows(ids[0]));
        assert!(err < bound, "l2_normalize_rows {err}");

        let a = rand(4, 5, &mut rng);
        let err = op_gradient_error(&[a], |t, ids| Ok(t.row_log_sum_exp(ids[0])));
        assert!(err < bound, "row_log_sum_exp {err}");

        let a = rand(4, 5, &mut rng);
        let err = op_gradient_error(&[a], |t, ids| t.gather_mean(ids[0], vec![2, 0, 4, 1]));
        assert!(err < bound, "gather_mean {err}");

        let a = rand(4, 5, &mut rng);
        let err = op_gradient_error(&[a.clone()], |t, ids| Ok(t.mean(ids[0])));
        assert!(err < bound, "mean {err}");
        let err = op_gradient_error(&[a], |t, ids| Ok(t.sum(ids[0])));
        assert!(err < bound, "sum {err}");
    }

    #[test]
    fn naive_loss_agrees_with_alignment_module() {
        let mut rng = seeded_rng(36, 0);
        for _ in 0..20 {
            let b = rng.gen_range(2..10usize);
            let zi = Matrix::uniform(b, 6, -1.0, 1.0, &mut rng)
                .l2_normalize_rows()
                .unwrap();
            let zj = Matrix::uniform(b, 6, -1.0, 1.0, &mut rng)
                .l2_normalize_rows()
                .unwrap();
            let batch = PairBatch {
                modality_i: 0,
                modality_j: 1,
                rows_i: zi.clone(),
                rows_j: zj.clone(),
                instance_indices: (0..b).collect(),
            };
            let fast = contrastive_edge_loss(&batch, 0.1).unwrap();
            let slow = naive_edge_loss(&zi, &zj, 0.1);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn identical_embeddings_make_grouped_strictly_smaller() {
        let base = Matrix::gaussian(8, 4, 1.0, &mut seeded_rng(37, 0))
            .l2_normalize_rows()
            .unwrap();
        let embeddings = vec![base; 6];
        let gi: BTreeSet<usize> = [0, 1, 2].into_iter().collect();
        let gj: BTreeSet<usize> = [3, 4, 5].into_iter().collect();
        let (grouped, mixed) = arrangement_loss_gap(&embeddings, &gi, &gj, 0.1).unwrap();
        // All per-pair losses are equal here; mixed simply sums more pairs.
        assert!(grouped < mixed);
        let per_pair = grouped / 6.0;
        assert!((mixed - 15.0 * per_pair).abs() < 1e-9);
    }

    #[test]
    fn planted_fixture_shows_the_gap() {
        let embeddings = planted_fixture(3, 16, 8, 0.05, 42).unwrap();
        let gi: BTreeSet<usize> = [0, 1, 2].into_iter().collect();
        let gj: BTreeSet<usize> = [3, 4, 5].into_iter().collect();
        let (grouped, mixed) = arrangement_loss_gap(&embeddings, &gi, &gj, 0.1).unwrap();
        assert!(
            grouped < mixed,
            "grouped {grouped} not below mixed {mixed}"
        );
    }

    #[test]
    fn overlapping_groups_are_rejected() {
        let embeddings = planted_fixture(3, 8, 4, 0.05, 1).unwrap();
        let gi: BTreeSet<usize> = [0, 1, 2].into_iter().collect();
        let gj: BTreeSet<usize> = [2, 3, 4].into_iter().collect();
        assert!(arrangement_loss_gap(&embeddings, &gi, &gj, 0.1).is_err());
    }
}
