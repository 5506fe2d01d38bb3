//! Per-modality encoders: small dense networks mapping raw features to
//! unit-norm embeddings in a shared space, plus checkpoint I/O.

use crate::data::ModalityTable;
use crate::error::{Error, Result};
use crate::numerics::rng::streams;
use crate::numerics::{seeded_rng, Matrix, Tape, ValueId};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub activation: Activation,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embedding_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config(format!(
                "encoder dims must all be >= 1: {} -> {:?} -> {}",
                self.input_dim, self.hidden_dims, self.embedding_dim
            )));
        }
        Ok(())
    }

    /// (fan_in, fan_out) per layer, input to output.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.embedding_dim));
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// fan_in x fan_out
    pub weight: Matrix,
    /// 1 x fan_out
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub spec: EncoderSpec,
    pub layers: Vec<Layer>,
}

/// Glorot-uniform weights, zero biases. Deterministic per (spec, seed).
pub fn init_encoder(spec: &EncoderSpec, seed: u64) -> Result<EncoderParams> {
    spec.validate()?;
    let mut rng = seeded_rng(seed, streams::INIT_BASE);
    let layers = spec
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Layer {
                weight: Matrix::uniform(fan_in, fan_out, -s, s, &mut rng),
                bias: Matrix::zeros(1, fan_out),
            }
        })
        .collect();
    Ok(EncoderParams {
        spec: spec.clone(),
        layers,
    })
}

/// Per-modality encoder output: one row per instance, unit-norm where the
/// instance is present, all-zero otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub embeddings: Matrix,
    pub present: Vec<bool>,
}

impl EmbeddingMatrix {
    pub fn n_instances(&self) -> usize {
        self.present.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

/// Forward pass on a compact matrix of present rows. The same matrix ops are
/// used on and off the tape, so both paths agree bit for bit.
fn forward_plain(params: &EncoderParams, rows: &Matrix) -> Result<Matrix> {
    let n_layers = params.layers.len();
    let mut x = rows.clone();
    for (idx, layer) in params.layers.iter().enumerate() {
        x = x.matmul(&layer.weight)?.add_row_broadcast(&layer.bias)?;
        if idx + 1 < n_layers {
            x = match params.spec.activation {
                Activation::Tanh => x.map(f64::tanh),
                Activation::Relu => x.map(|v| v.max(0.0)),
            };
        }
    }
    x.l2_normalize_rows()
}

/// Encode a modality table. Absent rows stay zero and flagged absent.
pub fn encode(params: &EncoderParams, table: &ModalityTable) -> Result<EmbeddingMatrix> {
    if table.feature_dim != params.spec.input_dim {
        return Err(Error::Shape {
            op: "encode",
            lhs: format!("encoder input_dim {}", params.spec.input_dim),
            rhs: format!("table '{}' feature_dim {}", table.name, table.feature_dim),
        });
    }
    let present_idx = table.present_indices();
    let compact = table.features.select_rows(&present_idx);
    let encoded = if present_idx.is_empty() {
        Matrix::zeros(0, params.spec.embedding_dim)
    } else {
        forward_plain(params, &compact)?
    };
    let mut embeddings = Matrix::zeros(table.n_instances(), params.spec.embedding_dim);
    for (compact_row, &instance) in present_idx.iter().enumerate() {
        embeddings
            .row_mut(instance)
            .copy_from_slice(encoded.row(compact_row));
    }
    Ok(EmbeddingMatrix {
        embeddings,
        present: table.present.clone(),
    })
}

/// Encoder parameters registered on a tape for one training step.
pub struct TapeEncoder {
    pub layer_ids: Vec<(ValueId, ValueId)>,
    activation: Activation,
}

impl TapeEncoder {
    pub fn register(tape: &mut Tape, params: &EncoderParams) -> TapeEncoder {
        let layer_ids = params
            .layers
            .iter()
            .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
            .collect();
        TapeEncoder {
            layer_ids,
            activation: params.spec.activation,
        }
    }

    /// Differentiable forward over a compact matrix of present rows.
    pub fn forward(&self, tape: &mut Tape, input: ValueId) -> Result<ValueId> {
        let n_layers = self.layer_ids.len();
        let mut x = input;
        for (idx, &(w, b)) in self.layer_ids.iter().enumerate() {
            x = tape.matmul(x, w)?;
            x = tape.add_row_broadcast(x, b)?;
            if idx + 1 < n_layers {
                x = match self.activation {
                    Activation::Tanh => tape.tanh(x),
                    Activation::Relu => tape.relu(x),
                };
            }
        }
        tape.l2_normalize_rows(x)
    }

    /// Pull accumulated gradients off the tape, zeros where none flowed.
    pub fn grads(&self, tape: &Tape, params: &EncoderParams) -> Vec<Layer> {
        self.layer_ids
            .iter()
            .zip(&params.layers)
            .map(|(&(w, b), layer)| Layer {
                weight: tape
                    .grad(w)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(layer.weight.rows(), layer.weight.cols())),
                bias: tape
                    .grad(b)
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(1, layer.bias.cols())),
            })
            .collect()
    }
}

// ── Checkpoint I/O ───────────────────────────────────────────────────
//
// Binary layout (docs/FORMATS.md), all integers little-endian:
//   magic "GBENC01\n", u32 modality count, then per modality:
//   u32 name length + UTF-8 name, u8 active, u8 activation (0 tanh, 1 relu),
//   u32 layer count, per layer u32 fan_in, u32 fan_out, fan_in*fan_out f64
//   weights row-major, fan_out f64 biases.

const CHECKPOINT_MAGIC: &[u8; 8] = b"GBENC01\n";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub active: bool,
    pub params: EncoderParams,
}

pub fn save_checkpoint(path: &Path, entries: &[CheckpointEntry]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for entry in entries {
        buf.extend_from_slice(&(entry.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(entry.name.as_bytes());
        buf.push(entry.active as u8);
        buf.push(match entry.params.spec.activation {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        });
        buf.extend_from_slice(&(entry.params.layers.len() as u32).to_le_bytes());
        for layer in &entry.params.layers {
            buf.extend_from_slice(&(layer.weight.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(layer.weight.cols() as u32).to_le_bytes());
            for v in layer.weight.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for v in layer.bias.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.clone(),
                msg: format!("truncated at byte {}", self.pos),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let display = path.display().to_string();
    let mut r = ByteReader {
        bytes: &bytes,
        pos: 0,
        path: display.clone(),
    };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            path: display,
            msg: "bad magic; not a checkpoint file".to_string(),
        });
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format {
            path: display.clone(),
            msg: "modality name is not UTF-8".to_string(),
        })?;
        let active = r.u8()? != 0;
        let activation = match r.u8()? {
            0 => Activation::Tanh,
            1 => Activation::Relu,
            other => {
                return Err(Error::Format {
                    path: display.clone(),
                    msg: format!("unknown activation tag {other}"),
                })
            }
        };
        let layer_count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let fan_in = r.u32()? as usize;
            let fan_out = r.u32()? as usize;
            let weight = Matrix::from_vec(fan_in, fan_out, r.f64s(fan_in * fan_out)?)?;
            let bias = Matrix::from_vec(1, fan_out, r.f64s(fan_out)?)?;
            layers.push(Layer { weight, bias });
        }
        if layers.is_empty() {
            return Err(Error::Format {
                path: display.clone(),
                msg: format!("modality '{name}' has no layers"),
            });
        }
        let spec = EncoderSpec {
            input_dim: layers[0].weight.rows(),
            hidden_dims: layers[..layers.len() - 1]
                .iter()
                .map(|l| l.weight.cols())
                .collect(),
            embedding_dim: layers[layers.len() - 1].weight.cols(),
            activation,
        };
        entries.push(CheckpointEntry {
            name,
            active,
            params: EncoderParams { spec, layers },
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            path: display,
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_4_8_16() -> EncoderSpec {
        EncoderSpec {
            input_dim: 4,
            hidden_dims: vec![8],
            embedding_dim: 16,
            activation: Activation::Tanh,
        }
    }

    #[test]
    fn init_shapes_match_spec() {
        let params = init_encoder(&spec_4_8_16(), 7).unwrap();
        let shapes: Vec<(usize, usize)> =
            params.layers.iter().map(|l| l.weight.shape()).collect();
        assert_eq!(shapes, vec![(4, 8), (8, 16)]);
        let biases: Vec<usize> = params.layers.iter().map(|l| l.bias.cols()).collect();
        assert_eq!(biases, vec![8, 16]);
        assert!(params.layers.iter().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_encoder(&spec_4_8_16(), 7).unwrap();
        let b = init_encoder(&spec_4_8_16(), 7).unwrap();
        assert_eq!(a, b);
        let c = init_encoder(&spec_4_8_16(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn glorot_bound_holds_over_many_seeds() {
        let spec = EncoderSpec {
            input_dim: 4,
            hidden_dims: vec![],
            embedding_dim: 16,
            activation: Activation::Tanh,
        };
        let bound = (6.0 / 20.0f64).sqrt();
        for seed in 0..1000 {
            let params = init_encoder(&spec, seed).unwrap();
            let max = params.layers[0].weight.max_abs();
            assert!(max <= bound, "seed {seed}: {max} exceeds {bound}");
        }
    }

    #[test]
    fn zero_dimension_is_a_spec_error() {
        let spec = EncoderSpec {
            input_dim: 0,
            hidden_dims: vec![],
            embedding_dim: 4,
            activation: Activation::Tanh,
        };
        assert!(matches!(init_encoder(&spec, 1), Err(Error::Config(_))));
    }

    fn table(rows: Vec<Vec<f64>>, present: Vec<bool>) -> ModalityTable {
        let feature_dim = rows[0].len();
        ModalityTable {
            name: "t".to_string(),
            feature_dim,
            features: Matrix::from_rows(&rows).unwrap(),
            present,
        }
    }

    #[test]
    fn present_rows_are_unit_norm_and_masks_propagate() {
        let params = init_encoder(&spec_4_8_16(), 3).unwrap();
        let t = table(
            vec![
                vec![0.5, -1.0, 2.0, 0.3],
                vec![0.0, 0.0, 0.0, 0.0],
                vec![1.5, 0.2, -0.7, 1.1],
            ],
            vec![true, false, true],
        );
        let emb = encode(&params, &t).unwrap();
        assert_eq!(emb.present, vec![true, false, true]);
        assert!((emb.embeddings.row_norm(0) - 1.0).abs() < 1e-9);
        assert!((emb.embeddings.row_norm(2) - 1.0).abs() < 1e-9);
        assert!(emb.embeddings.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_linear_encoder_fixes_normalized_rows() {
        let spec = EncoderSpec {
            input_dim: 3,
            hidden_dims: vec![],
            embedding_dim: 3,
            activation: Activation::Tanh,
        };
        let params = EncoderParams {
            spec,
            layers: vec![Layer {
                weight: Matrix::identity(3),
                bias: Matrix::zeros(1, 3),
            }],
        };
        let rows = Matrix::from_rows(&[vec![0.6, 0.8, 0.0], vec![0.0, 0.0, 1.0]])
            .unwrap();
        let t = ModalityTable {
            name: "t".to_string(),
            feature_dim: 3,
            features: rows.clone(),
            present: vec![true, true],
        };
        let emb = encode(&params, &t).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert!((emb.embeddings.get(r, c) - rows.get(r, c)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let params = init_encoder(&spec_4_8_16(), 3).unwrap();
        let t = table(vec![vec![1.0, 2.0]], vec![true]);
        assert!(matches!(encode(&params, &t), Err(Error::Shape { .. })));
    }

    #[test]
    fn tape_forward_matches_plain_encode() {
        let params = init_encoder(&spec_4_8_16(), 5).unwrap();
        let t = table(
            vec![vec![0.5, -1.0, 2.0, 0.3], vec![1.5, 0.2, -0.7, 1.1]],
            vec![true, true],
        );
        let plain = encode(&params, &t).unwrap();

        let mut tape = Tape::new();
        let x = tape.leaf(t.features.clone());
        let enc = TapeEncoder::register(&mut tape, &params);
        let z = enc.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(z), &plain.embeddings);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let entries = vec![
            CheckpointEntry {
                name: "alpha".to_string(),
                active: true,
                params: init_encoder(&spec_4_8_16(), 1).unwrap(),
            },
            CheckpointEntry {
                name: "beta".to_string(),
                active: false,
                params: init_encoder(
                    &EncoderSpec {
                        input_dim: 6,
                        hidden_dims: vec![5, 4],
                        embedding_dim: 16,
                        activation: Activation::Relu,
                    },
                    2,
                )
                .unwrap(),
            },
        ];
        save_checkpoint(&path, &entries).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(entries, loaded);

        // Same entries written twice produce identical bytes.
        let path2 = dir.path().join("enc2.ckpt");
        save_checkpoint(&path2, &entries).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn corrupt_checkpoint_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Format { .. })
        ));
    }
}
