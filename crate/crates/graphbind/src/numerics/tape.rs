//! Reverse-mode automatic differentiation over matrices.
//!
//! A `Tape` records matrix-valued operations during the forward pass into an
//! arena, then replays them in reverse to accumulate adjoints. One training
//! step owns one tape; the adjoint of a node is fully accumulated before any
//! of its inputs' adjoints are read because ops are replayed strictly in
//! reverse insertion order.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: bool },
    /// out = A @ B
    Matmul { a: ValueId, b: ValueId },
    /// out = A @ B^T
    MatmulTransposeB { a: ValueId, b: ValueId },
    /// out[r, c] = A[r, c] + bias[0, c]
    AddRowBroadcast { a: ValueId, bias: ValueId },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    MulElem { a: ValueId, b: ValueId },
    Scale { a: ValueId, factor: f64 },
    Tanh { a: ValueId },
    Relu { a: ValueId },
    L2NormalizeRows { a: ValueId },
    /// out[r, 0] = log sum_c exp(A[r, c]), max-subtracted
    RowLogSumExp { a: ValueId },
    /// out = mean_r A[r, indices[r]]
    GatherMean { a: ValueId, indices: Vec<usize> },
    Mean { a: ValueId },
    Sum { a: ValueId },
}

struct Node {
    value: Matrix,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        id
    }

    /// Record a constant input. No gradient is reported for it.
    pub fn leaf(&mut self, value: Matrix) -> ValueId {
        self.push(value, Op::Leaf { param: false })
    }

    /// Record a trainable parameter.
    pub fn param(&mut self, value: Matrix) -> ValueId {
        self.push(value, Op::Leaf { param: true })
    }

    pub fn value(&self, id: ValueId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Adjoint of a node; `None` until `backward` has run or if no gradient
    /// flowed to it.
    pub fn grad(&self, id: ValueId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    pub fn matmul_transpose_b(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let value = self.value(a).matmul_transpose_b(self.value(b))?;
        Ok(self.push(value, Op::MatmulTransposeB { a, b }))
    }

    pub fn add_row_broadcast(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let value = self.value(a).add_row_broadcast(self.value(bias))?;
        Ok(self.push(value, Op::AddRowBroadcast { a, bias }))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    pub fn mul_elem(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let value = self.value(a).mul_elem(self.value(b))?;
        Ok(self.push(value, Op::MulElem { a, b }))
    }

    pub fn scale(&mut self, a: ValueId, factor: f64) -> ValueId {
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale { a, factor })
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu { a })
    }

    pub fn l2_normalize_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let value = self.value(a).l2_normalize_rows()?;
        Ok(self.push(value, Op::L2NormalizeRows { a }))
    }

    pub fn row_log_sum_exp(&mut self, a: ValueId) -> ValueId {
        let src = self.value(a);
        let mut out = Matrix::zeros(src.rows(), 1);
        for r in 0..src.rows() {
            out.set(r, 0, log_sum_exp(src.row(r)));
        }
        self.push(out, Op::RowLogSumExp { a })
    }

    pub fn gather_mean(&mut self, a: ValueId, indices: Vec<usize>) -> Result<ValueId> {
        let src = self.value(a);
        if indices.len() != src.rows() {
            return Err(Error::Shape {
                op: "gather_mean",
                lhs: format!("{} rows", src.rows()),
                rhs: format!("{} indices", indices.len()),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&c| c >= src.cols()) {
            return Err(Error::Domain(format!(
                "gather_mean index {bad} out of range for {} columns",
                src.cols()
            )));
        }
        let mean = indices
            .iter()
            .enumerate()
            .map(|(r, &c)| src.get(r, c))
            .sum::<f64>()
            / indices.len() as f64;
        let value = Matrix::from_vec(1, 1, vec![mean])?;
        Ok(self.push(value, Op::GatherMean { a, indices }))
    }

    pub fn mean(&mut self, a: ValueId) -> ValueId {
        let src = self.value(a);
        let n = (src.rows() * src.cols()) as f64;
        let value = Matrix::from_vec(1, 1, vec![src.sum() / n]).expect("finite mean");
        self.push(value, Op::Mean { a })
    }

    pub fn sum(&mut self, a: ValueId) -> ValueId {
        let src = self.value(a);
        let value = Matrix::from_vec(1, 1, vec![src.sum()]).expect("finite sum");
        self.push(value, Op::Sum { a })
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: ValueId) -> Result<f64> {
        let v = self.value(id);
        if !v.is_scalar() {
            return Err(Error::Tape(format!(
                "expected scalar node, got {}x{}",
                v.rows(),
                v.cols()
            )));
        }
        Ok(v.get(0, 0))
    }

    /// Populate adjoints for every node reachable from `loss`, which must be
    /// scalar. A tape can be walked backward once; reuse is a state error.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape(
                "backward already ran on this tape; build a fresh tape per step".to_string(),
            ));
        }
        if !self.value(loss).is_scalar() {
            let (r, c) = self.value(loss).shape();
            return Err(Error::Tape(format!(
                "backward requires a scalar loss, got {r}x{c}"
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0])?);

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = self.grads[idx].clone() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf { .. } => {}
                Op::Matmul { a, b } => {
                    let da = g.matmul_transpose_b(self.value(b))?;
                    let db = self.value(a).transpose().matmul(&g)?;
                    self.accumulate(a, da)?;
                    self.accumulate(b, db)?;
                }
                Op::MatmulTransposeB { a, b } => {
                    let da = g.matmul(self.value(b))?;
                    let db = g.transpose().matmul(self.value(a))?;
                    self.accumulate(a, da)?;
                    self.accumulate(b, db)?;
                }
                Op::AddRowBroadcast { a, bias } => {
                    let mut dbias = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            dbias.set(0, c, dbias.get(0, c) + g.get(r, c));
                        }
                    }
                    self.accumulate(a, g)?;
                    self.accumulate(bias, dbias)?;
                }
                Op::Add { a, b } => {
                    self.accumulate(a, g.clone())?;
                    self.accumulate(b, g)?;
                }
                Op::Sub { a, b } => {
                    self.accumulate(a, g.clone())?;
                    self.accumulate(b, g.scale(-1.0))?;
                }
                Op::MulElem { a, b } => {
                    let da = g.mul_elem(self.value(b))?;
                    let db = g.mul_elem(self.value(a))?;
                    self.accumulate(a, da)?;
                    self.accumulate(b, db)?;
                }
                Op::Scale { a, factor } => {
                    self.accumulate(a, g.scale(factor))?;
                }
                Op::Tanh { a } => {
                    let out = &self.nodes[idx].value;
                    let da = g.mul_elem(&out.map(|y| 1.0 - y * y))?;
                    self.accumulate(a, da)?;
                }
                Op::Relu { a } => {
                    let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    let da = g.mul_elem(&mask)?;
                    self.accumulate(a, da)?;
                }
                Op::L2NormalizeRows { a } => {
                    // y = x / |x|  =>  dx = (g - (g . y) y) / |x| per row
                    let x = self.value(a);
                    let y = &self.nodes[idx].value;
                    let mut da = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let norm = x.row_norm(r);
                        let gy: f64 = g.row(r).iter().zip(y.row(r)).map(|(gv, yv)| gv * yv).sum();
                        for c in 0..x.cols() {
                            da.set(r, c, (g.get(r, c) - gy * y.get(r, c)) / norm);
                        }
                    }
                    self.accumulate(a, da)?;
                }
                Op::RowLogSumExp { a } => {
                    let x = self.value(a);
                    let lse = &self.nodes[idx].value;
                    let mut da = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let gr = g.get(r, 0);
                        let l = lse.get(r, 0);
                        for c in 0..x.cols() {
                            da.set(r, c, gr * (x.get(r, c) - l).exp());
                        }
                    }
                    self.accumulate(a, da)?;
                }
                Op::GatherMean { a, indices } => {
                    let scale = g.get(0, 0) / indices.len() as f64;
                    let mut da = Matrix::zeros(self.value(a).rows(), self.value(a).cols());
                    for (r, &c) in indices.iter().enumerate() {
                        da.set(r, c, da.get(r, c) + scale);
                    }
                    self.accumulate(a, da)?;
                }
                Op::Mean { a } => {
                    let src = self.value(a);
                    let scale = g.get(0, 0) / (src.rows() * src.cols()) as f64;
                    let da = Matrix::zeros(src.rows(), src.cols()).map(|_| scale);
                    self.accumulate(a, da)?;
                }
                Op::Sum { a } => {
                    let src = self.value(a);
                    let da = Matrix::zeros(src.rows(), src.cols()).map(|_| g.get(0, 0));
                    self.accumulate(a, da)?;
                }
            }
        }
        // Every parameter leaf ends up with an adjoint, zero where no
        // gradient flowed.
        for idx in 0..self.nodes.len() {
            if matches!(self.nodes[idx].op, Op::Leaf { param: true }) && self.grads[idx].is_none()
            {
                let (r, c) = self.nodes[idx].value.shape();
                self.grads[idx] = Some(Matrix::zeros(r, c));
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: ValueId, grad: Matrix) -> Result<()> {
        match &mut self.grads[id.0] {
            Some(existing) => {
                *existing = existing.add(&grad)?;
            }
            slot @ None => *slot = Some(grad),
        }
        Ok(())
    }
}

/// Max-subtracted log-sum-exp of a slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
