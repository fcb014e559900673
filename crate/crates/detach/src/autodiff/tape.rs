//! Append-only reverse-mode tape.
//!
//! Every differentiable computation in the crate is expressed as ops pushed
//! onto a [`Tape`]; [`Tape::backward`] walks the recorded nodes in reverse.
//! The tape is append-only, so the node order is already topological and
//! cycles are impossible by construction.
//!
//! Derivative conventions at non-smooth points:
//! * `relu` uses derivative 0 at exactly 0,
//! * `sqrt` clamps the backward factor to `0.5 / max(sqrt(x), 1e-12)`,
//! * `clamp` passes gradient on the closed interval `[lo, hi]`,
//! * `minimum` routes the gradient to the left operand on exact ties.

use super::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> TapeError {
    TapeError::ShapeMismatch { op, lhs: lhs.shape().to_vec(), rhs: rhs.shape().to_vec() }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul,
    Transpose,
    /// Same-padded 1-D convolution over rows; attrs: odd kernel width.
    Conv1d { kernel: usize },
    Add,
    Sub,
    Mul,
    /// `x + r`, `r` broadcast over rows.
    AddRow,
    /// `x - r`, `r` broadcast over rows.
    SubRow,
    /// `x * r`, `r` broadcast over rows.
    MulRow,
    /// `x * s`, `s` a `[1,1]` node.
    ScaleBy,
    /// `x * c` for a compile-time constant.
    Scale { c: f64 },
    /// `x + c` elementwise.
    AddConst,
    Recip,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Ln,
    Square,
    Sqrt,
    /// Row-wise softmax of a rank-2 tensor.
    Softmax,
    /// Row-wise layer norm with learnable gain/bias parents.
    LayerNorm { eps: f64 },
    Mean,
    Sum,
    /// Column sums: `[t, n] -> [1, n]`.
    SumAxis0,
    Clamp { lo: f64, hi: f64 },
    Minimum,
}

struct Node {
    op: Op,
    parents: Vec<usize>,
    value: Tensor,
    /// True when a gradient must flow to or through this node.
    needs: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Ops guaranteed by the engine's public contract: the primitive set needed
/// by the dual-stream encoders, fusion layers, policy trunk, and losses. The
/// tape implements a superset (broadcast helpers, `exp`/`ln`, `clamp`,
/// `minimum`, `transpose`) that the same backward machinery covers.
pub fn op_set() -> &'static [&'static str] {
    &[
        "matmul", "conv1d", "add", "mul", "concat", "sigmoid", "tanh", "relu", "softmax",
        "layer_norm", "mean", "sum", "square", "sqrt", "slice",
    ]
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf; `requires_grad` on the tensor controls
    /// whether `backward` accumulates a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(Op::Leaf, vec![], t, needs)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, parents: Vec<usize>, value: Tensor, needs: bool) -> Var {
        self.nodes.push(Node { op, parents, value, needs });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, op: Op, a: Var, value: Tensor) -> Var {
        let needs = self.nodes[a.0].needs;
        self.push(op, vec![a.0], value, needs)
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, value: Tensor) -> Var {
        let needs = self.nodes[a.0].needs || self.nodes[b.0].needs;
        self.push(op, vec![a.0, b.0], value, needs)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ta.data()[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &tb.data()[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        Ok(self.binary(Op::Matmul, a, b, Tensor::new(&[m, n], out)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.at(i, j);
            }
        }
        self.unary(Op::Transpose, a, Tensor::new(&[n, m], out))
    }

    /// Same-padded 1-D convolution along rows. `x` is `[t, c_in]`, `w` is
    /// `[kernel * c_in, c_out]` (kernel-major), `b` is `[1, c_out]`; output
    /// is `[t, c_out]`. `kernel` must be odd so zero padding is symmetric.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize) -> Result<Var, TapeError> {
        let (tx, tw, tb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        if kernel % 2 == 0 {
            return Err(TapeError::Invalid {
                op: "conv1d",
                msg: format!("kernel width must be odd, got {kernel}"),
            });
        }
        let (t, c_in) = (tx.rows(), tx.cols());
        if tw.rows() != kernel * c_in {
            return Err(shape_err("conv1d", tx, tw));
        }
        let c_out = tw.cols();
        if tb.rows() != 1 || tb.cols() != c_out {
            return Err(shape_err("conv1d", tw, tb));
        }
        let pad = (kernel - 1) / 2;
        let mut out = vec![0.0; t * c_out];
        for ti in 0..t {
            for j in 0..kernel {
                let src = ti as isize + j as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xrow = &tx.data()[src as usize * c_in..(src as usize + 1) * c_in];
                for i in 0..c_in {
                    let xv = xrow[i];
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &tw.data()[(j * c_in + i) * c_out..(j * c_in + i + 1) * c_out];
                    let orow = &mut out[ti * c_out..(ti + 1) * c_out];
                    for o in 0..c_out {
                        orow[o] += xv * wrow[o];
                    }
                }
            }
            for o in 0..c_out {
                out[ti * c_out + o] += tb.data()[o];
            }
        }
        let needs =
            self.nodes[x.0].needs || self.nodes[w.0].needs || self.nodes[b.0].needs;
        Ok(self.push(Op::Conv1d { kernel }, vec![x.0, w.0, b.0], Tensor::new(&[t, c_out], out), needs))
    }

    // ── elementwise and broadcast arithmetic ────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TapeError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        Ok(self.binary(Op::Add, a, b, v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        Ok(self.binary(Op::Sub, a, b, v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        Ok(self.binary(Op::Mul, a, b, v))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        self.same_shape("minimum", a, b)?;
        let v = self.zip(a, b, f64::min);
        Ok(self.binary(Op::Minimum, a, b, v))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data)
    }

    fn row_op(
        &mut self,
        op: Op,
        name: &'static str,
        x: Var,
        r: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, TapeError> {
        let (tx, tr) = (&self.nodes[x.0].value, &self.nodes[r.0].value);
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(shape_err(name, tx, tr));
        }
        let n = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| f(*v, tr.data()[i % n]))
            .collect();
        let value = Tensor::new(tx.shape(), data);
        Ok(self.binary(op, x, r, value))
    }

    /// `x + r` with `r: [1, n]` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var, TapeError> {
        self.row_op(Op::AddRow, "add_row", x, r, |a, b| a + b)
    }

    pub fn sub_row(&mut self, x: Var, r: Var) -> Result<Var, TapeError> {
        self.row_op(Op::SubRow, "sub_row", x, r, |a, b| a - b)
    }

    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var, TapeError> {
        self.row_op(Op::MulRow, "mul_row", x, r, |a, b| a * b)
    }

    /// Multiply every element of `x` by the scalar node `s` (`[1,1]`).
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, TapeError> {
        let (tx, ts) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        if ts.len() != 1 {
            return Err(shape_err("scale_by", tx, ts));
        }
        let c = ts.data()[0];
        let v = Tensor::new(tx.shape(), tx.data().iter().map(|x| x * c).collect());
        Ok(self.binary(Op::ScaleBy, x, s, v))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = &self.nodes[x.0].value;
        let v = Tensor::new(tx.shape(), tx.data().iter().map(|x| x * c).collect());
        self.unary(Op::Scale { c }, x, v)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let tx = &self.nodes[x.0].value;
        let v = Tensor::new(tx.shape(), tx.data().iter().map(|x| x + c).collect());
        self.unary(Op::AddConst, x, v)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let v = Tensor::new(tx.shape(), tx.data().iter().map(|x| 1.0 / x).collect());
        self.unary(Op::Recip, x, v)
    }

    // ── shape ops ───────────────────────────────────────────────────────

    /// Concatenate along `axis` (0 = stack rows, 1 = widen rows).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TapeError> {
        if parts.is_empty() {
            return Err(TapeError::Invalid { op: "concat", msg: "no operands".into() });
        }
        if axis > 1 {
            return Err(TapeError::Invalid { op: "concat", msg: format!("axis {axis} out of range") });
        }
        let first = &self.nodes[parts[0].0].value;
        let (r0, c0) = (first.rows(), first.cols());
        for p in &parts[1..] {
            let t = &self.nodes[p.0].value;
            let same = if axis == 0 { t.cols() == c0 } else { t.rows() == r0 };
            if !same {
                return Err(shape_err("concat", first, t));
            }
        }
        let value = if axis == 0 {
            let rows: usize = parts.iter().map(|p| self.nodes[p.0].value.rows()).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.data());
            }
            Tensor::new(&[rows, c0], data)
        } else {
            let cols: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for p in parts {
                    let t = &self.nodes[p.0].value;
                    let c = t.cols();
                    data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
            }
            Tensor::new(&[r0, cols], data)
        };
        let needs = parts.iter().any(|p| self.nodes[p.0].needs);
        Ok(self.push(Op::Concat { axis }, parts.iter().map(|p| p.0).collect(), value, needs))
    }

    /// Contiguous sub-range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, TapeError> {
        let tx = &self.nodes[x.0].value;
        let limit = if axis == 0 { tx.rows() } else { tx.cols() };
        if axis > 1 || start >= end || end > limit {
            return Err(TapeError::Invalid {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} of shape {:?}", tx.shape()),
            });
        }
        let (rows, cols) = (tx.rows(), tx.cols());
        let value = if axis == 0 {
            Tensor::new(&[end - start, cols], tx.data()[start * cols..end * cols].to_vec())
        } else {
            let mut data = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                data.extend_from_slice(&tx.data()[r * cols + start..r * cols + end]);
            }
            Tensor::new(&[rows, end - start], data)
        };
        Ok(self.unary(Op::Slice { axis, start }, x, value))
    }

    // ── nonlinearities ──────────────────────────────────────────────────

    fn map(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Var {
        let tx = &self.nodes[x.0].value;
        let v = Tensor::new(tx.shape(), tx.data().iter().map(|a| f(*a)).collect());
        self.unary(op, x, v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(Op::Sigmoid, x, |a| 1.0 / (1.0 + (-a).exp()))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(Op::Tanh, x, f64::tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(Op::Relu, x, |a| if a > 0.0 { a } else { 0.0 })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(Op::Exp, x, f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.map(Op::Ln, x, f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(Op::Square, x, |a| a * a)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.map(Op::Sqrt, x, f64::sqrt)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(Op::Clamp { lo, hi }, x, |a| a.clamp(lo, hi))
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &tx.data()[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                data[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                data[r * cols + j] /= sum;
            }
        }
        self.unary(Op::Softmax, x, Tensor::new(&[rows, cols], data))
    }

    /// Row-wise layer norm: `(x - mean) / sqrt(var + eps) * gain + bias`,
    /// statistics taken over each row. `gain`/`bias` are `[1, n]` parents.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TapeError> {
        let (tx, tg, tb) = (&self.nodes[x.0].value, &self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let n = tx.cols();
        if tg.rows() != 1 || tg.cols() != n {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.rows() != 1 || tb.cols() != n {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let rows = tx.rows();
        let mut data = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                data[r * n + j] = (row[j] - mean) * inv * tg.data()[j] + tb.data()[j];
            }
        }
        let needs = self.nodes[x.0].needs || self.nodes[gain.0].needs || self.nodes[bias.0].needs;
        Ok(self.push(
            Op::LayerNorm { eps },
            vec![x.0, gain.0, bias.0],
            Tensor::new(&[rows, n], data),
            needs,
        ))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn mean(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let m = tx.data().iter().sum::<f64>() / tx.len() as f64;
        self.unary(Op::Mean, x, Tensor::scalar(m))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let s = tx.data().iter().sum::<f64>();
        self.unary(Op::Sum, x, Tensor::scalar(s))
    }

    /// Column sums: `[t, n] -> [1, n]`.
    pub fn sum_axis0(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for j in 0..cols {
                out[j] += tx.at(r, j);
            }
        }
        self.unary(Op::SumAxis0, x, Tensor::new(&[1, cols], out))
    }

    // ── composite helpers ───────────────────────────────────────────────

    /// `x @ w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TapeError> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Mean of the rows: `[t, n] -> [1, n]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let rows = self.nodes[x.0].value.rows();
        let s = self.sum_axis0(x);
        self.scale(s, 1.0 / rows as f64)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns a gradient per node that
    /// requested one (leaves with `requires_grad` and interior nodes on a
    /// path to such a leaf).
    pub fn backward(&mut self, loss: Var) -> Result<Grads, TapeError> {
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(TapeError::NonScalarLoss { shape: lt.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(lt.shape(), vec![1.0]));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.accumulate_parents(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { by_node: grads })
    }

    fn add_grad(&self, grads: &mut [Option<Tensor>], node: usize, delta: Tensor) {
        if !self.nodes[node].needs {
            return;
        }
        match &mut grads[node] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn accumulate_parents(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        if !node.needs {
            return;
        }
        let parent = |k: usize| &self.nodes[node.parents[k]].value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul => {
                let (a, b) = (parent(0), parent(1));
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                if self.nodes[node.parents[0]].needs {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g.at(i, j);
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gij * b.at(p, j);
                            }
                        }
                    }
                    self.add_grad(grads, node.parents[0], Tensor::new(&[m, k], da));
                }
                if self.nodes[node.parents[1]].needs {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = a.at(i, p);
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * g.at(i, j);
                            }
                        }
                    }
                    self.add_grad(grads, node.parents[1], Tensor::new(&[k, n], db));
                }
            }
            Op::Transpose => {
                let (m, n) = (g.rows(), g.cols());
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[j * m + i] = g.at(i, j);
                    }
                }
                self.add_grad(grads, node.parents[0], Tensor::new(&[n, m], d));
            }
            Op::Conv1d { kernel } => {
                let (x, w) = (parent(0), parent(1));
                let (t, c_in, c_out) = (x.rows(), x.cols(), w.cols());
                let pad = (kernel - 1) / 2;
                if self.nodes[node.parents[0]].needs {
                    let mut dx = vec![0.0; t * c_in];
                    for ti in 0..t {
                        for j in 0..*kernel {
                            let src = ti as isize + j as isize - pad as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            for i in 0..c_in {
                                let mut acc = 0.0;
                                for o in 0..c_out {
                                    acc += g.at(ti, o) * w.at(j * c_in + i, o);
                                }
                                dx[src as usize * c_in + i] += acc;
                            }
                        }
                    }
                    self.add_grad(grads, node.parents[0], Tensor::new(&[t, c_in], dx));
                }
                if self.nodes[node.parents[1]].needs {
                    let mut dw = vec![0.0; kernel * c_in * c_out];
                    for ti in 0..t {
                        for j in 0..*kernel {
                            let src = ti as isize + j as isize - pad as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            for i in 0..c_in {
                                let xv = x.at(src as usize, i);
                                if xv == 0.0 {
                                    continue;
                                }
                                for o in 0..c_out {
                                    dw[(j * c_in + i) * c_out + o] += xv * g.at(ti, o);
                                }
                            }
                        }
                    }
                    self.add_grad(grads, node.parents[1], Tensor::new(&[kernel * c_in, c_out], dw));
                }
                if self.nodes[node.parents[2]].needs {
                    let mut db = vec![0.0; c_out];
                    for ti in 0..t {
                        for o in 0..c_out {
                            db[o] += g.at(ti, o);
                        }
                    }
                    self.add_grad(grads, node.parents[2], Tensor::new(&[1, c_out], db));
                }
            }
            Op::Add => {
                self.add_grad(grads, node.parents[0], g.clone());
                self.add_grad(grads, node.parents[1], g.clone());
            }
            Op::Sub => {
                self.add_grad(grads, node.parents[0], g.clone());
                let neg = Tensor::new(g.shape(), g.data().iter().map(|v| -v).collect());
                self.add_grad(grads, node.parents[1], neg);
            }
            Op::Mul => {
                let (a, b) = (parent(0), parent(1));
                let da = Tensor::new(g.shape(), g.data().iter().zip(b.data()).map(|(g, b)| g * b).collect());
                let db = Tensor::new(g.shape(), g.data().iter().zip(a.data()).map(|(g, a)| g * a).collect());
                self.add_grad(grads, node.parents[0], da);
                self.add_grad(grads, node.parents[1], db);
            }
            Op::Minimum => {
                let (a, b) = (parent(0), parent(1));
                let mut da = vec![0.0; g.len()];
                let mut db = vec![0.0; g.len()];
                for i in 0..g.len() {
                    if a.data()[i] <= b.data()[i] {
                        da[i] = g.data()[i];
                    } else {
                        db[i] = g.data()[i];
                    }
                }
                self.add_grad(grads, node.parents[0], Tensor::new(g.shape(), da));
                self.add_grad(grads, node.parents[1], Tensor::new(g.shape(), db));
            }
            Op::AddRow | Op::SubRow => {
                let sign = if matches!(node.op, Op::AddRow) { 1.0 } else { -1.0 };
                self.add_grad(grads, node.parents[0], g.clone());
                if self.nodes[node.parents[1]].needs {
                    let n = g.cols();
                    let mut dr = vec![0.0; n];
                    for r in 0..g.rows() {
                        for j in 0..n {
                            dr[j] += sign * g.at(r, j);
                        }
                    }
                    self.add_grad(grads, node.parents[1], Tensor::new(&[1, n], dr));
                }
            }
            Op::MulRow => {
                let (x, r) = (parent(0), parent(1));
                let n = g.cols();
                if self.nodes[node.parents[0]].needs {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * r.data()[i % n])
                        .collect();
                    self.add_grad(grads, node.parents[0], Tensor::new(g.shape(), data));
                }
                if self.nodes[node.parents[1]].needs {
                    let mut dr = vec![0.0; n];
                    for row in 0..g.rows() {
                        for j in 0..n {
                            dr[j] += g.at(row, j) * x.at(row, j);
                        }
                    }
                    self.add_grad(grads, node.parents[1], Tensor::new(&[1, n], dr));
                }
            }
            Op::ScaleBy => {
                let (x, s) = (parent(0), parent(1));
                let c = s.data()[0];
                if self.nodes[node.parents[0]].needs {
                    let data = g.data().iter().map(|v| v * c).collect();
                    self.add_grad(grads, node.parents[0], Tensor::new(g.shape(), data));
                }
                if self.nodes[node.parents[1]].needs {
                    let ds: f64 = g.data().iter().zip(x.data()).map(|(g, x)| g * x).sum();
                    self.add_grad(grads, node.parents[1], Tensor::scalar(ds));
                }
            }
            Op::Scale { c } => {
                let data = g.data().iter().map(|v| v * c).collect();
                self.add_grad(grads, node.parents[0], Tensor::new(g.shape(), data));
            }
            Op::AddConst { .. } => {
                self.add_grad(grads, node.parents[0], g.clone());
            }
            Op::Recip => {
                let y = &node.value;
                let data = g.data().iter().zip(y.data()).map(|(g, y)| -g * y * y).collect();
                self.add_grad(grads, node.parents[0], Tensor::new(g.shape(), data));
            }
            Op::Concat { axis } => {
                let mut offset = 0;
                for &p in &node.parents {
                    let t = &self.nodes[p].value;
                    let part = if *axis == 0 {
                        let rows = t.rows();
                        let cols = t.cols();
                        let d = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        offset += rows;
                        Tensor::new(&[rows, cols], d)
                    } else {
                        let cols = t.cols();
                        let mut d = Vec::with_capacity(t.len());
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.data()[r * g.cols() + offset..r * g.cols() + offset + cols]);
                        }
                        offset += cols;
                        Tensor::new(&[t.rows(), cols], d)
                    };
                    self.add_grad(grads, p, part);
                }
            }
            Op::Slice { axis, start } => {
                let x = parent(0);
                let (rows, cols) = (x.rows(), x.cols());
                let mut d = vec![0.0; rows * cols];
                if *axis == 0 {
                    for r in 0..g.rows() {
                        for j in 0..cols {
                            d[(start + r) * cols + j] = g.at(r, j);
                        }
                    }
                } else {
                    for r in 0..rows {
                        for j in 0..g.cols() {
                            d[r * cols + start + j] = g.at(r, j);
                        }
                    }
                }
                self.add_grad(grads, node.parents[0], Tensor::new(&[rows, cols], d));
            }
            Op::Sigmoid => {
                let y = &node.value;
                let data = g.data().iter().zip(y.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.add_grad(grads, node.parents[0], Tensor::new(g.shape(), data));
            }
            Op::Tanh => {
                let y = &node.value;
                let data = g.data().iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.add_grad(grads, node.parents[0], Tensor::new(g.shape(), data));
            }
            Op::Relu => {
                let x = parent(0);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.add_grad(grads, node.parents[0], Tensor::new(g.shape(), data));
            }
            Op::Exp => {
                let y = &node.value;
                let data = g.data().iter().zip(y.data()).map(|(g, y)| g * y).collect();
                self.add_grad(grads, node.parents[0], Tensor::new(g.shape(), data));
            }
            Op::Ln => {
                let x = parent(0);
                let data = g.data().iter().zip(x.data()).map(|(g, x)| g / x).collect();
                self.add_grad(grads, node.parents[0], Tensor::new(g.shape(), data));
            }
            Op::Square => {
                let x = parent(0);
                let data = g.data().iter().zip(x.data()).map(|(g, x)| 2.0 * g * x).collect();
                self.add_grad(grads, node.parents[0], Tensor::new(g.shape(), data));
            }
            Op::Sqrt => {
                let y = &node.value;
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, y)| g * 0.5 / y.max(1e-12))
                    .collect();
                self.add_grad(grads, node.parents[0], Tensor::new(g.shape(), data));
            }
            Op::Clamp { lo, hi } => {
                let x = parent(0);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                    .collect();
                self.add_grad(grads, node.parents[0], Tensor::new(g.shape(), data));
            }
            Op::Softmax => {
                let y = &node.value;
                let (rows, cols) = (y.rows(), y.cols());
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let dot: f64 = (0..cols).map(|j| g.at(r, j) * y.at(r, j)).sum();
                    for j in 0..cols {
                        d[r * cols + j] = y.at(r, j) * (g.at(r, j) - dot);
                    }
                }
                self.add_grad(grads, node.parents[0], Tensor::new(&[rows, cols], d));
            }
            Op::LayerNorm { eps } => {
                let (x, gain) = (parent(0), parent(1));
                let (rows, n) = (x.rows(), x.cols());
                let mut dx = vec![0.0; rows * n];
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for r in 0..rows {
                    let row = &x.data()[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    let mut dxhat = vec![0.0; n];
                    for j in 0..n {
                        let gj = g.at(r, j);
                        dgain[j] += gj * xhat[j];
                        dbias[j] += gj;
                        dxhat[j] = gj * gain.data()[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    for j in 0..n {
                        dx[r * n + j] = inv
                            * (dxhat[j] - sum_dxhat / n as f64 - xhat[j] * sum_dxhat_xhat / n as f64);
                    }
                }
                self.add_grad(grads, node.parents[0], Tensor::new(&[rows, n], dx));
                self.add_grad(grads, node.parents[1], Tensor::new(&[1, n], dgain));
                self.add_grad(grads, node.parents[2], Tensor::new(&[1, n], dbias));
            }
            Op::Mean => {
                let x = parent(0);
                let c = g.item() / x.len() as f64;
                self.add_grad(grads, node.parents[0], Tensor::filled(x.shape(), c));
            }
            Op::Sum => {
                let x = parent(0);
                self.add_grad(grads, node.parents[0], Tensor::filled(x.shape(), g.item()));
            }
            Op::SumAxis0 => {
                let x = parent(0);
                let (rows, cols) = (x.rows(), x.cols());
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    for j in 0..cols {
                        d[r * cols + j] = g.at(0, j);
                    }
                }
                self.add_grad(grads, node.parents[0], Tensor::new(&[rows, cols], d));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matmul_known_product() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn relu_zero_input_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[-1.0, 0.0, 2.0]).with_grad());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[0.0]).with_grad());
        let y = tape.sigmoid(x);
        assert_relative_eq!(tape.value(y).item(), 0.5);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_relative_eq!(grads.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_uniform_on_equal_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 3], vec![4.0, 4.0, 4.0, 1.0, 2.0, 3.0]));
        let y = tape.softmax(x);
        let v = tape.value(y);
        for j in 0..3 {
            assert_relative_eq!(v.at(0, j), 1.0 / 3.0, epsilon = 1e-12);
        }
        assert_relative_eq!(v.data()[3..].iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]));
        let g = tape.constant(Tensor::row(&[1.0, 1.0, 1.0, 1.0]));
        let b = tape.constant(Tensor::row(&[0.0, 0.0, 0.0, 0.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let v = tape.value(y);
        let mean: f64 = v.data().iter().sum::<f64>() / 4.0;
        let var: f64 = v.data().iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 4.0;
        assert_relative_eq!(mean, 0.0, epsilon = 1e-12);
        assert_relative_eq!(var, 1.0, epsilon = 1e-4);
    }

    #[test]
    fn layer_norm_constant_row_stays_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[3.0, 3.0, 3.0]).with_grad());
        let g = tape.constant(Tensor::row(&[1.0, 1.0, 1.0]));
        let b = tape.constant(Tensor::row(&[0.0, 0.0, 0.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).is_finite());
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).unwrap().is_finite());
    }

    #[test]
    fn conv1d_identity_kernel_recovers_input() {
        // kernel 3, center tap = identity, other taps zero
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let mut w = Tensor::zeros(&[3 * 2, 2]);
        w.set(2, 0, 1.0); // center tap (j=1), input channel 0 -> out 0
        w.set(3, 1, 1.0); // center tap (j=1), input channel 1 -> out 1
        let w = tape.constant(w);
        let b = tape.constant(Tensor::row(&[0.0, 0.0]));
        let y = tape.conv1d(x, w, b, 3).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]));
        let b = tape.constant(Tensor::new(&[1, 2], vec![3.0, 4.0]));
        let cat0 = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(cat0).shape(), &[2, 2]);
        let cat1 = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(cat1).data(), &[1.0, 2.0, 3.0, 4.0]);
        let back = tape.slice(cat1, 1, 2, 4).unwrap();
        assert_eq!(tape.value(back).data(), &[3.0, 4.0]);
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[-3.0, 0.5, 7.0]).with_grad());
        let y = tape.clamp(x, -1.0, 1.0);
        assert_eq!(tape.value(y).data(), &[-1.0, 0.5, 1.0]);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(TapeError::NonScalarLoss { .. })));
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::row(&[0.3, -0.7, 1.9]).with_grad());
            let w = tape.constant(Tensor::new(&[3, 3], (0..9).map(|i| (i as f64) * 0.1 - 0.4).collect()));
            let h = tape.matmul(x, w).unwrap();
            let h = tape.tanh(h);
            let loss = tape.mean(h);
            let grads = tape.backward(loss).unwrap();
            (tape.value(loss).item().to_bits(), grads.get(x).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}
