//! Dense f64 tensors and a single-use reverse-mode tape.
//!
//! Every forward primitive is a method on [`Tape`]: it computes the value,
//! appends a node recording its inputs, and returns a [`Var`] handle.
//! [`Tape::backward`] replays the nodes in reverse creation order and
//! accumulates gradients additively, so fan-out works without bookkeeping
//! on the caller's side. Parameters live outside the tape as [`Tensor`]s;
//! a forward pass snapshots them as leaves and writes gradients back after
//! the backward pass (see `model::TapeBinding`).
//!
//! Everything is f64 and row-major. No views, no strides, no broadcasting
//! beyond scalar-vs-array in the elementwise ops.

use crate::error::{Error, Result};

/// Dense row-major array with an optional gradient slot of the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel], grad: None }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![1], data: vec![x], grad: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Ensure the gradient slot exists, zero-filled.
    pub fn ensure_grad(&mut self) -> &mut Vec<f64> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Elementwise op kinds accepted by [`Tape::pointwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pointwise {
    Tanh,
    Sigmoid,
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatVec(Var, Var),
    VecMat(Var, Var),
    Dot(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Neg(Var),
    Scale(Var, f64),
    Sum(Var),
    Softmax(Var, Option<Vec<bool>>),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Pick(Var, usize),
    Row(Var, usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
}

/// Single-use operation record. Create one per forward pass; after
/// [`Tape::backward`] the tape is read-only.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Vec<f64>>>,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        assert!(
            self.grads.is_none(),
            "tape is single-use: cannot record after backward"
        );
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, op });
        Var(self.nodes.len() - 1)
    }

    /// Snapshot a tensor's current values as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf)
    }

    pub fn leaf_parts(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.push(shape, data, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(vec![1], vec![x], Op::Leaf)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        let numel = shape.iter().product();
        self.push(shape.to_vec(), vec![0.0; numel], Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Handle to the node at creation index `idx`; it must be a leaf.
    pub fn leaf_at(&self, idx: usize) -> Var {
        assert!(
            matches!(self.nodes[idx].op, Op::Leaf),
            "node {idx} is not a leaf"
        );
        Var(idx)
    }

    /// Scalar value of a one-element var.
    pub fn val1(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].data.clone(),
            grad: None,
        }
    }

    /// Gradient of the last `backward` loss w.r.t. `v`.
    pub fn grad(&self, v: Var) -> &[f64] {
        let grads = self
            .grads
            .as_ref()
            .expect("grad() called before backward()");
        &grads[v.0]
    }

    fn rank2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(Error::Dimension(format!(
                "{what} expects a matrix, got shape {s:?}"
            ))),
        }
    }

    fn rank1(&self, v: Var, what: &str) -> Result<usize> {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            1 => Ok(s[0]),
            _ => Err(Error::Dimension(format!(
                "{what} expects a vector, got shape {s:?}"
            ))),
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2(a, "matmul lhs")?;
        let (k2, n) = self.rank2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: lhs shape {:?} vs rhs shape {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += da[i * k + t] * db[t * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    /// `[r×c] · [c] -> [r]`.
    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var> {
        let (r, c) = self.rank2(m, "matvec lhs")?;
        let n = self.rank1(x, "matvec rhs")?;
        if c != n {
            return Err(Error::Dimension(format!(
                "matvec: matrix shape {:?} vs vector shape {:?}",
                self.shape(m),
                self.shape(x)
            )));
        }
        let (dm, dx) = (&self.nodes[m.0].data, &self.nodes[x.0].data);
        let mut out = vec![0.0; r];
        for i in 0..r {
            let row = &dm[i * c..(i + 1) * c];
            let mut acc = 0.0;
            for j in 0..c {
                acc += row[j] * dx[j];
            }
            out[i] = acc;
        }
        Ok(self.push(vec![r], out, Op::MatVec(m, x)))
    }

    /// `[r] · [r×c] -> [c]`; out_j = Σ_i x_i m_ij.
    pub fn vecmat(&mut self, x: Var, m: Var) -> Result<Var> {
        let n = self.rank1(x, "vecmat lhs")?;
        let (r, c) = self.rank2(m, "vecmat rhs")?;
        if n != r {
            return Err(Error::Dimension(format!(
                "vecmat: vector shape {:?} vs matrix shape {:?}",
                self.shape(x),
                self.shape(m)
            )));
        }
        let (dx, dm) = (&self.nodes[x.0].data, &self.nodes[m.0].data);
        let mut out = vec![0.0; c];
        for j in 0..c {
            let mut acc = 0.0;
            for i in 0..r {
                acc += dx[i] * dm[i * c + j];
            }
            out[j] = acc;
        }
        Ok(self.push(vec![c], out, Op::VecMat(x, m)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.rank1(a, "dot lhs")?;
        let n2 = self.rank1(b, "dot rhs")?;
        if n != n2 {
            return Err(Error::Dimension(format!(
                "dot: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut acc = 0.0;
        for i in 0..n {
            acc += da[i] * db[i];
        }
        Ok(self.push(vec![1], vec![acc], Op::Dot(a, b)))
    }

    // ---- elementwise -----------------------------------------------------

    /// Shapes must match exactly, or one operand must be a single element
    /// (scalar broadcast).
    fn binary_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (na, nb) = (self.nodes[a.0].data.len(), self.nodes[b.0].data.len());
        if sa == sb {
            Ok(sa.clone())
        } else if nb == 1 {
            Ok(sa.clone())
        } else if na == 1 {
            Ok(sb.clone())
        } else {
            Err(Error::Dimension(format!(
                "{what}: incompatible shapes {sa:?} vs {sb:?}"
            )))
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let shape = self.binary_shape(a, b, what)?;
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let n = shape.iter().product();
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            let x = da[if da.len() == 1 { 0 } else { i }];
            let y = db[if db.len() == 1 { 0 } else { i }];
            *o = f(x, y);
        }
        Ok(self.push(shape, out, op(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.tanh()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| sigmoid(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::Sigmoid(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| -v).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| k * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::Scale(x, k))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let acc: f64 = self.nodes[x.0].data.iter().sum();
        self.push(vec![1], vec![acc], Op::Sum(x))
    }

    /// Dispatcher over the elementwise kinds. `Tanh`/`Sigmoid` take one
    /// operand, the rest take two.
    pub fn pointwise(&mut self, kind: Pointwise, operands: &[Var]) -> Result<Var> {
        let arity_err = |n| {
            Error::Contract(format!("pointwise {kind:?} takes {n} operands"))
        };
        match kind {
            Pointwise::Tanh => match operands {
                &[x] => Ok(self.tanh(x)),
                _ => Err(arity_err(1)),
            },
            Pointwise::Sigmoid => match operands {
                &[x] => Ok(self.sigmoid(x)),
                _ => Err(arity_err(1)),
            },
            Pointwise::Add => match operands {
                &[a, b] => self.add(a, b),
                _ => Err(arity_err(2)),
            },
            Pointwise::Sub => match operands {
                &[a, b] => self.sub(a, b),
                _ => Err(arity_err(2)),
            },
            Pointwise::Mul => match operands {
                &[a, b] => self.mul(a, b),
                _ => Err(arity_err(2)),
            },
        }
    }

    // ---- normalizations --------------------------------------------------

    /// Masked softmax over a vector, stabilized by max-subtraction.
    /// Masked positions (mask[i] == false) get exactly 0. `None` means all
    /// positions are live.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let n = self.rank1(x, "softmax")?;
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::Dimension(format!(
                    "softmax: mask length {} vs input length {n}",
                    m.len()
                )));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::InvalidMask);
            }
        }
        let live = |i: usize| mask.map_or(true, |m| m[i]);
        let data = &self.nodes[x.0].data;
        let mut max = f64::NEG_INFINITY;
        for (i, &v) in data.iter().enumerate() {
            if live(i) && v > max {
                max = v;
            }
        }
        let mut out = vec![0.0; n];
        let mut z = 0.0;
        for i in 0..n {
            if live(i) {
                out[i] = (data[i] - max).exp();
                z += out[i];
            }
        }
        for o in out.iter_mut() {
            *o /= z;
        }
        Ok(self.push(vec![n], out, Op::Softmax(x, mask.map(|m| m.to_vec()))))
    }

    /// Log-softmax over a vector (stable: shift by max, subtract log-sum-exp).
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.rank1(x, "log_softmax")?;
        let data = &self.nodes[x.0].data;
        let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in data.iter() {
            z += (v - max).exp();
        }
        let lse = z.ln();
        let out: Vec<f64> = data.iter().map(|&v| v - max - lse).collect();
        Ok(self.push(vec![n], out, Op::LogSoftmax(x)))
    }

    // ---- shuffling -------------------------------------------------------

    /// Concatenate vectors (or scalars) into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero parts".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            if self.nodes[p.0].shape.len() > 1 {
                return Err(Error::Dimension(format!(
                    "concat expects vectors, got shape {:?}",
                    self.shape(p)
                )));
            }
            out.extend_from_slice(&self.nodes[p.0].data);
        }
        let n = out.len();
        Ok(self.push(vec![n], out, Op::Concat(parts.to_vec())))
    }

    /// Stack equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Contract("stack of zero rows".into()));
        }
        let c = self.rank1(rows[0], "stack_rows")?;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            let rc = self.rank1(r, "stack_rows")?;
            if rc != c {
                return Err(Error::Dimension(format!(
                    "stack_rows: row length {rc} vs {c}"
                )));
            }
            out.extend_from_slice(&self.nodes[r.0].data);
        }
        Ok(self.push(vec![rows.len(), c], out, Op::StackRows(rows.to_vec())))
    }

    /// Select one element of a vector as a scalar.
    pub fn pick(&mut self, x: Var, idx: usize) -> Result<Var> {
        let n = self.rank1(x, "pick")?;
        if idx >= n {
            return Err(Error::Contract(format!(
                "pick index {idx} out of range for length {n}"
            )));
        }
        let v = self.nodes[x.0].data[idx];
        Ok(self.push(vec![1], vec![v], Op::Pick(x, idx)))
    }

    /// Select one row of a matrix (embedding lookup).
    pub fn row(&mut self, m: Var, idx: usize) -> Result<Var> {
        let (r, c) = self.rank2(m, "row")?;
        if idx >= r {
            return Err(Error::Vocab { id: idx, size: r });
        }
        let out = self.nodes[m.0].data[idx * c..(idx + 1) * c].to_vec();
        Ok(self.push(vec![c], out, Op::Row(m, idx)))
    }

    // ---- reverse pass ----------------------------------------------------

    /// Run the chain rule from a scalar loss back to every leaf. Gradients
    /// accumulate additively across fan-out. Consumes the tape's ability to
    /// record; a second backward is a contract violation.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.grads.is_some() {
            return Err(Error::Contract("tape already consumed by backward".into()));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.data.len()])
            .collect();
        grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            // Ops after `loss` cannot be its ancestors, so they are skipped
            // by starting at loss. Within range, zero grads still propagate
            // zeros, which is harmless.
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let m = self.nodes[a.0].shape[0];
                    let k = self.nodes[a.0].shape[1];
                    let n = self.nodes[b.0].shape[1];
                    let g = std::mem::take(&mut grads[i]);
                    {
                        let db = &self.nodes[b.0].data;
                        let ga = &mut grads[a.0];
                        for r in 0..m {
                            for t in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[r * n + j] * db[t * n + j];
                                }
                                ga[r * k + t] += acc;
                            }
                        }
                    }
                    {
                        let da = &self.nodes[a.0].data;
                        let gb = &mut grads[b.0];
                        for t in 0..k {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for r in 0..m {
                                    acc += da[r * k + t] * g[r * n + j];
                                }
                                gb[t * n + j] += acc;
                            }
                        }
                    }
                    grads[i] = g;
                }
                Op::MatVec(m, x) => {
                    let r = self.nodes[m.0].shape[0];
                    let c = self.nodes[m.0].shape[1];
                    let g = std::mem::take(&mut grads[i]);
                    {
                        let dx = &self.nodes[x.0].data;
                        let gm = &mut grads[m.0];
                        for i2 in 0..r {
                            let gi = g[i2];
                            if gi != 0.0 {
                                for j in 0..c {
                                    gm[i2 * c + j] += gi * dx[j];
                                }
                            }
                        }
                    }
                    {
                        let dm = &self.nodes[m.0].data;
                        let gx = &mut grads[x.0];
                        for i2 in 0..r {
                            let gi = g[i2];
                            if gi != 0.0 {
                                for j in 0..c {
                                    gx[j] += gi * dm[i2 * c + j];
                                }
                            }
                        }
                    }
                    grads[i] = g;
                }
                Op::VecMat(x, m) => {
                    let r = self.nodes[m.0].shape[0];
                    let c = self.nodes[m.0].shape[1];
                    let g = std::mem::take(&mut grads[i]);
                    {
                        let dm = &self.nodes[m.0].data;
                        let gx = &mut grads[x.0];
                        for i2 in 0..r {
                            let mut acc = 0.0;
                            for j in 0..c {
                                acc += g[j] * dm[i2 * c + j];
                            }
                            gx[i2] += acc;
                        }
                    }
                    {
                        let dx = &self.nodes[x.0].data;
                        let gm = &mut grads[m.0];
                        for i2 in 0..r {
                            let xi = dx[i2];
                            if xi != 0.0 {
                                for j in 0..c {
                                    gm[i2 * c + j] += xi * g[j];
                                }
                            }
                        }
                    }
                    grads[i] = g;
                }
                Op::Dot(a, b) => {
                    let g = grads[i][0];
                    let n = self.nodes[a.0].data.len();
                    for j in 0..n {
                        let bv = self.nodes[b.0].data[j];
                        grads[a.0][j] += g * bv;
                    }
                    for j in 0..n {
                        let av = self.nodes[a.0].data[j];
                        grads[b.0][j] += g * av;
                    }
                }
                Op::Add(a, b) => {
                    let g = std::mem::take(&mut grads[i]);
                    self.spread(&mut grads, a, &g, 1.0, None);
                    self.spread(&mut grads, b, &g, 1.0, None);
                    grads[i] = g;
                }
                Op::Sub(a, b) => {
                    let g = std::mem::take(&mut grads[i]);
                    self.spread(&mut grads, a, &g, 1.0, None);
                    self.spread(&mut grads, b, &g, -1.0, None);
                    grads[i] = g;
                }
                Op::Mul(a, b) => {
                    let g = std::mem::take(&mut grads[i]);
                    let db = self.nodes[b.0].data.clone();
                    let da = self.nodes[a.0].data.clone();
                    self.spread(&mut grads, a, &g, 1.0, Some(&db));
                    self.spread(&mut grads, b, &g, 1.0, Some(&da));
                    grads[i] = g;
                }
                Op::Tanh(x) => {
                    let g = std::mem::take(&mut grads[i]);
                    let out = &self.nodes[i].data;
                    let gx = &mut grads[x.0];
                    for j in 0..g.len() {
                        gx[j] += g[j] * (1.0 - out[j] * out[j]);
                    }
                    grads[i] = g;
                }
                Op::Sigmoid(x) => {
                    let g = std::mem::take(&mut grads[i]);
                    let out = &self.nodes[i].data;
                    let gx = &mut grads[x.0];
                    for j in 0..g.len() {
                        gx[j] += g[j] * out[j] * (1.0 - out[j]);
                    }
                    grads[i] = g;
                }
                Op::Neg(x) => {
                    let g = std::mem::take(&mut grads[i]);
                    let gx = &mut grads[x.0];
                    for j in 0..g.len() {
                        gx[j] -= g[j];
                    }
                    grads[i] = g;
                }
                Op::Scale(x, k) => {
                    let g = std::mem::take(&mut grads[i]);
                    let gx = &mut grads[x.0];
                    for j in 0..g.len() {
                        gx[j] += k * g[j];
                    }
                    grads[i] = g;
                }
                Op::Sum(x) => {
                    let g = grads[i][0];
                    for v in grads[x.0].iter_mut() {
                        *v += g;
                    }
                }
                Op::Softmax(x, _mask) => {
                    // Masked outputs are exactly 0, so they drop out of both
                    // the inner product and the input gradient.
                    let g = std::mem::take(&mut grads[i]);
                    let y = &self.nodes[i].data;
                    let mut inner = 0.0;
                    for j in 0..g.len() {
                        inner += g[j] * y[j];
                    }
                    let gx = &mut grads[x.0];
                    for j in 0..g.len() {
                        gx[j] += y[j] * (g[j] - inner);
                    }
                    grads[i] = g;
                }
                Op::LogSoftmax(x) => {
                    let g = std::mem::take(&mut grads[i]);
                    let y = &self.nodes[i].data;
                    let gsum: f64 = g.iter().sum();
                    let gx = &mut grads[x.0];
                    for j in 0..g.len() {
                        gx[j] += g[j] - y[j].exp() * gsum;
                    }
                    grads[i] = g;
                }
                Op::Concat(parts) => {
                    let g = std::mem::take(&mut grads[i]);
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].data.len();
                        let gp = &mut grads[p.0];
                        for j in 0..n {
                            gp[j] += g[off + j];
                        }
                        off += n;
                    }
                    grads[i] = g;
                }
                Op::StackRows(rows) => {
                    let g = std::mem::take(&mut grads[i]);
                    let c = self.nodes[i].shape[1];
                    for (r, row) in rows.iter().enumerate() {
                        let gr = &mut grads[row.0];
                        for j in 0..c {
                            gr[j] += g[r * c + j];
                        }
                    }
                    grads[i] = g;
                }
                Op::Pick(x, idx) => {
                    let g = grads[i][0];
                    grads[x.0][idx] += g;
                }
                Op::Row(m, idx) => {
                    let g = std::mem::take(&mut grads[i]);
                    let c = self.nodes[i].data.len();
                    let gm = &mut grads[m.0];
                    for j in 0..c {
                        gm[idx * c + j] += g[j];
                    }
                    grads[i] = g;
                }
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Accumulate `sign * g * factor` into `target`, summing when the target
    /// is a broadcast scalar. `factor` is the elementwise multiplier (the
    /// other operand of a Mul), broadcast the same way as in the forward op.
    fn spread(
        &self,
        grads: &mut [Vec<f64>],
        target: Var,
        g: &[f64],
        sign: f64,
        factor: Option<&[f64]>,
    ) {
        let tlen = self.nodes[target.0].data.len();
        let gt = &mut grads[target.0];
        if tlen == g.len() {
            for j in 0..g.len() {
                let f = factor.map_or(1.0, |d| d[if d.len() == 1 { 0 } else { j }]);
                gt[j] += sign * g[j] * f;
            }
        } else {
            debug_assert_eq!(tlen, 1);
            let mut acc = 0.0;
            for j in 0..g.len() {
                let f = factor.map_or(1.0, |d| d[if d.len() == 1 { 0 } else { j }]);
                acc += g[j] * f;
            }
            gt[0] += sign * acc;
        }
    }
}

// ---- finite-difference gradient checking --------------------------------

/// Anything that can enumerate its trainable tensors by stable name, in a
/// stable order. The trainer, checkpointing, and the gradient checker all
/// work through this.
pub trait ParamCollection {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_param(&mut |n, _| names.push(n.to_string()));
        names
    }

    fn num_entries(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, t| n += t.numel());
        n
    }
}

/// Outcome of [`finite_difference_check`]: the global worst relative error
/// plus the per-tensor breakdown.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor name, worst relative error over its entries)
    pub per_param: Vec<(String, f64)>,
    /// Name and flat index of the worst entry.
    pub worst_entry: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn failing(&self, tol: f64) -> Vec<&(String, f64)> {
        self.per_param.iter().filter(|(_, e)| *e >= tol).collect()
    }
}

fn perturb<P: ParamCollection>(params: &mut P, tensor_idx: usize, entry: usize, delta: f64) {
    let mut k = 0;
    params.for_each_param_mut(&mut |_, t| {
        if k == tensor_idx {
            t.data[entry] += delta;
        }
        k += 1;
    });
}

/// Compare analytic gradients against central finite differences at step
/// size `h`.
///
/// `loss_fn` must be a pure forward evaluation (it is called twice at the
/// unperturbed point to detect nondeterminism, then twice per entry).
/// `grad_fn` runs forward+backward and leaves gradients in each tensor's
/// `grad` slot. Relative error per entry is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn finite_difference_check<P: ParamCollection>(
    params: &mut P,
    h: f64,
    loss_fn: impl FnMut(&P) -> Result<f64>,
    grad_fn: impl FnOnce(&mut P) -> Result<f64>,
) -> Result<GradCheckReport> {
    finite_difference_check_multi(params, &[h], loss_fn, grad_fn)
}

/// [`finite_difference_check`] over a ladder of step sizes: each entry
/// scores its best agreement. One step size cannot serve every coordinate
/// in f64: strong curvature wants a small step (truncation error grows as
/// h²), while a coordinate the loss is nearly flat in wants a large one
/// (roundoff error grows as eps·|loss|/h and otherwise swamps the tiny
/// true derivative). Consecutive ladder entries are also combined by
/// Richardson extrapolation, cancelling the h² truncation term where
/// neither plain estimate is clean. All of this sharpens only the numeric
/// side; a wrong gradient rule disagrees with every estimate.
pub fn finite_difference_check_multi<P: ParamCollection>(
    params: &mut P,
    steps: &[f64],
    mut loss_fn: impl FnMut(&P) -> Result<f64>,
    grad_fn: impl FnOnce(&mut P) -> Result<f64>,
) -> Result<GradCheckReport> {
    assert!(
        !steps.is_empty() && steps.iter().all(|&h| h > 0.0),
        "finite difference steps must be positive"
    );
    let l1 = loss_fn(params)?;
    let l2 = loss_fn(params)?;
    if l1.to_bits() != l2.to_bits() {
        return Err(Error::NonDeterministic(l1, l2));
    }

    grad_fn(params)?;
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    params.for_each_param(&mut |name, t| {
        let g = t
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        analytic.push((name.to_string(), g));
    });

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_param: Vec::new(),
        worst_entry: None,
    };
    // Entries that agree early skip the rest of the ladder.
    let good_enough = 1e-5;
    for (ti, (name, grads)) in analytic.iter().enumerate() {
        let mut tensor_worst = 0.0f64;
        for (ei, &a) in grads.iter().enumerate() {
            let rel_of = |numeric: f64| {
                (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs())
            };
            let mut best = f64::INFINITY;
            let mut estimates: Vec<(f64, f64)> = Vec::new();
            for &h in steps {
                perturb(params, ti, ei, h);
                let fp = loss_fn(params)?;
                perturb(params, ti, ei, -2.0 * h);
                let fm = loss_fn(params)?;
                perturb(params, ti, ei, h);
                let numeric = (fp - fm) / (2.0 * h);
                best = best.min(rel_of(numeric));
                if let Some(&(h_prev, d_prev)) = estimates.last() {
                    let r2 = (h / h_prev) * (h / h_prev);
                    let extrapolated = (r2 * d_prev - numeric) / (r2 - 1.0);
                    best = best.min(rel_of(extrapolated));
                }
                estimates.push((h, numeric));
                if best < good_enough {
                    break;
                }
            }
            if best > tensor_worst {
                tensor_worst = best;
            }
            if best > report.max_rel_error {
                report.max_rel_error = best;
                report.worst_entry = Some((name.clone(), ei));
            }
        }
        report.per_param.push((name.clone(), tensor_worst));
    }
    Ok(report)
}
