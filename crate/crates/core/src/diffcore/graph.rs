use super::{DiffError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Tanh(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    LogSoftmax(Var),
    CausalSoftmax(Var),
    RmsNorm(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Gather { src: Var, idx: Vec<usize> },
    Stack(Vec<Var>),
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddConst(_) => "add_const",
            Op::Tanh(_) => "tanh",
            Op::Gelu(_) => "gelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::LogSoftmax(_) => "log_softmax",
            Op::CausalSoftmax(_) => "causal_softmax",
            Op::RmsNorm(_) => "rms_norm",
            Op::Embedding { .. } => "embedding",
            Op::Gather { .. } => "gather",
            Op::Stack(_) => "stack",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

const RMS_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Define-by-run computation graph.
///
/// Nodes are appended in execution order, so every input id is smaller than
/// the id of its consumer and the node list is already topologically sorted.
/// A graph is built fresh for every forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    non_finite: Option<&'static str>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the first operation that produced a non-finite value, if any.
    pub fn non_finite_op(&self) -> Option<&'static str> {
        self.non_finite
    }

    pub fn ensure_finite(&self) -> Result<(), DiffError> {
        match self.non_finite {
            Some(op) => Err(DiffError::NonFinite { op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        if self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some(op.name());
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vals(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Inserts a copy of `t` as a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let value = Tensor::new(t.shape().to_vec(), t.values().to_vec())
            .expect("tensor invariant holds");
        self.push(Op::Leaf, value, t.requires_grad())
    }

    /// Inserts a non-differentiable constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let value = Tensor::new(t.shape().to_vec(), t.into_values()).expect("tensor invariant");
        self.push(Op::Leaf, value, false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.push(Op::Leaf, Tensor::scalar(x), false)
    }

    /// Value of `v` re-inserted as a constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize), DiffError> {
        self.nodes[v.0]
            .value
            .dims2()
            .ok_or_else(|| DiffError::Rank {
                op,
                shape: self.shape(v).to_vec(),
            })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 || k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let av = self.vals(a);
        let bv = self.vals(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Op::MatMul(a, b),
            Tensor::new(vec![m, n], out).expect("shape"),
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        if self.shape(a).len() != 2 {
            return Err(DiffError::Rank {
                op: "transpose",
                shape: self.shape(a).to_vec(),
            });
        }
        let (m, n) = self.dims2("transpose", a)?;
        let av = self.vals(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Op::Transpose(a),
            Tensor::new(vec![n, m], out).expect("shape"),
            rg,
        ))
    }

    /// Broadcast check: `b` matches `a` exactly, or `b` is a row of width
    /// `cols(a)` repeated across the rows of `a`.
    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<bool, DiffError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(false);
        }
        let row_like = match sb {
            [c] => Some(*c),
            [1, c] => Some(*c),
            _ => None,
        };
        match (sa, row_like) {
            ([_, c], Some(cb)) if *c == cb => Ok(true),
            _ => Err(DiffError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            }),
        }
    }

    fn zip_broadcast(
        &mut self,
        op: Op,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, DiffError> {
        let bcast = self.broadcast_kind(op.name(), a, b)?;
        let av = self.vals(a);
        let bv = self.vals(b);
        let out: Vec<f64> = if bcast {
            let c = bv.len();
            av.iter()
                .enumerate()
                .map(|(i, x)| f(*x, bv[i % c]))
                .collect()
        } else {
            av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect()
        };
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, Tensor::new(shape, out).expect("shape"), rg))
    }

    /// Elementwise sum; `b` may be a row vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_broadcast(Op::Add(a, b), a, b, |x, y| x + y)
    }

    /// Elementwise product; `b` may be a row vector broadcast over the rows of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.zip_broadcast(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::ShapeMismatch {
                op: "sub",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        self.zip_broadcast(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let out: Vec<f64> = self.vals(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(op, Tensor::new(shape, out).expect("shape"), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::Scale(a, c), a, |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::AddConst(a), a, |x| x + c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Op::Tanh(a), a, f64::tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Op::Gelu(a), a, |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid(a), a, crate::objectives::sigmoid)
    }

    /// Overflow-safe `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Op::Softplus(a), a, crate::objectives::softplus)
    }

    /// `ln σ(x) = -softplus(-x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        let s = self.softplus(n);
        self.neg(s)
    }

    /// Row-wise log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let (r, c) = self.dims2("log_softmax", a)?;
        if c < 2 {
            return Err(DiffError::Rank {
                op: "log_softmax",
                shape: self.shape(a).to_vec(),
            });
        }
        let av = self.vals(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = x - max - lse;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Op::LogSoftmax(a), Tensor::new(shape, out).expect("shape"), rg))
    }

    /// Softmax of a square score matrix where row `t` only sees columns `0..=t`.
    /// Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var, DiffError> {
        let (r, c) = self.dims2("causal_softmax", a)?;
        if r != c {
            return Err(DiffError::ShapeMismatch {
                op: "causal_softmax",
                left: self.shape(a).to_vec(),
                right: vec![r, r],
            });
        }
        let av = self.vals(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..i * c + i + 1];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * c..i * c + i + 1];
            let mut z = 0.0;
            for (o, x) in o.iter_mut().zip(row) {
                *o = (x - max).exp();
                z += *o;
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Op::CausalSoftmax(a),
            Tensor::new(vec![r, c], out).expect("shape"),
            rg,
        ))
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps)`.
    pub fn rms_norm(&mut self, a: Var) -> Result<Var, DiffError> {
        let (r, c) = self.dims2("rms_norm", a)?;
        let av = self.vals(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let ms = row.iter().map(|x| x * x).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            for (o, x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = x * inv;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Op::RmsNorm(a), Tensor::new(shape, out).expect("shape"), rg))
    }

    /// Gathers rows of `table` (shape `[V, d]`) for each id, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, DiffError> {
        let sh = self.shape(table);
        if sh.len() != 2 {
            return Err(DiffError::Rank {
                op: "embedding",
                shape: sh.to_vec(),
            });
        }
        let (v, d) = (sh[0], sh[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(DiffError::IndexOutOfRange {
                op: "embedding",
                index: bad,
                bound: v,
            });
        }
        let tv = self.vals(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            Tensor::new(vec![ids.len(), d], out).expect("shape"),
            rg,
        ))
    }

    /// Picks entries of `src` by flat row-major index, giving a vector.
    pub fn gather(&mut self, src: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let n = self.vals(src).len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(DiffError::IndexOutOfRange {
                op: "gather",
                index: bad,
                bound: n,
            });
        }
        let sv = self.vals(src);
        let out: Vec<f64> = idx.iter().map(|&i| sv[i]).collect();
        let rg = self.rg(src);
        Ok(self.push(
            Op::Gather {
                src,
                idx: idx.to_vec(),
            },
            Tensor::new(vec![idx.len()], out).expect("shape"),
            rg,
        ))
    }

    /// Packs scalar nodes into a vector.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var, DiffError> {
        let mut out = Vec::with_capacity(items.len());
        for &v in items {
            if self.vals(v).len() != 1 {
                return Err(DiffError::NotScalar {
                    shape: self.shape(v).to_vec(),
                });
            }
            out.push(self.vals(v)[0]);
        }
        let rg = items.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Op::Stack(items.to_vec()),
            Tensor::new(vec![items.len()], out).expect("shape"),
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.vals(a).iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.vals(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Op::Mean(a), Tensor::scalar(s), rg)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Each node is visited once, in reverse insertion order. Leaves that
    /// require grad but do not influence `loss` get an all-zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(DiffError::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        self.ensure_finite()?;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            let g = match (&node.op, node.requires_grad, g) {
                (Op::Leaf, true, None) => Some(vec![0.0; node.value.len()]),
                (Op::Leaf, true, g) => g,
                _ => None,
            };
            out.push(g);
        }
        let grads = Gradients { grads: out };
        if grads
            .grads
            .iter()
            .flatten()
            .any(|g| g.iter().any(|v| !v.is_finite()))
        {
            return Err(DiffError::NonFinite { op: "backward" });
        }
        Ok(grads)
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.values();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().expect("rank");
                let n = self.nodes[b.0].value.dims2().expect("rank").1;
                let av = self.vals(*a);
                let bv = self.vals(*b);
                if self.rg(*a) {
                    // dA = dC . B^T
                    let ga = acc(grads, *a, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if self.rg(*b) {
                    // dB = A^T . dC
                    let gb = acc(grads, *b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.nodes[a.0].value.dims2().expect("rank");
                let ga = acc(grads, *a, m * n);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.rg(*a) {
                    let ga = acc(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if self.rg(*b) {
                    let nb = self.vals(*b).len();
                    let gb = acc(grads, *b, nb);
                    for (i, v) in g.iter().enumerate() {
                        gb[i % nb] += sign * v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.vals(*a);
                let bv = self.vals(*b);
                let nb = bv.len();
                if self.rg(*a) {
                    let ga = acc(grads, *a, g.len());
                    for (i, v) in g.iter().enumerate() {
                        ga[i] += v * bv[i % nb];
                    }
                }
                if self.rg(*b) {
                    let gb = acc(grads, *b, nb);
                    for (i, v) in g.iter().enumerate() {
                        gb[i % nb] += v * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = acc(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(o, v)| *o += c * v);
            }
            Op::AddConst(a) => {
                let ga = acc(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(o, v)| *o += v);
            }
            Op::Tanh(a) => {
                let ga = acc(grads, *a, g.len());
                for ((o, v), y) in ga.iter_mut().zip(g).zip(out) {
                    *o += v * (1.0 - y * y);
                }
            }
            Op::Gelu(a) => {
                let xs = self.vals(*a);
                let ga = acc(grads, *a, g.len());
                for ((o, v), x) in ga.iter_mut().zip(g).zip(xs) {
                    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    *o += v * d;
                }
            }
            Op::Sigmoid(a) => {
                let ga = acc(grads, *a, g.len());
                for ((o, v), y) in ga.iter_mut().zip(g).zip(out) {
                    *o += v * y * (1.0 - y);
                }
            }
            Op::Softplus(a) => {
                let xs = self.vals(*a);
                let ga = acc(grads, *a, g.len());
                for ((o, v), x) in ga.iter_mut().zip(g).zip(xs) {
                    *o += v * crate::objectives::sigmoid(*x);
                }
            }
            Op::LogSoftmax(a) => {
                let (r, c) = node.value.dims2().expect("rank");
                let ga = acc(grads, *a, r * c);
                for i in 0..r {
                    let gs: f64 = g[i * c..(i + 1) * c].iter().sum();
                    for j in 0..c {
                        let p = out[i * c + j].exp();
                        ga[i * c + j] += g[i * c + j] - p * gs;
                    }
                }
            }
            Op::CausalSoftmax(a) => {
                let (r, c) = node.value.dims2().expect("rank");
                let ga = acc(grads, *a, r * c);
                for i in 0..r {
                    let lo = i * c;
                    let hi = lo + i + 1;
                    let dot: f64 = g[lo..hi].iter().zip(&out[lo..hi]).map(|(x, y)| x * y).sum();
                    for j in lo..hi {
                        ga[j] += out[j] * (g[j] - dot);
                    }
                }
            }
            Op::RmsNorm(a) => {
                let (r, c) = node.value.dims2().expect("rank");
                let xs = self.vals(*a);
                let ga = acc(grads, *a, r * c);
                for i in 0..r {
                    let row = &xs[i * c..(i + 1) * c];
                    let ms = row.iter().map(|x| x * x).sum::<f64>() / c as f64;
                    let inv = 1.0 / (ms + RMS_EPS).sqrt();
                    let dot: f64 = g[i * c..(i + 1) * c]
                        .iter()
                        .zip(&out[i * c..(i + 1) * c])
                        .map(|(x, y)| x * y)
                        .sum::<f64>()
                        / c as f64;
                    for j in 0..c {
                        ga[i * c + j] += (g[i * c + j] - out[i * c + j] * dot) * inv;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let nt = self.vals(*table).len();
                let d = node.value.dims2().expect("rank").1;
                let gt = acc(grads, *table, nt);
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[row * d + j];
                    }
                }
            }
            Op::Gather { src, idx } => {
                let ns = self.vals(*src).len();
                let gs = acc(grads, *src, ns);
                for (v, &i) in g.iter().zip(idx) {
                    gs[i] += v;
                }
            }
            Op::Stack(items) => {
                for (v, item) in g.iter().zip(items) {
                    if self.rg(*item) {
                        acc(grads, *item, 1)[0] += v;
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.vals(*a).len();
                let ga = acc(grads, *a, n);
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::Mean(a) => {
                let n = self.vals(*a).len();
                let ga = acc(grads, *a, n);
                let s = g[0] / n as f64;
                ga.iter_mut().for_each(|o| *o += s);
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

/// Gradients produced by [`Graph::backward`], available for leaf nodes.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a differentiable leaf; `None` for constants and interior nodes.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of leaf `v` into `target`'s gradient buffer.
    pub fn write_into(&self, v: Var, target: &mut Tensor) -> Result<(), DiffError> {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }
}
