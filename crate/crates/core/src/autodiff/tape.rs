use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul {
        a: usize,
        b: usize,
        n: usize,
        k: usize,
        m: usize,
    },
    AddRow {
        a: usize,
        bias: usize,
        m: usize,
    },
    BroadcastRows(usize),
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        geom: ConvGeometry,
        n: usize,
    },
    Relu(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    MeanRows {
        a: usize,
        n: usize,
    },
    LogSoftmaxRows {
        a: usize,
        m: usize,
    },
    Clip {
        a: usize,
        lo: f64,
        hi: f64,
    },
    Index {
        a: usize,
        at: usize,
    },
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation for reverse-mode differentiation.
///
/// Nodes are only ever appended after their operands, so the node order is
/// already a topological order and the graph cannot contain cycles.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.check(v).expect("variable from another tape")].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.check(v)?].value)
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn push_checked(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[usize]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        Ok(self.push(Tensor::from_parts(shape, data), op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Result<Var> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.same_shape(name, a, b)?;
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.push_checked(name, shape, data, op(a, b), &[a, b])
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let a = self.check(a)?;
        let data = self.nodes[a].value.data().iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        self.push_checked(name, shape, data, op, &[a])
    }

    fn dims2(&self, op: &'static str, a: usize) -> Result<(usize, usize)> {
        match self.nodes[a].value.shape() {
            [n, m] => Ok((*n, *m)),
            s => Err(Error::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            }),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let idx = self.check(a)?;
        self.map("scale", a, |x| c * x, Op::Scale(idx, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let idx = self.check(a)?;
        self.map("add_scalar", a, |x| x + c, Op::Shift(idx))
    }

    /// `[n,k] · [k,m] → [n,m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (n, k) = self.dims2("matmul", ai)?;
        let (k2, m) = self.dims2("matmul", bi)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![n, k],
                rhs: vec![k2, m],
            });
        }
        let mut out = vec![0.0; n * m];
        kernels::matmul_acc(self.nodes[ai].value.data(), self.nodes[bi].value.data(), &mut out, n, k, m);
        self.push_checked("matmul", vec![n, m], out, Op::MatMul { a: ai, b: bi, n, k, m }, &[ai, bi])
    }

    /// Adds a length-`m` row vector to every row of an `[n,m]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(bias)?);
        let (n, m) = self.dims2("add_row", ai)?;
        if self.nodes[bi].value.len() != m {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: vec![n, m],
                rhs: self.nodes[bi].value.shape().to_vec(),
            });
        }
        let b = self.nodes[bi].value.data();
        let data = self.nodes[ai]
            .value
            .data()
            .chunks(m)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        self.push_checked("add_row", vec![n, m], data, Op::AddRow { a: ai, bias: bi, m }, &[ai, bi])
    }

    /// Stacks `n` copies of a flat vector into an `[n, len]` matrix.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let row = self.nodes[ai].value.data();
        let m = row.len();
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(row);
        }
        self.push_checked("broadcast_rows", vec![n, m], data, Op::BroadcastRows(ai), &[ai])
    }

    /// Valid convolution of a batch `[n, c·h·w]` with weights `[oc, c·k·k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let (xi, wi) = (self.check(x)?, self.check(w)?);
        let bi = bias.map(|b| self.check(b)).transpose()?;
        if !geom.is_valid() {
            return Err(Error::invalid(format!("invalid convolution geometry {geom:?}")));
        }
        let (n, len) = self.dims2("conv2d", xi)?;
        if len != geom.in_len() || self.nodes[wi].value.len() != geom.weight_len() {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: vec![n, len],
                rhs: self.nodes[wi].value.shape().to_vec(),
            });
        }
        if let Some(b) = bi {
            if self.nodes[b].value.len() != geom.out_channels {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![geom.out_channels],
                    rhs: self.nodes[b].value.shape().to_vec(),
                });
            }
        }
        let bias_data: &[f64] = bi.map(|b| self.nodes[b].value.data()).unwrap_or(&[]);
        let out = kernels::conv2d_forward(&geom, self.nodes[xi].value.data(), self.nodes[wi].value.data(), bias_data, n);
        let mut parents = vec![xi, wi];
        parents.extend(bi);
        self.push_checked(
            "conv2d",
            vec![n, geom.out_len()],
            out,
            Op::Conv2d {
                x: xi,
                w: wi,
                bias: bi,
                geom,
                n,
            },
            &parents,
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let idx = self.check(a)?;
        self.map("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(idx))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let idx = self.check(a)?;
        self.map("exp", a, f64::exp, Op::Exp(idx))
    }

    /// Natural log; non-positive inputs yield a `NonFinite` error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let idx = self.check(a)?;
        self.map("log", a, f64::ln, Op::Log(idx))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let idx = self.check(a)?;
        self.map("abs", a, f64::abs, Op::Abs(idx))
    }

    /// Clip to `[lo, hi]` with a straight-through gradient: the gradient is
    /// passed unchanged wherever the input lies within the bounds.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid(format!("clip bounds {lo} > {hi}")));
        }
        let idx = self.check(a)?;
        self.map("clip", a, |x| x.clamp(lo, hi), Op::Clip { a: idx, lo, hi })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let s = self.nodes[ai].value.data().iter().sum();
        self.push_checked("sum", vec![1], vec![s], Op::Sum(ai), &[ai])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let v = self.nodes[ai].value.data();
        if v.is_empty() {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push_checked("mean", vec![1], vec![s], Op::Mean(ai), &[ai])
    }

    /// Column means of an `[n,m]` matrix, giving `[m]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let (n, m) = self.dims2("mean_rows", ai)?;
        if n == 0 {
            return Err(Error::invalid("mean_rows over zero rows"));
        }
        let mut out = vec![0.0; m];
        for row in self.nodes[ai].value.data().chunks(m) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        self.push_checked("mean_rows", vec![m], out, Op::MeanRows { a: ai, n }, &[ai])
    }

    /// Row-wise log-softmax of an `[n,m]` matrix (numerically stabilised).
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let (n, m) = self.dims2("log_softmax_rows", ai)?;
        let mut out = Vec::with_capacity(n * m);
        for row in self.nodes[ai].value.data().chunks(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        self.push_checked("log_softmax_rows", vec![n, m], out, Op::LogSoftmaxRows { a: ai, m }, &[ai])
    }

    /// Row-wise softmax, built as `exp(log_softmax(a))`.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ls = self.log_softmax_rows(a)?;
        self.exp(ls)
    }

    /// Selects a single element (by flat index) as a scalar.
    pub fn index(&mut self, a: Var, at: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let v = self.nodes[ai].value.data();
        if at >= v.len() {
            return Err(Error::invalid(format!("index {at} out of range {}", v.len())));
        }
        let x = v[at];
        self.push_checked("index", vec![1], vec![x], Op::Index { a: ai, at }, &[ai])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ai = self.check(a)?;
        let len: usize = shape.iter().product();
        if len != self.nodes[ai].value.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[ai].value.shape().to_vec(),
                rhs: shape,
            });
        }
        let data = self.nodes[ai].value.data().to_vec();
        self.push_checked("reshape", shape, data, Op::Reshape(ai), &[ai])
    }

    /// Smallest distance between any ReLU/clip input and its kink.
    ///
    /// Finite-difference checks are only meaningful when this is larger than
    /// the probe step.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) => {
                    for v in self.nodes[a].value.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::Clip { a, lo, hi } => {
                    for v in self.nodes[a].value.data() {
                        margin = margin.min((v - lo).abs()).min((v - hi).abs());
                    }
                }
                Op::Abs(a) => {
                    for v in self.nodes[a].value.data() {
                        margin = margin.min(v.abs());
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let oi = self.check(out)?;
        let value = &self.nodes[oi].value;
        if value.len() != 1 {
            return Err(Error::NotScalar(value.shape().to_vec()));
        }
        self.backward_with(out, &[1.0])
    }

    /// Vector-Jacobian product: reverse pass seeded with `seed` (same length
    /// as the output).
    pub fn backward_with(&self, out: Var, seed: &[f64]) -> Result<Gradients> {
        let oi = self.check(out)?;
        if seed.len() != self.nodes[oi].value.len() {
            return Err(Error::ShapeMismatch {
                op: "backward seed",
                lhs: self.nodes[oi].value.shape().to_vec(),
                rhs: vec![seed.len()],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; oi + 1];
        if self.nodes[oi].requires_grad {
            grads[oi] = Some(seed.to_vec());
        }
        for i in (0..=oi).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.data();
        let wants = |j: usize| self.nodes[j].requires_grad;
        match node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if wants(a) {
                    acc(grads, a, val(a).len(), |ga| add_into(ga, g));
                }
                if wants(b) {
                    acc(grads, b, val(b).len(), |gb| add_into(gb, g));
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    acc(grads, a, val(a).len(), |ga| add_into(ga, g));
                }
                if wants(b) {
                    acc(grads, b, val(b).len(), |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let bv = val(b);
                    acc(grads, a, bv.len(), |ga| {
                        for ((x, gv), bv) in ga.iter_mut().zip(g).zip(bv) {
                            *x += gv * bv;
                        }
                    });
                }
                if wants(b) {
                    let av = val(a);
                    acc(grads, b, av.len(), |gb| {
                        for ((x, gv), av) in gb.iter_mut().zip(g).zip(av) {
                            *x += gv * av;
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                if wants(a) {
                    acc(grads, a, g.len(), |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
                }
            }
            Op::Shift(a) | Op::Reshape(a) => {
                if wants(a) {
                    acc(grads, a, g.len(), |ga| add_into(ga, g));
                }
            }
            Op::MatMul { a, b, n, k, m } => {
                if wants(a) {
                    let bv = val(b);
                    acc(grads, a, n * k, |ga| kernels::matmul_a_bt_acc(g, bv, ga, n, m, k));
                }
                if wants(b) {
                    let av = val(a);
                    acc(grads, b, k * m, |gb| kernels::matmul_at_b_acc(av, g, gb, n, k, m));
                }
            }
            Op::AddRow { a, bias, m } => {
                if wants(a) {
                    acc(grads, a, g.len(), |ga| add_into(ga, g));
                }
                if wants(bias) {
                    acc(grads, bias, m, |gb| {
                        for row in g.chunks(m) {
                            add_into(gb, row);
                        }
                    });
                }
            }
            Op::BroadcastRows(a) => {
                if wants(a) {
                    let m = val(a).len();
                    acc(grads, a, m, |ga| {
                        for row in g.chunks(m) {
                            add_into(ga, row);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, bias, geom, n } => {
                let mut gx = wants(x).then(|| take_or_zero(grads, x, val(x).len()));
                let mut gw = wants(w).then(|| take_or_zero(grads, w, val(w).len()));
                let bias = bias.filter(|&b| wants(b));
                let mut gb = bias.map(|b| take_or_zero(grads, b, val(b).len()));
                kernels::conv2d_backward(&geom, val(x), val(w), g, n, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                if let Some(v) = gx {
                    grads[x] = Some(v);
                }
                if let Some(v) = gw {
                    grads[w] = Some(v);
                }
                if let (Some(b), Some(v)) = (bias, gb) {
                    grads[b] = Some(v);
                }
            }
            Op::Relu(a) => {
                if wants(a) {
                    let av = val(a);
                    acc(grads, a, av.len(), |ga| {
                        for ((x, gv), v) in ga.iter_mut().zip(g).zip(av) {
                            if *v > 0.0 {
                                *x += gv;
                            }
                        }
                    });
                }
            }
            Op::Exp(a) => {
                if wants(a) {
                    let out = node.value.data();
                    acc(grads, a, out.len(), |ga| {
                        for ((x, gv), o) in ga.iter_mut().zip(g).zip(out) {
                            *x += gv * o;
                        }
                    });
                }
            }
            Op::Log(a) => {
                if wants(a) {
                    let av = val(a);
                    acc(grads, a, av.len(), |ga| {
                        for ((x, gv), v) in ga.iter_mut().zip(g).zip(av) {
                            *x += gv / v;
                        }
                    });
                }
            }
            Op::Abs(a) => {
                if wants(a) {
                    let av = val(a);
                    acc(grads, a, av.len(), |ga| {
                        for ((x, gv), v) in ga.iter_mut().zip(g).zip(av) {
                            if *v > 0.0 {
                                *x += gv;
                            } else if *v < 0.0 {
                                *x -= gv;
                            }
                        }
                    });
                }
            }
            Op::Clip { a, lo, hi } => {
                if wants(a) {
                    let av = val(a);
                    acc(grads, a, av.len(), |ga| {
                        for ((x, gv), v) in ga.iter_mut().zip(g).zip(av) {
                            if *v >= lo && *v <= hi {
                                *x += gv;
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if wants(a) {
                    acc(grads, a, val(a).len(), |ga| ga.iter_mut().for_each(|x| *x += g[0]));
                }
            }
            Op::Mean(a) => {
                if wants(a) {
                    let len = val(a).len();
                    let s = g[0] / len as f64;
                    acc(grads, a, len, |ga| ga.iter_mut().for_each(|x| *x += s));
                }
            }
            Op::MeanRows { a, n } => {
                if wants(a) {
                    let m = g.len();
                    acc(grads, a, n * m, |ga| {
                        for row in ga.chunks_mut(m) {
                            for (x, gv) in row.iter_mut().zip(g) {
                                *x += gv / n as f64;
                            }
                        }
                    });
                }
            }
            Op::LogSoftmaxRows { a, m } => {
                if wants(a) {
                    let out = node.value.data();
                    acc(grads, a, out.len(), |ga| {
                        for ((ga_row, g_row), o_row) in ga.chunks_mut(m).zip(g.chunks(m)).zip(out.chunks(m)) {
                            let gs: f64 = g_row.iter().sum();
                            for ((x, gv), o) in ga_row.iter_mut().zip(g_row).zip(o_row) {
                                *x += gv - o.exp() * gs;
                            }
                        }
                    });
                }
            }
            Op::Index { a, at } => {
                if wants(a) {
                    acc(grads, a, val(a).len(), |ga| ga[at] += g[0]);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], j: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[j].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn take_or_zero(grads: &mut [Option<Vec<f64>>], j: usize, len: usize) -> Vec<f64> {
    grads[j].take().unwrap_or_else(|| vec![0.0; len])
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v` (zeros if `v` does not
    /// influence the output).
    pub fn wrt(&self, tape: &Tape, v: Var) -> Result<Tensor> {
        if v.tape != self.tape {
            return Err(Error::NotOnTape);
        }
        let shape = tape.try_value(v)?.shape().to_vec();
        match self.grads.get(v.idx).and_then(|g| g.as_ref()) {
            Some(g) => Ok(Tensor::from_parts(shape, g.clone())),
            None => Ok(Tensor::zeros(shape)),
        }
    }
}
