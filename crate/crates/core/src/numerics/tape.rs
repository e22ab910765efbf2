//! Reverse-mode automatic differentiation over an explicit tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! append nodes in execution order, so the node list is already a topological
//! order and [`Tape::backward`] is a single reverse sweep.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, Window};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

const LN_EPS: f64 = 1e-8;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        win: Window,
        out_channels: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        win: Window,
        in_channels: usize,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(f64, f64)>,
    },
    /// Saved local derivative, computed alongside the forward value.
    Gelu(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Dropout(Var, Vec<f64>),
    Mean(Var),
    Sum(Var),
    SumLast(Var),
    Concat {
        parts: Vec<Var>,
        lens: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Narrow {
        a: Var,
        outer: usize,
        inner: usize,
        axis_len: usize,
        start: usize,
        len: usize,
    },
    SelectRows(Var, Vec<usize>),
    Repeat(Var, usize),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recording context for one forward pass.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    train: bool,
    rng: ChaCha8Rng,
    bound: HashMap<String, Var>,
    bound_order: Vec<String>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(|g| g.as_deref())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    /// `train` enables dropout; `seed` fixes the dropout stream.
    pub fn new(train: bool, seed: u64) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bound: HashMap::new(),
            bound_order: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        debug_assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index()]
    }

    fn check(&self, v: Var, op: &'static str) -> Result<()> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::shape(op, "operand recorded on a different tape"));
        }
        Ok(())
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len(), "{name}");
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            shape,
            value,
            op: if needs_grad { op } else { Op::Leaf },
            needs_grad,
        });
        Ok(Var { tape: self.id, idx })
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).needs_grad)
    }

    /// Records a leaf; it is differentiated iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad,
        });
        Var { tape: self.id, idx }
    }

    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {shape:?} vs {} values", value.len()),
            ));
        }
        self.push("constant", shape.to_vec(), value, Op::Leaf, false)
    }

    /// Binds a named parameter from `store`. Binding the same name twice
    /// returns the same variable, so shared weights accumulate gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        let v = self.leaf(t);
        self.bound.insert(name.to_string(), v);
        self.bound_order.push(name.to_string());
        Ok(v)
    }

    /// Parameters bound on this tape, in binding order.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> + '_ {
        self.bound_order.iter().map(move |n| (n.as_str(), self.bound[n]))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("tape values are finite")
    }

    /// Value of a single-element variable.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return Err(Error::shape("scalar", format!("shape {:?} is not scalar", n.shape)));
        }
        Ok(n.value[0])
    }

    // ---------------------------------------------------------------- linear algebra

    /// Batched matrix product `a[..., m, k] · b[..., k, n]`. `b` may instead be a
    /// plain `[k, n]` matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[..., m, k] · b[..., n, k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.check(a, "matmul")?;
        self.check(b, "matmul")?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}: rank < 2")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?} (transposed: {trans_b})")));
        }
        let lead = &sa[..sa.len() - 2];
        let batch = numel(lead);
        let shared_b = sb.len() == 2;
        if !shared_b && &sb[..sb.len() - 2] != lead {
            return Err(Error::shape("matmul", format!("batch dims differ: {sa:?} x {sb:?}")));
        }
        // A shared right operand lets the batch fold into the row dimension.
        let (batch, m) = if shared_b { (1, batch * m) } else { (batch, m) };
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            let a_t = &av[t * m * k..(t + 1) * m * k];
            let b_t = if shared_b { bv } else { &bv[t * k * n..(t + 1) * k * n] };
            let c_t = &mut out[t * m * n..(t + 1) * m * n];
            if trans_b {
                kernels::gemm_nt(m, k, n, a_t, b_t, c_t);
            } else {
                kernels::gemm_nn(m, k, n, a_t, b_t, c_t);
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let needs = self.needs(&[a, b]);
        self.push(
            "matmul",
            shape,
            out,
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            needs,
        )
    }

    // ---------------------------------------------------------------- elementwise

    fn broadcast_ok(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a, op)?;
        self.check(b, op)?;
        let sa = self.shape(a);
        let sb = self.shape(b);
        let scalar = numel(sb) == 1;
        let suffix = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if scalar || suffix {
            Ok(())
        } else {
            Err(Error::shape(op, format!("cannot broadcast {sb:?} onto {sa:?}")))
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let nb = bv.len();
        let out: Vec<f64> = av.iter().enumerate().map(|(i, &x)| f(x, bv[i % nb])).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a, b]);
        self.push(name, shape, out, op, needs)
    }

    /// Elementwise sum; the smaller operand must match a suffix of the larger
    /// one's shape (or be a single element) and is repeated.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if numel(self.shape(b)) > numel(self.shape(a)) { (b, a) } else { (a, b) };
        self.broadcast_ok("add", a, b)?;
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// `a - b`, with `b` broadcast as in [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_ok("sub", a, b)?;
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if numel(self.shape(b)) > numel(self.shape(a)) { (b, a) } else { (a, b) };
        self.broadcast_ok("mul", a, b)?;
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_ok("div", a, b)?;
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check(a, "scale")?;
        let out = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a]);
        self.push("scale", shape, out, Op::Scale(a, s), needs)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check(a, "add_scalar")?;
        let out = self.value(a).iter().map(|x| x + s).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a]);
        self.push("add_scalar", shape, out, Op::AddScalar(a), needs)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check(a, name)?;
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a]);
        self.push(name, shape, out, op, needs)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(a, "gelu")?;
        let needs = self.needs(&[a]);
        let x = self.value(a);
        let mut out = Vec::with_capacity(x.len());
        let mut deriv = Vec::with_capacity(if needs { x.len() } else { 0 });
        for &v in x {
            let t = 1.0 - 2.0 / ((2.0 * GELU_C * (v + GELU_A * v * v * v)).exp() + 1.0);
            out.push(0.5 * v * (1.0 + t));
            if needs {
                deriv.push(0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v));
            }
        }
        let shape = self.shape(a).to_vec();
        self.push("gelu", shape, out, Op::Gelu(a, deriv), needs)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    /// Inverted dropout: identity outside training mode.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        self.check(a, "dropout")?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a]);
        self.push("dropout", shape, out, Op::Dropout(a, mask), needs)
    }

    // ---------------------------------------------------------------- normalisation

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        self.check(a, "softmax")?;
        let shape = self.shape(a).to_vec();
        let n = *shape.last().unwrap();
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let needs = self.needs(&[a]);
        self.push("softmax", shape, out, Op::Softmax(a), needs)
    }

    /// Layer norm over the last dimension with affine `gamma`, `beta` of that width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check(x, "layer_norm")?;
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!("affine {:?}/{:?} for width {n}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        let mut stats = Vec::with_capacity(xv.len() / n);
        for (row, orow) in xv.chunks(n).zip(out.chunks_mut(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for i in 0..n {
                orow[i] = (row[i] - mean) * rstd * g[i] + b[i];
            }
            stats.push((mean, rstd));
        }
        let needs = self.needs(&[x, gamma, beta]);
        self.push("layer_norm", shape, out, Op::LayerNorm { x, gamma, beta, stats }, needs)
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a, "sum")?;
        let s = self.value(a).iter().sum();
        let needs = self.needs(&[a]);
        self.push("sum", vec![1], vec![s], Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a, "mean")?;
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(&[a]);
        self.push("mean", vec![1], vec![s], Op::Mean(a), needs)
    }

    /// Sums out the last dimension.
    pub fn sum_lastdim(&mut self, a: Var) -> Result<Var> {
        self.check(a, "sum_lastdim")?;
        let shape = self.shape(a).to_vec();
        let n = *shape.last().unwrap();
        let out: Vec<f64> = self.value(a).chunks(n).map(|r| r.iter().sum()).collect();
        let mut oshape = shape[..shape.len() - 1].to_vec();
        if oshape.is_empty() {
            oshape.push(1);
        }
        let needs = self.needs(&[a]);
        self.push("sum_lastdim", oshape, out, Op::SumLast(a), needs)
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a, "reshape")?;
        if numel(shape) != numel(self.shape(a)) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let out = self.value(a).to_vec();
        let needs = self.needs(&[a]);
        self.push("reshape", shape.to_vec(), out, Op::Reshape(a), needs)
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.check(a, "permute")?;
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::shape("permute", format!("axes {axes:?} for shape {shape:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&i| shape[i]).collect();
        let out = permute_data(self.value(a), &shape, axes);
        let needs = self.needs(&[a]);
        self.push("permute", out_shape, out, Op::Permute(a, axes.to_vec()), needs)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat", "no operands"))?;
        self.check(first, "concat")?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            self.check(p, "concat")?;
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} along axis {axis}")));
            }
            lens.push(s[axis]);
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &l) in parts.iter().zip(&lens) {
                let v = self.value(p);
                out.extend_from_slice(&v[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = self.needs(parts);
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                lens,
                outer,
                inner,
            },
            needs,
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(a, "narrow")?;
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("narrow", format!("[{start}, {}) of axis {axis} in {shape:?}", start + len)));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let axis_len = shape[axis];
        let v = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let needs = self.needs(&[a]);
        self.push(
            "narrow",
            oshape,
            out,
            Op::Narrow {
                a,
                outer,
                inner,
                axis_len,
                start,
                len,
            },
            needs,
        )
    }

    /// Gathers rows of `a` viewed as `[rows, last_dim]`.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.check(a, "select_rows")?;
        let shape = self.shape(a).to_vec();
        let c = *shape.last().unwrap();
        let r = numel(&shape) / c;
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(Error::shape("select_rows", format!("rows {rows:?} of {r}")));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let needs = self.needs(&[a]);
        self.push("select_rows", vec![rows.len(), c], out, Op::SelectRows(a, rows.to_vec()), needs)
    }

    /// Stacks `times` copies of `a` along a new leading axis.
    pub fn repeat(&mut self, a: Var, times: usize) -> Result<Var> {
        self.check(a, "repeat")?;
        if times == 0 {
            return Err(Error::shape("repeat", "zero copies"));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(v.len() * times);
        for _ in 0..times {
            out.extend_from_slice(v);
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(a));
        let needs = self.needs(&[a]);
        self.push("repeat", shape, out, Op::Repeat(a, times), needs)
    }

    // ---------------------------------------------------------------- convolution

    /// NHWC convolution: `x[B, H, W, Ci]`, `w[K, K, Ci, Co]`, optional `bias[Co]`.
    /// Output side is `floor((H + 2p - K) / s) + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.check(x, "conv2d")?;
        self.check(w, "conv2d")?;
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sw[1] || sw[2] != sx[3] || stride == 0 {
            return Err(Error::shape("conv2d", format!("input {sx:?}, kernel {sw:?}, stride {stride}")));
        }
        let (b, h, wd, ci) = (sx[0], sx[1], sx[2], sx[3]);
        let (k, co) = (sw[0], sw[3]);
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(Error::shape("conv2d", format!("kernel {k} larger than padded input {h}x{wd}")));
        }
        if let Some(bv) = bias {
            self.check(bv, "conv2d")?;
            if self.shape(bv) != [co] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {co} channels", self.shape(bv))));
            }
        }
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (wd + 2 * padding - k) / stride + 1;
        let win = Window {
            batch: b,
            image_h: h,
            image_w: wd,
            channels: ci,
            grid_h: ho,
            grid_w: wo,
            kernel: k,
            stride,
            padding,
        };
        let rows = win.rows();
        let mut out = vec![0.0; rows * co];
        if k == 1 && stride == 1 && padding == 0 {
            kernels::gemm_nn(rows, ci, co, self.value(x), self.value(w), &mut out);
        } else {
            let cols = kernels::im2col(&win, self.value(x));
            kernels::gemm_nn(rows, win.cols(), co, &cols, self.value(w), &mut out);
        }
        if let Some(bv) = bias {
            let bias_v = self.value(bv);
            for row in out.chunks_mut(co) {
                for (o, bb) in row.iter_mut().zip(bias_v) {
                    *o += bb;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let needs = self.needs(&inputs);
        self.push(
            "conv2d",
            vec![b, ho, wo, co],
            out,
            Op::Conv2d {
                x,
                w,
                bias,
                win,
                out_channels: co,
            },
            needs,
        )
    }

    /// NHWC transposed convolution: `x[B, H, W, Ci]`, `w[Ci, K, K, Co]`.
    /// Output side is `(H - 1)·s - 2p + K`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.check(x, "conv_transpose2d")?;
        self.check(w, "conv_transpose2d")?;
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sw[2] || sw[0] != sx[3] || stride == 0 {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input {sx:?}, kernel {sw:?}, stride {stride}"),
            ));
        }
        let (b, h, wd, ci) = (sx[0], sx[1], sx[2], sx[3]);
        let (k, co) = (sw[1], sw[3]);
        let ho = ((h - 1) * stride + k)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::shape("conv_transpose2d", "padding exceeds output extent"))?;
        let wo = (wd - 1) * stride + k - 2 * padding;
        if let Some(bv) = bias {
            self.check(bv, "conv_transpose2d")?;
            if self.shape(bv) != [co] {
                return Err(Error::shape("conv_transpose2d", format!("bias {:?} for {co} channels", self.shape(bv))));
            }
        }
        let win = Window {
            batch: b,
            image_h: ho,
            image_w: wo,
            channels: co,
            grid_h: h,
            grid_w: wd,
            kernel: k,
            stride,
            padding,
        };
        let mut cols = vec![0.0; win.rows() * win.cols()];
        kernels::gemm_nn(win.rows(), ci, win.cols(), self.value(x), self.value(w), &mut cols);
        let mut out = vec![0.0; b * ho * wo * co];
        kernels::col2im(&win, &cols, &mut out);
        if let Some(bv) = bias {
            let bias_v = self.value(bv);
            for row in out.chunks_mut(co) {
                for (o, bb) in row.iter_mut().zip(bias_v) {
                    *o += bb;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let needs = self.needs(&inputs);
        self.push(
            "conv_transpose2d",
            vec![b, ho, wo, co],
            out,
            Op::ConvTranspose2d {
                x,
                w,
                bias,
                win,
                in_channels: ci,
            },
            needs,
        )
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.index() >= self.nodes.len() {
            return Err(Error::Backward("loss was not recorded on this tape".into()));
        }
        if self.nodes[loss.index()].value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.index()].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.index()].needs_grad {
            return Ok(Gradients { tape: self.id, grads });
        }
        grads[loss.index()] = Some(vec![1.0]);
        for idx in (0..=loss.index()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (input, delta) in self.vjp(node, &g) {
                if self.nodes[input.index()].needs_grad {
                    accumulate(&mut grads[input.index()], delta);
                }
            }
            // Interior gradients are not retained.
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index()].needs_grad
    }

    /// Vector-Jacobian products of one node with respect to each input.
    fn vjp(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let av = self.value(a);
                let bv = self.value(b);
                if self.wants(a) {
                    let mut da = vec![0.0; av.len()];
                    for t in 0..batch {
                        let g_t = &g[t * m * n..(t + 1) * m * n];
                        let b_t = if shared_b { bv } else { &bv[t * k * n..(t + 1) * k * n] };
                        let da_t = &mut da[t * m * k..(t + 1) * m * k];
                        if trans_b {
                            kernels::gemm_nn(m, n, k, g_t, b_t, da_t);
                        } else {
                            kernels::gemm_nt(m, n, k, g_t, b_t, da_t);
                        }
                    }
                    out.push((a, da));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; bv.len()];
                    for t in 0..batch {
                        let g_t = &g[t * m * n..(t + 1) * m * n];
                        let a_t = &av[t * m * k..(t + 1) * m * k];
                        let db_t = if shared_b { &mut db[..] } else { &mut db[t * k * n..(t + 1) * k * n] };
                        if trans_b {
                            kernels::gemm_tn(n, m, k, g_t, a_t, db_t);
                        } else {
                            kernels::gemm_tn(k, m, n, a_t, g_t, db_t);
                        }
                    }
                    out.push((b, db));
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                if self.wants(a) {
                    out.push((a, g.to_vec()));
                }
                if self.wants(b) {
                    let nb = self.value(b).len();
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let mut db = vec![0.0; nb];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % nb] += sign * gv;
                    }
                    out.push((b, db));
                }
            }
            &Op::Mul(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                let nb = bv.len();
                if self.wants(a) {
                    out.push((a, g.iter().enumerate().map(|(i, gv)| gv * bv[i % nb]).collect()));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; nb];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % nb] += gv * av[i];
                    }
                    out.push((b, db));
                }
            }
            &Op::Div(a, b) => {
                let av = self.value(a);
                let bv = self.value(b);
                let nb = bv.len();
                if self.wants(a) {
                    out.push((a, g.iter().enumerate().map(|(i, gv)| gv / bv[i % nb]).collect()));
                }
                if self.wants(b) {
                    let mut db = vec![0.0; nb];
                    for (i, gv) in g.iter().enumerate() {
                        let d = bv[i % nb];
                        db[i % nb] -= gv * av[i] / (d * d);
                    }
                    out.push((b, db));
                }
            }
            &Op::Scale(a, s) => out.push((a, g.iter().map(|v| v * s).collect())),
            &Op::AddScalar(a) | &Op::Reshape(a) => out.push((a, g.to_vec())),
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                out.push((*a, permute_data(g, &node.shape, &inverse)));
            }
            &Op::Softmax(a) => {
                let n = *node.shape.last().unwrap();
                let mut da = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(n).zip(node.value.chunks(n)).zip(da.chunks_mut(n)) {
                    let s = kernels::dot(gr, yr);
                    for i in 0..n {
                        dr[i] = yr[i] * (gr[i] - s);
                    }
                }
                out.push((a, da));
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let n = *node.shape.last().unwrap();
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = &xv[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for i in 0..n {
                        xhat[i] = (xr[i] - mean) * rstd;
                        dxhat[i] = gr[i] * gv[i];
                        dgamma[i] += gr[i] * xhat[i];
                        dbeta[i] += gr[i];
                        mean_d += dxhat[i];
                        mean_dx += dxhat[i] * xhat[i];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    let dr = &mut dx[r * n..(r + 1) * n];
                    for i in 0..n {
                        dr[i] = rstd * (dxhat[i] - mean_d - xhat[i] * mean_dx);
                    }
                }
                if self.wants(*x) {
                    out.push((*x, dx));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if self.wants(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::Gelu(a, deriv) => {
                out.push((*a, g.iter().zip(deriv).map(|(gv, d)| gv * d).collect()));
            }
            &Op::Relu(a) => {
                let av = self.value(a);
                out.push((a, g.iter().zip(av).map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 }).collect()));
            }
            &Op::Sigmoid(a) => {
                out.push((a, g.iter().zip(&node.value).map(|(gv, y)| gv * y * (1.0 - y)).collect()));
            }
            &Op::Softplus(a) => {
                let av = self.value(a);
                out.push((a, g.iter().zip(av).map(|(gv, &x)| gv * sigmoid(x)).collect()));
            }
            Op::Dropout(a, mask) => out.push((*a, g.iter().zip(mask).map(|(gv, m)| gv * m).collect())),
            &Op::Sum(a) => out.push((a, vec![g[0]; self.value(a).len()])),
            &Op::Mean(a) => {
                let n = self.value(a).len();
                out.push((a, vec![g[0] / n as f64; n]));
            }
            &Op::SumLast(a) => {
                let n = *self.shape(a).last().unwrap();
                let mut da = Vec::with_capacity(self.value(a).len());
                for gv in g {
                    da.extend(std::iter::repeat(*gv).take(n));
                }
                out.push((a, da));
            }
            Op::Concat {
                parts,
                lens,
                outer,
                inner,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&p, &l) in parts.iter().zip(lens) {
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(outer * l * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[base..base + l * inner]);
                        }
                        out.push((p, dp));
                    }
                    offset += l;
                }
            }
            &Op::Narrow {
                a,
                outer,
                inner,
                axis_len,
                start,
                len,
            } => {
                let mut da = vec![0.0; outer * axis_len * inner];
                for o in 0..outer {
                    let dst = (o * axis_len + start) * inner;
                    da[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((a, da));
            }
            Op::SelectRows(a, rows) => {
                let c = *node.shape.last().unwrap();
                let mut da = vec![0.0; self.value(*a).len()];
                for (j, &i) in rows.iter().enumerate() {
                    for t in 0..c {
                        da[i * c + t] += g[j * c + t];
                    }
                }
                out.push((*a, da));
            }
            &Op::Repeat(a, times) => {
                let n = self.value(a).len();
                let mut da = vec![0.0; n];
                for t in 0..times {
                    for (d, gv) in da.iter_mut().zip(&g[t * n..(t + 1) * n]) {
                        *d += gv;
                    }
                }
                out.push((a, da));
            }
            &Op::Conv2d {
                x,
                w,
                bias,
                win,
                out_channels: co,
            } => {
                let pointwise = win.kernel == 1 && win.stride == 1 && win.padding == 0;
                let xv = self.value(x);
                let wv = self.value(w);
                let rows = win.rows();
                let kc = win.cols();
                if self.wants(x) {
                    let mut dx = vec![0.0; xv.len()];
                    if pointwise {
                        kernels::gemm_nt(rows, co, kc, g, wv, &mut dx);
                    } else {
                        let mut dcols = vec![0.0; rows * kc];
                        kernels::gemm_nt(rows, co, kc, g, wv, &mut dcols);
                        kernels::col2im(&win, &dcols, &mut dx);
                    }
                    out.push((x, dx));
                }
                if self.wants(w) {
                    let mut dw = vec![0.0; wv.len()];
                    if pointwise {
                        kernels::gemm_tn(kc, rows, co, xv, g, &mut dw);
                    } else {
                        let cols = kernels::im2col(&win, xv);
                        kernels::gemm_tn(kc, rows, co, &cols, g, &mut dw);
                    }
                    out.push((w, dw));
                }
                if let Some(bv) = bias.filter(|&bv| self.wants(bv)) {
                    out.push((bv, channel_sums(g, co)));
                }
            }
            &Op::ConvTranspose2d {
                x,
                w,
                bias,
                win,
                in_channels: ci,
            } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let rows = win.rows();
                let kc = win.cols();
                let dcols = kernels::im2col(&win, g);
                if self.wants(x) {
                    let mut dx = vec![0.0; xv.len()];
                    kernels::gemm_nt(rows, kc, ci, &dcols, wv, &mut dx);
                    out.push((x, dx));
                }
                if self.wants(w) {
                    let mut dw = vec![0.0; wv.len()];
                    kernels::gemm_tn(ci, rows, kc, xv, &dcols, &mut dw);
                    out.push((w, dw));
                }
                if let Some(bv) = bias.filter(|&bv| self.wants(bv)) {
                    out.push((bv, channel_sums(g, win.channels)));
                }
            }
        }
        out
    }
}

fn channel_sums(g: &[f64], c: usize) -> Vec<f64> {
    let mut s = vec![0.0; c];
    for row in g.chunks(c) {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    s
}

fn permute_data(src: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        return src.to_vec();
    }
    // Innermost axis copied in a tight loop.
    let last = rank - 1;
    let inner_len = out_shape[last];
    let inner_stride = out_strides[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < n {
        for t in 0..inner_len {
            out.push(src[base + t * inner_stride]);
        }
        // advance the outer counter
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += out_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= out_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

