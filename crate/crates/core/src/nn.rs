//! Parameter initialisation and the few layers every model shares.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{ParamStore, Tape, Tensor, Var};

pub(crate) fn init_linear<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<()> {
    let std = (1.0 / fan_in as f64).sqrt();
    store.insert(format!("{name}.weight"), Tensor::randn(&[fan_in, fan_out], std, rng))?;
    store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]))
}

/// `x[..., in] · W[in, out] + b`
pub(crate) fn linear(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.weight"))?;
    let b = tape.param(store, &format!("{name}.bias"))?;
    let shape = tape.shape(x).to_vec();
    let y = if shape.len() == 1 {
        let x2 = tape.reshape(x, &[1, shape[0]])?;
        let y = tape.matmul(x2, w)?;
        let n = tape.shape(y)[1];
        tape.reshape(y, &[n])?
    } else {
        tape.matmul(x, w)?
    };
    tape.add(y, b)
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) -> Result<()> {
    store.insert(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?;
    store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]))
}

pub(crate) fn layer_norm(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &format!("{name}.gamma"))?;
    let b = tape.param(store, &format!("{name}.beta"))?;
    tape.layer_norm(x, g, b)
}

/// Conv weight `[k, k, ci, co]` with fan-in scaled Gaussian init.
pub(crate) fn init_conv<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    kernel: usize,
    ci: usize,
    co: usize,
    bias: bool,
    rng: &mut R,
) -> Result<()> {
    let fan_in = kernel * kernel * ci;
    let std = (2.0 / fan_in as f64).sqrt();
    store.insert(format!("{name}.weight"), Tensor::randn(&[kernel, kernel, ci, co], std, rng))?;
    if bias {
        store.insert(format!("{name}.bias"), Tensor::zeros(&[co]))?;
    }
    Ok(())
}

pub(crate) fn conv(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.weight"))?;
    let bias_name = format!("{name}.bias");
    let b = match store.get(&bias_name) {
        Some(_) => Some(tape.param(store, &bias_name)?),
        None => None,
    };
    tape.conv2d(x, w, b, stride, padding)
}

/// Transposed-conv weight `[ci, k, k, co]`.
pub(crate) fn init_conv_transpose<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    kernel: usize,
    ci: usize,
    co: usize,
    rng: &mut R,
) -> Result<()> {
    let std = (1.0 / ci as f64).sqrt();
    store.insert(format!("{name}.weight"), Tensor::randn(&[ci, kernel, kernel, co], std, rng))?;
    store.insert(format!("{name}.bias"), Tensor::zeros(&[co]))
}

pub(crate) fn conv_transpose(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = tape.param(store, &format!("{name}.weight"))?;
    let b = tape.param(store, &format!("{name}.bias"))?;
    tape.conv_transpose2d(x, w, Some(b), stride, 0)
}

pub(crate) fn init_attention<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<()> {
    for p in ["q", "k", "v", "out"] {
        init_linear(store, &format!("{name}.{p}"), dim, dim, rng)?;
    }
    Ok(())
}

/// Multi-head attention. `q_in` is `[B, Nq, C]`; `k_in`, `v_in` are `[B, Nk, C]`.
pub(crate) fn attention(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    heads: usize,
) -> Result<Var> {
    let q = linear(tape, store, &format!("{name}.q"), q_in)?;
    let k = linear(tape, store, &format!("{name}.k"), k_in)?;
    let v = linear(tape, store, &format!("{name}.v"), v_in)?;
    let o = scaled_dot_product(tape, q, k, v, heads)?;
    linear(tape, store, &format!("{name}.out"), o)
}

/// Splits `[B, N, C]` into heads, attends, and merges back to `[B, Nq, C]`.
pub(crate) fn scaled_dot_product(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let qs = tape.shape(q).to_vec();
    let ks = tape.shape(k).to_vec();
    let (b, nq, c) = (qs[0], qs[1], qs[2]);
    let nk = ks[1];
    let d = c / heads;
    let split = |tape: &mut Tape, x: Var, n: usize| -> Result<Var> {
        if heads == 1 {
            return Ok(x);
        }
        let x = tape.reshape(x, &[b, n, heads, d])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * heads, n, d])
    };
    let qh = split(tape, q, nq)?;
    let kh = split(tape, k, nk)?;
    let vh = split(tape, v, nk)?;
    let scores = tape.matmul_nt(qh, kh)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let attn = tape.softmax_lastdim(scores)?;
    let o = tape.matmul(attn, vh)?;
    if heads == 1 {
        return Ok(o);
    }
    let o = tape.reshape(o, &[b, heads, nq, d])?;
    let o = tape.permute(o, &[0, 2, 1, 3])?;
    tape.reshape(o, &[b, nq, c])
}
