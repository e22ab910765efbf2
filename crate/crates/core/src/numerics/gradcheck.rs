use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// `f` receives a fresh tape and the leaf for `x`, and returns a scalar
/// variable. Returns the largest per-component relative error
/// `|g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_at(f, x, eps, &all)
}

/// As [`finite_diff_check`], restricted to the listed components of `x`.
pub fn finite_diff_check_at<F>(f: F, x: &Tensor, eps: f64, components: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let leaf = x.clone().with_grad();
    let mut tape = Tape::new(false, 0);
    let xv = tape.leaf(&leaf);
    let loss = f(&mut tape, xv)?;
    let value = tape.scalar(loss)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("finite_diff_check"));
    }
    let grads = tape.backward(loss)?;
    let zeros = vec![0.0; x.numel()];
    let analytic = grads.get(xv).unwrap_or(&zeros);

    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new(false, 0);
        let v = tape.leaf(t);
        let out = f(&mut tape, v)?;
        let y = tape.scalar(out)?;
        if !y.is_finite() {
            return Err(Error::NonFinite("finite_diff_check"));
        }
        Ok(y)
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for &i in components {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let ga = analytic[i];
        let rel = (ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
