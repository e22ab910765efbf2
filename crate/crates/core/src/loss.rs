//! Mask losses and ground-truth resampling to logit resolution.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

const DICE_SMOOTH: f64 = 1.0;

/// Mean BCE on logits, `softplus(z) − y·z`, against a flat target of the same size.
pub fn bce_with_logits(tape: &mut Tape, logits: Var, target: &[f64]) -> Result<Var> {
    let y = target_var(tape, logits, target, "bce_with_logits")?;
    let sp = tape.softplus(logits)?;
    let yz = tape.mul(logits, y)?;
    let l = tape.sub(sp, yz)?;
    tape.mean(l)
}

/// Soft Dice loss averaged over the batch: `1 − (2Σpy + s) / (Σp + Σy + s)`.
pub fn dice_loss(tape: &mut Tape, logits: Var, target: &[f64]) -> Result<Var> {
    let y = target_var(tape, logits, target, "dice_loss")?;
    let shape = tape.shape(logits).to_vec();
    let b = if shape.len() >= 3 { shape[0] } else { 1 };
    let per = target.len() / b;
    let p = tape.sigmoid(logits)?;
    let py = tape.mul(p, y)?;
    let py = tape.reshape(py, &[b, per])?;
    let inter = tape.sum_lastdim(py)?;
    let p = tape.reshape(p, &[b, per])?;
    let psum = tape.sum_lastdim(p)?;
    let ysum: Vec<f64> = target.chunks(per).map(|c| c.iter().sum::<f64>() + DICE_SMOOTH).collect();
    let ysum = tape.constant(&[b], ysum)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, DICE_SMOOTH)?;
    let den = tape.add(psum, ysum)?;
    let ratio = tape.div(num, den)?;
    let m = tape.mean(ratio)?;
    let neg = tape.scale(m, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// BCE + Dice with equal weight.
pub fn mask_loss(tape: &mut Tape, logits: Var, target: &[f64]) -> Result<Var> {
    let bce = bce_with_logits(tape, logits, target)?;
    let dice = dice_loss(tape, logits, target)?;
    tape.add(bce, dice)
}

fn target_var(tape: &mut Tape, logits: Var, target: &[f64], op: &'static str) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.iter().product::<usize>() != target.len() {
        return Err(Error::shape(op, format!("target of {} values for logits {shape:?}", target.len())));
    }
    tape.constant(&shape, target.to_vec())
}

/// Area-averages a `size × size` binary mask down to `side × side` and
/// re-binarises at 0.5.
pub fn downsample_mask(mask: &[u8], size: usize, side: usize) -> Result<Vec<f64>> {
    if mask.len() != size * size || side == 0 || size % side != 0 {
        return Err(Error::shape("downsample_mask", format!("{} values, {size} → {side}", mask.len())));
    }
    let f = size / side;
    let mut out = vec![0.0; side * side];
    for r in 0..size {
        for c in 0..size {
            if mask[r * size + c] != 0 {
                out[(r / f) * side + c / f] += 1.0;
            }
        }
    }
    let half = (f * f) as f64 / 2.0;
    Ok(out.into_iter().map(|v| if v >= half { 1.0 } else { 0.0 }).collect())
}
