//! Single-object anchor-free box detector.
//!
//! A strided conv backbone maps the image to a `D × D` grid. Each cell
//! predicts an objectness logit and four distances (left, top, right,
//! bottom) from its centre to the box edges. Inference keeps the argmax cell.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{fit_loop, mean_eval_loss, FitReport};
use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::nn;
use crate::numerics::{sigmoid, softplus, ParamStore, Tape, Var};
use crate::prompt::BoxPrompt;
use crate::synth::Sample;
use crate::util::{image_batch, FitOptions};

const PREFIX: &str = "detector";
/// Keeps decoded extents strictly positive.
const MIN_EXTENT: f64 = 1e-3;
const IOU_WEIGHT: f64 = 1.0;
/// Prior probability for the objectness bias at init.
const PRIOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub channels: [usize; 4],
    /// Extra 3×3 stride-1 convs on the final grid, widening the receptive field.
    pub context_convs: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input_size: 128,
            channels: [8, 16, 32, 64],
            context_convs: 3,
        }
    }
}

impl DetectorConfig {
    pub fn grid_side(&self) -> usize {
        self.input_size / 16
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(Error::Config(format!("detector input {} not a multiple of 16", self.input_size)));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("detector channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BoxPrompt,
    pub objectness: f64,
}

#[derive(Clone, Debug)]
pub struct Detector {
    config: DetectorConfig,
}

/// Grid cell holding the box centre; coordinates are clamped below 1 so the
/// last cell absorbs centres on the far edge.
pub fn target_cell(b: &BoxPrompt, side: usize) -> (usize, usize) {
    let cell = |v: f64| ((v.clamp(0.0, 1.0 - 1e-9) * side as f64).floor() as usize).min(side - 1);
    let (cx, cy) = ((b.x0 + b.x1) / 2.0, (b.y0 + b.y1) / 2.0);
    (cell(cy), cell(cx))
}

/// Decodes raw `(l, t, r, b)` regression values at `(row, col)` into a clamped box.
pub fn decode_box(raw: [f64; 4], row: usize, col: usize, side: usize) -> Result<BoxPrompt> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("detector regression"));
    }
    let d = side as f64;
    let (cx, cy) = ((col as f64 + 0.5) / d, (row as f64 + 0.5) / d);
    let e = raw.map(|v| (softplus(v) + MIN_EXTENT) / d);
    BoxPrompt::new(
        (cx - e[0]).clamp(0.0, 1.0),
        (cy - e[1]).clamp(0.0, 1.0),
        (cx + e[2]).clamp(0.0, 1.0),
        (cy + e[3]).clamp(0.0, 1.0),
    )
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Detector { config })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let mut ci = 3;
        for (i, &co) in self.config.channels.iter().enumerate() {
            nn::init_conv(store, &format!("{PREFIX}.stage{i}"), 3, ci, co, true, rng)?;
            ci = co;
        }
        for i in 0..self.config.context_convs {
            nn::init_conv(store, &format!("{PREFIX}.context{i}"), 3, ci, ci, true, rng)?;
        }
        nn::init_conv(store, &format!("{PREFIX}.objectness"), 1, ci, 1, true, rng)?;
        let bias = -((1.0 - PRIOR) / PRIOR).ln();
        store.get_mut(&format!("{PREFIX}.objectness.bias")).unwrap().data_mut()[0] = bias;
        nn::init_conv(store, &format!("{PREFIX}.regression"), 1, ci, 4, true, rng)?;
        Ok(())
    }

    /// `[B, S, S, 3]` → objectness logits `[B, D, D, 1]` and raw regression `[B, D, D, 4]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, images: Var) -> Result<(Var, Var)> {
        let s = tape.shape(images);
        let n = self.config.input_size;
        if s.len() != 4 || s[1] != n || s[2] != n || s[3] != 3 {
            return Err(Error::shape("detector", format!("expected [B, {n}, {n}, 3], got {s:?}")));
        }
        let mut h = images;
        for i in 0..4 {
            h = nn::conv(tape, store, &format!("{PREFIX}.stage{i}"), h, 2, 1)?;
            h = tape.relu(h)?;
        }
        for i in 0..self.config.context_convs {
            h = nn::conv(tape, store, &format!("{PREFIX}.context{i}"), h, 1, 1)?;
            h = tape.relu(h)?;
        }
        let obj = nn::conv(tape, store, &format!("{PREFIX}.objectness"), h, 1, 0)?;
        let reg = nn::conv(tape, store, &format!("{PREFIX}.regression"), h, 1, 0)?;
        Ok((obj, reg))
    }

    pub fn detect(&self, store: &ParamStore, image: &RgbImage) -> Result<Detection> {
        Ok(self.detect_batch(store, &[image])?[0])
    }

    pub fn detect_batch(&self, store: &ParamStore, images: &[&RgbImage]) -> Result<Vec<Detection>> {
        let d = self.config.grid_side();
        let mut tape = Tape::new(false, 0);
        let x = tape.leaf(&image_batch(images, self.config.input_size)?);
        let (obj, reg) = self.forward(&mut tape, store, x)?;
        let (obj, reg) = (tape.value(obj), tape.value(reg));
        let mut out = Vec::with_capacity(images.len());
        for b in 0..images.len() {
            let scores = &obj[b * d * d..(b + 1) * d * d];
            if scores.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("detector objectness"));
            }
            // First maximum wins on ties.
            let mut best = 0;
            for (i, &v) in scores.iter().enumerate() {
                if v > scores[best] {
                    best = i;
                }
            }
            let o = (b * d * d + best) * 4;
            let raw = [reg[o], reg[o + 1], reg[o + 2], reg[o + 3]];
            out.push(Detection {
                bbox: decode_box(raw, best / d, best % d, d)?,
                objectness: sigmoid(scores[best]),
            });
        }
        Ok(out)
    }

    /// Objectness BCE summed over the grid and averaged over the batch, plus
    /// `1 − IoU` of the box decoded at each positive cell.
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, images: Var, boxes: &[BoxPrompt]) -> Result<Var> {
        let d = self.config.grid_side();
        let b = boxes.len();
        let (obj, reg) = self.forward(tape, store, images)?;
        if tape.shape(obj)[0] != b {
            return Err(Error::shape("detector loss", format!("{} images, {b} boxes", tape.shape(obj)[0])));
        }
        let cells: Vec<(usize, usize)> = boxes.iter().map(|bx| target_cell(bx, d)).collect();
        let mut target = vec![0.0; b * d * d];
        let mut rows = Vec::with_capacity(b);
        for (i, &(r, c)) in cells.iter().enumerate() {
            target[i * d * d + r * d + c] = 1.0;
            rows.push(i * d * d + r * d + c);
        }
        let y = tape.constant(tape.shape(obj).to_vec().as_slice(), target)?;
        let sp = tape.softplus(obj)?;
        let yz = tape.mul(obj, y)?;
        let bce = tape.sub(sp, yz)?;
        let bce = tape.sum(bce)?;
        let bce = tape.scale(bce, 1.0 / b as f64)?;

        // Extents at the positive cells, [B, 4], in normalised units.
        let raw = tape.select_rows(reg, &rows)?;
        let ext = tape.softplus(raw)?;
        let ext = tape.add_scalar(ext, MIN_EXTENT)?;
        let ext = tape.scale(ext, 1.0 / d as f64)?;
        let col = |tape: &mut Tape, j: usize| tape.narrow(ext, 1, j, 1);
        let (l, t, r, btm) = (col(tape, 0)?, col(tape, 1)?, col(tape, 2)?, col(tape, 3)?);
        let cx: Vec<f64> = cells.iter().map(|&(_, c)| (c as f64 + 0.5) / d as f64).collect();
        let cy: Vec<f64> = cells.iter().map(|&(r, _)| (r as f64 + 0.5) / d as f64).collect();
        let gt = |f: fn(&BoxPrompt) -> f64| -> Vec<f64> { boxes.iter().map(f).collect() };
        let k = |tape: &mut Tape, v: Vec<f64>| tape.constant(&[b, 1], v);
        // Overlap along one axis: min(c + hi, g1) − max(c − lo, g0), floored at 0.
        let overlap = |tape: &mut Tape, c: &[f64], lo: Var, hi: Var, g0: Vec<f64>, g1: Vec<f64>| -> Result<Var> {
            let cv = k(tape, c.to_vec())?;
            let lo_edge = tape.sub(cv, lo)?;
            let hi_edge = tape.add(cv, hi)?;
            let g0 = k(tape, g0)?;
            let g1 = k(tape, g1)?;
            // min(a, b) = a − relu(a − b); max(a, b) = a + relu(b − a)
            let d1 = tape.sub(hi_edge, g1)?;
            let d1 = tape.relu(d1)?;
            let right = tape.sub(hi_edge, d1)?;
            let d0 = tape.sub(g0, lo_edge)?;
            let d0 = tape.relu(d0)?;
            let left = tape.add(lo_edge, d0)?;
            let w = tape.sub(right, left)?;
            tape.relu(w)
        };
        let iw = overlap(tape, &cx, l, r, gt(|b| b.x0), gt(|b| b.x1))?;
        let ih = overlap(tape, &cy, t, btm, gt(|b| b.y0), gt(|b| b.y1))?;
        let inter = tape.mul(iw, ih)?;
        let pw = tape.add(l, r)?;
        let ph = tape.add(t, btm)?;
        let pa = tape.mul(pw, ph)?;
        let ga = k(tape, gt(|b| b.area()))?;
        let union = tape.add(pa, ga)?;
        let union = tape.sub(union, inter)?;
        let iou = tape.div(inter, union)?;
        let miou = tape.mean(iou)?;
        let iou_loss = tape.scale(miou, -IOU_WEIGHT)?;
        let iou_loss = tape.add_scalar(iou_loss, IOU_WEIGHT)?;
        tape.add(bce, iou_loss)
    }

    fn batch_loss(&self, tape: &mut Tape, store: &ParamStore, samples: &[Sample]) -> Result<Var> {
        let images: Vec<&RgbImage> = samples.iter().map(|s| &s.image).collect();
        let x = tape.leaf(&image_batch(&images, self.config.input_size)?);
        let boxes: Vec<BoxPrompt> = samples.iter().map(|s| s.bbox).collect();
        self.loss(tape, store, x, &boxes)
    }

    /// Mean loss over `samples` in eval mode.
    pub fn evaluate(&self, store: &ParamStore, samples: &[Sample], batch: usize) -> Result<f64> {
        mean_eval_loss(samples, batch, |t, b| self.batch_loss(t, store, b))
    }

    /// Trains from a fresh initialisation and returns the parameters with the
    /// lowest validation loss.
    pub fn fit(&self, train: &[Sample], val: &[Sample], opts: &FitOptions, augmentation: bool) -> Result<(ParamStore, FitReport)> {
        if train.is_empty() {
            return Err(Error::Data("detector training set is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut store = ParamStore::new();
        self.init_params(&mut store, &mut rng)?;
        fit_loop(store, train, val, opts, augmentation, &mut rng, "detector", |t, s, b| {
            self.batch_loss(t, s, b)
        })
    }
}

/// Parameters of a fresh detector, for callers that only need shapes.
pub fn detector_params(config: &DetectorConfig, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    Detector::new(config.clone())?.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(store)
}
