//! Training-time augmentation shared by the base model and the detector.
//!
//! Domain A has one capture setup, so every model trained on it sees the
//! same dark backdrop. Random backdrops, colour shifts and tiled multi-object
//! images stand in for the varied data a generic model is pretrained on.
//! None of this looks at domains B or C.

use rand::Rng;

use crate::generator::box_from_mask;
use crate::image::{Mask, RgbImage};
use crate::synth::Sample;

const MAX_SHIFT: f64 = 0.2;
const P_BACKGROUND: f64 = 0.5;
const JITTER_GAIN: f64 = 0.2;
const JITTER_BIAS: f64 = 20.0;
const FIELD_CELLS: usize = 4;
const BACKGROUND_SHAPES: (usize, usize) = (2, 10);
const BACKGROUND_NOISE: f64 = 8.0;
const PASTE_SCALE: (f64, f64) = (0.35, 0.7);

/// Translation, then a random backdrop half of the time, then colour jitter.
pub fn augment<R: Rng>(s: &Sample, rng: &mut R) -> Sample {
    let mut out = shift(s, rng);
    if rng.gen_bool(P_BACKGROUND) {
        randomize_background(&mut out, rng);
    }
    color_jitter(&mut out, rng);
    out
}

/// Random translation of up to a fifth of the side (edge-replicated image,
/// zero-filled mask). Keeps the original when the shift would drop more than
/// half the foreground.
pub fn shift<R: Rng>(s: &Sample, rng: &mut R) -> Sample {
    let (w, h) = (s.image.width, s.image.height);
    let max_dx = (w as f64 * MAX_SHIFT) as i64;
    let max_dy = (h as f64 * MAX_SHIFT) as i64;
    let dx = rng.gen_range(-max_dx..=max_dx);
    let dy = rng.gen_range(-max_dy..=max_dy);
    let mut mask = Mask::zeros(w, h);
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let (sr, sc) = (r - dy, c - dx);
            if sr >= 0 && sc >= 0 && sr < h as i64 && sc < w as i64 {
                mask.data[(r * w as i64 + c) as usize] = s.mask.data[(sr * w as i64 + sc) as usize];
            }
        }
    }
    if mask.count() * 2 < s.mask.count() {
        return s.clone();
    }
    let mut data = Vec::with_capacity(s.image.data.len());
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let sr = (r - dy).clamp(0, h as i64 - 1) as usize;
            let sc = (c - dx).clamp(0, w as i64 - 1) as usize;
            data.extend(s.image.pixel(sr, sc));
        }
    }
    let image = RgbImage { width: w, height: h, data };
    let bbox = box_from_mask(&mask).expect("shifted mask keeps foreground");
    Sample { image, mask, bbox }
}

/// Replaces every background pixel with a smooth random colour field, a
/// few flat rectangles and ellipses, and pixel noise.
pub fn randomize_background<R: Rng>(s: &mut Sample, rng: &mut R) {
    let (w, h) = (s.image.width, s.image.height);
    let cells: Vec<[f64; 3]> = (0..(FIELD_CELLS + 1) * (FIELD_CELLS + 1))
        .map(|_| std::array::from_fn(|_| rng.gen_range(0.0..255.0)))
        .collect();
    let mut bg = vec![0.0; w * h * 3];
    for r in 0..h {
        let fy = r as f64 / h as f64 * FIELD_CELLS as f64;
        let (y0, ty) = (fy as usize, fy.fract());
        for c in 0..w {
            let fx = c as f64 / w as f64 * FIELD_CELLS as f64;
            let (x0, tx) = (fx as usize, fx.fract());
            let at = |y: usize, x: usize| cells[y * (FIELD_CELLS + 1) + x];
            for ch in 0..3 {
                let top = at(y0, x0)[ch] * (1.0 - tx) + at(y0, x0 + 1)[ch] * tx;
                let bot = at(y0 + 1, x0)[ch] * (1.0 - tx) + at(y0 + 1, x0 + 1)[ch] * tx;
                bg[(r * w + c) * 3 + ch] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    for _ in 0..rng.gen_range(BACKGROUND_SHAPES.0..=BACKGROUND_SHAPES.1) {
        let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..255.0));
        let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let (ax, ay) = (rng.gen_range(0.03..0.25) * w as f64, rng.gen_range(0.03..0.25) * h as f64);
        let ellipse = rng.gen_bool(0.5);
        let (r0, r1) = ((cy - ay).max(0.0) as usize, ((cy + ay) as usize).min(h - 1));
        let (c0, c1) = ((cx - ax).max(0.0) as usize, ((cx + ax) as usize).min(w - 1));
        for r in r0..=r1 {
            for c in c0..=c1 {
                let (dx, dy) = ((c as f64 + 0.5 - cx) / ax, (r as f64 + 0.5 - cy) / ay);
                if !ellipse || dx * dx + dy * dy <= 1.0 {
                    bg[(r * w + c) * 3..(r * w + c) * 3 + 3].copy_from_slice(&color);
                }
            }
        }
    }
    for (i, &m) in s.mask.data.iter().enumerate() {
        if m == 0 {
            for ch in 0..3 {
                let v = bg[i * 3 + ch] + rng.gen_range(-1.0..=1.0) * BACKGROUND_NOISE;
                s.image.data[i * 3 + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
}

/// Per-channel gain and offset.
pub fn color_jitter<R: Rng>(s: &mut Sample, rng: &mut R) {
    let gain: [f64; 3] = std::array::from_fn(|_| rng.gen_range(1.0 - JITTER_GAIN..=1.0 + JITTER_GAIN));
    let bias: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-JITTER_BIAS..=JITTER_BIAS));
    for (i, v) in s.image.data.iter_mut().enumerate() {
        let c = i % 3;
        *v = (*v as f64 * gain[c] + bias[c]).round().clamp(0.0, 255.0) as u8;
    }
}

/// Four half-size samples tiled 2×2 with `target` in a random slot. Only the
/// target tile is labelled, so an image-only model cannot tell which object
/// is wanted; the prompt has to.
pub fn mosaic<R: Rng>(target: &Sample, others: [&Sample; 3], rng: &mut R) -> Sample {
    let n = target.image.width;
    if n % 2 != 0 || target.image.height != n || others.iter().any(|o| o.image.width != n || o.image.height != n) {
        return target.clone();
    }
    let h = n / 2;
    let slot = rng.gen_range(0..4);
    let mut image = RgbImage::filled(n, n, [0, 0, 0]);
    let mut mask = Mask::zeros(n, n);
    let mut rest = others.into_iter();
    for t in 0..4 {
        let src = if t == slot { target } else { rest.next().unwrap() };
        let img = src.image.resize_bilinear(h, h);
        let (r0, c0) = ((t / 2) * h, (t % 2) * h);
        for r in 0..h {
            let dst = ((r0 + r) * n + c0) * 3;
            image.data[dst..dst + h * 3].copy_from_slice(&img.data[r * h * 3..(r + 1) * h * 3]);
        }
        if t == slot {
            let m = src.mask.resize_nearest(h, h);
            for r in 0..h {
                let dst = (r0 + r) * n + c0;
                mask.data[dst..dst + h].copy_from_slice(&m.data[r * h..(r + 1) * h]);
            }
        }
    }
    Sample::new(image, mask).unwrap_or_else(|_| target.clone())
}

/// Pastes the foreground of each of `others`, shrunk and placed at random,
/// over background pixels of `target`. Labels stay the target's, so the
/// copies act as unlabelled look-alikes.
pub fn paste_distractors<R: Rng>(target: &Sample, others: &[&Sample], rng: &mut R) -> Sample {
    let mut out = target.clone();
    let (w, h) = (out.image.width, out.image.height);
    for o in others {
        let scale = rng.gen_range(PASTE_SCALE.0..PASTE_SCALE.1);
        let (pw, ph) = (((w as f64 * scale) as usize).max(1), ((h as f64 * scale) as usize).max(1));
        let img = o.image.resize_bilinear(pw, ph);
        let m = o.mask.resize_nearest(pw, ph);
        let (r0, c0) = (rng.gen_range(0..=h - ph), rng.gen_range(0..=w - pw));
        for r in 0..ph {
            for c in 0..pw {
                let dst = (r0 + r) * w + c0 + c;
                if m.data[r * pw + c] != 0 && out.mask.data[dst] == 0 {
                    out.image.data[dst * 3..dst * 3 + 3].copy_from_slice(&img.data[(r * pw + c) * 3..(r * pw + c) * 3 + 3]);
                }
            }
        }
    }
    out
}
