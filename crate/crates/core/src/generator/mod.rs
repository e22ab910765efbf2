//! Prompt construction: ground-truth boxes and points for the evaluation
//! arms, and the two learned box generators (an anchor-free detector and a
//! segmentation-derived baseline).

mod detector;
mod segmenter;

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;

pub use detector::{decode_box, detector_params, target_cell, Detection, Detector, DetectorConfig};
pub use segmenter::{segmenter_params, Segmenter, SegmenterConfig};

use crate::augment::augment;
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::numerics::{adam_step, AdamState, ParamStore, Tape, Var};
use crate::prompt::{BoxPrompt, PointLabel, PointPrompt};
use crate::synth::Sample;
use crate::util::FitOptions;

/// Where an experiment arm's prompts come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GeneratorKind {
    GtBox,
    GtPoints(usize),
    DetectorBox,
    SegmenterBox,
    None,
}

impl GeneratorKind {
    pub fn needs_gt(self) -> bool {
        matches!(self, GeneratorKind::GtBox | GeneratorKind::GtPoints(_))
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeneratorKind::GtBox => f.write_str("gt_box"),
            GeneratorKind::GtPoints(k) => write!(f, "gt_points_{k}"),
            GeneratorKind::DetectorBox => f.write_str("detector_box"),
            GeneratorKind::SegmenterBox => f.write_str("segmenter_box"),
            GeneratorKind::None => f.write_str("none"),
        }
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gt_box" => GeneratorKind::GtBox,
            "detector_box" => GeneratorKind::DetectorBox,
            "segmenter_box" => GeneratorKind::SegmenterBox,
            "none" => GeneratorKind::None,
            _ => {
                let k = s
                    .strip_prefix("gt_points_")
                    .and_then(|k| k.parse().ok())
                    .filter(|&k| k > 0)
                    .ok_or_else(|| Error::Config(format!("unknown generator `{s}`")))?;
                GeneratorKind::GtPoints(k)
            }
        })
    }
}

/// Tight normalised bounding box of the foreground.
pub fn box_from_mask(mask: &Mask) -> Result<BoxPrompt> {
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                rmin = rmin.min(r);
                rmax = rmax.max(r);
                cmin = cmin.min(c);
                cmax = cmax.max(c);
            }
        }
    }
    if rmin == usize::MAX {
        return Err(Error::EmptyMask);
    }
    let (w, h) = (mask.width as f64, mask.height as f64);
    BoxPrompt::new(
        cmin as f64 / w,
        rmin as f64 / h,
        (cmax + 1) as f64 / w,
        (rmax + 1) as f64 / h,
    )
}

/// `k` distinct foreground pixel centres, drawn uniformly without replacement.
pub fn sample_points<R: Rng>(mask: &Mask, k: usize, rng: &mut R) -> Result<Vec<PointPrompt>> {
    let fg: Vec<usize> = (0..mask.data.len()).filter(|&i| mask.data[i] != 0).collect();
    if fg.len() < k {
        return Err(Error::Data(format!("cannot sample {k} points from {} foreground pixels", fg.len())));
    }
    sample(rng, fg.len(), k)
        .into_iter()
        .map(|i| {
            let p = fg[i];
            let (r, c) = (p / mask.width, p % mask.width);
            PointPrompt::new(
                (c as f64 + 0.5) / mask.width as f64,
                (r as f64 + 0.5) / mask.height as f64,
                PointLabel::Foreground,
            )
        })
        .collect()
}

/// Largest random shift, as a fraction of the image side.
#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

/// Mean of per-batch losses weighted by batch size, evaluated without dropout.
pub(crate) fn mean_eval_loss(
    samples: &[Sample],
    batch: usize,
    mut loss: impl FnMut(&mut Tape, &[Sample]) -> Result<Var>,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(batch.max(1)) {
        let mut tape = Tape::new(false, 0);
        let l = loss(&mut tape, chunk)?;
        total += tape.scalar(l)? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Adam over shuffled mini-batches; keeps the parameters with the lowest
/// validation loss (training loss when `val` is empty).
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit_loop<R: Rng>(
    mut store: ParamStore,
    train: &[Sample],
    val: &[Sample],
    opts: &FitOptions,
    augmentation: bool,
    rng: &mut R,
    what: &str,
    loss: impl Fn(&mut Tape, &ParamStore, &[Sample]) -> Result<Var>,
) -> Result<(ParamStore, FitReport)> {
    opts.validate()?;
    let mut adam = AdamState::new(&store);
    let mut best = (f64::INFINITY, store.clone(), 0);
    let mut report = FitReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..opts.epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| if augmentation { augment(&train[i], rng) } else { train[i].clone() })
                .collect();
            let mut tape = Tape::new(true, rng.gen());
            let l = loss(&mut tape, &store, &batch)?;
            let lv = tape.scalar(l)?;
            if !lv.is_finite() {
                return Err(Error::Divergence(format!("{what} loss {lv} at epoch {epoch}")));
            }
            sum += lv * chunk.len() as f64;
            let grads = tape.backward(l)?;
            store.accumulate(&tape, &grads);
            adam_step(&mut store, &mut adam, opts.lr)?;
        }
        let train_loss = sum / train.len() as f64;
        report.train_loss.push(train_loss);
        let v = if val.is_empty() {
            train_loss
        } else {
            mean_eval_loss(val, opts.batch_size, |t, b| loss(t, &store, b))?
        };
        report.val_loss.push(v);
        if v < best.0 {
            best = (v, store.clone(), epoch);
        }
    }
    report.best_epoch = best.2;
    Ok((best.1, report))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn mask(side: usize, on: &[(usize, usize)]) -> Mask {
        let mut m = Mask::zeros(side, side);
        for &(r, c) in on {
            m.data[r * side + c] = 1;
        }
        m
    }

    #[test]
    fn box_conventions() {
        let m = mask(4, &[(1, 0), (1, 1), (2, 0), (2, 1)]);
        assert_eq!(box_from_mask(&m).unwrap(), BoxPrompt::new(0.0, 0.25, 0.5, 0.75).unwrap());
        let full = Mask::new(4, 4, vec![1; 16]).unwrap();
        assert_eq!(box_from_mask(&full).unwrap(), BoxPrompt::full());
        let single = mask(4, &[(0, 3)]);
        assert_eq!(box_from_mask(&single).unwrap(), BoxPrompt::new(0.75, 0.0, 1.0, 0.25).unwrap());
        assert!(matches!(box_from_mask(&Mask::zeros(4, 4)), Err(Error::EmptyMask)));
    }

    #[test]
    fn points_exhaust_and_repeat() {
        let m = mask(4, &[(0, 1), (2, 3), (3, 3)]);
        let mut pts = sample_points(&m, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        pts.sort_by(|a, b| (a.y, a.x).partial_cmp(&(b.y, b.x)).unwrap());
        let want = [(1.5, 0.5), (3.5, 2.5), (3.5, 3.5)];
        for (p, (x, y)) in pts.iter().zip(want) {
            assert_eq!((p.x * 4.0, p.y * 4.0), (x, y));
            assert_eq!(p.label, PointLabel::Foreground);
        }
        let a = sample_points(&m, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_points(&m, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(sample_points(&m, 4, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn generator_names_round_trip() {
        for g in [
            GeneratorKind::GtBox,
            GeneratorKind::GtPoints(5),
            GeneratorKind::DetectorBox,
            GeneratorKind::SegmenterBox,
            GeneratorKind::None,
        ] {
            assert_eq!(g.to_string().parse::<GeneratorKind>().unwrap(), g);
        }
        assert!("gt_points_0".parse::<GeneratorKind>().is_err());
        assert!("yolo".parse::<GeneratorKind>().is_err());
    }

    proptest! {
        #[test]
        fn sampled_points_are_foreground(bits in proptest::collection::vec(0u8..2, 64), seed in any::<u64>(), k in 1usize..6) {
            let m = Mask::new(8, 8, bits).unwrap();
            prop_assume!(m.count() >= k);
            let pts = sample_points(&m, k, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut seen = std::collections::HashSet::new();
            for p in pts {
                let (r, c) = ((p.y * 8.0) as usize, (p.x * 8.0) as usize);
                prop_assert!(m.get(r, c));
                prop_assert!(seen.insert((r, c)));
            }
        }

        #[test]
        fn box_is_tight(bits in proptest::collection::vec(0u8..2, 48)) {
            let m = Mask::new(8, 6, bits).unwrap();
            prop_assume!(m.count() > 0);
            let b = box_from_mask(&m).unwrap();
            let (c0, c1) = ((b.x0 * 8.0).round() as usize, (b.x1 * 8.0).round() as usize);
            let (r0, r1) = ((b.y0 * 6.0).round() as usize, (b.y1 * 6.0).round() as usize);
            for r in 0..6 {
                for c in 0..8 {
                    if m.get(r, c) {
                        prop_assert!((r0..r1).contains(&r) && (c0..c1).contains(&c));
                    }
                }
            }
            prop_assert!((c0..c1).any(|c| m.get(r0, c)));
            prop_assert!((c0..c1).any(|c| m.get(r1 - 1, c)));
            prop_assert!((r0..r1).any(|r| m.get(r, c0)));
            prop_assert!((r0..r1).any(|r| m.get(r, c1 - 1)));
        }
    }
}
