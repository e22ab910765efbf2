//! Segmentation-derived box baseline: a three-layer full-resolution conv
//! net whose thresholded mask is boxed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{box_from_mask, fit_loop, mean_eval_loss, FitReport};
use crate::error::{Error, Result};
use crate::image::{Mask, RgbImage};
use crate::loss::bce_with_logits;
use crate::nn;
use crate::numerics::{ParamStore, Tape, Var};
use crate::prompt::BoxPrompt;
use crate::synth::Sample;
use crate::util::{image_batch, FitOptions};

const PREFIX: &str = "segmenter";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmenterConfig {
    pub input_size: usize,
    pub channels: [usize; 2],
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            input_size: 128,
            channels: [8, 8],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Segmenter {
    config: SegmenterConfig,
}

/// `box_from_mask`, or the whole image when nothing is predicted.
pub fn box_or_full(mask: &Mask) -> BoxPrompt {
    box_from_mask(mask).unwrap_or_else(|_| BoxPrompt::full())
}

impl Segmenter {
    pub fn new(config: SegmenterConfig) -> Result<Self> {
        if config.input_size == 0 || config.channels.contains(&0) {
            return Err(Error::Config(format!("invalid segmenter config {config:?}")));
        }
        Ok(Segmenter { config })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let [c1, c2] = self.config.channels;
        nn::init_conv(store, &format!("{PREFIX}.conv0"), 3, 3, c1, true, rng)?;
        nn::init_conv(store, &format!("{PREFIX}.conv1"), 3, c1, c2, true, rng)?;
        nn::init_conv(store, &format!("{PREFIX}.conv2"), 3, c2, 1, true, rng)
    }

    /// `[B, S, S, 3]` → logits `[B, S, S, 1]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, images: Var) -> Result<Var> {
        let h = nn::conv(tape, store, &format!("{PREFIX}.conv0"), images, 1, 1)?;
        let h = tape.relu(h)?;
        let h = nn::conv(tape, store, &format!("{PREFIX}.conv1"), h, 1, 1)?;
        let h = tape.relu(h)?;
        nn::conv(tape, store, &format!("{PREFIX}.conv2"), h, 1, 1)
    }

    /// Foreground where the sigmoid exceeds 0.5.
    pub fn predict_mask(&self, store: &ParamStore, image: &RgbImage) -> Result<Mask> {
        let n = self.config.input_size;
        let mut tape = Tape::new(false, 0);
        let x = tape.leaf(&image_batch(&[image], n)?);
        let z = self.forward(&mut tape, store, x)?;
        let z = tape.value(z);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("segmenter logits"));
        }
        Mask::new(n, n, z.iter().map(|&v| (v > 0.0) as u8).collect())
    }

    pub fn predict_box(&self, store: &ParamStore, image: &RgbImage) -> Result<BoxPrompt> {
        Ok(box_or_full(&self.predict_mask(store, image)?))
    }

    fn batch_loss(&self, tape: &mut Tape, store: &ParamStore, samples: &[Sample]) -> Result<Var> {
        let images: Vec<&RgbImage> = samples.iter().map(|s| &s.image).collect();
        let x = tape.leaf(&image_batch(&images, self.config.input_size)?);
        let z = self.forward(tape, store, x)?;
        let y: Vec<f64> = samples.iter().flat_map(|s| s.mask.data.iter().map(|&v| v as f64)).collect();
        bce_with_logits(tape, z, &y)
    }

    pub fn evaluate(&self, store: &ParamStore, samples: &[Sample], batch: usize) -> Result<f64> {
        mean_eval_loss(samples, batch, |t, b| self.batch_loss(t, store, b))
    }

    pub fn fit(&self, train: &[Sample], val: &[Sample], opts: &FitOptions) -> Result<(ParamStore, FitReport)> {
        if train.is_empty() {
            return Err(Error::Data("segmenter training set is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut store = ParamStore::new();
        self.init_params(&mut store, &mut rng)?;
        fit_loop(store, train, val, opts, false, &mut rng, "segmenter", |t, s, b| {
            self.batch_loss(t, s, b)
        })
    }
}

pub fn segmenter_params(config: &SegmenterConfig, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    Segmenter::new(config.clone())?.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, Tensor};
    use crate::synth::{render, DomainId, DomainSpec};

    #[test]
    fn empty_prediction_falls_back_to_full_box() {
        assert_eq!(box_or_full(&Mask::zeros(8, 8)), BoxPrompt::full());
        let seg = Segmenter::new(SegmenterConfig {
            input_size: 16,
            channels: [2, 2],
        })
        .unwrap();
        let mut store = segmenter_params(seg.config(), 1).unwrap();
        store.get_mut("segmenter.conv2.bias").unwrap().data_mut()[0] = -1e3;
        let img = RgbImage::filled(16, 16, [10, 10, 10]);
        assert_eq!(seg.predict_box(&store, &img).unwrap(), BoxPrompt::full());
    }

    #[test]
    fn perfect_mask_gives_gt_box() {
        let s = render(&DomainSpec::preset(DomainId::A), 2, 0).unwrap();
        assert_eq!(box_or_full(&s.mask), s.bbox);
    }

    #[test]
    fn loss_gradcheck() {
        let seg = Segmenter::new(SegmenterConfig {
            input_size: 6,
            channels: [2, 3],
        })
        .unwrap();
        let store = segmenter_params(seg.config(), 3).unwrap();
        let y: Vec<f64> = (0..72).map(|i| (i % 5 < 2) as u8 as f64).collect();
        let x = Tensor::randn(&[2, 6, 6, 3], 0.5, &mut ChaCha8Rng::seed_from_u64(1));
        let err = finite_diff_check(
            |t, v| {
                let z = seg.forward(t, &store, v)?;
                bce_with_logits(t, z, &y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn training_reduces_loss() {
        let mut spec = DomainSpec::preset(DomainId::A);
        spec.image_size = 32;
        let data: Vec<Sample> = (0..8).map(|i| render(&spec, 1, i).unwrap()).collect();
        let seg = Segmenter::new(SegmenterConfig {
            input_size: 32,
            channels: [4, 4],
        })
        .unwrap();
        let opts = FitOptions {
            epochs: 5,
            batch_size: 4,
            lr: 1e-2,
            seed: 3,
        };
        let (_, rep) = seg.fit(&data[..6], &data[6..], &opts).unwrap();
        assert!(rep.train_loss[4] < rep.train_loss[0], "{:?}", rep.train_loss);
    }
}
