//! Training stages that produce or extend a [`ModelBundle`].

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bundle::{Components, ModelBundle, StageRecord};
use super::config::{ModelConfig, Stage, TrainConfig};
use super::eval::{evaluate_arm, EvalSet};
use super::infer::{build_prompts, detector_prompts, embed_images, stack};
use crate::error::{Error, Result};
use crate::augment::{augment, mosaic, paste_distractors};
use crate::generator::{sample_points, Detector, GeneratorKind, Segmenter};
use crate::loss::{downsample_mask, mask_loss};
use crate::numerics::{adam_step, AdamState, ParamStore, Tape, Tensor};
use crate::prompt::{PositionalEncoder, PromptSet};
use crate::synth::{DomainId, Sample};
use crate::util::{image_batch, FitOptions, Fnv1a};

const P_BOX: f64 = 0.5;
const P_POINTS: f64 = 0.25;
const MAX_CURRICULUM_POINTS: usize = 5;
/// Chance that a prompted batch is built from 2×2 mosaics.
const P_MOSAIC: f64 = 0.25;
const P_PASTE: f64 = 0.5;
const MAX_PASTED: usize = 3;

/// Per-epoch history of a base-model stage. Index 0 of `val_miou` scores
/// the starting weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StageReport {
    pub train_loss: Vec<f64>,
    /// Mean loss of the first and last batch of every epoch.
    pub batch_loss_ends: Vec<(f64, f64)>,
    pub val_miou: Vec<f64>,
    pub best_epoch: usize,
}

/// Seeded shuffle, then the first `fraction` (rounded, at least one when
/// `fraction > 0` and two or more samples exist) goes to validation.
pub fn split_validation(samples: Vec<Sample>, fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let n = samples.len();
    let mut n_val = (n as f64 * fraction).round() as usize;
    if fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7661_6c69_6461_7465));
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut val = Vec::with_capacity(n_val);
    let mut train = Vec::with_capacity(n - n_val);
    for (j, &i) in idx.iter().enumerate() {
        let s = slots[i].take().unwrap();
        if j < n_val {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    (train, val)
}

fn targets(samples: &[&Sample], size: usize, side: usize) -> Result<Vec<f64>> {
    let mut t = Vec::with_capacity(samples.len() * side * side);
    for s in samples {
        t.extend(downsample_mask(&s.mask.data, size, side)?);
    }
    Ok(t)
}

fn val_score(bundle: &ModelBundle, val: &Option<EvalSet>) -> Result<f64> {
    match val {
        Some(v) => Ok(evaluate_arm(bundle, v, GeneratorKind::GtBox, 0)?[0]),
        None => Ok(0.0),
    }
}

fn curriculum<R: Rng>(rng: &mut R) -> GeneratorKind {
    let u: f64 = rng.gen();
    if u < P_BOX {
        GeneratorKind::GtBox
    } else if u < P_BOX + P_POINTS {
        GeneratorKind::GtPoints(rng.gen_range(1..=MAX_CURRICULUM_POINTS))
    } else {
        GeneratorKind::None
    }
}

/// Augmented `s` with 1 to `MAX_PASTED` augmented copies of other samples pasted in.
fn with_lookalikes<R: Rng>(s: &Sample, pool: &[Sample], rng: &mut R) -> Sample {
    let t = augment(s, rng);
    let o: Vec<Sample> = (0..rng.gen_range(1..=MAX_PASTED))
        .map(|_| augment(&pool[rng.gen_range(0..pool.len())], rng))
        .collect();
    paste_distractors(&t, &o.iter().collect::<Vec<_>>(), rng)
}

fn check_train(train: &[Sample], stage: Stage) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Data(format!("{stage}: training split is empty")));
    }
    Ok(())
}

fn domains_label(d: &[DomainId]) -> Vec<DomainId> {
    let mut d = d.to_vec();
    d.sort();
    d.dedup();
    d
}

/// Joint training of encoder, prompt encoder and decoder with a mixed
/// prompt curriculum. Keeps the weights with the best validation mIoU under
/// GT-box prompts.
pub fn pretrain_base(
    model: ModelConfig,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    domains: &[DomainId],
) -> Result<(ModelBundle, StageReport)> {
    check_train(train, Stage::Pretrain)?;
    cfg.validate()?;
    let seed = cfg.seed()?;
    let base = Components {
        base: true,
        ..Components::default()
    };
    let mut bundle = ModelBundle::init(model, base, seed)?;
    let enc = bundle.encoder()?;
    let pe = bundle.prompt_encoder()?;
    let dec = bundle.decoder()?;
    let n = bundle.config.encoder.input_size;
    let g = bundle.config.encoder.grid_side();
    let side = bundle.config.prompt.mask_side();
    let pe_grid = PositionalEncoder::from_store(&bundle.params)?.grid(g);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7072_6574_7261_696e);
    let mut adam = AdamState::new(&bundle.params);
    let domain = domains.first().copied().unwrap_or(DomainId::A);
    // Embeddings change with the encoder, so the validation set is re-embedded each epoch.
    let score_now = |b: &ModelBundle| -> Result<f64> {
        if val.is_empty() {
            return Ok(0.0);
        }
        val_score(b, &Some(EvalSet::new(b, domain, val.to_vec())?))
    };
    let mut report = StageReport::default();
    let first = score_now(&bundle)?;
    report.val_miou.push(first);
    let mut best = (first, bundle.params.clone(), 0);

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut ends = (f64::NAN, f64::NAN);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let kind = curriculum(&mut rng);
            // Prompted batches may carry look-alike objects; only the prompt says which is wanted.
            let layout: f64 = if cfg.augment && kind != GeneratorKind::None && train.len() >= 4 { rng.gen() } else { 1.0 };
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = if !cfg.augment {
                    train[i].clone()
                } else if layout < P_MOSAIC {
                    let t = augment(&train[i], &mut rng);
                    let o: [Sample; 3] = std::array::from_fn(|_| augment(&train[rng.gen_range(0..train.len())], &mut rng));
                    mosaic(&t, [&o[0], &o[1], &o[2]], &mut rng)
                } else if layout < P_MOSAIC + P_PASTE {
                    with_lookalikes(&train[i], train, &mut rng)
                } else {
                    augment(&train[i], &mut rng)
                };
                batch.push(s);
            }
            let refs: Vec<&Sample> = batch.iter().collect();
            let prompts = match kind {
                GeneratorKind::GtPoints(k) => batch
                    .iter()
                    .map(|s| Ok(PromptSet::from_points(sample_points(&s.mask, k, &mut rng)?)))
                    .collect::<Result<Vec<_>>>()?,
                _ => build_prompts(&bundle, kind, &refs, 0)?,
            };
            let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
            let mut tape = Tape::new(true, rng.gen());
            let x = tape.leaf(&image_batch(&images, n)?);
            let grid = enc.forward(&mut tape, &bundle.params, x)?;
            let logits = dec.decode(&mut tape, &bundle.params, &pe, grid, &pe_grid, &prompts)?;
            let l = mask_loss(&mut tape, logits, &targets(&refs, n, side)?)?;
            let lv = tape.scalar(l)?;
            if !lv.is_finite() {
                return Err(Error::Divergence(format!("pretrain loss {lv} at epoch {epoch}, batch {bi}")));
            }
            if bi == 0 {
                ends.0 = lv;
            }
            ends.1 = lv;
            sum += lv * chunk.len() as f64;
            let grads = tape.backward(l)?;
            bundle.params.accumulate(&tape, &grads);
            adam_step(&mut bundle.params, &mut adam, cfg.lr)?;
        }
        report.train_loss.push(sum / train.len() as f64);
        report.batch_loss_ends.push(ends);
        let score = score_now(&bundle)?;
        report.val_miou.push(score);
        if score > best.0 {
            best = (score, bundle.params.clone(), epoch);
        }
    }
    bundle.params = best.1;
    report.best_epoch = best.2;
    bundle.provenance.push(StageRecord {
        stage: Stage::Pretrain,
        seed,
        domains: domains_label(domains),
        epochs: cfg.epochs,
        best_epoch: best.2,
        score: best.0,
    });
    Ok((bundle, report))
}

/// FNV-1a over every parameter outside the decoder.
pub fn frozen_digest(store: &ParamStore) -> u64 {
    let mut h = Fnv1a::new();
    for (name, t) in store.iter().filter(|(n, _)| !n.starts_with("decoder.")) {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(&v.to_le_bytes());
        }
    }
    h.finish()
}

/// Trains the decoder alone on frozen image embeddings. Box prompts come
/// from the bundle's detector when present, else from ground truth.
pub fn finetune_decoder(
    mut bundle: ModelBundle,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    domains: &[DomainId],
) -> Result<(ModelBundle, StageReport)> {
    check_train(train, Stage::Finetune)?;
    cfg.validate()?;
    if !(cfg.freeze_encoder && cfg.freeze_prompt_encoder) {
        return Err(Error::Config("finetune requires frozen encoder and prompt encoder".into()));
    }
    let seed = cfg.seed()?;
    let pe = bundle.prompt_encoder()?;
    let dec = bundle.decoder()?;
    let n = bundle.config.encoder.input_size;
    let g = bundle.config.encoder.grid_side();
    let side = bundle.config.prompt.mask_side();
    let pe_grid = PositionalEncoder::from_store(&bundle.params)?.grid(g);

    let images: Vec<_> = train.iter().map(|s| &s.image).collect();
    let mut prompts = if bundle.components.detector {
        detector_prompts(&bundle, &images)?
    } else {
        let refs: Vec<&Sample> = train.iter().collect();
        build_prompts(&bundle, GeneratorKind::GtBox, &refs, 0)?
    };
    // One look-alike copy per sample, prompted with its exact box.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c6f_6f6b_616c_696b);
    let copies: Vec<Sample> = if cfg.augment {
        train.iter().map(|s| with_lookalikes(s, train, &mut rng)).collect()
    } else {
        Vec::new()
    };
    let copy_refs: Vec<&Sample> = copies.iter().collect();
    prompts.extend(build_prompts(&bundle, GeneratorKind::GtBox, &copy_refs, 0)?);
    let train: Vec<&Sample> = train.iter().chain(&copies).collect();
    let images: Vec<_> = train.iter().map(|s| &s.image).collect();
    let grids = embed_images(&bundle, &images)?;
    let refs = train.clone();
    let all_targets = targets(&refs, n, side)?;
    let per = side * side;
    let val_set = if val.is_empty() {
        None
    } else {
        Some(EvalSet::new(&bundle, domains.first().copied().unwrap_or(DomainId::A), val.to_vec())?)
    };

    bundle.params.set_trainable("", false);
    bundle.params.set_trainable("decoder.", true);
    let result = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6669_6e65_7475_6e65);
        let mut adam = AdamState::new(&bundle.params);
        let mut report = StageReport::default();
        let first = val_score(&bundle, &val_set)?;
        report.val_miou.push(first);
        let mut best = (first, bundle.params.clone(), 0);
        let frozen = frozen_digest(&bundle.params);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut ends = (f64::NAN, f64::NAN);
            for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let gs: Vec<&Tensor> = chunk.iter().map(|&i| &grids[i]).collect();
                let ps: Vec<PromptSet> = chunk.iter().map(|&i| prompts[i].clone()).collect();
                let mut t = Vec::with_capacity(chunk.len() * per);
                for &i in chunk {
                    t.extend_from_slice(&all_targets[i * per..(i + 1) * per]);
                }
                let mut tape = Tape::new(true, rng.gen());
                let x = tape.leaf(&stack(&gs)?);
                let logits = dec.decode(&mut tape, &bundle.params, &pe, x, &pe_grid, &ps)?;
                let l = mask_loss(&mut tape, logits, &t)?;
                let lv = tape.scalar(l)?;
                if !lv.is_finite() {
                    return Err(Error::Divergence(format!("finetune loss {lv} at epoch {epoch}, batch {bi}")));
                }
                if bi == 0 {
                    ends.0 = lv;
                }
                ends.1 = lv;
                sum += lv * chunk.len() as f64;
                let grads = tape.backward(l)?;
                bundle.params.accumulate(&tape, &grads);
                adam_step(&mut bundle.params, &mut adam, cfg.lr)?;
            }
            if frozen_digest(&bundle.params) != frozen {
                return Err(Error::Backward(format!("frozen parameters changed during finetune epoch {epoch}")));
            }
            report.train_loss.push(sum / train.len() as f64);
            report.batch_loss_ends.push(ends);
            let score = val_score(&bundle, &val_set)?;
            report.val_miou.push(score);
            if score > best.0 {
                best = (score, bundle.params.clone(), epoch);
            }
        }
        report.best_epoch = best.2;
        Ok((best.1, best.0, report))
    })();
    let (params, score, report) = result?;
    bundle.params = params;
    bundle.params.set_trainable("", true);
    bundle.provenance.push(StageRecord {
        stage: Stage::Finetune,
        seed,
        domains: domains_label(domains),
        epochs: cfg.epochs,
        best_epoch: report.best_epoch,
        score,
    });
    Ok((bundle, report))
}

fn fit_options(cfg: &TrainConfig) -> Result<FitOptions> {
    Ok(FitOptions {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        seed: cfg.seed()?,
    })
}

/// A bundle holding only detector weights. Score is the kept validation loss.
pub fn train_detector(
    model: ModelConfig,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    domains: &[DomainId],
) -> Result<ModelBundle> {
    check_train(train, Stage::Detector)?;
    cfg.validate()?;
    let opts = fit_options(cfg)?;
    let det = Detector::new(model.detector.clone())?;
    let (params, report) = det.fit(train, val, &opts, cfg.augment)?;
    generator_bundle(model, params, Stage::Detector, &opts, report.best_epoch, report.val_loss[report.best_epoch], domains)
}

/// A bundle holding only segmenter weights.
pub fn train_segmenter(
    model: ModelConfig,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    domains: &[DomainId],
) -> Result<ModelBundle> {
    check_train(train, Stage::Segmenter)?;
    cfg.validate()?;
    let opts = fit_options(cfg)?;
    let seg = Segmenter::new(model.segmenter.clone())?;
    let (params, report) = seg.fit(train, val, &opts)?;
    generator_bundle(model, params, Stage::Segmenter, &opts, report.best_epoch, report.val_loss[report.best_epoch], domains)
}

fn generator_bundle(
    model: ModelConfig,
    params: ParamStore,
    stage: Stage,
    opts: &FitOptions,
    best_epoch: usize,
    score: f64,
    domains: &[DomainId],
) -> Result<ModelBundle> {
    let components = Components {
        detector: stage == Stage::Detector,
        segmenter: stage == Stage::Segmenter,
        ..Components::default()
    };
    let mut bundle = ModelBundle::init(model, components, 0)?;
    bundle.params.load_values(&params)?;
    bundle.provenance.push(StageRecord {
        stage,
        seed: opts.seed,
        domains: domains_label(domains),
        epochs: opts.epochs,
        best_epoch: best_epoch + 1,
        score,
    });
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::testutil::{samples, tiny_config};

    fn quick(stage: Stage, epochs: usize, batch: usize) -> TrainConfig {
        let mut c = TrainConfig::defaults(stage);
        c.seed = Some(5);
        c.epochs = epochs;
        c.batch_size = batch;
        c.lr = 1e-3;
        c
    }

    #[test]
    fn validation_split_is_a_seeded_partition() {
        let all = samples(DomainId::A, 20, 1);
        let (t, v) = split_validation(all.clone(), 0.1, 3);
        assert_eq!((t.len(), v.len()), (18, 2));
        for s in &all {
            let hits = t.iter().chain(&v).filter(|x| x.image == s.image).count();
            assert_eq!(hits, 1);
        }
        let (t2, v2) = split_validation(all.clone(), 0.1, 3);
        assert_eq!(v.iter().map(|s| s.bbox).collect::<Vec<_>>(), v2.iter().map(|s| s.bbox).collect::<Vec<_>>());
        assert_eq!(t.len(), t2.len());
        // Never empties either side when both are asked for.
        let (t, v) = split_validation(all[..3].to_vec(), 0.01, 0);
        assert_eq!((t.len(), v.len()), (2, 1));
    }

    #[test]
    fn pretrain_learns_and_is_deterministic() {
        let data = samples(DomainId::A, 36, 2);
        let cfg = quick(Stage::Pretrain, 1, 4);
        let (a, rep) = pretrain_base(tiny_config(), &data[..32], &data[32..], &cfg, &[DomainId::A]).unwrap();
        let (start, end) = rep.batch_loss_ends[0];
        assert!(end < start, "epoch 1 loss {start} -> {end}");
        assert_eq!(rep.val_miou.len(), 2);
        assert_eq!(a.provenance.len(), 1);
        assert_eq!(a.provenance[0].stage, Stage::Pretrain);
        let (b, _) = pretrain_base(tiny_config(), &data[..32], &data[32..], &cfg, &[DomainId::A]).unwrap();
        assert_eq!(a.params, b.params);
        assert!(matches!(
            pretrain_base(tiny_config(), &[], &data, &cfg, &[DomainId::A]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn finetune_touches_only_the_decoder() {
        let data = samples(DomainId::A, 12, 3);
        let bundle = ModelBundle::init(tiny_config(), Components { base: true, ..Components::default() }, 4).unwrap();
        let digest = frozen_digest(&bundle.params);
        let (f, rep) = finetune_decoder(bundle.clone(), &data[..10], &data[10..], &quick(Stage::Finetune, 2, 8), &[DomainId::A])
            .unwrap();
        assert_eq!(frozen_digest(&f.params), digest);
        assert_eq!(f.provenance.len(), 1);
        assert_eq!(rep.val_miou.len(), 3);
        // Trainability is restored for later stages.
        assert!(f.params.iter().all(|(n, t)| t.requires_grad || f.params.is_buffer(n)));
        let mut open = quick(Stage::Finetune, 1, 8);
        open.freeze_prompt_encoder = false;
        assert!(matches!(
            finetune_decoder(bundle, &data[..10], &[], &open, &[DomainId::A]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn digest_sees_encoder_changes_but_not_decoder_ones() {
        let b = ModelBundle::init(tiny_config(), Components { base: true, ..Components::default() }, 4).unwrap();
        let d = frozen_digest(&b.params);
        let mut dec = b.params.clone();
        dec.get_mut("decoder.output_token").unwrap().data_mut()[0] += 1.0;
        assert_eq!(frozen_digest(&dec), d);
        let mut enc = b.params.clone();
        let name = enc.names().find(|n| n.starts_with("encoder.")).unwrap().to_string();
        enc.get_mut(&name).unwrap().data_mut()[0] += 1e-12;
        assert_ne!(frozen_digest(&enc), d);
    }

    #[test]
    fn generator_stages_produce_generator_bundles() {
        let data = samples(DomainId::A, 10, 4);
        let det = train_detector(tiny_config(), &data[..8], &data[8..], &quick(Stage::Detector, 2, 4), &[DomainId::A]).unwrap();
        assert!(det.components.detector && !det.components.base);
        assert_eq!(det.provenance[0].stage, Stage::Detector);
        let seg = train_segmenter(tiny_config(), &data[..8], &data[8..], &quick(Stage::Segmenter, 2, 4), &[DomainId::A]).unwrap();
        assert!(seg.components.segmenter && !seg.components.detector);
        assert!(train_detector(tiny_config(), &[], &data, &quick(Stage::Detector, 1, 4), &[DomainId::A]).is_err());
    }
}
