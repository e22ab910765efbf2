//! Batched inference: image embeddings, prompt construction per generator,
//! mask decoding and binarisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bundle::ModelBundle;
use crate::decoder::{binarize, MaskLogits};
use crate::error::{Error, Result};
use crate::generator::{box_from_mask, sample_points, GeneratorKind};
use crate::image::{Mask, RgbImage};
use crate::numerics::{Tape, Tensor};
use crate::prompt::{PositionalEncoder, PromptSet};
use crate::synth::Sample;
use crate::util::image_batch;

pub const EMBED_BATCH: usize = 8;
pub const DECODE_BATCH: usize = 32;

/// Encoder output per image, each `[G, G, C]`.
pub fn embed_images(bundle: &ModelBundle, images: &[&RgbImage]) -> Result<Vec<Tensor>> {
    let enc = bundle.encoder()?;
    let n = bundle.config.encoder.input_size;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EMBED_BATCH) {
        let mut tape = Tape::new(false, 0);
        let x = tape.leaf(&image_batch(chunk, n)?);
        let g = enc.forward(&mut tape, &bundle.params, x)?;
        let shape = tape.shape(g)[1..].to_vec();
        let per: usize = shape.iter().product();
        for part in tape.value(g).chunks(per) {
            out.push(Tensor::new(&shape, part.to_vec())?);
        }
    }
    Ok(out)
}

pub fn stack(grids: &[&Tensor]) -> Result<Tensor> {
    let shape = grids
        .first()
        .ok_or_else(|| Error::Data("no embeddings to stack".into()))?
        .shape()
        .to_vec();
    let mut data = Vec::with_capacity(grids.len() * grids[0].numel());
    for g in grids {
        if g.shape() != shape.as_slice() {
            return Err(Error::shape("stack", format!("{:?} vs {shape:?}", g.shape())));
        }
        data.extend_from_slice(g.data());
    }
    let mut full = vec![grids.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}

/// Eval-mode decode of precomputed embeddings. Prompt sets within one call
/// must share a layout.
pub fn decode_logits(bundle: &ModelBundle, grids: &[&Tensor], prompts: &[PromptSet]) -> Result<Vec<MaskLogits>> {
    if grids.len() != prompts.len() {
        return Err(Error::shape("decode_logits", format!("{} embeddings, {} prompt sets", grids.len(), prompts.len())));
    }
    let pe = bundle.prompt_encoder()?;
    let dec = bundle.decoder()?;
    let g = bundle.config.encoder.grid_side();
    let pe_grid = PositionalEncoder::from_store(&bundle.params)?.grid(g);
    let mut out = Vec::with_capacity(grids.len());
    for (gs, ps) in grids.chunks(DECODE_BATCH).zip(prompts.chunks(DECODE_BATCH)) {
        let mut tape = Tape::new(false, 0);
        let x = tape.leaf(&stack(gs)?);
        let l = dec.decode(&mut tape, &bundle.params, &pe, x, &pe_grid, ps)?;
        out.extend(MaskLogits::from_batch(&tape.tensor(l))?);
    }
    Ok(out)
}

pub fn predict_masks(bundle: &ModelBundle, grids: &[&Tensor], prompts: &[PromptSet]) -> Result<Vec<Mask>> {
    let n = bundle.config.encoder.input_size;
    decode_logits(bundle, grids, prompts)?
        .iter()
        .map(|l| Mask::new(n, n, binarize(l, n)))
        .collect()
}

/// Prompt sets for `kind` over `samples`. Ground-truth kinds read the sample
/// masks; point sampling draws from `seed`.
pub fn build_prompts(bundle: &ModelBundle, kind: GeneratorKind, samples: &[&Sample], seed: u64) -> Result<Vec<PromptSet>> {
    match kind {
        GeneratorKind::None => Ok(vec![PromptSet::empty(); samples.len()]),
        GeneratorKind::GtBox => samples
            .iter()
            .map(|s| Ok(PromptSet::from_box(box_from_mask(&s.mask)?)))
            .collect(),
        GeneratorKind::GtPoints(k) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            samples
                .iter()
                .map(|s| Ok(PromptSet::from_points(sample_points(&s.mask, k, &mut rng)?)))
                .collect()
        }
        GeneratorKind::DetectorBox => {
            let images: Vec<&RgbImage> = samples.iter().map(|s| &s.image).collect();
            detector_prompts(bundle, &images)
        }
        GeneratorKind::SegmenterBox => {
            let seg = bundle.segmenter()?;
            samples
                .iter()
                .map(|s| Ok(PromptSet::from_box(seg.predict_box(&bundle.params, &s.image)?)))
                .collect()
        }
    }
}

pub fn detector_prompts(bundle: &ModelBundle, images: &[&RgbImage]) -> Result<Vec<PromptSet>> {
    let det = bundle.detector()?;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(DECODE_BATCH) {
        for d in det.detect_batch(&bundle.params, chunk)? {
            out.push(PromptSet::from_box(d.bbox));
        }
    }
    Ok(out)
}

/// Segments one image with explicit prompts.
pub fn segment_with_prompts(bundle: &ModelBundle, image: &RgbImage, prompts: PromptSet) -> Result<Mask> {
    let grids = embed_images(bundle, &[image])?;
    Ok(predict_masks(bundle, &[&grids[0]], &[prompts])?.remove(0))
}

/// Image in, binary mask out. Ground-truth generators need `gt`.
pub fn segment_end_to_end(
    bundle: &ModelBundle,
    image: &RgbImage,
    generator: GeneratorKind,
    gt: Option<&Mask>,
    seed: u64,
) -> Result<Mask> {
    let prompts = match (generator.needs_gt(), gt) {
        (true, None) => {
            return Err(Error::Config(format!("generator `{generator}` needs a ground-truth mask")));
        }
        (true, Some(m)) => {
            let s = Sample::new(image.clone(), m.clone())?;
            build_prompts(bundle, generator, &[&s], seed)?
        }
        (false, _) => match generator {
            GeneratorKind::None => vec![PromptSet::empty()],
            GeneratorKind::DetectorBox => detector_prompts(bundle, &[image])?,
            GeneratorKind::SegmenterBox => {
                vec![PromptSet::from_box(bundle.segmenter()?.predict_box(&bundle.params, image)?)]
            }
            _ => unreachable!(),
        },
    };
    segment_with_prompts(bundle, image, prompts.into_iter().next().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::bundle::Components;
    use crate::pipeline::testutil::{samples, tiny_config};
    use crate::synth::DomainId;

    fn base() -> ModelBundle {
        ModelBundle::init(tiny_config(), Components { base: true, ..Components::default() }, 6).unwrap()
    }

    #[test]
    fn no_prompt_path_yields_a_mask() {
        let b = base();
        let s = &samples(DomainId::B, 1, 1)[0];
        let m = segment_end_to_end(&b, &s.image, GeneratorKind::None, None, 0).unwrap();
        assert_eq!((m.width, m.height), (64, 64));
        assert!(m.data.iter().all(|&v| v <= 1));
    }

    #[test]
    fn gt_box_matches_a_manual_box() {
        let b = base();
        let s = &samples(DomainId::A, 1, 2)[0];
        let auto = segment_end_to_end(&b, &s.image, GeneratorKind::GtBox, Some(&s.mask), 0).unwrap();
        let manual = segment_with_prompts(&b, &s.image, PromptSet::from_box(box_from_mask(&s.mask).unwrap())).unwrap();
        assert_eq!(auto, manual);
        assert_eq!(auto, segment_end_to_end(&b, &s.image, GeneratorKind::GtBox, Some(&s.mask), 9).unwrap());
    }

    #[test]
    fn missing_inputs_are_configuration_errors() {
        let b = base();
        let s = &samples(DomainId::A, 1, 3)[0];
        for kind in [GeneratorKind::GtBox, GeneratorKind::GtPoints(2)] {
            assert!(matches!(segment_end_to_end(&b, &s.image, kind, None, 0), Err(Error::Config(_))));
        }
        for kind in [GeneratorKind::DetectorBox, GeneratorKind::SegmenterBox] {
            assert!(matches!(segment_end_to_end(&b, &s.image, kind, None, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn batched_embeddings_match_single_ones() {
        let b = base();
        let data = samples(DomainId::C, EMBED_BATCH + 2, 4);
        let images: Vec<&RgbImage> = data.iter().map(|s| &s.image).collect();
        let all = embed_images(&b, &images).unwrap();
        assert_eq!(all.len(), data.len());
        let last = embed_images(&b, &images[EMBED_BATCH + 1..]).unwrap();
        assert_eq!(all[EMBED_BATCH + 1], last[0]);
    }
}
