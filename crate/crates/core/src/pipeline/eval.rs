//! Experiment harnesses: prompt sweep, generator comparison and the
//! zero-shot table, all reduced to micro-aggregated [`EvalRecord`]s.

use super::bundle::ModelBundle;
use super::infer::{build_prompts, embed_images, predict_masks};
use crate::error::{Error, Result};
use crate::generator::GeneratorKind;
use crate::metrics::{aggregate, confusion, ConfusionCounts, EvalRecord};
use crate::numerics::Tensor;
use crate::synth::{DomainId, Manifest, Sample};

pub const SWEEP_K: [usize; 5] = [1, 2, 3, 5, 10];
pub const SWEEP_SEEDS: u64 = 3;

/// Samples of one domain with their image embeddings computed once.
pub struct EvalSet {
    pub domain: DomainId,
    pub samples: Vec<Sample>,
    grids: Vec<Tensor>,
}

impl EvalSet {
    pub fn new(bundle: &ModelBundle, domain: DomainId, samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data(format!("no samples to evaluate for domain {domain}")));
        }
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        let grids = embed_images(bundle, &images)?;
        Ok(EvalSet { domain, samples, grids })
    }

    /// Loads a single-domain manifest.
    pub fn from_manifest(bundle: &ModelBundle, m: &Manifest) -> Result<Self> {
        let domain = single_domain(m)?;
        EvalSet::new(bundle, domain, m.load_all()?)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn single_domain(m: &Manifest) -> Result<DomainId> {
    let mut d: Vec<DomainId> = m.domains().into_iter().collect();
    d.sort();
    match d.as_slice() {
        [one] => Ok(*one),
        [] => Err(Error::Data(format!("{}: empty dataset", m.root.display()))),
        _ => Err(Error::Data(format!("{}: mixes domains {d:?}", m.root.display()))),
    }
}

/// Per-image confusion counts for one prompt source.
pub fn arm_counts(bundle: &ModelBundle, set: &EvalSet, kind: GeneratorKind, seed: u64) -> Result<Vec<ConfusionCounts>> {
    let refs: Vec<&Sample> = set.samples.iter().collect();
    let prompts = build_prompts(bundle, kind, &refs, seed)?;
    let grids: Vec<&Tensor> = set.grids.iter().collect();
    let masks = predict_masks(bundle, &grids, &prompts)?;
    masks.iter().zip(&set.samples).map(|(p, s)| confusion(p, &s.mask)).collect()
}

/// `[miou, mpa, acc]`, micro-aggregated.
pub fn evaluate_arm(bundle: &ModelBundle, set: &EvalSet, kind: GeneratorKind, seed: u64) -> Result<[f64; 3]> {
    Ok(aggregate(&arm_counts(bundle, set, kind, seed)?)?.1)
}

/// Point arms average the micro metrics of `seeds` independent draws.
pub fn evaluate_arm_seeds(bundle: &ModelBundle, set: &EvalSet, kind: GeneratorKind, seed: u64, seeds: u64) -> Result<[f64; 3]> {
    if !matches!(kind, GeneratorKind::GtPoints(_)) {
        return evaluate_arm(bundle, set, kind, seed);
    }
    let mut acc = [0.0; 3];
    for s in 0..seeds.max(1) {
        let m = evaluate_arm(bundle, set, kind, point_seed(seed, s, set.domain))?;
        for i in 0..3 {
            acc[i] += m[i];
        }
    }
    Ok(acc.map(|v| v / seeds.max(1) as f64))
}

fn point_seed(seed: u64, draw: u64, domain: DomainId) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (draw << 8) ^ domain as u64
}

fn train_label(bundle: &ModelBundle) -> String {
    let d: Vec<String> = bundle.training_domains().iter().map(|d| d.to_string()).collect();
    d.join("+")
}

pub fn record(bundle: &ModelBundle, method: &str, kind: GeneratorKind, set: &EvalSet, m: [f64; 3], seed: u64) -> EvalRecord {
    EvalRecord {
        method: method.to_string(),
        generator: kind.to_string(),
        train_domain: train_label(bundle),
        eval_domain: set.domain.to_string(),
        miou: m[0],
        mpa: m[1],
        acc: m[2],
        seed,
        n: set.len(),
    }
}

/// Rejects evaluation on any domain a training stage has seen.
pub fn check_zero_shot(bundle: &ModelBundle, sets: &[&EvalSet]) -> Result<()> {
    let seen = bundle.training_domains();
    if seen.is_empty() {
        return Err(Error::Provenance("bundle records no training domains".into()));
    }
    for s in sets {
        if seen.contains(&s.domain) {
            return Err(Error::Provenance(format!(
                "domain {} was used for training ({})",
                s.domain,
                train_label(bundle)
            )));
        }
    }
    Ok(())
}

/// k-point arms, a GT-box arm and a no-prompt arm on each zero-shot set.
pub fn run_prompt_sweep(bundle: &ModelBundle, sets: &[&EvalSet], k_set: &[usize], seed: u64, seeds: u64) -> Result<Vec<EvalRecord>> {
    check_zero_shot(bundle, sets)?;
    if seeds < 3 {
        return Err(Error::Config(format!("point arms need at least 3 seeds, got {seeds}")));
    }
    let mut arms: Vec<GeneratorKind> = k_set.iter().map(|&k| GeneratorKind::GtPoints(k)).collect();
    arms.push(GeneratorKind::GtBox);
    arms.push(GeneratorKind::None);
    let mut out = Vec::new();
    for set in sets {
        for &kind in &arms {
            let m = evaluate_arm_seeds(bundle, set, kind, seed, seeds)?;
            out.push(record(bundle, "prompt_sweep", kind, set, m, seed));
        }
    }
    Ok(out)
}

/// Detector and segmenter box prompts on every set (in-domain test split
/// included).
pub fn run_generator_table(bundle: &ModelBundle, sets: &[&EvalSet], seed: u64) -> Result<Vec<EvalRecord>> {
    bundle.detector()?;
    bundle.segmenter()?;
    let mut out = Vec::new();
    for set in sets {
        for (method, kind) in [("detector", GeneratorKind::DetectorBox), ("segmenter", GeneratorKind::SegmenterBox)] {
            let m = evaluate_arm(bundle, set, kind, seed)?;
            out.push(record(bundle, method, kind, set, m, seed));
        }
    }
    Ok(out)
}

/// No prompt, GT box and detector box on zero-shot sets.
pub fn run_zeroshot_table(bundle: &ModelBundle, sets: &[&EvalSet], seed: u64) -> Result<Vec<EvalRecord>> {
    check_zero_shot(bundle, sets)?;
    bundle.detector()?;
    let mut out = Vec::new();
    for set in sets {
        for (method, kind) in [
            ("no_prompt", GeneratorKind::None),
            ("gt_box_prompt", GeneratorKind::GtBox),
            ("detector_prompt", GeneratorKind::DetectorBox),
        ] {
            let m = evaluate_arm(bundle, set, kind, seed)?;
            out.push(record(bundle, method, kind, set, m, seed));
        }
    }
    Ok(out)
}
