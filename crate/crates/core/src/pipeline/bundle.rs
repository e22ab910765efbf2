//! A directory holding every trained component plus its configuration and
//! training history.
//!
//! `weights.pseg` stores parameters; `bundle.txt` stores the model config,
//! the component list and one `provenance = ...` line per training stage.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint;
use super::config::{parse_kv, ModelConfig, Stage};
use crate::decoder::MaskDecoder;
use crate::encoder::ImageEncoder;
use crate::error::{Error, Result};
use crate::generator::{Detector, Segmenter};
use crate::numerics::ParamStore;
use crate::prompt::PromptEncoder;
use crate::synth::DomainId;

pub const WEIGHTS_FILE: &str = "weights.pseg";
pub const META_FILE: &str = "bundle.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub stage: Stage,
    pub seed: u64,
    pub domains: Vec<DomainId>,
    pub epochs: usize,
    pub best_epoch: usize,
    /// Selection score of the kept weights (validation mIoU or loss).
    pub score: f64,
}

impl fmt::Display for StageRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let domains: Vec<String> = self.domains.iter().map(|d| d.to_string()).collect();
        write!(
            f,
            "{} seed={} domains={} epochs={} best_epoch={} score={:.6}",
            self.stage,
            self.seed,
            domains.join(","),
            self.epochs,
            self.best_epoch,
            self.score
        )
    }
}

impl std::str::FromStr for StageRecord {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed provenance `{s}`"));
        let mut parts = s.split_whitespace();
        let stage: Stage = parts.next().ok_or_else(bad)?.parse()?;
        let mut rec = StageRecord {
            stage,
            seed: 0,
            domains: Vec::new(),
            epochs: 0,
            best_epoch: 0,
            score: 0.0,
        };
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(bad)?;
            match k {
                "seed" => rec.seed = v.parse().map_err(|_| bad())?,
                "domains" if v.is_empty() => {}
                "domains" => rec.domains = v.split(',').map(str::parse).collect::<Result<_>>()?,
                "epochs" => rec.epochs = v.parse().map_err(|_| bad())?,
                "best_epoch" => rec.best_epoch = v.parse().map_err(|_| bad())?,
                "score" => rec.score = v.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
        }
        Ok(rec)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Components {
    pub base: bool,
    pub detector: bool,
    pub segmenter: bool,
}

impl Components {
    fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.base {
            v.push("base");
        }
        if self.detector {
            v.push("detector");
        }
        if self.segmenter {
            v.push("segmenter");
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub components: Components,
    pub provenance: Vec<StageRecord>,
}

impl ModelBundle {
    /// Freshly initialised parameters for the listed components.
    pub fn init(config: ModelConfig, components: Components, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        if components.base {
            ImageEncoder::new(config.encoder.clone())?.init_params(&mut params, &mut rng)?;
            PromptEncoder::new(config.prompt.clone())?.init_params(&mut params, &mut rng)?;
            MaskDecoder::new(config.decoder.clone())?.init_params(&mut params, &mut rng)?;
        }
        if components.detector {
            Detector::new(config.detector.clone())?.init_params(&mut params, &mut rng)?;
        }
        if components.segmenter {
            Segmenter::new(config.segmenter.clone())?.init_params(&mut params, &mut rng)?;
        }
        Ok(ModelBundle {
            config,
            params,
            components,
            provenance: Vec::new(),
        })
    }

    pub fn encoder(&self) -> Result<ImageEncoder> {
        self.require(self.components.base, "image encoder")?;
        ImageEncoder::new(self.config.encoder.clone())
    }

    pub fn prompt_encoder(&self) -> Result<PromptEncoder> {
        self.require(self.components.base, "prompt encoder")?;
        PromptEncoder::new(self.config.prompt.clone())
    }

    pub fn decoder(&self) -> Result<MaskDecoder> {
        self.require(self.components.base, "mask decoder")?;
        MaskDecoder::new(self.config.decoder.clone())
    }

    pub fn detector(&self) -> Result<Detector> {
        self.require(self.components.detector, "detector")?;
        Detector::new(self.config.detector.clone())
    }

    pub fn segmenter(&self) -> Result<Segmenter> {
        self.require(self.components.segmenter, "segmenter")?;
        Segmenter::new(self.config.segmenter.clone())
    }

    fn require(&self, present: bool, what: &str) -> Result<()> {
        if present {
            Ok(())
        } else {
            Err(Error::Config(format!("bundle has no {what} weights")))
        }
    }

    /// Domains seen by any training stage.
    pub fn training_domains(&self) -> Vec<DomainId> {
        let mut d: Vec<DomainId> = self.provenance.iter().flat_map(|r| r.domains.clone()).collect();
        d.sort();
        d.dedup();
        d
    }

    /// Copies another bundle's detector or segmenter into this one, with its history.
    pub fn attach(&mut self, other: &ModelBundle) -> Result<()> {
        let o = other.components;
        if !o.detector && !o.segmenter {
            return Err(Error::Config("nothing to attach: no detector or segmenter weights".into()));
        }
        if (o.detector && self.components.detector) || (o.segmenter && self.components.segmenter) {
            return Err(Error::Config("bundle already holds those generator weights".into()));
        }
        if (o.detector && other.config.detector != self.config.detector)
            || (o.segmenter && other.config.segmenter != self.config.segmenter)
        {
            return Err(Error::Config("attached generator config differs from bundle config".into()));
        }
        let components = Components {
            base: self.components.base,
            detector: self.components.detector || o.detector,
            segmenter: self.components.segmenter || o.segmenter,
        };
        // Rebuild so parameter order stays canonical whatever the attach order.
        let mut merged = ModelBundle::init(self.config.clone(), components, 0)?;
        merged.params.load_values(&self.params)?;
        let mut part = ParamStore::new();
        for (n, t) in other.params.iter() {
            if (o.detector && n.starts_with("detector.")) || (o.segmenter && n.starts_with("segmenter.")) {
                part.insert(n, t.clone())?;
            }
        }
        merged.params.load_values(&part)?;
        merged.provenance = self.provenance.clone();
        merged.provenance.extend(other.provenance.iter().cloned());
        *self = merged;
        Ok(())
    }

    fn meta_text(&self) -> String {
        let mut s = format!("components = {}\n", self.components.names().join(","));
        for (k, v) in self.config.to_kv() {
            s += &format!("{k} = {v}\n");
        }
        for r in &self.provenance {
            s += &format!("provenance = {r}\n");
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&self.params, &dir.join(WEIGHTS_FILE))?;
        let meta = dir.join(META_FILE);
        std::fs::write(&meta, self.meta_text()).map_err(|e| Error::io(&meta, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let mut provenance = Vec::new();
        let mut rest = String::new();
        for line in text.lines() {
            match line.split_once('=') {
                Some((k, v)) if k.trim() == "provenance" => provenance.push(v.trim().parse()?),
                _ => {
                    rest += line;
                    rest.push('\n');
                }
            }
        }
        let mut kv = parse_kv(&rest).map_err(|e| Error::parse(&meta_path, e.to_string()))?;
        let comps = kv
            .remove("components")
            .ok_or_else(|| Error::parse(&meta_path, "missing `components`"))?;
        let mut components = Components::default();
        for c in comps.split(',').filter(|c| !c.is_empty()) {
            match c.trim() {
                "base" => components.base = true,
                "detector" => components.detector = true,
                "segmenter" => components.segmenter = true,
                other => return Err(Error::parse(&meta_path, format!("unknown component `{other}`"))),
            }
        }
        if let Some(k) = kv.keys().find(|k| !ModelConfig::is_key(k)) {
            return Err(Error::parse(&meta_path, format!("unknown key `{k}`")));
        }
        let mut config = ModelConfig::default();
        config.apply(&kv)?;
        let mut bundle = ModelBundle::init(config, components, 0)?;
        checkpoint::load_into(&mut bundle.params, &dir.join(WEIGHTS_FILE))?;
        bundle.provenance = provenance;
        Ok(bundle)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::testutil::tiny_config;

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let all = Components {
            base: true,
            detector: true,
            segmenter: true,
        };
        let mut b = ModelBundle::init(tiny_config(), all, 3).unwrap();
        b.provenance.push("pretrain seed=3 domains=A epochs=2 best_epoch=1 score=0.5".parse().unwrap());
        b.save(&dir.path().join("one")).unwrap();
        let back = ModelBundle::load(&dir.path().join("one")).unwrap();
        assert_eq!(back, b);
        back.save(&dir.path().join("two")).unwrap();
        for f in [WEIGHTS_FILE, META_FILE] {
            assert_eq!(
                std::fs::read(dir.path().join("one").join(f)).unwrap(),
                std::fs::read(dir.path().join("two").join(f)).unwrap()
            );
        }
        assert_eq!(back.training_domains(), vec![DomainId::A]);
    }

    #[test]
    fn attach_merges_generators() {
        let base = Components {
            base: true,
            ..Components::default()
        };
        let det = Components {
            detector: true,
            ..Components::default()
        };
        let mut a = ModelBundle::init(tiny_config(), base, 1).unwrap();
        let d = ModelBundle::init(tiny_config(), det, 2).unwrap();
        assert!(a.detector().is_err());
        a.attach(&d).unwrap();
        assert!(a.detector().is_ok());
        assert!(a.attach(&d).is_err());
        assert!(a.clone().attach(&ModelBundle::init(tiny_config(), base, 1).unwrap()).is_err());
    }
}
