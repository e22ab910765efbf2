//! Synthetic tongue datasets.
//!
//! Three domains share one renderer: a textured, shaded ellipse with its top
//! cut flat. Domain A is a clean studio capture, B shifts illumination,
//! scale and placement, and C adds clutter plus tongue-coloured distractor
//! blobs. Every sample draws from its own RNG stream keyed by
//! `(seed, domain, index)`, so any subset regenerates identically.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::generator::box_from_mask;
use crate::image::{Mask, RgbImage};
use crate::prompt::BoxPrompt;
use crate::util::Fnv1a;

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DomainId {
    A,
    B,
    C,
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainId::A => "A",
            DomainId::B => "B",
            DomainId::C => "C",
        })
    }
}

impl FromStr for DomainId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(DomainId::A),
            "B" | "b" => Ok(DomainId::B),
            "C" | "c" => Ok(DomainId::C),
            _ => Err(Error::Config(format!("unknown domain `{s}` (expected A, B or C)"))),
        }
    }
}

/// Closed interval sampled uniformly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }

    fn check(&self, what: &str) -> Result<()> {
        if !self.lo.is_finite() || !self.hi.is_finite() || self.lo > self.hi {
            return Err(Error::Config(format!("{what}: invalid range [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Background {
    /// Near-uniform dark backdrop.
    Solid { rgb: [Range; 3], noise: f64 },
    /// Random base colour overlaid with rectangles and ellipses of random colours.
    Clutter { shapes: (usize, usize), noise: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub id: DomainId,
    pub image_size: usize,
    /// Tongue centre as a fraction of the image side.
    pub center_x: Range,
    pub center_y: Range,
    /// Semi-axes as fractions of the image side.
    pub axis_x: Range,
    pub axis_y: Range,
    pub rotation: Range,
    /// The top is cut where the local vertical coordinate drops below `-flat · axis_y`.
    pub flat_top: Range,
    pub tongue_rgb: [Range; 3],
    /// Amplitude of multiplicative per-pixel texture noise.
    pub texture: f64,
    pub background: Background,
    pub gain: Range,
    pub bias: Range,
    pub distractors: (usize, usize),
    pub distractor_axis: Range,
}

const TONGUE_RGB: [Range; 3] = [Range::new(170.0, 230.0), Range::new(70.0, 120.0), Range::new(80.0, 130.0)];
const MAX_DISTRACTOR_OVERLAP: f64 = 0.2;

impl DomainSpec {
    pub fn preset(id: DomainId) -> Self {
        let base = DomainSpec {
            id,
            image_size: 128,
            center_x: Range::new(0.46, 0.54),
            center_y: Range::new(0.5, 0.58),
            axis_x: Range::new(0.2, 0.28),
            axis_y: Range::new(0.23, 0.32),
            rotation: Range::new(-0.15, 0.15),
            flat_top: Range::new(0.55, 0.8),
            tongue_rgb: TONGUE_RGB,
            texture: 0.08,
            background: Background::Solid {
                rgb: [Range::new(15.0, 30.0), Range::new(12.0, 24.0), Range::new(12.0, 24.0)],
                noise: 4.0,
            },
            gain: Range::new(1.0, 1.0),
            bias: Range::new(0.0, 0.0),
            distractors: (0, 0),
            distractor_axis: Range::new(0.05, 0.12),
        };
        match id {
            DomainId::A => base,
            DomainId::B => DomainSpec {
                center_x: Range::new(0.3, 0.7),
                center_y: Range::new(0.3, 0.7),
                axis_x: Range::new(0.14, 0.32),
                axis_y: Range::new(0.16, 0.34),
                rotation: Range::new(-0.3, 0.3),
                background: Background::Solid {
                    rgb: [Range::new(40.0, 90.0), Range::new(45.0, 95.0), Range::new(55.0, 110.0)],
                    noise: 6.0,
                },
                gain: Range::new(0.75, 1.25),
                bias: Range::new(-25.0, 25.0),
                ..base
            },
            DomainId::C => DomainSpec {
                center_x: Range::new(0.35, 0.65),
                center_y: Range::new(0.35, 0.65),
                axis_x: Range::new(0.17, 0.28),
                axis_y: Range::new(0.2, 0.32),
                rotation: Range::new(-0.3, 0.3),
                background: Background::Clutter { shapes: (4, 8), noise: 10.0 },
                distractors: (1, 3),
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config(format!("image size {} too small", self.image_size)));
        }
        let ranges = [
            (&self.center_x, "center_x"),
            (&self.center_y, "center_y"),
            (&self.axis_x, "axis_x"),
            (&self.axis_y, "axis_y"),
            (&self.rotation, "rotation"),
            (&self.flat_top, "flat_top"),
            (&self.gain, "gain"),
            (&self.bias, "bias"),
            (&self.distractor_axis, "distractor_axis"),
            (&self.tongue_rgb[0], "tongue_r"),
            (&self.tongue_rgb[1], "tongue_g"),
            (&self.tongue_rgb[2], "tongue_b"),
        ];
        for (r, name) in ranges {
            r.check(name)?;
        }
        let unit = |r: &Range| r.lo >= 0.0 && r.hi <= 1.0;
        if !unit(&self.center_x) || !unit(&self.center_y) {
            return Err(Error::Config("tongue centre must lie in the unit square".into()));
        }
        if self.axis_x.lo <= 0.0 || self.axis_y.lo <= 0.0 || self.axis_x.hi > 0.45 || self.axis_y.hi > 0.45 {
            return Err(Error::Config("tongue semi-axes must lie in (0, 0.45]".into()));
        }
        if self.flat_top.lo <= 0.0 || self.flat_top.hi > 1.0 {
            return Err(Error::Config("flat_top must lie in (0, 1]".into()));
        }
        if self.gain.lo <= 0.0 || self.texture < 0.0 || self.texture >= 1.0 || !self.texture.is_finite() {
            return Err(Error::Config("gain must be positive and texture in [0, 1)".into()));
        }
        if self.distractors.0 > self.distractors.1 || self.distractor_axis.lo <= 0.0 {
            return Err(Error::Config("invalid distractor settings".into()));
        }
        match &self.background {
            Background::Solid { rgb, noise } => {
                for r in rgb {
                    r.check("background")?;
                }
                if !noise.is_finite() || *noise < 0.0 {
                    return Err(Error::Config("background noise must be non-negative".into()));
                }
            }
            Background::Clutter { shapes, noise } => {
                if shapes.0 > shapes.1 || !noise.is_finite() || *noise < 0.0 {
                    return Err(Error::Config("invalid clutter settings".into()));
                }
            }
        }
        Ok(())
    }

    /// Stable 64-bit fingerprint of every field.
    pub fn hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.update(format!("{self:?}").as_bytes());
        h.finish()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub mask: Mask,
    pub bbox: BoxPrompt,
}

impl Sample {
    pub fn new(image: RgbImage, mask: Mask) -> Result<Self> {
        if image.width != mask.width || image.height != mask.height {
            return Err(Error::Data(format!(
                "image {}×{} vs mask {}×{}",
                image.width, image.height, mask.width, mask.height
            )));
        }
        let bbox = box_from_mask(&mask)?;
        Ok(Sample { image, mask, bbox })
    }
}

/// RNG seed for one sample.
pub fn substream_seed(seed: u64, domain: DomainId, index: usize) -> u64 {
    let mut h = Fnv1a::new();
    h.update(&seed.to_le_bytes());
    h.update(domain.to_string().as_bytes());
    h.update(&(index as u64).to_le_bytes());
    h.finish()
}

struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    cos: f64,
    sin: f64,
    flat: Option<f64>,
}

impl Ellipse {
    /// Normalised squared radius at pixel centre `(x, y)`, or `None` outside.
    fn radius2(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.ax;
        let v = (-dx * self.sin + dy * self.cos) / self.ay;
        let rho = u * u + v * v;
        if rho > 1.0 || self.flat.is_some_and(|f| v < -f) {
            return None;
        }
        Some((rho, u))
    }

    fn half_extent(&self) -> (f64, f64) {
        let hx = ((self.ax * self.cos).powi(2) + (self.ay * self.sin).powi(2)).sqrt();
        let hy = ((self.ax * self.sin).powi(2) + (self.ay * self.cos).powi(2)).sqrt();
        (hx, hy)
    }
}

fn sample_rgb<R: Rng>(ranges: &[Range; 3], rng: &mut R) -> [f64; 3] {
    [ranges[0].sample(rng), ranges[1].sample(rng), ranges[2].sample(rng)]
}

/// Renders sample `index` of `spec` under `seed`.
pub fn render(spec: &DomainSpec, seed: u64, index: usize) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, spec.id, index));
    let n = spec.image_size;
    let s = n as f64;
    let mut canvas = vec![[0.0f64; 3]; n * n];

    match &spec.background {
        Background::Solid { rgb, noise } => {
            let base = sample_rgb(rgb, &mut rng);
            for px in canvas.iter_mut() {
                let e = rng.gen_range(-1.0..=1.0) * noise;
                *px = [base[0] + e, base[1] + e, base[2] + e];
            }
        }
        Background::Clutter { shapes, noise } => {
            let any = [Range::new(30.0, 220.0); 3];
            let base = sample_rgb(&any, &mut rng);
            canvas.iter_mut().for_each(|px| *px = base);
            let count = rng.gen_range(shapes.0..=shapes.1);
            for _ in 0..count {
                let col = sample_rgb(&any, &mut rng);
                let (x0, y0) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
                let (w, h) = (rng.gen_range(0.1..0.5) * s, rng.gen_range(0.1..0.5) * s);
                let round = rng.gen_bool(0.5);
                for r in 0..n {
                    for c in 0..n {
                        let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                        let inside = if round {
                            let (u, v) = ((x - x0) / (w / 2.0), (y - y0) / (h / 2.0));
                            u * u + v * v <= 1.0
                        } else {
                            x >= x0 && x < x0 + w && y >= y0 && y < y0 + h
                        };
                        if inside {
                            canvas[r * n + c] = col;
                        }
                    }
                }
            }
            for px in canvas.iter_mut() {
                for ch in px.iter_mut() {
                    *ch += rng.gen_range(-1.0..=1.0) * noise;
                }
            }
        }
    }

    let theta = spec.rotation.sample(&mut rng);
    let mut tongue = Ellipse {
        cx: spec.center_x.sample(&mut rng) * s,
        cy: spec.center_y.sample(&mut rng) * s,
        ax: spec.axis_x.sample(&mut rng) * s,
        ay: spec.axis_y.sample(&mut rng) * s,
        cos: theta.cos(),
        sin: theta.sin(),
        flat: Some(spec.flat_top.sample(&mut rng)),
    };
    let (hx, hy) = tongue.half_extent();
    tongue.cx = tongue.cx.clamp((hx + 2.0).min(s / 2.0), (s - hx - 2.0).max(s / 2.0));
    tongue.cy = tongue.cy.clamp((hy + 2.0).min(s / 2.0), (s - hy - 2.0).max(s / 2.0));
    let tongue_rgb = sample_rgb(&spec.tongue_rgb, &mut rng);

    let mut mask = Mask::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            if tongue.radius2(c as f64 + 0.5, r as f64 + 0.5).is_some() {
                mask.data[r * n + c] = 1;
            }
        }
    }
    let tongue_area = mask.count();
    if tongue_area == 0 {
        return Err(Error::Data(format!("domain {} sample {index} rendered an empty tongue", spec.id)));
    }

    // Distractors sit behind the tongue and may overlap it only slightly.
    let count = rng.gen_range(spec.distractors.0..=spec.distractors.1);
    for _ in 0..count {
        let rgb = sample_rgb(&spec.tongue_rgb, &mut rng);
        let mut placed = None;
        for _ in 0..50 {
            let a = spec.distractor_axis.sample(&mut rng) * s;
            let b = spec.distractor_axis.sample(&mut rng) * s;
            let t: f64 = rng.gen_range(-1.5..1.5);
            let e = Ellipse {
                cx: rng.gen_range(0.0..s),
                cy: rng.gen_range(0.0..s),
                ax: a,
                ay: b,
                cos: t.cos(),
                sin: t.sin(),
                flat: None,
            };
            let mut overlap = 0;
            let mut area = 0;
            for r in 0..n {
                for c in 0..n {
                    if e.radius2(c as f64 + 0.5, r as f64 + 0.5).is_some() {
                        area += 1;
                        overlap += mask.data[r * n + c] as usize;
                    }
                }
            }
            if area > 0 && (overlap as f64) <= MAX_DISTRACTOR_OVERLAP * tongue_area as f64 {
                placed = Some(e);
                break;
            }
        }
        if let Some(e) = placed {
            paint(&mut canvas, n, &e, rgb, spec.texture, &mut rng);
        }
    }
    paint(&mut canvas, n, &tongue, tongue_rgb, spec.texture, &mut rng);

    let gain = spec.gain.sample(&mut rng);
    let bias = spec.bias.sample(&mut rng);
    let data = canvas
        .iter()
        .flat_map(|px| px.map(|v| (v * gain + bias).round().clamp(0.0, 255.0) as u8))
        .collect();
    Sample::new(RgbImage::new(n, n, data)?, mask)
}

fn paint<R: Rng>(canvas: &mut [[f64; 3]], n: usize, e: &Ellipse, rgb: [f64; 3], texture: f64, rng: &mut R) {
    for r in 0..n {
        for c in 0..n {
            let Some((rho, u)) = e.radius2(c as f64 + 0.5, r as f64 + 0.5) else {
                continue;
            };
            let shade = (1.0 - 0.3 * rho) * (1.0 - 0.12 * (-(u / 0.15).powi(2)).exp());
            let grain = 1.0 + texture * rng.gen_range(-1.0..=1.0);
            canvas[r * n + c] = rgb.map(|v| v * shade * grain);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub domain: DomainId,
    pub index: usize,
}

/// Index of a dataset directory. Paths are relative to `root`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub seed: u64,
    pub spec_hash: u64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn domains(&self) -> HashSet<DomainId> {
        self.entries.iter().map(|e| e.domain).collect()
    }

    pub fn load_sample(&self, i: usize) -> Result<Sample> {
        let e = &self.entries[i];
        load_sample(&self.root.join(&e.image), &self.root.join(&e.mask))
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.load_sample(i)).collect()
    }

    pub fn save(&self) -> Result<()> {
        let mut text = format!("seed\t{}\nspec_hash\t{:016x}\n", self.seed, self.spec_hash);
        for e in &self.entries {
            text += &format!(
                "sample\t{}\t{}\t{}\t{}\n",
                e.image.display(),
                e.mask.display(),
                e.domain,
                e.index
            );
        }
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut seed = None;
        let mut spec_hash = None;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::parse(&path, format!("line {}: {msg}", n + 1));
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                ["seed", v] => seed = Some(v.parse().map_err(|_| bad("bad seed"))?),
                ["spec_hash", v] => spec_hash = Some(u64::from_str_radix(v, 16).map_err(|_| bad("bad hash"))?),
                ["sample", image, mask, domain, index] => entries.push(ManifestEntry {
                    image: image.into(),
                    mask: mask.into(),
                    domain: domain.parse().map_err(|_| bad("bad domain"))?,
                    index: index.parse().map_err(|_| bad("bad index"))?,
                }),
                _ => return Err(bad("unrecognised record")),
            }
        }
        Ok(Manifest {
            root: root.to_path_buf(),
            seed: seed.ok_or_else(|| Error::parse(&path, "missing seed record"))?,
            spec_hash: spec_hash.ok_or_else(|| Error::parse(&path, "missing spec_hash record"))?,
            entries,
        })
    }

    /// Seeded shuffle then prefix split into `(train, test)`.
    pub fn split(&self, train_fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Config(format!("train fraction {train_fraction} outside (0, 1)")));
        }
        let n_train = (self.len() as f64 * train_fraction).round() as usize;
        if n_train == 0 || n_train == self.len() {
            return Err(Error::Config(format!(
                "fraction {train_fraction} of {} samples leaves one side empty",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pick = |idx: &[usize]| Manifest {
            entries: idx.iter().map(|&i| self.entries[i].clone()).collect(),
            ..self.clone()
        };
        Ok((pick(&order[..n_train]), pick(&order[n_train..])))
    }
}

pub fn save_sample(sample: &Sample, image_path: &Path, mask_path: &Path) -> Result<()> {
    sample.image.save_ppm(image_path)?;
    sample.mask.save_pgm(mask_path)
}

/// Loads and re-validates a sample; the box is re-derived from the mask.
pub fn load_sample(image_path: &Path, mask_path: &Path) -> Result<Sample> {
    let image = RgbImage::load_ppm(image_path)?;
    let mask = Mask::load_pgm(mask_path)?;
    if image.width != mask.width || image.height != mask.height {
        return Err(Error::parse(
            mask_path,
            format!(
                "mask is {}×{} but image {} is {}×{}",
                mask.width,
                mask.height,
                image_path.display(),
                image.width,
                image.height
            ),
        ));
    }
    if mask.count() == 0 {
        return Err(Error::parse(mask_path, "mask has no foreground"));
    }
    Sample::new(image, mask)
}

/// Writes `n` samples of `spec` under `root` and returns the manifest.
pub fn generate(spec: &DomainSpec, n: usize, seed: u64, root: &Path) -> Result<Manifest> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    for dir in ["images", "masks"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let tag = spec.id.to_string().to_lowercase();
    let mut entries = Vec::with_capacity(n);
    for index in 0..n {
        let sample = render(spec, seed, index)?;
        let image = PathBuf::from(format!("images/{tag}_{index:05}.ppm"));
        let mask = PathBuf::from(format!("masks/{tag}_{index:05}.pgm"));
        save_sample(&sample, &root.join(&image), &root.join(&mask))?;
        entries.push(ManifestEntry { image, mask, domain: spec.id, index });
    }
    let manifest = Manifest {
        root: root.to_path_buf(),
        seed,
        spec_hash: spec.hash(),
        entries,
    };
    manifest.save()?;
    Ok(manifest)
}

/// Loads an arbitrary-size image/mask pair and resamples it to `target_size`.
pub fn ingest_external(image_path: &Path, mask_path: &Path, target_size: usize) -> Result<Sample> {
    if target_size == 0 {
        return Err(Error::Config("target size must be positive".into()));
    }
    let image = RgbImage::load_ppm(image_path)?;
    let mask = Mask::load_pgm(mask_path)?;
    if mask.count() == 0 {
        return Err(Error::parse(mask_path, "mask has no foreground"));
    }
    Sample::new(
        image.resize_bilinear(target_size, target_size),
        mask.resize_nearest(target_size, target_size),
    )
}
