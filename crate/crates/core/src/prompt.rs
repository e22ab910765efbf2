//! Sparse (point, box) and dense (mask) prompt encoding, plus the shared
//! random-Fourier positional encoding.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{ParamStore, Tape, Tensor, Var};

const PREFIX: &str = "prompt";
pub(crate) const PE_FREQ: &str = "prompt.pe_freq";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointLabel {
    Background,
    Foreground,
}

impl PointLabel {
    fn row(self) -> usize {
        match self {
            PointLabel::Background => 0,
            PointLabel::Foreground => 1,
        }
    }
}

/// A click at normalised image coordinates (`x` is the column axis).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointPrompt {
    pub x: f64,
    pub y: f64,
    pub label: PointLabel,
}

impl PointPrompt {
    pub fn new(x: f64, y: f64, label: PointLabel) -> Result<Self> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::Prompt(format!("point ({x}, {y}) outside the unit square")));
        }
        Ok(PointPrompt { x, y, label })
    }
}

/// Axis-aligned box with top-left `(x0, y0)` and bottom-right `(x1, y1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxPrompt {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxPrompt {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = BoxPrompt { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn full() -> Self {
        BoxPrompt { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        if ![self.x0, self.y0, self.x1, self.y1].into_iter().all(ok) {
            return Err(Error::Prompt(format!("box {self:?} outside the unit square")));
        }
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(Error::Prompt(format!("box {self:?} has inverted or empty corners")));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn iou(&self, other: &BoxPrompt) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

/// A low-resolution soft mask, `side × side` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrompt {
    pub side: usize,
    pub data: Vec<f64>,
}

impl MaskPrompt {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        if side == 0 || data.len() != side * side {
            return Err(Error::Prompt(format!("mask prompt of {} values is not {side}²", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mask prompt"));
        }
        Ok(MaskPrompt { side, data })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptSet {
    pub points: Vec<PointPrompt>,
    pub boxes: Option<BoxPrompt>,
    pub mask: Option<MaskPrompt>,
}

impl PromptSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_box(b: BoxPrompt) -> Self {
        PromptSet { boxes: Some(b), ..Self::default() }
    }

    pub fn from_points(points: Vec<PointPrompt>) -> Self {
        PromptSet { points, ..Self::default() }
    }

    /// Number of sparse tokens this set produces.
    pub fn token_count(&self) -> usize {
        self.points.len() + if self.boxes.is_some() { 2 } else { 0 }
    }

    fn same_layout(&self, other: &PromptSet) -> bool {
        self.points.len() == other.points.len()
            && self.boxes.is_some() == other.boxes.is_some()
            && self.mask.as_ref().map(|m| m.side) == other.mask.as_ref().map(|m| m.side)
    }
}

/// Random Fourier features: `[sin(2π F·p); cos(2π F·p)]` with `F` a fixed
/// `C/2 × 2` Gaussian matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoder {
    freq: Vec<f64>,
}

impl PositionalEncoder {
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(Error::Config(format!("positional encoding width {dim} must be even")));
        }
        let freq = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Ok(PositionalEncoder { freq })
    }

    pub fn from_matrix(freq: Vec<f64>) -> Result<Self> {
        if freq.is_empty() || freq.len() % 2 != 0 {
            return Err(Error::Config("frequency matrix must be C/2 × 2".into()));
        }
        Ok(PositionalEncoder { freq })
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let t = store
            .get(PE_FREQ)
            .ok_or_else(|| Error::Config(format!("missing `{PE_FREQ}`")))?;
        Self::from_matrix(t.data().to_vec())
    }

    pub fn dim(&self) -> usize {
        self.freq.len()
    }

    pub fn matrix(&self) -> &[f64] {
        &self.freq
    }

    pub fn encode(&self, x: f64, y: f64) -> Vec<f64> {
        let half = self.freq.len() / 2;
        let mut out = vec![0.0; 2 * half];
        for i in 0..half {
            let a = std::f64::consts::TAU * (self.freq[2 * i] * x + self.freq[2 * i + 1] * y);
            out[i] = a.sin();
            out[half + i] = a.cos();
        }
        out
    }

    /// Encoding of every cell centre of a `g × g` grid, `[g, g, C]`.
    pub fn grid(&self, g: usize) -> Tensor {
        let mut data = Vec::with_capacity(g * g * self.dim());
        for i in 0..g {
            for j in 0..g {
                let y = (i as f64 + 0.5) / g as f64;
                let x = (j as f64 + 0.5) / g as f64;
                data.extend(self.encode(x, y));
            }
        }
        Tensor::new(&[g, g, self.dim()], data).expect("sin/cos are finite")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptEncoderConfig {
    pub embed_dim: usize,
    pub input_size: usize,
    /// Channel widths of the two stride-2 mask convolutions.
    pub mask_channels: (usize, usize),
}

impl Default for PromptEncoderConfig {
    fn default() -> Self {
        PromptEncoderConfig {
            embed_dim: 32,
            input_size: 128,
            mask_channels: (2, 8),
        }
    }
}

impl PromptEncoderConfig {
    pub fn full_scale() -> Self {
        PromptEncoderConfig {
            embed_dim: 256,
            input_size: 1024,
            mask_channels: (4, 16),
        }
    }

    pub fn mask_side(&self) -> usize {
        self.input_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!("prompt embed dim {} must be even", self.embed_dim)));
        }
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(Error::Config(format!("input size {} not divisible by 16", self.input_size)));
        }
        if self.mask_channels.0 == 0 || self.mask_channels.1 == 0 {
            return Err(Error::Config("mask channels must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PromptEncoder {
    config: PromptEncoderConfig,
}

impl PromptEncoder {
    pub fn new(config: PromptEncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(PromptEncoder { config })
    }

    pub fn config(&self) -> &PromptEncoderConfig {
        &self.config
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let c = self.config.embed_dim;
        let pe = PositionalEncoder::new(c, rng)?;
        store.insert_buffer(PE_FREQ, Tensor::new(&[c / 2, 2], pe.freq)?)?;
        store.insert(format!("{PREFIX}.point_embed"), Tensor::randn(&[2, c], 1.0, rng))?;
        store.insert(format!("{PREFIX}.corner_embed"), Tensor::randn(&[2, c], 1.0, rng))?;
        store.insert(format!("{PREFIX}.no_mask"), Tensor::randn(&[c], 1.0, rng))?;
        let (c1, c2) = self.config.mask_channels;
        nn::init_conv(store, &format!("{PREFIX}.mask.conv1"), 2, 1, c1, true, rng)?;
        nn::init_layer_norm(store, &format!("{PREFIX}.mask.norm1"), c1)?;
        nn::init_conv(store, &format!("{PREFIX}.mask.conv2"), 2, c1, c2, true, rng)?;
        nn::init_layer_norm(store, &format!("{PREFIX}.mask.norm2"), c2)?;
        nn::init_conv(store, &format!("{PREFIX}.mask.conv3"), 1, c2, c, true, rng)
    }

    /// Point tokens for a batch: `[B, k, C]`. Every set must hold `k` points.
    pub fn encode_points(&self, tape: &mut Tape, store: &ParamStore, points: &[&[PointPrompt]]) -> Result<Option<Var>> {
        let b = points.len();
        let k = points.first().map_or(0, |p| p.len());
        if points.iter().any(|p| p.len() != k) {
            return Err(Error::Prompt("point counts differ within a batch".into()));
        }
        if b == 0 || k == 0 {
            return Ok(None);
        }
        let pe = PositionalEncoder::from_store(store)?;
        let c = pe.dim();
        let mut onehot = vec![0.0; b * k * 2];
        let mut enc = Vec::with_capacity(b * k * c);
        for (i, p) in points.iter().flat_map(|p| p.iter()).enumerate() {
            onehot[i * 2 + p.label.row()] = 1.0;
            enc.extend(pe.encode(p.x, p.y));
        }
        let table = tape.param(store, &format!("{PREFIX}.point_embed"))?;
        let onehot = tape.constant(&[b * k, 2], onehot)?;
        let learned = tape.matmul(onehot, table)?;
        let enc = tape.constant(&[b * k, c], enc)?;
        let tokens = tape.add(enc, learned)?;
        Ok(Some(tape.reshape(tokens, &[b, k, c])?))
    }

    /// Corner tokens for a batch of boxes: `[B, 2, C]`.
    pub fn encode_box(&self, tape: &mut Tape, store: &ParamStore, boxes: &[BoxPrompt]) -> Result<Var> {
        if boxes.is_empty() {
            return Err(Error::Prompt("no boxes to encode".into()));
        }
        let pe = PositionalEncoder::from_store(store)?;
        let c = pe.dim();
        let mut enc = Vec::with_capacity(boxes.len() * 2 * c);
        for bx in boxes {
            bx.validate()?;
            enc.extend(pe.encode(bx.x0, bx.y0));
            enc.extend(pe.encode(bx.x1, bx.y1));
        }
        let corners = tape.param(store, &format!("{PREFIX}.corner_embed"))?;
        let enc = tape.constant(&[boxes.len(), 2, c], enc)?;
        tape.add(enc, corners)
    }

    /// All sparse tokens, points first then box corners: `[B, T, C]`, or
    /// `None` when the sets carry no sparse prompts.
    pub fn encode_sparse(&self, tape: &mut Tape, store: &ParamStore, prompts: &[PromptSet]) -> Result<Option<Var>> {
        check_uniform(prompts)?;
        let points: Vec<&[PointPrompt]> = prompts.iter().map(|p| p.points.as_slice()).collect();
        let mut parts = Vec::new();
        if let Some(p) = self.encode_points(tape, store, &points)? {
            parts.push(p);
        }
        if prompts[0].boxes.is_some() {
            let boxes: Vec<BoxPrompt> = prompts.iter().map(|p| p.boxes.unwrap()).collect();
            parts.push(self.encode_box(tape, store, &boxes)?);
        }
        match parts.len() {
            0 => Ok(None),
            1 => Ok(Some(parts[0])),
            _ => Ok(Some(tape.concat(&parts, 1)?)),
        }
    }

    /// Dense mask path: `[B, M, M] → [B, G, G, C]` with `M = input_size / 4`.
    pub fn encode_mask(&self, tape: &mut Tape, store: &ParamStore, masks: &[&MaskPrompt]) -> Result<Var> {
        let m = self.config.mask_side();
        if masks.is_empty() {
            return Err(Error::Prompt("no masks to encode".into()));
        }
        let mut data = Vec::with_capacity(masks.len() * m * m);
        for mask in masks {
            if mask.side != m {
                return Err(Error::shape("encode_mask", format!("mask side {} but expected {m}", mask.side)));
            }
            data.extend_from_slice(&mask.data);
        }
        let x = tape.constant(&[masks.len(), m, m, 1], data)?;
        let h = nn::conv(tape, store, &format!("{PREFIX}.mask.conv1"), x, 2, 0)?;
        let h = tape.gelu(h)?;
        let h = nn::layer_norm(tape, store, &format!("{PREFIX}.mask.norm1"), h)?;
        let h = nn::conv(tape, store, &format!("{PREFIX}.mask.conv2"), h, 2, 0)?;
        let h = tape.gelu(h)?;
        let h = nn::layer_norm(tape, store, &format!("{PREFIX}.mask.norm2"), h)?;
        nn::conv(tape, store, &format!("{PREFIX}.mask.conv3"), h, 1, 0)
    }

    /// Adds the dense prompt (or the learned no-mask vector) to `[B, G, G, C]` embeddings.
    pub fn fuse_dense(&self, tape: &mut Tape, store: &ParamStore, embedding: Var, prompts: &[PromptSet]) -> Result<Var> {
        check_uniform(prompts)?;
        let dense = if prompts[0].mask.is_some() {
            let masks: Vec<&MaskPrompt> = prompts.iter().map(|p| p.mask.as_ref().unwrap()).collect();
            let d = self.encode_mask(tape, store, &masks)?;
            if tape.shape(d) != tape.shape(embedding) {
                return Err(Error::shape(
                    "fuse_dense",
                    format!("dense {:?} vs embedding {:?}", tape.shape(d), tape.shape(embedding)),
                ));
            }
            d
        } else {
            let e = tape.shape(embedding);
            if e.last() != Some(&self.config.embed_dim) {
                return Err(Error::shape("fuse_dense", format!("embedding {e:?} has wrong width")));
            }
            tape.param(store, &format!("{PREFIX}.no_mask"))?
        };
        tape.add(embedding, dense)
    }
}

fn check_uniform(prompts: &[PromptSet]) -> Result<()> {
    let first = prompts.first().ok_or_else(|| Error::Prompt("empty prompt batch".into()))?;
    if prompts.iter().any(|p| !p.same_layout(first)) {
        return Err(Error::Prompt("prompt sets in one batch must share a layout".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn setup() -> (PromptEncoder, ParamStore) {
        let pe = PromptEncoder::new(PromptEncoderConfig::default()).unwrap();
        let mut store = ParamStore::new();
        pe.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (pe, store)
    }

    fn fg(x: f64, y: f64) -> PointPrompt {
        PointPrompt::new(x, y, PointLabel::Foreground).unwrap()
    }

    #[test]
    fn zero_frequency_encoding() {
        let pe = PositionalEncoder::from_matrix(vec![0.0; 8]).unwrap();
        let v = pe.encode(0.3, 0.9);
        assert_eq!(&v[..4], &[0.0; 4]);
        assert_eq!(&v[4..], &[1.0; 4]);
    }

    #[test]
    fn encoding_is_seeded_and_bounded() {
        let a = PositionalEncoder::new(32, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = PositionalEncoder::new(32, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        for (x, y) in [(0.0, 0.0), (0.5, 0.25), (1.0, 1.0), (-0.1, 1.2)] {
            let v = a.encode(x, y);
            assert_eq!(v, b.encode(x, y));
            assert!(v.iter().all(|c| c.abs() <= 1.0));
            assert!(v.iter().map(|c| c * c).sum::<f64>() <= 32.0 + 1e-12);
        }
        assert!(PositionalEncoder::new(7, &mut ChaCha8Rng::seed_from_u64(3)).is_err());
    }

    #[test]
    fn grid_uses_cell_centres() {
        let pe = PositionalEncoder::new(8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let g = pe.grid(4);
        assert_eq!(g.shape(), &[4, 4, 8]);
        let cell = &g.data()[(2 * 4 + 1) * 8..(2 * 4 + 2) * 8];
        assert_eq!(cell, pe.encode(1.5 / 4.0, 2.5 / 4.0).as_slice());
    }

    #[test]
    fn point_tokens() {
        let (enc, store) = setup();
        let mut t = Tape::new(false, 0);
        assert!(enc.encode_points(&mut t, &store, &[&[]]).unwrap().is_none());

        let pts = [fg(0.2, 0.7), PointPrompt::new(0.2, 0.7, PointLabel::Background).unwrap(), fg(0.9, 0.1)];
        let v = enc.encode_points(&mut t, &store, &[&pts]).unwrap().unwrap();
        assert_eq!(t.shape(v), &[1, 3, 32]);
        let tokens = t.value(v);
        let table = store.get("prompt.point_embed").unwrap().data();
        for ch in 0..32 {
            let diff = tokens[ch] - tokens[32 + ch];
            assert!((diff - (table[32 + ch] - table[ch])).abs() < 1e-12);
        }
        let pe = PositionalEncoder::from_store(&store).unwrap();
        let want: Vec<f64> = pe.encode(0.9, 0.1).iter().zip(&table[32..]).map(|(a, b)| a + b).collect();
        assert_eq!(&tokens[64..96], want.as_slice());
    }

    #[test]
    fn box_tokens() {
        let (enc, store) = setup();
        assert!(matches!(BoxPrompt::new(0.6, 0.1, 0.4, 0.9), Err(Error::Prompt(_))));
        assert!(BoxPrompt::new(0.1, 0.5, 0.4, 0.5).is_err());
        let mut t = Tape::new(false, 0);
        let v = enc.encode_box(&mut t, &store, &[BoxPrompt::full()]).unwrap();
        assert_eq!(t.shape(v), &[1, 2, 32]);
        let pe = PositionalEncoder::from_store(&store).unwrap();
        let corners = store.get("prompt.corner_embed").unwrap().data();
        let vals = t.value(v);
        for ch in 0..32 {
            assert!((vals[ch] - pe.encode(0.0, 0.0)[ch] - corners[ch]).abs() < 1e-12);
            assert!((vals[32 + ch] - pe.encode(1.0, 1.0)[ch] - corners[32 + ch]).abs() < 1e-12);
        }
        let eps = 1e-9;
        let bx = BoxPrompt::new(0.3, 0.3, 0.3 + eps, 0.3 + eps).unwrap();
        let v = enc.encode_box(&mut t, &store, &[bx]).unwrap();
        let vals = t.value(v);
        for ch in 0..32 {
            let d = vals[ch] - vals[32 + ch];
            assert!((d - (corners[ch] - corners[32 + ch])).abs() < 1e-6);
        }
    }

    #[test]
    fn token_count_arithmetic() {
        let (enc, store) = setup();
        let bx = BoxPrompt::new(0.1, 0.2, 0.6, 0.8).unwrap();
        for k in 0..4 {
            for with_box in [false, true] {
                let set = PromptSet {
                    points: (0..k).map(|i| fg(0.1 * i as f64, 0.5)).collect(),
                    boxes: with_box.then_some(bx),
                    mask: None,
                };
                let mut t = Tape::new(false, 0);
                let n = enc
                    .encode_sparse(&mut t, &store, std::slice::from_ref(&set))
                    .unwrap()
                    .map_or(0, |v| t.shape(v)[1]);
                assert_eq!(n, k + 2 * with_box as usize);
                assert_eq!(n, set.token_count());
            }
        }
    }

    #[test]
    fn mixed_layouts_rejected() {
        let (enc, store) = setup();
        let mut t = Tape::new(false, 0);
        let sets = [PromptSet::empty(), PromptSet::from_box(BoxPrompt::full())];
        assert!(enc.encode_sparse(&mut t, &store, &sets).is_err());
    }

    #[test]
    fn mask_path_shapes() {
        let (enc, store) = setup();
        let mut t = Tape::new(false, 0);
        let m = MaskPrompt::new(32, vec![0.5; 1024]).unwrap();
        let v = enc.encode_mask(&mut t, &store, &[&m]).unwrap();
        assert_eq!(t.shape(v), &[1, 8, 8, 32]);
        let wrong = MaskPrompt::new(16, vec![0.0; 256]).unwrap();
        assert!(matches!(enc.encode_mask(&mut t, &store, &[&wrong]), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_mask_with_zero_bias_is_zero_before_affine() {
        let (_, store) = setup();
        let mut t = Tape::new(false, 0);
        let m = MaskPrompt::new(32, vec![0.0; 1024]).unwrap();
        let x = t.constant(&[1, 32, 32, 1], m.data.clone()).unwrap();
        let h = nn::conv(&mut t, &store, "prompt.mask.conv1", x, 2, 0).unwrap();
        let h = t.gelu(h).unwrap();
        assert!(t.value(h).iter().all(|&v| v == 0.0));
        let h = nn::layer_norm(&mut t, &store, "prompt.mask.norm1", h).unwrap();
        assert!(t.value(h).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_scale_mask_path() {
        let enc = PromptEncoder::new(PromptEncoderConfig::full_scale()).unwrap();
        let mut store = ParamStore::new();
        enc.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut t = Tape::new(false, 0);
        let m = MaskPrompt::new(256, vec![0.25; 256 * 256]).unwrap();
        let v = enc.encode_mask(&mut t, &store, &[&m]).unwrap();
        assert_eq!(t.shape(v), &[1, 64, 64, 256]);
    }

    #[test]
    fn dense_fusion() {
        let (enc, store) = setup();
        let emb = Tensor::randn(&[1, 8, 8, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let mut t = Tape::new(false, 0);
        let e = t.leaf(&emb);
        let fused = enc.fuse_dense(&mut t, &store, e, &[PromptSet::empty()]).unwrap();
        let delta: Vec<f64> = t.value(fused).iter().zip(emb.data()).map(|(a, b)| a - b).collect();
        for cell in delta.chunks(32) {
            for (a, b) in cell.iter().zip(&delta[..32]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let zero = t.constant(&[1, 8, 8, 32], vec![0.0; 2048]).unwrap();
        let same = t.add(e, zero).unwrap();
        assert_eq!(t.value(same), emb.data());
    }
}
