//! ViT-style image encoder: patch embedding, pre-norm transformer blocks with
//! windowed or global self-attention, and a convolutional neck.
//!
//! Tokens stay in NHWC layout (`[B, G, G, D]`) throughout so the neck's
//! convolutions apply directly to the block output.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{ParamStore, Tape, Tensor, Var};

const PREFIX: &str = "encoder";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub window_size: usize,
    pub global_block_indices: Vec<usize>,
    pub neck_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: 128,
            patch_size: 16,
            embed_dim: 64,
            num_blocks: 8,
            num_heads: 4,
            window_size: 4,
            global_block_indices: vec![1, 3, 5, 7],
            neck_channels: 32,
        }
    }
}

impl EncoderConfig {
    /// The full-size layout: 1024 px input, 16 px patches, 64×64×256 embedding.
    pub fn full_scale() -> Self {
        EncoderConfig {
            input_size: 1024,
            patch_size: 16,
            embed_dim: 1280,
            num_blocks: 32,
            num_heads: 16,
            window_size: 16,
            global_block_indices: vec![7, 15, 23, 31],
            neck_channels: 256,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
            return bad(format!(
                "input size {} is not divisible by patch size {}",
                self.input_size, self.patch_size
            ));
        }
        let g = self.grid_side();
        if self.window_size == 0 || g % self.window_size != 0 {
            return bad(format!("grid side {g} is not divisible by window size {}", self.window_size));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!("embed dim {} not divisible into {} heads", self.embed_dim, self.num_heads));
        }
        if self.neck_channels == 0 {
            return bad("neck channels must be positive".into());
        }
        let idx = &self.global_block_indices;
        if idx.iter().any(|&i| i >= self.num_blocks) {
            return bad(format!("global block indices {idx:?} exceed {} blocks", self.num_blocks));
        }
        if idx.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!("global block indices {idx:?} must be strictly increasing"));
        }
        if idx.len() > 2 {
            let stride = idx[1] - idx[0];
            if idx.windows(2).any(|w| w[1] - w[0] != stride) {
                return bad(format!("global block indices {idx:?} are not equidistant"));
            }
        }
        Ok(())
    }

    pub fn is_global(&self, block: usize) -> bool {
        self.global_block_indices.contains(&block)
    }
}

/// Encoder output for one image: the feature grid and the positional grid the
/// decoder adds to it. Both are `[G, G, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEmbedding {
    pub grid: Tensor,
    pub pe_grid: Tensor,
}

impl ImageEmbedding {
    pub fn side(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.grid.shape()[2]
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    config: EncoderConfig,
}

impl ImageEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(ImageEncoder { config })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let c = &self.config;
        let d = c.embed_dim;
        nn::init_conv(store, &format!("{PREFIX}.patch"), c.patch_size, 3, d, true, rng)?;
        for i in 0..c.num_blocks {
            let p = format!("{PREFIX}.blocks.{i}");
            nn::init_layer_norm(store, &format!("{p}.norm1"), d)?;
            nn::init_attention(store, &format!("{p}.attn"), d, rng)?;
            nn::init_layer_norm(store, &format!("{p}.norm2"), d)?;
            nn::init_linear(store, &format!("{p}.mlp.fc1"), d, 4 * d, rng)?;
            nn::init_linear(store, &format!("{p}.mlp.fc2"), 4 * d, d, rng)?;
        }
        let std = (1.0 / d as f64).sqrt();
        store.insert(
            format!("{PREFIX}.neck.conv1.weight"),
            Tensor::randn(&[1, 1, d, c.neck_channels], std, rng),
        )?;
        nn::init_layer_norm(store, &format!("{PREFIX}.neck.norm1"), c.neck_channels)?;
        let std = (1.0 / (9 * c.neck_channels) as f64).sqrt();
        store.insert(
            format!("{PREFIX}.neck.conv2.weight"),
            Tensor::randn(&[3, 3, c.neck_channels, c.neck_channels], std, rng),
        )?;
        nn::init_layer_norm(store, &format!("{PREFIX}.neck.norm2"), c.neck_channels)
    }

    fn check_image(&self, tape: &Tape, images: Var) -> Result<()> {
        let s = tape.shape(images);
        let n = self.config.input_size;
        if s.len() != 4 || s[1] != n || s[2] != n || s[3] != 3 {
            return Err(Error::shape("patch_embed", format!("expected [B, {n}, {n}, 3] image batch, got {s:?}")));
        }
        Ok(())
    }

    /// `[B, S, S, 3] → [B, G, G, D]` via a conv whose kernel and stride equal the patch size.
    pub fn patch_embed(&self, tape: &mut Tape, store: &ParamStore, images: Var) -> Result<Var> {
        self.check_image(tape, images)?;
        nn::conv(tape, store, &format!("{PREFIX}.patch"), images, self.config.patch_size, 0)
    }

    /// One pre-norm transformer block over `[B, G, G, D]` tokens.
    pub fn block(&self, tape: &mut Tape, store: &ParamStore, x: Var, index: usize) -> Result<Var> {
        let c = &self.config;
        if index >= c.num_blocks {
            return Err(Error::Config(format!("block {index} of {}", c.num_blocks)));
        }
        let p = format!("{PREFIX}.blocks.{index}");
        let shape = tape.shape(x).to_vec();
        let (b, g, d) = (shape[0], shape[1], shape[3]);
        let w = if c.is_global(index) { g } else { c.window_size };
        let nw = g / w;

        let h = nn::layer_norm(tape, store, &format!("{p}.norm1"), x)?;
        // [B, G, G, D] -> [B·nW², w², D]
        let h = tape.reshape(h, &[b, nw, w, nw, w, d])?;
        let h = tape.permute(h, &[0, 1, 3, 2, 4, 5])?;
        let h = tape.reshape(h, &[b * nw * nw, w * w, d])?;
        let a = nn::attention(tape, store, &format!("{p}.attn"), h, h, h, c.num_heads)?;
        let a = tape.reshape(a, &[b, nw, nw, w, w, d])?;
        let a = tape.permute(a, &[0, 1, 3, 2, 4, 5])?;
        let a = tape.reshape(a, &[b, g, g, d])?;
        let x = tape.add(x, a)?;

        let h = nn::layer_norm(tape, store, &format!("{p}.norm2"), x)?;
        let h = nn::linear(tape, store, &format!("{p}.mlp.fc1"), h)?;
        let h = tape.gelu(h)?;
        let h = nn::linear(tape, store, &format!("{p}.mlp.fc2"), h)?;
        tape.add(x, h)
    }

    /// 1×1 conv → LN → 3×3 conv → LN, reducing `D` to the neck width.
    pub fn neck(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = nn::conv(tape, store, &format!("{PREFIX}.neck.conv1"), x, 1, 0)?;
        let h = nn::layer_norm(tape, store, &format!("{PREFIX}.neck.norm1"), h)?;
        let h = nn::conv(tape, store, &format!("{PREFIX}.neck.conv2"), h, 1, 1)?;
        nn::layer_norm(tape, store, &format!("{PREFIX}.neck.norm2"), h)
    }

    /// Full encoder on a `[B, S, S, 3]` batch; returns `[B, G, G, C]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, images: Var) -> Result<Var> {
        let mut x = self.patch_embed(tape, store, images)?;
        for i in 0..self.config.num_blocks {
            x = self.block(tape, store, x, i)?;
        }
        self.neck(tape, store, x)
    }
}
