//! Two-layer two-way transformer mask decoder.
//!
//! Each layer runs token self-attention, token→image cross-attention, a
//! token MLP, and image→token cross-attention, with post-residual layer norm.
//! The final output token is mapped by a small MLP to a vector that is dotted
//! with every upscaled embedding pixel.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::prompt::{PromptEncoder, PromptSet};

const PREFIX: &str = "decoder";
pub const NUM_LAYERS: usize = 2;
pub const DROPOUT: f64 = 0.1;
pub const UPSCALE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub token_dim: usize,
    pub mlp_hidden: usize,
    pub dropout_rate: f64,
    pub upscale_factor: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::with_dim(32)
    }
}

impl DecoderConfig {
    pub fn with_dim(c: usize) -> Self {
        DecoderConfig {
            num_layers: NUM_LAYERS,
            num_heads: 2,
            token_dim: c,
            mlp_hidden: 4 * c,
            dropout_rate: DROPOUT,
            upscale_factor: UPSCALE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers != NUM_LAYERS {
            return Err(Error::Config(format!("decoder must have {NUM_LAYERS} layers, got {}", self.num_layers)));
        }
        if self.dropout_rate != DROPOUT {
            return Err(Error::Config(format!("decoder dropout must be {DROPOUT}, got {}", self.dropout_rate)));
        }
        if self.upscale_factor != UPSCALE {
            return Err(Error::Config(format!("upscale factor must be {UPSCALE}")));
        }
        let c = self.token_dim;
        if c == 0 || c % 4 != 0 || self.num_heads == 0 || c % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "token dim {c} must be divisible by 4 and by {} heads",
                self.num_heads
            )));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::Config("mlp hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// Pre-sigmoid mask scores at `4G × 4G`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    pub side: usize,
    pub data: Vec<f64>,
}

impl MaskLogits {
    pub fn new(side: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != side * side {
            return Err(Error::shape("mask_logits", format!("{} values for side {side}", data.len())));
        }
        Ok(MaskLogits { side, data })
    }

    /// Splits a `[B, S, S]` decoder output into per-image logits.
    pub fn from_batch(t: &Tensor) -> Result<Vec<Self>> {
        let s = t.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::shape("mask_logits", format!("expected [B, S, S], got {s:?}")));
        }
        let side = s[1];
        Ok(t.data().chunks(side * side).map(|c| MaskLogits { side, data: c.to_vec() }).collect())
    }
}

/// Bilinear upsampling (pixel-centre aligned) followed by a strict `> 0` threshold.
pub fn binarize(logits: &MaskLogits, image_size: usize) -> Vec<u8> {
    let up = resize_bilinear(&logits.data, logits.side, image_size);
    up.into_iter().map(|v| u8::from(v > 0.0)).collect()
}

pub(crate) fn resize_bilinear(src: &[f64], side: usize, size: usize) -> Vec<f64> {
    let scale = side as f64 / size as f64;
    let axis: Vec<(usize, usize, f64)> = (0..size)
        .map(|i| {
            let p = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
            let i0 = p.floor() as usize;
            let i1 = (i0 + 1).min(side - 1);
            (i0, i1, p - i0 as f64)
        })
        .collect();
    let mut out = Vec::with_capacity(size * size);
    for &(r0, r1, fr) in &axis {
        for &(c0, c1, fc) in &axis {
            let top = src[r0 * side + c0] * (1.0 - fc) + src[r0 * side + c1] * fc;
            let bot = src[r1 * side + c0] * (1.0 - fc) + src[r1 * side + c1] * fc;
            out.push(top * (1.0 - fr) + bot * fr);
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct MaskDecoder {
    config: DecoderConfig,
}

impl MaskDecoder {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(MaskDecoder { config })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let c = self.config.token_dim;
        store.insert(format!("{PREFIX}.output_token"), Tensor::randn(&[1, c], 1.0, rng))?;
        for i in 0..self.config.num_layers {
            let p = format!("{PREFIX}.layers.{i}");
            nn::init_attention(store, &format!("{p}.self_attn"), c, rng)?;
            nn::init_layer_norm(store, &format!("{p}.norm1"), c)?;
            nn::init_attention(store, &format!("{p}.cross_t2i"), c, rng)?;
            nn::init_layer_norm(store, &format!("{p}.norm2"), c)?;
            nn::init_linear(store, &format!("{p}.mlp.fc1"), c, self.config.mlp_hidden, rng)?;
            nn::init_linear(store, &format!("{p}.mlp.fc2"), self.config.mlp_hidden, c, rng)?;
            nn::init_layer_norm(store, &format!("{p}.norm3"), c)?;
            nn::init_attention(store, &format!("{p}.cross_i2t"), c, rng)?;
            nn::init_layer_norm(store, &format!("{p}.norm4"), c)?;
        }
        nn::init_conv_transpose(store, &format!("{PREFIX}.upscale.conv1"), 2, c, c / 2, rng)?;
        nn::init_layer_norm(store, &format!("{PREFIX}.upscale.norm1"), c / 2)?;
        nn::init_conv_transpose(store, &format!("{PREFIX}.upscale.conv2"), 2, c / 2, c / 4, rng)?;
        nn::init_layer_norm(store, &format!("{PREFIX}.upscale.norm2"), c / 4)?;
        nn::init_linear(store, &format!("{PREFIX}.hyper.fc1"), c, c, rng)?;
        nn::init_linear(store, &format!("{PREFIX}.hyper.fc2"), c, c, rng)?;
        nn::init_linear(store, &format!("{PREFIX}.hyper.fc3"), c, c / 4, rng)
    }

    /// Prepends the learned output token: `[B, T, C] → [B, 1 + T, C]`.
    pub fn insert_output_token(&self, tape: &mut Tape, store: &ParamStore, prompt_tokens: Option<Var>, batch: usize) -> Result<Var> {
        let tok = tape.param(store, &format!("{PREFIX}.output_token"))?;
        let tok = tape.repeat(tok, batch)?;
        match prompt_tokens {
            None => Ok(tok),
            Some(p) => {
                let s = tape.shape(p);
                if s.len() != 3 || s[0] != batch || s[2] != self.config.token_dim {
                    return Err(Error::shape("insert_output_token", format!("prompt tokens {s:?}")));
                }
                tape.concat(&[tok, p], 1)
            }
        }
    }

    fn residual_norm(&self, tape: &mut Tape, store: &ParamStore, norm: &str, x: Var, update: Var) -> Result<Var> {
        let update = tape.dropout(update, self.config.dropout_rate)?;
        let y = tape.add(x, update)?;
        nn::layer_norm(tape, store, norm, y)
    }

    /// One two-way layer. `tokens`, `orig`: `[B, T, C]`; `src`: `[B, N, C]`; `pe`: `[N, C]`.
    pub fn decoder_layer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        index: usize,
        tokens: Var,
        src: Var,
        orig: Var,
        pe: Var,
    ) -> Result<(Var, Var)> {
        let c = self.config.token_dim;
        let heads = self.config.num_heads;
        for (what, v) in [("tokens", tokens), ("embedding", src), ("original tokens", orig), ("pe", pe)] {
            if tape.shape(v).last() != Some(&c) {
                return Err(Error::shape("decoder_layer", format!("{what} width {:?} but C = {c}", tape.shape(v))));
            }
        }
        let p = format!("{PREFIX}.layers.{index}");

        let q = tape.add(tokens, orig)?;
        let a = nn::attention(tape, store, &format!("{p}.self_attn"), q, q, tokens, heads)?;
        let tokens = self.residual_norm(tape, store, &format!("{p}.norm1"), tokens, a)?;

        let q = tape.add(tokens, orig)?;
        let k = tape.add(src, pe)?;
        let a = nn::attention(tape, store, &format!("{p}.cross_t2i"), q, k, src, heads)?;
        let tokens = self.residual_norm(tape, store, &format!("{p}.norm2"), tokens, a)?;

        let h = nn::linear(tape, store, &format!("{p}.mlp.fc1"), tokens)?;
        let h = tape.relu(h)?;
        let h = nn::linear(tape, store, &format!("{p}.mlp.fc2"), h)?;
        let tokens = self.residual_norm(tape, store, &format!("{p}.norm3"), tokens, h)?;

        let q = tape.add(src, pe)?;
        let k = tape.add(tokens, orig)?;
        let a = nn::attention(tape, store, &format!("{p}.cross_i2t"), q, k, tokens, heads)?;
        let src = self.residual_norm(tape, store, &format!("{p}.norm4"), src, a)?;
        Ok((tokens, src))
    }

    /// Maps the output token to the `C/4` mask-weight vector: `[B, 1, C] → [B, 1, C/4]`.
    pub fn hypernetwork(&self, tape: &mut Tape, store: &ParamStore, out_token: Var) -> Result<Var> {
        let h = nn::linear(tape, store, &format!("{PREFIX}.hyper.fc1"), out_token)?;
        let h = tape.relu(h)?;
        let h = nn::linear(tape, store, &format!("{PREFIX}.hyper.fc2"), h)?;
        let h = tape.relu(h)?;
        nn::linear(tape, store, &format!("{PREFIX}.hyper.fc3"), h)
    }

    /// `[B, G, G, C] → [B, 4G, 4G, C/4]`.
    pub fn upscale(&self, tape: &mut Tape, store: &ParamStore, grid: Var) -> Result<Var> {
        let h = nn::conv_transpose(tape, store, &format!("{PREFIX}.upscale.conv1"), grid, 2)?;
        let h = tape.gelu(h)?;
        let h = nn::layer_norm(tape, store, &format!("{PREFIX}.upscale.norm1"), h)?;
        let h = nn::conv_transpose(tape, store, &format!("{PREFIX}.upscale.conv2"), h, 2)?;
        let h = tape.gelu(h)?;
        nn::layer_norm(tape, store, &format!("{PREFIX}.upscale.norm2"), h)
    }

    /// Logits `[B, 4G, 4G]` from final tokens `[B, T, C]` and the grid `[B, G, G, C]`.
    pub fn predict_mask(&self, tape: &mut Tape, store: &ParamStore, tokens: Var, grid: Var) -> Result<Var> {
        let out = tape.narrow(tokens, 1, 0, 1)?;
        let hyper = self.hypernetwork(tape, store, out)?;
        self.mask_from_hyper(tape, store, hyper, grid)
    }

    pub(crate) fn mask_from_hyper(&self, tape: &mut Tape, store: &ParamStore, hyper: Var, grid: Var) -> Result<Var> {
        let up = self.upscale(tape, store, grid)?;
        let s = tape.shape(up).to_vec();
        let (b, side, c4) = (s[0], s[1], s[3]);
        let flat = tape.reshape(up, &[b, side * side, c4])?;
        let logits = tape.matmul_nt(flat, hyper)?;
        tape.reshape(logits, &[b, side, side])
    }

    /// Full decode: dense fusion, output token, both layers, mask prediction.
    /// `grid` is `[B, G, G, C]`; `pe_grid` is the shared `[G, G, C]` encoding.
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prompt_encoder: &PromptEncoder,
        grid: Var,
        pe_grid: &Tensor,
        prompts: &[PromptSet],
    ) -> Result<Var> {
        let s = tape.shape(grid).to_vec();
        if s.len() != 4 || s[0] != prompts.len() || s[3] != self.config.token_dim {
            return Err(Error::shape(
                "decode",
                format!("grid {s:?} for {} prompt sets of width {}", prompts.len(), self.config.token_dim),
            ));
        }
        if pe_grid.shape() != &s[1..] {
            return Err(Error::shape("decode", format!("pe grid {:?} vs embedding {s:?}", pe_grid.shape())));
        }
        let (b, g, c) = (s[0], s[1], s[3]);
        let fused = prompt_encoder.fuse_dense(tape, store, grid, prompts)?;
        let sparse = prompt_encoder.encode_sparse(tape, store, prompts)?;
        let tokens = self.insert_output_token(tape, store, sparse, b)?;
        let pe = tape.constant(&[g * g, c], pe_grid.data().to_vec())?;
        let mut src = tape.reshape(fused, &[b, g * g, c])?;
        let orig = tokens;
        let mut tokens = tokens;
        for i in 0..self.config.num_layers {
            (tokens, src) = self.decoder_layer(tape, store, i, tokens, src, orig, pe)?;
        }
        let grid = tape.reshape(src, &[b, g, g, c])?;
        self.predict_mask(tape, store, tokens, grid)
    }
}
