//! Prefix-conditioned diffusion decoder and its Euler sampler.
//!
//! The image stream carries patchified `x_t`; the condition stream carries
//! the (prefix-masked) quantized tokens lifted from `m` to the model width.
//! Both streams are modulated by an embedding of the timestep.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Prediction, TokenizerConfig};
use crate::embed;
use crate::error::{Error, Result};
use crate::flow::{active_len, gaussian_image, prefix_mask};
use crate::graph::{Graph, Var};
use crate::image::{patchify, unpatchify, ImageTensor, PIXEL_MAX, PIXEL_MIN};
use crate::nn::{modulate, DualStreamBlock, Linear, NormKind, StreamOutputs};
use crate::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct Decoder {
    token_embed: Linear,
    patch_embed: Linear,
    time_fc1: Linear,
    time_fc2: Linear,
    blocks: Vec<DualStreamBlock>,
    final_modulation: Linear,
    final_out: Linear,
    token_pos: Matrix,
    patch_pos: Matrix,
    dim: usize,
    tokens: usize,
    code_dim: usize,
    channels: usize,
    resolution: usize,
    patch_size: usize,
    prediction: Prediction,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &TokenizerConfig) -> Self {
        let d = cfg.dec_dim;
        let blocks = (0..cfg.dec_layers)
            .map(|i| {
                let last = i + 1 == cfg.dec_layers;
                DualStreamBlock::new(
                    store,
                    rng,
                    &format!("decoder/blocks/{i}"),
                    d,
                    cfg.dec_heads,
                    cfg.mlp_ratio * d,
                    NormKind::Modulated,
                    StreamOutputs { first: true, second: !last },
                )
            })
            .collect();
        Self {
            token_embed: Linear::new(store, rng, "decoder/token_embed", cfg.code_dim, d),
            patch_embed: Linear::new(store, rng, "decoder/patch_embed", cfg.patch_dim(), d),
            time_fc1: Linear::new(store, rng, "decoder/time/fc1", d, d),
            time_fc2: Linear::new(store, rng, "decoder/time/fc2", d, d),
            blocks,
            final_modulation: Linear::zeros(store, "decoder/final/modulation", d, 2 * d),
            final_out: Linear::zeros(store, "decoder/final/out", d, cfg.patch_dim()),
            token_pos: embed::sincos_1d(cfg.tokens, d),
            patch_pos: embed::sincos_2d(cfg.grid(), cfg.grid(), d),
            dim: d,
            tokens: cfg.tokens,
            code_dim: cfg.code_dim,
            channels: cfg.channels,
            resolution: cfg.resolution,
            patch_size: cfg.patch_size,
            prediction: cfg.prediction,
        }
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.resolution, self.resolution)
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    fn check(&self, x_t: &ImageTensor, cond_shape: (usize, usize)) -> Result<()> {
        if x_t.shape() != self.image_shape() {
            return Err(Error::config(
                "resolution",
                format!("decoder expects {:?} images, got {:?}", self.image_shape(), x_t.shape()),
            ));
        }
        if cond_shape != (self.tokens, self.code_dim) {
            return Err(Error::config(
                "tokens",
                format!("decoder expects a {}×{} condition, got {cond_shape:?}", self.tokens, self.code_dim),
            ));
        }
        Ok(())
    }

    /// Raw network output in patch layout: `x̂_0` or a velocity, depending
    /// on the configured prediction target.
    pub fn forward(&self, g: &mut Graph<'_>, x_t: &ImageTensor, t: f64, cond: Var) -> Result<Var> {
        self.check(x_t, g.value(cond).shape())?;
        let temb = g.constant(embed::timestep(t, self.dim));
        let c = self.time_fc1.forward(g, temb);
        let c = g.silu(c);
        let c = self.time_fc2.forward(g, c);
        let c = g.silu(c);

        let patches = g.constant(patchify(x_t, self.patch_size)?);
        let img = self.patch_embed.forward(g, patches);
        let ppos = g.constant(self.patch_pos.clone());
        let mut img = g.add(img, ppos);

        let tok = self.token_embed.forward(g, cond);
        let tpos = g.constant(self.token_pos.clone());
        let mut tok = Some(g.add(tok, tpos));

        for block in &self.blocks {
            let (io, to) = block.forward(g, img, tok.expect("token stream alive until the last block"), Some(c));
            img = io.expect("image stream is always kept");
            tok = to;
        }

        let m = self.final_modulation.forward(g, c);
        let shift = g.slice_cols(m, 0, self.dim);
        let scale = g.slice_cols(m, self.dim, self.dim);
        let h = modulate(g, img, shift, scale);
        Ok(self.final_out.forward(g, h))
    }

    /// `x̂_0` in patch layout regardless of the prediction target.
    pub fn predict_x0_patches(&self, g: &mut Graph<'_>, x_t: &ImageTensor, t: f64, cond: Var) -> Result<Var> {
        let out = self.forward(g, x_t, t, cond)?;
        Ok(match self.prediction {
            Prediction::X0 => out,
            Prediction::Velocity => {
                // x_t − t·v
                let xt = g.constant(patchify(x_t, self.patch_size)?);
                let tv = g.scale(out, -t);
                g.add(xt, tv)
            }
        })
    }

    /// Element-mean squared error between `x̂_0` and `x0`, recorded on `g`.
    pub fn reconstruction_loss(
        &self,
        g: &mut Graph<'_>,
        x0: &ImageTensor,
        x_t: &ImageTensor,
        t: f64,
        cond: Var,
    ) -> Result<Var> {
        let pred = self.predict_x0_patches(g, x_t, t, cond)?;
        let target = patchify(x0, self.patch_size)?;
        Ok(g.mse_loss(pred, &target))
    }

    pub fn bind<'a>(&'a self, store: &'a ParamStore) -> BoundDecoder<'a> {
        BoundDecoder { decoder: self, store }
    }
}

/// Anything that maps `(x_t, t, condition)` to a clean-image estimate.
pub trait Denoiser {
    fn image_shape(&self) -> (usize, usize, usize);
    fn predict_x0(&self, x_t: &ImageTensor, t: f64, cond: &Matrix) -> Result<ImageTensor>;
}

/// A decoder together with frozen parameters.
#[derive(Clone, Copy)]
pub struct BoundDecoder<'a> {
    pub decoder: &'a Decoder,
    pub store: &'a ParamStore,
}

impl Denoiser for BoundDecoder<'_> {
    fn image_shape(&self) -> (usize, usize, usize) {
        self.decoder.image_shape()
    }

    fn predict_x0(&self, x_t: &ImageTensor, t: f64, cond: &Matrix) -> Result<ImageTensor> {
        let mut g = Graph::new(self.store);
        let c = g.constant(cond.clone());
        let out = self.decoder.predict_x0_patches(&mut g, x_t, t, c)?;
        let (ch, h, w) = self.image_shape();
        unpatchify(g.value(out), ch, h, w, self.decoder.patch_size)
    }
}

/// Euler integration of the flow from pure noise at `t = 1` to `t = 0` in
/// `steps` uniform substeps. At time `t` the decoder sees the first
/// `round(t·T)` rows of `tokens`. The final substep returns `x̂_0` directly.
pub fn sample_image<D: Denoiser + ?Sized>(denoiser: &D, tokens: &Matrix, steps: usize, seed: u64) -> Result<ImageTensor> {
    if steps == 0 {
        return Err(Error::config("steps", "at least one sampling step is required"));
    }
    let (c, h, w) = denoiser.image_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = gaussian_image(&mut rng, c, h, w);
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let cond = prefix_mask(tokens, active_len(t, tokens.rows()))?;
        let x0 = denoiser.predict_x0(&x, t, &cond.tokens)?;
        if i + 1 == steps {
            x = x0;
        } else {
            x = x.zip_map(&x0, |xt, x0| xt - dt * (xt - x0) / t)?;
        }
    }
    x.clamp(PIXEL_MIN, PIXEL_MAX);
    Ok(x)
}
