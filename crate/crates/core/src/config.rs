//! Architecture, optimisation and sampling knobs, with validation.
//!
//! Defaults are desk-scale versions of the reference setup (the reference
//! tokenizer uses 480 tokens, a 65 536-entry codebook and 20/24-layer
//! transformers; here everything is shrunk while keeping the structure).

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What the diffusion decoder regresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    /// The clean image `x_0` (the reconstruction objective as written).
    #[default]
    X0,
    /// The rectified-flow velocity `ε − x_0`.
    Velocity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub resolution: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// Number of query tokens, i.e. the token sequence length `T`.
    pub tokens: usize,
    pub enc_layers: usize,
    pub enc_dim: usize,
    pub enc_heads: usize,
    /// Code-space width `m`.
    pub code_dim: usize,
    pub codebook_size: usize,
    pub dec_layers: usize,
    pub dec_dim: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
    /// β in `recon + β·commit`.
    pub commitment_weight: f64,
    /// γ of the codebook moving averages.
    pub ema_decay: f64,
    /// Entries whose moving-average count falls below this are revived.
    /// `None` means `0.01 · (batch assignments / codebook size)`.
    pub dead_code_threshold: Option<f64>,
    /// Turns dead-code revival off (ablation).
    pub revive_dead_codes: bool,
    pub prediction: Prediction,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            channels: 3,
            patch_size: 4,
            tokens: 16,
            enc_layers: 4,
            enc_dim: 128,
            enc_heads: 2,
            code_dim: 16,
            codebook_size: 512,
            dec_layers: 6,
            dec_dim: 256,
            dec_heads: 4,
            mlp_ratio: 4,
            commitment_weight: 0.25,
            ema_decay: 0.99,
            dead_code_threshold: None,
            revive_dead_codes: true,
            prediction: Prediction::X0,
        }
    }
}

impl TokenizerConfig {
    /// Small configuration that trains in minutes on one CPU core.
    pub fn toy() -> Self {
        Self {
            patch_size: 8,
            enc_layers: 2,
            enc_dim: 64,
            enc_heads: 2,
            dec_layers: 3,
            dec_dim: 64,
            dec_heads: 2,
            ..Self::default()
        }
    }

    pub fn grid(&self) -> usize {
        self.resolution / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Revival threshold for a batch of `batch_items` images.
    pub fn dead_threshold_for(&self, batch_items: usize) -> f64 {
        self.dead_code_threshold
            .unwrap_or(0.01 * (batch_items * self.tokens) as f64 / self.codebook_size as f64)
    }

    pub fn validate(&self) -> Result<()> {
        positive("resolution", self.resolution)?;
        positive("channels", self.channels)?;
        positive("patch_size", self.patch_size)?;
        positive("tokens", self.tokens)?;
        positive("enc_layers", self.enc_layers)?;
        positive("enc_dim", self.enc_dim)?;
        positive("enc_heads", self.enc_heads)?;
        positive("code_dim", self.code_dim)?;
        positive("codebook_size", self.codebook_size)?;
        positive("dec_layers", self.dec_layers)?;
        positive("dec_dim", self.dec_dim)?;
        positive("dec_heads", self.dec_heads)?;
        positive("mlp_ratio", self.mlp_ratio)?;
        if !self.resolution.is_multiple_of(self.patch_size) {
            return Err(Error::config("patch_size", "resolution must be divisible by patch_size"));
        }
        if self.code_dim > self.enc_dim {
            return Err(Error::config("code_dim", "code_dim must not exceed enc_dim"));
        }
        divisible("enc_heads", self.enc_dim, self.enc_heads)?;
        divisible("dec_heads", self.dec_dim, self.dec_heads)?;
        even("enc_dim", self.enc_dim)?;
        even("dec_dim", self.dec_dim)?;
        if !(self.commitment_weight >= 0.0 && self.commitment_weight.is_finite()) {
            return Err(Error::config("commitment_weight", "must be a finite non-negative number"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::config("ema_decay", "must lie in (0, 1)"));
        }
        if let Some(th) = self.dead_code_threshold {
            if !(th >= 0.0 && th.is_finite()) {
                return Err(Error::config("dead_code_threshold", "must be a finite non-negative number"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Linear warmup then cosine decay to the floor.
    LinearCosine,
    /// Cosine decay from the peak, no warmup ramp beyond `warmup_steps`.
    Cosine,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub peak_lr: f64,
    pub schedule: Schedule,
    /// Cosine floor as a fraction of `peak_lr`.
    pub min_lr_ratio: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    /// Fraction of pure-text sequences mixed into multimodal training.
    pub text_mixture: f64,
    /// Steps between loss records / checkpoints in the drivers.
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    /// Tokenizer optimisation defaults.
    fn default() -> Self {
        Self {
            seed: 0,
            optimizer: AdamWConfig { beta1: 0.9, beta2: 0.99, eps: 1e-6 },
            peak_lr: 1e-4,
            schedule: Schedule::LinearCosine,
            min_lr_ratio: 0.01,
            batch_size: 32,
            total_steps: 2000,
            warmup_steps: 100,
            weight_decay: 0.0,
            grad_clip: None,
            text_mixture: 0.1,
            log_every: 10,
            checkpoint_every: 500,
        }
    }
}

impl RunConfig {
    /// Language-model optimisation defaults.
    pub fn lm_default() -> Self {
        Self {
            optimizer: AdamWConfig { beta1: 0.9, beta2: 0.95, eps: 1e-6 },
            peak_lr: 1e-4,
            schedule: Schedule::Cosine,
            batch_size: 32,
            total_steps: 1000,
            warmup_steps: 50,
            weight_decay: 0.05,
            grad_clip: Some(1.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config("peak_lr", format!("must be positive, got {}", self.peak_lr)));
        }
        if !(self.min_lr_ratio >= 0.0 && self.min_lr_ratio <= 1.0) {
            return Err(Error::config("min_lr_ratio", "must lie in [0, 1]"));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) {
            return Err(Error::config("optimizer.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optimizer.beta2", "must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        positive("batch_size", self.batch_size)?;
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be positive"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::config("warmup_steps", "must not exceed total_steps"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip", "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.text_mixture) {
            return Err(Error::config("text_mixture", "must lie in [0, 1]"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Longest sequence the model is trained or sampled on.
    pub max_len: usize,
    /// Probability of training on the caption-dropped form.
    pub caption_dropout: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { layers: 2, dim: 64, heads: 2, mlp_ratio: 4, max_len: 64, caption_dropout: 0.1 }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        positive("layers", self.layers)?;
        positive("dim", self.dim)?;
        positive("heads", self.heads)?;
        positive("mlp_ratio", self.mlp_ratio)?;
        positive("max_len", self.max_len)?;
        divisible("heads", self.dim, self.heads)?;
        even("dim", self.dim)?;
        if !(0.0..=1.0).contains(&self.caption_dropout) {
            return Err(Error::config("caption_dropout", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub text_top_k: usize,
    pub text_top_p: f64,
    pub visual_top_k: usize,
    pub visual_top_p: f64,
    pub guidance_scale: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            text_top_k: 50,
            text_top_p: 1.0,
            visual_top_k: 4096,
            visual_top_p: 0.9,
            guidance_scale: 8.0,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        positive("text_top_k", self.text_top_k)?;
        positive("visual_top_k", self.visual_top_k)?;
        for (name, p) in [("text_top_p", self.text_top_p), ("visual_top_p", self.visual_top_p)] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::config(name, "must lie in (0, 1]"));
            }
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::config("guidance_scale", "must be a finite non-negative number"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be positive"));
        }
        Ok(())
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::config(field, "must be positive"));
    }
    Ok(())
}

fn divisible(field: &str, dim: usize, heads: usize) -> Result<()> {
    if !dim.is_multiple_of(heads) {
        return Err(Error::config(field, format!("{heads} heads do not divide width {dim}")));
    }
    Ok(())
}

fn even(field: &str, dim: usize) -> Result<()> {
    if !dim.is_multiple_of(2) {
        return Err(Error::config(field, "sinusoidal embeddings need an even width"));
    }
    Ok(())
}
