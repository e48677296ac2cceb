//! The full tokenizer (encoder, code-space projection, codebook, decoder)
//! and its end-to-end training step.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TokenizerConfig};
use crate::decoder::{sample_image, BoundDecoder, Decoder};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::flow::{add_noise, gaussian_image};
use crate::graph::{Graph, Var};
use crate::image::ImageTensor;
use crate::metrics::psnr;
use crate::nn::Linear;
use crate::optim::{clip_grad_norm, lr_schedule, AdamW};
use crate::params::{ParamGrads, ParamStore};
use crate::quantizer::{codebook_usage, Codebook, QuantizationResult};
use crate::rng::stream;
use crate::tensor::Matrix;

pub const ENTRIES_ARRAY: &str = "quantizer/entries";
pub const EMA_COUNT_ARRAY: &str = "quantizer/ema_count";
pub const EMA_SUM_ARRAY: &str = "quantizer/ema_sum";

#[derive(Clone, Debug)]
pub struct TokenizerModel {
    pub config: TokenizerConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub projection: Linear,
    pub decoder: Decoder,
    pub codebook: Codebook,
}

impl TokenizerModel {
    pub fn new(config: TokenizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &mut rng, &config);
        let projection = Linear::new(&mut store, &mut rng, "encoder/projection", config.enc_dim, config.code_dim);
        let decoder = Decoder::new(&mut store, &mut rng, &config);
        let codebook = Codebook::new(&mut rng, config.codebook_size, config.code_dim);
        Ok(Self { config, store, encoder, projection, decoder, codebook })
    }

    /// Rebuilds a model from named arrays; every parameter must be present.
    pub fn from_arrays(config: TokenizerConfig, arrays: &BTreeMap<String, Matrix>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let names: Vec<String> = model.store.iter().map(|(_, n, _)| n.to_string()).collect();
        for name in names {
            let value = arrays.get(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            model.store.assign(&name, value.clone())?;
        }
        let get = |n: &str| arrays.get(n).cloned().ok_or_else(|| Error::MissingParam(n.to_string()));
        let counts = get(EMA_COUNT_ARRAY)?.into_vec();
        model.codebook = Codebook::from_parts(get(ENTRIES_ARRAY)?, counts, get(EMA_SUM_ARRAY)?)?;
        if model.codebook.size() != model.config.codebook_size || model.codebook.dim() != model.config.code_dim {
            return Err(Error::config("codebook_size", "stored codebook does not match the configuration"));
        }
        Ok(model)
    }

    /// Every trainable parameter plus the codebook state, by name.
    pub fn arrays(&self) -> Vec<(String, Matrix)> {
        let mut out: Vec<(String, Matrix)> =
            self.store.iter().map(|(_, name, m)| (name.to_string(), m.clone())).collect();
        out.push((ENTRIES_ARRAY.into(), self.codebook.entries().clone()));
        out.push((EMA_COUNT_ARRAY.into(), Matrix::row_vector(self.codebook.ema_count().to_vec())));
        out.push((EMA_SUM_ARRAY.into(), self.codebook.ema_sum().clone()));
        out
    }

    fn code_features(&self, g: &mut Graph<'_>, image: &ImageTensor) -> Result<Var> {
        let feats = self.encoder.forward(g, image)?;
        Ok(self.projection.forward(g, feats))
    }

    /// Code-space features `T × m` before quantization.
    pub fn encode_features(&self, image: &ImageTensor) -> Result<Matrix> {
        let mut g = Graph::new(&self.store);
        let v = self.code_features(&mut g, image)?;
        Ok(g.value(v).clone())
    }

    pub fn tokenize(&self, image: &ImageTensor) -> Result<QuantizationResult> {
        self.codebook.lookup(&self.encode_features(image)?)
    }

    /// Codebook rows for `ids`, in order.
    pub fn codes_for(&self, ids: &[u32]) -> Result<Matrix> {
        if ids.len() != self.config.tokens {
            return Err(Error::Shape { what: "token sequence", expected: self.config.tokens, got: ids.len() });
        }
        let k = self.codebook.size();
        let mut out = Matrix::zeros(ids.len(), self.codebook.dim());
        for (r, &id) in ids.iter().enumerate() {
            if id as usize >= k {
                return Err(Error::domain("token id", alloc::format!("{id} at position {r} ≥ codebook size {k}")));
            }
            out.row_mut(r).copy_from_slice(self.codebook.entries().row(id as usize));
        }
        Ok(out)
    }

    pub fn denoiser(&self) -> BoundDecoder<'_> {
        self.decoder.bind(&self.store)
    }

    pub fn decode(&self, ids: &[u32], steps: usize, seed: u64) -> Result<ImageTensor> {
        sample_image(&self.denoiser(), &self.codes_for(ids)?, steps, seed)
    }

    pub fn reconstruct(&self, image: &ImageTensor, steps: usize, seed: u64) -> Result<ImageTensor> {
        let q = self.tokenize(image)?;
        sample_image(&self.denoiser(), &q.quantized, steps, seed)
    }

    /// Decoder loss at a given prefix length with fixed noise, no gradients.
    pub fn reconstruction_loss_at(&self, image: &ImageTensor, t_index: usize, eps: &ImageTensor) -> Result<f64> {
        let q = self.tokenize(image)?;
        let t = t_index as f64 / self.config.tokens as f64;
        let x_t = add_noise(image, t, eps)?;
        let mut g = Graph::new(&self.store);
        let c = g.constant(q.quantized);
        let c = g.keep_rows(c, t_index);
        let l = self.decoder.reconstruction_loss(&mut g, image, &x_t, t, c)?;
        Ok(g.scalar(l))
    }

    /// Mean reconstruction loss over every image and every `t_index ∈ 1..=T`
    /// with noise fixed by `seed`; a deterministic training-progress probe.
    pub fn recon_sweep(&self, images: &[ImageTensor], seed: u64) -> Result<f64> {
        let (c, h, w) = self.decoder.image_shape();
        let t_max = self.config.tokens;
        let mut total = 0.0;
        for (i, img) in images.iter().enumerate() {
            for t_index in 1..=t_max {
                let eps = gaussian_image(&mut stream(seed, i as u64, t_index as u64), c, h, w);
                total += self.reconstruction_loss_at(img, t_index, &eps)?;
            }
        }
        Ok(total / (images.len() * t_max).max(1) as f64)
    }

    /// PSNR of full-sequence reconstructions.
    pub fn eval_reconstruction(&self, images: &[ImageTensor], steps: usize, seed: u64) -> Result<ReconReport> {
        if images.is_empty() {
            return Err(Error::config("eval_set", "evaluation set is empty"));
        }
        let per_image = images
            .iter()
            .map(|img| psnr(img, &self.reconstruct(img, steps, seed)?))
            .collect::<Result<Vec<f64>>>()?;
        let mean_psnr = per_image.iter().sum::<f64>() / per_image.len() as f64;
        Ok(ReconReport { mean_psnr, per_image })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub mean_psnr: f64,
    pub per_image: Vec<f64>,
}

/// One optimisation step's diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub recon: f64,
    pub commit: f64,
    pub total: f64,
    pub codebook_usage: f64,
    pub lr: f64,
    pub dead_codes_reset: usize,
}

/// Owns a model, its optimizer and the step counter.
#[derive(Clone, Debug)]
pub struct TokenizerTrainer {
    pub model: TokenizerModel,
    pub run: RunConfig,
    optimizer: AdamW,
    step: u64,
}

impl TokenizerTrainer {
    pub fn new(model: TokenizerModel, run: RunConfig) -> Result<Self> {
        run.validate()?;
        let optimizer = AdamW::new(run.optimizer, run.weight_decay);
        Ok(Self { model, run, optimizer, step: 0 })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Resumes counting from `step` (after loading a checkpoint).
    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn train_step(&mut self, batch: &[ImageTensor]) -> Result<LossReport> {
        let lr = lr_schedule(self.step, &self.run);
        self.train_step_with_lr(batch, lr)
    }

    /// One step at an explicit learning rate.
    pub fn train_step_with_lr(&mut self, batch: &[ImageTensor], lr: f64) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::config("batch_size", "training batch is empty"));
        }
        let cfg = &self.model.config;
        let t_max = cfg.tokens;
        let beta = cfg.commitment_weight;
        let (c, h, w) = self.model.decoder.image_shape();
        let mut grads = ParamGrads::new(&self.model.store);
        let mut features = Matrix::zeros(batch.len() * t_max, cfg.code_dim);
        let mut ids = Vec::with_capacity(batch.len() * t_max);
        let (mut recon_sum, mut commit_sum) = (0.0, 0.0);

        let normalized = self.model.codebook.normalized_entries();
        for (item, image) in batch.iter().enumerate() {
            let mut rng = stream(self.run.seed, self.step, item as u64);
            let mut g = Graph::new(&self.model.store);
            let v_hat = self.model.code_features(&mut g, image)?;
            let q = self.model.codebook.lookup_normalized(&normalized, g.value(v_hat))?;
            let quantized = g.straight_through(v_hat, q.quantized.clone());
            let commit = g.sq_dist_sum(v_hat, &q.quantized);

            let t_index = rng.random_range(1..=t_max);
            let t = t_index as f64 / t_max as f64;
            let eps = gaussian_image(&mut rng, c, h, w);
            let x_t = add_noise(image, t, &eps)?;
            let cond = g.keep_rows(quantized, t_index);
            let recon = self.model.decoder.reconstruction_loss(&mut g, image, &x_t, t, cond)?;
            let weighted = g.scale(commit, beta);
            let total = g.add(recon, weighted);

            let (r, cm) = (g.scalar(recon), g.scalar(commit));
            if !(r.is_finite() && cm.is_finite()) {
                return Err(Error::NonFinite { step: self.step, item });
            }
            recon_sum += r;
            commit_sum += cm;
            let back = g.backward(total);
            g.accumulate_param_grads(&back, &mut grads);

            let vh = g.value(v_hat);
            for row in 0..t_max {
                features.row_mut(item * t_max + row).copy_from_slice(vh.row(row));
            }
            ids.extend_from_slice(&q.ids);
        }

        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        if !grads.is_finite() {
            return Err(Error::NonFinite { step: self.step, item: 0 });
        }
        if let Some(max) = self.run.grad_clip {
            clip_grad_norm(&mut grads, max);
        }
        self.optimizer.step(&mut self.model.store, &grads, lr);

        let cfg = &self.model.config;
        self.model.codebook.ema_update(&features, &ids, cfg.ema_decay)?;
        let mut dead_codes_reset = 0;
        if cfg.revive_dead_codes {
            let threshold = cfg.dead_threshold_for(batch.len());
            let mut rng = stream(self.run.seed, self.step, u64::MAX);
            dead_codes_reset = self.model.codebook.reset_dead_codes(&features, threshold, &mut rng)?;
        }

        let (recon, commit) = (recon_sum / n, commit_sum / n);
        let report = LossReport {
            step: self.step,
            recon,
            commit,
            total: recon + beta * commit,
            codebook_usage: codebook_usage(&ids, cfg.codebook_size),
            lr,
            dead_codes_reset,
        };
        self.step += 1;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::randn;

    fn tiny() -> TokenizerConfig {
        TokenizerConfig {
            resolution: 8,
            channels: 1,
            patch_size: 4,
            tokens: 4,
            enc_layers: 1,
            enc_dim: 16,
            enc_heads: 2,
            code_dim: 4,
            codebook_size: 16,
            dec_layers: 1,
            dec_dim: 16,
            dec_heads: 2,
            mlp_ratio: 2,
            ..TokenizerConfig::toy()
        }
    }

    fn images(n: usize, seed: u64) -> Vec<ImageTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let m = randn(&mut rng, 1, 64, 0.5).map(|v| v.clamp(-1.0, 1.0));
                ImageTensor::new(1, 8, 8, m.into_vec()).unwrap()
            })
            .collect()
    }

    fn run() -> RunConfig {
        RunConfig { peak_lr: 1e-3, warmup_steps: 2, total_steps: 20, ..RunConfig::default() }
    }

    #[test]
    fn identical_seeds_identical_reports() {
        let batch = images(3, 1);
        let go = || {
            let mut tr = TokenizerTrainer::new(TokenizerModel::new(tiny(), 5).unwrap(), run()).unwrap();
            (0..3).map(|_| tr.train_step(&batch).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(go(), go());
    }

    #[test]
    fn total_is_recon_plus_weighted_commit() {
        let batch = images(2, 2);
        let mut tr = TokenizerTrainer::new(TokenizerModel::new(tiny(), 5).unwrap(), run()).unwrap();
        for _ in 0..3 {
            let r = tr.train_step(&batch).unwrap();
            assert_eq!(r.total, r.recon + 0.25 * r.commit);
            assert!(r.recon >= 0.0 && r.commit >= 0.0 && (0.0..=1.0).contains(&r.codebook_usage));
        }
    }

    #[test]
    fn zero_lr_freezes_params_but_not_codebook() {
        let batch = images(2, 3);
        let model = TokenizerModel::new(tiny(), 5).unwrap();
        let mut tr = TokenizerTrainer::new(model.clone(), run()).unwrap();
        tr.train_step_with_lr(&batch, 0.0).unwrap();
        for ((_, a, ma), (_, b, mb)) in tr.model.store.iter().zip(model.store.iter()) {
            assert_eq!(a, b);
            assert_eq!(ma, mb);
        }
        assert_ne!(tr.model.codebook.ema_count(), model.codebook.ema_count());
    }

    #[test]
    fn arrays_round_trip_model() {
        let model = TokenizerModel::new(tiny(), 9).unwrap();
        let arrays: BTreeMap<String, Matrix> = model.arrays().into_iter().collect();
        let back = TokenizerModel::from_arrays(tiny(), &arrays).unwrap();
        assert_eq!(back.arrays(), model.arrays());
        let mut missing = arrays.clone();
        missing.remove("decoder/final/out/weight");
        assert!(matches!(TokenizerModel::from_arrays(tiny(), &missing), Err(Error::MissingParam(_))));
    }

    #[test]
    fn decode_rejects_out_of_range_ids() {
        let model = TokenizerModel::new(tiny(), 0).unwrap();
        assert!(matches!(model.decode(&[0, 1, 2, 16], 2, 0), Err(Error::Domain { .. })));
        assert!(model.decode(&[0, 1, 2, 15], 2, 0).unwrap().is_finite());
    }

    #[test]
    fn short_training_reduces_sweep_loss() {
        let batch = images(4, 4);
        let mut tr = TokenizerTrainer::new(
            TokenizerModel::new(tiny(), 1).unwrap(),
            RunConfig { peak_lr: 3e-3, warmup_steps: 5, total_steps: 60, ..RunConfig::default() },
        )
        .unwrap();
        let before = tr.model.recon_sweep(&batch, 7).unwrap();
        for _ in 0..60 {
            tr.train_step(&batch).unwrap();
        }
        let after = tr.model.recon_sweep(&batch, 7).unwrap();
        assert!(after < 0.9 * before, "{before} -> {after}");
    }
}
