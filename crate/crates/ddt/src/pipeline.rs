//! Training, encoding, generation and evaluation drivers behind the CLI.

use std::path::{Path, PathBuf};

use ddt_core::eval::{counterfactual_interpolate, parse_degrees, patch_vq_baseline, perturbation_experiment, prefix_decode_series, DegreeCurve, InterpolationMask};
use ddt_core::image::ImageTensor;
use ddt_core::lm::{generate_image_tokens, lm_batch, track_perplexity, LmModel, LmReport, LmTrainer, PairedSample, VocabularyLayout};
use ddt_core::metrics::psnr;
use ddt_core::tokenizer::{LossReport, ReconReport, TokenizerModel, TokenizerTrainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ArtifactMeta, ResolvedConfig, SEED_ENV};
use crate::dataset::{iteration_order, load_dataset, LabeledImage, Manifest};
use crate::error::{DdtError, Result};
use crate::fsutil::{create_dir, write_atomic};
use crate::imageio::{load_image, save_png};
use crate::models::{checkpoint_path, lm_checkpoint, lm_meta, load_lm, load_tokenizer, tokenizer_checkpoint, LM_FILE, TOKENIZER_FILE};
use crate::report::{line_plot_svg, write_svg, JsonlWriter, Series};
use crate::tokens::{read_sidecar, read_token_file, write_token_file, TokenFile};

/// Seed for commands without a config: flag, then `DDT_SEED`, then
/// `fallback`.
pub fn command_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| DdtError::config(SEED_ENV, format!("`{v}` is not an unsigned integer"))),
        Err(_) => Ok(fallback),
    }
}

/// Training images with their captions: the configured manifest in seeded
/// order, or the synthetic shapes dataset.
pub fn training_data(cfg: &ResolvedConfig, resolution: usize, channels: usize) -> Result<Vec<LabeledImage>> {
    let c = &cfg.config;
    match cfg.manifest_path() {
        Some(p) => load_dataset(&Manifest::load(&p)?, resolution, channels, Some(cfg.seed())),
        None => {
            if channels != 3 {
                return Err(DdtError::config("tokenizer.channels", "the synthetic dataset is RGB"));
            }
            let samples = ddt_core::synth::dataset(&mut ChaCha8Rng::seed_from_u64(cfg.seed()), c.data.synth_count, resolution);
            Ok(samples
                .into_iter()
                .enumerate()
                .map(|(i, s)| LabeledImage { image: s.image, label: s.caption, path: PathBuf::from(format!("synth:{i}")) })
                .collect())
        }
    }
}

/// Cycles through seeded per-epoch permutations of `0..len`.
#[derive(Clone, Debug)]
pub struct Batcher {
    len: usize,
    seed: u64,
    epoch: u64,
    pos: usize,
    order: Vec<usize>,
}

impl Batcher {
    pub fn new(len: usize, seed: u64) -> Self {
        Self { len, seed, epoch: 0, pos: 0, order: iteration_order(len, Some(seed)) }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.len {
                    self.epoch += 1;
                    self.pos = 0;
                    self.order = iteration_order(self.len, Some(self.seed.wrapping_add(self.epoch)));
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TokenizerRun {
    pub reports: Vec<LossReport>,
    pub checkpoint: PathBuf,
}

pub fn train_tokenizer(cfg: &ResolvedConfig, out: &Path) -> Result<TokenizerRun> {
    let c = &cfg.config;
    let meta = cfg.meta();
    create_dir(out)?;
    write_atomic(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let data = training_data(cfg, c.tokenizer.resolution, c.tokenizer.channels)?;
    let images: Vec<ImageTensor> = data.into_iter().map(|d| d.image).collect();
    if images.is_empty() {
        return Err(DdtError::config("data", "no training images"));
    }
    let mut trainer = TokenizerTrainer::new(TokenizerModel::new(c.tokenizer.clone(), cfg.seed())?, c.run.clone())?;
    let mut batcher = Batcher::new(images.len(), cfg.seed());
    let mut log = JsonlWriter::create(&out.join("loss.jsonl"), &meta)?;
    let mut reports = Vec::with_capacity(c.run.total_steps as usize);
    log::info!("training tokenizer on {} images for {} steps (config {})", images.len(), c.run.total_steps, &cfg.hash[..12]);
    for step in 0..c.run.total_steps {
        let batch: Vec<ImageTensor> = batcher.next_batch(c.run.batch_size).into_iter().map(|i| images[i].clone()).collect();
        let r = trainer.train_step(&batch)?;
        log.write(&r)?;
        if step % c.run.log_every == 0 || step + 1 == c.run.total_steps {
            log::info!("step {step} recon {:.5} commit {:.5} usage {:.3} lr {:.2e}", r.recon, r.commit, r.codebook_usage, r.lr);
        }
        reports.push(r);
        if c.run.checkpoint_every > 0 && (step + 1) % c.run.checkpoint_every == 0 && step + 1 < c.run.total_steps {
            tokenizer_checkpoint(&trainer.model, &c.run, step + 1, &meta).save(&out.join(format!("tokenizer-step{:06}.ddtc", step + 1)))?;
        }
    }
    let checkpoint = out.join(TOKENIZER_FILE);
    tokenizer_checkpoint(&trainer.model, &c.run, c.run.total_steps, &meta).save(&checkpoint)?;
    let series = |name: &str, f: fn(&LossReport) -> f64| Series { name: name.into(), points: reports.iter().map(|r| (r.step as f64, f(r))).collect() };
    let svg = line_plot_svg("tokenizer training", "step", "loss", &[series("recon", |r| r.recon), series("total", |r| r.total)], &meta);
    write_svg(&out.join("loss.svg"), &svg)?;
    Ok(TokenizerRun { reports, checkpoint })
}

/// Tokenizes every manifest image in manifest order.
pub fn encode_manifest(ckpt: &Path, manifest: &Path, out: &Path) -> Result<TokenFile> {
    let (model, meta) = load_tokenizer(ckpt)?;
    let m = Manifest::load(manifest)?;
    let data = load_dataset(&m, model.config.resolution, model.config.channels, None)?;
    let seqs = data.iter().map(|d| Ok(model.tokenize(&d.image)?.ids)).collect::<Result<Vec<_>>>()?;
    let file = TokenFile::new(model.config.tokens, model.config.codebook_size, seqs).map_err(|e| e.at(out))?;
    let sources: Vec<String> = data.iter().map(|d| d.path.display().to_string()).collect();
    write_token_file(out, &file, &meta.artifact, &sources)?;
    Ok(file)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsnrRow {
    pub index: usize,
    pub source: String,
    pub psnr: f64,
}

#[derive(Clone, Debug)]
pub struct DecodeRun {
    pub images: Vec<PathBuf>,
    pub psnr: Vec<PsnrRow>,
}

impl DecodeRun {
    pub fn mean_psnr(&self) -> Option<f64> {
        (!self.psnr.is_empty()).then(|| self.psnr.iter().map(|r| r.psnr).sum::<f64>() / self.psnr.len() as f64)
    }
}

fn check_token_file(model: &TokenizerModel, file: &TokenFile) -> Result<()> {
    if file.tokens() != model.config.tokens || file.codebook_size() != model.config.codebook_size {
        return Err(DdtError::config(
            "tokens",
            format!(
                "file holds T={} over {} codes, checkpoint expects T={} over {}",
                file.tokens(),
                file.codebook_size(),
                model.config.tokens,
                model.config.codebook_size
            ),
        ));
    }
    Ok(())
}

/// Decodes every sequence to `out_dir/NNNNN.png`; with a manifest, also
/// scores each against its source image.
pub fn decode_tokens(ckpt: &Path, tokens: &Path, out_dir: &Path, steps: usize, seed: u64, manifest: Option<&Path>) -> Result<DecodeRun> {
    let (model, meta) = load_tokenizer(ckpt)?;
    let file = read_token_file(tokens)?;
    check_token_file(&model, &file)?;
    let art = ArtifactMeta { config_hash: meta.artifact.config_hash.clone(), seed };
    create_dir(out_dir)?;
    let originals = match manifest {
        Some(p) => {
            let data = load_dataset(&Manifest::load(p)?, model.config.resolution, model.config.channels, None)?;
            if data.len() != file.sequences.len() {
                return Err(DdtError::config("manifest", format!("{} images for {} token sequences", data.len(), file.sequences.len())));
            }
            Some(data)
        }
        None => None,
    };
    let mut run = DecodeRun { images: Vec::new(), psnr: Vec::new() };
    let mut table = originals.as_ref().map(|_| JsonlWriter::create(&out_dir.join("psnr.jsonl"), &art)).transpose()?;
    for (i, ids) in file.sequences.iter().enumerate() {
        let img = model.decode(ids, steps, seed)?;
        let path = out_dir.join(format!("{i:05}.png"));
        save_png(&img, &path, &art, &[])?;
        run.images.push(path);
        if let (Some(orig), Some(table)) = (&originals, table.as_mut()) {
            let row = PsnrRow { index: i, source: orig[i].path.display().to_string(), psnr: psnr(&img, &orig[i].image)? };
            table.write(&row)?;
            run.psnr.push(row);
        }
    }
    Ok(run)
}

#[derive(Clone, Debug)]
pub struct LmRun {
    pub reports: Vec<LmReport>,
    pub checkpoint: PathBuf,
}

/// Tokenizes the captioned training images and trains the language model
/// on them; writes `lm.ddtc` to `out`.
pub fn train_lm(tokenizer_ckpt: &Path, cfg: &ResolvedConfig, out: &Path) -> Result<LmRun> {
    let c = &cfg.config;
    let meta = cfg.meta();
    let (tok, _) = load_tokenizer(tokenizer_ckpt)?;
    let t = tok.config.tokens;
    let layout = VocabularyLayout::new(tok.config.codebook_size);
    create_dir(out)?;
    write_atomic(&out.join("lm-config.toml"), cfg.to_toml().as_bytes())?;
    let data = training_data(cfg, tok.config.resolution, tok.config.channels)?;
    let samples = data
        .iter()
        .map(|d| Ok(PairedSample { caption: layout.encode_text(&d.label), visual: tok.tokenize(&d.image)?.ids }))
        .collect::<Result<Vec<_>>>()?;
    let longest = samples.iter().map(|s| s.caption.len() + t + 4).max().unwrap_or(0);
    if longest > c.lm.max_len {
        return Err(DdtError::config("lm.max_len", format!("sequences need {longest} positions, max_len is {}", c.lm.max_len)));
    }
    let mut trainer = LmTrainer::new(LmModel::new(c.lm.clone(), layout, cfg.seed())?, c.lm_run.clone())?;
    let mut log = JsonlWriter::create(&out.join("lm_loss.jsonl"), &meta)?;
    let mut reports = Vec::with_capacity(c.lm_run.total_steps as usize);
    log::info!("training language model on {} pairs for {} steps", samples.len(), c.lm_run.total_steps);
    for step in 0..c.lm_run.total_steps {
        let batch = lm_batch(&samples, &layout, t, c.lm.caption_dropout, &c.lm_run, step)?;
        let r = trainer.train_step(&batch)?;
        log.write(&r)?;
        if step % c.lm_run.log_every == 0 || step + 1 == c.lm_run.total_steps {
            log::info!("step {step} loss {:.4} lr {:.2e}", r.loss, r.lr);
        }
        reports.push(r);
    }
    let window = (reports.len() / 20).max(1);
    let ppl = track_perplexity(&reports, window);
    let mut table = JsonlWriter::create(&out.join("perplexity.jsonl"), &meta)?;
    for p in &ppl {
        table.write(p)?;
    }
    let curve = |name: &str, f: fn(&ddt_core::lm::PerplexityPoint) -> Option<f64>| Series {
        name: name.into(),
        points: ppl.iter().filter_map(|p| f(p).map(|v| (p.step as f64, v))).collect(),
    };
    write_svg(&out.join("perplexity.svg"), &line_plot_svg("perplexity", "step", "perplexity", &[curve("text", |p| p.text), curve("visual", |p| p.visual)], &meta))?;
    let checkpoint = out.join(LM_FILE);
    let lm_meta = lm_meta(&trainer.model, &c.lm_run, &c.sampling, t, &meta);
    lm_checkpoint(&trainer.model, &lm_meta, c.lm_run.total_steps).save(&checkpoint)?;
    Ok(LmRun { reports, checkpoint })
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub codes: Vec<u32>,
    pub image: ImageTensor,
}

/// `ckpt` is a directory holding both checkpoints, or an LM checkpoint file
/// with `tokenizer.ddtc` beside it.
pub fn generate(ckpt: &Path, prompt: &str, steps: usize, guidance: f64, seed: u64, out: &Path) -> Result<Generation> {
    let lm_path = checkpoint_path(ckpt, LM_FILE);
    let tok_path = if ckpt.is_dir() { ckpt.join(TOKENIZER_FILE) } else { ckpt.with_file_name(TOKENIZER_FILE) };
    let (lm, meta) = load_lm(&lm_path)?;
    let (tok, _) = load_tokenizer(&tok_path)?;
    if meta.codebook_size != tok.config.codebook_size || meta.tokens != tok.config.tokens {
        return Err(DdtError::config("ckpt", "language model and tokenizer checkpoints do not match"));
    }
    let mut sampling = meta.sampling.clone();
    sampling.guidance_scale = guidance;
    sampling.seed = seed;
    sampling.validate().map_err(|e| match e {
        ddt_core::Error::Config { field, reason } => DdtError::config(format!("sampling.{field}"), reason),
        other => other.into(),
    })?;
    let mut ids = vec![lm.layout.bos()];
    ids.extend(lm.layout.encode_text(prompt));
    let codes = generate_image_tokens(&lm, &ids, meta.tokens, &sampling)?;
    let image = tok.decode(&codes, steps, seed)?;
    let art = ArtifactMeta { config_hash: meta.artifact.config_hash.clone(), seed };
    let code_text = codes.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
    save_png(&image, out, &art, &[("prompt", prompt.into()), ("tokens", code_text), ("cfg", guidance.to_string())])?;
    Ok(Generation { codes, image })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegreeRow {
    pub degree: String,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CurveRow {
    degree: String,
    step: u64,
    loss: f64,
}

/// Trains one LM per perturbation degree on the token file's sequences and
/// writes final losses, curves and a plot to `out_dir`.
pub fn eval_perturb(tokens: &Path, degrees: &str, cfg: &ResolvedConfig, out_dir: &Path) -> Result<Vec<DegreeCurve>> {
    let file = read_token_file(tokens)?;
    let degrees = parse_degrees(degrees)?;
    let c = &cfg.config;
    let curves = perturbation_experiment(&file.sequences, file.codebook_size(), &degrees, &c.lm, &c.lm_run, cfg.seed())?;
    let meta = cfg.meta();
    create_dir(out_dir)?;
    let mut summary = JsonlWriter::create(&out_dir.join("perturb.jsonl"), &meta)?;
    let mut rows = JsonlWriter::create(&out_dir.join("curves.jsonl"), &meta)?;
    for dc in &curves {
        summary.write(&DegreeRow { degree: dc.degree.to_string(), final_loss: dc.final_loss })?;
        for &(step, loss) in &dc.curve {
            rows.write(&CurveRow { degree: dc.degree.to_string(), step, loss })?;
        }
    }
    let series: Vec<Series> = curves
        .iter()
        .map(|dc| Series { name: dc.degree.to_string(), points: dc.curve.iter().map(|&(s, l)| (s as f64, l)).collect() })
        .collect();
    write_svg(&out_dir.join("perturb.svg"), &line_plot_svg("training loss by perturbation degree", "step", "loss", &series, &meta))?;
    Ok(curves)
}

/// Raster-order patch k-means tokens for the manifest images, as a token
/// file comparable to DDT token files.
pub fn patch_vq_tokens(manifest: &Path, resolution: usize, patch: usize, k: usize, iterations: usize, seed: u64, out: &Path) -> Result<TokenFile> {
    let m = Manifest::load(manifest)?;
    let data = load_dataset(&m, resolution, 3, None)?;
    let images: Vec<ImageTensor> = data.iter().map(|d| d.image.clone()).collect();
    let (_, ids) = patch_vq_baseline(&images, patch, k, iterations, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let t = ids.first().map_or(0, Vec::len);
    let file = TokenFile::new(t, k, ids).map_err(|e| e.at(out))?;
    let art = ArtifactMeta { config_hash: "patch-vq".into(), seed };
    let sources: Vec<String> = data.iter().map(|d| d.path.display().to_string()).collect();
    write_token_file(out, &file, &art, &sources)?;
    Ok(file)
}

/// Swaps the masked token positions of `a` for those of `b` and decodes.
pub fn eval_interpolate(ckpt: &Path, a: &Path, b: &Path, mask: &str, steps: usize, seed: u64, out: &Path) -> Result<Vec<u32>> {
    let (model, meta) = load_tokenizer(ckpt)?;
    let (res, ch) = (model.config.resolution, model.config.channels);
    let ta = model.tokenize(&load_image(a, res, ch)?)?.ids;
    let tb = model.tokenize(&load_image(b, res, ch)?)?.ids;
    let mask = InterpolationMask::parse(mask, model.config.tokens)?;
    let mixed = counterfactual_interpolate(&ta, &tb, &mask)?;
    let img = model.decode(&mixed, steps, seed)?;
    let art = ArtifactMeta { config_hash: meta.artifact.config_hash, seed };
    let list = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
    save_png(&img, out, &art, &[("tokens-a", list(&ta)), ("tokens-b", list(&tb)), ("tokens", list(&mixed))])?;
    Ok(mixed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixRow {
    pub t: usize,
    pub psnr: f64,
}

/// Decodes growing token prefixes of one image from shared noise and scores
/// each against the image.
pub fn eval_prefix_series(ckpt: &Path, image: &Path, t_list: &[usize], steps: usize, seed: u64, out_dir: &Path) -> Result<Vec<PrefixRow>> {
    let (model, meta) = load_tokenizer(ckpt)?;
    let img = load_image(image, model.config.resolution, model.config.channels)?;
    let codes = model.tokenize(&img)?.quantized;
    let series = prefix_decode_series(&model.denoiser(), &codes, t_list, steps, seed)?;
    let art = ArtifactMeta { config_hash: meta.artifact.config_hash, seed };
    create_dir(out_dir)?;
    let mut table = JsonlWriter::create(&out_dir.join("prefix.jsonl"), &art)?;
    let mut rows = Vec::with_capacity(t_list.len());
    for (&t, decoded) in t_list.iter().zip(&series) {
        save_png(decoded, &out_dir.join(format!("prefix_{t:03}.png")), &art, &[("prefix", t.to_string())])?;
        let row = PrefixRow { t, psnr: psnr(decoded, &img)? };
        table.write(&row)?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn parse_t_list(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| DdtError::config("t", format!("`{s}` is not a prefix length"))))
        .collect()
}

/// Reconstructs every manifest image and reports PSNR.
pub fn eval_recon(ckpt: &Path, manifest: &Path, steps: usize, seed: u64, out: Option<&Path>) -> Result<ReconReport> {
    let (model, meta) = load_tokenizer(ckpt)?;
    let data = load_dataset(&Manifest::load(manifest)?, model.config.resolution, model.config.channels, None)?;
    let images: Vec<ImageTensor> = data.iter().map(|d| d.image.clone()).collect();
    let report = model.eval_reconstruction(&images, steps, seed)?;
    if let Some(out) = out {
        let mut table = JsonlWriter::create(out, &ArtifactMeta { config_hash: meta.artifact.config_hash, seed })?;
        for (i, (d, &p)) in data.iter().zip(&report.per_image).enumerate() {
            table.write(&PsnrRow { index: i, source: d.path.display().to_string(), psnr: p })?;
        }
    }
    Ok(report)
}

/// Reads a token file's sidecar when present.
pub fn token_meta(tokens: &Path) -> Option<ArtifactMeta> {
    read_sidecar(tokens).ok().map(|s| s.meta)
}
