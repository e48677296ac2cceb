//! Decoder-only language model over a mixed byte-text / visual-token
//! vocabulary, with modality-aware sampling and logit guidance.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{LmConfig, RunConfig, SamplingConfig};
use crate::error::{Error, Result};
use crate::graph::{log_sum_exp, Graph, Var};
use crate::nn::{CausalBlock, LayerNorm, Linear};
use crate::optim::{clip_grad_norm, lr_schedule, AdamW};
use crate::params::{randn, ParamGrads, ParamId, ParamStore};
use crate::rng::stream;
use crate::tensor::Matrix;

/// Byte-level text block.
pub const TEXT_VOCAB: usize = 256;

/// Id ranges of the shared vocabulary: text bytes first, then the visual
/// codes, then the four delimiters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularyLayout {
    pub text_vocab_size: usize,
    pub visual_vocab_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Visual,
}

impl VocabularyLayout {
    pub fn new(codebook_size: usize) -> Self {
        Self { text_vocab_size: TEXT_VOCAB, visual_vocab_size: codebook_size }
    }

    pub fn visual_offset(&self) -> u32 {
        self.text_vocab_size as u32
    }

    pub fn bos(&self) -> u32 {
        (self.text_vocab_size + self.visual_vocab_size) as u32
    }

    pub fn eos(&self) -> u32 {
        self.bos() + 1
    }

    pub fn bov(&self) -> u32 {
        self.bos() + 2
    }

    pub fn eov(&self) -> u32 {
        self.bos() + 3
    }

    pub fn size(&self) -> usize {
        self.text_vocab_size + self.visual_vocab_size + 4
    }

    pub fn is_text(&self, id: u32) -> bool {
        (id as usize) < self.text_vocab_size
    }

    pub fn is_visual(&self, id: u32) -> bool {
        let off = self.visual_offset();
        id >= off && id < off + self.visual_vocab_size as u32
    }

    pub fn visual_id(&self, code: u32) -> u32 {
        self.visual_offset() + code
    }

    pub fn code_of(&self, id: u32) -> Option<u32> {
        self.is_visual(id).then(|| id - self.visual_offset())
    }

    /// Modality a target id is accounted under for perplexity.
    pub fn modality_of(&self, id: u32) -> Modality {
        if self.is_visual(id) {
            Modality::Visual
        } else {
            Modality::Text
        }
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    pub fn decode_text(&self, ids: &[u32]) -> String {
        let bytes: Vec<u8> = ids.iter().filter(|&&i| self.is_text(i)).map(|&i| i as u8).collect();
        String::from_utf8_lossy(&bytes).to_string()
    }
}

/// Token ids with a per-position loss flag.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultimodalSequence {
    pub ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl MultimodalSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn trained_everywhere_but_first(ids: Vec<u32>) -> Self {
        let loss_mask = (0..ids.len()).map(|i| i > 0).collect();
        Self { ids, loss_mask }
    }
}

/// `[BOS] caption [BOV] visual [EOV] [EOS]`; an empty caption gives the
/// caption-dropped form.
pub fn build_pretrain_sequence(caption: &[u32], visual: &[u32], layout: &VocabularyLayout, tokens: usize) -> Result<MultimodalSequence> {
    if visual.len() != tokens {
        return Err(Error::Shape { what: "visual span", expected: tokens, got: visual.len() });
    }
    if let Some(&bad) = caption.iter().find(|&&c| !layout.is_text(c)) {
        return Err(Error::domain("caption id", format!("{bad} is outside the text block")));
    }
    if let Some(&bad) = visual.iter().find(|&&c| c as usize >= layout.visual_vocab_size) {
        return Err(Error::domain("visual code", format!("{bad} ≥ codebook size {}", layout.visual_vocab_size)));
    }
    let mut ids = Vec::with_capacity(caption.len() + tokens + 4);
    ids.push(layout.bos());
    ids.extend_from_slice(caption);
    ids.push(layout.bov());
    ids.extend(visual.iter().map(|&c| layout.visual_id(c)));
    ids.push(layout.eov());
    ids.push(layout.eos());
    Ok(MultimodalSequence::trained_everywhere_but_first(ids))
}

/// `[BOS] text [EOS]`.
pub fn build_text_sequence(text: &[u32], layout: &VocabularyLayout) -> Result<MultimodalSequence> {
    if let Some(&bad) = text.iter().find(|&&c| !layout.is_text(c)) {
        return Err(Error::domain("text id", format!("{bad} is outside the text block")));
    }
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(layout.bos());
    ids.extend_from_slice(text);
    ids.push(layout.eos());
    Ok(MultimodalSequence::trained_everywhere_but_first(ids))
}

/// Inverse of [`build_pretrain_sequence`]: `(caption, visual codes)`.
pub fn parse_pretrain_sequence(seq: &[u32], layout: &VocabularyLayout, tokens: usize) -> Result<(Vec<u32>, Vec<u32>)> {
    let bad = |detail: &str| Error::domain("multimodal sequence", detail.to_string());
    if seq.first() != Some(&layout.bos()) {
        return Err(bad("missing leading [BOS]"));
    }
    let bov = seq.iter().position(|&i| i == layout.bov()).ok_or_else(|| bad("missing [BOV]"))?;
    let caption = seq[1..bov].to_vec();
    if caption.iter().any(|&c| !layout.is_text(c)) {
        return Err(bad("non-text id inside the caption"));
    }
    let span = seq.get(bov + 1..bov + 1 + tokens).ok_or_else(|| bad("visual span too short"))?;
    let visual = span.iter().map(|&i| layout.code_of(i).ok_or_else(|| bad("non-visual id in span"))).collect::<Result<Vec<u32>>>()?;
    if seq.get(bov + 1 + tokens..) != Some(&[layout.eov(), layout.eos()][..]) {
        return Err(bad("span must close with [EOV][EOS]"));
    }
    Ok((caption, visual))
}

/// Delimiter state machine deciding which block may be sampled next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModalityState {
    Text,
    /// Inside a visual span with this many codes emitted.
    Visual(usize),
}

impl ModalityState {
    /// State after consuming `ids` from the text state.
    pub fn after(ids: &[u32], layout: &VocabularyLayout) -> Self {
        ids.iter().fold(ModalityState::Text, |s, &id| s.advance(id, layout))
    }

    pub fn advance(self, id: u32, layout: &VocabularyLayout) -> Self {
        match self {
            _ if id == layout.bov() => ModalityState::Visual(0),
            _ if id == layout.eov() => ModalityState::Text,
            ModalityState::Visual(n) if layout.is_visual(id) => ModalityState::Visual(n + 1),
            s => s,
        }
    }

    /// Whether `id` may be emitted next in a span of `tokens` codes.
    pub fn allows(self, id: u32, layout: &VocabularyLayout, tokens: usize) -> bool {
        match self {
            ModalityState::Text => layout.is_text(id) || id == layout.eos() || id == layout.bov(),
            ModalityState::Visual(n) if n >= tokens => id == layout.eov(),
            ModalityState::Visual(_) => layout.is_visual(id),
        }
    }
}

/// Sets every logit the state disallows to `−∞`; allowed logits are left
/// untouched.
pub fn modality_mask(logits: &mut [f64], state: ModalityState, layout: &VocabularyLayout, tokens: usize) {
    for (id, l) in logits.iter_mut().enumerate() {
        if !state.allows(id as u32, layout, tokens) {
            *l = f64::NEG_INFINITY;
        }
    }
}

/// `l_u + s·(l_c − l_u)`, evaluated as `(1−s)·l_u + s·l_c` so that `s = 0`
/// and `s = 1` reproduce their inputs exactly.
pub fn cfg_combine(cond: &[f64], uncond: &[f64], scale: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(Error::Shape { what: "guidance logits", expected: cond.len(), got: uncond.len() });
    }
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(&c, &u)| {
            if c == f64::NEG_INFINITY || u == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                (1.0 - scale) * u + scale * c
            }
        })
        .collect())
}

/// Slack on the cumulative-probability comparison of nucleus truncation.
const TOP_P_SLACK: f64 = 1e-12;

/// Renormalised `(id, probability)` support after temperature, top-k and
/// top-p truncation, in decreasing-probability order (ties by id).
pub fn nucleus_support(logits: &[f64], k: usize, p: f64, temperature: f64) -> Result<Vec<(usize, f64)>> {
    if k == 0 {
        return Err(Error::config("top_k", "must be at least 1"));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::config("top_p", "must lie in (0, 1]"));
    }
    if !(temperature > 0.0) {
        return Err(Error::config("temperature", "must be positive"));
    }
    let mut cands: Vec<(usize, f64)> =
        logits.iter().enumerate().filter(|(_, l)| l.is_finite()).map(|(i, &l)| (i, l / temperature)).collect();
    if cands.is_empty() {
        return Err(Error::EmptySupport);
    }
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cands.truncate(k);
    let scaled: Vec<f64> = cands.iter().map(|c| c.1).collect();
    let lse = log_sum_exp(&scaled);
    let mut cum = 0.0;
    let mut keep = cands.len();
    for (i, c) in cands.iter_mut().enumerate() {
        c.1 = libm::exp(c.1 - lse);
        cum += c.1;
        if cum >= p - TOP_P_SLACK {
            keep = i + 1;
            break;
        }
    }
    cands.truncate(keep);
    let z: f64 = cands.iter().map(|c| c.1).sum();
    for c in &mut cands {
        c.1 /= z;
    }
    Ok(cands)
}

/// Draws one id from [`nucleus_support`].
pub fn topk_topp_sample<R: Rng + ?Sized>(logits: &[f64], k: usize, p: f64, temperature: f64, rng: &mut R) -> Result<usize> {
    let support = nucleus_support(logits, k, p, temperature)?;
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for &(id, prob) in &support {
        cum += prob;
        if u < cum {
            return Ok(id);
        }
    }
    Ok(support.last().expect("support is non-empty").0)
}

/// Mean NLL of `seq.ids[1..]` under row-softmax of `logits` (`(S−1) × V`),
/// over positions whose target is flagged in `loss_mask`. Zero when no
/// target is flagged.
pub fn lm_loss(logits: &Matrix, seq: &MultimodalSequence) -> Result<f64> {
    let nlls = position_nlls(logits, seq)?;
    let counted: Vec<f64> = nlls.iter().zip(&seq.loss_mask[1..]).filter(|(_, &m)| m).map(|(n, _)| *n).collect();
    if counted.is_empty() {
        log::warn!("lm_loss: no target position is flagged for the loss");
        return Ok(0.0);
    }
    Ok(counted.iter().sum::<f64>() / counted.len() as f64)
}

/// NLL of every next-token target `seq.ids[i + 1]` under row `i`.
pub fn position_nlls(logits: &Matrix, seq: &MultimodalSequence) -> Result<Vec<f64>> {
    if seq.ids.len() != seq.loss_mask.len() {
        return Err(Error::Shape { what: "loss mask", expected: seq.ids.len(), got: seq.loss_mask.len() });
    }
    if logits.rows() + 1 != seq.ids.len() {
        return Err(Error::Shape { what: "next-token logits", expected: seq.ids.len().saturating_sub(1), got: logits.rows() });
    }
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let target = seq.ids[r + 1] as usize;
            let l = row.get(target).ok_or_else(|| Error::domain("target id", format!("{target} ≥ vocabulary {}", row.len())))?;
            Ok(log_sum_exp(row) - l)
        })
        .collect()
}

/// Causal transformer with tied input positions and one output head over the
/// whole vocabulary.
#[derive(Clone, Debug)]
pub struct LmModel {
    pub config: LmConfig,
    pub layout: VocabularyLayout,
    pub store: ParamStore,
    embed: ParamId,
    pos: ParamId,
    blocks: Vec<CausalBlock>,
    final_norm: LayerNorm,
    head: Linear,
}

impl LmModel {
    pub fn new(config: LmConfig, layout: VocabularyLayout, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let embed = store.add("lm/embed", randn(&mut rng, layout.size(), d, 0.02));
        let pos = store.add("lm/pos", randn(&mut rng, config.max_len, d, 0.02));
        let blocks = (0..config.layers)
            .map(|i| CausalBlock::new(&mut store, &mut rng, &format!("lm/blocks/{i}"), d, config.heads, config.mlp_ratio * d))
            .collect();
        let final_norm = LayerNorm::new(&mut store, "lm/final_norm", d);
        // Zero-initialised head: an untrained model is exactly uniform.
        let head = Linear::zeros(&mut store, "lm/head", d, layout.size());
        Ok(Self { config, layout, store, embed, pos, blocks, final_norm, head })
    }

    /// Rebuilds from named arrays; every parameter must be present.
    pub fn from_arrays(config: LmConfig, layout: VocabularyLayout, arrays: &alloc::collections::BTreeMap<String, Matrix>) -> Result<Self> {
        let mut model = Self::new(config, layout, 0)?;
        let names: Vec<String> = model.store.iter().map(|(_, n, _)| n.to_string()).collect();
        for name in names {
            let value = arrays.get(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            model.store.assign(&name, value.clone())?;
        }
        Ok(model)
    }

    pub fn arrays(&self) -> Vec<(String, Matrix)> {
        self.store.iter().map(|(_, name, m)| (name.to_string(), m.clone())).collect()
    }

    /// Logits for every position of `ids`, recorded on `g` (`S × V`).
    pub fn forward(&self, g: &mut Graph<'_>, ids: &[u32]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::config("max_len", "cannot run the model on an empty sequence"));
        }
        if ids.len() > self.config.max_len {
            return Err(Error::config("max_len", format!("sequence of {} exceeds max_len {}", ids.len(), self.config.max_len)));
        }
        let v = self.layout.size();
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(Error::domain("token id", format!("{bad} ≥ vocabulary {v}")));
        }
        let table = g.param(self.embed);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let x = g.gather(table, &idx);
        let pos = g.param(self.pos);
        let pos = g.slice_rows(pos, 0, ids.len());
        let mut x = g.add(x, pos);
        for b in &self.blocks {
            x = b.forward(g, x);
        }
        let x = self.final_norm.forward(g, x);
        Ok(self.head.forward(g, x))
    }

    pub fn logits(&self, ids: &[u32]) -> Result<Matrix> {
        let mut g = Graph::new(&self.store);
        let l = self.forward(&mut g, ids)?;
        Ok(g.value(l).clone())
    }

    /// Logits for the token following `ids`.
    pub fn next_logits(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let l = self.logits(ids)?;
        Ok(l.row(l.rows() - 1).to_vec())
    }

    /// Masked mean next-token NLL of `seq`, recorded on `g`.
    pub fn loss(&self, g: &mut Graph<'_>, seq: &MultimodalSequence) -> Result<Var> {
        Ok(self.loss_and_logits(g, seq)?.0)
    }

    /// The loss together with its `(S−1) × V` next-token logits.
    pub fn loss_and_logits(&self, g: &mut Graph<'_>, seq: &MultimodalSequence) -> Result<(Var, Var)> {
        if seq.len() < 2 {
            return Err(Error::Shape { what: "training sequence", expected: 2, got: seq.len() });
        }
        let logits = self.forward(g, &seq.ids)?;
        let logits = g.slice_rows(logits, 0, seq.len() - 1);
        let targets: Vec<usize> = seq.ids[1..].iter().map(|&i| i as usize).collect();
        let weights: Vec<f64> = seq.loss_mask[1..].iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        Ok((g.cross_entropy(logits, &targets, &weights), logits))
    }
}

fn sample_guided<R: Rng + ?Sized>(
    model: &LmModel,
    cond: &[u32],
    uncond: &[u32],
    state: ModalityState,
    tokens: usize,
    sampling: &SamplingConfig,
    rng: &mut R,
) -> Result<u32> {
    let s = sampling.guidance_scale;
    let mut logits = if s == 0.0 {
        model.next_logits(uncond)?
    } else if s == 1.0 {
        model.next_logits(cond)?
    } else {
        cfg_combine(&model.next_logits(cond)?, &model.next_logits(uncond)?, s)?
    };
    modality_mask(&mut logits, state, &model.layout, tokens);
    let (k, p) = match state {
        ModalityState::Text => (sampling.text_top_k, sampling.text_top_p),
        ModalityState::Visual(_) => (sampling.visual_top_k, sampling.visual_top_p),
    };
    Ok(topk_topp_sample(&logits, k, p, sampling.temperature, rng)? as u32)
}

/// Appends `[BOV]`, `tokens` guided visual samples and `[EOV]` to `prompt`
/// and returns the codebook ids. The unconditional branch runs on the
/// caption-dropped prefix `[BOS][BOV]…`.
pub fn generate_image_tokens(model: &LmModel, prompt: &[u32], tokens: usize, sampling: &SamplingConfig) -> Result<Vec<u32>> {
    let layout = model.layout;
    if ModalityState::after(prompt, &layout) != ModalityState::Text {
        return Err(Error::domain("prompt", "must end outside a visual span"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let mut cond = prompt.to_vec();
    cond.push(layout.bov());
    let mut uncond = vec![layout.bos(), layout.bov()];
    let mut codes = Vec::with_capacity(tokens);
    for n in 0..tokens {
        let id = sample_guided(model, &cond, &uncond, ModalityState::Visual(n), tokens, sampling, &mut rng)?;
        let code = layout.code_of(id).expect("visual mode only admits visual ids");
        codes.push(code);
        cond.push(id);
        uncond.push(id);
    }
    Ok(codes)
}

/// Samples text after `prompt` until `[EOS]` or `max_new` tokens; the
/// returned ids exclude `[EOS]`.
pub fn generate_text(model: &LmModel, prompt: &[u32], sampling: &SamplingConfig, max_new: usize) -> Result<Vec<u32>> {
    let layout = model.layout;
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        if ids.len() >= model.config.max_len {
            break;
        }
        let mut logits = model.next_logits(&ids)?;
        modality_mask(&mut logits, ModalityState::Text, &layout, 0);
        logits[layout.bov() as usize] = f64::NEG_INFINITY;
        let id = topk_topp_sample(&logits, sampling.text_top_k, sampling.text_top_p, sampling.temperature, &mut rng)? as u32;
        if id == layout.eos() {
            break;
        }
        out.push(id);
        ids.push(id);
    }
    Ok(out)
}

/// Free-running generation under the delimiter state machine: text may open
/// a visual span, which always closes after exactly `tokens` codes.
pub fn generate_sequence(model: &LmModel, prompt: &[u32], tokens: usize, sampling: &SamplingConfig, max_new: usize) -> Result<Vec<u32>> {
    let layout = model.layout;
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let mut ids = prompt.to_vec();
    let mut state = ModalityState::after(prompt, &layout);
    for _ in 0..max_new {
        if ids.len() >= model.config.max_len {
            break;
        }
        let id = sample_guided(model, &ids, &ids, state, tokens, &SamplingConfig { guidance_scale: 1.0, ..*sampling }, &mut rng)?;
        ids.push(id);
        state = state.advance(id, &layout);
        if id == layout.eos() {
            break;
        }
    }
    Ok(ids)
}

/// Caption/visual pair used to assemble language-model batches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedSample {
    pub caption: Vec<u32>,
    pub visual: Vec<u32>,
}

/// Per-step language-model diagnostics, with NLL sums split by the
/// modality of the target token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmReport {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub text_nll_sum: f64,
    pub text_count: usize,
    pub visual_nll_sum: f64,
    pub visual_count: usize,
}

/// Per-modality perplexity at the end of one logging window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityPoint {
    pub step: u64,
    pub text: Option<f64>,
    pub visual: Option<f64>,
}

/// `exp(mean NLL)` per modality over consecutive windows of `window`
/// reports; windows with no target of a modality leave that entry empty.
pub fn track_perplexity(reports: &[LmReport], window: usize) -> Vec<PerplexityPoint> {
    let window = window.max(1);
    reports
        .chunks(window)
        .filter_map(|w| {
            let (ts, tc, vs, vc) = w.iter().fold((0.0, 0, 0.0, 0), |a, r| {
                (a.0 + r.text_nll_sum, a.1 + r.text_count, a.2 + r.visual_nll_sum, a.3 + r.visual_count)
            });
            let text = (tc > 0).then(|| libm::exp(ts / tc as f64));
            let visual = (vc > 0).then(|| libm::exp(vs / vc as f64));
            (text.is_some() || visual.is_some()).then(|| PerplexityPoint { step: w.last().expect("chunk").step, text, visual })
        })
        .collect()
}

/// Assembles step `step`'s batch: each slot picks a random pair, becomes a
/// text-only sequence with probability `run.text_mixture`, and otherwise a
/// paired sequence whose caption is dropped with probability
/// `caption_dropout`.
pub fn lm_batch(samples: &[PairedSample], layout: &VocabularyLayout, tokens: usize, caption_dropout: f64, run: &RunConfig, step: u64) -> Result<Vec<MultimodalSequence>> {
    if samples.is_empty() {
        return Err(Error::config("dataset", "no training pairs"));
    }
    (0..run.batch_size)
        .map(|slot| {
            let mut rng = stream(run.seed, step, slot as u64);
            let s = &samples[rng.random_range(0..samples.len())];
            if rng.random::<f64>() < run.text_mixture && !s.caption.is_empty() {
                build_text_sequence(&s.caption, layout)
            } else if rng.random::<f64>() < caption_dropout {
                build_pretrain_sequence(&[], &s.visual, layout, tokens)
            } else {
                build_pretrain_sequence(&s.caption, &s.visual, layout, tokens)
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct LmTrainer {
    pub model: LmModel,
    pub run: RunConfig,
    optimizer: AdamW,
    step: u64,
}

impl LmTrainer {
    pub fn new(model: LmModel, run: RunConfig) -> Result<Self> {
        run.validate()?;
        let optimizer = AdamW::new(run.optimizer, run.weight_decay);
        Ok(Self { model, run, optimizer, step: 0 })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One update on `batch`; the loss is the mean NLL over every flagged
    /// target position in the batch.
    pub fn train_step(&mut self, batch: &[MultimodalSequence]) -> Result<LmReport> {
        if batch.is_empty() {
            return Err(Error::config("batch_size", "training batch is empty"));
        }
        let lr = lr_schedule(self.step, &self.run);
        let layout = self.model.layout;
        let total: usize = batch.iter().map(|s| s.loss_mask.iter().skip(1).filter(|&&m| m).count()).sum();
        let mut grads = ParamGrads::new(&self.model.store);
        let mut report = LmReport { step: self.step, loss: 0.0, lr, text_nll_sum: 0.0, text_count: 0, visual_nll_sum: 0.0, visual_count: 0 };
        for (item, seq) in batch.iter().enumerate() {
            let counted = seq.loss_mask.iter().skip(1).filter(|&&m| m).count();
            if counted == 0 {
                continue;
            }
            let mut g = Graph::new(&self.model.store);
            let (loss, logits) = self.model.loss_and_logits(&mut g, seq)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite { step: self.step, item });
            }
            let share = counted as f64 / total as f64;
            report.loss += value * share;
            let scaled = g.scale(loss, share);
            let back = g.backward(scaled);
            g.accumulate_param_grads(&back, &mut grads);

            let nlls = position_nlls(g.value(logits), seq)?;
            for ((nll, &target), &m) in nlls.iter().zip(&seq.ids[1..]).zip(&seq.loss_mask[1..]) {
                if !m {
                    continue;
                }
                match layout.modality_of(target) {
                    Modality::Text => {
                        report.text_nll_sum += nll;
                        report.text_count += 1;
                    }
                    Modality::Visual => {
                        report.visual_nll_sum += nll;
                        report.visual_count += 1;
                    }
                }
            }
        }
        if let Some(max) = self.run.grad_clip {
            clip_grad_norm(&mut grads, max);
        }
        self.optimizer.step(&mut self.model.store, &grads, lr);
        self.step += 1;
        Ok(report)
    }
}
