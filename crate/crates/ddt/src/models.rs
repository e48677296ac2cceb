//! Tokenizer and language-model checkpoints.

use std::path::{Path, PathBuf};

use ddt_core::config::{LmConfig, RunConfig, SamplingConfig, TokenizerConfig};
use ddt_core::lm::{LmModel, VocabularyLayout};
use ddt_core::tokenizer::TokenizerModel;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ArtifactMeta;
use crate::error::{DdtError, Result};

pub const TOKENIZER_FILE: &str = "tokenizer.ddtc";
pub const LM_FILE: &str = "lm.ddtc";

const TOKENIZER_KIND: &str = "tokenizer";
const LM_KIND: &str = "lm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerMeta {
    pub kind: String,
    pub tokenizer: TokenizerConfig,
    pub run: RunConfig,
    #[serde(flatten)]
    pub artifact: ArtifactMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmMeta {
    pub kind: String,
    pub lm: LmConfig,
    pub run: RunConfig,
    pub sampling: SamplingConfig,
    pub codebook_size: usize,
    pub tokens: usize,
    #[serde(flatten)]
    pub artifact: ArtifactMeta,
}

/// A directory resolves to `file` inside it.
pub fn checkpoint_path(path: &Path, file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(file)
    } else {
        path.to_path_buf()
    }
}

pub fn tokenizer_checkpoint(model: &TokenizerModel, run: &RunConfig, step: u64, artifact: &ArtifactMeta) -> Checkpoint {
    let meta = TokenizerMeta { kind: TOKENIZER_KIND.into(), tokenizer: model.config.clone(), run: run.clone(), artifact: artifact.clone() };
    let mut c = Checkpoint::new(serde_json::to_value(meta).expect("metadata serializes"), step);
    c.insert_matrices(model.arrays());
    c
}

pub fn load_tokenizer(path: &Path) -> Result<(TokenizerModel, TokenizerMeta)> {
    let path = checkpoint_path(path, TOKENIZER_FILE);
    let c = Checkpoint::load(&path)?;
    let meta: TokenizerMeta = parse_meta(&c, &path, TOKENIZER_KIND)?;
    let model = TokenizerModel::from_arrays(meta.tokenizer.clone(), &c.matrices())?;
    Ok((model, meta))
}

pub fn lm_checkpoint(model: &LmModel, meta: &LmMeta, step: u64) -> Checkpoint {
    let mut c = Checkpoint::new(serde_json::to_value(meta).expect("metadata serializes"), step);
    c.insert_matrices(model.arrays());
    c
}

pub fn lm_meta(model: &LmModel, run: &RunConfig, sampling: &SamplingConfig, tokens: usize, artifact: &ArtifactMeta) -> LmMeta {
    LmMeta {
        kind: LM_KIND.into(),
        lm: model.config.clone(),
        run: run.clone(),
        sampling: sampling.clone(),
        codebook_size: model.layout.visual_vocab_size,
        tokens,
        artifact: artifact.clone(),
    }
}

pub fn load_lm(path: &Path) -> Result<(LmModel, LmMeta)> {
    let path = checkpoint_path(path, LM_FILE);
    let c = Checkpoint::load(&path)?;
    let meta: LmMeta = parse_meta(&c, &path, LM_KIND)?;
    let model = LmModel::from_arrays(meta.lm.clone(), VocabularyLayout::new(meta.codebook_size), &c.matrices())?;
    Ok((model, meta))
}

fn parse_meta<T: DeserializeOwned>(c: &Checkpoint, path: &Path, kind: &str) -> Result<T> {
    let bad = |reason: String| DdtError::Metadata { path: path.into(), reason };
    let found = c.metadata.get("kind").and_then(|k| k.as_str()).unwrap_or("");
    if found != kind {
        return Err(bad(format!("expected a {kind} checkpoint, found `{found}`")));
    }
    serde_json::from_value(c.metadata.clone()).map_err(|e| bad(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TokenizerConfig {
        TokenizerConfig {
            resolution: 8,
            patch_size: 4,
            tokens: 4,
            enc_layers: 1,
            enc_dim: 8,
            enc_heads: 1,
            code_dim: 4,
            codebook_size: 16,
            dec_layers: 1,
            dec_dim: 8,
            dec_heads: 1,
            mlp_ratio: 2,
            ..TokenizerConfig::default()
        }
    }

    #[test]
    fn tokenizer_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = TokenizerModel::new(tiny(), 3).unwrap();
        let art = ArtifactMeta { config_hash: "h".into(), seed: 3 };
        tokenizer_checkpoint(&model, &RunConfig::default(), 9, &art).save(&dir.path().join(TOKENIZER_FILE)).unwrap();
        let (back, meta) = load_tokenizer(dir.path()).unwrap();
        assert_eq!(meta.artifact, art);
        assert_eq!(meta.tokenizer, tiny());
        assert_eq!(back.arrays(), model.arrays());
        assert!(load_lm(&dir.path().join(TOKENIZER_FILE)).is_err());
    }

    #[test]
    fn lm_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = LmConfig { layers: 1, dim: 8, heads: 1, mlp_ratio: 2, max_len: 24, caption_dropout: 0.1 };
        let model = LmModel::new(cfg, VocabularyLayout::new(16), 1).unwrap();
        let art = ArtifactMeta { config_hash: "h".into(), seed: 1 };
        let meta = lm_meta(&model, &RunConfig::lm_default(), &SamplingConfig::default(), 4, &art);
        lm_checkpoint(&model, &meta, 2).save(&dir.path().join(LM_FILE)).unwrap();
        let (back, m2) = load_lm(dir.path()).unwrap();
        assert_eq!(m2, meta);
        assert_eq!(back.arrays(), model.arrays());
    }
}
