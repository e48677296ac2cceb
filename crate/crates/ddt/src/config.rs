//! Run configuration: built-in defaults, a TOML file, `key=value` overrides,
//! seed resolution, validation and a content hash.

use std::path::{Path, PathBuf};

use ddt_core::config::{LmConfig, RunConfig, SamplingConfig, TokenizerConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DdtError, Result};

/// Environment variable consulted when neither a flag nor the file sets a seed.
pub const SEED_ENV: &str = "DDT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdtConfig {
    /// Global seed; copied into every section's own seed field.
    pub seed: u64,
    pub tokenizer: TokenizerConfig,
    /// Tokenizer optimisation.
    pub run: RunConfig,
    pub lm: LmConfig,
    /// Language-model optimisation.
    pub lm_run: RunConfig,
    pub sampling: SamplingConfig,
    pub data: DataConfig,
}

impl Default for DdtConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tokenizer: TokenizerConfig::default(),
            run: RunConfig::default(),
            lm: LmConfig::default(),
            lm_run: RunConfig::lm_default(),
            sampling: SamplingConfig::default(),
            data: DataConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Image manifest; relative paths resolve against the config file.
    /// Without one, a synthetic shapes dataset is generated.
    pub manifest: Option<PathBuf>,
    pub synth_count: usize,
    /// Diffusion sampler steps used by evaluation passes inside training.
    pub sampler_steps: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { manifest: None, synth_count: 256, sampler_steps: 25 }
    }
}

/// Config hash and seed stamped into every output artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedConfig {
    pub config: DdtConfig,
    /// Hex SHA-256 of the canonical JSON form of `config`.
    pub hash: String,
    /// Directory relative data paths resolve against.
    pub base_dir: PathBuf,
}

impl ResolvedConfig {
    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn meta(&self) -> ArtifactMeta {
        ArtifactMeta { config_hash: self.hash.clone(), seed: self.seed() }
    }

    pub fn manifest_path(&self) -> Option<PathBuf> {
        self.config.data.manifest.as_ref().map(|p| self.base_dir.join(p))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(&self.config).expect("configuration serializes to TOML")
    }
}

/// Reads `file` (if any), applies `overrides` and resolves the seed with
/// precedence flag, file, `DDT_SEED`, zero.
pub fn resolve_config(file: Option<&Path>, overrides: &[String], seed_flag: Option<u64>) -> Result<ResolvedConfig> {
    let text = match file {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| DdtError::io(p, e))?),
        None => None,
    };
    let env = std::env::var(SEED_ENV).ok();
    let base_dir = file.and_then(Path::parent).map(Path::to_path_buf).unwrap_or_default();
    resolve(text.as_deref(), overrides, seed_flag, env.as_deref(), base_dir)
}

/// Pure form of [`resolve_config`].
pub fn resolve(
    text: Option<&str>,
    overrides: &[String],
    seed_flag: Option<u64>,
    env_seed: Option<&str>,
    base_dir: PathBuf,
) -> Result<ResolvedConfig> {
    let mut doc = match toml::Value::try_from(DdtConfig::default()) {
        Ok(toml::Value::Table(t)) => t,
        _ => unreachable!("defaults serialize to a table"),
    };
    let mut seed_given = false;
    if let Some(text) = text {
        let file: toml::Table = toml::from_str(text).map_err(|e| DdtError::config("config", e.message().to_string()))?;
        seed_given |= file.contains_key("seed");
        merge(&mut doc, file);
    }
    for o in overrides {
        let (key, value) = parse_override(o)?;
        seed_given |= key == "seed";
        set_path(&mut doc, &key, value)?;
    }
    if let Some(s) = seed_flag {
        doc.insert("seed".into(), toml::Value::Integer(seed_to_toml(s)?));
    } else if !seed_given {
        if let Some(env) = env_seed {
            let s: u64 = env.trim().parse().map_err(|_| DdtError::config(SEED_ENV, format!("`{env}` is not an unsigned integer")))?;
            doc.insert("seed".into(), toml::Value::Integer(seed_to_toml(s)?));
        }
    }
    let mut config: DdtConfig = serde_path_to_error::deserialize(toml::Value::Table(doc)).map_err(|e| {
        let path = e.path().to_string();
        let field = if path.is_empty() || path == "." { "config".to_string() } else { path };
        DdtError::config(field, e.into_inner().to_string())
    })?;
    config.run.seed = config.seed;
    config.lm_run.seed = config.seed;
    config.sampling.seed = config.seed;
    validate(&config)?;
    let hash = config_hash(&config);
    Ok(ResolvedConfig { config, hash, base_dir })
}

/// Hex SHA-256 over the canonical JSON serialization.
pub fn config_hash(config: &DdtConfig) -> String {
    let json = serde_json::to_vec(config).expect("configuration serializes to JSON");
    hex::encode(Sha256::digest(json))
}

fn seed_to_toml(s: u64) -> Result<i64> {
    i64::try_from(s).map_err(|_| DdtError::config("seed", "must fit in a signed 64-bit integer"))
}

fn validate(c: &DdtConfig) -> Result<()> {
    let section = |name: &str| {
        let name = name.to_string();
        move |e: ddt_core::Error| match e {
            ddt_core::Error::Config { field, reason } => DdtError::config(format!("{name}.{field}"), reason),
            other => other.into(),
        }
    };
    c.tokenizer.validate().map_err(section("tokenizer"))?;
    c.run.validate().map_err(section("run"))?;
    c.lm.validate().map_err(section("lm"))?;
    c.lm_run.validate().map_err(section("lm_run"))?;
    c.sampling.validate().map_err(section("sampling"))?;
    if c.data.manifest.is_none() && c.data.synth_count == 0 {
        return Err(DdtError::config("data.synth_count", "must be positive when no manifest is given"));
    }
    if c.data.sampler_steps == 0 {
        return Err(DdtError::config("data.sampler_steps", "must be positive"));
    }
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Splits `a.b=value`; the value is read as a TOML literal, falling back to a
/// bare string.
fn parse_override(o: &str) -> Result<(String, toml::Value)> {
    let Some((key, raw)) = o.split_once('=') else {
        return Err(DdtError::config(o, "override must have the form key=value"));
    };
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(DdtError::config(o, "override key is empty"));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    Ok((key.to_string(), value))
}

fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut table = doc;
    for p in parts {
        let entry = table.entry(p).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| DdtError::config(key, format!("`{p}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn res(text: &str, overrides: &[&str]) -> Result<ResolvedConfig> {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        resolve(Some(text), &o, None, None, PathBuf::new())
    }

    #[test]
    fn empty_file_gives_defaults() {
        let r = res("", &[]).unwrap();
        assert_eq!(r.config, DdtConfig::default());
        assert_eq!(r.hash, config_hash(&DdtConfig::default()));
        assert_eq!(r.hash.len(), 64);
    }

    #[test]
    fn hash_is_content_derived() {
        let a = res("[tokenizer]\ntokens = 8\n", &[]).unwrap();
        let b = res("# comment\n[tokenizer]\ntokens   =   8\n", &[]).unwrap();
        assert_eq!(a.hash, b.hash);
    }

    #[test]
    fn override_changes_value_and_hash() {
        let base = res("[tokenizer]\ntokens = 8\n", &[]).unwrap();
        let o = res("[tokenizer]\ntokens = 8\n", &["tokenizer.tokens=16"]).unwrap();
        assert_eq!(o.config.tokenizer.tokens, 16);
        assert_ne!(o.hash, base.hash);
    }

    #[test]
    fn partial_lm_run_keeps_lm_defaults() {
        let r = res("[lm_run]\ntotal_steps = 70\n", &[]).unwrap();
        assert_eq!(r.config.lm_run.total_steps, 70);
        assert_eq!(r.config.lm_run.weight_decay, RunConfig::lm_default().weight_decay);
    }

    #[test]
    fn negative_lr_names_the_field() {
        let e = res("[run]\npeak_lr = -1e-3\n", &[]).unwrap_err();
        assert_eq!(e.exit_code(), 3);
        assert!(matches!(&e, DdtError::Config { field, .. } if field == "run.peak_lr"), "{e}");
    }

    #[test]
    fn type_errors_name_the_path() {
        let e = res("[run]\npeak_lr = \"fast\"\n", &[]).unwrap_err();
        assert!(matches!(&e, DdtError::Config { field, .. } if field == "run.peak_lr"), "{e}");
        let e = res("[run]\npeak_lrr = 1.0\n", &[]).unwrap_err();
        assert_eq!(e.exit_code(), 3);
        assert!(e.to_string().contains("peak_lrr"), "{e}");
    }

    #[test]
    fn seed_precedence() {
        let r = |text: &str, flag, env| resolve(Some(text), &[], flag, env, PathBuf::new()).unwrap().seed();
        assert_eq!(r("", None, None), 0);
        assert_eq!(r("", None, Some("7")), 7);
        assert_eq!(r("seed = 3", None, Some("7")), 3);
        assert_eq!(r("seed = 3", Some(9), Some("7")), 9);
        let c = resolve(Some("seed = 3"), &[], None, None, PathBuf::new()).unwrap().config;
        assert_eq!((c.run.seed, c.lm_run.seed, c.sampling.seed), (3, 3, 3));
        let e = resolve(None, &[], None, Some("x"), PathBuf::new()).unwrap_err();
        assert!(matches!(e, DdtError::Config { field, .. } if field == SEED_ENV));
    }

    #[test]
    fn malformed_overrides() {
        assert!(res("", &["tokenizer.tokens"]).is_err());
        assert!(res("", &["seed.x=1"]).is_err());
        assert!(res("", &["=1"]).is_err());
        let r = res("", &["data.manifest=images/list.tsv"]).unwrap();
        assert_eq!(r.config.data.manifest, Some(PathBuf::from("images/list.tsv")));
    }

    #[test]
    fn toml_round_trip() {
        let r = res("seed = 5\n[tokenizer]\ntokens = 8\n[run]\ngrad_clip = 1.0\n", &[]).unwrap();
        let again = res(&r.to_toml(), &[]).unwrap();
        assert_eq!(again.config, r.config);
        assert_eq!(again.hash, r.hash);
    }
}
