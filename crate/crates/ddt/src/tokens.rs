//! Token stream files: `DDT1`, four little-endian `u32` header fields
//! (version, T, codebook size, count), then `count × T` little-endian `u32`
//! ids. A JSON sidecar next to the file carries the config hash and seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ArtifactMeta;
use crate::error::{DdtError, FormatError, Result};
use crate::fsutil::{read_bytes, write_atomic};

pub const TOKEN_MAGIC: [u8; 4] = *b"DDT1";
pub const TOKEN_VERSION: u32 = 1;
pub const TOKEN_HEADER_LEN: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenHeader {
    pub version: u32,
    pub tokens: u32,
    pub codebook_size: u32,
    pub count: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenFile {
    pub header: TokenHeader,
    pub sequences: Vec<Vec<u32>>,
}

impl TokenFile {
    /// Checks shapes and id ranges and fills in the header.
    pub fn new(tokens: usize, codebook_size: usize, sequences: Vec<Vec<u32>>) -> Result<Self, FormatError> {
        let field = |v: usize, what: &str| u32::try_from(v).map_err(|_| FormatError::new(0, format!("{what} {v} exceeds u32")));
        let header = TokenHeader {
            version: TOKEN_VERSION,
            tokens: field(tokens, "sequence length")?,
            codebook_size: field(codebook_size, "codebook size")?,
            count: field(sequences.len(), "sequence count")?,
        };
        for (i, s) in sequences.iter().enumerate() {
            let start = TOKEN_HEADER_LEN + i * tokens * 4;
            if s.len() != tokens {
                return Err(FormatError::new(start, format!("sequence {i} has {} ids, expected {tokens}", s.len())));
            }
            if let Some(j) = s.iter().position(|&id| id as usize >= codebook_size) {
                return Err(FormatError::new(start + 4 * j, format!("id {} is not below codebook size {codebook_size}", s[j])));
            }
        }
        Ok(Self { header, sequences })
    }

    pub fn tokens(&self) -> usize {
        self.header.tokens as usize
    }

    pub fn codebook_size(&self) -> usize {
        self.header.codebook_size as usize
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(TOKEN_HEADER_LEN + 4 * h.count as usize * h.tokens as usize);
        out.extend_from_slice(&TOKEN_MAGIC);
        for v in [h.version, h.tokens, h.codebook_size, h.count] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in self.sequences.iter().flatten() {
            out.extend_from_slice(&id.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < TOKEN_HEADER_LEN {
            return Err(FormatError::new(bytes.len(), format!("header needs {TOKEN_HEADER_LEN} bytes, file has {}", bytes.len())));
        }
        if bytes[..4] != TOKEN_MAGIC {
            return Err(FormatError::new(0, format!("bad magic {:?}", &bytes[..4])));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("four bytes"));
        let header = TokenHeader { version: word(4), tokens: word(8), codebook_size: word(12), count: word(16) };
        if header.version != TOKEN_VERSION {
            return Err(FormatError::new(4, format!("unsupported version {}", header.version)));
        }
        let t = header.tokens as usize;
        let expected = (header.count as usize)
            .checked_mul(t)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| FormatError::new(8, "payload size overflows"))?;
        let payload = &bytes[TOKEN_HEADER_LEN..];
        if payload.len() < expected {
            return Err(FormatError::new(bytes.len(), format!("truncated payload: {} of {expected} bytes", payload.len())));
        }
        if payload.len() > expected {
            return Err(FormatError::new(TOKEN_HEADER_LEN + expected, "trailing bytes after payload"));
        }
        let mut sequences = Vec::with_capacity(header.count as usize);
        for i in 0..header.count as usize {
            let mut seq = Vec::with_capacity(t);
            for j in 0..t {
                let off = TOKEN_HEADER_LEN + 4 * (i * t + j);
                let id = word(off);
                if id >= header.codebook_size {
                    return Err(FormatError::new(off, format!("id {id} is not below codebook size {}", header.codebook_size)));
                }
                seq.push(id);
            }
            sequences.push(seq);
        }
        Ok(Self { header, sequences })
    }
}

/// Sidecar written next to a token file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSidecar {
    #[serde(flatten)]
    pub meta: ArtifactMeta,
    pub header: TokenHeader,
    /// Manifest paths in sequence order, when the file came from a manifest.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_token_file(path: &Path, file: &TokenFile, meta: &ArtifactMeta, sources: &[String]) -> Result<()> {
    write_atomic(path, &file.to_bytes())?;
    let side = TokenSidecar { meta: meta.clone(), header: file.header, sources: sources.to_vec() };
    let json = serde_json::to_vec_pretty(&side).expect("sidecar serializes");
    write_atomic(&sidecar_path(path), &json)
}

pub fn read_token_file(path: &Path) -> Result<TokenFile> {
    TokenFile::from_bytes(&read_bytes(path)?).map_err(|e| e.at(path))
}

pub fn read_sidecar(path: &Path) -> Result<TokenSidecar> {
    let side = sidecar_path(path);
    let bytes = read_bytes(&side)?;
    serde_json::from_slice(&bytes).map_err(|e| DdtError::Metadata { path: side, reason: e.to_string() })
}
