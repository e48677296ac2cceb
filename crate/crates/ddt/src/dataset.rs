//! Manifests (`relative/path<TAB>label` lines), dataset loading and the
//! synthetic shapes dataset writer.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ddt_core::image::ImageTensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ArtifactMeta;
use crate::error::{DdtError, FormatError, Result};
use crate::fsutil::{create_dir, write_atomic};
use crate::imageio::{load_image, save_png};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    /// Directory entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Parses manifest text. Blank lines and lines starting with `#` are
    /// skipped; a line without a tab has an empty label.
    pub fn parse(text: &str, root: PathBuf) -> Result<Self, FormatError> {
        let mut entries = Vec::new();
        let mut offset = 0;
        for raw in text.split_inclusive('\n') {
            let line = raw.trim_end_matches(['\n', '\r']);
            if !line.trim().is_empty() && !line.starts_with('#') {
                let (path, label) = line.split_once('\t').unwrap_or((line, ""));
                if path.trim().is_empty() {
                    return Err(FormatError::new(offset, "manifest line has an empty path"));
                }
                entries.push(ManifestEntry { path: PathBuf::from(path.trim()), label: label.to_string() });
            }
            offset += raw.len();
        }
        Ok(Self { root, entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DdtError::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root).map_err(|e| e.at(path))
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|e| format!("{}\t{}\n", e.path.display(), e.label)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn labels(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.label.as_str()).collect()
    }

    /// Class-conditional mode: every label must come from `allowed`.
    pub fn check_labels(&self, allowed: &BTreeSet<String>) -> Result<()> {
        match self.entries.iter().find(|e| !allowed.contains(&e.label)) {
            Some(e) => Err(DdtError::config("manifest", format!("{}: label `{}` is not declared", e.path.display(), e.label))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: ImageTensor,
    pub label: String,
    pub path: PathBuf,
}

/// Manifest order without a seed, a seeded permutation otherwise.
pub fn iteration_order(len: usize, seed: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(s) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    }
    order
}

pub fn load_dataset(manifest: &Manifest, resolution: usize, channels: usize, seed: Option<u64>) -> Result<Vec<LabeledImage>> {
    if manifest.entries.is_empty() {
        return Err(DdtError::config("manifest", "manifest has no entries"));
    }
    iteration_order(manifest.entries.len(), seed)
        .into_iter()
        .map(|i| {
            let e = &manifest.entries[i];
            let path = manifest.resolve(e);
            Ok(LabeledImage { image: load_image(&path, resolution, channels)?, label: e.label.clone(), path })
        })
        .collect()
}

/// Renders `count` synthetic shapes to `dir` as PNGs captioned by colour and
/// shape, and writes the manifest.
pub fn write_synth_dataset(dir: &Path, count: usize, resolution: usize, seed: u64, meta: &ArtifactMeta) -> Result<Manifest> {
    create_dir(dir)?;
    let samples = ddt_core::synth::dataset(&mut ChaCha8Rng::seed_from_u64(seed), count, resolution);
    let mut entries = Vec::with_capacity(count);
    for (i, s) in samples.iter().enumerate() {
        let name = PathBuf::from(format!("{i:05}.png"));
        save_png(&s.image, &dir.join(&name), meta, &[("caption", s.caption.clone())])?;
        entries.push(ManifestEntry { path: name, label: s.caption.clone() });
    }
    let manifest = Manifest { root: dir.to_path_buf(), entries };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ddt_core::image::normalize_u8;

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize_u8(255), 1.0);
        assert_eq!(normalize_u8(0), -1.0);
        assert!((normalize_u8(128) - (2.0 * 128.0 / 255.0 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn parse_manifest() {
        let m = Manifest::parse("# header\na.png\tred circle\r\n\nb/c.png\n", PathBuf::from("/d")).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].label, "red circle");
        assert_eq!(m.entries[1].label, "");
        assert_eq!(m.resolve(&m.entries[1]), PathBuf::from("/d/b/c.png"));
        let e = Manifest::parse("a.png\tx\n\tlabel\n", PathBuf::new()).unwrap_err();
        assert_eq!(e.offset, 8);
    }

    #[test]
    fn order_is_a_pure_function_of_seed() {
        assert_eq!(iteration_order(5, None), [0, 1, 2, 3, 4]);
        assert_eq!(iteration_order(50, Some(3)), iteration_order(50, Some(3)));
        assert_ne!(iteration_order(50, Some(3)), iteration_order(50, Some(4)));
        let mut o = iteration_order(50, Some(3));
        o.sort();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn synth_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let meta = ArtifactMeta { config_hash: "h".into(), seed: 1 };
        let m = write_synth_dataset(dir.path(), 4, 16, 9, &meta).unwrap();
        let loaded = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, m);
        let data = load_dataset(&loaded, 16, 3, None).unwrap();
        let expected = ddt_core::synth::dataset(&mut ChaCha8Rng::seed_from_u64(9), 4, 16);
        for (d, e) in data.iter().zip(&expected) {
            assert_eq!(d.label, e.caption);
            assert_eq!(d.image.to_interleaved_u8(), e.image.to_interleaved_u8());
        }
        let shuffled = load_dataset(&loaded, 16, 3, Some(2)).unwrap();
        assert_eq!(shuffled.len(), 4);

        let allowed: BTreeSet<String> = m.labels().into_iter().map(String::from).collect();
        assert!(m.check_labels(&allowed).is_ok());
        assert!(m.check_labels(&BTreeSet::new()).is_err());

        let empty = Manifest { root: dir.path().into(), entries: vec![] };
        assert_eq!(load_dataset(&empty, 16, 3, None).unwrap_err().exit_code(), 3);
        let missing = Manifest::parse("nope.png\tx\n", dir.path().into()).unwrap();
        assert!(load_dataset(&missing, 16, 3, None).unwrap_err().to_string().contains("nope.png"));
    }
}
