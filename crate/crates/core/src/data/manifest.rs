use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::clip::{Domain, VideoClip};
use super::synth::{clip_id, ActionClass, ClipRecipe, SynthConfig, GENERATOR_TAG};
use crate::error::{Error, Result};
use crate::seed;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clip_id: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub label: usize,
    pub domain: Domain,
    pub split: Split,
    pub seed: u64,
    pub generator: String,
    /// Hex SHA-256 of the clip file.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub seed: u64,
    pub generator: String,
    pub entries: Vec<ManifestEntry>,
}

/// Number of test clips in a cell of `n` clips.
pub fn test_count(n: usize) -> usize {
    ((n as f64 * TEST_FRACTION).round() as usize).max(1)
}

/// Generates `n` clips for every (class, domain) cell under `out_dir` and
/// writes `manifest.jsonl` next to a `clips/` directory.
pub fn gen_dataset(n: usize, seed: u64, out_dir: &Path, geometry: SynthConfig) -> Result<DatasetManifest> {
    if n < 2 {
        return Err(Error::config("data.clips_per_cell", "must be >= 2"));
    }
    geometry.validate()?;
    let clips_dir = out_dir.join("clips");
    std::fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;
    let mut entries = Vec::with_capacity(n * 12);
    for (cell, (domain, class)) in Domain::ALL
        .iter()
        .flat_map(|d| ActionClass::ALL.iter().map(move |c| (*d, *c)))
        .enumerate()
    {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(seed::indexed_seed(seed, "split", cell as u64)));
        let test: HashSet<usize> = order[..test_count(n)].iter().copied().collect();
        for i in 0..n {
            let id = clip_id(class, domain, i);
            let clip = ClipRecipe::sample(class, domain, geometry, seed::child_seed(seed, &id), None)?.render(&id)?;
            let rel = PathBuf::from("clips").join(format!("{id}.clip.bin"));
            let path = out_dir.join(&rel);
            clip.write(&path)?;
            entries.push(ManifestEntry {
                clip_id: id,
                path: rel,
                label: class.id(),
                domain,
                split: if test.contains(&i) { Split::Test } else { Split::Train },
                seed,
                generator: GENERATOR_TAG.to_string(),
                sha256: file_sha256(&path)?,
            });
        }
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        seed,
        generator: GENERATOR_TAG.to_string(),
        entries,
    };
    manifest.write()?;
    Ok(manifest)
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl DatasetManifest {
    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn write(&self) -> Result<()> {
        let path = self.manifest_path();
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&out).map_err(|e| Error::io(&path, e))
    }

    /// Loads and validates a manifest. `path` may be the manifest file or
    /// its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: ManifestEntry = serde_json::from_str(line)
                .map_err(|err| Error::Data(format!("{}: line {}: {err}", file.display(), i + 1)))?;
            entries.push(e);
        }
        let first = entries
            .first()
            .ok_or_else(|| Error::Data(format!("{}: empty manifest", file.display())))?;
        let (seed, generator) = (first.seed, first.generator.clone());
        let mut ids = HashSet::new();
        for e in &entries {
            if !ids.insert(e.clip_id.as_str()) {
                return Err(Error::Data(format!("duplicate clip id {}", e.clip_id)));
            }
            if e.seed != seed || e.generator != generator {
                return Err(Error::Data(format!("clip {} disagrees on seed or generator", e.clip_id)));
            }
            if !root.join(&e.path).is_file() {
                return Err(Error::Data(format!("missing clip file {}", root.join(&e.path).display())));
            }
        }
        Ok(Self {
            root,
            seed,
            generator,
            entries,
        })
    }

    pub fn entries_in(&self, split: Split, domain: Option<Domain>) -> impl Iterator<Item = &ManifestEntry> {
        self.entries
            .iter()
            .filter(move |e| e.split == split && domain.is_none_or(|d| e.domain == d))
    }

    /// Reads a clip and checks it against its manifest entry.
    pub fn read_clip(&self, entry: &ManifestEntry) -> Result<VideoClip> {
        let path = self.root.join(&entry.path);
        let clip = VideoClip::read(&path)?;
        if clip.clip_id != entry.clip_id || clip.label != entry.label || clip.domain != entry.domain {
            return Err(Error::Data(format!(
                "{}: clip metadata disagrees with manifest entry {}",
                path.display(),
                entry.clip_id
            )));
        }
        Ok(clip)
    }

    /// SHA-256 over the manifest file contents.
    pub fn checksum(&self) -> Result<String> {
        file_sha256(&self.manifest_path())
    }
}
