//! Run configuration file and the run manifest.
//!
//! A run is configured by one TOML file with `[corpus]`, `[model]`,
//! `[space]`, `[train]` and `[search]` sections; every key is optional and
//! unknown keys are rejected. Each command records what it produced in
//! `manifest.json` inside the run directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::CorpusConfig;
use crate::error::{Error, Result};
use crate::search::SearchParams;
use crate::supernet::{Architecture, SearchSpace};
use crate::trainer::TrainConfig;

/// The searchable part of the encoder; the layer count comes from `[model]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceConfig {
    pub layer_options: Vec<usize>,
    pub channel_options: Vec<usize>,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self {
            layer_options: vec![0, 2, 4],
            channel_options: vec![32, 64, 128, 256],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: Architecture,
    pub space: SpaceConfig,
    pub train: TrainConfig,
    pub search: SearchParams,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn search_space(&self) -> Result<SearchSpace> {
        SearchSpace::new(self.model.n_layers, self.space.layer_options.clone(), self.space.channel_options.clone())
    }

    /// Cross-section consistency.
    pub fn check(&self) -> Result<()> {
        self.corpus.check().map_err(|e| Error::Config(format!("[corpus] {e}")))?;
        self.train.check()?;
        self.search.check()?;
        let space = self.search_space().map_err(|e| Error::Config(format!("[space] {e}")))?;
        self.model.check_space(&space).map_err(|e| Error::Config(format!("[model] {e}")))?;
        if self.corpus.d_in != self.model.d_in || self.corpus.vocab != self.model.vocab {
            return Err(Error::Config(format!(
                "[corpus] d_in/vocab ({}, {}) differ from [model] ({}, {})",
                self.corpus.d_in, self.corpus.vocab, self.model.d_in, self.model.vocab
            )));
        }
        Ok(())
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "todm-run-manifest";
pub const MANIFEST_VERSION: u32 = 1;

/// One file produced by a command, relative to the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub corpus: u64,
    pub train: u64,
    pub search: u64,
}

/// Everything a run directory holds and the config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            config: config.clone(),
            seeds: Seeds {
                corpus: config.corpus.seed,
                train: config.train.seed,
                search: config.search.seed,
            },
            artifacts: Vec::new(),
        }
    }

    /// Loads `dir/manifest.json`, or starts a fresh manifest.
    pub fn load_or_new(dir: &Path, config: &RunConfig) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::new(config));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "run manifest",
            detail: e.to_string(),
        })?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::Format {
                what: "run manifest",
                detail: format!("unsupported {} version {}", m.format, m.version),
            });
        }
        Ok(m)
    }

    /// Hashes and records `files` (paths inside `dir`) under `kind`,
    /// replacing earlier records of the same paths.
    pub fn record(&mut self, dir: &Path, kind: &str, files: &[PathBuf]) -> Result<()> {
        for file in files {
            let rel = file.strip_prefix(dir).unwrap_or(file).to_string_lossy().replace('\\', "/");
            let sha256 = sha256_file(file)?;
            self.artifacts.retain(|a| a.path != rel);
            self.artifacts.push(Artifact {
                kind: kind.into(),
                path: rel,
                sha256,
            });
        }
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("serializable manifest");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Digest of the manifest contents; equal for identical runs.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("serializable manifest")))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::Budget;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.search_space().unwrap().cardinality(), 4u128.pow(8) + 4u128.pow(6) + 4u128.pow(4));
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.train.kd_mode = crate::distill::KdMode::Kld;
        cfg.search.budgets = vec![Budget::Fraction(0.25), Budget::Bytes(150_000)];
        cfg.search.fitness_decoder = crate::supernet::Decoder::BEAM5;
        let text = cfg.to_toml();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
    }

    #[test]
    fn errors_name_the_offending_key() {
        let e = RunConfig::parse("[train]\nlearning_rate = 0.1\n").unwrap_err().to_string();
        assert!(e.contains("learning_rate"), "{e}");
        let e = RunConfig::parse("[corpus]\nvocab = 9\n").unwrap_err().to_string();
        assert!(e.contains("vocab"), "{e}");
        let e = RunConfig::parse("[search]\nbudgets = [\"half\"]\n").unwrap_err().to_string();
        assert!(e.contains("half"), "{e}");
        assert!(RunConfig::parse("[space]\nchannel_options = [32, 300]\n").is_err());
    }

    #[test]
    fn manifest_records_and_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.txt");
        fs::write(&f, "hello").unwrap();
        let cfg = RunConfig::default();
        let mut m = RunManifest::load_or_new(dir.path(), &cfg).unwrap();
        m.record(dir.path(), "note", &[f.clone()]).unwrap();
        m.record(dir.path(), "note", &[f]).unwrap();
        assert_eq!(m.artifacts.len(), 1);
        assert_eq!(m.artifacts[0].path, "a.txt");
        assert_eq!(m.artifacts[0].sha256, "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824");
        m.save(dir.path()).unwrap();
        let back = RunManifest::load_or_new(dir.path(), &cfg).unwrap();
        assert_eq!(back.hash(), m.hash());
    }
}
