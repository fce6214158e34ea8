//! Synthetic sequence-transduction corpus.
//!
//! Every token owns a fixed embedding drawn once per seed from a Gaussian
//! scaled so its expected norm is `embedding_norm`; `noise_std` is thus
//! measured against the token spacing. An utterance is a random token
//! sequence (no token repeated back to back, so segment boundaries are
//! observable) where each token emits a random number of frames equal to its
//! embedding plus Gaussian noise.
//!
//! On disk a corpus is a directory with `corpus.json` (the generating config)
//! and one subdirectory per split holding `features.bin` (little-endian f64,
//! utterances concatenated row-major) and `manifest.json` (id, frames,
//! offset, tokens).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transducer::BLANK;

pub const CORPUS_FORMAT_VERSION: u32 = 1;

/// Default embedding norm. At noise 0.3 it leaves a trained default model
/// a few percent WER, so comparisons between models are not all ties at zero.
pub const EMBEDDING_NORM: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Vocabulary size including blank.
    pub vocab: usize,
    pub d_in: usize,
    /// Inclusive range of tokens per utterance.
    pub tokens_per_utterance: [usize; 2],
    /// Inclusive range of frames each token emits.
    pub frames_per_token: [usize; 2],
    pub noise_std: f64,
    /// Expected L2 norm of a token embedding.
    pub embedding_norm: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_train: 2000,
            n_dev: 200,
            n_test: 200,
            vocab: 17,
            d_in: 16,
            tokens_per_utterance: [3, 7],
            frames_per_token: [2, 4],
            noise_std: 0.3,
            embedding_norm: EMBEDDING_NORM,
        }
    }
}

impl CorpusConfig {
    pub fn check(&self) -> Result<()> {
        let [tmin, tmax] = self.tokens_per_utterance;
        let [fmin, fmax] = self.frames_per_token;
        if self.vocab < 3 {
            return Err(Error::contract(format!("vocab {} must be >= 3", self.vocab)));
        }
        if self.d_in == 0 || tmin == 0 || tmin > tmax || fmin == 0 || fmin > fmax {
            return Err(Error::contract(format!(
                "degenerate corpus ranges: d_in={}, tokens {tmin}..={tmax}, frames {fmin}..={fmax}",
                self.d_in
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::contract(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        if !(self.embedding_norm > 0.0 && self.embedding_norm.is_finite()) {
            return Err(Error::contract(format!("embedding_norm {} must be positive", self.embedding_norm)));
        }
        if self.n_train + self.n_dev + self.n_test == 0 {
            return Err(Error::contract("corpus would be empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T × d_in]`.
    pub features: Tensor,
    /// Reference tokens, never blank.
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?} (expected train, dev or test)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

fn utterance(
    rng: &mut ChaCha8Rng,
    cfg: &CorpusConfig,
    embeddings: &[Vec<f64>],
    noise: Option<Normal<f64>>,
    id: String,
) -> Utterance {
    let [tmin, tmax] = cfg.tokens_per_utterance;
    let [fmin, fmax] = cfg.frames_per_token;
    let n = rng.random_range(tmin..=tmax);
    let mut tokens = Vec::with_capacity(n);
    let mut data = Vec::new();
    for _ in 0..n {
        // vocab >= 3 leaves at least two real tokens, so a non-repeat exists
        let token = loop {
            let t = rng.random_range(1..cfg.vocab);
            if tokens.last() != Some(&t) {
                break t;
            }
        };
        tokens.push(token);
        for _ in 0..rng.random_range(fmin..=fmax) {
            for &e in &embeddings[token] {
                data.push(e + noise.map_or(0.0, |d| d.sample(rng)));
            }
        }
    }
    let frames = data.len() / cfg.d_in;
    Utterance {
        id,
        features: Tensor::new(vec![frames, cfg.d_in], data).expect("non-empty utterance"),
        tokens,
    }
}

/// Deterministic corpus for `cfg`.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, cfg.embedding_norm / (cfg.d_in as f64).sqrt()).expect("valid normal");
    let embeddings: Vec<Vec<f64>> = (0..cfg.vocab).map(|_| (0..cfg.d_in).map(|_| unit.sample(&mut rng)).collect()).collect();
    let noise = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).expect("valid normal"));
    let mut make = |split: Split, n: usize| -> Vec<Utterance> {
        (0..n)
            .map(|i| utterance(&mut rng, cfg, &embeddings, noise, format!("{split}-{i:05}")))
            .collect()
    };
    let train = make(Split::Train, cfg.n_train);
    let dev = make(Split::Dev, cfg.n_dev);
    let test = make(Split::Test, cfg.n_test);
    debug_assert!(train.iter().chain(&dev).chain(&test).all(|u| !u.tokens.contains(&BLANK)));
    Ok(Corpus {
        config: cfg.clone(),
        train,
        dev,
        test,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    frames: usize,
    offset: usize,
    tokens: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitManifest {
    format: String,
    version: u32,
    d_in: usize,
    utterances: Vec<ManifestEntry>,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "corpus",
        detail: detail.into(),
    }
}

fn write_split(dir: &Path, d_in: usize, utts: &[Utterance]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(utts.len());
    let mut offset = 0;
    for u in utts {
        entries.push(ManifestEntry {
            id: u.id.clone(),
            frames: u.features.rows(),
            offset,
            tokens: u.tokens.clone(),
        });
        offset += u.features.len();
        for v in u.features.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = SplitManifest {
        format: "todm-corpus-split".into(),
        version: CORPUS_FORMAT_VERSION,
        d_in,
        utterances: entries,
    };
    let path = dir.join("features.bin");
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("serializable");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_split(dir: &Path) -> Result<Vec<Utterance>> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: SplitManifest = serde_json::from_str(&text).map_err(|e| format_err(format!("{}: {e}", path.display())))?;
    if manifest.version != CORPUS_FORMAT_VERSION {
        return Err(format_err(format!("unsupported corpus version {}", manifest.version)));
    }
    let path = dir.join("features.bin");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(format_err("features.bin is not a whole number of f64 values"));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    manifest
        .utterances
        .into_iter()
        .map(|e| {
            let n = e.frames * manifest.d_in;
            let data = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| format_err(format!("utterance {} out of range", e.id)))?
                .to_vec();
            Ok(Utterance {
                features: Tensor::new(vec![e.frames, manifest.d_in], data)?,
                id: e.id,
                tokens: e.tokens,
            })
        })
        .collect()
}

impl Corpus {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("corpus.json");
        let text = serde_json::to_string_pretty(&self.config).expect("serializable");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        for split in Split::ALL {
            write_split(&dir.join(split.name()), self.config.d_in, self.split(split))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("corpus.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: CorpusConfig = serde_json::from_str(&text).map_err(|e| format_err(format!("{}: {e}", path.display())))?;
        Ok(Self {
            train: read_split(&dir.join("train"))?,
            dev: read_split(&dir.join("dev"))?,
            test: read_split(&dir.join("test"))?,
            config,
        })
    }
}
