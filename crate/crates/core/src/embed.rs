//! Embedding storage, encoders, and LLM-enhanced text embeddings.
//!
//! Precomputed embedding files hold one JSON object per line:
//! `{"id": "e1", "text": [..d floats..], "image": [..d floats..]}` with
//! `image` optional. Every vector is L2-normalized on ingest.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, MultimodalNode};
use crate::linalg::{cosine, is_unit, normalized};
use crate::llmclient::{describe_node, LlmClient, LlmError};
use crate::scalar::Scalar;

const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("embedding file line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("no precomputed {what} vector for {id:?}")]
    MissingVector { id: String, what: &'static str },
    #[error("vector for {id:?} has length {got}, expected {expected}")]
    DimMismatch {
        id: String,
        got: usize,
        expected: usize,
    },
    #[error("vector for {0:?} has zero or non-finite norm and cannot be normalized")]
    Normalization(String),
    #[error("{id:?} is not a node of the corpus")]
    UnknownNode { id: String },
    #[error("image vector for {0:?}, which has no image")]
    UnexpectedImage(String),
    #[error("enhancement failed for {} node(s): {failed:?}", failed.len())]
    Enhancement { failed: Vec<String> },
    #[error("llm: {0}")]
    Llm(#[from] LlmError),
}

/// Unit-norm text, image and enhanced-text vectors keyed by node id.
///
/// Nodes without an image have no entry in the image map; zero-masking is
/// applied later, inside the image view of the graph encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore<T> {
    dim: usize,
    text: BTreeMap<String, Vec<T>>,
    image: BTreeMap<String, Vec<T>>,
    enhanced: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> EmbeddingStore<T> {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            text: BTreeMap::new(),
            image: BTreeMap::new(),
            enhanced: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn text(&self, id: &str) -> Option<&[T]> {
        self.text.get(id).map(Vec::as_slice)
    }

    pub fn image(&self, id: &str) -> Option<&[T]> {
        self.image.get(id).map(Vec::as_slice)
    }

    pub fn enhanced(&self, id: &str) -> Option<&[T]> {
        self.enhanced.get(id).map(Vec::as_slice)
    }

    pub fn text_count(&self) -> usize {
        self.text.len()
    }

    pub fn image_count(&self) -> usize {
        self.image.len()
    }

    pub fn enhanced_count(&self) -> usize {
        self.enhanced.len()
    }

    pub fn enhanced_ids(&self) -> impl Iterator<Item = &str> {
        self.enhanced.keys().map(String::as_str)
    }

    fn checked(&self, id: &str, v: &[T]) -> Result<Vec<T>, EmbedError> {
        if v.len() != self.dim {
            return Err(EmbedError::DimMismatch {
                id: id.to_string(),
                got: v.len(),
                expected: self.dim,
            });
        }
        normalized(v).ok_or_else(|| EmbedError::Normalization(id.to_string()))
    }

    /// Normalizes and stores a text vector.
    pub fn insert_text(&mut self, id: &str, v: &[T]) -> Result<(), EmbedError> {
        let v = self.checked(id, v)?;
        self.text.insert(id.to_string(), v);
        Ok(())
    }

    pub fn insert_image(&mut self, id: &str, v: &[T]) -> Result<(), EmbedError> {
        let v = self.checked(id, v)?;
        self.image.insert(id.to_string(), v);
        Ok(())
    }

    pub fn insert_enhanced(&mut self, id: &str, v: &[T]) -> Result<(), EmbedError> {
        let v = self.checked(id, v)?;
        self.enhanced.insert(id.to_string(), v);
        Ok(())
    }

    pub fn remove_image(&mut self, id: &str) -> Option<Vec<T>> {
        self.image.remove(id)
    }

    /// Checks the store against a corpus: every node has a text vector,
    /// image vectors only for nodes with images, all vectors unit-norm.
    pub fn validate(&self, corpus: &Corpus) -> Result<(), EmbedError> {
        for node in corpus.nodes() {
            if !self.text.contains_key(&node.id) {
                return Err(EmbedError::MissingVector {
                    id: node.id.clone(),
                    what: "text",
                });
            }
        }
        for id in self.image.keys() {
            match corpus.get(id) {
                Some(n) if n.has_image() => {}
                Some(_) => return Err(EmbedError::UnexpectedImage(id.clone())),
                None => return Err(EmbedError::UnknownNode { id: id.clone() }),
            }
        }
        for (id, v) in self.text.iter().chain(&self.image).chain(&self.enhanced) {
            if v.len() != self.dim || !is_unit(v, UNIT_TOL) {
                return Err(EmbedError::Normalization(id.clone()));
            }
        }
        Ok(())
    }

    /// Writes text and image vectors in the precomputed-embedding format.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), EmbedError> {
        for (id, t) in &self.text {
            let rec = EmbeddingRecord {
                id: id.clone(),
                text: t.iter().map(|x| x.as_f64()).collect(),
                image: self.image(id).map(|v| v.iter().map(|x| x.as_f64()).collect()),
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmbedError> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub text: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<Vec<f64>>,
}

/// Stand-in for the multimodal text encoder.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_text(&self, text: &str) -> Result<Vec<f64>, EmbedError>;
}

/// Seeded hash-to-Gaussian encoder: identical input, identical vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticProvider {
    dim: usize,
    seed: u64,
}

impl SyntheticProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim, seed }
    }
}

impl EmbeddingProvider for SyntheticProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let digest = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(text.as_bytes())
            .finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let v: Vec<f64> = (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        normalized(&v).ok_or_else(|| EmbedError::Normalization(text.to_string()))
    }
}

/// Precomputed vectors keyed by node id. As an encoder, it looks its
/// input up as an id.
#[derive(Debug, Clone, PartialEq)]
pub struct FileProvider {
    dim: usize,
    records: HashMap<String, EmbeddingRecord>,
}

impl FileProvider {
    pub fn parse<R: Read>(reader: R, dim: usize) -> Result<Self, EmbedError> {
        let mut records = HashMap::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EmbeddingRecord =
                serde_json::from_str(&line).map_err(|e| EmbedError::Malformed {
                    line: line_no,
                    message: e.to_string(),
                })?;
            for v in std::iter::once(&rec.text).chain(rec.image.as_ref()) {
                if v.len() != dim {
                    return Err(EmbedError::DimMismatch {
                        id: rec.id.clone(),
                        got: v.len(),
                        expected: dim,
                    });
                }
            }
            if records.contains_key(&rec.id) {
                return Err(EmbedError::Malformed {
                    line: line_no,
                    message: format!("duplicate id {:?}", rec.id),
                });
            }
            records.insert(rec.id.clone(), rec);
        }
        Ok(Self { dim, records })
    }

    pub fn load(path: impl AsRef<Path>, dim: usize) -> Result<Self, EmbedError> {
        Self::parse(File::open(path)?, dim)
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingRecord> {
        self.records.get(id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl EmbeddingProvider for FileProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_text(&self, id: &str) -> Result<Vec<f64>, EmbedError> {
        self.records
            .get(id)
            .map(|r| r.text.clone())
            .ok_or_else(|| EmbedError::MissingVector {
                id: id.to_string(),
                what: "text",
            })
    }
}

fn to_scalar<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

/// Text vector for every node, image vector for every node with an image.
///
/// With `precomputed`, every node must be covered by the file (and image
/// nodes must carry an image vector). Otherwise `provider` encodes the node
/// text, and the image stand-in is the encoding of `image:<image_ref>`.
pub fn build_store<T: Scalar>(
    corpus: &Corpus,
    provider: &dyn EmbeddingProvider,
    precomputed: Option<&FileProvider>,
) -> Result<EmbeddingStore<T>, EmbedError> {
    let dim = precomputed.map_or(provider.dim(), |p| p.dim);
    let mut store = EmbeddingStore::new(dim);
    for node in corpus.nodes() {
        match precomputed {
            Some(file) => {
                let rec = file.get(&node.id).ok_or_else(|| EmbedError::MissingVector {
                    id: node.id.clone(),
                    what: "text",
                })?;
                store.insert_text(&node.id, &to_scalar::<T>(&rec.text))?;
                if node.has_image() {
                    let img = rec.image.as_ref().ok_or_else(|| EmbedError::MissingVector {
                        id: node.id.clone(),
                        what: "image",
                    })?;
                    store.insert_image(&node.id, &to_scalar::<T>(img))?;
                }
            }
            None => {
                let t = provider.encode_text(&node.text())?;
                store.insert_text(&node.id, &to_scalar::<T>(&t))?;
                if let Some(image_ref) = &node.image_ref {
                    let v = provider.encode_text(&format!("image:{image_ref}"))?;
                    store.insert_image(&node.id, &to_scalar::<T>(&v))?;
                }
            }
        }
    }
    Ok(store)
}

/// Mentions plus the entities found in any mention's top-`k_llm` text
/// neighbourhood, at most `entity_budget` of them. Entities are admitted by
/// their best rank across mentions, then best score, then id.
pub fn select_enhancement_targets<T: Scalar>(
    corpus: &Corpus,
    store: &EmbeddingStore<T>,
    k_llm: usize,
    entity_budget: usize,
) -> Vec<String> {
    let mut best: HashMap<&str, (usize, T)> = HashMap::new();
    for m in corpus.mentions() {
        let Some(tm) = store.text(&m.id) else { continue };
        let mut scored: Vec<(&str, T)> = corpus
            .entities()
            .iter()
            .filter_map(|e| store.text(&e.id).map(|te| (e.id.as_str(), cosine(tm, te))))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(b.0)));
        for (rank, (id, score)) in scored.into_iter().take(k_llm).enumerate() {
            let entry = best.entry(id).or_insert((rank, score));
            if rank < entry.0 || (rank == entry.0 && score > entry.1) {
                *entry = (rank, score);
            }
        }
    }
    let mut chosen: Vec<(&str, usize, T)> = best.into_iter().map(|(id, (r, s))| (id, r, s)).collect();
    chosen.sort_by(|a, b| {
        a.1.cmp(&b.1)
            .then(b.2.partial_cmp(&a.2).expect("finite"))
            .then(a.0.cmp(b.0))
    });
    chosen.truncate(entity_budget);

    let mut targets: Vec<String> = corpus.mentions().iter().map(|m| m.id.clone()).collect();
    targets.extend(chosen.into_iter().map(|(id, _, _)| id.to_string()));
    targets
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OnLlmFailure {
    /// Return [`EmbedError::Enhancement`] listing every failed id.
    #[default]
    Abort,
    /// Reuse the node's original text vector and record it as a fallback.
    FallBack,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EnhanceReport {
    pub enhanced: usize,
    /// Nodes whose description came back empty.
    pub empty_descriptions: Vec<String>,
    /// Nodes whose LLM request failed (only with [`OnLlmFailure::FallBack`]).
    pub failed: Vec<String>,
}

enum Outcome<T> {
    Vector(Vec<T>),
    Empty,
    Failed(String),
}

/// Describes each target with the LLM, encodes the description, and stores
/// it as the node's enhanced vector. Requests run on at most `jobs` workers;
/// results are merged in target order.
pub fn enhance_nodes<T: Scalar>(
    corpus: &Corpus,
    targets: &[String],
    llm: &LlmClient,
    provider: &dyn EmbeddingProvider,
    store: &mut EmbeddingStore<T>,
    jobs: usize,
    on_failure: OnLlmFailure,
) -> Result<EnhanceReport, EmbedError> {
    let nodes: Vec<&MultimodalNode> = targets
        .iter()
        .map(|id| {
            corpus
                .get(id)
                .ok_or_else(|| EmbedError::UnknownNode { id: id.clone() })
        })
        .collect::<Result<_, _>>()?;

    let work = |node: &&MultimodalNode| -> Result<Outcome<T>, EmbedError> {
        let desc = match describe_node(llm, node) {
            Ok(d) => d,
            Err(e @ LlmError::Request { .. }) => return Ok(Outcome::Failed(e.to_string())),
            Err(e) => return Err(e.into()),
        };
        if desc.trim().is_empty() {
            return Ok(Outcome::Empty);
        }
        Ok(Outcome::Vector(to_scalar(&provider.encode_text(&desc)?)))
    };
    let outcomes: Vec<Result<Outcome<T>, EmbedError>> = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map(|pool| pool.install(|| nodes.par_iter().map(work).collect()))
        .unwrap_or_else(|_| nodes.iter().map(work).collect());

    let mut report = EnhanceReport::default();
    let mut failed = Vec::new();
    for (node, outcome) in nodes.iter().zip(outcomes) {
        match outcome? {
            Outcome::Vector(v) => {
                store.insert_enhanced(&node.id, &v)?;
                report.enhanced += 1;
            }
            Outcome::Empty => {
                log::warn!("empty description for {}; reusing its text embedding", node.id);
                fall_back(store, &node.id)?;
                report.empty_descriptions.push(node.id.clone());
            }
            Outcome::Failed(msg) => {
                log::warn!("description request for {} failed: {msg}", node.id);
                failed.push(node.id.clone());
            }
        }
    }
    if !failed.is_empty() {
        match on_failure {
            OnLlmFailure::Abort => return Err(EmbedError::Enhancement { failed }),
            OnLlmFailure::FallBack => {
                for id in &failed {
                    fall_back(store, id)?;
                }
                report.failed = failed;
            }
        }
    }
    Ok(report)
}

fn fall_back<T: Scalar>(store: &mut EmbeddingStore<T>, id: &str) -> Result<(), EmbedError> {
    let original = store
        .text(id)
        .ok_or_else(|| EmbedError::MissingVector {
            id: id.to_string(),
            what: "text",
        })?
        .to_vec();
    store.enhanced.insert(id.to_string(), original);
    Ok(())
}
