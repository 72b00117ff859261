//! Contextualized mention/entity graph: threshold-gated edges from the base
//! embeddings, top-K edges from the LLM-enhanced similarity, and their union.
//!
//! Graph dump format, one edge per line: `id_a id_b provenance score`, with
//! `id_a < id_b` and provenance one of `gated`, `llm`, `both`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::corpus::Corpus;
use crate::embed::EmbeddingStore;
use crate::linalg::cosine;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("edge endpoint {0:?} is not a corpus node")]
    DanglingEndpoint(String),
    #[error("self-loop on {0:?}")]
    SelfLoop(String),
    #[error("graph file line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("invalid graph config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphConfig<T> {
    pub delta_gate: T,
    pub k_llm: usize,
    pub fusion_weights: [T; 3],
}

impl<T: Scalar> Default for GraphConfig<T> {
    fn default() -> Self {
        let third = T::one() / T::lit(3.0);
        Self {
            delta_gate: T::lit(0.9),
            k_llm: 30,
            fusion_weights: [third; 3],
        }
    }
}

impl<T: Scalar> GraphConfig<T> {
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.k_llm == 0 {
            return Err(GraphError::Config("k_llm must be at least 1".into()));
        }
        if self.fusion_weights.iter().any(|w| *w < T::zero() || !w.is_finite()) {
            return Err(GraphError::Config("fusion weights must be finite and nonnegative".into()));
        }
        if self.fusion_weights.iter().all(|w| *w == T::zero()) {
            return Err(GraphError::Config("fusion weights must not all be zero".into()));
        }
        if self.delta_gate.is_nan() {
            return Err(GraphError::Config("delta_gate is NaN".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Provenance {
    Gated,
    LlmEnhanced,
    Both,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gated => "gated",
            Self::LlmEnhanced => "llm",
            Self::Both => "both",
        })
    }
}

impl FromStr for Provenance {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gated" => Ok(Self::Gated),
            "llm" => Ok(Self::LlmEnhanced),
            "both" => Ok(Self::Both),
            other => Err(format!("unknown provenance {other:?}")),
        }
    }
}

/// Unordered pair stored as `(smaller id, larger id)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeKey(String, String);

impl EdgeKey {
    /// `None` for a self-pair.
    pub fn new(a: &str, b: &str) -> Option<Self> {
        match a.cmp(b) {
            std::cmp::Ordering::Less => Some(Self(a.to_string(), b.to_string())),
            std::cmp::Ordering::Greater => Some(Self(b.to_string(), a.to_string())),
            std::cmp::Ordering::Equal => None,
        }
    }

    pub fn a(&self) -> &str {
        &self.0
    }

    pub fn b(&self) -> &str {
        &self.1
    }
}

/// Edges with the score that admitted each one.
pub type EdgeSet<T> = BTreeMap<EdgeKey, T>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge<T> {
    pub provenance: Provenance,
    /// Gated score when the gate admitted the pair, else the fused score.
    pub score: T,
}

fn fixed_order_ids<T: Scalar>(store: &EmbeddingStore<T>, ids: &[String]) -> Vec<String> {
    ids.iter().filter(|id| store.text(id).is_some()).cloned().collect()
}

/// `cos(t_a, t_b)` plus `cos(v_a, v_b)` when both nodes have an image.
pub fn gated_similarity<T: Scalar>(a: &str, b: &str, store: &EmbeddingStore<T>) -> T {
    let (ta, tb) = (
        store.text(a).expect("text embedding for a"),
        store.text(b).expect("text embedding for b"),
    );
    let text = cosine(ta, tb);
    match (store.image(a), store.image(b)) {
        (Some(va), Some(vb)) => text + cosine(va, vb),
        _ => text,
    }
}

/// Every unordered pair with gated similarity at least `delta_gate`.
pub fn build_gated_edges<T: Scalar>(
    store: &EmbeddingStore<T>,
    ids: &[String],
    cfg: &GraphConfig<T>,
) -> EdgeSet<T> {
    let ids = fixed_order_ids(store, ids);
    let found: Vec<(EdgeKey, T)> = (0..ids.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let ids = &ids;
            ((i + 1)..ids.len()).filter_map(move |j| {
                let s = gated_similarity(&ids[i], &ids[j], store);
                (s >= cfg.delta_gate).then(|| {
                    (EdgeKey::new(&ids[i], &ids[j]).expect("distinct ids"), s)
                })
            })
        })
        .collect();
    found.into_iter().collect()
}

/// `w1·cos(t_a, t̃_b) + w2·cos(t̃_a, t_b) + w3·cos(t̃_a, t̃_b)`; a term whose
/// enhanced vector is missing contributes nothing.
pub fn llm_fused_similarity<T: Scalar>(
    a: &str,
    b: &str,
    store: &EmbeddingStore<T>,
    cfg: &GraphConfig<T>,
) -> T {
    let [w1, w2, w3] = cfg.fusion_weights;
    let (ea, eb) = (store.enhanced(a), store.enhanced(b));
    let mut s = T::zero();
    if let (Some(ta), Some(eb)) = (store.text(a), eb) {
        s = s + w1 * cosine(ta, eb);
    }
    if let (Some(ea), Some(tb)) = (ea, store.text(b)) {
        s = s + w2 * cosine(ea, tb);
    }
    if let (Some(ea), Some(eb)) = (ea, eb) {
        s = s + w3 * cosine(ea, eb);
    }
    s
}

/// Each node's top-`k_llm` partners by fused similarity, as undirected
/// edges. Partners with a fused score of exactly zero are skipped; ties go
/// to the smaller partner id. A pair picked from both ends keeps the larger
/// score.
pub fn build_llm_edges<T: Scalar>(
    store: &EmbeddingStore<T>,
    ids: &[String],
    cfg: &GraphConfig<T>,
) -> EdgeSet<T> {
    let ids = fixed_order_ids(store, ids);
    let picks: Vec<Vec<(EdgeKey, T)>> = (0..ids.len())
        .into_par_iter()
        .map(|i| {
            let mut scored: Vec<(&str, T)> = ids
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| (b.as_str(), llm_fused_similarity(&ids[i], b, store, cfg)))
                .filter(|(_, s)| *s != T::zero())
                .collect();
            scored.sort_by(|x, y| y.1.partial_cmp(&x.1).expect("finite").then(x.0.cmp(y.0)));
            scored
                .into_iter()
                .take(cfg.k_llm)
                .filter_map(|(b, s)| EdgeKey::new(&ids[i], b).map(|k| (k, s)))
                .collect()
        })
        .collect();
    let mut edges = EdgeSet::new();
    for (k, s) in picks.into_iter().flatten() {
        edges
            .entry(k)
            .and_modify(|old: &mut T| *old = old.max(s))
            .or_insert(s);
    }
    edges
}

/// Undirected, loop-free graph over all corpus nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextGraph<T> {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    edges: BTreeMap<EdgeKey, Edge<T>>,
    adjacency: Vec<Vec<usize>>,
}

impl<T: Scalar> ContextGraph<T> {
    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Sorted neighbour indices.
    pub fn neighbors(&self, index: usize) -> &[usize] {
        &self.adjacency[index]
    }

    pub fn degree(&self, index: usize) -> usize {
        self.adjacency[index].len()
    }

    pub fn has_edge(&self, a: &str, b: &str) -> bool {
        EdgeKey::new(a, b).is_some_and(|k| self.edges.contains_key(&k))
    }

    pub fn edge(&self, a: &str, b: &str) -> Option<&Edge<T>> {
        EdgeKey::new(a, b).and_then(|k| self.edges.get(&k))
    }

    pub fn edges(&self) -> impl Iterator<Item = (&EdgeKey, &Edge<T>)> {
        self.edges.iter()
    }

    pub fn count_by_provenance(&self, p: Provenance) -> usize {
        self.edges.values().filter(|e| e.provenance == p).count()
    }

    /// SHA-256 over node ids and the canonical edge list.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.ids {
            h.update(id.as_bytes());
            h.update([0]);
        }
        h.update([0xff]);
        for k in self.edges.keys() {
            h.update(k.a().as_bytes());
            h.update([0]);
            h.update(k.b().as_bytes());
            h.update([1]);
        }
        hex::encode(h.finalize())
    }

    fn from_edges(corpus: &Corpus, edges: BTreeMap<EdgeKey, Edge<T>>) -> Result<Self, GraphError> {
        let ids = corpus.ids();
        let index: HashMap<String, usize> =
            ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        let mut adjacency = vec![Vec::new(); ids.len()];
        for k in edges.keys() {
            let a = *index
                .get(k.a())
                .ok_or_else(|| GraphError::DanglingEndpoint(k.a().to_string()))?;
            let b = *index
                .get(k.b())
                .ok_or_else(|| GraphError::DanglingEndpoint(k.b().to_string()))?;
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Ok(Self {
            ids,
            index,
            edges,
            adjacency,
        })
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), GraphError> {
        for (k, e) in &self.edges {
            writeln!(out, "{} {} {} {:?}", k.a(), k.b(), e.provenance, e.score.as_f64())?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GraphError> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn parse<R: Read>(reader: R, corpus: &Corpus) -> Result<Self, GraphError> {
        let mut edges = BTreeMap::new();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |message: String| GraphError::Malformed {
                line: line_no,
                message,
            };
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [a, b, prov, score] = parts[..] else {
                return Err(malformed(format!("expected 4 fields, got {}", parts.len())));
            };
            let key = EdgeKey::new(a, b).ok_or_else(|| GraphError::SelfLoop(a.to_string()))?;
            let provenance = prov.parse().map_err(malformed)?;
            let score: f64 = score
                .parse()
                .map_err(|e: std::num::ParseFloatError| malformed(e.to_string()))?;
            edges.insert(
                key,
                Edge {
                    provenance,
                    score: T::lit(score),
                },
            );
        }
        Self::from_edges(corpus, edges)
    }

    pub fn load(path: impl AsRef<Path>, corpus: &Corpus) -> Result<Self, GraphError> {
        Self::parse(File::open(path)?, corpus)
    }
}

/// `E⁽⁰⁾ ∪ E⁽¹⁾` with provenance tags.
pub fn union_graph<T: Scalar>(
    gated: &EdgeSet<T>,
    llm: &EdgeSet<T>,
    corpus: &Corpus,
) -> Result<ContextGraph<T>, GraphError> {
    let mut edges = BTreeMap::new();
    for (k, &s) in gated {
        edges.insert(
            k.clone(),
            Edge {
                provenance: Provenance::Gated,
                score: s,
            },
        );
    }
    for (k, &s) in llm {
        edges
            .entry(k.clone())
            .and_modify(|e: &mut Edge<T>| e.provenance = Provenance::Both)
            .or_insert(Edge {
                provenance: Provenance::LlmEnhanced,
                score: s,
            });
    }
    ContextGraph::from_edges(corpus, edges)
}

/// Gated edges, LLM edges and their union in one call.
pub fn build_graph<T: Scalar>(
    corpus: &Corpus,
    store: &EmbeddingStore<T>,
    cfg: &GraphConfig<T>,
) -> Result<ContextGraph<T>, GraphError> {
    cfg.validate()?;
    let ids = corpus.ids();
    let gated = build_gated_edges(store, &ids, cfg);
    let llm = build_llm_edges(store, &ids, cfg);
    log::info!("graph: {} gated edges, {} llm edges", gated.len(), llm.len());
    union_graph(&gated, &llm, corpus)
}
