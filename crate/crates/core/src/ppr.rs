//! Personalized PageRank and top-K local subgraph extraction.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::graph::ContextGraph;
use crate::scalar::Scalar;

const MAX_ITERATIONS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PprConfig<T> {
    /// Teleport probability back to the source.
    pub alpha: T,
    /// Stop when the L1 change between iterates drops below this.
    pub tol: T,
}

impl<T: Scalar> Default for PprConfig<T> {
    fn default() -> Self {
        Self {
            alpha: T::lit(0.15),
            tol: T::lit(1e-10),
        }
    }
}

impl<T: Scalar> PprConfig<T> {
    fn check(&self) {
        assert!(
            self.alpha > T::zero() && self.alpha < T::one(),
            "alpha must lie in (0, 1)"
        );
        assert!(self.tol > T::zero(), "tol must be positive");
    }
}

fn component<T: Scalar>(graph: &ContextGraph<T>, source: usize) -> Vec<usize> {
    let mut seen = vec![false; graph.node_count()];
    let mut order = vec![source];
    let mut queue = VecDeque::from([source]);
    seen[source] = true;
    while let Some(u) = queue.pop_front() {
        for &v in graph.neighbors(u) {
            if !seen[v] {
                seen[v] = true;
                order.push(v);
                queue.push_back(v);
            }
        }
    }
    order
}

/// Stationary personalized PageRank for `source` by power iteration,
/// `π ← α·e_source + (1−α)·AᵀD⁻¹π`, over unweighted adjacency. The result is
/// dense over all graph nodes; nodes outside the source's component score 0.
pub fn ppr_scores<T: Scalar>(graph: &ContextGraph<T>, source: usize, cfg: &PprConfig<T>) -> Vec<T> {
    cfg.check();
    let n = graph.node_count();
    let mut out = vec![T::zero(); n];
    if graph.degree(source) == 0 {
        out[source] = T::one();
        return out;
    }

    let nodes = component(graph, source);
    let mut local = vec![usize::MAX; n];
    for (i, &g) in nodes.iter().enumerate() {
        local[g] = i;
    }
    let adj: Vec<Vec<usize>> = nodes
        .iter()
        .map(|&g| graph.neighbors(g).iter().map(|&v| local[v]).collect())
        .collect();
    let inv_deg: Vec<T> = adj
        .iter()
        .map(|a| T::one() / T::from_usize_lossy(a.len()))
        .collect();

    let keep = T::one() - cfg.alpha;
    let mut pi = vec![T::zero(); nodes.len()];
    pi[0] = T::one();
    let mut next = vec![T::zero(); nodes.len()];
    for _ in 0..MAX_ITERATIONS {
        next.iter_mut().for_each(|x| *x = T::zero());
        next[0] = cfg.alpha;
        for (u, nbrs) in adj.iter().enumerate() {
            if pi[u] == T::zero() {
                continue;
            }
            let share = keep * pi[u] * inv_deg[u];
            for &v in nbrs {
                next[v] = next[v] + share;
            }
        }
        let change: T = pi.iter().zip(&next).map(|(a, b)| (*a - *b).abs()).sum();
        std::mem::swap(&mut pi, &mut next);
        if change < cfg.tol {
            break;
        }
    }
    for (i, &g) in nodes.iter().enumerate() {
        out[g] = pi[i];
    }
    out
}

/// A center node and its top-K PPR neighbourhood. `members[0]` is the
/// center; `edges` are induced edges as pairs of positions in `members`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgraph {
    pub center: usize,
    pub members: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
}

impl Subgraph {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn induced<T: Scalar>(graph: &ContextGraph<T>, members: Vec<usize>) -> Self {
        let mut pos = std::collections::HashMap::with_capacity(members.len());
        for (i, &m) in members.iter().enumerate() {
            pos.insert(m, i);
        }
        let mut edges = Vec::new();
        for (i, &m) in members.iter().enumerate() {
            for &v in graph.neighbors(m) {
                if let Some(&j) = pos.get(&v) {
                    if i < j {
                        edges.push((i, j));
                    }
                }
            }
        }
        edges.sort_unstable();
        Self {
            center: members[0],
            members,
            edges,
        }
    }
}

/// Center plus its `k_ppr` highest-scoring other nodes (ties by ascending
/// id). Nodes with zero score are never included.
pub fn extract_subgraph<T: Scalar>(
    graph: &ContextGraph<T>,
    center: usize,
    k_ppr: usize,
    cfg: &PprConfig<T>,
) -> Subgraph {
    let scores = ppr_scores(graph, center, cfg);
    let mut ranked: Vec<(usize, T)> = scores
        .iter()
        .enumerate()
        .filter(|&(i, s)| i != center && *s > T::zero())
        .map(|(i, &s)| (i, s))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite score")
            .then_with(|| graph.id(a.0).cmp(graph.id(b.0)))
    });
    let mut members = vec![center];
    members.extend(ranked.into_iter().take(k_ppr).map(|(i, _)| i));
    Subgraph::induced(graph, members)
}

/// One subgraph per node, in node order.
pub fn extract_all<T: Scalar>(
    graph: &ContextGraph<T>,
    k_ppr: usize,
    cfg: &PprConfig<T>,
) -> Vec<Subgraph> {
    (0..graph.node_count())
        .into_par_iter()
        .map(|c| extract_subgraph(graph, c, k_ppr, cfg))
        .collect()
}

fn cache_header<T: Scalar>(graph: &ContextGraph<T>, k_ppr: usize, cfg: &PprConfig<T>) -> String {
    format!(
        "# graph={} k_ppr={} alpha={:?} tol={:?}",
        graph.content_hash(),
        k_ppr,
        cfg.alpha.as_f64(),
        cfg.tol.as_f64()
    )
}

pub fn cache_path<T: Scalar>(
    dir: &Path,
    graph: &ContextGraph<T>,
    k_ppr: usize,
    cfg: &PprConfig<T>,
) -> PathBuf {
    let hash = graph.content_hash();
    dir.join(format!(
        "subgraphs-{}-k{}-a{}.txt",
        &hash[..16],
        k_ppr,
        cfg.alpha.as_f64()
    ))
}

/// Cache file: a header naming the graph hash and parameters, then one line
/// per node: the center id followed by the other member ids.
pub fn save_subgraphs<T: Scalar>(
    path: &Path,
    graph: &ContextGraph<T>,
    k_ppr: usize,
    cfg: &PprConfig<T>,
    subgraphs: &[Subgraph],
) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", cache_header(graph, k_ppr, cfg))?;
    for sg in subgraphs {
        let ids: Vec<&str> = sg.members.iter().map(|&m| graph.id(m)).collect();
        writeln!(out, "{}", ids.join(" "))?;
    }
    out.flush()
}

/// `None` when the file is missing, stale, or unreadable.
pub fn load_subgraphs<T: Scalar>(
    path: &Path,
    graph: &ContextGraph<T>,
    k_ppr: usize,
    cfg: &PprConfig<T>,
) -> Option<Vec<Subgraph>> {
    let reader = BufReader::new(File::open(path).ok()?);
    let mut lines = reader.lines();
    if lines.next()?.ok()? != cache_header(graph, k_ppr, cfg) {
        return None;
    }
    let mut out = Vec::with_capacity(graph.node_count());
    for line in lines {
        let line = line.ok()?;
        let members: Option<Vec<usize>> =
            line.split_whitespace().map(|id| graph.index_of(id)).collect();
        let members = members?;
        if members.is_empty() {
            return None;
        }
        out.push(Subgraph::induced(graph, members));
    }
    (out.len() == graph.node_count()).then_some(out)
}

/// Loads subgraphs from `dir` if a matching cache exists, otherwise
/// extracts and writes them.
pub fn cached_subgraphs<T: Scalar>(
    dir: &Path,
    graph: &ContextGraph<T>,
    k_ppr: usize,
    cfg: &PprConfig<T>,
) -> std::io::Result<Vec<Subgraph>> {
    let path = cache_path(dir, graph, k_ppr, cfg);
    if let Some(subs) = load_subgraphs(&path, graph, k_ppr, cfg) {
        log::info!("loaded {} cached subgraphs from {}", subs.len(), path.display());
        return Ok(subs);
    }
    let subs = extract_all(graph, k_ppr, cfg);
    std::fs::create_dir_all(dir)?;
    save_subgraphs(&path, graph, k_ppr, cfg, &subs)?;
    Ok(subs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, MultimodalNode, NodeKind};
    use crate::graph::{union_graph, EdgeKey, EdgeSet};

    pub(crate) fn graph_from(names: &[&str], edges: &[(&str, &str)]) -> (Corpus, ContextGraph<f64>) {
        let entities = names
            .iter()
            .map(|n| MultimodalNode::new(*n, NodeKind::Entity, *n))
            .collect();
        let corpus = Corpus::new(Vec::new(), entities).unwrap();
        let mut set = EdgeSet::new();
        for (a, b) in edges {
            set.insert(EdgeKey::new(a, b).unwrap(), 1.0);
        }
        let g = union_graph(&set, &EdgeSet::new(), &corpus).unwrap();
        (corpus, g)
    }

    #[test]
    fn single_isolated_node() {
        let (_, g) = graph_from(&["a"], &[]);
        assert_eq!(ppr_scores(&g, 0, &PprConfig::default()), vec![1.0]);
        let sg = extract_subgraph(&g, 0, 5, &PprConfig::default());
        assert_eq!(sg.members, vec![0]);
        assert!(sg.edges.is_empty());
    }

    #[test]
    fn two_node_graph_matches_closed_form() {
        // π_s = α + (1-α) π_t, π_t = (1-α) π_s  =>  π_s = 1/(2-α)
        let (_, g) = graph_from(&["a", "b"], &[("a", "b")]);
        let cfg = PprConfig::default();
        let pi = ppr_scores(&g, 0, &cfg);
        assert!((pi[0] - 1.0 / 1.85).abs() < 1e-9);
        assert!((pi[1] - 0.85 / 1.85).abs() < 1e-9);
    }

    #[test]
    fn star_leaves_are_symmetric() {
        let (_, g) = graph_from(
            &["c", "l1", "l2", "l3", "l4"],
            &[("c", "l1"), ("c", "l2"), ("c", "l3"), ("c", "l4")],
        );
        let pi = ppr_scores(&g, 0, &PprConfig::default());
        for leaf in 2..5 {
            assert_eq!(pi[leaf], pi[1]);
        }
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn path_graph_keeps_direct_neighbor() {
        let (_, g) = graph_from(&["a", "b", "c"], &[("a", "b"), ("b", "c")]);
        let pi = ppr_scores(&g, 0, &PprConfig::default());
        assert!(pi[1] > pi[2]);
        let sg = extract_subgraph(&g, 0, 1, &PprConfig::default());
        assert_eq!(sg.members, vec![0, 1]);
        assert_eq!(sg.edges, vec![(0, 1)]);
    }

    #[test]
    fn unreachable_nodes_are_excluded_even_with_spare_budget() {
        let (_, g) = graph_from(&["a", "b", "c", "d"], &[("a", "b"), ("c", "d")]);
        let sg = extract_subgraph(&g, 0, 10, &PprConfig::default());
        assert_eq!(sg.members, vec![0, 1]);
    }

    #[test]
    fn cache_round_trip_and_staleness() {
        let (corpus, g) = graph_from(&["a", "b", "c"], &[("a", "b"), ("b", "c")]);
        let cfg = PprConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let subs = cached_subgraphs(dir.path(), &g, 2, &cfg).unwrap();
        let path = cache_path(dir.path(), &g, 2, &cfg);
        assert!(path.exists());
        assert_eq!(load_subgraphs(&path, &g, 2, &cfg).unwrap(), subs);
        assert!(load_subgraphs(&path, &g, 1, &cfg).is_none());

        let mut set = EdgeSet::new();
        set.insert(EdgeKey::new("a", "c").unwrap(), 1.0);
        let other = union_graph(&set, &EdgeSet::new(), &corpus).unwrap();
        assert!(load_subgraphs(&path, &other, 2, &cfg).is_none());
    }
}
