//! LLM-induced decision-tree re-ranking.
//!
//! A tree tests evidence features (or the prior) against thresholds. Each
//! branch carries a constant score adjustment; a candidate's final score is
//! its prior plus the adjustments along its root-to-leaf path.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::atomic::Ordering as AtomicOrdering;

use serde_json::{json, Value};

use crate::corpus::CorpusStats;
use crate::evidence::{feature_index, EvidenceVector, FEATURE_NAMES};
use crate::llmclient::{ChatMessage, LlmClient, PromptRole, PromptTemplate};
use crate::retrieval::{CandidateSet, LinkStats};
use crate::scalar::Scalar;

pub const DEFAULT_MAX_DEPTH: usize = 5;
pub const PRIOR_FEATURE: &str = "s_prior";

#[derive(Debug, thiserror::Error)]
pub enum ReasoningError {
    #[error("tree parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("unknown feature {name:?} at {location}")]
    UnknownFeature { name: String, location: String },
    #[error("tree depth {depth} exceeds maximum {max}")]
    TooDeep { depth: usize, max: usize },
    #[error("no evidence for candidate {entity:?} of mention {mention:?}")]
    MissingEvidence { mention: String, entity: String },
    #[error("no prior for candidate {entity:?} of mention {mention:?}")]
    MissingPrior { mention: String, entity: String },
    #[error("llm error: {0}")]
    Llm(#[from] crate::llmclient::LlmError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn parse_err(location: &str, message: impl Into<String>) -> ReasoningError {
    ReasoningError::Parse {
        location: location.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparator {
    Lt,
    Le,
    Gt,
    Ge,
}

impl Comparator {
    pub fn test<T: Scalar>(self, x: T, threshold: T) -> bool {
        match self {
            Self::Lt => x < threshold,
            Self::Le => x <= threshold,
            Self::Gt => x > threshold,
            Self::Ge => x >= threshold,
        }
    }
}

impl fmt::Display for Comparator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lt => "<",
            Self::Le => "<=",
            Self::Gt => ">",
            Self::Ge => ">=",
        })
    }
}

impl FromStr for Comparator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "<" => Ok(Self::Lt),
            "<=" | "≤" => Ok(Self::Le),
            ">" => Ok(Self::Gt),
            ">=" | "≥" => Ok(Self::Ge),
            other => Err(format!("unknown comparator {other:?}")),
        }
    }
}

/// Feature reference: an evidence index or the prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    Evidence(usize),
    Prior,
}

impl Feature {
    pub fn parse(name: &str) -> Option<Self> {
        if name == PRIOR_FEATURE {
            Some(Self::Prior)
        } else {
            feature_index(name).map(Self::Evidence)
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Evidence(i) => FEATURE_NAMES[i],
            Self::Prior => PRIOR_FEATURE,
        }
    }

    fn value<T: Scalar>(self, f: &EvidenceVector<T>, prior: T) -> T {
        match self {
            Self::Evidence(i) => f.to_array()[i],
            Self::Prior => prior,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch<T> {
    pub delta: T,
    pub child: Option<Box<TreeNode<T>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode<T> {
    pub feature: Feature,
    pub op: Comparator,
    pub threshold: T,
    pub on_true: Branch<T>,
    pub on_false: Branch<T>,
}

impl<T: Scalar> TreeNode<T> {
    pub fn leaf(feature: &str, op: Comparator, threshold: f64, delta_true: f64, delta_false: f64) -> Self {
        Self {
            feature: Feature::parse(feature).expect("known feature"),
            op,
            threshold: T::lit(threshold),
            on_true: Branch {
                delta: T::lit(delta_true),
                child: None,
            },
            on_false: Branch {
                delta: T::lit(delta_false),
                child: None,
            },
        }
    }

    pub fn then_true(mut self, child: TreeNode<T>) -> Self {
        self.on_true.child = Some(Box::new(child));
        self
    }

    pub fn then_false(mut self, child: TreeNode<T>) -> Self {
        self.on_false.child = Some(Box::new(child));
        self
    }

    pub fn depth(&self) -> usize {
        let d = |b: &Branch<T>| b.child.as_ref().map_or(0, |c| c.depth());
        1 + d(&self.on_true).max(d(&self.on_false))
    }

    fn to_json(&self) -> Value {
        let child = |b: &Branch<T>| b.child.as_ref().map_or(Value::Null, |c| c.to_json());
        json!({
            "feature": self.feature.name(),
            "op": self.op.to_string(),
            "threshold": self.threshold.as_f64(),
            "delta_true": self.on_true.delta.as_f64(),
            "delta_false": self.on_false.delta.as_f64(),
            "true": child(&self.on_true),
            "false": child(&self.on_false),
        })
    }
}

/// A validated tree. `root == None` is the identity tree.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree<T> {
    pub root: Option<TreeNode<T>>,
    pub max_depth: usize,
}

impl<T: Scalar> DecisionTree<T> {
    pub fn identity() -> Self {
        Self {
            root: None,
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }

    pub fn new(root: TreeNode<T>, max_depth: usize) -> Result<Self, ReasoningError> {
        let depth = root.depth();
        if depth > max_depth {
            return Err(ReasoningError::TooDeep { depth, max: max_depth });
        }
        Ok(Self {
            root: Some(root),
            max_depth,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.root.is_none()
    }

    pub fn depth(&self) -> usize {
        self.root.as_ref().map_or(0, TreeNode::depth)
    }

    pub fn to_json(&self) -> Value {
        json!({
            "max_depth": self.max_depth,
            "root": self.root.as_ref().map_or(Value::Null, TreeNode::to_json),
        })
    }

    /// Reply text as an LLM would send it: a fenced JSON block.
    pub fn to_reply(&self) -> String {
        format!(
            "```json\n{}\n```\n",
            serde_json::to_string_pretty(&self.to_json()).expect("tree serializes")
        )
    }
}

/// Pull the JSON payload out of a reply: the first ```json fence, else the
/// first plain fence, else the whole text.
fn extract_block(text: &str) -> &str {
    for open in ["```json", "```JSON", "```"] {
        if let Some(start) = text.find(open) {
            let body = &text[start + open.len()..];
            if let Some(end) = body.find("```") {
                return body[..end].trim();
            }
        }
    }
    text.trim()
}

fn number<T: Scalar>(obj: &serde_json::Map<String, Value>, key: &str, loc: &str) -> Result<T, ReasoningError> {
    let v = obj
        .get(key)
        .ok_or_else(|| parse_err(loc, format!("missing field {key:?}")))?;
    let x = v
        .as_f64()
        .ok_or_else(|| parse_err(loc, format!("field {key:?} is not a number")))?;
    if !x.is_finite() {
        return Err(parse_err(loc, format!("field {key:?} is not finite")));
    }
    Ok(T::lit(x))
}

fn clamp_delta<T: Scalar>(d: T, loc: &str) -> T {
    let one = T::one();
    if d.abs() > one {
        log::warn!("delta {d} at {loc} clamped to [-1, 1]");
        d.max(-one).min(one)
    } else {
        d
    }
}

fn parse_node<T: Scalar>(v: &Value, loc: &str, depth: usize, max_depth: usize) -> Result<TreeNode<T>, ReasoningError> {
    if depth > max_depth {
        return Err(ReasoningError::TooDeep { depth, max: max_depth });
    }
    let obj = v.as_object().ok_or_else(|| parse_err(loc, "expected an object"))?;
    let name = obj
        .get("feature")
        .and_then(Value::as_str)
        .ok_or_else(|| parse_err(loc, "missing string field \"feature\""))?;
    let feature = Feature::parse(name).ok_or_else(|| ReasoningError::UnknownFeature {
        name: name.to_string(),
        location: loc.to_string(),
    })?;
    let op: Comparator = obj
        .get("op")
        .and_then(Value::as_str)
        .ok_or_else(|| parse_err(loc, "missing string field \"op\""))?
        .parse()
        .map_err(|m: String| parse_err(loc, m))?;
    let threshold = number(obj, "threshold", loc)?;
    let branch = |key: &str, delta_key: &str| -> Result<Branch<T>, ReasoningError> {
        let delta = match obj.get(delta_key) {
            None | Some(Value::Null) => T::zero(),
            Some(_) => clamp_delta(number(obj, delta_key, loc)?, loc),
        };
        let child = match obj.get(key) {
            None | Some(Value::Null) => None,
            Some(c) => Some(Box::new(parse_node(c, &format!("{loc}.{key}"), depth + 1, max_depth)?)),
        };
        Ok(Branch { delta, child })
    };
    let on_true = branch("true", "delta_true")?;
    let on_false = branch("false", "delta_false")?;
    Ok(TreeNode {
        feature,
        op,
        threshold,
        on_true,
        on_false,
    })
}

/// Parse and validate a tree from LLM reply text. The payload is either a
/// node object or `{"max_depth": .., "root": node}`; a null root is the
/// identity tree.
pub fn parse_tree<T: Scalar>(text: &str, max_depth: usize) -> Result<DecisionTree<T>, ReasoningError> {
    let block = extract_block(text);
    let v: Value = serde_json::from_str(block).map_err(|e| parse_err("root", format!("invalid JSON: {e}")))?;
    let root = match v.get("root") {
        Some(r) if v.get("feature").is_none() => r,
        _ => &v,
    };
    if root.is_null() {
        return Ok(DecisionTree {
            root: None,
            max_depth,
        });
    }
    let node = parse_node(root, "root", 1, max_depth)?;
    DecisionTree::new(node, max_depth)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep<T> {
    /// Path from the root, e.g. `root.true.false`.
    pub node: String,
    pub feature: &'static str,
    pub taken: bool,
    pub delta: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningTrace<T> {
    pub prior: T,
    pub steps: Vec<TraceStep<T>>,
    /// Deltas summed in path order.
    pub delta_sum: T,
    /// `prior + delta_sum`.
    pub final_score: T,
}

pub fn evaluate<T: Scalar>(tree: &DecisionTree<T>, f: &EvidenceVector<T>, prior: T) -> ReasoningTrace<T> {
    let mut steps = Vec::new();
    let mut delta_sum = T::zero();
    let mut node = tree.root.as_ref();
    let mut path = String::from("root");
    while let Some(n) = node {
        let taken = n.op.test(n.feature.value(f, prior), n.threshold);
        let branch = if taken { &n.on_true } else { &n.on_false };
        steps.push(TraceStep {
            node: path.clone(),
            feature: n.feature.name(),
            taken,
            delta: branch.delta,
        });
        delta_sum = delta_sum + branch.delta;
        path.push_str(if taken { ".true" } else { ".false" });
        node = branch.child.as_deref();
    }
    ReasoningTrace {
        prior,
        steps,
        delta_sum,
        final_score: prior + delta_sum,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedCandidate<T> {
    pub entity: String,
    pub final_score: T,
    pub trace: ReasoningTrace<T>,
}

/// Order: final score descending, prior descending, entity id ascending.
pub fn rerank<T: Scalar>(
    cands: &CandidateSet<T>,
    evidence: &BTreeMap<String, EvidenceVector<T>>,
    tree: &DecisionTree<T>,
    stats: Option<&LinkStats>,
) -> Result<Vec<RankedCandidate<T>>, ReasoningError> {
    let mut ranked = cands
        .candidates
        .iter()
        .map(|id| {
            let f = evidence.get(id).ok_or_else(|| ReasoningError::MissingEvidence {
                mention: cands.mention.clone(),
                entity: id.clone(),
            })?;
            let prior = *cands.prior.get(id).ok_or_else(|| ReasoningError::MissingPrior {
                mention: cands.mention.clone(),
                entity: id.clone(),
            })?;
            if let Some(s) = stats {
                s.tree_evals.fetch_add(1, AtomicOrdering::Relaxed);
            }
            let trace = evaluate(tree, f, prior);
            Ok(RankedCandidate {
                entity: id.clone(),
                final_score: trace.final_score,
                trace,
            })
        })
        .collect::<Result<Vec<_>, ReasoningError>>()?;
    ranked.sort_by(|a, b| {
        b.final_score
            .partial_cmp(&a.final_score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| b.trace.prior.partial_cmp(&a.trace.prior).unwrap_or(Ordering::Equal))
            .then_with(|| a.entity.cmp(&b.entity))
    });
    Ok(ranked)
}

/// Audit line: `mention entity path deltas prior final`.
pub fn write_trace_line<T: Scalar, W: Write>(mut out: W, mention: &str, c: &RankedCandidate<T>) -> std::io::Result<()> {
    let path: Vec<String> = c
        .trace
        .steps
        .iter()
        .map(|s| format!("{}:{}", s.node, if s.taken { 'T' } else { 'F' }))
        .collect();
    let deltas: Vec<String> = c.trace.steps.iter().map(|s| format!("{:?}", s.delta.as_f64())).collect();
    writeln!(
        out,
        "{mention}\t{}\t{}\t{}\t{:?}\t{:?}",
        c.entity,
        if path.is_empty() { "-".into() } else { path.join(",") },
        if deltas.is_empty() { "-".into() } else { deltas.join(",") },
        c.trace.prior.as_f64(),
        c.final_score.as_f64()
    )
}

/// One glossary line per evidence feature, plus the prior.
pub fn feature_glossary() -> String {
    const MEANING: [&str; 14] = [
        "cosine of mention text and entity text embeddings",
        "cosine of mention text and entity image embeddings (0 if the entity has no image)",
        "cosine of mention image and entity text embeddings (0 if the mention has no image)",
        "cosine of mention image and entity image embeddings (0 if either has no image)",
        "cosine of graph-contextualized text representations",
        "cosine of mention text-view and entity image-view graph representations",
        "cosine of mention image-view and entity text-view graph representations",
        "cosine of image-view graph representations",
        "Ratcliff-Obershelp similarity of the names, in [0, 1]",
        "mean of the nine similarity features above",
        "maximum of the nine similarity features",
        "stat_max minus stat_mu; large values flag reliance on one cue",
        "1 if the mention has an image, else 0",
        "1 if the entity has an image, else 0",
    ];
    let mut out = format!("- {PRIOR_FEATURE}: normalized multi-view retrieval score in [0, 1]\n");
    for (name, meaning) in FEATURE_NAMES.iter().zip(MEANING) {
        out.push_str(&format!("- {name}: {meaning}\n"));
    }
    out
}

const TREE_SCHEMA: &str = r#"{"max_depth": <int>, "root": {"feature": "<name>", "op": "<|<=|>|>=", "threshold": <number>, "delta_true": <number>, "delta_false": <number>, "true": <node or null>, "false": <node or null>}}"#;

pub fn induce_tree_prompt(stats: &CorpusStats, max_depth: usize) -> Result<Vec<ChatMessage>, ReasoningError> {
    let corpus_stats = format!(
        "- mentions: {} ({} with image)\n- entities: {} ({} with image)\n- overall image ratio: {:.4}",
        stats.mentions,
        stats.mentions_with_image,
        stats.entities,
        stats.entities_with_image,
        stats.image_ratio()
    );
    let glossary = feature_glossary();
    let depth = max_depth.to_string();
    Ok(PromptTemplate::induce_tree().render(&[
        ("corpus_stats", &corpus_stats),
        ("feature_glossary", &glossary),
        ("max_depth", &depth),
        ("schema", TREE_SCHEMA),
    ])?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InducedTree<T> {
    pub tree: DecisionTree<T>,
    pub attempts: usize,
    pub fell_back: bool,
}

/// Ask the LLM for a tree, re-prompting with the parse error up to
/// `retries` times. Any LLM failure or exhausted retries yields the
/// identity tree.
pub fn induce_tree<T: Scalar>(
    llm: &LlmClient,
    stats: &CorpusStats,
    max_depth: usize,
    retries: usize,
) -> Result<InducedTree<T>, ReasoningError> {
    let mut messages = induce_tree_prompt(stats, max_depth)?;
    let mut attempts = 0;
    while attempts <= retries {
        attempts += 1;
        let reply = match llm.complete(PromptRole::InduceTree, &messages) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("tree induction request failed ({e}); using the identity tree");
                return Ok(InducedTree {
                    tree: DecisionTree::identity(),
                    attempts,
                    fell_back: true,
                });
            }
        };
        match parse_tree(&reply, max_depth) {
            Ok(tree) => {
                return Ok(InducedTree {
                    tree,
                    attempts,
                    fell_back: false,
                })
            }
            Err(e) => {
                log::warn!("tree reply {attempts} rejected: {e}");
                messages.push(ChatMessage {
                    role: "assistant".into(),
                    content: reply,
                });
                messages.push(ChatMessage::user(format!(
                    "That tree could not be used: {e}. Reply again with one fenced json block following the schema."
                )));
            }
        }
    }
    log::warn!("no valid tree after {attempts} attempts; using the identity tree");
    Ok(InducedTree {
        tree: DecisionTree::identity(),
        attempts,
        fell_back: true,
    })
}

/// Hand-written tree encoding cross-view consistency checks: without a
/// strong name match, an entity whose image similarity is high but whose
/// contextual text agreement is weak is demoted, and one with consistent
/// contextual agreement is promoted.
pub fn consistency_tree<T: Scalar>() -> DecisionTree<T> {
    use Comparator::*;
    let with_image = TreeNode::leaf("has_img_e", Ge, 0.5, 0.0, 0.0)
        .then_true(
            TreeNode::leaf("inst_vv", Gt, 0.45, -0.05, 0.05)
                .then_true(TreeNode::leaf("group_tt", Lt, 0.65, -0.068, 0.05))
                .then_false(TreeNode::leaf("group_tt", Ge, 0.65, 0.1, -0.02)),
        )
        .then_false(TreeNode::leaf("group_tt", Ge, 0.65, 0.1, -0.05));
    let root = TreeNode::leaf("lex", Lt, 0.8, 0.0, 0.1).then_true(with_image);
    DecisionTree::new(root, DEFAULT_MAX_DEPTH).expect("depth within bound")
}
