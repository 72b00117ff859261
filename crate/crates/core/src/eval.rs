//! Hit@k scoring, the planted-corpus generator, and numerical checks of the
//! variance-fusion and distillation error bounds.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, MultimodalNode, NodeKind};
use crate::embed::{EmbedError, EmbeddingStore};
use crate::linalg::{cosine, normalized};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("margin {margin} not reachable in dimension {dim} after {attempts} attempts for mention {mention}")]
    InfeasibleMargin {
        margin: f64,
        dim: usize,
        attempts: usize,
        mention: usize,
    },
    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("malformed results line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("result for {0:?} has no ground truth")]
    MissingTruth(String),
    #[error("corpus error: {0}")]
    Corpus(#[from] CorpusError),
    #[error("embedding error: {0}")]
    Embed(#[from] EmbedError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkResult {
    pub mention: String,
    pub ranked: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<String>,
}

/// Fraction of results whose truth is among the first `k` ranked ids.
pub fn hit_at_k(results: &[LinkResult], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidArgument("k must be at least 1".into()));
    }
    if results.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for r in results {
        let truth = r.truth.as_ref().ok_or_else(|| EvalError::MissingTruth(r.mention.clone()))?;
        if r.ranked.iter().take(k).any(|id| id == truth) {
            hits += 1;
        }
    }
    Ok(hits as f64 / results.len() as f64)
}

pub fn write_results<W: Write>(mut out: W, results: &[LinkResult]) -> Result<(), EvalError> {
    for r in results {
        let line = serde_json::to_string(r).expect("result serializes");
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_results<R: Read>(reader: R) -> Result<Vec<LinkResult>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: LinkResult = serde_json::from_str(&line).map_err(|e| EvalError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        let unique: BTreeSet<&String> = r.ranked.iter().collect();
        if unique.len() != r.ranked.len() {
            return Err(EvalError::Malformed {
                line: i + 1,
                message: "ranked list has duplicates".into(),
            });
        }
        out.push(r);
    }
    Ok(out)
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<LinkResult>, EvalError> {
    read_results(fs::File::open(path)?)
}

/// Markdown-style table of Hit@k for each requested k.
pub fn metrics_table(results: &[LinkResult], ks: &[usize]) -> Result<String, EvalError> {
    let mut s = String::from("| k | Hit@k |\n|---|-------|\n");
    for &k in ks {
        s.push_str(&format!("| {k} | {:.4} |\n", hit_at_k(results, k)?));
    }
    s.push_str(&format!("\n{} mentions\n", results.len()));
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub n_mentions: usize,
    pub n_entities: usize,
    pub dim: usize,
    pub seed: u64,
    /// Minimum cosine gap between the truth and the best distractor.
    pub margin: f64,
    /// Probability that a node's image is dropped.
    pub image_dropout: f64,
    /// Norm of the Gaussian perturbation added before renormalizing.
    pub noise: f64,
    /// Perturbation taking an entity's text vector to its image vector, so
    /// both views live in one space.
    pub view_gap: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            n_mentions: 50,
            n_entities: 500,
            dim: 32,
            seed: 0,
            margin: 0.2,
            image_dropout: 0.3,
            noise: 0.3,
            view_gap: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedCorpus {
    pub corpus: Corpus,
    pub truth: BTreeMap<String, String>,
}

impl PlantedCorpus {
    pub fn write_truth<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (m, e) in &self.truth {
            writeln!(out, "{m}\t{e}")?;
        }
        Ok(())
    }

    pub fn save_truth(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut buf = Vec::new();
        self.write_truth(&mut buf)?;
        fs::write(path, buf)
    }
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>, EvalError> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (m, e) = line.split_once('\t').ok_or_else(|| EvalError::Malformed {
            line: i + 1,
            message: "expected mention<TAB>entity".into(),
        })?;
        out.insert(m.to_string(), e.to_string());
    }
    Ok(out)
}

const MAX_ATTEMPTS: usize = 1000;
const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "th"];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(u) = normalized(&v) {
            return u;
        }
    }
}

fn perturb(rng: &mut ChaCha8Rng, base: &[f64], noise: f64) -> Vec<f64> {
    let scale = noise / (base.len() as f64).sqrt();
    let v: Vec<f64> = base
        .iter()
        .map(|&x| x + scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    normalized(&v).unwrap_or_else(|| base.to_vec())
}

fn random_name(rng: &mut ChaCha8Rng, taken: &mut BTreeSet<String>) -> String {
    loop {
        let syllables = rng.random_range(2..=4);
        let mut s = String::new();
        for _ in 0..syllables {
            s.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            s.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
        }
        let mut chars = s.chars();
        let first = chars.next().expect("non-empty").to_ascii_uppercase();
        let name = std::iter::once(first).chain(chars).collect::<String>();
        if taken.insert(name.clone()) {
            return name;
        }
    }
}

/// Gap between `v`'s cosine with `truth` and with the closest distractor.
fn dominance(v: &[f64], truth: usize, pool: &[Vec<f64>]) -> f64 {
    let t = cosine(v, &pool[truth]);
    let best_other = pool
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != truth)
        .map(|(_, e)| cosine(v, e))
        .fold(f64::NEG_INFINITY, f64::max);
    t - best_other
}

/// Synthetic corpus with known answers. Entities get a random unit text
/// vector and an image vector perturbed from it; each mention copies its
/// true entity's name and perturbs its vectors, resampling until the truth
/// beats every distractor by `margin` in cosine on all four view pairs. Images are then dropped independently
/// with probability `image_dropout`.
pub fn generate_planted<T: Scalar>(cfg: &PlantedConfig) -> Result<(PlantedCorpus, EmbeddingStore<T>), EvalError> {
    if cfg.n_mentions == 0 || cfg.n_entities < cfg.n_mentions {
        return Err(EvalError::InvalidArgument(
            "need n_entities >= n_mentions >= 1".into(),
        ));
    }
    if !(cfg.margin > 0.0) || cfg.margin >= 2.0 {
        return Err(EvalError::InvalidArgument("margin must lie in (0, 2)".into()));
    }
    if !(0.0..=1.0).contains(&cfg.image_dropout) || cfg.dim == 0 {
        return Err(EvalError::InvalidArgument("dropout must lie in [0, 1] and dim > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut names = BTreeSet::new();
    let width = cfg.n_entities.to_string().len();

    let ent_text: Vec<Vec<f64>> = (0..cfg.n_entities).map(|_| random_unit(&mut rng, cfg.dim)).collect();
    let ent_image: Vec<Vec<f64>> = ent_text.iter().map(|t| perturb(&mut rng, t, cfg.view_gap)).collect();
    let ent_names: Vec<String> = (0..cfg.n_entities).map(|_| random_name(&mut rng, &mut names)).collect();

    let mut order: Vec<usize> = (0..cfg.n_entities).collect();
    order.shuffle(&mut rng);
    let truths = &order[..cfg.n_mentions];

    let mut mention_vecs = Vec::with_capacity(cfg.n_mentions);
    for (mi, &t) in truths.iter().enumerate() {
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let tv = perturb(&mut rng, &ent_text[t], cfg.noise);
            let iv = perturb(&mut rng, &ent_image[t], cfg.noise);
            let dominant = [(&tv, &ent_text), (&tv, &ent_image), (&iv, &ent_text), (&iv, &ent_image)]
                .iter()
                .all(|(v, pool)| dominance(v, t, pool) >= cfg.margin);
            if dominant {
                found = Some((tv, iv));
                break;
            }
        }
        mention_vecs.push(found.ok_or(EvalError::InfeasibleMargin {
            margin: cfg.margin,
            dim: cfg.dim,
            attempts: MAX_ATTEMPTS,
            mention: mi,
        })?);
    }

    let mut store = EmbeddingStore::new(cfg.dim);
    let to_t = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
    let mut entities = Vec::with_capacity(cfg.n_entities);
    for i in 0..cfg.n_entities {
        let id = format!("e{i:0width$}");
        let mut node = MultimodalNode::new(&id, NodeKind::Entity, &ent_names[i])
            .with_context(format!("{} is a catalogue entry", ent_names[i]));
        store.insert_text(&id, &to_t(&ent_text[i]))?;
        if !rng.random_bool(cfg.image_dropout) {
            node = node.with_image(format!("img/{id}.png"));
            store.insert_image(&id, &to_t(&ent_image[i]))?;
        }
        entities.push(node);
    }
    let mwidth = cfg.n_mentions.to_string().len();
    let mut mentions = Vec::with_capacity(cfg.n_mentions);
    let mut truth = BTreeMap::new();
    for (mi, (&t, (tv, iv))) in truths.iter().zip(&mention_vecs).enumerate() {
        let id = format!("m{mi:0mwidth$}");
        let mut node = MultimodalNode::new(&id, NodeKind::Mention, &ent_names[t])
            .with_context(format!("a passage mentioning {}", ent_names[t]));
        store.insert_text(&id, &to_t(tv))?;
        if !rng.random_bool(cfg.image_dropout) {
            node = node.with_image(format!("img/{id}.png"));
            store.insert_image(&id, &to_t(iv))?;
        }
        truth.insert(id, entities[t].id.clone());
        mentions.push(node);
    }
    let corpus = Corpus::new(mentions, entities)?;
    Ok((PlantedCorpus { corpus, truth }, store))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Report {
    pub weights: Vec<f64>,
    pub analytic_risk: f64,
    pub min_variance: f64,
    pub mc_risk: f64,
    pub mc_standard_error: f64,
    pub fused_not_worse: bool,
    pub mc_agrees: bool,
}

impl Theorem1Report {
    pub fn passed(&self) -> bool {
        self.fused_not_worse && self.mc_agrees
    }
}

/// Minimum-variance fusion of K unbiased channels with error covariance Σ:
/// `w* = Σ⁻¹1 / (1ᵀΣ⁻¹1)` with risk `1 / (1ᵀΣ⁻¹1)`, compared against the
/// best single channel and a Monte-Carlo estimate from correlated draws.
pub fn check_theorem1(sigma: &[Vec<f64>], trials: usize, seed: u64) -> Result<Theorem1Report, EvalError> {
    let k = sigma.len();
    if k == 0 || sigma.iter().any(|r| r.len() != k) {
        return Err(EvalError::InvalidArgument("sigma must be a non-empty square matrix".into()));
    }
    if trials < 2 {
        return Err(EvalError::InvalidArgument("need at least 2 trials".into()));
    }
    let m = DMatrix::from_fn(k, k, |i, j| sigma[i][j]);
    let chol = m.clone().cholesky().ok_or(EvalError::NotPositiveDefinite)?;
    let ones = DVector::from_element(k, 1.0);
    let sinv_one = chol.solve(&ones);
    let denom = ones.dot(&sinv_one);
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(EvalError::NotPositiveDefinite);
    }
    let w = &sinv_one / denom;
    let analytic = 1.0 / denom;
    let min_variance = (0..k).map(|i| sigma[i][i]).fold(f64::INFINITY, f64::min);

    let l = chol.l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let mut z = DVector::zeros(k);
    for _ in 0..trials {
        for x in z.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        let err = w.dot(&(&l * &z));
        let sq = err * err;
        sum += sq;
        sum_sq += sq * sq;
    }
    let n = trials as f64;
    let mc = sum / n;
    let var = (sum_sq / n - mc * mc).max(0.0) * n / (n - 1.0);
    let se = (var / n).sqrt();
    Ok(Theorem1Report {
        weights: w.iter().copied().collect(),
        analytic_risk: analytic,
        min_variance,
        mc_risk: mc,
        mc_standard_error: se,
        fused_not_worse: analytic <= min_variance * (1.0 + 1e-12),
        mc_agrees: (mc - analytic).abs() <= 3.0 * se,
    })
}

/// Random symmetric positive-definite `k × k` matrix `AAᵀ + εI`.
pub fn random_spd(k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let a: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..k).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    let s: f64 = (0..k).map(|t| a[i][t] * a[j][t]).sum();
                    s + if i == j { 0.1 } else { 0.0 }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem2Report {
    pub samples: usize,
    pub violations: usize,
    /// Smallest `rhs − lhs` observed.
    pub min_slack: f64,
}

/// `‖h_img − h*‖² ≤ 2‖h_img − h_txt‖² + 2‖h_txt − h*‖²`, evaluated on the
/// triple as given.
pub fn theorem2_holds(h_img: &[f64], h_txt: &[f64], h_star: &[f64]) -> (bool, f64) {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let lhs = sq(h_img, h_star);
    let rhs = 2.0 * sq(h_img, h_txt) + 2.0 * sq(h_txt, h_star);
    (lhs <= rhs + 1e-12 * rhs.max(1.0), rhs - lhs)
}

pub fn check_theorem2(samples: usize, dim: usize, seed: u64) -> Result<Theorem2Report, EvalError> {
    if samples == 0 || dim == 0 {
        return Err(EvalError::InvalidArgument("samples and dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| rng.sample(StandardNormal)).collect() };
    let mut violations = 0;
    let mut min_slack = f64::INFINITY;
    for _ in 0..samples {
        let (a, b, c) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let (ok, slack) = theorem2_holds(&a, &b, &c);
        if !ok {
            violations += 1;
        }
        min_slack = min_slack.min(slack);
    }
    Ok(Theorem2Report {
        samples,
        violations,
        min_slack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn res(truth: &str, ranked: &[&str]) -> LinkResult {
        LinkResult {
            mention: "m".into(),
            ranked: ranked.iter().map(|s| s.to_string()).collect(),
            truth: Some(truth.into()),
        }
    }

    #[test]
    fn hit_at_k_basics() {
        let r = vec![res("c", &["a", "b", "c", "d"])];
        assert_eq!(hit_at_k(&r, 1).unwrap(), 0.0);
        assert_eq!(hit_at_k(&r, 5).unwrap(), 1.0);
        let r = vec![res("z", &["a", "b"]), res("a", &["a"])];
        assert_eq!(hit_at_k(&r, 10).unwrap(), 0.5);
        assert!(hit_at_k(&r, 0).is_err());
    }

    #[test]
    fn results_round_trip_and_reject_duplicates() {
        let r = vec![res("c", &["a", "c"]), res("a", &[])];
        let mut buf = Vec::new();
        write_results(&mut buf, &r).unwrap();
        assert_eq!(read_results(buf.as_slice()).unwrap(), r);
        let dup = r#"{"mention":"m","ranked":["a","a"],"truth":"a"}"#;
        assert!(read_results(dup.as_bytes()).is_err());
    }

    #[test]
    fn planted_is_seed_determined_and_dominant() {
        let cfg = PlantedConfig {
            n_mentions: 8,
            n_entities: 40,
            dim: 16,
            seed: 3,
            image_dropout: 0.0,
            ..PlantedConfig::default()
        };
        let (a, sa) = generate_planted::<f64>(&cfg).unwrap();
        let (b, sb) = generate_planted::<f64>(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        for (m, e) in &a.truth {
            let tm = sa.text(m).unwrap();
            let best = a
                .corpus
                .entities()
                .iter()
                .max_by(|x, y| {
                    cosine(tm, sa.text(&x.id).unwrap())
                        .partial_cmp(&cosine(tm, sa.text(&y.id).unwrap()))
                        .unwrap()
                })
                .unwrap();
            assert_eq!(&best.id, e);
            assert_eq!(a.corpus.get(m).unwrap().name, a.corpus.get(e).unwrap().name);
        }
    }

    #[test]
    fn full_dropout_removes_every_image() {
        let cfg = PlantedConfig {
            n_mentions: 3,
            n_entities: 10,
            dim: 8,
            image_dropout: 1.0,
            margin: 0.05,
            ..PlantedConfig::default()
        };
        let (p, s) = generate_planted::<f64>(&cfg).unwrap();
        assert_eq!(s.image_count(), 0);
        assert!(p.corpus.nodes().all(|n| !n.has_image()));
    }

    #[test]
    fn infeasible_margin_is_reported() {
        let cfg = PlantedConfig {
            n_mentions: 2,
            n_entities: 50,
            dim: 2,
            margin: 1.9,
            ..PlantedConfig::default()
        };
        assert!(matches!(
            generate_planted::<f64>(&cfg),
            Err(EvalError::InfeasibleMargin { .. })
        ));
    }

    #[test]
    fn fusion_risk_closed_forms() {
        let r = check_theorem1(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1000, 1).unwrap();
        assert!((r.analytic_risk - 0.5).abs() < 1e-15);
        let r = check_theorem1(&[vec![1.0, 0.0], vec![0.0, 4.0]], 1000, 1).unwrap();
        assert!((r.weights[0] - 0.8).abs() < 1e-15);
        assert!((r.weights[1] - 0.2).abs() < 1e-15);
        assert!((r.analytic_risk - 0.8).abs() < 1e-15);
        let r = check_theorem1(&[vec![2.5]], 1000, 1).unwrap();
        assert_eq!(r.analytic_risk, 2.5);
        assert!(r.fused_not_worse);
        assert!(matches!(
            check_theorem1(&[vec![1.0, 1.0], vec![1.0, 1.0]], 10, 0),
            Err(EvalError::NotPositiveDefinite)
        ));
    }

    #[test]
    fn distillation_bound_equality_and_slack_cases() {
        let v = [0.3, -0.1];
        assert_eq!(theorem2_holds(&v, &v, &v), (true, 0.0));
        let star = [1.0, 1.0];
        let (ok, slack) = theorem2_holds(&v, &v, &star);
        assert!(ok && slack > 0.0);
        assert_eq!(check_theorem2(1000, 8, 4).unwrap().violations, 0);
    }
}
