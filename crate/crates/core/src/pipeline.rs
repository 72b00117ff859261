//! Stage orchestration over a working directory.
//!
//! Offline stages: `ingest` → `build_graph` → `train_teacher` →
//! `train_student` → `synthesize` → `induce_tree`. Online: `link`, then
//! `eval`. Every stage reads its inputs from and writes its outputs to the
//! working directory, so stages can run as separate processes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{load_corpus, Corpus, CorpusStats};
use crate::embed::{
    build_store, enhance_nodes, select_enhancement_targets, EmbeddingStore, FileProvider, OnLlmFailure,
    SyntheticProvider,
};
use crate::eval::{
    check_theorem1, check_theorem2, generate_planted, hit_at_k, load_results, load_truth, metrics_table, random_spd,
    write_results, LinkResult, PlantedConfig,
};
use crate::evidence::{assemble, write_evidence_line, EvidenceVector, Representations};
use crate::gnn::{train_student, train_teacher, GnnModel, TrainConfig, TrainReport, TrainingSet};
use crate::graph::{build_graph, ContextGraph, GraphConfig, Provenance};
use crate::llmclient::{fixture_line, LlmClient, LlmConfig, LlmMode, Transport};
use crate::ppr::{cached_subgraphs, PprConfig};
use crate::reasoning::{
    consistency_tree, induce_tree, parse_tree, rerank, write_trace_line, DecisionTree, RankedCandidate,
};
use crate::retrieval::{prior_score, select_candidates, write_candidate_dump, LinkStats, RetrievalIndex};
use crate::{Error, Real, Result};

/// Every tunable of a run. Text form is one `key = value` per line.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub dim: usize,
    pub delta_gate: f64,
    pub k_llm: usize,
    pub k_ppr: usize,
    pub k_ch: usize,
    pub alpha: f64,
    pub ppr_tol: f64,
    pub lambda_distill: f64,
    pub eta: f64,
    pub tau: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub layers: usize,
    pub max_depth: usize,
    pub tree_retries: usize,
    /// Upper bound on entities sent for LLM description.
    pub entity_budget: usize,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub llm_mode: LlmMode,
    pub llm_endpoint: Option<String>,
    pub llm_model: String,
    pub llm_api_key_env: String,
    pub llm_fixture: Option<PathBuf>,
    pub llm_timeout_ms: u64,
    pub llm_max_retries: u32,
    pub llm_backoff_ms: u64,
    pub llm_max_in_flight: usize,
    pub work_dir: PathBuf,
    pub corpus: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Tree file, or `identity`.
    pub tree: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub eval_k: Vec<usize>,
    pub planted_mentions: usize,
    pub planted_entities: usize,
    pub planted_margin: f64,
    pub planted_dropout: f64,
    pub planted_noise: f64,
    pub planted_view_gap: f64,
    pub theorem_matrices: usize,
    pub theorem_trials: usize,
    pub theorem_samples: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let planted = PlantedConfig::default();
        Self {
            seed: 0,
            dim: 32,
            delta_gate: 0.9,
            k_llm: 30,
            k_ppr: 20,
            k_ch: 250,
            alpha: 0.15,
            ppr_tol: 1e-10,
            lambda_distill: 0.75,
            eta: 0.5,
            tau: 0.1,
            lr: 0.01,
            epochs: 10,
            batch_size: 32,
            layers: 2,
            max_depth: 5,
            tree_retries: 2,
            entity_budget: 1000,
            jobs: 0,
            llm_mode: LlmMode::Mock,
            llm_endpoint: None,
            llm_model: "gpt-4o".into(),
            llm_api_key_env: "OPENAI_API_KEY".into(),
            llm_fixture: None,
            llm_timeout_ms: 60_000,
            llm_max_retries: 3,
            llm_backoff_ms: 500,
            llm_max_in_flight: 4,
            work_dir: PathBuf::from("work"),
            corpus: None,
            embeddings: None,
            tree: None,
            results: None,
            truth: None,
            eval_k: vec![1, 5, 10],
            planted_mentions: planted.n_mentions,
            planted_entities: planted.n_entities,
            planted_margin: planted.margin,
            planted_dropout: planted.image_dropout,
            planted_noise: planted.noise,
            planted_view_gap: planted.view_gap,
            theorem_matrices: 100,
            theorem_trials: 100_000,
            theorem_samples: 10_000,
        }
    }
}

fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "-").then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "-".into(), |p| p.display().to_string())
}

impl PipelineConfig {
    pub const KEYS: [&'static str; 45] = [
        "seed",
        "dim",
        "delta_gate",
        "k_llm",
        "k_ppr",
        "k_ch",
        "alpha",
        "ppr_tol",
        "lambda_distill",
        "eta",
        "tau",
        "lr",
        "epochs",
        "batch_size",
        "layers",
        "max_depth",
        "tree_retries",
        "entity_budget",
        "jobs",
        "llm_mode",
        "llm_endpoint",
        "llm_model",
        "llm_api_key_env",
        "llm_fixture",
        "llm_timeout_ms",
        "llm_max_retries",
        "llm_backoff_ms",
        "llm_max_in_flight",
        "work_dir",
        "corpus",
        "embeddings",
        "tree",
        "results",
        "truth",
        "eval_k",
        "planted_mentions",
        "planted_entities",
        "planted_margin",
        "planted_dropout",
        "planted_noise",
        "planted_view_gap",
        "theorem_matrices",
        "theorem_trials",
        "theorem_samples",
        "image_dropout",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse_value(key, v)?,
            "dim" => self.dim = parse_value(key, v)?,
            "delta_gate" => self.delta_gate = parse_value(key, v)?,
            "k_llm" => self.k_llm = parse_value(key, v)?,
            "k_ppr" => self.k_ppr = parse_value(key, v)?,
            "k_ch" => self.k_ch = parse_value(key, v)?,
            "alpha" => self.alpha = parse_value(key, v)?,
            "ppr_tol" => self.ppr_tol = parse_value(key, v)?,
            "lambda_distill" => self.lambda_distill = parse_value(key, v)?,
            "eta" => self.eta = parse_value(key, v)?,
            "tau" => self.tau = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "layers" => self.layers = parse_value(key, v)?,
            "max_depth" => self.max_depth = parse_value(key, v)?,
            "tree_retries" => self.tree_retries = parse_value(key, v)?,
            "entity_budget" => self.entity_budget = parse_value(key, v)?,
            "jobs" => self.jobs = parse_value(key, v)?,
            "llm_mode" => self.llm_mode = v.parse()?,
            "llm_endpoint" => self.llm_endpoint = (!v.is_empty() && v != "-").then(|| v.to_string()),
            "llm_model" => self.llm_model = v.to_string(),
            "llm_api_key_env" => self.llm_api_key_env = v.to_string(),
            "llm_fixture" => self.llm_fixture = opt_path(v),
            "llm_timeout_ms" => self.llm_timeout_ms = parse_value(key, v)?,
            "llm_max_retries" => self.llm_max_retries = parse_value(key, v)?,
            "llm_backoff_ms" => self.llm_backoff_ms = parse_value(key, v)?,
            "llm_max_in_flight" => self.llm_max_in_flight = parse_value(key, v)?,
            "work_dir" => self.work_dir = PathBuf::from(v),
            "corpus" => self.corpus = opt_path(v),
            "embeddings" => self.embeddings = opt_path(v),
            "tree" => self.tree = opt_path(v),
            "results" => self.results = opt_path(v),
            "truth" => self.truth = opt_path(v),
            "eval_k" => {
                self.eval_k = v
                    .split(',')
                    .map(|k| parse_value(key, k.trim()))
                    .collect::<Result<_>>()?
            }
            "planted_mentions" => self.planted_mentions = parse_value(key, v)?,
            "planted_entities" => self.planted_entities = parse_value(key, v)?,
            "planted_margin" => self.planted_margin = parse_value(key, v)?,
            "planted_dropout" | "image_dropout" => self.planted_dropout = parse_value(key, v)?,
            "planted_noise" => self.planted_noise = parse_value(key, v)?,
            "planted_view_gap" => self.planted_view_gap = parse_value(key, v)?,
            "theorem_matrices" => self.theorem_matrices = parse_value(key, v)?,
            "theorem_trials" => self.theorem_trials = parse_value(key, v)?,
            "theorem_samples" => self.theorem_samples = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::File {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Full resolved configuration in the same text form.
    pub fn to_text(&self) -> String {
        let ks: Vec<String> = self.eval_k.iter().map(usize::to_string).collect();
        let lines = [
            format!("seed = {}", self.seed),
            format!("dim = {}", self.dim),
            format!("delta_gate = {}", self.delta_gate),
            format!("k_llm = {}", self.k_llm),
            format!("k_ppr = {}", self.k_ppr),
            format!("k_ch = {}", self.k_ch),
            format!("alpha = {}", self.alpha),
            format!("ppr_tol = {}", self.ppr_tol),
            format!("lambda_distill = {}", self.lambda_distill),
            format!("eta = {}", self.eta),
            format!("tau = {}", self.tau),
            format!("lr = {}", self.lr),
            format!("epochs = {}", self.epochs),
            format!("batch_size = {}", self.batch_size),
            format!("layers = {}", self.layers),
            format!("max_depth = {}", self.max_depth),
            format!("tree_retries = {}", self.tree_retries),
            format!("entity_budget = {}", self.entity_budget),
            format!("jobs = {}", self.jobs),
            format!("llm_mode = {}", if self.llm_mode == LlmMode::Live { "live" } else { "mock" }),
            format!("llm_endpoint = {}", self.llm_endpoint.as_deref().unwrap_or("-")),
            format!("llm_model = {}", self.llm_model),
            format!("llm_api_key_env = {}", self.llm_api_key_env),
            format!("llm_fixture = {}", show_path(&self.llm_fixture)),
            format!("llm_timeout_ms = {}", self.llm_timeout_ms),
            format!("llm_max_retries = {}", self.llm_max_retries),
            format!("llm_backoff_ms = {}", self.llm_backoff_ms),
            format!("llm_max_in_flight = {}", self.llm_max_in_flight),
            format!("work_dir = {}", self.work_dir.display()),
            format!("corpus = {}", show_path(&self.corpus)),
            format!("embeddings = {}", show_path(&self.embeddings)),
            format!("tree = {}", show_path(&self.tree)),
            format!("results = {}", show_path(&self.results)),
            format!("truth = {}", show_path(&self.truth)),
            format!("eval_k = {}", ks.join(",")),
            format!("planted_mentions = {}", self.planted_mentions),
            format!("planted_entities = {}", self.planted_entities),
            format!("planted_margin = {}", self.planted_margin),
            format!("planted_dropout = {}", self.planted_dropout),
            format!("planted_noise = {}", self.planted_noise),
            format!("planted_view_gap = {}", self.planted_view_gap),
            format!("theorem_matrices = {}", self.theorem_matrices),
            format!("theorem_trials = {}", self.theorem_trials),
            format!("theorem_samples = {}", self.theorem_samples),
        ];
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    fn work(&self, name: &str) -> PathBuf {
        self.work_dir.join(name)
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.corpus.clone().unwrap_or_else(|| self.work("corpus.jsonl"))
    }

    /// Configured embeddings, else `embeddings.jsonl` in the working
    /// directory if present.
    pub fn embeddings_path(&self) -> Option<PathBuf> {
        self.embeddings
            .clone()
            .or_else(|| Some(self.work("embeddings.jsonl")).filter(|p| p.exists()))
    }

    pub fn fixture_path(&self) -> Option<PathBuf> {
        self.llm_fixture
            .clone()
            .or_else(|| Some(self.work("llm_fixture.jsonl")).filter(|p| p.exists()))
    }

    pub fn tree_path(&self) -> PathBuf {
        self.tree.clone().unwrap_or_else(|| self.work("tree.json"))
    }

    pub fn results_path(&self) -> PathBuf {
        self.results.clone().unwrap_or_else(|| self.work("results.jsonl"))
    }

    pub fn truth_path(&self) -> Option<PathBuf> {
        self.truth
            .clone()
            .or_else(|| Some(self.work("truth.tsv")).filter(|p| p.exists()))
    }

    pub fn store_path(&self) -> PathBuf {
        self.work("store.jsonl")
    }

    pub fn graph_path(&self) -> PathBuf {
        self.work("graph.txt")
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.work("teacher.ckpt")
    }

    pub fn student_path(&self) -> PathBuf {
        self.work("student.ckpt")
    }

    pub fn reps_path(&self) -> PathBuf {
        self.work("reps.jsonl")
    }

    pub fn graph_config(&self) -> GraphConfig<Real> {
        GraphConfig {
            delta_gate: self.delta_gate,
            k_llm: self.k_llm,
            ..GraphConfig::default()
        }
    }

    pub fn ppr_config(&self) -> PprConfig<Real> {
        PprConfig {
            alpha: self.alpha,
            tol: self.ppr_tol,
        }
    }

    pub fn train_config(&self) -> TrainConfig<Real> {
        TrainConfig {
            eta: self.eta,
            tau: self.tau,
            lambda_distill: self.lambda_distill,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            num_layers: self.layers,
            seed: self.seed,
        }
    }

    pub fn llm_config(&self) -> LlmConfig {
        LlmConfig {
            mode: self.llm_mode,
            endpoint: self.llm_endpoint.clone(),
            model: self.llm_model.clone(),
            api_key_env: self.llm_api_key_env.clone(),
            timeout: Duration::from_millis(self.llm_timeout_ms),
            max_retries: self.llm_max_retries,
            backoff: Duration::from_millis(self.llm_backoff_ms),
            max_in_flight: self.llm_max_in_flight,
            mock_fixture: self.fixture_path(),
        }
    }

    pub fn planted_config(&self) -> PlantedConfig {
        PlantedConfig {
            n_mentions: self.planted_mentions,
            n_entities: self.planted_entities,
            dim: self.dim,
            seed: self.seed,
            margin: self.planted_margin,
            image_dropout: self.planted_dropout,
            noise: self.planted_noise,
            view_gap: self.planted_view_gap,
        }
    }
}

/// Sizes the global worker pool; 0 keeps one worker per core. Only the
/// first call in a process takes effect.
pub fn configure_threads(jobs: usize) {
    if jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::debug!("worker pool already configured: {e}");
        }
    }
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(io_at(path))?))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_at(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_curve(path: &Path, report: &TrainReport) -> Result<()> {
    let mut out = create(path)?;
    writeln!(out, "epoch\tloss\tstructural\txmodal\talignment")?;
    for e in 0..report.epoch_loss.len() {
        let opt = |v: &[f64]| v.get(e).map_or_else(|| "-".to_string(), |x| format!("{x:.8}"));
        writeln!(
            out,
            "{e}\t{:.8}\t{:.8}\t{}\t{}",
            report.epoch_loss[e],
            report.structural_loss[e],
            opt(&report.xmodal_loss),
            opt(&report.alignment)
        )?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct RepRecord {
    id: String,
    teacher: Vec<f64>,
    student: Vec<f64>,
}

pub fn save_representations(path: &Path, reps: &Representations<Real>) -> Result<()> {
    let mut out = create(path)?;
    for (id, t) in &reps.teacher {
        let s = reps
            .student
            .get(id)
            .ok_or_else(|| Error::Config(format!("no student representation for {id}")))?;
        let rec = RepRecord {
            id: id.clone(),
            teacher: t.clone(),
            student: s.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_representations(path: &Path) -> Result<Representations<Real>> {
    let reader = BufReader::new(fs::File::open(path).map_err(io_at(path))?);
    let mut reps = Representations::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RepRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        reps.teacher.insert(rec.id.clone(), rec.teacher);
        reps.student.insert(rec.id, rec.student);
    }
    Ok(reps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphSummary {
    pub nodes: usize,
    pub edges: usize,
    pub gated: usize,
    pub llm: usize,
    pub both: usize,
    pub enhanced: usize,
    pub llm_failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSummary {
    pub mentions: usize,
    pub max_pool: usize,
    pub channel_queries: usize,
    pub similarity_evals: usize,
    pub tree_evals: usize,
    pub llm_calls: usize,
    pub total_candidates: usize,
    pub results_hash: String,
    pub hit_at: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub graph: GraphSummary,
    pub teacher_curve: Vec<f64>,
    pub student_alignment: Vec<f64>,
    pub tree_fell_back: bool,
    pub link: LinkSummary,
}

/// Runs stages against one configuration. The LLM client is created on
/// first use unless supplied.
pub struct Pipeline {
    cfg: PipelineConfig,
    llm: Option<Arc<LlmClient>>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Self {
        log::info!("resolved configuration:\n{}", cfg.to_text());
        Self { cfg, llm: None }
    }

    /// Uses `transport` for live requests instead of HTTP.
    pub fn with_transport(cfg: PipelineConfig, transport: Arc<dyn Transport>) -> Result<Self> {
        let client = LlmClient::with_transport(cfg.llm_config(), transport)?;
        let mut p = Self::new(cfg);
        p.llm = Some(Arc::new(client));
        Ok(p)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    fn llm(&mut self) -> Result<Arc<LlmClient>> {
        if self.llm.is_none() {
            self.llm = Some(Arc::new(LlmClient::new(self.cfg.llm_config())?));
        }
        Ok(Arc::clone(self.llm.as_ref().expect("just set")))
    }

    fn load_corpus(&self) -> Result<Corpus> {
        let corpus = load_corpus(self.cfg.corpus_path())?;
        corpus.ensure_linkable()?;
        Ok(corpus)
    }

    fn synthetic(&self, dim: usize) -> SyntheticProvider {
        SyntheticProvider::new(dim, self.cfg.seed)
    }

    fn load_store(&self, corpus: &Corpus) -> Result<EmbeddingStore<Real>> {
        let file = FileProvider::load(self.cfg.store_path(), self.cfg.dim)?;
        Ok(build_store(corpus, &self.synthetic(self.cfg.dim), Some(&file))?)
    }

    /// Embeds the corpus (from the configured embeddings file, or the
    /// seeded synthetic encoder) and writes the store.
    pub fn ingest(&self) -> Result<CorpusStats> {
        let corpus = self.load_corpus()?;
        let precomputed = match self.cfg.embeddings_path() {
            Some(p) => Some(FileProvider::load(&p, self.cfg.dim)?),
            None => None,
        };
        let store: EmbeddingStore<Real> = build_store(&corpus, &self.synthetic(self.cfg.dim), precomputed.as_ref())?;
        store.validate(&corpus)?;
        let mut out = create(&self.cfg.store_path())?;
        store.write_to(&mut out)?;
        out.flush()?;
        let stats = corpus.stats();
        log::info!(
            "ingested {} mentions and {} entities, image ratio {:.4}",
            stats.mentions,
            stats.entities,
            stats.image_ratio()
        );
        Ok(stats)
    }

    /// LLM-enhanced embeddings, gated and semantic edges, graph file.
    pub fn build_graph(&mut self) -> Result<GraphSummary> {
        let corpus = self.load_corpus()?;
        let mut store = self.load_store(&corpus)?;
        let llm = self.llm()?;
        let targets = select_enhancement_targets(&corpus, &store, self.cfg.k_llm, self.cfg.entity_budget);
        let jobs = if self.cfg.jobs == 0 { self.cfg.llm_max_in_flight } else { self.cfg.jobs };
        let provider = self.synthetic(store.dim());
        let report = enhance_nodes(&corpus, &targets, &llm, &provider, &mut store, jobs, OnLlmFailure::FallBack)?;
        if !report.failed.is_empty() {
            log::warn!(
                "{} description requests failed; those nodes use their text embeddings",
                report.failed.len()
            );
        }
        let graph = build_graph(&corpus, &store, &self.cfg.graph_config())?;
        graph.save(self.cfg.graph_path())?;
        Ok(GraphSummary {
            nodes: graph.node_count(),
            edges: graph.edge_count(),
            gated: graph.count_by_provenance(Provenance::Gated),
            llm: graph.count_by_provenance(Provenance::LlmEnhanced),
            both: graph.count_by_provenance(Provenance::Both),
            enhanced: report.enhanced,
            llm_failures: report.failed.len(),
        })
    }

    fn graph_inputs(&self) -> Result<(Corpus, EmbeddingStore<Real>, ContextGraph<Real>)> {
        let corpus = self.load_corpus()?;
        let store = self.load_store(&corpus)?;
        let graph = ContextGraph::load(self.cfg.graph_path(), &corpus)?;
        Ok((corpus, store, graph))
    }

    fn with_training_set<R>(&self, f: impl FnOnce(&TrainingSet<'_, Real>) -> Result<R>) -> Result<R> {
        let (_corpus, store, graph) = self.graph_inputs()?;
        let cache = self.cfg.work("cache");
        let subgraphs = cached_subgraphs(&cache, &graph, self.cfg.k_ppr, &self.cfg.ppr_config())
            .map_err(io_at(&cache))?;
        let data = TrainingSet::new(&graph, &store, &subgraphs);
        f(&data)
    }

    pub fn train_teacher(&self) -> Result<TrainReport> {
        let cfg = self.cfg.train_config();
        self.with_training_set(|data| {
            let (model, report) = train_teacher(data, &cfg)?;
            model.save(self.cfg.teacher_path())?;
            write_curve(&self.cfg.work("teacher_curve.tsv"), &report)?;
            Ok(report)
        })
    }

    pub fn train_student(&self) -> Result<TrainReport> {
        let cfg = self.cfg.train_config();
        let teacher = GnnModel::<Real>::load(self.cfg.teacher_path())?;
        self.with_training_set(|data| {
            let (model, report) = train_student(data, &teacher, &cfg)?;
            model.save(self.cfg.student_path())?;
            write_curve(&self.cfg.work("student_curve.tsv"), &report)?;
            Ok(report)
        })
    }

    /// Encodes every node with both models and writes the representations.
    pub fn synthesize(&self) -> Result<Representations<Real>> {
        let teacher = GnnModel::<Real>::load(self.cfg.teacher_path())?;
        let student = GnnModel::<Real>::load(self.cfg.student_path())?;
        let reps = self.with_training_set(|data| {
            Ok(Representations {
                teacher: data.encode_all(&teacher),
                student: data.encode_all(&student),
            })
        })?;
        save_representations(&self.cfg.reps_path(), &reps)?;
        Ok(reps)
    }

    /// Returns whether the identity fallback was used.
    pub fn induce_tree(&mut self) -> Result<bool> {
        let corpus = self.load_corpus()?;
        let llm = self.llm()?;
        let induced = induce_tree::<Real>(&llm, &corpus.stats(), self.cfg.max_depth, self.cfg.tree_retries)?;
        let path = self.cfg.tree_path();
        let mut out = create(&path)?;
        out.write_all(induced.tree.to_reply().as_bytes())?;
        out.flush()?;
        log::info!(
            "tree of depth {} written to {} after {} attempt(s)",
            induced.tree.depth(),
            path.display(),
            induced.attempts
        );
        Ok(induced.fell_back)
    }

    /// The configured tree; `identity`, or a missing default tree file,
    /// gives the identity tree.
    pub fn load_tree(&self) -> Result<DecisionTree<Real>> {
        let path = self.cfg.tree_path();
        if path.as_os_str() == "identity" {
            return Ok(DecisionTree::identity());
        }
        if self.cfg.tree.is_none() && !path.exists() {
            log::warn!("no tree at {}; ranking by prior", path.display());
            return Ok(DecisionTree::identity());
        }
        let text = fs::read_to_string(&path).map_err(io_at(&path))?;
        Ok(parse_tree(&text, self.cfg.max_depth)?)
    }

    pub fn link(&self) -> Result<LinkSummary> {
        let tree = self.load_tree()?;
        self.link_with_tree(&tree)
    }

    /// Retrieval, prior, evidence and re-ranking for every mention.
    pub fn link_with_tree(&self, tree: &DecisionTree<Real>) -> Result<LinkSummary> {
        let corpus = self.load_corpus()?;
        let store = self.load_store(&corpus)?;
        let reps = load_representations(&self.cfg.reps_path())?;
        let truth = match self.cfg.truth_path() {
            Some(p) => load_truth(p)?,
            None => BTreeMap::new(),
        };
        let stats = LinkStats::default();
        let index = RetrievalIndex::new(corpus.entities(), &store, &reps).with_stats(&stats);
        let k_ch = self.cfg.k_ch.max(1);

        type PerMention = (LinkResult, crate::retrieval::CandidateSet<Real>, Vec<RankedCandidate<Real>>, BTreeMap<String, EvidenceVector<Real>>);
        let per_mention: Vec<PerMention> = corpus
            .mentions()
            .par_iter()
            .map(|m| -> Result<PerMention> {
                let cands = prior_score(select_candidates(m, k_ch, &index));
                let mut evidence = BTreeMap::new();
                for id in &cands.candidates {
                    let e = corpus.get(id).expect("candidate comes from the corpus");
                    evidence.insert(id.clone(), assemble(m, e, &store, &reps)?);
                }
                let ranked = rerank(&cands, &evidence, tree, Some(&stats))?;
                let result = LinkResult {
                    mention: m.id.clone(),
                    ranked: ranked.iter().map(|r| r.entity.clone()).collect(),
                    truth: truth.get(&m.id).cloned(),
                };
                Ok((result, cands, ranked, evidence))
            })
            .collect::<Result<_>>()?;

        let results_path = self.cfg.results_path();
        let mut results_out = create(&results_path)?;
        let mut cand_out = create(&self.cfg.work("candidates.tsv"))?;
        let mut trace_out = create(&self.cfg.work("traces.tsv"))?;
        let mut ev_out = create(&self.cfg.work("evidence.jsonl"))?;
        let mut results = Vec::with_capacity(per_mention.len());
        let mut max_pool = 0;
        let mut total = 0;
        for (result, cands, ranked, evidence) in per_mention {
            max_pool = max_pool.max(cands.len());
            total += cands.len();
            write_candidate_dump(&mut cand_out, &cands)?;
            for r in &ranked {
                write_trace_line(&mut trace_out, &cands.mention, r)?;
            }
            for (id, f) in &evidence {
                write_evidence_line(&mut ev_out, &cands.mention, id, f)?;
            }
            results.push(result);
        }
        write_results(&mut results_out, &results)?;
        for w in [&mut results_out, &mut cand_out, &mut trace_out, &mut ev_out] {
            w.flush()?;
        }
        drop(results_out);

        let mut hit_at = BTreeMap::new();
        if !results.is_empty() && results.iter().all(|r| r.truth.is_some()) {
            for &k in &self.cfg.eval_k {
                hit_at.insert(k, hit_at_k(&results, k)?);
            }
        }
        let [channel_queries, similarity_evals, tree_evals, llm_calls] = stats.snapshot();
        Ok(LinkSummary {
            mentions: results.len(),
            max_pool,
            channel_queries,
            similarity_evals,
            tree_evals,
            llm_calls,
            total_candidates: total,
            results_hash: file_hash(&results_path)?,
            hit_at,
        })
    }

    /// Metrics table for the results file.
    pub fn eval(&self) -> Result<String> {
        let mut results = load_results(self.cfg.results_path())?;
        if let Some(p) = self.cfg.truth_path() {
            let truth = load_truth(p)?;
            for r in &mut results {
                if r.truth.is_none() {
                    r.truth = truth.get(&r.mention).cloned();
                }
            }
        }
        Ok(metrics_table(&results, &self.cfg.eval_k)?)
    }

    /// Every offline stage, tree induction, and linking.
    pub fn run_all(&mut self) -> Result<RunSummary> {
        self.ingest()?;
        let graph = self.build_graph()?;
        let teacher = self.train_teacher()?;
        let student = self.train_student()?;
        self.synthesize()?;
        let tree_fell_back = self.induce_tree()?;
        let link = self.link()?;
        Ok(RunSummary {
            graph,
            teacher_curve: teacher.structural_loss,
            student_alignment: student.alignment,
            tree_fell_back,
            link,
        })
    }
}

/// Writes a planted corpus, its embeddings, the truth map and a mock LLM
/// fixture whose tree reply is [`consistency_tree`] into the working
/// directory.
pub fn gen_planted(cfg: &PipelineConfig) -> Result<CorpusStats> {
    let (planted, store) = generate_planted::<Real>(&cfg.planted_config())?;
    fs::create_dir_all(&cfg.work_dir).map_err(io_at(&cfg.work_dir))?;
    let corpus_path = cfg.corpus_path();
    let mut out = create(&corpus_path)?;
    planted.corpus.write_to(&mut out)?;
    out.flush()?;
    let emb_path = cfg.embeddings.clone().unwrap_or_else(|| cfg.work("embeddings.jsonl"));
    let mut out = create(&emb_path)?;
    store.write_to(&mut out)?;
    out.flush()?;
    let truth_path = cfg.truth.clone().unwrap_or_else(|| cfg.work("truth.tsv"));
    planted.save_truth(&truth_path).map_err(io_at(&truth_path))?;
    let fixture = cfg.llm_fixture.clone().unwrap_or_else(|| cfg.work("llm_fixture.jsonl"));
    let mut out = create(&fixture)?;
    writeln!(out, "{}", fixture_line("default:induce_tree", &consistency_tree::<Real>().to_reply()))?;
    out.flush()?;
    Ok(planted.corpus.stats())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremSummary {
    pub matrices: usize,
    pub fused_not_worse: usize,
    pub mc_agrees: usize,
    pub theorem2_samples: usize,
    pub theorem2_violations: usize,
}

impl TheoremSummary {
    pub fn passed(&self) -> bool {
        self.fused_not_worse == self.matrices && self.mc_agrees == self.matrices && self.theorem2_violations == 0
    }
}

/// Variance-fusion check on random SPD matrices of size 1..=5 and the
/// distillation bound on random triples.
pub fn check_theorems(cfg: &PipelineConfig) -> Result<TheoremSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sigmas: Vec<Vec<Vec<f64>>> = (0..cfg.theorem_matrices)
        .map(|i| random_spd(1 + i % 5, &mut rng))
        .collect();
    let reports = sigmas
        .par_iter()
        .enumerate()
        .map(|(i, s)| check_theorem1(s, cfg.theorem_trials, cfg.seed.wrapping_add(i as u64 + 1)))
        .collect::<Result<Vec<_>, _>>()?;
    let t2 = check_theorem2(cfg.theorem_samples, 8, cfg.seed)?;
    Ok(TheoremSummary {
        matrices: reports.len(),
        fused_not_worse: reports.iter().filter(|r| r.fused_not_worse).count(),
        mc_agrees: reports.iter().filter(|r| r.mc_agrees).count(),
        theorem2_samples: t2.samples,
        theorem2_violations: t2.violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trips() {
        let mut c = PipelineConfig::default();
        c.set("k_ch", "17").unwrap();
        c.set("eval_k", "1, 3").unwrap();
        c.set("tree", "identity").unwrap();
        c.set("llm_mode", "live").unwrap();
        c.set("llm_endpoint", "http://x").unwrap();
        let mut back = PipelineConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("k_ch", "x").is_err());
    }

    #[test]
    fn every_listed_key_is_settable_from_its_own_output() {
        let c = PipelineConfig::default();
        for line in c.to_text().lines() {
            let (k, v) = line.split_once(" = ").unwrap();
            assert!(PipelineConfig::KEYS.contains(&k), "{k}");
            let mut d = PipelineConfig::default();
            d.set(k, v).unwrap();
        }
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let mut c = PipelineConfig::default();
        c.apply_text("# header\n\nk_ppr = 7   # smaller\n").unwrap();
        assert_eq!(c.k_ppr, 7);
        assert!(c.apply_text("garbage").is_err());
    }
}
