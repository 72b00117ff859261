//! `mmel` command-line driver. Each subcommand runs one pipeline stage
//! against a working directory; `run` chains every stage.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mmel_core::pipeline::{check_theorems, configure_threads, gen_planted, Pipeline, PipelineConfig};

#[derive(Parser, Debug)]
#[command(name = "mmel", version, about = "Unsupervised multimodal entity linking")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalOpts {
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    /// Override any config key, e.g. `--set k_ch=100`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load the corpus and embed every node.
    Ingest {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Precomputed embeddings (JSONL); otherwise synthetic vectors.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Enhance nodes with LLM descriptions and build the graph.
    BuildGraph {
        #[arg(long)]
        delta_gate: Option<f64>,
        #[arg(long)]
        k_llm: Option<usize>,
        #[command(flatten)]
        llm: LlmOpts,
    },
    /// Train the text-view teacher.
    TrainTeacher {
        #[command(flatten)]
        train: TrainOpts,
    },
    /// Train the image-view student against the frozen teacher.
    TrainStudent {
        #[command(flatten)]
        train: TrainOpts,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Encode every node with the teacher and student.
    Synthesize,
    /// Ask the LLM for a re-ranking tree.
    InduceTree {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_depth: Option<usize>,
        #[command(flatten)]
        llm: LlmOpts,
    },
    /// Retrieve, score and re-rank candidates for every mention.
    Link {
        /// Tree file, or `identity`.
        #[arg(long)]
        tree: Option<PathBuf>,
        #[arg(long)]
        k_ch: Option<usize>,
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Print Hit@k for a results file.
    Eval {
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Comma-separated cutoffs.
        #[arg(long)]
        k: Option<String>,
    },
    /// Write a synthetic corpus with known answers.
    GenPlanted {
        #[arg(long)]
        mentions: Option<usize>,
        #[arg(long)]
        entities: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long)]
        dropout: Option<f64>,
    },
    /// Numerical checks of the fusion-risk and distillation bounds.
    CheckTheorems {
        #[arg(long)]
        matrices: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Every stage from ingest through link, then eval if truth is known.
    Run {
        #[command(flatten)]
        llm: LlmOpts,
    },
}

#[derive(Args, Debug, Default)]
struct LlmOpts {
    /// `mock` or `live`.
    #[arg(long)]
    llm_mode: Option<String>,
    #[arg(long)]
    llm_fixture: Option<PathBuf>,
    #[arg(long)]
    llm_endpoint: Option<String>,
}

#[derive(Args, Debug, Default)]
struct TrainOpts {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    k_ppr: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

/// Collects `(key, value)` overrides from optional flags.
struct Overrides(Vec<(&'static str, String)>);

impl Overrides {
    fn add<V: ToString>(&mut self, key: &'static str, v: &Option<V>) {
        if let Some(v) = v {
            self.0.push((key, v.to_string()));
        }
    }

    fn path(&mut self, key: &'static str, v: &Option<PathBuf>) {
        if let Some(v) = v {
            self.0.push((key, v.display().to_string()));
        }
    }

    fn llm(&mut self, o: &LlmOpts) {
        self.add("llm_mode", &o.llm_mode);
        self.path("llm_fixture", &o.llm_fixture);
        self.add("llm_endpoint", &o.llm_endpoint);
    }

    fn train(&mut self, o: &TrainOpts) {
        self.add("epochs", &o.epochs);
        self.add("lr", &o.lr);
        self.add("eta", &o.eta);
        self.add("k_ppr", &o.k_ppr);
        self.add("batch_size", &o.batch_size);
    }
}

fn command_overrides(cmd: &Command) -> Overrides {
    let mut o = Overrides(Vec::new());
    match cmd {
        Command::Ingest { corpus, embeddings, dim } => {
            o.path("corpus", corpus);
            o.path("embeddings", embeddings);
            o.add("dim", dim);
        }
        Command::BuildGraph { delta_gate, k_llm, llm } => {
            o.add("delta_gate", delta_gate);
            o.add("k_llm", k_llm);
            o.llm(llm);
        }
        Command::TrainTeacher { train } => o.train(train),
        Command::TrainStudent { train, lambda, tau } => {
            o.train(train);
            o.add("lambda_distill", lambda);
            o.add("tau", tau);
        }
        Command::Synthesize => {}
        Command::InduceTree { out, max_depth, llm } => {
            o.path("tree", out);
            o.add("max_depth", max_depth);
            o.llm(llm);
        }
        Command::Link { tree, k_ch, results } => {
            o.path("tree", tree);
            o.add("k_ch", k_ch);
            o.path("results", results);
        }
        Command::Eval { results, truth, k } => {
            o.path("results", results);
            o.path("truth", truth);
            o.add("eval_k", k);
        }
        Command::GenPlanted {
            mentions,
            entities,
            dim,
            margin,
            dropout,
        } => {
            o.add("planted_mentions", mentions);
            o.add("planted_entities", entities);
            o.add("dim", dim);
            o.add("planted_margin", margin);
            o.add("planted_dropout", dropout);
        }
        Command::CheckTheorems {
            matrices,
            trials,
            samples,
        } => {
            o.add("theorem_matrices", matrices);
            o.add("theorem_trials", trials);
            o.add("theorem_samples", samples);
        }
        Command::Run { llm } => o.llm(llm),
    }
    o
}

fn needs_seed(cmd: &Command) -> bool {
    matches!(
        cmd,
        Command::TrainTeacher { .. } | Command::TrainStudent { .. } | Command::Link { .. } | Command::Run { .. }
    )
}

/// Resolved config and whether the seed was given explicitly.
fn resolve(cli: &Cli) -> Result<(PipelineConfig, bool)> {
    let mut cfg = PipelineConfig::default();
    let mut seed_given = false;
    if let Some(path) = &cli.global.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
        seed_given = text
            .lines()
            .any(|l| l.split('#').next().unwrap_or("").split('=').next().map(str::trim) == Some("seed"));
    }
    for kv in &cli.global.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k, v)?;
        seed_given |= k.trim() == "seed";
    }
    for (k, v) in command_overrides(&cli.command).0 {
        cfg.set(k, &v)?;
    }
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
        seed_given = true;
    }
    if let Some(jobs) = cli.global.jobs {
        cfg.jobs = jobs;
    }
    if let Some(dir) = &cli.global.work_dir {
        cfg.work_dir = dir.clone();
    }
    Ok((cfg, seed_given))
}

fn run(cli: Cli) -> Result<()> {
    let (cfg, seed_given) = resolve(&cli)?;
    if needs_seed(&cli.command) && !seed_given {
        bail!("this command needs --seed (or a seed entry in the config file) for reproducibility");
    }
    configure_threads(cfg.jobs);
    match &cli.command {
        Command::GenPlanted { .. } => {
            let stats = gen_planted(&cfg)?;
            println!(
                "planted corpus: {} mentions, {} entities, image ratio {:.4} -> {}",
                stats.mentions,
                stats.entities,
                stats.image_ratio(),
                cfg.work_dir.display()
            );
        }
        Command::CheckTheorems { .. } => {
            let s = check_theorems(&cfg)?;
            println!(
                "fusion risk <= best single channel: {}/{}\nMonte-Carlo within 3 SE: {}/{}\ndistillation bound violations: {}/{}",
                s.fused_not_worse, s.matrices, s.mc_agrees, s.matrices, s.theorem2_violations, s.theorem2_samples
            );
            if !s.passed() {
                bail!("theorem checks failed");
            }
        }
        Command::Ingest { .. } => {
            let s = Pipeline::new(cfg).ingest()?;
            println!("ingested {} mentions, {} entities", s.mentions, s.entities);
        }
        Command::BuildGraph { .. } => {
            let s = Pipeline::new(cfg).build_graph()?;
            println!(
                "graph: {} nodes, {} edges ({} gated, {} llm, {} both); {} nodes enhanced, {} llm failures",
                s.nodes, s.edges, s.gated, s.llm, s.both, s.enhanced, s.llm_failures
            );
        }
        Command::TrainTeacher { .. } => {
            let r = Pipeline::new(cfg).train_teacher()?;
            print_curve("teacher", &r.epoch_loss);
        }
        Command::TrainStudent { .. } => {
            let r = Pipeline::new(cfg).train_student()?;
            print_curve("student", &r.epoch_loss);
        }
        Command::Synthesize => {
            let reps = Pipeline::new(cfg).synthesize()?;
            println!("encoded {} nodes", reps.teacher.len());
        }
        Command::InduceTree { .. } => {
            let path = cfg.tree_path();
            let fell_back = Pipeline::new(cfg).induce_tree()?;
            println!(
                "tree written to {}{}",
                path.display(),
                if fell_back { " (identity fallback)" } else { "" }
            );
        }
        Command::Link { .. } => {
            let s = Pipeline::new(cfg).link()?;
            println!(
                "linked {} mentions; largest candidate pool {}; results sha256 {}",
                s.mentions, s.max_pool, s.results_hash
            );
            for (k, v) in &s.hit_at {
                println!("Hit@{k} = {v:.4}");
            }
        }
        Command::Eval { .. } => {
            print!("{}", Pipeline::new(cfg).eval()?);
        }
        Command::Run { .. } => {
            let mut p = Pipeline::new(cfg);
            let s = p.run_all()?;
            println!(
                "graph {} edges; tree {}; {} mentions linked; results sha256 {}",
                s.graph.edges,
                if s.tree_fell_back { "identity fallback" } else { "induced" },
                s.link.mentions,
                s.link.results_hash
            );
            for (k, v) in &s.link.hit_at {
                println!("Hit@{k} = {v:.4}");
            }
        }
    }
    Ok(())
}

fn print_curve(name: &str, losses: &[f64]) {
    for (e, l) in losses.iter().enumerate() {
        println!("{name} epoch {e}: loss {l:.6}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
