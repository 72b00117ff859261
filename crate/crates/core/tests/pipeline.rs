use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mmel_core::eval::{generate_planted, PlantedConfig};
use mmel_core::evidence::Representations;
use mmel_core::pipeline::{file_hash, gen_planted, Pipeline, PipelineConfig};
use mmel_core::retrieval::{select_candidates, RetrievalIndex};
use mmel_core::ContextGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(dir: &Path, seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        work_dir: dir.to_path_buf(),
        seed,
        ..PipelineConfig::default()
    };
    cfg.planted_mentions = 12;
    cfg.planted_entities = 80;
    cfg.dim = 16;
    cfg
}

fn count_by_first_field(path: &Path) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for line in fs::read_to_string(path).unwrap().lines() {
        let first = line.split('\t').next().unwrap().to_string();
        *out.entry(first).or_default() += 1;
    }
    out
}

#[test]
fn stages_run_separately_and_leave_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 3);
    gen_planted(&cfg).unwrap();
    let mut p = Pipeline::new(cfg.clone());
    p.ingest().unwrap();
    let g = p.build_graph().unwrap();
    assert_eq!(g.nodes, 92);
    assert_eq!(g.gated + g.llm + g.both, g.edges);
    let corpus = mmel_core::corpus::load_corpus(cfg.corpus_path()).unwrap();
    let graph = ContextGraph::load(cfg.graph_path(), &corpus).unwrap();
    assert_eq!(graph.edge_count(), g.edges);

    let teacher = p.train_teacher().unwrap();
    assert_eq!(teacher.epoch_loss.len(), cfg.epochs);
    let first = teacher.structural_loss[0];
    let last = *teacher.structural_loss.last().unwrap();
    assert!(last < first, "teacher loss {first} -> {last}");

    let student = p.train_student().unwrap();
    assert!(student.alignment.last().unwrap() > &student.alignment[0]);
    let reps = p.synthesize().unwrap();
    assert_eq!(reps.teacher.len(), 92);
    assert!(!p.induce_tree().unwrap());
    let link = p.link().unwrap();
    assert_eq!(link.mentions, 12);
    assert!(link.max_pool <= 9 * cfg.k_ch);

    // one trace line per ranked candidate
    let traces = count_by_first_field(&dir.path().join("traces.tsv"));
    let results = fs::read_to_string(cfg.results_path()).unwrap();
    for line in results.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let m = v["mention"].as_str().unwrap();
        assert_eq!(traces[m], v["ranked"].as_array().unwrap().len());
    }
    assert_eq!(traces.values().sum::<usize>(), link.total_candidates);
    let table = p.eval().unwrap();
    assert!(table.contains("| 1 | ") && table.contains("12 mentions"), "{table}");
}

#[test]
fn same_seed_gives_identical_results() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = |dir: &Path| {
        let cfg = small(dir, 8);
        gen_planted(&cfg).unwrap();
        Pipeline::new(cfg.clone()).run_all().unwrap();
        (
            file_hash(&cfg.results_path()).unwrap(),
            file_hash(&cfg.teacher_path()).unwrap(),
            file_hash(&cfg.student_path()).unwrap(),
        )
    };
    assert_eq!(run(a.path()), run(b.path()));
}

#[test]
fn larger_k_ch_never_shrinks_the_pool() {
    let (planted, store) = generate_planted::<f64>(&PlantedConfig {
        n_mentions: 10,
        n_entities: 120,
        dim: 16,
        seed: 2,
        ..PlantedConfig::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut reps = Representations::default();
    for n in planted.corpus.nodes() {
        let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        reps.teacher.insert(n.id.clone(), v.clone());
        reps.student.insert(n.id.clone(), v.iter().map(|x| x * 0.5 + 0.1).collect());
    }
    let index = RetrievalIndex::new(planted.corpus.entities(), &store, &reps);
    for m in planted.corpus.mentions() {
        let mut prev = select_candidates(m, 1, &index).candidates;
        for k in [2, 5, 17, 60, 200] {
            let next = select_candidates(m, k, &index).candidates;
            assert!(prev.is_subset(&next), "{}: pool shrank at k = {k}", m.id);
            prev = next;
        }
    }
}

#[test]
fn mentions_without_truth_still_link() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 1);
    gen_planted(&cfg).unwrap();
    fs::remove_file(dir.path().join("truth.tsv")).unwrap();
    let s = Pipeline::new(cfg).run_all().unwrap();
    assert_eq!(s.link.mentions, 12);
    assert!(s.link.hit_at.is_empty());
}
