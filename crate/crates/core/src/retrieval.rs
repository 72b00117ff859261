//! Nine-channel candidate retrieval and prior scoring.
//!
//! Eight neural channels cross {instance, group} embeddings with the four
//! text/image view pairs; the ninth is lexical. Each channel returns its
//! exact top-`k_ch` entities and the candidate pool is their union.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use crate::corpus::MultimodalNode;
use crate::embed::EmbeddingStore;
use crate::evidence::Representations;
use crate::lexical::lex_similarity;
use crate::linalg::cosine;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    Inst,
    Group,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViewPair {
    TT,
    TV,
    VT,
    VV,
}

impl ViewPair {
    /// The mention side queries with its image.
    pub fn mention_image(self) -> bool {
        matches!(self, Self::VT | Self::VV)
    }

    /// The entity side is compared through its image.
    pub fn entity_image(self) -> bool {
        matches!(self, Self::TV | Self::VV)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Channel {
    Neural(Level, ViewPair),
    Lexical,
}

impl Channel {
    pub const ALL: [Channel; 9] = [
        Channel::Neural(Level::Inst, ViewPair::TT),
        Channel::Neural(Level::Inst, ViewPair::TV),
        Channel::Neural(Level::Inst, ViewPair::VT),
        Channel::Neural(Level::Inst, ViewPair::VV),
        Channel::Neural(Level::Group, ViewPair::TT),
        Channel::Neural(Level::Group, ViewPair::TV),
        Channel::Neural(Level::Group, ViewPair::VT),
        Channel::Neural(Level::Group, ViewPair::VV),
        Channel::Lexical,
    ];

    /// Whether `mention` can issue a query on this channel.
    pub fn available_for(self, mention: &MultimodalNode) -> bool {
        match self {
            Channel::Neural(_, v) => !v.mention_image() || mention.has_image(),
            Channel::Lexical => true,
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Channel::Neural(l, v) => {
                let l = match l {
                    Level::Inst => "inst",
                    Level::Group => "group",
                };
                write!(f, "{l}_{}", format!("{v:?}").to_lowercase())
            }
            Channel::Lexical => f.write_str("lex"),
        }
    }
}

impl FromStr for Channel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Channel::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| format!("unknown channel {s:?}"))
    }
}

/// Work counters for the online stage.
#[derive(Debug, Default)]
pub struct LinkStats {
    pub channel_queries: AtomicUsize,
    pub similarity_evals: AtomicUsize,
    pub tree_evals: AtomicUsize,
    pub llm_calls: AtomicUsize,
}

impl LinkStats {
    pub fn snapshot(&self) -> [usize; 4] {
        [
            self.channel_queries.load(AtomicOrdering::Relaxed),
            self.similarity_evals.load(AtomicOrdering::Relaxed),
            self.tree_evals.load(AtomicOrdering::Relaxed),
            self.llm_calls.load(AtomicOrdering::Relaxed),
        ]
    }
}

/// Everything a channel scan reads.
pub struct RetrievalIndex<'a, T> {
    pub entities: &'a [MultimodalNode],
    pub store: &'a EmbeddingStore<T>,
    pub reps: &'a Representations<T>,
    pub stats: Option<&'a LinkStats>,
}

impl<'a, T: Scalar> RetrievalIndex<'a, T> {
    pub fn new(entities: &'a [MultimodalNode], store: &'a EmbeddingStore<T>, reps: &'a Representations<T>) -> Self {
        Self {
            entities,
            store,
            reps,
            stats: None,
        }
    }

    pub fn with_stats(mut self, stats: &'a LinkStats) -> Self {
        self.stats = Some(stats);
        self
    }

    fn vector(&self, level: Level, image: bool, id: &str) -> Option<&'a [T]> {
        match (level, image) {
            (Level::Inst, false) => self.store.text(id),
            (Level::Inst, true) => self.store.image(id),
            (Level::Group, false) => self.reps.teacher.get(id).map(Vec::as_slice),
            (Level::Group, true) => self.reps.student.get(id).map(Vec::as_slice),
        }
    }

    /// Channel score of one pair, or `None` when the pair is not comparable
    /// on this channel (a required raw image is absent).
    pub fn score(&self, channel: Channel, mention: &MultimodalNode, entity: &MultimodalNode) -> Option<T> {
        if let Some(s) = self.stats {
            s.similarity_evals.fetch_add(1, AtomicOrdering::Relaxed);
        }
        match channel {
            Channel::Lexical => Some(lex_similarity::<T>(&mention.name, &entity.name).value()),
            Channel::Neural(level, view) => {
                let q = self.vector(level, view.mention_image(), &mention.id)?;
                let v = self.vector(level, view.entity_image(), &entity.id)?;
                Some(cosine(q, v))
            }
        }
    }
}

fn by_score_then_id<T: Scalar>(a: &(String, T), b: &(String, T)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0))
}

/// Exact top-`k_ch` entities on one channel, ties by ascending id. Empty
/// when the mention cannot query the channel.
pub fn channel_topk<T: Scalar>(
    mention: &MultimodalNode,
    channel: Channel,
    k_ch: usize,
    index: &RetrievalIndex<'_, T>,
) -> Vec<(String, T)> {
    assert!(k_ch >= 1, "k_ch must be at least 1");
    if !channel.available_for(mention) {
        return Vec::new();
    }
    if let Some(s) = index.stats {
        s.channel_queries.fetch_add(1, AtomicOrdering::Relaxed);
    }
    let mut scored: Vec<(String, T)> = index
        .entities
        .iter()
        .filter_map(|e| index.score(channel, mention, e).map(|s| (e.id.clone(), s)))
        .collect();
    if scored.len() > k_ch {
        scored.select_nth_unstable_by(k_ch - 1, by_score_then_id);
        scored.truncate(k_ch);
    }
    scored.sort_by(by_score_then_id);
    scored
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet<T> {
    pub mention: String,
    pub candidates: BTreeSet<String>,
    pub per_channel_scores: BTreeMap<(Channel, String), T>,
    pub prior: BTreeMap<String, T>,
}

impl<T> CandidateSet<T> {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Union of the nine channels' top-`k_ch` lists; the prior is left empty.
pub fn select_candidates<T: Scalar>(
    mention: &MultimodalNode,
    k_ch: usize,
    index: &RetrievalIndex<'_, T>,
) -> CandidateSet<T> {
    let mut out = CandidateSet {
        mention: mention.id.clone(),
        candidates: BTreeSet::new(),
        per_channel_scores: BTreeMap::new(),
        prior: BTreeMap::new(),
    };
    for ch in Channel::ALL {
        for (id, s) in channel_topk(mention, ch, k_ch, index) {
            out.candidates.insert(id.clone());
            out.per_channel_scores.insert((ch, id), s);
        }
    }
    out
}

/// Min–max normalize each channel over its retrieved entities (a constant
/// channel maps to 0.5) and average per entity over the channels that
/// retrieved it.
pub fn prior_score<T: Scalar>(mut cands: CandidateSet<T>) -> CandidateSet<T> {
    let mut ranges: BTreeMap<Channel, (T, T)> = BTreeMap::new();
    for (&(ch, _), &s) in &cands.per_channel_scores {
        let r = ranges.entry(ch).or_insert((s, s));
        r.0 = r.0.min(s);
        r.1 = r.1.max(s);
    }
    let mut acc: BTreeMap<&str, (T, usize)> = BTreeMap::new();
    for ((ch, id), &s) in &cands.per_channel_scores {
        let (lo, hi) = ranges[ch];
        let norm = if hi > lo { (s - lo) / (hi - lo) } else { T::lit(0.5) };
        let a = acc.entry(id.as_str()).or_insert((T::zero(), 0));
        a.0 = a.0 + norm;
        a.1 += 1;
    }
    let prior = acc
        .into_iter()
        .map(|(id, (sum, n))| (id.to_string(), sum / T::from_usize_lossy(n)))
        .collect();
    cands.prior = prior;
    cands
}

/// Audit lines `mention entity channel raw prior`, one per retrieved
/// (channel, entity) pair.
pub fn write_candidate_dump<T: Scalar, W: Write>(mut out: W, cands: &CandidateSet<T>) -> std::io::Result<()> {
    for ((ch, id), s) in &cands.per_channel_scores {
        let prior = cands.prior.get(id).map_or(f64::NAN, |p| p.as_f64());
        writeln!(out, "{}\t{}\t{}\t{:?}\t{:?}", cands.mention, id, ch, s.as_f64(), prior)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::NodeKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nine_distinct_channels_with_round_trip_names() {
        let names: BTreeSet<String> = Channel::ALL.iter().map(Channel::to_string).collect();
        assert_eq!(names.len(), 9);
        for c in Channel::ALL {
            assert_eq!(c.to_string().parse::<Channel>().unwrap(), c);
        }
    }

    fn fixture(n: usize, seed: u64) -> (MultimodalNode, Vec<MultimodalNode>, EmbeddingStore<f64>, Representations<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = EmbeddingStore::new(4);
        let mut reps = Representations::default();
        let vec4 = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..4).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let m = MultimodalNode::new("m", NodeKind::Mention, "alpha").with_image("m.jpg");
        let mut ents = Vec::new();
        for i in 0..n {
            let id = format!("e{i:02}");
            let mut e = MultimodalNode::new(&id, NodeKind::Entity, format!("al{i}"));
            if i % 3 != 0 {
                e = e.with_image(format!("{id}.jpg"));
                store.insert_image(&id, &vec4(&mut rng)).unwrap();
            }
            store.insert_text(&id, &vec4(&mut rng)).unwrap();
            reps.teacher.insert(id.clone(), vec4(&mut rng));
            reps.student.insert(id.clone(), vec4(&mut rng));
            ents.push(e);
        }
        store.insert_text("m", &vec4(&mut rng)).unwrap();
        store.insert_image("m", &vec4(&mut rng)).unwrap();
        reps.teacher.insert("m".into(), vec4(&mut rng));
        reps.student.insert("m".into(), vec4(&mut rng));
        (m, ents, store, reps)
    }

    #[test]
    fn topk_matches_brute_force_sort() {
        let (m, ents, store, reps) = fixture(10, 5);
        let idx = RetrievalIndex::new(&ents, &store, &reps);
        for ch in Channel::ALL {
            let mut all: Vec<(String, f64)> = ents
                .iter()
                .filter_map(|e| idx.score(ch, &m, e).map(|s| (e.id.clone(), s)))
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for k in [1, 3, 10, 50] {
                let got = channel_topk(&m, ch, k, &idx);
                assert_eq!(got, all[..k.min(all.len())].to_vec(), "{ch} k={k}");
            }
        }
    }

    #[test]
    fn mention_without_image_skips_vt_vv() {
        let (m, ents, store, reps) = fixture(6, 1);
        let m = MultimodalNode::new(m.id, NodeKind::Mention, m.name);
        let idx = RetrievalIndex::new(&ents, &store, &reps);
        let c = select_candidates(&m, 2, &idx);
        assert!(c.per_channel_scores.keys().all(|(ch, _)| ch.available_for(&m)));
        assert!(c.len() <= 5 * 2);
    }

    #[test]
    fn pool_grows_with_k() {
        let (m, ents, store, reps) = fixture(12, 2);
        let idx = RetrievalIndex::new(&ents, &store, &reps);
        let mut prev = BTreeSet::new();
        for k in 1..=12 {
            let c = select_candidates(&m, k, &idx);
            assert!(c.len() <= 9 * k);
            assert!(prev.is_subset(&c.candidates));
            prev = c.candidates;
        }
    }

    #[test]
    fn prior_rules() {
        let mut c = CandidateSet {
            mention: "m".into(),
            candidates: ["a".to_string()].into(),
            per_channel_scores: BTreeMap::new(),
            prior: BTreeMap::new(),
        };
        c.per_channel_scores.insert((Channel::Lexical, "a".into()), 0.3);
        assert_eq!(prior_score(c).prior["a"], 0.5);

        // lex: a=0.9 b=0.5 c=0.1; inst_tt: a=0.2 b=0.6
        let tt = Channel::ALL[0];
        let mut c = CandidateSet {
            mention: "m".into(),
            candidates: ["a", "b", "c"].map(String::from).into(),
            per_channel_scores: BTreeMap::new(),
            prior: BTreeMap::new(),
        };
        for (ch, id, s) in [
            (Channel::Lexical, "a", 0.9),
            (Channel::Lexical, "b", 0.5),
            (Channel::Lexical, "c", 0.1),
            (tt, "a", 0.2),
            (tt, "b", 0.6),
        ] {
            c.per_channel_scores.insert((ch, id.into()), s);
        }
        let p: BTreeMap<String, f64> = prior_score(c).prior;
        assert!((p["a"] - (1.0 + 0.0) / 2.0).abs() < 1e-12);
        assert!((p["b"] - (0.5 + 1.0) / 2.0).abs() < 1e-12);
        assert!((p["c"] - 0.0).abs() < 1e-12);

        let empty = CandidateSet::<f64> {
            mention: "m".into(),
            candidates: BTreeSet::new(),
            per_channel_scores: BTreeMap::new(),
            prior: BTreeMap::new(),
        };
        assert!(prior_score(empty).prior.is_empty());
    }
}
