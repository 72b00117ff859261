use std::collections::BTreeMap;

use mmel_core::eval::{hit_at_k, LinkResult};
use mmel_core::evidence::{EvidenceVector, EVIDENCE_DIM};
use mmel_core::gnn::View;
use mmel_core::GnnModel as Model;
use mmel_core::lexical::{lex_similarity, matched_length};
use mmel_core::reasoning::{evaluate, parse_tree, Comparator, DecisionTree, TreeNode};
use mmel_core::retrieval::{prior_score, Channel, Level, ViewPair};
use mmel_core::CandidateSet;
use proptest::prelude::*;

fn name() -> impl Strategy<Value = String> {
    "[a-dA-D é]{0,24}"
}

proptest! {
    #[test]
    fn lex_is_symmetric_and_bounded(a in name(), b in name()) {
        let ab = lex_similarity::<f64>(&a, &b).value();
        let ba = lex_similarity::<f64>(&b, &a).value();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        let m = matched_length(&a, &b);
        prop_assert!(m <= a.chars().count().min(b.chars().count()));
    }

    #[test]
    fn lex_of_a_string_with_itself_is_one(a in "[a-z]{1,20}") {
        prop_assert_eq!(lex_similarity::<f64>(&a, &a.to_uppercase()).value(), 1.0);
    }

    #[test]
    fn hit_at_k_is_monotone_in_k(
        ranks in prop::collection::vec(prop::option::of(0usize..12), 1..30),
    ) {
        let results: Vec<LinkResult> = ranks
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let ranked: Vec<String> = (0..12).map(|j| format!("e{j}")).collect();
                let truth = match r {
                    Some(j) => format!("e{j}"),
                    None => "missing".to_string(),
                };
                LinkResult { mention: format!("m{i}"), ranked, truth: Some(truth) }
            })
            .collect();
        let mut prev = 0.0;
        for k in 1..=13 {
            let h = hit_at_k(&results, k).unwrap();
            prop_assert!(h >= prev);
            prop_assert!((0.0..=1.0).contains(&h));
            let brute = ranks.iter().filter(|r| matches!(r, Some(j) if *j < k)).count() as f64
                / ranks.len() as f64;
            prop_assert_eq!(h, brute);
            prev = h;
        }
    }

    #[test]
    fn prior_lies_in_unit_interval(
        scores in prop::collection::vec((0usize..9, 0usize..6, -1.0f64..1.0), 1..40),
    ) {
        let mut per_channel_scores = BTreeMap::new();
        for (c, e, s) in scores {
            per_channel_scores.insert((Channel::ALL[c], format!("e{e}")), s);
        }
        let cands = CandidateSet {
            mention: "m".into(),
            candidates: per_channel_scores.keys().map(|(_, e)| e.clone()).collect(),
            per_channel_scores,
            prior: BTreeMap::new(),
        };
        let n = cands.len();
        let out = prior_score(cands);
        prop_assert_eq!(out.prior.len(), n);
        for p in out.prior.values() {
            prop_assert!((0.0..=1.0).contains(p));
        }
    }

    #[test]
    fn final_score_is_prior_plus_path_deltas(
        values in prop::collection::vec(0.0f64..1.0, EVIDENCE_DIM),
        prior in 0.0f64..1.0,
        thresholds in prop::collection::vec(0.0f64..1.0, 3),
        deltas in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        let f = EvidenceVector::from_array(values.clone().try_into().unwrap());
        let root = TreeNode::leaf("stat_mu", Comparator::Gt, thresholds[0], deltas[0], deltas[1])
            .then_true(TreeNode::leaf("lex", Comparator::Le, thresholds[1], deltas[2], deltas[3]))
            .then_false(TreeNode::leaf("s_prior", Comparator::Ge, thresholds[2], deltas[4], deltas[5]));
        let tree = DecisionTree::new(root, 5).unwrap();
        let t = evaluate(&tree, &f, prior);
        prop_assert_eq!(t.steps.len(), 2);
        let sum = t.steps.iter().fold(0.0, |acc, s| acc + s.delta);
        prop_assert_eq!(t.delta_sum, sum);
        prop_assert_eq!(t.final_score, prior + t.delta_sum);

        // the wire format preserves the decision
        let reparsed: DecisionTree<f64> = parse_tree(&tree.to_reply(), 5).unwrap();
        prop_assert_eq!(evaluate(&reparsed, &f, prior).final_score, t.final_score);
    }

    #[test]
    fn identity_tree_keeps_the_prior(prior in -1.0f64..2.0) {
        let f = EvidenceVector::from_array([0.5; EVIDENCE_DIM]);
        let t = evaluate(&DecisionTree::identity(), &f, prior);
        prop_assert_eq!(t.final_score, prior);
        prop_assert!(t.steps.is_empty());
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), hidden in 1usize..6, input in 1usize..6) {
        let m = Model::init(&[input, hidden, 3], View::Image, seed);
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let back = Model::read_checkpoint(buf.as_slice()).unwrap();
        prop_assert_eq!(back.weights_hash(), m.weights_hash());
        prop_assert_eq!(back.view(), View::Image);
    }

    #[test]
    fn channel_names_round_trip(i in 0usize..9) {
        let c = Channel::ALL[i];
        prop_assert_eq!(c.to_string().parse::<Channel>().unwrap(), c);
    }
}

#[test]
fn channel_list_covers_every_view_pair_once() {
    let mut seen = Vec::new();
    for level in [Level::Inst, Level::Group] {
        for view in [ViewPair::TT, ViewPair::TV, ViewPair::VT, ViewPair::VV] {
            seen.push(Channel::Neural(level, view));
        }
    }
    seen.push(Channel::Lexical);
    assert_eq!(seen, Channel::ALL);
}
