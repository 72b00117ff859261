//! The 14-component mention–entity evidence vector: instance similarities,
//! graph-contextualized (group) similarities, lexical overlap, and summary
//! statistics with modality indicators.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{modality_indicator, MultimodalNode};
use crate::embed::EmbeddingStore;
use crate::lexical::lex_similarity;
use crate::linalg::cosine;
use crate::scalar::Scalar;

pub const EVIDENCE_DIM: usize = 14;

pub const FEATURE_NAMES: [&str; EVIDENCE_DIM] = [
    "inst_tt", "inst_tv", "inst_vt", "inst_vv", "group_tt", "group_tv", "group_vt", "group_vv", "lex", "stat_mu",
    "stat_max", "stat_gap", "has_img_m", "has_img_e",
];

/// Index of a feature name in [`FEATURE_NAMES`].
pub fn feature_index(name: &str) -> Option<usize> {
    FEATURE_NAMES.iter().position(|&n| n == name)
}

#[derive(Debug, thiserror::Error)]
pub enum EvidenceError {
    #[error("no text embedding for node {0:?}")]
    MissingText(String),
    #[error("no {which} representation for node {id:?}; encode all nodes first")]
    MissingRepresentation { id: String, which: &'static str },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvidenceVector<T> {
    pub inst_tt: T,
    pub inst_tv: T,
    pub inst_vt: T,
    pub inst_vv: T,
    pub group_tt: T,
    pub group_tv: T,
    pub group_vt: T,
    pub group_vv: T,
    pub lex: T,
    pub stat_mu: T,
    pub stat_max: T,
    pub stat_gap: T,
    pub has_img_m: T,
    pub has_img_e: T,
}

impl<T: Scalar> EvidenceVector<T> {
    pub fn to_array(&self) -> [T; EVIDENCE_DIM] {
        [
            self.inst_tt,
            self.inst_tv,
            self.inst_vt,
            self.inst_vv,
            self.group_tt,
            self.group_tv,
            self.group_vt,
            self.group_vv,
            self.lex,
            self.stat_mu,
            self.stat_max,
            self.stat_gap,
            self.has_img_m,
            self.has_img_e,
        ]
    }

    pub fn from_array(a: [T; EVIDENCE_DIM]) -> Self {
        Self {
            inst_tt: a[0],
            inst_tv: a[1],
            inst_vt: a[2],
            inst_vv: a[3],
            group_tt: a[4],
            group_tv: a[5],
            group_vt: a[6],
            group_vv: a[7],
            lex: a[8],
            stat_mu: a[9],
            stat_max: a[10],
            stat_gap: a[11],
            has_img_m: a[12],
            has_img_e: a[13],
        }
    }

    pub fn get(&self, name: &str) -> Option<T> {
        feature_index(name).map(|i| self.to_array()[i])
    }

    /// The nine similarity components that feed the statistics.
    pub fn similarities(&self) -> [T; 9] {
        let a = self.to_array();
        std::array::from_fn(|i| a[i])
    }
}

/// Teacher (text-view) and student (image-view) center representations.
#[derive(Debug, Clone, Default)]
pub struct Representations<T> {
    pub teacher: BTreeMap<String, Vec<T>>,
    pub student: BTreeMap<String, Vec<T>>,
}

fn opt_cos<T: Scalar>(a: Option<&[T]>, b: Option<&[T]>) -> T {
    match (a, b) {
        (Some(a), Some(b)) => cosine(a, b),
        _ => T::zero(),
    }
}

/// `(TT, TV, VT, VV)` cosines of the raw embeddings; a component whose image
/// is missing is 0.
pub fn instance_evidence<T: Scalar>(
    m: &MultimodalNode,
    e: &MultimodalNode,
    store: &EmbeddingStore<T>,
) -> Result<[T; 4], EvidenceError> {
    let tm = store.text(&m.id).ok_or_else(|| EvidenceError::MissingText(m.id.clone()))?;
    let te = store.text(&e.id).ok_or_else(|| EvidenceError::MissingText(e.id.clone()))?;
    let (vm, ve) = (store.image(&m.id), store.image(&e.id));
    Ok([cosine(tm, te), opt_cos(Some(tm), ve), opt_cos(vm, Some(te)), opt_cos(vm, ve)])
}

/// `(TT, TV, VT, VV)` cosines of teacher/student representations.
pub fn group_evidence<T: Scalar>(
    m: &MultimodalNode,
    e: &MultimodalNode,
    reps: &Representations<T>,
) -> Result<[T; 4], EvidenceError> {
    fn get<'a, T>(map: &'a BTreeMap<String, Vec<T>>, id: &str, which: &'static str) -> Result<&'a [T], EvidenceError> {
        map.get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| EvidenceError::MissingRepresentation { id: id.to_string(), which })
    }
    let hm_t = get(&reps.teacher, &m.id, "teacher")?;
    let he_t = get(&reps.teacher, &e.id, "teacher")?;
    let hm_i = get(&reps.student, &m.id, "student")?;
    let he_i = get(&reps.student, &e.id, "student")?;
    Ok([cosine(hm_t, he_t), cosine(hm_t, he_i), cosine(hm_i, he_t), cosine(hm_i, he_i)])
}

/// `(μ, s_max, s_max − μ, 𝕀_img(m), 𝕀_img(e))` from the nine similarities.
pub fn statistical_evidence<T: Scalar>(sims: &[T; 9], m: &MultimodalNode, e: &MultimodalNode) -> [T; 5] {
    let mu = sims.iter().copied().sum::<T>() / T::lit(9.0);
    let max = sims.iter().copied().fold(T::neg_infinity(), T::max);
    [
        mu,
        max,
        max - mu,
        T::lit(f64::from(modality_indicator(m))),
        T::lit(f64::from(modality_indicator(e))),
    ]
}

pub fn assemble<T: Scalar>(
    m: &MultimodalNode,
    e: &MultimodalNode,
    store: &EmbeddingStore<T>,
    reps: &Representations<T>,
) -> Result<EvidenceVector<T>, EvidenceError> {
    let inst = instance_evidence(m, e, store)?;
    let group = group_evidence(m, e, reps)?;
    let lex = lex_similarity::<T>(&m.name, &e.name).value();
    let sims = [inst[0], inst[1], inst[2], inst[3], group[0], group[1], group[2], group[3], lex];
    let stat = statistical_evidence(&sims, m, e);
    let mut a = [T::zero(); EVIDENCE_DIM];
    a[..9].copy_from_slice(&sims);
    a[9..].copy_from_slice(&stat);
    Ok(EvidenceVector::from_array(a))
}

/// One evidence-dump line: the pair plus every named feature.
pub fn write_evidence_line<T: Scalar, W: Write>(
    mut out: W,
    mention: &str,
    entity: &str,
    f: &EvidenceVector<T>,
) -> Result<(), EvidenceError> {
    let mut obj = serde_json::Map::new();
    obj.insert("mention".into(), mention.into());
    obj.insert("entity".into(), entity.into());
    for (name, v) in FEATURE_NAMES.iter().zip(f.to_array()) {
        obj.insert((*name).into(), v.as_f64().into());
    }
    serde_json::to_writer(&mut out, &obj)?;
    writeln!(out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::NodeKind;

    fn node(id: &str, kind: NodeKind, name: &str, img: bool) -> MultimodalNode {
        let n = MultimodalNode::new(id, kind, name);
        if img {
            n.with_image(format!("{id}.jpg"))
        } else {
            n
        }
    }

    fn store_with(entries: &[(&str, Vec<f64>, Option<Vec<f64>>)]) -> EmbeddingStore<f64> {
        let mut s = EmbeddingStore::new(entries[0].1.len());
        for (id, t, i) in entries {
            s.insert_text(id, t).unwrap();
            if let Some(i) = i {
                s.insert_image(id, i).unwrap();
            }
        }
        s
    }

    #[test]
    fn feature_names_are_unique_and_indexed() {
        for (i, n) in FEATURE_NAMES.iter().enumerate() {
            assert_eq!(feature_index(n), Some(i));
        }
        assert_eq!(feature_index("s_prior"), None);
    }

    #[test]
    fn missing_entity_image_zeroes_its_components() {
        let m = node("m", NodeKind::Mention, "a", true);
        let e = node("e", NodeKind::Entity, "a", false);
        let s = store_with(&[
            ("m", vec![1.0, 0.0], Some(vec![0.0, 1.0])),
            ("e", vec![0.6, 0.8], None),
        ]);
        let inst = instance_evidence(&m, &e, &s).unwrap();
        assert_eq!(inst[1], 0.0);
        assert_eq!(inst[3], 0.0);
        assert!((inst[0] - 0.6).abs() < 1e-12);
        assert!((inst[2] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn statistics_follow_arithmetic() {
        let m = node("m", NodeKind::Mention, "a", true);
        let e = node("e", NodeKind::Entity, "a", false);
        let st = statistical_evidence(&[0.5; 9], &m, &e);
        assert_eq!(st, [0.5, 0.5, 0.0, 1.0, 0.0]);
        let mut one = [0.0f64; 9];
        one[0] = 1.0;
        let st: [f64; 5] = statistical_evidence(&one, &m, &e);
        assert!((st[0] - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(st[1], 1.0);
        assert!((st[2] - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn hand_placed_pair_matches_straight_line_recomputation() {
        let m = node("m", NodeKind::Mention, "Oxford", true);
        let e = node("e", NodeKind::Entity, "Oxfordshire", true);
        let s = store_with(&[
            ("m", vec![1.0, 0.0, 0.0], Some(vec![0.0, 1.0, 0.0])),
            ("e", vec![0.0, 0.6, 0.8], Some(vec![0.0, 0.0, 1.0])),
        ]);
        let mut reps = Representations::default();
        reps.teacher.insert("m".into(), vec![2.0, 0.0, 0.0]);
        reps.teacher.insert("e".into(), vec![1.0, 1.0, 0.0]);
        reps.student.insert("m".into(), vec![0.0, 0.0, 0.0]);
        reps.student.insert("e".into(), vec![0.0, 3.0, 4.0]);
        let f = assemble(&m, &e, &s, &reps).unwrap();

        let r = std::f64::consts::FRAC_1_SQRT_2;
        // inst: tt=0, tv=0, vt=0.6, vv=0; group: tt=1/√2, tv=0, vt=0, vv=0
        // lex: 2·6/(6+11)
        let sims = [0.0, 0.0, 0.6, 0.0, r, 0.0, 0.0, 0.0, 12.0 / 17.0];
        let mu = sims.iter().sum::<f64>() / 9.0;
        let max = sims.iter().copied().fold(f64::MIN, f64::max);
        let want = [
            0.0,
            0.0,
            0.6,
            0.0,
            r,
            0.0,
            0.0,
            0.0,
            12.0 / 17.0,
            mu,
            max,
            max - mu,
            1.0,
            1.0,
        ];
        for (i, (got, want)) in f.to_array().iter().zip(want).enumerate() {
            assert!((got - want).abs() < 1e-12, "{}: {got} vs {want}", FEATURE_NAMES[i]);
        }
        assert_eq!(f.stat_gap, f.stat_max - f.stat_mu);
    }

    #[test]
    fn missing_representation_is_an_error() {
        let m = node("m", NodeKind::Mention, "a", false);
        let e = node("e", NodeKind::Entity, "a", false);
        let reps = Representations::<f64>::default();
        assert!(matches!(
            group_evidence(&m, &e, &reps),
            Err(EvidenceError::MissingRepresentation { .. })
        ));
    }

    #[test]
    fn dump_line_has_every_feature() {
        let f = EvidenceVector::from_array([0.25f64; EVIDENCE_DIM]);
        let mut buf = Vec::new();
        write_evidence_line(&mut buf, "m1", "e1", &f).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        for n in FEATURE_NAMES {
            assert_eq!(v[n], 0.25);
        }
        assert_eq!(v["mention"], "m1");
    }
}
