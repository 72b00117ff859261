//! GCN subgraph encoder with hand-written backpropagation, the structural
//! contrastive and cross-modal InfoNCE objectives, and the two-stage
//! teacher/student training loop.
//!
//! For a subgraph with induced adjacency `A`, the encoder computes
//! `Â = D̃^{-1/2}(A+I)D̃^{-1/2}` and `H⁽ˡ⁺¹⁾ = ReLU(Â H⁽ˡ⁾ W⁽ˡ⁾)`, with the last
//! layer left linear. The center's row is its representation `h`; the mean
//! of all rows is the neighbourhood summary `s`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::embed::EmbeddingStore;
use crate::graph::ContextGraph;
use crate::linalg::{axpy, cosine, dot, norm, sigmoid, Matrix};
use crate::ppr::Subgraph;
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum GnnError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("structural loss needs a batch of at least 2 (got {0})")]
    BatchTooSmall(usize),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("teacher model must be a frozen text-view model")]
    TeacherNotFrozen,
    #[error("no representation for node {0:?}")]
    MissingRepresentation(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum View {
    Text,
    Image,
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Text => "text",
            Self::Image => "image",
        })
    }
}

impl FromStr for View {
    type Err = GnnError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Self::Text),
            "image" => Ok(Self::Image),
            other => Err(GnnError::Checkpoint(format!("unknown view {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnModel<T> {
    view: View,
    weights: Vec<Matrix<T>>,
    frozen: bool,
    seed: u64,
    config_hash: String,
}

impl<T: Scalar> GnnModel<T> {
    /// Layer `l` maps `dims[l]` to `dims[l + 1]`. Weights are drawn
    /// uniformly from `±1/√fan_in` with a seeded generator.
    pub fn init(dims: &[usize], view: View, seed: u64) -> Self {
        assert!(dims.len() >= 2, "a model needs at least one layer");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
                let data = (0..w[0] * w[1]).map(|_| T::lit(dist.sample(&mut rng))).collect();
                Matrix::from_vec(w[0], w[1], data)
            })
            .collect();
        Self {
            view,
            weights,
            frozen: false,
            seed,
            config_hash: String::new(),
        }
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Matrix<T>] {
        &self.weights
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.weights[0].rows()];
        d.extend(self.weights.iter().map(Matrix::cols));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("at least one layer").cols()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn apply_gradients(&mut self, grads: &[Matrix<T>], lr: T) {
        assert!(!self.frozen, "frozen model cannot be updated");
        for (w, g) in self.weights.iter_mut().zip(grads) {
            for (x, &dx) in w.data_mut().iter_mut().zip(g.data()) {
                *x = *x - lr * dx;
            }
        }
    }

    /// SHA-256 of the weight bit patterns.
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.weights {
            h.update((w.rows() as u64).to_le_bytes());
            h.update((w.cols() as u64).to_le_bytes());
            for x in w.data() {
                h.update(x.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Header lines followed by each weight matrix in row-major order.
    /// Floats use shortest round-trip formatting, so save/load is bit-exact.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<(), GnnError> {
        writeln!(out, "mmel-gnn-checkpoint 1")?;
        writeln!(out, "view {}", self.view)?;
        writeln!(out, "frozen {}", self.frozen)?;
        writeln!(out, "seed {}", self.seed)?;
        writeln!(
            out,
            "config_hash {}",
            if self.config_hash.is_empty() { "-" } else { &self.config_hash }
        )?;
        writeln!(out, "layers {}", self.weights.len())?;
        let dims: Vec<String> = self.dims().iter().map(usize::to_string).collect();
        writeln!(out, "dims {}", dims.join(" "))?;
        for (l, w) in self.weights.iter().enumerate() {
            writeln!(out, "weight {l}")?;
            for r in 0..w.rows() {
                let row: Vec<String> = w.row(r).iter().map(|x| format!("{:?}", x.as_f64())).collect();
                writeln!(out, "{}", row.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GnnError> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(reader: R) -> Result<Self, GnnError> {
        let bad = |m: &str| GnnError::Checkpoint(m.to_string());
        let mut lines = BufReader::new(reader).lines();
        let mut next = || -> Result<String, GnnError> {
            lines.next().ok_or_else(|| bad("unexpected end of file"))?.map_err(GnnError::from)
        };
        if next()? != "mmel-gnn-checkpoint 1" {
            return Err(bad("not a checkpoint file"));
        }
        let field = |line: String, key: &str| -> Result<String, GnnError> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| GnnError::Checkpoint(format!("expected {key}")))
        };
        let view: View = field(next()?, "view")?.parse()?;
        let frozen = field(next()?, "frozen")? == "true";
        let seed: u64 = field(next()?, "seed")?.parse().map_err(|_| bad("bad seed"))?;
        let config_hash = match field(next()?, "config_hash")?.as_str() {
            "-" => String::new(),
            h => h.to_string(),
        };
        let layers: usize = field(next()?, "layers")?.parse().map_err(|_| bad("bad layers"))?;
        let dims: Vec<usize> = field(next()?, "dims")?
            .split_whitespace()
            .map(|d| d.parse().map_err(|_| bad("bad dims")))
            .collect::<Result<_, _>>()?;
        if dims.len() != layers + 1 {
            return Err(bad("dims do not match layer count"));
        }
        let mut weights = Vec::with_capacity(layers);
        for l in 0..layers {
            if next()? != format!("weight {l}") {
                return Err(bad("expected weight header"));
            }
            let (rows, cols) = (dims[l], dims[l + 1]);
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = next()?;
                let row: Vec<T> = line
                    .split_whitespace()
                    .map(|x| x.parse::<f64>().map(T::lit).map_err(|_| bad("bad weight")))
                    .collect::<Result<_, _>>()?;
                if row.len() != cols {
                    return Err(bad("weight row has wrong length"));
                }
                data.extend(row);
            }
            weights.push(Matrix::from_vec(rows, cols, data));
        }
        Ok(Self {
            view,
            weights,
            frozen,
            seed,
            config_hash,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GnnError> {
        Self::read_checkpoint(fs::File::open(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<T> {
    /// Hinge margin of the structural loss.
    pub eta: T,
    /// InfoNCE temperature.
    pub tau: T,
    /// Weight of the cross-modal term in the student objective.
    pub lambda_distill: T,
    pub lr: T,
    pub epochs: usize,
    pub batch_size: usize,
    pub num_layers: usize,
    pub seed: u64,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            eta: T::lit(0.5),
            tau: T::lit(0.1),
            lambda_distill: T::lit(0.75),
            lr: T::lit(0.01),
            epochs: 10,
            batch_size: 32,
            num_layers: 2,
            seed: 0,
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<(), GnnError> {
        if !(self.tau > T::zero()) {
            return Err(GnnError::Config("tau must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(GnnError::Config("batch_size must be at least 2".into()));
        }
        if self.lambda_distill < T::zero() {
            return Err(GnnError::Config("lambda_distill must be nonnegative".into()));
        }
        if self.num_layers == 0 {
            return Err(GnnError::Config("num_layers must be at least 1".into()));
        }
        if !self.lr.is_finite() || !self.eta.is_finite() {
            return Err(GnnError::Config("lr and eta must be finite".into()));
        }
        Ok(())
    }

    /// Short hash of every hyperparameter, recorded in checkpoints.
    pub fn hash(&self) -> String {
        let text = format!(
            "eta={:?} tau={:?} lambda={:?} lr={:?} epochs={} batch={} layers={} seed={}",
            self.eta.as_f64(),
            self.tau.as_f64(),
            self.lambda_distill.as_f64(),
            self.lr.as_f64(),
            self.epochs,
            self.batch_size,
            self.num_layers,
            self.seed
        );
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}

/// Contextualized vector and neighbourhood summary of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRepresentation<T> {
    pub h: Vec<T>,
    pub s: Vec<T>,
}

/// `Â = D̃^{-1/2}(A+I)D̃^{-1/2}` over the subgraph's induced edges.
pub fn normalized_adjacency<T: Scalar>(subgraph: &Subgraph) -> Matrix<T> {
    let n = subgraph.len();
    let mut a = Matrix::identity(n);
    for &(i, j) in &subgraph.edges {
        a[(i, j)] = T::one();
        a[(j, i)] = T::one();
    }
    let inv_sqrt: Vec<T> = (0..n)
        .map(|i| {
            let deg: T = a.row(i).iter().copied().sum();
            T::one() / deg.sqrt()
        })
        .collect();
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = a[(i, j)] * inv_sqrt[i] * inv_sqrt[j];
        }
    }
    a
}

/// Member feature rows. The image view zero-fills members without an image.
pub fn view_features<T: Scalar>(
    subgraph: &Subgraph,
    graph: &ContextGraph<T>,
    store: &EmbeddingStore<T>,
    view: View,
) -> Matrix<T> {
    let d = store.dim();
    let mut m = Matrix::zeros(subgraph.len(), d);
    for (r, &node) in subgraph.members.iter().enumerate() {
        let id = graph.id(node);
        let row = match view {
            View::Text => store.text(id),
            View::Image => store.image(id),
        };
        if let Some(v) = row {
            m.row_mut(r).copy_from_slice(v);
        } else {
            assert!(view == View::Image, "missing text embedding for {id}");
        }
    }
    m
}

/// Output of one forward pass, with the intermediates backprop needs.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub h_center: Vec<T>,
    pub summary: Vec<T>,
    pub all_h: Matrix<T>,
    /// `Â·H⁽ˡ⁾` per layer.
    aggregated: Vec<Matrix<T>>,
    /// Pre-activation `Â·H⁽ˡ⁾·W⁽ˡ⁾` per layer.
    pre_activation: Vec<Matrix<T>>,
}

pub fn gcn_forward<T: Scalar>(model: &GnnModel<T>, a_hat: &Matrix<T>, features: &Matrix<T>) -> Forward<T> {
    assert_eq!(a_hat.rows(), features.rows(), "feature rows must match members");
    let layers = model.num_layers();
    let mut aggregated = Vec::with_capacity(layers);
    let mut pre_activation = Vec::with_capacity(layers);
    let mut h = features.clone();
    for (l, w) in model.weights.iter().enumerate() {
        let agg = a_hat.matmul(&h);
        let z = agg.matmul(w);
        h = if l + 1 < layers {
            let mut r = z.clone();
            r.data_mut().iter_mut().for_each(|x| *x = x.max(T::zero()));
            r
        } else {
            z.clone()
        };
        aggregated.push(agg);
        pre_activation.push(z);
    }
    let n = h.rows();
    let mut summary = vec![T::zero(); h.cols()];
    for r in 0..n {
        axpy(T::one(), h.row(r), &mut summary);
    }
    let inv_n = T::one() / T::from_usize_lossy(n);
    summary.iter_mut().for_each(|x| *x = *x * inv_n);
    Forward {
        h_center: h.row(0).to_vec(),
        summary,
        all_h: h,
        aggregated,
        pre_activation,
    }
}

/// Weight gradients given `∂L/∂h_center` and `∂L/∂summary`.
pub fn gcn_backward<T: Scalar>(
    model: &GnnModel<T>,
    a_hat: &Matrix<T>,
    fwd: &Forward<T>,
    grad_h: &[T],
    grad_s: &[T],
) -> Vec<Matrix<T>> {
    let n = fwd.all_h.rows();
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut d_out = Matrix::zeros(n, fwd.all_h.cols());
    for r in 0..n {
        axpy(inv_n, grad_s, d_out.row_mut(r));
    }
    axpy(T::one(), grad_h, d_out.row_mut(0));

    let layers = model.num_layers();
    let mut grads = vec![Matrix::zeros(0, 0); layers];
    for l in (0..layers).rev() {
        let mut dz = d_out;
        if l + 1 < layers {
            for (g, &z) in dz.data_mut().iter_mut().zip(fwd.pre_activation[l].data()) {
                if z <= T::zero() {
                    *g = T::zero();
                }
            }
        }
        grads[l] = fwd.aggregated[l].t_matmul(&dz);
        // Â is symmetric
        d_out = if l > 0 {
            a_hat.matmul(&dz.matmul_t(&model.weights[l]))
        } else {
            Matrix::zeros(0, 0)
        };
    }
    grads
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<T> {
    pub loss: T,
    pub grad_h: Vec<Vec<T>>,
    pub grad_s: Vec<Vec<T>>,
}

/// Margin hinge `mean_i max(0, η − σ(h_iᵀs_i) + σ(h_iᵀs_j))`, where the
/// negative `j` for position `i` is `(i + 1) mod B`: a derangement of the
/// (already shuffled) batch.
pub fn structural_loss<T: Scalar>(h: &[Vec<T>], s: &[Vec<T>], eta: T) -> Result<LossGrad<T>, GnnError> {
    let b = h.len();
    assert_eq!(b, s.len(), "h and s batches differ in length");
    if b < 2 {
        return Err(GnnError::BatchTooSmall(b));
    }
    let dim = h[0].len();
    let inv_b = T::one() / T::from_usize_lossy(b);
    let mut grad_h = vec![vec![T::zero(); dim]; b];
    let mut grad_s = vec![vec![T::zero(); dim]; b];
    let mut loss = T::zero();
    for i in 0..b {
        let j = (i + 1) % b;
        let pos = sigmoid(dot(&h[i], &s[i]));
        let neg = sigmoid(dot(&h[i], &s[j]));
        let margin = eta - pos + neg;
        if margin <= T::zero() {
            continue;
        }
        loss = loss + margin;
        let dpos = pos * (T::one() - pos) * inv_b;
        let dneg = neg * (T::one() - neg) * inv_b;
        axpy(-dpos, &s[i], &mut grad_h[i]);
        axpy(dneg, &s[j], &mut grad_h[i]);
        axpy(-dpos, &h[i], &mut grad_s[i]);
        axpy(dneg, &h[i], &mut grad_s[j]);
    }
    Ok(LossGrad {
        loss: loss * inv_b,
        grad_h,
        grad_s,
    })
}

/// Cross-modal InfoNCE with cosine logits at temperature `tau`. Teacher
/// vectors are constants; the gradient is with respect to students only.
pub fn infonce_loss<T: Scalar>(
    student: &[Vec<T>],
    teacher: &[Vec<T>],
    tau: T,
) -> Result<(T, Vec<Vec<T>>), GnnError> {
    if !(tau > T::zero()) {
        return Err(GnnError::Config("tau must be positive".into()));
    }
    let b = student.len();
    assert_eq!(b, teacher.len(), "student and teacher batches differ in length");
    assert!(b >= 1, "empty batch");
    let dim = student[0].len();
    let inv_b = T::one() / T::from_usize_lossy(b);
    let t_unit: Vec<Option<Vec<T>>> = teacher
        .iter()
        .map(|v| {
            let n = norm(v);
            (n > T::zero()).then(|| v.iter().map(|&x| x / n).collect())
        })
        .collect();

    let mut loss = T::zero();
    let mut grads = vec![vec![T::zero(); dim]; b];
    for i in 0..b {
        let cos: Vec<T> = teacher.iter().map(|t| cosine(&student[i], t)).collect();
        let logits: Vec<T> = cos.iter().map(|&c| c / tau).collect();
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = logits.iter().map(|&l| (l - max).exp()).sum();
        let lse = max + z.ln();
        loss = loss + (lse - logits[i]);

        let nu = norm(&student[i]);
        if nu == T::zero() {
            continue;
        }
        let u_hat: Vec<T> = student[i].iter().map(|&x| x / nu).collect();
        for j in 0..b {
            let Some(v_hat) = &t_unit[j] else { continue };
            let p = (logits[j] - lse).exp();
            let coeff = if i == j { p - T::one() } else { p };
            // ∂cos(u, v)/∂u = (v̂ − cos·û) / |u|
            let scale = coeff * inv_b / (tau * nu);
            axpy(scale, v_hat, &mut grads[i]);
            axpy(-scale * cos[j], &u_hat, &mut grads[i]);
        }
    }
    Ok((loss * inv_b, grads))
}

/// Subgraphs with their normalized adjacency and both feature views,
/// prepared once per training run.
pub struct TrainingSet<'a, T> {
    graph: &'a ContextGraph<T>,
    a_hat: Vec<Matrix<T>>,
    text: Vec<Matrix<T>>,
    image: Vec<Matrix<T>>,
    dim: usize,
}

impl<'a, T: Scalar> TrainingSet<'a, T> {
    pub fn new(graph: &'a ContextGraph<T>, store: &EmbeddingStore<T>, subgraphs: &[Subgraph]) -> Self {
        assert_eq!(subgraphs.len(), graph.node_count(), "one subgraph per node");
        let a_hat = subgraphs.par_iter().map(normalized_adjacency).collect();
        let text = subgraphs
            .par_iter()
            .map(|s| view_features(s, graph, store, View::Text))
            .collect();
        let image = subgraphs
            .par_iter()
            .map(|s| view_features(s, graph, store, View::Image))
            .collect();
        Self {
            graph,
            a_hat,
            text,
            image,
            dim: store.dim(),
        }
    }

    pub fn len(&self) -> usize {
        self.a_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a_hat.is_empty()
    }

    fn features(&self, view: View, node: usize) -> &Matrix<T> {
        match view {
            View::Text => &self.text[node],
            View::Image => &self.image[node],
        }
    }

    pub fn forward(&self, model: &GnnModel<T>, node: usize) -> Forward<T> {
        gcn_forward(model, &self.a_hat[node], self.features(model.view, node))
    }

    /// Center representation for every node, keyed by id.
    pub fn encode_all(&self, model: &GnnModel<T>) -> BTreeMap<String, Vec<T>> {
        let reps: Vec<Vec<T>> = (0..self.len())
            .into_par_iter()
            .map(|i| self.forward(model, i).h_center)
            .collect();
        reps.into_iter()
            .enumerate()
            .map(|(i, h)| (self.graph.id(i).to_string(), h))
            .collect()
    }
}

/// Per-epoch training curve.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean total objective per epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean structural term per epoch.
    pub structural_loss: Vec<f64>,
    /// Mean cross-modal term per epoch (student only).
    pub xmodal_loss: Vec<f64>,
    /// Mean `cos(h_img, h_txt)` over the epoch's forward passes (student only).
    pub alignment: Vec<f64>,
}

fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    // a lone trailing node has no negative partner
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

struct Distill<'b, T> {
    teacher: &'b [Vec<T>],
    lambda: T,
}

fn train_view<T: Scalar>(
    data: &TrainingSet<'_, T>,
    view: View,
    distill: Option<Distill<'_, T>>,
    cfg: &TrainConfig<T>,
) -> Result<(GnnModel<T>, TrainReport), GnnError> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(GnnError::Config("training needs at least 2 nodes".into()));
    }
    let dims = vec![data.dim; cfg.num_layers + 1];
    let mut model = GnnModel::init(&dims, view, cfg.seed);
    model.config_hash = cfg.hash();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        let (mut total, mut structural, mut xmodal, mut align) = (0.0, 0.0, 0.0, 0.0);
        let mut seen = 0usize;
        for (bi, batch) in batches(data.len(), cfg.batch_size, &mut rng).into_iter().enumerate() {
            let fwds: Vec<Forward<T>> = batch.par_iter().map(|&n| data.forward(&model, n)).collect();
            let hs: Vec<Vec<T>> = fwds.iter().map(|f| f.h_center.clone()).collect();
            let ss: Vec<Vec<T>> = fwds.iter().map(|f| f.summary.clone()).collect();
            let mut lg = structural_loss(&hs, &ss, cfg.eta)?;
            let mut loss = lg.loss;
            structural += lg.loss.as_f64() * batch.len() as f64;

            if let Some(d) = &distill {
                let teacher: Vec<Vec<T>> = batch.iter().map(|&n| d.teacher[n].clone()).collect();
                align += hs
                    .iter()
                    .zip(&teacher)
                    .map(|(h, t)| cosine(h, t).as_f64())
                    .sum::<f64>();
                if d.lambda != T::zero() {
                    let (lx, gx) = infonce_loss(&hs, &teacher, cfg.tau)?;
                    loss = loss + d.lambda * lx;
                    xmodal += lx.as_f64() * batch.len() as f64;
                    for (g, x) in lg.grad_h.iter_mut().zip(&gx) {
                        axpy(d.lambda, x, g);
                    }
                }
            }
            if !loss.is_finite() {
                return Err(GnnError::Diverged {
                    epoch,
                    batch: bi,
                    loss: loss.as_f64(),
                });
            }
            total += loss.as_f64() * batch.len() as f64;
            seen += batch.len();

            let per_item: Vec<Vec<Matrix<T>>> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &n)| gcn_backward(&model, &data.a_hat[n], &fwds[k], &lg.grad_h[k], &lg.grad_s[k]))
                .collect();
            // fixed summation order keeps results independent of worker count
            let mut grads: Vec<Matrix<T>> = model
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect();
            for item in &per_item {
                for (g, gi) in grads.iter_mut().zip(item) {
                    g.add_assign(gi);
                }
            }
            model.apply_gradients(&grads, cfg.lr);
            if model.weights.iter().any(|w| !w.is_finite()) {
                return Err(GnnError::Diverged {
                    epoch,
                    batch: bi,
                    loss: f64::NAN,
                });
            }
        }
        let denom = seen.max(1) as f64;
        report.epoch_loss.push(total / denom);
        report.structural_loss.push(structural / denom);
        if distill.is_some() {
            report.xmodal_loss.push(xmodal / denom);
            report.alignment.push(align / denom);
        }
        log::debug!("{view} epoch {epoch}: loss {:.6}", total / denom);
    }
    Ok((model, report))
}

/// Stage one: text-view GCN trained on the structural loss, returned frozen.
pub fn train_teacher<T: Scalar>(
    data: &TrainingSet<'_, T>,
    cfg: &TrainConfig<T>,
) -> Result<(GnnModel<T>, TrainReport), GnnError> {
    let (mut model, report) = train_view(data, View::Text, None, cfg)?;
    model.freeze();
    Ok((model, report))
}

/// Image-view GCN trained on the structural loss alone.
pub fn train_structural_only<T: Scalar>(
    data: &TrainingSet<'_, T>,
    view: View,
    cfg: &TrainConfig<T>,
) -> Result<(GnnModel<T>, TrainReport), GnnError> {
    train_view(data, view, None, cfg)
}

/// Stage two: image-view GCN trained on structural loss plus
/// `lambda_distill` times InfoNCE against the frozen teacher.
pub fn train_student<T: Scalar>(
    data: &TrainingSet<'_, T>,
    teacher: &GnnModel<T>,
    cfg: &TrainConfig<T>,
) -> Result<(GnnModel<T>, TrainReport), GnnError> {
    if !teacher.is_frozen() || teacher.view() != View::Text {
        return Err(GnnError::TeacherNotFrozen);
    }
    let teacher_reps: Vec<Vec<T>> = (0..data.len())
        .into_par_iter()
        .map(|i| data.forward(teacher, i).h_center)
        .collect();
    train_with_teacher_reps(data, &teacher_reps, cfg)
}

/// [`train_student`] with precomputed teacher outputs, indexed by node.
pub fn train_with_teacher_reps<T: Scalar>(
    data: &TrainingSet<'_, T>,
    teacher_reps: &[Vec<T>],
    cfg: &TrainConfig<T>,
) -> Result<(GnnModel<T>, TrainReport), GnnError> {
    let distill = Distill {
        teacher: teacher_reps,
        lambda: cfg.lambda_distill,
    };
    train_view(data, View::Image, Some(distill), cfg)
}

/// Per-node center representation from `model` on its own view.
pub fn encode_all<T: Scalar>(
    model: &GnnModel<T>,
    graph: &ContextGraph<T>,
    subgraphs: &[Subgraph],
    store: &EmbeddingStore<T>,
) -> BTreeMap<String, Vec<T>> {
    TrainingSet::new(graph, store, subgraphs).encode_all(model)
}
