//! Class-similarity graph, the per-class feature bank and GCN imputation of
//! unseen-class features.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{cosine, ClassEmbedding, TrainingSet};
use crate::error::{Error, Result};
use crate::generator::{FakeFeatureBatch, FakeOrigin};
use crate::numerics::{self, relu, relu_backward, HasParams, Matrix, OptimizerSpec, Parameter};

/// Weighted class graph; `adjacency[i][j]` is the embedding cosine when it exceeds the threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassGraph {
    pub adjacency: Matrix,
    pub threshold: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `D^-1/2 (A + I) D^-1/2`
    #[default]
    Symmetric,
    /// The thresholded adjacency as is, without self-loops.
    Raw,
}

pub fn build_graph(embeddings: &[ClassEmbedding], threshold: f64) -> Result<ClassGraph> {
    if embeddings.len() < 2 {
        return Err(Error::Config(format!(
            "a class graph needs at least 2 classes, got {}",
            embeddings.len()
        )));
    }
    if !(threshold > -1.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "threshold must lie in (-1, 1), got {threshold}"
        )));
    }
    if let Some(e) = embeddings
        .iter()
        .find(|e| e.vector.iter().all(|&v| v == 0.0))
    {
        return Err(Error::Invalid(format!(
            "embedding '{}' has zero norm; cosine similarity is undefined",
            e.name
        )));
    }
    let n = embeddings.len();
    let mut adjacency = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            if embeddings[i].vector.len() != embeddings[j].vector.len() {
                return Err(Error::Dimension(format!(
                    "embeddings '{}' and '{}' differ in length",
                    embeddings[i].name, embeddings[j].name
                )));
            }
            let c =
                cosine(&embeddings[i].vector, &embeddings[j].vector).expect("norms checked above");
            if c > threshold {
                // clamp rounding overshoot of identical vectors
                let c = c.min(1.0);
                adjacency.set(i, j, c);
                adjacency.set(j, i, c);
            }
        }
    }
    Ok(ClassGraph {
        adjacency,
        threshold,
    })
}

impl ClassGraph {
    pub fn n(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n())
            .filter(|&j| j != i && self.adjacency.get(i, j) != 0.0)
            .collect()
    }

    pub fn edges(&self) -> BTreeSet<(usize, usize)> {
        let n = self.n();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.adjacency.get(i, j) != 0.0)
            .collect()
    }

    /// The propagation matrix the convolution multiplies by.
    pub fn propagation(&self, normalization: Normalization) -> Matrix {
        match normalization {
            Normalization::Raw => self.adjacency.clone(),
            Normalization::Symmetric => {
                let n = self.n();
                let with_loops = self
                    .adjacency
                    .add(&Matrix::identity(n))
                    .expect("square adjacency");
                let inv_sqrt: Vec<f64> = with_loops
                    .row_iter()
                    .map(|r| 1.0 / r.iter().sum::<f64>().sqrt())
                    .collect();
                let mut out = with_loops;
                for i in 0..n {
                    for j in 0..n {
                        let v = out.get(i, j) * inv_sqrt[i] * inv_sqrt[j];
                        out.set(i, j, v);
                    }
                }
                out
            }
        }
    }

    /// CSV with a header of class names followed by `n` rows of edge weights.
    pub fn to_csv(&self, names: &[String]) -> Result<String> {
        if names.len() != self.n() {
            return Err(Error::Dimension(format!(
                "{} names for a {}-class graph",
                names.len(),
                self.n()
            )));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(names)?;
        for row in self.adjacency.row_iter() {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv writes utf-8"))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankPolicy {
    #[default]
    RunningMean,
    LastWrite,
}

/// Per-class feature rows: seen rows fill from real features, unseen rows stay zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBank {
    m: Matrix,
    counts: Vec<usize>,
    unseen: BTreeSet<usize>,
    policy: BankPolicy,
}

impl FeatureBank {
    pub fn new(n: usize, feature_dim: usize, unseen: BTreeSet<usize>, policy: BankPolicy) -> Self {
        Self {
            m: Matrix::zeros(n, feature_dim),
            counts: vec![0; n],
            unseen,
            policy,
        }
    }

    /// Fills a bank from every seen-class training sample.
    pub fn from_training<T: TrainingSet + ?Sized>(data: &T, policy: BankPolicy) -> Result<Self> {
        let mut bank = Self::new(
            data.n_classes(),
            data.feature_dim(),
            data.unseen_ids().clone(),
            policy,
        );
        for i in data.seen_indices() {
            let s = data.sample(i);
            bank.accumulate(s.class_id, &s.values)?;
        }
        Ok(bank)
    }

    pub fn accumulate(&mut self, class_id: usize, feature: &[f64]) -> Result<()> {
        if class_id >= self.counts.len() {
            return Err(Error::Invalid(format!("class id {class_id} out of range")));
        }
        if self.unseen.contains(&class_id) {
            return Err(Error::Invalid(format!(
                "class {class_id} is unseen; its bank row must stay empty"
            )));
        }
        if feature.len() != self.m.cols() {
            return Err(Error::Dimension(format!(
                "feature of length {} for a bank of width {}",
                feature.len(),
                self.m.cols()
            )));
        }
        self.counts[class_id] += 1;
        let k = self.counts[class_id] as f64;
        let row = self.m.row_mut(class_id);
        match self.policy {
            BankPolicy::RunningMean => {
                for (r, &f) in row.iter_mut().zip(feature) {
                    *r += (f - *r) / k;
                }
            }
            BankPolicy::LastWrite => row.copy_from_slice(feature),
        }
        Ok(())
    }

    pub fn filled_count(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// True once every seen class row holds at least one feature.
    pub fn ready(&self) -> bool {
        (0..self.counts.len())
            .filter(|c| !self.unseen.contains(c))
            .all(|c| self.counts[c] > 0)
    }

    pub fn row(&self, class_id: usize) -> &[f64] {
        self.m.row(class_id)
    }

    pub fn n(&self) -> usize {
        self.counts.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.m.cols()
    }

    pub fn unseen(&self) -> &BTreeSet<usize> {
        &self.unseen
    }

    pub fn seen_ids(&self) -> Vec<usize> {
        (0..self.n()).filter(|c| !self.unseen.contains(c)).collect()
    }

    /// Copy of `M` with unseen rows forced to zero.
    pub fn input_matrix(&self) -> Matrix {
        let mut m = self.m.clone();
        for &u in &self.unseen {
            if u < m.rows() {
                m.row_mut(u).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        m
    }
}

/// Two graph-convolution layers `P · ReLU(P · X · W1) · W2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcnNet {
    pub normalization: Normalization,
    pub theta1: Parameter,
    pub theta2: Parameter,
}

struct GcnActivations {
    pm: Matrix,
    pre: Matrix,
    hidden: Matrix,
}

impl GcnNet {
    pub fn new<R: Rng + ?Sized>(
        feature_dim: usize,
        hidden_width: usize,
        normalization: Normalization,
        rng: &mut R,
    ) -> Self {
        let first = numerics::Linear::new(feature_dim, hidden_width, rng);
        let second = numerics::Linear::with_std(
            hidden_width,
            feature_dim,
            (1.0 / hidden_width as f64).sqrt(),
            rng,
        );
        Self {
            normalization,
            theta1: first.weight,
            theta2: second.weight,
        }
    }

    fn forward_cached(&self, propagation: &Matrix, m: &Matrix) -> Result<(Matrix, GcnActivations)> {
        let pm = propagation.matmul(m)?;
        let pre = pm.matmul(&self.theta1.value)?;
        let hidden = relu(&pre);
        let out = propagation.matmul(&hidden)?.matmul(&self.theta2.value)?;
        Ok((out, GcnActivations { pm, pre, hidden }))
    }

    /// Convolves feature rows `m` over an explicit propagation matrix.
    pub fn forward(&self, propagation: &Matrix, m: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(propagation, m)?.0)
    }

    fn backward(
        &mut self,
        propagation: &Matrix,
        acts: &GcnActivations,
        grad_out: &Matrix,
    ) -> Result<()> {
        // out = (P · H) · W2
        let ph = propagation.matmul(&acts.hidden)?;
        self.theta2.accumulate_grad(&ph.t_matmul(grad_out)?)?;
        let g_ph = grad_out.matmul_t(&self.theta2.value)?;
        let g_hidden = propagation.t_matmul(&g_ph)?;
        let g_pre = relu_backward(&acts.pre, &g_hidden)?;
        self.theta1.accumulate_grad(&acts.pm.t_matmul(&g_pre)?)?;
        Ok(())
    }

    /// MSE between output rows of `rows` and `targets`; other rows carry no loss.
    pub fn loss_and_backward(
        &mut self,
        propagation: &Matrix,
        m: &Matrix,
        rows: &[usize],
        targets: &Matrix,
    ) -> Result<f64> {
        let (out, acts) = self.forward_cached(propagation, m)?;
        let selected = out.select_rows(rows);
        let (loss, g_sel) = numerics::mse(&selected, targets)?;
        let mut grad = Matrix::zeros(out.rows(), out.cols());
        for (k, &r) in rows.iter().enumerate() {
            grad.row_mut(r).copy_from_slice(g_sel.row(k));
        }
        self.backward(propagation, &acts, &grad)?;
        Ok(loss)
    }
}

impl HasParams for GcnNet {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.theta1, &self.theta2]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.theta1, &mut self.theta2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnOutput {
    pub features: Matrix,
    /// Unseen classes with no neighbor above the threshold.
    pub isolated_unseen: Vec<usize>,
}

fn check_compatible(graph: &ClassGraph, bank: &FeatureBank) -> Result<()> {
    if graph.n() != bank.n() {
        return Err(Error::Dimension(format!(
            "graph over {} classes with a bank of {}",
            graph.n(),
            bank.n()
        )));
    }
    if !bank.ready() {
        return Err(Error::Invalid(format!(
            "feature bank not ready: {} of {} seen rows filled",
            bank.filled_count(),
            bank.n() - bank.unseen().len()
        )));
    }
    Ok(())
}

pub fn gcn_forward(net: &GcnNet, graph: &ClassGraph, bank: &FeatureBank) -> Result<GcnOutput> {
    check_compatible(graph, bank)?;
    let isolated_unseen: Vec<usize> = bank
        .unseen()
        .iter()
        .copied()
        .filter(|&u| graph.neighbors(u).is_empty())
        .collect();
    for u in &isolated_unseen {
        log::warn!(
            "unseen class {u} has no neighbor above p={}; imputation degenerates",
            graph.threshold
        );
    }
    let features = net.forward(&graph.propagation(net.normalization), &bank.input_matrix())?;
    Ok(GcnOutput {
        features,
        isolated_unseen,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcnTraining {
    pub epochs: usize,
    pub optimizer: OptimizerSpec,
}

impl Default for GcnTraining {
    fn default() -> Self {
        Self {
            epochs: 300,
            optimizer: OptimizerSpec::adam(1e-3),
        }
    }
}

/// Trains the GCN to reproduce the bank's seen rows; returns the per-epoch loss.
pub fn train_gcn(
    net: &mut GcnNet,
    graph: &ClassGraph,
    bank: &FeatureBank,
    settings: &GcnTraining,
) -> Result<Vec<f64>> {
    check_compatible(graph, bank)?;
    settings.optimizer.validate()?;
    let propagation = graph.propagation(net.normalization);
    let m = bank.input_matrix();
    let seen = bank.seen_ids();
    let targets = m.select_rows(&seen);
    let mut curve = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        net.zero_grad();
        let loss = net.loss_and_backward(&propagation, &m, &seen, &targets)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("gcn loss at epoch {epoch}")));
        }
        numerics::step(&mut net.params_mut(), &settings.optimizer);
        curve.push(loss);
    }
    Ok(curve)
}

/// Seen-row reconstruction loss of the current network, without gradients.
pub fn gcn_loss(net: &GcnNet, graph: &ClassGraph, bank: &FeatureBank) -> Result<f64> {
    let out = gcn_forward(net, graph, bank)?.features;
    let seen = bank.seen_ids();
    let m = bank.input_matrix();
    Ok(numerics::mse(&out.select_rows(&seen), &m.select_rows(&seen))?.0)
}

/// GCN output rows for the requested unseen classes, one row each.
pub fn impute(
    net: &GcnNet,
    graph: &ClassGraph,
    bank: &FeatureBank,
    unseen_ids: &[usize],
) -> Result<(FakeFeatureBatch, Vec<usize>)> {
    if let Some(&bad) = unseen_ids.iter().find(|&&u| u >= graph.n()) {
        return Err(Error::Invalid(format!("unseen id {bad} out of range")));
    }
    let out = gcn_forward(net, graph, bank)?;
    let isolated = out
        .isolated_unseen
        .into_iter()
        .filter(|u| unseen_ids.contains(u))
        .collect();
    Ok((
        FakeFeatureBatch {
            features: out.features.select_rows(unseen_ids),
            class_ids: unseen_ids.to_vec(),
            origin: FakeOrigin::GcnImputed,
        },
        isolated,
    ))
}
