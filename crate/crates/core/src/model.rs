//! Toy differentiable models and the plain SGD update.
//!
//! [`QuadraticProblem`] satisfies smoothness, strong convexity, unbiasedness
//! and the bounded-variance condition exactly, which is what makes the
//! convergence envelopes in [`crate::bounds`] checkable. The logistic model
//! with an embedding table exercises the sparse update path.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::Batch;
use crate::error::{Error, Result};
use crate::ps::Token;

pub type FeatureId = u64;

/// Fixed-dimension vector of finite `f64`s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericFault(format!(
                "non-finite entry {} at index {bad}",
                values[bad]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn dist_sq(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// `self += alpha * other`
    pub(crate) fn axpy(&mut self, alpha: f64, other: &Self) {
        for (s, o) in self.0.iter_mut().zip(&other.0) {
            *s += alpha * o;
        }
    }

    pub(crate) fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::Dimension {
                expected,
                got: self.dim(),
            });
        }
        Ok(())
    }
}

/// Sparse map from feature ID to an embedding row. Absent rows read as zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    dim: usize,
    entries: BTreeMap<FeatureId, DenseVector>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: FeatureId) -> bool {
        self.entries.contains_key(&id)
    }

    /// Reads a row without materializing it.
    pub fn row(&self, id: FeatureId) -> DenseVector {
        self.entries
            .get(&id)
            .cloned()
            .unwrap_or_else(|| DenseVector::zeros(self.dim))
    }

    pub fn get(&self, id: FeatureId) -> Option<&DenseVector> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FeatureId, &DenseVector)> {
        self.entries.iter()
    }

    pub(crate) fn row_mut(&mut self, id: FeatureId) -> &mut DenseVector {
        let dim = self.dim;
        self.entries
            .entry(id)
            .or_insert_with(|| DenseVector::zeros(dim))
    }

    pub(crate) fn insert(&mut self, id: FeatureId, row: DenseVector) {
        self.entries.insert(id, row);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dense: DenseVector,
    pub embeddings: EmbeddingTable,
    pub global_step: u64,
}

impl ModelParams {
    pub fn new(dense: DenseVector, embed_dim: usize) -> Self {
        Self {
            dense,
            embeddings: EmbeddingTable::new(embed_dim),
            global_step: 0,
        }
    }

    /// Consistent read of the dense part plus the requested rows. Rows that
    /// were never written come back as zeros; the table itself is untouched.
    pub fn snapshot(&self, ids: &[FeatureId]) -> ModelParams {
        let mut embeddings = EmbeddingTable::new(self.embeddings.dim());
        for &id in ids {
            embeddings.insert(id, self.embeddings.row(id));
        }
        ModelParams {
            dense: self.dense.clone(),
            embeddings,
            global_step: self.global_step,
        }
    }
}

/// Dense part plus per-ID sparse rows. Used both for a single worker's
/// gradient and for an aggregate `v_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    pub dense: DenseVector,
    pub sparse: BTreeMap<FeatureId, DenseVector>,
}

impl Gradient {
    pub fn dense_only(dense: DenseVector) -> Self {
        Self {
            dense,
            sparse: BTreeMap::new(),
        }
    }

    pub fn zeros(dense_dim: usize) -> Self {
        Self::dense_only(DenseVector::zeros(dense_dim))
    }

    pub fn is_finite(&self) -> bool {
        self.dense.is_finite() && self.sparse.values().all(DenseVector::is_finite)
    }

    pub fn norm_sq(&self) -> f64 {
        self.dense.norm_sq() + self.sparse.values().map(DenseVector::norm_sq).sum::<f64>()
    }

    pub fn ids(&self) -> impl Iterator<Item = FeatureId> + '_ {
        self.sparse.keys().copied()
    }
}

/// A worker's gradient stamped with the token it was issued and the global
/// step of the parameters it was computed against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseGradient {
    pub grad: Gradient,
    pub token: Token,
    pub worker_id: usize,
    pub pull_step: u64,
}

impl SparseGradient {
    pub fn new(grad: Gradient, token: Token, worker_id: usize, pull_step: u64) -> Self {
        Self {
            grad,
            token,
            worker_id,
            pull_step,
        }
    }
}

/// Per-sample gradient noise: `σ² / B + (Θ / B) · ‖∇F‖²` in total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: f64,
    pub theta: f64,
    pub batch_size: usize,
}

impl NoiseModel {
    pub fn total_variance(&self, grad_norm_sq: f64) -> f64 {
        let b = self.batch_size as f64;
        self.sigma * self.sigma / b + self.theta / b * grad_norm_sq
    }
}

/// `F(w) = ½ Σ aᵢ (wᵢ − w*ᵢ)²` with `F* = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticProblem {
    pub a: DenseVector,
    pub optimum: DenseVector,
    pub noise: NoiseModel,
}

impl QuadraticProblem {
    pub fn new(a: DenseVector, optimum: DenseVector, noise: NoiseModel) -> Result<Self> {
        optimum.check_dim(a.dim())?;
        if a.dim() == 0 {
            return Err(Error::Argument("quadratic needs dimension >= 1".into()));
        }
        if a.as_slice().iter().any(|&ai| ai <= 0.0) {
            return Err(Error::Argument("curvatures must be positive".into()));
        }
        if noise.batch_size == 0 || noise.sigma < 0.0 || noise.theta < 0.0 {
            return Err(Error::Argument(format!("invalid noise model {noise:?}")));
        }
        Ok(Self { a, optimum, noise })
    }

    /// Curvatures evenly spaced over `[a_min, a_max]`, so `c = a_min` and
    /// `L = a_max` exactly; optimum drawn from `N(0, 1)` under `seed`.
    pub fn spaced(
        dim: usize,
        a_min: f64,
        a_max: f64,
        seed: u64,
        noise: NoiseModel,
    ) -> Result<Self> {
        if dim == 0 || a_min <= 0.0 || a_max < a_min {
            return Err(Error::Argument(format!(
                "bad curvature range [{a_min}, {a_max}] for dim {dim}"
            )));
        }
        let a = (0..dim)
            .map(|i| {
                if dim == 1 {
                    a_min
                } else {
                    a_min + (a_max - a_min) * i as f64 / (dim - 1) as f64
                }
            })
            .collect();
        let mut rng = crate::seed::rng(seed, &[crate::seed::TAG_INIT]);
        let optimum = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        Self::new(DenseVector::from_raw(a), DenseVector::from_raw(optimum), noise)
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }

    /// `L = max aᵢ`
    pub fn smoothness(&self) -> f64 {
        self.a.as_slice().iter().copied().fold(f64::MIN, f64::max)
    }

    /// `c = min aᵢ`
    pub fn strong_convexity(&self) -> f64 {
        self.a.as_slice().iter().copied().fold(f64::MAX, f64::min)
    }

    pub fn with_batch_size(&self, batch_size: usize) -> Self {
        let mut p = self.clone();
        p.noise.batch_size = batch_size;
        p
    }

    /// Starting point `w* + scale · N(0, I)`.
    pub fn initial_point(&self, scale: f64, seed: u64) -> DenseVector {
        let mut rng = crate::seed::rng(seed, &[crate::seed::TAG_INIT, 1]);
        DenseVector::from_raw(
            self.optimum
                .as_slice()
                .iter()
                .map(|w| w + scale * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )
    }

    pub fn loss_at(&self, w: &DenseVector) -> Result<f64> {
        w.check_dim(self.dim())?;
        Ok(0.5
            * self
                .a
                .as_slice()
                .iter()
                .zip(w.as_slice().iter().zip(self.optimum.as_slice()))
                .map(|(a, (wi, oi))| a * (wi - oi) * (wi - oi))
                .sum::<f64>())
    }

    pub fn grad_at(&self, w: &DenseVector) -> Result<DenseVector> {
        w.check_dim(self.dim())?;
        Ok(DenseVector::from_raw(
            self.a
                .as_slice()
                .iter()
                .zip(w.as_slice().iter().zip(self.optimum.as_slice()))
                .map(|(a, (wi, oi))| a * (wi - oi))
                .collect(),
        ))
    }
}

pub fn quad_loss(params: &ModelParams, problem: &QuadraticProblem) -> Result<f64> {
    problem.loss_at(&params.dense)
}

pub fn quad_true_grad(params: &ModelParams, problem: &QuadraticProblem) -> Result<DenseVector> {
    problem.grad_at(&params.dense)
}

/// `∇F(w) + ξ`, with `ξ` isotropic Gaussian whose total variance is exactly
/// the noise model's bound, so the variance assumption holds with equality.
pub fn quad_stochastic_grad<R: Rng + ?Sized>(
    params: &ModelParams,
    problem: &QuadraticProblem,
    rng: &mut R,
) -> Result<Gradient> {
    let mut g = problem.grad_at(&params.dense)?;
    let total = problem.noise.total_variance(g.norm_sq());
    if total > 0.0 {
        let sd = (total / problem.dim() as f64).sqrt();
        for gi in &mut g.0 {
            *gi += sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(Gradient::dense_only(g))
}

/// Logistic regression over dense features plus mean-pooled embeddings of
/// the sample's IDs. Each pooled row is projected onto the all-ones vector,
/// so the score stays linear (and the loss convex) in every parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticEmbeddingModel {
    pub dense_dim: usize,
    pub embed_dim: usize,
    pub vocab: u64,
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

impl LogisticEmbeddingModel {
    pub fn init_params(&self) -> ModelParams {
        ModelParams::new(DenseVector::zeros(self.dense_dim), self.embed_dim)
    }

    pub fn score(&self, params: &ModelParams, dense: &[f64], ids: &[FeatureId]) -> f64 {
        let linear: f64 = params
            .dense
            .as_slice()
            .iter()
            .zip(dense)
            .map(|(w, x)| w * x)
            .sum();
        if ids.is_empty() {
            return linear;
        }
        let pooled: f64 = ids
            .iter()
            .map(|&id| {
                params
                    .embeddings
                    .get(id)
                    .map_or(0.0, |row| row.as_slice().iter().sum::<f64>())
            })
            .sum();
        linear + pooled / ids.len() as f64
    }

    pub fn predict(&self, params: &ModelParams, dense: &[f64], ids: &[FeatureId]) -> f64 {
        sigmoid(self.score(params, dense, ids))
    }

    /// Mean binary cross-entropy over the batch (labels may be soft).
    pub fn batch_loss(&self, params: &ModelParams, batch: &Batch) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let total: f64 = (0..batch.len())
            .map(|i| {
                let s = self.score(params, &batch.dense[i], &batch.ids[i]);
                softplus(s) - batch.labels[i] * s
            })
            .sum();
        Ok(total / batch.len() as f64)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        for (x, ids) in batch.dense.iter().zip(&batch.ids) {
            if x.len() != self.dense_dim {
                return Err(Error::Dimension {
                    expected: self.dense_dim,
                    got: x.len(),
                });
            }
            if ids.is_empty() {
                return Err(Error::Argument("sample without feature IDs".into()));
            }
        }
        Ok(())
    }

    pub fn batch_ids(batch: &Batch) -> Vec<FeatureId> {
        batch
            .ids
            .iter()
            .flatten()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// Average cross-entropy gradient over the batch. The sparse part holds rows
/// only for IDs that occur in the batch.
pub fn logistic_grad(
    model: &LogisticEmbeddingModel,
    params: &ModelParams,
    batch: &Batch,
) -> Result<Gradient> {
    model.check_batch(batch)?;
    let inv_b = 1.0 / batch.len() as f64;
    let mut dense = vec![0.0; model.dense_dim];
    let mut per_id: BTreeMap<FeatureId, f64> = BTreeMap::new();
    for i in 0..batch.len() {
        let x = &batch.dense[i];
        let ids = &batch.ids[i];
        let residual = model.predict(params, x, ids) - batch.labels[i];
        for (d, xi) in dense.iter_mut().zip(x) {
            *d += residual * xi * inv_b;
        }
        let share = residual * inv_b / ids.len() as f64;
        for &id in ids {
            *per_id.entry(id).or_insert(0.0) += share;
        }
    }
    let sparse = per_id
        .into_iter()
        .map(|(id, g)| (id, DenseVector::from_raw(vec![g; model.embed_dim])))
        .collect();
    Ok(Gradient {
        dense: DenseVector::from_raw(dense),
        sparse,
    })
}

/// `w ← w − η v` on the dense part and on every row present in `v.sparse`;
/// advances the global step. Leaves `params` untouched on error.
pub fn apply_update(params: &mut ModelParams, v: &Gradient, eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Argument(format!("learning rate must be > 0, got {eta}")));
    }
    v.dense.check_dim(params.dense.dim())?;
    for row in v.sparse.values() {
        row.check_dim(params.embeddings.dim())?;
    }
    if !v.is_finite() {
        return Err(Error::NumericFault("non-finite aggregate".into()));
    }
    params.dense.axpy(-eta, &v.dense);
    for (&id, row) in &v.sparse {
        params.embeddings.row_mut(id).axpy(-eta, row);
    }
    params.global_step += 1;
    Ok(())
}

/// Area under the ROC curve via the Mann-Whitney statistic; tied scores
/// receive half credit.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based average rank of the tie group
        let avg_rank = (start + end + 1) as f64 / 2.0;
        rank_sum += avg_rank * order[start..end].iter().filter(|&&i| labels[i]).count() as f64;
        start = end;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}
