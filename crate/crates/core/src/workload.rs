//! What a worker computes: batch addressing, gradients, and evaluation.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use crate::datagen::{quad_batch, Batch, CtrDataset};
use crate::error::{Error, Result};
use crate::model::{
    self, DenseVector, FeatureId, Gradient, LogisticEmbeddingModel, ModelParams, QuadraticProblem,
};
use crate::ps::BatchRef;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// Suboptimality `F(w) − F*` for the quadratic, held-out log loss for CTR.
    pub loss: f64,
    pub auc: Option<f64>,
}

pub trait Workload: Send + Sync {
    fn batches_per_epoch(&self) -> usize;
    fn local_batch(&self) -> usize;
    fn init_params(&self) -> ModelParams;
    /// Embedding rows a worker must pull for this batch.
    fn batch_ids(&self, batch: BatchRef) -> Result<Vec<FeatureId>>;
    fn gradient(&self, params: &ModelParams, batch: BatchRef) -> Result<Gradient>;
    fn evaluate(&self, params: &ModelParams) -> Result<Evaluation>;
}

/// Noisy quadratic. Each batch's noise is keyed by `(seed, epoch, index)`.
#[derive(Clone, Debug)]
pub struct QuadWorkload {
    pub problem: QuadraticProblem,
    pub init: DenseVector,
    pub seed: u64,
    pub batches_per_epoch: usize,
}

impl QuadWorkload {
    /// `problem.noise.batch_size` is the local batch the noise is scaled to.
    pub fn new(problem: QuadraticProblem, init: DenseVector, seed: u64, batches_per_epoch: usize) -> Result<Self> {
        init.check_dim(problem.dim())?;
        if batches_per_epoch == 0 {
            return Err(Error::Config("batches_per_epoch must be >= 1".into()));
        }
        Ok(Self {
            problem,
            init,
            seed,
            batches_per_epoch,
        })
    }
}

impl Workload for QuadWorkload {
    fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }

    fn local_batch(&self) -> usize {
        self.problem.noise.batch_size
    }

    fn init_params(&self) -> ModelParams {
        ModelParams::new(self.init.clone(), 0)
    }

    fn batch_ids(&self, _batch: BatchRef) -> Result<Vec<FeatureId>> {
        Ok(Vec::new())
    }

    fn gradient(&self, params: &ModelParams, batch: BatchRef) -> Result<Gradient> {
        let b = quad_batch(self.seed, batch.epoch, batch.index);
        let mut rng = seed::rng(b.sub_seed, &[]);
        model::quad_stochastic_grad(params, &self.problem, &mut rng)
    }

    fn evaluate(&self, params: &ModelParams) -> Result<Evaluation> {
        Ok(Evaluation {
            loss: model::quad_loss(params, &self.problem)?,
            auc: None,
        })
    }
}

/// Logistic CTR model over a materialized training slice, evaluated on a
/// held-out slice.
#[derive(Debug)]
pub struct CtrWorkload {
    pub model: LogisticEmbeddingModel,
    pub train: CtrDataset,
    pub eval: CtrDataset,
    batch_size: usize,
    batches_per_epoch: usize,
    init: ModelParams,
    orders: Mutex<BTreeMap<u64, Arc<Vec<usize>>>>,
}

const CACHED_EPOCHS: usize = 4;

impl CtrWorkload {
    pub fn new(
        model: LogisticEmbeddingModel,
        train: CtrDataset,
        eval: CtrDataset,
        batch_size: usize,
        init: Option<ModelParams>,
    ) -> Result<Self> {
        let batches_per_epoch = train.num_batches(batch_size)?;
        if eval.is_empty() {
            return Err(Error::Config("evaluation slice is empty".into()));
        }
        let init = init.unwrap_or_else(|| model.init_params());
        Ok(Self {
            model,
            train,
            eval,
            batch_size,
            batches_per_epoch,
            init,
            orders: Mutex::new(BTreeMap::new()),
        })
    }

    fn order(&self, epoch: u64) -> Arc<Vec<usize>> {
        let mut cache = self.orders.lock().expect("order cache poisoned");
        if let Some(o) = cache.get(&epoch) {
            return Arc::clone(o);
        }
        let o = Arc::new(self.train.epoch_order(epoch));
        cache.insert(epoch, Arc::clone(&o));
        while cache.len() > CACHED_EPOCHS {
            let oldest = *cache.keys().next().expect("non-empty");
            cache.remove(&oldest);
        }
        o
    }

    pub fn batch(&self, b: BatchRef) -> Result<Batch> {
        if b.index >= self.batches_per_epoch {
            return Err(Error::Argument(format!("batch index {} out of range", b.index)));
        }
        Ok(self.train.batch(&self.order(b.epoch), self.batch_size, b.index))
    }
}

impl Workload for CtrWorkload {
    fn batches_per_epoch(&self) -> usize {
        self.batches_per_epoch
    }

    fn local_batch(&self) -> usize {
        self.batch_size
    }

    fn init_params(&self) -> ModelParams {
        self.init.clone()
    }

    fn batch_ids(&self, batch: BatchRef) -> Result<Vec<FeatureId>> {
        Ok(LogisticEmbeddingModel::batch_ids(&self.batch(batch)?))
    }

    fn gradient(&self, params: &ModelParams, batch: BatchRef) -> Result<Gradient> {
        model::logistic_grad(&self.model, params, &self.batch(batch)?)
    }

    fn evaluate(&self, params: &ModelParams) -> Result<Evaluation> {
        let held_out = self.eval.as_batch();
        let scores: Vec<f64> = (0..held_out.len())
            .map(|i| self.model.score(params, &held_out.dense[i], &held_out.ids[i]))
            .collect();
        let labels: Vec<bool> = held_out.labels.iter().map(|&y| y > 0.5).collect();
        Ok(Evaluation {
            loss: self.model.batch_loss(params, &held_out)?,
            auc: model::auc(&scores, &labels).ok(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{CtrDatasetConfig, ZipfConfig};
    use crate::model::NoiseModel;

    #[test]
    fn quad_gradient_depends_only_on_batch_address() {
        let p = QuadraticProblem::spaced(
            4,
            0.5,
            1.0,
            3,
            NoiseModel {
                sigma: 1.0,
                theta: 0.0,
                batch_size: 8,
            },
        )
        .unwrap();
        let w = QuadWorkload::new(p.clone(), p.initial_point(1.0, 2), 9, 10).unwrap();
        let params = w.init_params();
        let b = BatchRef { epoch: 1, index: 3 };
        assert_eq!(w.gradient(&params, b).unwrap(), w.gradient(&params, b).unwrap());
        assert_ne!(
            w.gradient(&params, b).unwrap(),
            w.gradient(&params, BatchRef { epoch: 0, index: 3 }).unwrap()
        );
        assert_eq!(w.evaluate(&params).unwrap().loss, p.loss_at(&params.dense).unwrap());
    }

    #[test]
    fn ctr_batches_cover_the_epoch_once() {
        let cfg = CtrDatasetConfig {
            num_samples: 60,
            dense_dim: 3,
            ids_per_sample: 2,
            zipf: ZipfConfig {
                exponent: 1.2,
                vocab: 50,
            },
            teacher_seed: 1,
            label_noise: 0.0,
        };
        let data = CtrDataset::generate(&cfg, 5).unwrap();
        let eval = data.slice(40, 20).unwrap();
        let train = data.slice(0, 40).unwrap();
        let model = LogisticEmbeddingModel {
            dense_dim: 3,
            embed_dim: 2,
            vocab: 50,
        };
        let w = CtrWorkload::new(model, train.clone(), eval, 10, None).unwrap();
        assert_eq!(w.batches_per_epoch(), 4);
        let mut labels = 0.0;
        for index in 0..4 {
            labels += w.batch(BatchRef { epoch: 2, index }).unwrap().labels.iter().sum::<f64>();
        }
        assert_eq!(labels, train.labels.iter().sum::<f64>());
        assert!(w.batch(BatchRef { epoch: 0, index: 4 }).is_err());
        let e = w.evaluate(&w.init_params()).unwrap();
        assert!((e.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
