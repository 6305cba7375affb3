//! Synthetic data: Zipf-skewed CTR samples and the descriptor stream that
//! carries the quadratic model's noise seeds.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureId;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZipfConfig {
    pub exponent: f64,
    pub vocab: u64,
}

impl Default for ZipfConfig {
    fn default() -> Self {
        Self {
            exponent: 1.2,
            vocab: 10_000,
        }
    }
}

/// Inverse-CDF sampler over ranks `1..=V` with `P(r) ∝ r^(−α)`.
#[derive(Clone, Debug)]
pub struct ZipfSampler {
    cdf: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(config: ZipfConfig) -> Result<Self> {
        if config.vocab == 0 {
            return Err(Error::Argument("Zipf vocabulary must be >= 1".into()));
        }
        if !(config.exponent >= 0.0 && config.exponent.is_finite()) {
            return Err(Error::Argument(format!(
                "Zipf exponent must be >= 0, got {}",
                config.exponent
            )));
        }
        let mut cdf = Vec::with_capacity(config.vocab as usize);
        let mut acc = 0.0;
        for r in 1..=config.vocab {
            acc += (r as f64).powf(-config.exponent);
            cdf.push(acc);
        }
        for c in &mut cdf {
            *c /= acc;
        }
        Ok(Self { cdf })
    }

    pub fn vocab(&self) -> u64 {
        self.cdf.len() as u64
    }

    /// Analytic `P(rank ≤ r)`.
    pub fn cdf(&self, rank: u64) -> f64 {
        match rank {
            0 => 0.0,
            r if r >= self.vocab() => 1.0,
            r => self.cdf[r as usize - 1],
        }
    }

    pub fn probability(&self, rank: u64) -> f64 {
        self.cdf(rank) - self.cdf(rank.saturating_sub(1))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.random();
        self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1) as u64 + 1
    }
}

/// One draw; builds the table each call, so prefer [`ZipfSampler`] in loops.
pub fn zipf_sample<R: Rng + ?Sized>(config: ZipfConfig, rng: &mut R) -> Result<u64> {
    Ok(ZipfSampler::new(config)?.sample(rng))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtrDatasetConfig {
    pub num_samples: usize,
    pub dense_dim: usize,
    pub ids_per_sample: usize,
    #[serde(default)]
    pub zipf: ZipfConfig,
    pub teacher_seed: u64,
    #[serde(default)]
    pub label_noise: f64,
}

impl CtrDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::Argument(format!(
                "label noise must lie in [0, 0.5), got {}",
                self.label_noise
            )));
        }
        if self.num_samples == 0 || self.dense_dim == 0 || self.ids_per_sample == 0 {
            return Err(Error::Argument(
                "num_samples, dense_dim and ids_per_sample must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A mini-batch. Labels are stored as reals so soft targets are expressible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub index: usize,
    pub dense: Vec<Vec<f64>>,
    pub ids: Vec<Vec<FeatureId>>,
    pub labels: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Hidden logistic teacher: dense weights plus a per-ID bias, mean-pooled
/// over the sample's IDs exactly like the student model.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub dense: Vec<f64>,
    pub id_bias: Vec<f64>,
}

impl Teacher {
    pub fn new(config: &CtrDatasetConfig) -> Self {
        let mut rng = seed::rng(config.teacher_seed, &[seed::TAG_TEACHER]);
        let dense = (0..config.dense_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let id_bias = (0..config.zipf.vocab)
            .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { dense, id_bias }
    }

    pub fn score(&self, dense: &[f64], ids: &[FeatureId]) -> f64 {
        let linear: f64 = self.dense.iter().zip(dense).map(|(w, x)| w * x).sum();
        let pooled: f64 = ids.iter().map(|&id| self.id_bias[id as usize]).sum();
        linear + pooled / ids.len() as f64
    }
}

/// Fully materialized sample set; batches are cut per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct CtrDataset {
    pub config: CtrDatasetConfig,
    pub seed: u64,
    pub dense: Vec<Vec<f64>>,
    pub ids: Vec<Vec<FeatureId>>,
    pub labels: Vec<f64>,
}

impl CtrDataset {
    /// Deterministic in `(config, seed)`. IDs are `rank − 1`, so every ID is
    /// below the vocabulary size.
    pub fn generate(config: &CtrDatasetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let teacher = Teacher::new(config);
        let zipf = ZipfSampler::new(config.zipf)?;
        let mut rng = seed::rng(seed, &[seed::TAG_SAMPLE, config.teacher_seed]);
        let n = config.num_samples;
        let mut dense = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let x: Vec<f64> = (0..config.dense_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let sample_ids: Vec<FeatureId> = (0..config.ids_per_sample)
                .map(|_| zipf.sample(&mut rng) - 1)
                .collect();
            let mut positive = teacher.score(&x, &sample_ids) > 0.0;
            if rng.random::<f64>() < config.label_noise {
                positive = !positive;
            }
            dense.push(x);
            ids.push(sample_ids);
            labels.push(if positive { 1.0 } else { 0.0 });
        }
        Ok(Self {
            config: config.clone(),
            seed,
            dense,
            ids,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Contiguous sub-range, used to cut "days" out of one generated pool.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::Argument(format!(
                "slice {start}..{} exceeds {} samples",
                start + len,
                self.len()
            )));
        }
        let mut config = self.config.clone();
        config.num_samples = len;
        Ok(Self {
            config,
            seed: seed::derive(self.seed, &[start as u64]),
            dense: self.dense[start..start + len].to_vec(),
            ids: self.ids[start..start + len].to_vec(),
            labels: self.labels[start..start + len].to_vec(),
        })
    }

    /// Sample order for `epoch`: a Fisher-Yates shuffle keyed by a per-epoch
    /// seed derived from the dataset seed.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = seed::rng(self.seed, &[seed::TAG_SHUFFLE, epoch]);
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        order
    }

    pub fn num_batches(&self, batch_size: usize) -> Result<usize> {
        if batch_size == 0 || !self.len().is_multiple_of(batch_size) {
            return Err(Error::Argument(format!(
                "{} samples are not divisible into batches of {batch_size}",
                self.len()
            )));
        }
        Ok(self.len() / batch_size)
    }

    pub fn batch(&self, order: &[usize], batch_size: usize, index: usize) -> Batch {
        let rows = &order[index * batch_size..(index + 1) * batch_size];
        Batch {
            index,
            dense: rows.iter().map(|&r| self.dense[r].clone()).collect(),
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    pub fn batches(&self, batch_size: usize, epoch: u64) -> Result<Vec<Batch>> {
        let q = self.num_batches(batch_size)?;
        let order = self.epoch_order(epoch);
        Ok((0..q).map(|i| self.batch(&order, batch_size, i)).collect())
    }

    pub fn as_batch(&self) -> Batch {
        Batch {
            index: 0,
            dense: self.dense.clone(),
            ids: self.ids.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Line format: `label,dense_0,…,dense_{d-1},id;id;…`, preceded by one
    /// `#` header line naming the columns.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "# label")?;
        for j in 0..self.config.dense_dim {
            write!(out, ",dense_{j}")?;
        }
        writeln!(out, ",ids")?;
        for i in 0..self.len() {
            write!(out, "{}", self.labels[i] as u8)?;
            for x in &self.dense[i] {
                write!(out, ",{x:?}")?;
            }
            let ids: Vec<String> = self.ids[i].iter().map(u64::to_string).collect();
            writeln!(out, ",{}", ids.join(";"))?;
        }
        Ok(())
    }
}

/// Parses the format written by [`CtrDataset::write_text`] into one batch.
pub fn read_ctr_text<R: BufRead>(input: R) -> Result<Batch> {
    let mut batch = Batch {
        index: 0,
        dense: Vec::new(),
        ids: Vec::new(),
        labels: Vec::new(),
    };
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Argument(format!("line {}: {what}", lineno + 1));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(bad("too few fields"));
        }
        let label: f64 = fields[0].parse().map_err(|_| bad("bad label"))?;
        let dense = fields[1..fields.len() - 1]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad("bad dense value")))
            .collect::<Result<Vec<_>>>()?;
        let ids = fields[fields.len() - 1]
            .split(';')
            .map(|f| f.parse::<u64>().map_err(|_| bad("bad id")))
            .collect::<Result<Vec<_>>>()?;
        batch.labels.push(label);
        batch.dense.push(dense);
        batch.ids.push(ids);
    }
    Ok(batch)
}

pub fn gen_ctr_dataset(config: &CtrDatasetConfig, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    CtrDataset::generate(config, seed)?.batches(batch_size, 0)
}

/// Number of batches (not samples) in which each ID occurs.
pub fn id_histogram(batches: &[Batch]) -> BTreeMap<FeatureId, u64> {
    let mut hist = BTreeMap::new();
    for batch in batches {
        let mut seen: Vec<FeatureId> = batch.ids.iter().flatten().copied().collect();
        seen.sort_unstable();
        seen.dedup();
        for id in seen {
            *hist.entry(id).or_insert(0) += 1;
        }
    }
    hist
}

/// Histogram sorted by decreasing count (ties by ID), ready for a
/// rank-frequency plot.
pub fn rank_frequency(hist: &BTreeMap<FeatureId, u64>) -> Vec<(FeatureId, u64)> {
    let mut rows: Vec<_> = hist.iter().map(|(&id, &n)| (id, n)).collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    rows
}

/// Descriptor for one quadratic batch: the noise is drawn at compute time
/// from `sub_seed`, so any worker computing it at the same parameters gets
/// the same gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadBatch {
    pub index: usize,
    pub sub_seed: u64,
}

pub fn quad_batch(seed: u64, epoch: u64, index: usize) -> QuadBatch {
    QuadBatch {
        index,
        sub_seed: seed::derive(seed, &[seed::TAG_BATCH, epoch, index as u64]),
    }
}

pub fn quad_stream(seed: u64, q: usize) -> Vec<QuadBatch> {
    (0..q).map(|i| quad_batch(seed, 0, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::model::{self, DenseVector, LogisticEmbeddingModel, ModelParams, NoiseModel, QuadraticProblem};

    #[test]
    fn zipf_single_id() {
        let mut rng = seed::rng(1, &[]);
        let cfg = ZipfConfig {
            exponent: 1.2,
            vocab: 1,
        };
        for _ in 0..100 {
            assert_eq!(zipf_sample(cfg, &mut rng).unwrap(), 1);
        }
        assert!(zipf_sample(ZipfConfig { exponent: 1.0, vocab: 0 }, &mut rng).is_err());
    }

    #[test]
    fn zipf_uniform_passes_chi_square() {
        let v = 10u64;
        let sampler = ZipfSampler::new(ZipfConfig {
            exponent: 0.0,
            vocab: v,
        })
        .unwrap();
        let n = 100_000;
        let mut counts = vec![0u64; v as usize];
        let mut rng = seed::rng(2, &[]);
        for _ in 0..n {
            counts[sampler.sample(&mut rng) as usize - 1] += 1;
        }
        let expected = n as f64 / v as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 99th percentile of chi-square with 9 degrees of freedom
        assert!(chi2 < 21.666, "chi2 = {chi2}");
    }

    #[test]
    fn zipf_rank_frequency_slope() {
        let sampler = ZipfSampler::new(ZipfConfig {
            exponent: 1.2,
            vocab: 10_000,
        })
        .unwrap();
        let mut counts = vec![0u64; 10_000];
        let mut rng = seed::rng(3, &[]);
        for _ in 0..1_000_000 {
            counts[sampler.sample(&mut rng) as usize - 1] += 1;
        }
        let pts: Vec<(f64, f64)> = (1..=1000)
            .filter(|&r| counts[r - 1] > 0)
            .map(|r| ((r as f64).ln(), (counts[r - 1] as f64).ln()))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = sxy / sxx;
        assert!((slope + 1.2).abs() <= 0.1, "slope {slope}");
    }

    #[test]
    fn zipf_cdf_within_dkw_band() {
        let sampler = ZipfSampler::new(ZipfConfig {
            exponent: 1.2,
            vocab: 500,
        })
        .unwrap();
        let n = 100_000;
        let mut counts = vec![0u64; 500];
        let mut rng = seed::rng(4, &[]);
        for _ in 0..n {
            counts[sampler.sample(&mut rng) as usize - 1] += 1;
        }
        let eps = ((2.0f64 / 0.01).ln() / (2.0 * n as f64)).sqrt();
        let mut acc = 0u64;
        for r in 1..=500u64 {
            acc += counts[r as usize - 1];
            let emp = acc as f64 / n as f64;
            assert!((emp - sampler.cdf(r)).abs() <= eps, "rank {r}");
        }
    }

    fn ctr_config(noise: f64) -> CtrDatasetConfig {
        CtrDatasetConfig {
            num_samples: 4000,
            dense_dim: 4,
            ids_per_sample: 3,
            zipf: ZipfConfig {
                exponent: 1.2,
                vocab: 500,
            },
            teacher_seed: 9,
            label_noise: noise,
        }
    }

    #[test]
    fn ctr_generation_is_deterministic() {
        let a = gen_ctr_dataset(&ctr_config(0.1), 50, 17).unwrap();
        let b = gen_ctr_dataset(&ctr_config(0.1), 50, 17).unwrap();
        assert_eq!(a, b);
        let c = gen_ctr_dataset(&ctr_config(0.1), 50, 18).unwrap();
        assert_ne!(a, c);
        assert!(a.iter().flat_map(|b| b.ids.iter().flatten()).all(|&id| id < 500));
    }

    #[test]
    fn ctr_rejects_bad_configs() {
        for noise in [0.5, 0.75, -0.1] {
            assert!(CtrDataset::generate(&ctr_config(noise), 1).is_err());
        }
        assert!(gen_ctr_dataset(&ctr_config(0.0), 3000, 1).is_err());
    }

    #[test]
    fn epochs_reshuffle_deterministically() {
        let ds = CtrDataset::generate(&ctr_config(0.0), 5).unwrap();
        assert_ne!(ds.epoch_order(0), ds.epoch_order(1));
        assert_eq!(ds.epoch_order(3), ds.epoch_order(3));
    }

    #[test]
    fn noiseless_teacher_is_learnable() {
        let cfg = CtrDatasetConfig {
            num_samples: 8000,
            ..ctr_config(0.0)
        };
        let train = CtrDataset::generate(&cfg, 1).unwrap();
        let test = CtrDataset::generate(&CtrDatasetConfig { num_samples: 2000, ..cfg.clone() }, 2).unwrap();
        let m = LogisticEmbeddingModel {
            dense_dim: cfg.dense_dim,
            embed_dim: 2,
            vocab: cfg.zipf.vocab,
        };
        let mut params = m.init_params();
        for epoch in 0..20 {
            for b in train.batches(100, epoch).unwrap() {
                let g = model::logistic_grad(&m, &params, &b).unwrap();
                model::apply_update(&mut params, &g, 1.0).unwrap();
            }
        }
        let scores: Vec<f64> = (0..test.len())
            .map(|i| m.score(&params, &test.dense[i], &test.ids[i]))
            .collect();
        let labels: Vec<bool> = test.labels.iter().map(|&l| l > 0.5).collect();
        let auc = model::auc(&scores, &labels).unwrap();
        assert!(auc > 0.95, "auc {auc}");
    }

    #[test]
    fn text_export_round_trips() {
        let ds = CtrDataset::generate(&CtrDatasetConfig { num_samples: 20, ..ctr_config(0.0) }, 3).unwrap();
        let mut buf = Vec::new();
        ds.write_text(&mut buf).unwrap();
        let back = read_ctr_text(buf.as_slice()).unwrap();
        assert_eq!(back.dense, ds.dense);
        assert_eq!(back.ids, ds.ids);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn histogram_counts_batches_not_samples() {
        assert!(id_histogram(&[]).is_empty());
        let b = Batch {
            index: 0,
            dense: vec![vec![0.0]; 2],
            ids: vec![vec![3, 3], vec![7]],
            labels: vec![0.0, 1.0],
        };
        let h = id_histogram(&[b]);
        assert_eq!(h, BTreeMap::from([(3, 1), (7, 1)]));
    }

    #[test]
    fn zipf_ids_are_mostly_rare() {
        let batches = gen_ctr_dataset(
            &CtrDatasetConfig {
                num_samples: 20_000,
                ids_per_sample: 4,
                zipf: ZipfConfig {
                    exponent: 1.2,
                    vocab: 10_000,
                },
                ..ctr_config(0.0)
            },
            100,
            6,
        )
        .unwrap();
        let h = id_histogram(&batches);
        let q = batches.len() as f64;
        let rare = h.values().filter(|&&n| n as f64 <= 0.01 * q).count();
        let common = h.values().filter(|&&n| n as f64 >= 0.10 * q).count();
        assert!(rare > common, "rare {rare} common {common}");
        let ranked = rank_frequency(&h);
        assert!(ranked.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn quad_stream_descriptors() {
        let s = quad_stream(3, 5);
        assert_eq!(s.iter().map(|b| b.index).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        let mut seeds: Vec<u64> = s.iter().map(|b| b.sub_seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 5);
    }

    #[test]
    fn same_descriptor_same_gradient() {
        let p = QuadraticProblem::spaced(4, 0.5, 1.0, 1, NoiseModel { sigma: 1.0, theta: 0.2, batch_size: 8 }).unwrap();
        let params = ModelParams::new(DenseVector::new(vec![1.0, 2.0, 3.0, 4.0]).unwrap(), 1);
        let d = quad_stream(42, 3)[2];
        let g1 = model::quad_stochastic_grad(&params, &p, &mut seed::rng(d.sub_seed, &[])).unwrap();
        let g2 = model::quad_stochastic_grad(&params, &p, &mut seed::rng(d.sub_seed, &[])).unwrap();
        assert_eq!(g1, g2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn generation_is_a_function_of_config_and_seed(seed in 0u64..10_000, vocab in 1u64..300, ids in 1usize..5) {
            let cfg = CtrDatasetConfig {
                num_samples: 60,
                dense_dim: 2,
                ids_per_sample: ids,
                zipf: ZipfConfig { exponent: 1.2, vocab },
                teacher_seed: 4,
                label_noise: 0.1,
            };
            let a = CtrDataset::generate(&cfg, seed).unwrap();
            prop_assert_eq!(&a, &CtrDataset::generate(&cfg, seed).unwrap());
            let batch = a.as_batch();
            prop_assert!(batch.ids.iter().all(|row| row.len() == ids && row.iter().all(|&id| id < vocab)));
            prop_assert!(batch.labels.iter().all(|&l| l == 0.0 || l == 1.0));
            let mut order = a.epoch_order(seed % 3);
            order.sort_unstable();
            prop_assert_eq!(order, (0..60).collect::<Vec<_>>());
        }

        #[test]
        fn zipf_cdf_is_monotone_and_complete(exponent in 0.0f64..3.0, vocab in 1u64..500) {
            let z = ZipfSampler::new(ZipfConfig { exponent, vocab }).unwrap();
            prop_assert!((z.cdf(vocab) - 1.0).abs() < 1e-9);
            let h: f64 = (1..=vocab).map(|r| (r as f64).powf(-exponent)).sum();
            let mut prev = 0.0;
            for r in 1..=vocab {
                let c = z.cdf(r);
                prop_assert!(c >= prev);
                prop_assert!((z.probability(r) - (r as f64).powf(-exponent) / h).abs() < 1e-9);
                prev = c;
            }
        }
    }
}
