use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::stats::ks_distance;
use crate::datagen::{id_histogram, rank_frequency, CtrDataset};
use crate::error::{Error, Result};
use crate::model::FeatureId;
use crate::sim::{qps_metrics, QpsMetrics, Record, Trace};

/// Applied-aggregate norms per trace and their pairwise KS distances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradNormReport {
    pub labels: Vec<String>,
    pub samples: Vec<Vec<f64>>,
    pub ks: Vec<Vec<f64>>,
}

pub fn grad_norm_dist(traces: &[(String, &Trace)]) -> Result<GradNormReport> {
    let samples = traces
        .iter()
        .map(|(label, t)| {
            t.norms().map_err(|e| match e {
                Error::LoggingNotEnabled(what) => Error::LoggingNotEnabled(format!("{what} in trace {label}")),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut ks = vec![vec![0.0; samples.len()]; samples.len()];
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let d = ks_distance(&samples[i], &samples[j])?;
            ks[i][j] = d;
            ks[j][i] = d;
        }
    }
    Ok(GradNormReport {
        labels: traces.iter().map(|(l, _)| l.clone()).collect(),
        samples,
        ks,
    })
}

impl GradNormReport {
    /// `label,index,norm` rows.
    pub fn write_samples_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "label,index,norm")?;
        for (label, s) in self.labels.iter().zip(&self.samples) {
            for (i, x) in s.iter().enumerate() {
                writeln!(out, "{label},{i},{x}")?;
            }
        }
        Ok(())
    }

    /// Square matrix with labels on both axes.
    pub fn write_ks_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "label,{}", self.labels.join(","))?;
        for (label, row) in self.labels.iter().zip(&self.ks) {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(out, "{label},{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// `(rank, id, batches containing the id)` over one epoch of batches of
/// `batch_size`, most frequent first.
pub fn id_rank_frequency(dataset: &CtrDataset, batch_size: usize) -> Result<Vec<(usize, FeatureId, u64)>> {
    Ok(rank_frequency(&id_histogram(&dataset.batches(batch_size, 0)?))
        .into_iter()
        .enumerate()
        .map(|(r, (id, n))| (r + 1, id, n))
        .collect())
}

pub fn write_id_histogram_csv<W: Write>(rows: &[(usize, FeatureId, u64)], mut out: W) -> Result<()> {
    writeln!(out, "rank,id,count")?;
    for (r, id, n) in rows {
        writeln!(out, "{r},{id},{n}")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StalenessReport {
    pub metrics: QpsMetrics,
    /// Aggregated entries per data staleness; arrivals dropped before
    /// aggregation are counted separately.
    pub histogram: BTreeMap<u64, u64>,
    pub dropped_on_arrival: BTreeMap<u64, u64>,
}

pub fn staleness(trace: &Trace) -> Result<StalenessReport> {
    let mut histogram = BTreeMap::new();
    let mut dropped_on_arrival = BTreeMap::new();
    for r in &trace.records {
        match *r {
            Record::Entry { staleness, .. } => *histogram.entry(staleness).or_insert(0) += 1,
            Record::Drop { staleness, .. } => *dropped_on_arrival.entry(staleness).or_insert(0) += 1,
            _ => {}
        }
    }
    Ok(StalenessReport {
        metrics: qps_metrics(trace)?,
        histogram,
        dropped_on_arrival,
    })
}

impl StalenessReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "staleness,aggregated,dropped_on_arrival")?;
        let keys: std::collections::BTreeSet<u64> =
            self.histogram.keys().chain(self.dropped_on_arrival.keys()).copied().collect();
        for k in keys {
            writeln!(
                out,
                "{k},{},{}",
                self.histogram.get(&k).copied().unwrap_or(0),
                self.dropped_on_arrival.get(&k).copied().unwrap_or(0)
            )?;
        }
        Ok(())
    }
}
