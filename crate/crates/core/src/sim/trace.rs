use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DenseVector, ModelParams};
use crate::ps::{AggregationReport, Counters, EntryReport, Token};

/// One line of the trace stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Record {
    Pull {
        t: f64,
        worker: usize,
        token: u64,
        pull_step: u64,
        epoch: u64,
        batch: usize,
    },
    /// A gradient reached the server.
    Push {
        t: f64,
        worker: usize,
        token: u64,
        pull_step: u64,
    },
    /// A gradient discarded on arrival.
    Drop {
        t: f64,
        worker: usize,
        token: u64,
        pull_step: u64,
        apply_step: u64,
        staleness: u64,
    },
    /// A buffered gradient consumed by an aggregation.
    Entry {
        t: f64,
        worker: usize,
        token: u64,
        pull_step: u64,
        apply_step: u64,
        staleness: u64,
        kept: bool,
        ids_touched: u32,
        ids_stale: u32,
    },
    Apply {
        t: f64,
        apply_step: u64,
        surviving: usize,
        dropped: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        norm: Option<f64>,
    },
    Fail {
        t: f64,
        worker: usize,
        /// Whether an in-progress iteration was lost.
        abandoned: bool,
    },
    Recover {
        t: f64,
        worker: usize,
    },
    Eval {
        t: f64,
        step: u64,
        loss: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        auc: Option<f64>,
    },
    /// Dense parameters after an applied step; only with parameter recording.
    Params {
        t: f64,
        step: u64,
        dense: DenseVector,
    },
    Summary(Summary),
}

impl Record {
    pub fn time(&self) -> f64 {
        match self {
            Record::Pull { t, .. }
            | Record::Push { t, .. }
            | Record::Drop { t, .. }
            | Record::Entry { t, .. }
            | Record::Apply { t, .. }
            | Record::Fail { t, .. }
            | Record::Recover { t, .. }
            | Record::Eval { t, .. }
            | Record::Params { t, .. } => *t,
            Record::Summary(s) => s.end_time,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: String,
    pub start_time: f64,
    pub end_time: f64,
    pub first_step: u64,
    pub last_step: u64,
    pub local_batch: usize,
    pub global_qps: f64,
    pub local_qps: Vec<f64>,
    pub counters: Counters,
    pub stop: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub t: f64,
    pub loss: f64,
    pub auc: Option<f64>,
}

/// Everything a run produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub mode: String,
    pub workers: usize,
    pub local_batch: usize,
    pub records: Vec<Record>,
    pub reports: Vec<AggregationReport>,
    pub evals: Vec<EvalPoint>,
    /// Dense parameters after each applied step, starting with the state the
    /// run began from; empty unless parameter recording was enabled.
    pub param_history: Vec<DenseVector>,
    pub final_params: ModelParams,
    pub summary: Summary,
    pub norms_logged: bool,
}

impl Trace {
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut out, &Record::Summary(self.summary.clone()))?;
        out.write_all(b"\n")?;
        Ok(())
    }

    /// Rebuilds a trace from its record stream. Final parameters are known
    /// only when parameters were recorded, and then only the dense part.
    pub fn from_records(records: Vec<Record>, summary: Summary) -> Result<Self> {
        let reports = reports_from_records(&records);
        let norms_logged = records
            .iter()
            .any(|r| matches!(r, Record::Apply { norm: Some(_), .. }))
            || reports.is_empty();
        let mut evals = Vec::new();
        let mut param_history = Vec::new();
        for r in &records {
            match r {
                Record::Eval { t, step, loss, auc } => evals.push(EvalPoint {
                    step: *step,
                    t: *t,
                    loss: *loss,
                    auc: *auc,
                }),
                Record::Params { dense, .. } => param_history.push(dense.clone()),
                _ => {}
            }
        }
        let final_params = ModelParams {
            dense: param_history.last().cloned().unwrap_or_else(|| DenseVector::zeros(0)),
            embeddings: crate::model::EmbeddingTable::new(0),
            global_step: summary.last_step,
        };
        Ok(Self {
            mode: summary.mode.clone(),
            workers: summary.local_qps.len(),
            local_batch: summary.local_batch,
            records,
            reports,
            evals,
            param_history,
            final_params,
            summary,
            norms_logged,
        })
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let (records, summary) = read_jsonl(input)?;
        Self::from_records(records, summary)
    }

    /// Applied-aggregate norms; requires norm logging.
    pub fn norms(&self) -> Result<Vec<f64>> {
        if !self.norms_logged {
            return Err(Error::LoggingNotEnabled("aggregate norms".into()));
        }
        Ok(self.reports.iter().map(|r| r.norm).collect())
    }
}

/// Parses a trace stream; the summary record must come last.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<(Vec<Record>, Summary)> {
    let mut records = Vec::new();
    let mut summary = None;
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if summary.is_some() {
            return Err(Error::Config(format!("line {}: record after summary", n + 1)));
        }
        match serde_json::from_str::<Record>(&line)
            .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?
        {
            Record::Summary(s) => summary = Some(s),
            r => records.push(r),
        }
    }
    let summary = summary.ok_or_else(|| Error::Config("trace has no summary record".into()))?;
    Ok((records, summary))
}

/// Rebuilds aggregation reports from `entry`/`apply` records. Norms are
/// NaN where they were not logged.
pub fn reports_from_records(records: &[Record]) -> Vec<AggregationReport> {
    let mut out = Vec::new();
    let mut pending = Vec::new();
    for r in records {
        match *r {
            Record::Entry {
                worker,
                token,
                pull_step,
                staleness,
                kept,
                ids_touched,
                ids_stale,
                ..
            } => pending.push(EntryReport {
                worker,
                token: Token(token),
                pull_step,
                staleness,
                kept,
                ids_touched,
                ids_stale,
            }),
            Record::Apply {
                apply_step,
                surviving,
                dropped,
                norm,
                ..
            } => out.push(AggregationReport {
                step: apply_step,
                surviving,
                dropped,
                entries: std::mem::take(&mut pending),
                norm: norm.unwrap_or(f64::NAN),
            }),
            _ => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_wire_format() {
        let r = Record::Push {
            t: 1.5,
            worker: 2,
            token: 3,
            pull_step: 3,
        };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, r#"{"kind":"push","t":1.5,"worker":2,"token":3,"pull_step":3}"#);
        assert_eq!(serde_json::from_str::<Record>(&s).unwrap(), r);
        let a = Record::Apply {
            t: 0.0,
            apply_step: 0,
            surviving: 1,
            dropped: 0,
            norm: None,
        };
        assert!(!serde_json::to_string(&a).unwrap().contains("norm"));
    }

    #[test]
    fn missing_summary_is_an_error() {
        let text = r#"{"kind":"recover","t":1.0,"worker":0}"#;
        assert!(read_jsonl(text.as_bytes()).is_err());
    }
}
