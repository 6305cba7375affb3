//! Experiment driver: configuration, checkpoints, training runs, switch
//! studies, analyses and bound reports. The CLI is a thin layer over this.

mod analyze;
mod bounds_report;
mod checkpoint;
mod config;
mod stats;
mod switch;
mod train;

use std::io::Write;
use std::path::{Path, PathBuf};

pub use analyze::{
    grad_norm_dist, id_rank_frequency, staleness, write_id_histogram_csv, GradNormReport, StalenessReport,
};
pub use bounds_report::{cmd_bounds, constants, measure, BoundsReport, Constants, EnvelopeVerdict, Measured};
pub use checkpoint::{Checkpoint, Header, ENCODING, FORMAT, VERSION};
pub use config::{
    ClusterSection, DataSection, ExperimentConfig, ModelSection, OutputSection, RunSection, SwitchSection,
};
pub use stats::{ks_distance, mean, median, stderr};
pub use switch::{
    cmd_switch_study, switch_study_seed, write_days_csv, write_summary_csv, DayResult, Deltas, Series,
    SwitchReport, DAYS_HEADER, SUMMARY_HEADER,
};
pub use train::{
    cmd_train, resolve_mode, train, write_metrics_csv, write_outputs, DataSource, OutputPaths, RunOutput, Start,
    TrainSpec, METRICS_HEADER,
};

use crate::datagen::quad_stream;
use crate::error::Result;
use crate::sim::{qps_metrics, Record, Trace};

/// Materializes the configured data: one text file per CTR day, or the
/// quadratic noise-descriptor stream of each seed's first epoch.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    match DataSource::from_config(cfg)? {
        DataSource::Ctr { dataset, days, .. } => {
            let len = dataset.len() / days;
            for d in 0..days {
                let path = out.join(format!("day{d}.txt"));
                let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
                dataset.slice(d * len, len)?.write_text(&mut f)?;
                f.flush()?;
                written.push(path);
            }
        }
        DataSource::Quadratic { batches_per_epoch, .. } => {
            for &seed in &cfg.run.seeds {
                let path = out.join(format!("stream-seed{seed}.csv"));
                let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
                writeln!(f, "index,sub_seed")?;
                for b in quad_stream(seed, batches_per_epoch) {
                    writeln!(f, "{},{}", b.index, b.sub_seed)?;
                }
                f.flush()?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ReportRow {
    pub file: String,
    pub mode: String,
    pub steps: u64,
    pub sim_time: f64,
    pub global_qps: f64,
    pub mean_staleness: f64,
    pub max_staleness: u64,
    pub dropped: u64,
    pub final_loss: Option<f64>,
    pub final_auc: Option<f64>,
}

/// Summarizes every `*.trace.jsonl` file in `dir`, sorted by file name.
pub fn cmd_report(dir: &Path) -> Result<Vec<ReportRow>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".trace.jsonl"))
        .collect();
    files.sort();
    let mut rows = Vec::new();
    for path in files {
        let trace = Trace::read_jsonl(std::io::BufReader::new(std::fs::File::open(&path)?))?;
        let m = qps_metrics(&trace)?;
        let last_eval = trace.records.iter().rev().find_map(|r| match *r {
            Record::Eval { loss, auc, .. } => Some((loss, auc)),
            _ => None,
        });
        rows.push(ReportRow {
            file: path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
            mode: trace.mode.clone(),
            steps: m.steps,
            sim_time: trace.summary.end_time - trace.summary.start_time,
            global_qps: m.global_qps,
            mean_staleness: m.mean_staleness,
            max_staleness: m.max_staleness,
            dropped: m.dropped,
            final_loss: last_eval.map(|e| e.0),
            final_auc: last_eval.and_then(|e| e.1),
        });
    }
    Ok(rows)
}

pub fn write_report_csv<W: Write>(rows: &[ReportRow], mut out: W) -> Result<()> {
    writeln!(
        out,
        "file,mode,steps,sim_time,global_qps,mean_staleness,max_staleness,dropped,final_loss,final_auc"
    )?;
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.file,
            r.mode,
            r.steps,
            r.sim_time,
            r.global_qps,
            r.mean_staleness,
            r.max_staleness,
            r.dropped,
            opt(r.final_loss),
            opt(r.final_auc)
        )?;
    }
    Ok(())
}
