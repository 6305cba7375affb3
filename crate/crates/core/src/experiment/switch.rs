//! Mid-training switch study: a base mode trains for some days, then the
//! base and each target mode continue from the same checkpoint day by day,
//! each day evaluated on the following one.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::stats::mean;
use super::train::{resolve_mode, train, write_metrics_csv, DataSource, RunOutput, Start, TrainSpec};
use crate::error::{Error, Result};
use crate::modes::ModeConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayResult {
    pub day: usize,
    pub steps: u64,
    pub loss: f64,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub mode: ModeConfig,
    pub eta: f64,
    pub days: Vec<DayResult>,
}

/// Target minus continued base, per day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub label: String,
    pub loss: Vec<f64>,
    pub auc: Option<Vec<f64>>,
}

impl Deltas {
    pub fn first_loss(&self) -> f64 {
        self.loss[0]
    }

    pub fn last_loss(&self) -> f64 {
        self.loss[self.loss.len() - 1]
    }

    pub fn average_loss(&self) -> f64 {
        mean(&self.loss)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchReport {
    pub seed: u64,
    pub base_step: u64,
    pub base: Series,
    pub targets: Vec<Series>,
    pub deltas: Vec<Deltas>,
}

fn labels(targets: &[ModeConfig]) -> Vec<String> {
    targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let dup = targets.iter().filter(|u| u.name() == t.name()).count() > 1;
            if dup {
                format!("{}.{i}", t.name())
            } else {
                t.name().to_string()
            }
        })
        .collect()
}

struct Study<'a> {
    cfg: &'a ExperimentConfig,
    source: &'a DataSource,
    seed: u64,
    out: Option<&'a Path>,
}

impl Study<'_> {
    fn day(&self, mode: ModeConfig, eta: f64, day: usize, start: Start<'_>, label: &str) -> Result<RunOutput> {
        let mode = resolve_mode(mode, start)?;
        let spec = TrainSpec {
            mode,
            eta,
            day,
            steps: self.cfg.run.steps,
            epochs: Some(self.cfg.run.epochs.unwrap_or(1)),
            profiles: self.cfg.cluster.profiles(mode.workers()?)?,
            sim: self.cfg.sim_config(),
            seed: self.seed,
            start,
        };
        let run = train(self.source, spec)?;
        if let Some(dir) = self.out {
            let path = dir.join(format!("{label}-seed{}-day{day}.metrics.csv", self.seed));
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            write_metrics_csv(&run.trace, &mut f)?;
            f.flush()?;
        }
        Ok(run)
    }

    fn series(&self, label: &str, mode: ModeConfig, eta: f64, from: &Checkpoint, days: &[usize]) -> Result<Series> {
        let mut ckpt = from.clone();
        let mut out = Vec::new();
        for &d in days {
            let run = self.day(mode, eta, d, Start::From(&ckpt), label)?;
            out.push(DayResult {
                day: d,
                steps: run.trace.summary.last_step - run.trace.summary.first_step,
                loss: run.final_eval.loss,
                auc: run.final_eval.auc,
            });
            ckpt = run.checkpoint;
        }
        Ok(Series {
            label: label.to_string(),
            mode: resolve_mode(mode, Start::From(from))?,
            eta,
            days: out,
        })
    }
}

/// Runs the study for one seed; per-day metrics files go to `out` if given.
pub fn switch_study_seed(
    cfg: &ExperimentConfig,
    source: &DataSource,
    seed: u64,
    out: Option<&Path>,
) -> Result<SwitchReport> {
    let sw = cfg
        .switch
        .as_ref()
        .ok_or_else(|| Error::Config("switch-study needs a [switch] section".into()))?;
    let total = source.days().unwrap_or(usize::MAX);
    let eval_days = total.saturating_sub(1);
    if sw.base_days == 0 || sw.base_days >= eval_days {
        return Err(Error::Config(format!(
            "switch.base_days = {} leaves no study day among {total}",
            sw.base_days
        )));
    }
    let n = sw.days.unwrap_or(eval_days - sw.base_days);
    if n == 0 || sw.base_days + n > eval_days {
        return Err(Error::Config(format!("switch.days = {n} does not fit {total} data days")));
    }
    let study = Study { cfg, source, seed, out };

    let base_mode = resolve_mode(cfg.mode, Start::Fresh)?;
    let mut run = study.day(base_mode, cfg.run.eta, 0, Start::Fresh, "base")?;
    for d in 1..sw.base_days {
        run = study.day(base_mode, cfg.run.eta, d, Start::From(&run.checkpoint), "base")?;
    }
    let base_ckpt = run.checkpoint;
    if let Some(dir) = out {
        base_ckpt.save(&dir.join(format!("base-seed{seed}.ckpt")))?;
    }

    let days: Vec<usize> = (sw.base_days..sw.base_days + n).collect();
    let base = study.series("continued-base", base_mode, cfg.run.eta, &base_ckpt, &days)?;
    let mut targets = Vec::new();
    let mut deltas = Vec::new();
    for (i, (mode, label)) in sw.targets.iter().zip(labels(&sw.targets)).enumerate() {
        let eta = sw.eta.as_ref().map_or(cfg.run.eta, |e| e[i]);
        let s = study.series(&label, *mode, eta, &base_ckpt, &days)?;
        let loss = s.days.iter().zip(&base.days).map(|(t, b)| t.loss - b.loss).collect();
        let auc = s
            .days
            .iter()
            .zip(&base.days)
            .map(|(t, b)| Some(t.auc? - b.auc?))
            .collect::<Option<Vec<f64>>>();
        deltas.push(Deltas { label, loss, auc });
        targets.push(s);
    }
    Ok(SwitchReport {
        seed,
        base_step: base_ckpt.global_step(),
        base,
        targets,
        deltas,
    })
}

pub const DAYS_HEADER: &str = "seed,label,day,steps,loss,auc,delta_loss,delta_auc";
pub const SUMMARY_HEADER: &str =
    "label,first_day_loss_delta,last_day_loss_delta,average_loss_delta,first_day_auc_delta,last_day_auc_delta,average_auc_delta";

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

/// Per-day losses and deltas for every seed.
pub fn write_days_csv<W: Write>(reports: &[SwitchReport], mut out: W) -> Result<()> {
    writeln!(out, "{DAYS_HEADER}")?;
    for r in reports {
        for d in &r.base.days {
            writeln!(out, "{},{},{},{},{},{},,", r.seed, r.base.label, d.day, d.steps, d.loss, opt(d.auc))?;
        }
        for (s, delta) in r.targets.iter().zip(&r.deltas) {
            for (i, d) in s.days.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    r.seed,
                    s.label,
                    d.day,
                    d.steps,
                    d.loss,
                    opt(d.auc),
                    delta.loss[i],
                    opt(delta.auc.as_ref().map(|a| a[i]))
                )?;
            }
        }
    }
    Ok(())
}

/// First-day, last-day and average deltas per target, averaged over seeds.
pub fn write_summary_csv<W: Write>(reports: &[SwitchReport], mut out: W) -> Result<()> {
    writeln!(out, "{SUMMARY_HEADER}")?;
    let Some(first) = reports.first() else {
        return Ok(());
    };
    for (i, d0) in first.deltas.iter().enumerate() {
        let col = |f: &dyn Fn(&Deltas) -> Option<f64>| -> Option<f64> {
            let v = reports.iter().map(|r| f(&r.deltas[i])).collect::<Option<Vec<f64>>>()?;
            Some(mean(&v))
        };
        let auc_at = |d: &Deltas, pick: fn(&[f64]) -> f64| d.auc.as_deref().map(pick);
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            d0.label,
            opt(col(&|d| Some(d.first_loss()))),
            opt(col(&|d| Some(d.last_loss()))),
            opt(col(&|d| Some(d.average_loss()))),
            opt(col(&|d| auc_at(d, |a| a[0]))),
            opt(col(&|d| auc_at(d, |a| a[a.len() - 1]))),
            opt(col(&|d| auc_at(d, mean))),
        )?;
    }
    Ok(())
}

/// Runs the study for every configured seed and writes `switch-days.csv`,
/// `switch-summary.csv` and `switch-report.json` into `out`.
pub fn cmd_switch_study(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SwitchReport>> {
    std::fs::create_dir_all(out)?;
    let source = DataSource::from_config(cfg)?;
    let reports = cfg
        .run
        .seeds
        .iter()
        .map(|&s| switch_study_seed(cfg, &source, s, Some(out)))
        .collect::<Result<Vec<_>>>()?;
    write_days_csv(&reports, std::fs::File::create(out.join("switch-days.csv"))?)?;
    write_summary_csv(&reports, std::fs::File::create(out.join("switch-summary.csv"))?)?;
    serde_json::to_writer_pretty(std::fs::File::create(out.join("switch-report.json"))?, &reports)?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(targets: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            r#"
[model]
kind = "logistic-ctr"
embed_dim = 2

[data]
days = 4

[data.ctr]
num_samples = 1600
dense_dim = 3
ids_per_sample = 2
teacher_seed = 5
zipf = {{ exponent = 1.2, vocab = 50 }}

[mode]
kind = "sync"
workers = 2
local_batch = 10

[run]
epochs = 1
eta = 0.5

[switch]
targets = [{targets}]
"#
        ))
        .unwrap()
    }

    #[test]
    fn self_comparison_has_zero_deltas() {
        let c = cfg(r#"{ kind = "sync", workers = 2, local_batch = 10 }"#);
        let src = DataSource::from_config(&c).unwrap();
        let r = switch_study_seed(&c, &src, 0, None).unwrap();
        assert_eq!(r.base.days.len(), 2);
        assert_eq!(r.base.days[0].steps, 20);
        assert_eq!(r.deltas[0].loss, vec![0.0, 0.0]);
        assert_eq!(r.deltas[0].auc.as_deref(), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn gba_target_inherits_global_batch_and_reports_are_consistent() {
        let c = cfg(r#"{ kind = "gba", local_batch = 5 }, { kind = "async", workers = 2, local_batch = 5 }"#);
        let dir = tempfile::tempdir().unwrap();
        let reports = cmd_switch_study(&c, dir.path()).unwrap();
        let r = &reports[0];
        assert_eq!(
            r.targets[0].mode,
            ModeConfig::Gba {
                buffer: Some(4),
                local_batch: 5,
                iota: None
            }
        );
        for (s, d) in r.targets.iter().zip(&r.deltas) {
            for (i, day) in s.days.iter().enumerate() {
                assert_eq!(d.loss[i], day.loss - r.base.days[i].loss);
            }
        }
        let days = std::fs::read_to_string(dir.path().join("switch-days.csv")).unwrap();
        assert_eq!(days.lines().count(), 1 + 3 * 2);
        let summary = std::fs::read_to_string(dir.path().join("switch-summary.csv")).unwrap();
        assert_eq!(summary.lines().nth(1).unwrap().split(',').count(), 7);
        assert!(dir.path().join("gba-seed0-day2.metrics.csv").exists());
    }
}
