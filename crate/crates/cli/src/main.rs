use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use gba_lab::experiment::{self, Checkpoint, ExperimentConfig};
use gba_lab::sim::Trace;
use gba_lab::Error;

#[derive(Parser)]
#[command(name = "gba-lab", version, about = "Global-batch gradient aggregation experiments on a simulated parameter-server cluster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the mode section, e.g. '{ kind = "gba", local_batch = 8 }'.
    #[arg(long)]
    mode_override: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset (CTR day files or quadratic noise streams).
    GenData(Common),
    /// Train every seed; writes trace, metrics and checkpoint files.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to continue from.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Train the base mode, then compare each switch target against it.
    SwitchStudy(Common),
    /// Step caps, error floors and envelope checks for a quadratic config.
    Bounds {
        #[command(flatten)]
        common: Common,
        /// Trace to measure staleness constants from.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Gradient-norm distributions, ID histograms or staleness profiles.
    Analyze {
        analysis: Analysis,
        /// Traces to analyze (grad-norm-dist, staleness).
        #[arg(long = "trace")]
        traces: Vec<PathBuf>,
        /// Configuration whose data to histogram (id-histogram).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize every trace file in a directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Analysis {
    GradNormDist,
    IdHistogram,
    Staleness,
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(
            Error::Config(_)
            | Error::Switch { .. }
            | Error::Checkpoint(_)
            | Error::Argument(_)
            | Error::LoggingNotEnabled(_),
        ) => 2,
        Some(
            Error::Invariant(_)
            | Error::Protocol(_)
            | Error::Deadlock { .. }
            | Error::NumericFault(_)
            | Error::CapViolation { .. },
        ) => 3,
        _ => 1,
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let error = e.into();
        Self {
            code: exit_code(&error),
            error,
        }
    }
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(m) = &common.mode_override {
        cfg.override_mode(m)?;
    }
    if let Some(s) = common.seed {
        cfg.run.seeds = vec![s];
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    Ok((cfg, out))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn read_trace(path: &Path) -> Result<Trace, Failure> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(Trace::read_jsonl(BufReader::new(f)).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })?)
}

fn label(path: &Path) -> String {
    let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    name.strip_suffix(".trace.jsonl").unwrap_or(&name).to_string()
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(common) => {
            let (cfg, out) = load(&common)?;
            for p in experiment::cmd_gen_data(&cfg, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Train { common, from } => {
            let (cfg, out) = load(&common)?;
            let ckpt = from.as_deref().map(Checkpoint::load).transpose()?;
            for (run, paths) in experiment::cmd_train(&cfg, ckpt.as_ref(), &out)? {
                let s = &run.trace.summary;
                println!(
                    "{} seed {}: steps {}..{} in {:.3}s simulated, global QPS {:.3}, final loss {:.6e}",
                    run.mode.name(),
                    run.seed,
                    s.first_step,
                    s.last_step,
                    s.end_time - s.start_time,
                    s.global_qps,
                    run.final_eval.loss
                );
                println!("  {}", paths.metrics.display());
                println!("  {}", paths.trace.display());
                println!("  {}", paths.checkpoint.display());
            }
        }
        Command::SwitchStudy(common) => {
            let (cfg, out) = load(&common)?;
            let reports = experiment::cmd_switch_study(&cfg, &out)?;
            experiment::write_summary_csv(&reports, std::io::stdout().lock())?;
            println!("written to {}", out.display());
        }
        Command::Bounds { common, from } => {
            let (cfg, out) = load(&common)?;
            let trace = from.as_deref().map(read_trace).transpose()?;
            let report = experiment::cmd_bounds(&cfg, trace.as_ref())?;
            print!("{report}");
            std::fs::create_dir_all(&out)?;
            serde_json::to_writer_pretty(create(&out.join("bounds.json"))?, &report)?;
            if !report.passed() {
                return Err(Failure {
                    code: 3,
                    error: anyhow::anyhow!("bound check failed"),
                });
            }
        }
        Command::Analyze {
            analysis,
            traces,
            config,
            out,
        } => {
            let out = out.unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&out)?;
            match analysis {
                Analysis::GradNormDist => {
                    if traces.is_empty() {
                        return Err(Error::Config("grad-norm-dist needs at least one --trace".into()).into());
                    }
                    let loaded = traces.iter().map(|p| read_trace(p)).collect::<Result<Vec<_>, _>>()?;
                    let named: Vec<(String, &Trace)> =
                        traces.iter().map(|p| label(p)).zip(loaded.iter()).collect();
                    let r = experiment::grad_norm_dist(&named)?;
                    r.write_samples_csv(create(&out.join("grad-norms.csv"))?)?;
                    r.write_ks_csv(create(&out.join("ks-distance.csv"))?)?;
                    r.write_ks_csv(std::io::stdout().lock())?;
                }
                Analysis::IdHistogram => {
                    let path = config.ok_or_else(|| Error::Config("id-histogram needs --config".into()))?;
                    let cfg = ExperimentConfig::load(&path)?;
                    let experiment::DataSource::Ctr { dataset, .. } = experiment::DataSource::from_config(&cfg)? else {
                        return Err(Error::Config("id-histogram needs the logistic-ctr model".into()).into());
                    };
                    let rows = experiment::id_rank_frequency(&dataset, cfg.mode.local_batch())?;
                    experiment::write_id_histogram_csv(&rows, create(&out.join("id-histogram.csv"))?)?;
                    println!("{} distinct ids; top counts {:?}", rows.len(), rows.iter().take(5).map(|r| r.2).collect::<Vec<_>>());
                }
                Analysis::Staleness => {
                    if traces.is_empty() {
                        return Err(Error::Config("staleness needs at least one --trace".into()).into());
                    }
                    for p in &traces {
                        let r = experiment::staleness(&read_trace(p)?)?;
                        r.write_csv(create(&out.join(format!("{}.staleness.csv", label(p))))?)?;
                        let m = &r.metrics;
                        println!(
                            "{}: mean staleness {:.4} (max {}), dropped {}, global QPS {:.3}",
                            label(p),
                            m.mean_staleness,
                            m.max_staleness,
                            m.dropped,
                            m.global_qps
                        );
                    }
                }
            }
        }
        Command::Report { out } => {
            let rows = experiment::cmd_report(&out)?;
            experiment::write_report_csv(&rows, create(&out.join("report.csv"))?)?;
            let mut stdout = std::io::stdout().lock();
            experiment::write_report_csv(&rows, &mut stdout)?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
