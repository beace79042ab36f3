use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use mixflow::orchestration::Method;
use mixflow::place_tree::ClientPlaceTree;
use mixflow::runtime::CheckpointStore;
use mixflow::sim::{self, BenchConfig, MetricsFrame, ReportFormat, RunConfig, SimOptions};
use tracing_subscriber::EnvFilter;

/// Simulated multisource data preprocessing service.
#[derive(Parser)]
#[command(name = "mixflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Both,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
            Format::Both => ReportFormat::Both,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic source shards and a checksummed manifest.
    Gen {
        /// Run configuration (JSON or TOML) whose sources are generated.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the configuration seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Simulate a training run and write metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Loader worker threads; results are identical for any value.
        #[arg(long)]
        threads: Option<usize>,
        /// Persist checkpoints and the plan log here for `replay`.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        format: Format,
        /// Print the device-mesh tree before running.
        #[arg(long)]
        dump_topology: bool,
        /// Write each step's lineage graphs as DOT files under `out`.
        #[arg(long)]
        dump_dgraph: bool,
    },
    /// Compare in-order and balanced microbatching on sampled lengths.
    BenchBalance {
        /// Benchmark configuration (JSON); defaults to three lognormal skew levels.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "greedy,kk")]
        methods: Vec<Method>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-run from a checkpoint directory, checking every plan against its log.
    Replay {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, value_enum, default_value = "both")]
        format: Format,
    },
    /// Convert a metrics JSON file into report files.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> mixflow::Result<RunConfig> {
    let mut cfg = RunConfig::from_path(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_summary(frame: &MetricsFrame) {
    let s = &frame.summary;
    println!(
        "steps={} samples={} t_iter={:.4e} max/min={:.3} max/mean={:.3} failovers={} reshards={}",
        s.steps, s.delivered_samples, s.mean_t_iter, s.mean_flops_max_min, s.mean_flops_max_mean, s.failovers, s.reshards
    );
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let manifest = sim::gen_sources(&cfg.sources, cfg.seed, &out)?;
            for e in &manifest.shards {
                println!("{} {} records {}", e.file, e.records, e.sha256);
            }
        }
        Command::Run {
            config,
            out,
            seed,
            threads,
            checkpoint_dir,
            format,
            dump_topology,
            dump_dgraph,
        } => {
            let cfg = load_config(&config, seed)?;
            if dump_topology {
                print!("{}", ClientPlaceTree::build(cfg.parallelism)?.dump());
            }
            let opts = SimOptions {
                threads,
                checkpoint_dir,
                expected_log: None,
                keep_reports: dump_dgraph,
            };
            let output = sim::run_sim(&cfg, &opts)?;
            sim::report(&output.frame, format.into(), &out)?;
            if dump_dgraph {
                for r in &output.reports {
                    for (i, g) in r.graphs.iter().enumerate() {
                        fs::write(out.join(format!("dgraph-{:04}-{i}.dot", r.step)), g.to_dot())?;
                    }
                }
            }
            print_summary(&output.frame);
        }
        Command::BenchBalance {
            config,
            out,
            methods,
            trials,
            seed,
        } => {
            let mut cfg = match config {
                Some(p) => serde_json::from_slice::<BenchConfig>(&fs::read(&p).with_context(|| p.display().to_string())?)
                    .map_err(|e| mixflow::Error::InvalidConfig(format!("{}: {e}", p.display())))?,
                None => BenchConfig::default(),
            };
            if let Some(t) = trials {
                cfg.trials = t;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let rows = sim::bench_balance(&cfg, &methods)?;
            fs::create_dir_all(&out)?;
            let csv = sim::bench_csv(&rows);
            fs::write(out.join("bench.csv"), &csv)?;
            fs::write(out.join("bench.json"), serde_json::to_vec_pretty(&rows)?)?;
            print!("{csv}");
        }
        Command::Replay {
            config,
            checkpoint_dir,
            out,
            threads,
            format,
        } => {
            let cfg = load_config(&config, None)?;
            let log = CheckpointStore::open(&checkpoint_dir)?.plan_log().to_vec();
            if log.is_empty() {
                return Err(mixflow::Error::Integrity(format!("{} holds no plan log", checkpoint_dir.display())).into());
            }
            let opts = SimOptions {
                threads,
                checkpoint_dir: None,
                expected_log: Some(log),
                keep_reports: false,
            };
            let output = sim::run_sim(&cfg, &opts)?;
            sim::report(&output.frame, format.into(), &out)?;
            print_summary(&output.frame);
        }
        Command::Report { metrics, out, format } => {
            let frame: MetricsFrame = serde_json::from_slice(&fs::read(&metrics).with_context(|| metrics.display().to_string())?)
                .map_err(|e| mixflow::Error::Integrity(format!("{}: {e}", metrics.display())))?;
            for p in sim::report(&frame, format.into(), &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<mixflow::Error>().map_or(1, mixflow::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
