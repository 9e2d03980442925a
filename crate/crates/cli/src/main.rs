use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fromp::boundary;
use fromp::experiment::{self, ExperimentConfig};
use fromp::metrics::{self, AccuracyMatrix};
use fromp::Error;

/// Continual learning with functional regularisation of memorable past examples.
#[derive(Parser)]
#[command(name = "fromp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write accuracy matrices and metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run FROMP, FRORP, FROMP-L2 and FRORP-L2 with shared seeds.
        #[arg(long)]
        variant_sweep: bool,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stream minibatches without task labels and test each for a task change.
    BoundaryDetect {
        #[arg(long)]
        config: PathBuf,
        /// Seed to use (defaults to the config's first seed).
        #[arg(long)]
        seed: Option<u64>,
        /// CSV destination (defaults to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Final average, BWT and FWT of an accuracy matrix CSV.
    Metrics {
        #[arg(long)]
        matrix: PathBuf,
        /// CSV `task,accuracy` of independently trained models, for FWT.
        #[arg(long)]
        independent: Option<PathBuf>,
    },
    /// Summarise the memorable sets and kernels in a checkpoint directory.
    InspectMemorable {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Config {
            path: path.display().to_string(),
            message: io.to_string(),
        }
        .into(),
        other => anyhow::Error::new(other).context(format!("reading {}", path.display())),
    })
}

fn run(config: &Path, variant_sweep: bool, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let out = out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(cfg.benchmark.name()));
    let threads = experiment::threads_from_env();
    let groups = experiment::run_experiment(&cfg, Some(&out), variant_sweep, threads)?;
    let stdout = io::stdout();
    let mut w = stdout.lock();
    for g in &groups {
        let (m, se) = g.final_avg();
        write!(w, "{} M={} final_avg={:.4}±{:.4}", g.variant.name(), g.memorable_per_task, m, se)?;
        if let Some((tm, tse)) = g.final_avg_train() {
            write!(w, " train={tm:.4}±{tse:.4}")?;
        }
        writeln!(w, " ({} seeds)", g.runs.len())?;
    }
    writeln!(w, "results in {}", out.display())?;
    Ok(())
}

fn boundary_detect(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let run = experiment::run_boundary_detection(&cfg, seed)?;
    match out {
        Some(path) => {
            let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            boundary::write_detection_csv(&run.records, BufWriter::new(f))?;
        }
        None => boundary::write_detection_csv(&run.records, io::stdout().lock())?,
    }
    let s = &run.summary;
    eprintln!(
        "true boundaries {:?}, detected {:?}: {} hits, {} false positives",
        s.true_boundaries, s.detected, s.hits, s.false_positives
    );
    Ok(())
}

fn show_metrics(matrix: &Path, independent: Option<PathBuf>) -> Result<()> {
    let r = AccuracyMatrix::read_csv(BufReader::new(
        File::open(matrix).with_context(|| format!("opening {}", matrix.display()))?,
    ))?;
    let ind = match independent {
        Some(p) => Some(metrics::read_independent_csv(BufReader::new(
            File::open(&p).with_context(|| format!("opening {}", p.display()))?,
        ))?),
        None => None,
    };
    let m = metrics::compute_metrics(&r, ind.as_deref())?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "n/a".into());
    println!("final_avg={}", m.final_avg);
    println!("bwt={}", opt(m.bwt));
    println!("fwt={}", opt(m.fwt));
    Ok(())
}

fn inspect(dir: &Path) -> Result<()> {
    let ck = experiment::read_checkpoint(dir)?;
    let stdout = io::stdout();
    let mut w = stdout.lock();
    writeln!(
        w,
        "{} completed tasks, {} parameters, delta {}",
        ck.manifest.completed_tasks,
        ck.posterior.param_count(),
        ck.posterior.delta()
    )?;
    for (e, snap) in ck.manifest.entries.iter().zip(&ck.snapshots) {
        let m = &e.memorable;
        writeln!(
            w,
            "task {} head {} strategy {:?} seed {}: {} points, classes {:?}",
            m.task,
            e.head,
            m.strategy,
            m.seed,
            m.indices.len(),
            e.classes
        )?;
        writeln!(w, "  indices {:?}", m.indices)?;
        for (c, f) in snap.factors.iter().enumerate() {
            let k = f.reconstruct();
            let trace: f64 = k.diag().sum();
            let mean = snap.means[c].mean().unwrap_or(0.0);
            writeln!(
                w,
                "  class {}: mean prediction {:.4}, kernel trace {:.4e}, jitter {:.1e}",
                snap.classes[c],
                mean,
                trace,
                f.jitter()
            )?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_config() => 2,
        Some(e) if e.is_numeric() => 3,
        _ => 1,
    }
}

fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain().any(|c| {
        let io = c.downcast_ref::<io::Error>().or(match c.downcast_ref::<Error>() {
            Some(Error::Io(io)) => Some(io),
            _ => None,
        });
        io.is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            variant_sweep,
            out,
        } => run(&config, variant_sweep, out),
        Command::BoundaryDetect { config, seed, out } => boundary_detect(&config, seed, out),
        Command::Metrics {
            matrix,
            independent,
        } => show_metrics(&matrix, independent),
        Command::InspectMemorable { checkpoint } => inspect(&checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
