use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fedtta_core::federation::Schedule;
use fedtta_core::harness::{self, ExperimentConfig};
use fedtta_core::{Checkpoint, Method, Patience};

#[derive(Parser)]
#[command(
    name = "fedtta",
    version,
    about = "Federated test-time adaptation experiments on synthetic tasks"
)]
struct Cli {
    /// Worker threads for client-parallel rounds. Results do not depend on it.
    #[arg(long, global = true, env = "FEDTTA_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate each configured method (or only `--method`).
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: Option<Method>,
    },
    /// Run every configured method on identical data and print a summary table.
    Compare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Full test-time adaptation trace of one test client from a checkpoint.
    AdaptCurve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        client: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Positive integer or `unbounded`.
        #[arg(long, default_value = "5")]
        patience: Patience,
        /// Defaults to `<output_dir>/curve-seed<seed>-client<client>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one seed's client datasets for inspection.
    Partition {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to `<output_dir>/partition-seed<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Heterogeneous-model federation over a sweep of lambda values.
    Hetero {
        #[arg(long)]
        config: PathBuf,
        /// Repeatable or comma separated. Defaults to the configured sweep.
        #[arg(long = "lambda", value_delimiter = ',')]
        lambdas: Vec<f64>,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("invalid config {}", path.display()))
}

fn run(cfg: ExperimentConfig, method: Option<Method>) -> Result<()> {
    let methods = method.map_or_else(|| cfg.methods.clone(), |m| vec![m]);
    let reports = harness::run_methods(&cfg, &methods, Schedule::Parallel)?;
    for r in &reports {
        harness::write_method_outputs(&cfg.output_dir.join(r.method.name()), &cfg, r)?;
    }
    let rows: Vec<_> = reports.iter().map(|r| &r.summary).collect();
    print!("{}", harness::compare_table(&rows));
    Ok(())
}

fn compare(cfg: ExperimentConfig) -> Result<()> {
    let reports = harness::run_compare(&cfg, Schedule::Parallel)?;
    harness::write_compare(&cfg.output_dir, &cfg, &reports)?;
    let rows: Vec<_> = reports.iter().map(|r| &r.summary).collect();
    print!("{}", harness::compare_table(&rows));
    Ok(())
}

fn adapt_curve(
    cfg: ExperimentConfig,
    checkpoint: &Path,
    client: usize,
    steps: usize,
    patience: Patience,
    out: Option<PathBuf>,
) -> Result<()> {
    let file =
        File::open(checkpoint).with_context(|| format!("opening {}", checkpoint.display()))?;
    let ck = Checkpoint::read_from(&mut BufReader::new(file))
        .with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let curve = harness::adapt_curve(&cfg, &ck, client, steps, patience)?;
    let out = out.unwrap_or_else(|| {
        cfg.output_dir
            .join(format!("curve-seed{}-client{client}.csv", ck.seed))
    });
    harness::write_curve(&out, &cfg, &curve)?;
    println!(
        "{} rows, stop step {}, selected step {} -> {}",
        curve.rows.len(),
        curve.stopped_at,
        curve.selected_step,
        out.display()
    );
    Ok(())
}

fn partition(cfg: ExperimentConfig, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let data = harness::build_data(&cfg, seed)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join(format!("partition-seed{seed}")));
    harness::write_partition(&out, &cfg, &data)?;
    println!("partition {} -> {}", data.partition_hash, out.display());
    Ok(())
}

fn hetero(cfg: ExperimentConfig, lambdas: Vec<f64>) -> Result<()> {
    let lambdas = if lambdas.is_empty() {
        cfg.hetero.lambdas.clone()
    } else {
        lambdas
    };
    if let Some(l) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        bail!("lambda must be finite and non-negative, got {l}");
    }
    let (outcomes, summaries) = harness::run_hetero_sweep(&cfg, &lambdas, Schedule::Parallel)?;
    harness::write_hetero(&cfg.output_dir.join("hetero"), &cfg, &outcomes, &summaries)?;
    println!("{:>8} {:>10} {:>10}", "lambda", "validation", "test");
    for s in &summaries {
        println!(
            "{:>8} {:>10.2} {:>10.2}",
            s.lambda,
            100.0 * s.validation_stat.mean,
            100.0 * s.test_stat.mean
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!("worker count must be >= 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker pool")?;
    }
    match cli.command {
        Command::Run { config, method } => run(load(&config)?, method),
        Command::Compare { config } => compare(load(&config)?),
        Command::AdaptCurve {
            config,
            checkpoint,
            client,
            steps,
            patience,
            out,
        } => adapt_curve(load(&config)?, &checkpoint, client, steps, patience, out),
        Command::Partition { config, seed, out } => partition(load(&config)?, seed, out),
        Command::Hetero { config, lambdas } => hetero(load(&config)?, lambdas),
    }
}
