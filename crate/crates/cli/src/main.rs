use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use bam_core::agents::LearningContext;
use bam_core::checkpoint::Checkpoint;
use bam_core::domains::Environment;
use bam_core::exec::Exec;
use bam_core::harness::{self, ExperimentConfig, ResultTable, Setup};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bam", version, about = "Simulated-teacher experiments for behavior-aware learners")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Parallelism {
    Sequential,
    Parallel,
}

#[derive(Clone, Copy, ValueEnum)]
enum Delimiter {
    Tsv,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write results.tsv, summary.tsv and manifest.json.
    Run {
        config: PathBuf,
        #[arg(short, long, default_value = "results")]
        out: PathBuf,
        /// Overrides the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        parallelism: Option<Parallelism>,
        /// Worker threads when running in parallel (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Evaluate a learner checkpoint on its environment.
    Eval {
        checkpoint: PathBuf,
        #[arg(short, long)]
        environment: PathBuf,
        /// Experiment config supplying model and schedule settings.
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Convert a result table to a per-curve summary or delimited text.
    Export {
        results: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Delimiter,
        /// Write per (algorithm, round) mean and standard error instead of raw rows.
        #[arg(long)]
        summary: bool,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            out,
            seed,
            parallelism,
            threads,
        } => {
            let mut cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            match parallelism {
                Some(Parallelism::Sequential) => cfg.exec = Exec::Sequential,
                Some(Parallelism::Parallel) => cfg.exec = Exec::Parallel,
                None => {}
            }
            if let Some(n) = threads {
                if !Exec::Parallel.is_parallel() {
                    bail!("built without the `parallel` feature");
                }
                std::env::set_var("RAYON_NUM_THREADS", n.to_string());
            }
            let started = harness::unix_now();
            let output = harness::run_experiment(&cfg)?;
            harness::write_outputs(&out, &cfg, &output, started)?;
            for w in &output.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", output.table.summary_tsv());
        }
        Command::Eval {
            checkpoint,
            environment,
            config,
            episodes,
            seed,
        } => {
            let cp = Checkpoint::load(&checkpoint, None)?;
            let env = Environment::load(&environment)?;
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::new(&environment, vec![cp.algorithm], Default::default(), 1),
            };
            cfg.evaluation_episodes = episodes;
            cfg.master_seed = seed;
            if cp.environment != env.spec.name {
                eprintln!("warning: checkpoint was trained on `{}`", cp.environment);
            }
            let setup = Setup::new(env, &cfg)?;
            let mut agent = cp.agent;
            let ctx: &LearningContext = &setup.ctx;
            let policies = agent.policies(ctx)?.to_vec();
            let total = harness::total_return(&setup, &policies, episodes, seed, 0, 0)?;
            let optimal = harness::total_return(&setup, &setup.teacher.optimal, episodes, seed, 0, 0)?;
            println!("algorithm\t{}", cp.algorithm);
            println!("total_return\t{total}");
            println!("optimal_return\t{optimal}");
            println!("percent_optimal\t{}", harness::percent_of(total, optimal));
        }
        Command::Export {
            results,
            format,
            summary,
            out,
        } => {
            let table = ResultTable::parse_tsv(&std::fs::read_to_string(&results)?)?;
            let tsv = if summary { table.summary_tsv() } else { table.to_tsv() };
            let text = match format {
                Delimiter::Tsv => tsv,
                Delimiter::Csv => tsv
                    .lines()
                    .map(|l| l.split('\t').map(csv_field).collect::<Vec<_>>().join(","))
                    .collect::<Vec<_>>()
                    .join("\n")
                    + "\n",
            };
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn csv_field(f: &str) -> String {
    if f.contains([',', '"']) {
        format!("\"{}\"", f.replace('"', "\"\""))
    } else {
        f.to_string()
    }
}
