//! `iilab`: data generation, training and the sweep experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use iilab::config::RunConfig;
use iilab::experiments;
use iilab::gradcheck::{STEP, TOLERANCE};
use iilab::numerics::OpKind;
use iilab::Error;

#[derive(Parser, Debug)]
#[command(name = "iilab", version, about = "Cross-modal retrieval with the inter-intra modal loss")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides experiment.out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Comma-separated seeds (overrides experiment.seeds).
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset and its manifest under <out>/data.
    GenData,
    /// Train once; writes metrics.csv and a checkpoint.
    Train,
    /// Evaluate the checkpoint in <out> on the test split.
    Eval,
    /// Sweep the intra weight gamma2.
    SweepGamma {
        /// Comma-separated gamma2 values (overrides experiment.gamma2_list).
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
    },
    /// Sweep the batch size for the inter-only and II variants.
    SweepBatch {
        /// Comma-separated batch sizes (overrides experiment.batch_list).
        #[arg(long, value_delimiter = ',')]
        batches: Option<Vec<usize>>,
    },
    /// Batch-composition noise modes, category retrieval.
    NoiseExp,
    /// Compare every backward rule against central differences.
    GradCheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.experiment.out_dir = out.clone();
    }
    if let Some(seeds) = &cli.seeds {
        cfg.experiment.seeds = seeds.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Command::GradCheck { inject_fault } = &cli.command {
        let fault = inject_fault.as_deref().map(str::parse::<OpKind>).transpose()?;
        return grad_check(fault);
    }
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::GenData => {
            let (manifest, n) = experiments::cmd_gen_data(&cfg)?;
            println!("wrote {n} pairs to {}", manifest.display());
        }
        Command::Train => {
            let out = experiments::cmd_train(&cfg)?;
            if let Some(m) = out.metrics.last() {
                println!(
                    "epoch {}: inter {:.6} intra {:.6} R@1 {:.4} R@10 {:.4} R@25 {:.4}",
                    m.epoch, m.inter_loss, m.intra_loss, m.r1, m.r10, m.r25
                );
            }
            println!("wrote {}", cfg.experiment.out_dir.display());
        }
        Command::Eval => {
            for (k, r) in experiments::cmd_eval(&cfg)? {
                println!("R@{k} {r:.6}");
            }
        }
        Command::SweepGamma { gammas } => {
            if let Some(g) = gammas {
                cfg.experiment.gamma2_list = g;
            }
            println!("wrote {}", experiments::cmd_sweep_gamma(&cfg)?.display());
        }
        Command::SweepBatch { batches } => {
            if let Some(b) = batches {
                cfg.experiment.batch_list = b;
            }
            println!("wrote {}", experiments::cmd_sweep_batch(&cfg)?.display());
        }
        Command::NoiseExp => {
            println!("wrote {}", experiments::cmd_noise_exp(&cfg)?.display());
        }
        Command::GradCheck { .. } => unreachable!(),
    }
    Ok(())
}

fn grad_check(fault: Option<OpKind>) -> Result<(), Failure> {
    let rows = experiments::cmd_grad_check(fault)?;
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4);
    println!("central differences, h = {STEP:e}, tolerance {TOLERANCE:e}");
    println!("{:<width$}  {:>12}  {:>8}  status", "check", "max_rel_err", "elements");
    for r in &rows {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<width$}  {:>12.3e}  {:>8}  {status}", r.name, r.max_rel_error, r.elements);
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Failure::Validation(format!("{failed} of {} gradient checks failed", rows.len())));
    }
    println!("all {} checks passed", rows.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
