use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use procl::harness::cli;

#[derive(Parser)]
#[command(name = "procl", version, about = "Program-memory LoRA continual-learning experiments")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment arm from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the gradient, interference and consolidation checks.
    VerifyTheory {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "runs/theory")]
        out: PathBuf,
    },
    /// Paired ProCL / sequential-LoRA runs over several seeds.
    BenchForgetting {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

fn run(args: Args) -> procl::Result<bool> {
    match args.command {
        Command::Train { config, seed, out } => {
            let s = cli::train(&config, seed, out.as_deref())?;
            println!(
                "method={} seed={} average_accuracy={:.6} forgetting_first_task={} inference_routing_evaluations={}",
                s.method.as_str(),
                s.seed,
                s.average_accuracy,
                fmt_opt(s.forgetting_first_task),
                s.inference_routing_evaluations
            );
            Ok(true)
        }
        Command::VerifyTheory { seed, out } => {
            let r = cli::verify_theory(seed, &out)?;
            let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
            println!(
                "{} gradients: {} leaves, max relative error {:.3e}",
                verdict(r.gradients.passed),
                r.gradients.leaves_checked,
                r.gradients.max_relative_error
            );
            println!(
                "{} decomposition: {} instances, max residual {:.3e}",
                verdict(r.decomposition.passed),
                r.decomposition.instances,
                r.decomposition.max_residual
            );
            println!(
                "{} interference bound: {} pairs, max excess {:.3e}, beta in [{:.3}, {:.3}], disjoint max J {:.3e}",
                verdict(r.bound.passed),
                r.bound.pairs,
                r.bound.max_excess,
                r.bound.min_beta,
                r.bound.max_beta,
                r.bound.max_disjoint_j
            );
            println!(
                "{} consolidation: fitted rate {} vs {:.6}",
                verdict(r.consolidation.passed),
                fmt_opt(r.consolidation.stochastic.fitted_decay_rate),
                r.consolidation.target_rate
            );
            Ok(r.passed())
        }
        Command::BenchForgetting { config, seeds, out } => {
            let s = cli::bench_forgetting(&config, seeds, &out)?;
            println!(
                "seeds={} procl: median forgetting {:.6}, median AA {:.6}; seq_lora: median forgetting {:.6}, median AA {:.6}",
                s.seeds.len(),
                s.procl_median_forgetting,
                s.procl_median_average_accuracy,
                s.seq_lora_median_forgetting,
                s.seq_lora_median_average_accuracy
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
