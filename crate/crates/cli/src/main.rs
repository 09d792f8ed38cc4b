use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

use commands::{Outcome, RunRecord};
use manifest::{CommandKind, MethodArg};

#[derive(Parser, Debug)]
#[command(name = "calibra", version)]
#[command(about = "Multiple imputation and calibration checks for incomplete multivariate data")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Maximum likelihood for a multivariate normal by EM.
    Em(EmArgs),
    /// Create multiply imputed datasets.
    Impute(ImputeArgs),
    /// Pool per-imputation estimates with the multiple-imputation combining rules.
    Pool(PoolArgs),
    /// Convergence and posterior predictive checks for an impute run.
    Check(CheckArgs),
    /// Coverage simulation from a scenario file.
    Simulate(SimulateArgs),
    /// Re-run a recorded command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Master seed; drawn at random and recorded when absent.
    #[arg(long, env = "CALIBRA_SEED")]
    seed: Option<u64>,
    /// Worker threads (default: logical cores).
    #[arg(long, env = "CALIBRA_JOBS")]
    jobs: Option<usize>,
    /// Method configuration file (JSON).
    #[arg(long, env = "CALIBRA_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "CALIBRA_OUT", default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EmArgs {
    #[arg(long, env = "CALIBRA_INPUT")]
    input: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct ImputeArgs {
    #[arg(long, env = "CALIBRA_INPUT")]
    input: PathBuf,
    #[arg(long, value_enum, env = "CALIBRA_METHOD", default_value_t = MethodArg::Da)]
    method: MethodArg,
    /// Number of imputations.
    #[arg(long, env = "CALIBRA_D", default_value_t = 5)]
    d: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct PoolArgs {
    /// CSV with columns d, theta_1.., se_1..
    #[arg(long, env = "CALIBRA_INPUT")]
    input: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Complete-data degrees of freedom for the small-sample correction.
    #[arg(long)]
    nu_com: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Manifest of an impute run.
    #[arg(long)]
    manifest: PathBuf,
    /// Discrepancy such as `mean:<col>`, `variance:<col>`,
    /// `kurtosis:<col>` or `max_correlation`; repeatable.
    #[arg(long = "discrepancy")]
    discrepancies: Vec<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, env = "CALIBRA_JOBS")]
    jobs: Option<usize>,
}

fn record(kind: CommandKind, common: &Common) -> Result<RunRecord, String> {
    let mut rec = RunRecord::new(kind, common.seed.unwrap_or_else(commands::random_seed));
    rec.set_config(common.config.as_deref())?;
    Ok(rec)
}

fn run(cli: Cli) -> Result<Outcome, String> {
    let (rec, out, jobs) = match cli.command {
        Command::Em(a) => {
            let mut rec = record(CommandKind::Em, &a.common)?;
            rec.set_input(&a.input)?;
            (rec, a.common.out, a.common.jobs)
        }
        Command::Impute(a) => {
            let mut rec = record(CommandKind::Impute, &a.common)?;
            rec.set_input(&a.input)?;
            rec.method = Some(a.method);
            rec.d = Some(a.d);
            (rec, a.common.out, a.common.jobs)
        }
        Command::Pool(a) => {
            let mut rec = record(CommandKind::Pool, &a.common)?;
            rec.set_input(&a.input)?;
            rec.level = Some(a.level);
            rec.nu_com = a.nu_com;
            (rec, a.common.out, a.common.jobs)
        }
        Command::Check(a) => {
            let mut rec = record(CommandKind::Check, &a.common)?;
            rec.set_input(&a.manifest)?;
            rec.discrepancies = a.discrepancies;
            (rec, a.common.out, a.common.jobs)
        }
        Command::Simulate(a) => {
            let rec = record(CommandKind::Simulate, &a.common)?;
            if rec.config.is_none() {
                return Err("simulate needs a scenario file via --config".into());
            }
            (rec, a.common.out, a.common.jobs)
        }
        Command::Replay(a) => {
            let rec = manifest::load_for_replay(&a.manifest)?;
            (rec, a.out, a.jobs)
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j);
    }
    let pool = builder.build().map_err(|e| e.to_string())?;
    pool.install(|| commands::execute(&rec, &out))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => {
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            if outcome.warnings.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
