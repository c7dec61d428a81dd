use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use reserve_cli::config::RunConfig;
use reserve_cli::pipeline::{cmd_eval, cmd_gen_data, cmd_sweep, cmd_train, mode_name, parse_tau_list, selftest_checks, Layout};
use reserve_cli::CliError;

/// Learn, calibrate and evaluate ellipsoidal reserve uncertainty sets.
#[derive(Parser, Debug)]
#[command(name = "reserveset", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads; output bytes do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory holding data/, checkpoints/ and reports/.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the system and the uncertainty dataset.
    GenData(Common),
    /// Fit the baseline shapes and train the learned ones.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train against the transfer-coupled dispatch.
        #[arg(long)]
        coupled: bool,
    },
    /// Calibrate and evaluate every method at the configured tau.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        coupled: bool,
    },
    /// Recalibrate frozen shapes over a list of tau values.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        coupled: bool,
        /// Comma-separated coverage levels.
        #[arg(long, default_value = "0.90,0.92,0.95,0.97,0.99")]
        tau_list: String,
    },
    /// Run the oracle checks and report pass or fail.
    Selftest,
}

fn load_config(c: &Common) -> Result<RunConfig, CliError> {
    let cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn print_report(out: &Path, name: &str) -> Result<(), CliError> {
    print!("{}", std::fs::read_to_string(Layout::new(out).reports().join(name))?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::GenData(c) => {
            cmd_gen_data(&load_config(&c)?, &c.out)?;
        }
        Command::Train { common, coupled } => {
            let cfg = load_config(&common)?;
            cmd_train(&cfg, &common.out, coupled || cfg.eval.coupled)?;
        }
        Command::Eval { common, coupled } => {
            let cfg = load_config(&common)?;
            let coupled = coupled || cfg.eval.coupled;
            cmd_eval(&cfg, &common.out, coupled)?;
            print_report(&common.out, &format!("eval_{}.txt", mode_name(coupled)))?;
        }
        Command::Sweep { common, coupled, tau_list } => {
            let cfg = load_config(&common)?;
            let coupled = coupled || cfg.eval.coupled;
            cmd_sweep(&cfg, &common.out, coupled, &parse_tau_list(&tau_list)?)?;
            print_report(&common.out, &format!("sweep_{}.txt", mode_name(coupled)))?;
        }
        Command::Selftest => {
            let checks = selftest_checks();
            for c in &checks {
                println!("{} {:<28} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: usage: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
