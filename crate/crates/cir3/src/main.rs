//! Command-line front end: validate configs, run single experiments or the
//! full suite, pretty-print reports, and inspect ensemble cache files.
//!
//! Exit codes: 0 when every checked claim passes, 1 when a claim fails,
//! 2 for usage or configuration errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cir3::engine;
use cir3::experiments::{
    self, default_config, default_suite, load_config, ExperimentConfig, ExperimentKind, Preset,
    Report, VerdictStatus,
};

#[derive(Parser)]
#[command(name = "cir3", version, about = "Three-factor CIR simulation and ergodicity checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML (or JSON) experiment config; overrides --preset/--experiment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experiment to run when no config file is given.
    #[arg(long)]
    experiment: Option<String>,
    /// Built-in parameter set for config-less runs.
    #[arg(long, value_enum, default_value = "default")]
    preset: PresetArg,
    /// Root seed; overrides the config value.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for report.json and CSV sidecars.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = library default). Never changes the numbers.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum PresetArg {
    Default,
    Stress,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Preset {
        match p {
            PresetArg::Default => Preset::Default,
            PresetArg::Stress => Preset::Stress,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one experiment and report pass/fail.
    Run(RunArgs),
    /// Run every experiment kind under a preset.
    Suite {
        #[arg(long, value_enum, default_value = "default")]
        preset: PresetArg,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Pretty-print a previously written report.json.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
    /// Summarize a binary ensemble cache file.
    Cache {
        #[arg(long)]
        input: PathBuf,
    },
}

fn configure_threads(threads: usize) -> Result<(), String> {
    if threads == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| format!("could not configure {threads} worker threads: {e}"))
}

fn print_report(report: &Report) {
    println!("experiment: {}", report.config.experiment.kind.name());
    for v in &report.verdicts {
        let tag = match v.status {
            VerdictStatus::Pass => "PASS",
            VerdictStatus::Fail => "FAIL",
            VerdictStatus::Advisory => "NOTE",
        };
        println!(
            "  [{tag}] {} | {} | tolerance: {} | observed {:.6e} vs {:.6e}",
            v.claim, v.operation, v.tolerance, v.observed, v.bound
        );
        if !v.detail.is_empty() {
            println!("         {}", v.detail);
        }
    }
    if let Some(ledger) = &report.ledger {
        println!(
            "  ledger: p = {}, M_p = {:.6}, C_p^v = {:.6}, Ctilde_p^v = {:.6}{}",
            ledger.p,
            ledger.m_p,
            ledger.c_p_v,
            ledger.ctilde_p_v,
            if ledger.r_bounds_reconstructed { " (R bounds reconstructed)" } else { "" }
        );
    }
    println!("  wall clock: {:.2}s", report.wall_clock_secs);
}

fn run_one(config: &ExperimentConfig, out: Option<&PathBuf>) -> Result<bool, String> {
    let report = experiments::run(config).map_err(|e| e.to_string())?;
    print_report(&report);
    if let Some(dir) = out {
        experiments::write_report(&report, dir).map_err(|e| e.to_string())?;
        println!("  wrote {}", dir.join("report.json").display());
    }
    Ok(report.passed())
}

fn build_config(args: &RunArgs) -> Result<ExperimentConfig, String> {
    let mut config = match (&args.config, &args.experiment) {
        (Some(path), _) => load_config(path).map_err(|e| e.to_string())?,
        (None, Some(name)) => {
            let kind = ExperimentKind::parse(name)
                .ok_or_else(|| format!("unknown experiment `{name}`"))?;
            default_config(kind, args.preset.into(), 1)
        }
        (None, None) => {
            return Err("either --config or --experiment is required".to_string());
        }
    };
    if let Some(seed) = args.seed {
        config.experiment.root_seed = seed;
    }
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { config } => match load_config(&config) {
            Ok(c) => {
                println!("ok: {} ({} paths)", c.experiment.kind.name(), c.experiment.n_paths);
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Command::Run(args) => {
            if let Err(e) = configure_threads(args.threads) {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
            let config = match build_config(&args) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            match run_one(&config, args.out.as_ref()) {
                Ok(true) => ExitCode::SUCCESS,
                Ok(false) => ExitCode::from(1),
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
        Command::Suite { preset, seed, out, threads } => {
            if let Err(e) = configure_threads(threads) {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
            let configs = default_suite(preset.into(), seed);
            let mut all_pass = true;
            for config in &configs {
                let dir = out
                    .as_ref()
                    .map(|d| d.join(config.experiment.kind.name()));
                match run_one(config, dir.as_ref()) {
                    Ok(pass) => all_pass &= pass,
                    Err(e) => {
                        eprintln!("error: {e}");
                        return ExitCode::from(2);
                    }
                }
            }
            if all_pass {
                println!("suite: all experiments passed");
                ExitCode::SUCCESS
            } else {
                println!("suite: at least one claim failed");
                ExitCode::from(1)
            }
        }
        Command::Report { input } => {
            let text = match std::fs::read_to_string(&input) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: cannot read {}: {e}", input.display());
                    return ExitCode::from(2);
                }
            };
            match serde_json::from_str::<Report>(&text) {
                Ok(report) => {
                    print_report(&report);
                    if report.passed() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => {
                    eprintln!("error: malformed report: {e}");
                    ExitCode::from(2)
                }
            }
        }
        Command::Cache { input } => {
            let file = match std::fs::File::open(&input) {
                Ok(f) => f,
                Err(e) => {
                    eprintln!("error: cannot open {}: {e}", input.display());
                    return ExitCode::from(2);
                }
            };
            match engine::read_cache(std::io::BufReader::new(file)) {
                Ok(cached) => {
                    println!(
                        "{}: {} factors, {} paths, {} recorded times (t in [{}, {}])",
                        input.display(),
                        cached.factors,
                        cached.n_paths,
                        cached.times.len(),
                        cached.times.first().copied().unwrap_or(0.0),
                        cached.times.last().copied().unwrap_or(0.0),
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}
