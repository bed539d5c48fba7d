use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fbtwa_cli::compare::compare_runs;
use fbtwa_cli::config::{load_config, parse_value, ConfigError, ExperimentConfig};
use fbtwa_cli::runner::{run, thermal_sample, RunError};

#[derive(Parser)]
#[command(name = "fbtwa", version, about = "Measurement-feedback cooling simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write CSV/SVG outputs plus a manifest.
    Simulate {
        /// JSON configuration file.
        config: Option<PathBuf>,
        /// Named preset; keys in the configuration file override it.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "FBTWA_THREADS")]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_plots: bool,
    },
    /// Flag series points of two runs that differ by more than `--sigmas`.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 3.0)]
        sigmas: f64,
        /// Comma-separated observable names.
        #[arg(long, value_delimiter = ',')]
        observables: Option<Vec<String>>,
    },
    /// Sample the thermal field ensemble of a configuration and store it.
    ThermalSample {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, env = "FBTWA_THREADS")]
        threads: Option<usize>,
    },
}

fn load(config: Option<&PathBuf>, preset: Option<&str>) -> Result<ExperimentConfig, ConfigError> {
    match config {
        Some(p) => load_config(p, preset),
        None if preset.is_some() => parse_value(serde_json::json!({}), preset),
        None => Err(ConfigError::Schema(
            "give a configuration file or --preset".into(),
        )),
    }
}

fn fail(e: RunError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate {
            config,
            preset,
            seed,
            threads,
            out,
            no_plots,
        } => {
            let resolved = load(config.as_ref(), preset.as_deref()).and_then(|mut c| {
                if seed.is_some() {
                    c.master_seed = seed;
                }
                if out.is_some() {
                    c.output_dir = out;
                }
                if no_plots {
                    c.plots = Some(false);
                }
                c.resolve()
            });
            let cfg = match resolved {
                Ok(c) => c,
                Err(e) => return fail(e.into()),
            };
            match run(&cfg, threads) {
                Ok(m) => {
                    for w in &m.warnings {
                        eprintln!("warning: {w}");
                    }
                    println!(
                        "wrote {} outputs to {} (config {})",
                        m.outputs.len(),
                        cfg.output_dir.display(),
                        &m.config_hash[..12]
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Compare {
            a,
            b,
            sigmas,
            observables,
        } => match compare_runs(&a, &b, sigmas, observables.as_deref()) {
            Ok(rep) => {
                for o in &rep.observables {
                    let status = if o.n_flagged == 0 { "ok" } else { "DIFFERS" };
                    match o.first_flagged_time {
                        Some(t) => println!(
                            "{status:8}{:<16}{}/{} points flagged, max z {:.2}, first at t = {t}",
                            o.name, o.n_flagged, o.n_points, o.max_z
                        ),
                        None => println!(
                            "{status:8}{:<16}{} points, max z {:.2}",
                            o.name, o.n_points, o.max_z
                        ),
                    }
                }
                if rep.passed() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(4)
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
        Command::ThermalSample {
            config,
            out,
            seed,
            threads,
        } => {
            let cfg = load_config(&config, None).and_then(|mut c| {
                if seed.is_some() {
                    c.master_seed = seed;
                }
                c.resolve()
            });
            let cfg = match cfg {
                Ok(c) => c,
                Err(e) => return fail(e.into()),
            };
            match thermal_sample(&cfg, &out, threads) {
                Ok(ens) => {
                    println!(
                        "wrote {} thermal samples to {}",
                        ens.n_traj(),
                        out.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
    }
}
