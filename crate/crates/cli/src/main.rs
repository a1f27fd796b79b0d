use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedyolo_cli::{execute, params, report, validate_file, Error};

#[derive(Parser)]
#[command(
    name = "fedyolo",
    version,
    about = "Desk-scale federated learning with frozen pretrained backbones"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a config and print it with defaults filled in.
    Validate { config: PathBuf },
    /// Run an experiment and write its artifacts.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        threads: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare finished runs.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print the parameter-count table, or one preset/method count.
    CountParams { preset: Option<String>, method: Option<String> },
}

fn main() -> ExitCode {
    env_logger::init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Validate { config } => {
            let cfg = validate_file(&config).map_err(Error::Invalid)?;
            println!("{}", cfg.to_json());
        }
        Command::Run {
            config,
            seed,
            threads,
            out,
        } => {
            let mut cfg = validate_file(&config).map_err(Error::Invalid)?;
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Corrupt {
                    path: "--threads".into(),
                    reason: e.to_string(),
                })?;
            log::info!("running {} on {} thread(s)", config.display(), pool.current_num_threads());
            let (dir, result) = pool.install(|| execute(&cfg, out.as_deref()))?;
            if let Some(m) = result.final_metrics() {
                println!(
                    "{} {} round {}: global_acc {:.4} mean_local_acc {:.4}",
                    result.scheme.as_str(),
                    result.update_mode.as_str(),
                    m.round,
                    m.global_acc,
                    m.mean_local_acc
                );
            }
            if let Some(p) = &result.personalization {
                println!(
                    "personalized: mean_local_acc {:.4} global {:.4} -> {:.4}",
                    p.mean_local_acc, p.global_acc_before, p.global_acc_after
                );
            }
            println!("comm: up {} down {} params", result.comm.up_params, result.comm.down_params);
            println!("artifacts in {}", dir.display());
        }
        Command::Report { dirs, csv } => {
            let rows = report::tabulate(&dirs)?;
            print!("{}", report::render_text(&rows));
            if let Some(path) = csv {
                let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
                report::write_csv(&rows, f)?;
            }
        }
        Command::CountParams { preset, method } => match (preset, method) {
            (None, None) => print!("{}", params::render_table()),
            (Some(p), Some(m)) => println!("{}", params::render_one(&p, &m)?),
            (Some(p), None) => {
                for m in params::TABLE_METHODS {
                    println!("{}", params::render_one(&p, m.name())?);
                }
            }
            (None, Some(_)) => unreachable!("clap fills positionals in order"),
        },
    }
    Ok(())
}
