//! `imtrack`: run tracking scenarios from TOML files and write CSV/JSON results.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod run;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Scenario;
use run::RunError;

/// Scenarios shipped with the binary.
const BUNDLED: &[(&str, &str)] = &[
    ("quadratic4", include_str!("../scenarios/quadratic4.cfg")),
    ("quartic_local", include_str!("../scenarios/quartic_local.cfg")),
    ("wardrop", include_str!("../scenarios/wardrop.cfg")),
    ("mismatch_constant", include_str!("../scenarios/mismatch_constant.cfg")),
    ("mismatch_jordan", include_str!("../scenarios/mismatch_jordan.cfg")),
];

#[derive(Parser)]
#[command(name = "imtrack", version, about = "Synthesize and simulate internal-model tracking algorithms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run scenarios (file paths or scenario names) and write their outputs.
    Run {
        #[arg(required = true, value_name = "CFG")]
        scenarios: Vec<String>,
        /// Output root; each scenario writes into `<out>/<name>/`.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the seed of every scenario.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the number of output samples.
        #[arg(long)]
        samples: Option<usize>,
        /// Extra directories searched for `<name>.cfg`.
        #[arg(long = "dir", value_name = "DIR")]
        dirs: Vec<PathBuf>,
    },
    /// List bundled scenarios and those found in the given directories.
    List {
        #[arg(long = "dir", value_name = "DIR")]
        dirs: Vec<PathBuf>,
    },
    /// Check scenarios and their synthesis without simulating.
    Validate {
        #[arg(required = true, value_name = "CFG")]
        scenarios: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long = "dir", value_name = "DIR")]
        dirs: Vec<PathBuf>,
    },
}

fn user_scenarios(dirs: &[PathBuf]) -> Result<BTreeMap<String, PathBuf>, RunError> {
    let mut found = BTreeMap::new();
    for dir in dirs {
        let entries =
            fs::read_dir(dir).map_err(|e| RunError::Config(format!("cannot read directory {}: {e}", dir.display())))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "cfg"))
            .collect();
        paths.sort();
        for p in paths {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                found.entry(stem.to_string()).or_insert(p);
            }
        }
    }
    Ok(found)
}

/// A path on disk wins, then user directories, then the bundled set.
fn load(arg: &str, dirs: &[PathBuf]) -> Result<Scenario, RunError> {
    let path = Path::new(arg);
    if path.is_file() {
        return Scenario::load(path).map_err(RunError::Config);
    }
    if let Some(p) = user_scenarios(dirs)?.get(arg) {
        return Scenario::load(p).map_err(RunError::Config);
    }
    if let Some((name, text)) = BUNDLED.iter().find(|(n, _)| *n == arg) {
        return Scenario::parse(text).map_err(|e| RunError::Config(format!("bundled {name}: {e}")));
    }
    Err(RunError::Config(format!("no scenario file or known scenario named {arg:?}")))
}

fn load_all(
    args: &[String],
    dirs: &[PathBuf],
    seed: Option<u64>,
    samples: Option<usize>,
) -> Result<Vec<Scenario>, RunError> {
    let mut out = Vec::with_capacity(args.len());
    for arg in args {
        let mut sc = load(arg, dirs)?;
        if let Some(s) = seed {
            sc.seed = s;
        }
        if let Some(n) = samples {
            sc.integrator.samples = n;
        }
        sc.validate().map_err(|e| RunError::Config(format!("{}: {e}", sc.name)))?;
        out.push(sc);
    }
    let mut names: Vec<&str> = out.iter().map(|s| s.name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(RunError::Config(format!("scenario name {:?} appears twice in one batch", w[0])));
    }
    Ok(out)
}

fn report(name: &str, e: &RunError) {
    eprintln!("error: {name}: {}", e.message());
}

fn run_batch(scenarios: &[Scenario], out: &Path) -> u8 {
    // one thread per scenario; each writes only into its own directory
    let results: Vec<Result<PathBuf, RunError>> = std::thread::scope(|s| {
        let handles: Vec<_> = scenarios
            .iter()
            .map(|sc| {
                s.spawn(move || {
                    let outcome = run::execute(sc, true)?.expect("simulation requested");
                    run::write_outputs(sc, &outcome, out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(RunError::Failure("scenario thread panicked".into()))))
            .collect()
    });
    let mut code = 0;
    for (sc, res) in scenarios.iter().zip(results) {
        match res {
            Ok(dir) => println!("{}: wrote {}", sc.name, dir.display()),
            Err(e) => {
                report(&sc.name, &e);
                code = code.max(e.exit_code());
            }
        }
    }
    code
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::List { dirs } => match user_scenarios(&dirs) {
            Ok(user) => {
                let mut all: BTreeMap<String, String> =
                    BUNDLED.iter().map(|(n, _)| (n.to_string(), "bundled".to_string())).collect();
                for (name, path) in user {
                    all.insert(name, path.display().to_string());
                }
                for (name, origin) in all {
                    println!("{name}\t{origin}");
                }
                0
            }
            Err(e) => {
                report("list", &e);
                e.exit_code()
            }
        },
        Command::Run { scenarios, out, seed, samples, dirs } => match load_all(&scenarios, &dirs, seed, samples) {
            Ok(batch) => run_batch(&batch, &out),
            Err(e) => {
                report("run", &e);
                e.exit_code()
            }
        },
        Command::Validate { scenarios, seed, samples, dirs } => match load_all(&scenarios, &dirs, seed, samples) {
            Ok(batch) => {
                let mut code = 0;
                for sc in &batch {
                    match run::execute(sc, false) {
                        Ok(_) => println!("{}: ok", sc.name),
                        Err(e) => {
                            report(&sc.name, &e);
                            code = code.max(e.exit_code());
                        }
                    }
                }
                code
            }
            Err(e) => {
                report("validate", &e);
                e.exit_code()
            }
        },
    };
    ExitCode::from(code)
}
