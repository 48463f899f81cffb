use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use cliquestream::scenario::{self, run_scenario, validate_text, ScenarioError};

#[derive(Parser)]
#[command(name = "cliquestream", version, about = "Simulates tree-over-cliques live streaming on a clustered DHT")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every experiment of a scenario over its seeds.
    Run {
        config: PathBuf,
        /// Comma-separated seeds that replace the scenario's list.
        #[arg(long, value_delimiter = ',')]
        seed_override: Option<Vec<u64>>,
        /// Output directory.
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Simulations run in parallel. Each simulation is single-threaded.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Check a scenario and list every problem found.
    Validate { config: PathBuf },
}

fn read_checked(path: &Path) -> Result<scenario::Scenario> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let (sc, report) = validate_text(&text, &path.display().to_string());
    match sc {
        Some(sc) if report.is_clean() => Ok(sc),
        _ => {
            eprintln!("{report}");
            bail!("{} has {} problem(s)", path.display(), report.diagnostics.len())
        }
    }
}

fn write(out: &Path, rel: &str, contents: &str) -> Result<()> {
    let p = out.join(rel);
    if let Some(dir) = p.parent() {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(&p, contents).with_context(|| format!("cannot write {}", p.display()))
}

fn run(config: &Path, seeds: Option<Vec<u64>>, out: &Path, jobs: usize) -> Result<()> {
    let mut sc = read_checked(config)?;
    if let Some(s) = seeds {
        if s.is_empty() {
            bail!("--seed-override needs at least one seed");
        }
        sc.override_seeds(s);
    }
    let result = match run_scenario(&sc, jobs.max(1)) {
        Ok(r) => r,
        Err(e @ ScenarioError::EventCap { .. }) => bail!("aborted: {e}"),
        Err(e) => return Err(e.into()),
    };
    for f in &result.files {
        write(out, &f.path, &f.contents)?;
    }
    let mut digests = result.digests.join("\n");
    digests.push('\n');
    write(out, "digests.txt", &digests)?;
    write(out, "summary.json", &(serde_json::to_string_pretty(&result.summary)? + "\n"))?;
    print!("{digests}");
    eprintln!("wrote {} files to {}", result.files.len() + 2, out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Run { config, seed_override, out, jobs } => run(&config, seed_override, &out, jobs),
        Cmd::Validate { config } => read_checked(&config).map(|_| println!("{}: ok", config.display())),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
