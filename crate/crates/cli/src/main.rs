//! `ris-aging-de`: runs the sweep experiments and writes CSV plus a JSON
//! sidecar per run.
//!
//! Exit codes: 0 success, 1 bad arguments or config, 2 I/O failure,
//! 3 solver failure (a diagnostic JSON is written next to the CSV).

mod experiments;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};

use experiments::{run_experiment, Experiment, RunSettings};
use output::{Meta, Paths, Timings};
use ris_aging_core::scenario::{load_config_with_base, DopplerConvention, Scale, SystemConfig};

#[derive(Parser, Debug)]
#[command(name = "ris-aging-de", version, about = "Sum SE of RIS-assisted massive MIMO under channel aging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Convention {
    PerSymbol,
    PerIndex,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment sweep.
    Run {
        experiment: Experiment,
        /// JSON config; absent keys take the scale defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long)]
        out: PathBuf,
        /// Full-size defaults (M = L = 100, K = 20, τ_c = 200) and sweeps.
        #[arg(long)]
        paper_scale: bool,
        #[arg(long, value_enum)]
        doppler_convention: Option<Convention>,
        /// Evaluate at the default phases and equal powers instead of running AO.
        #[arg(long)]
        skip_optimization: bool,
        /// Large-scale draws for init-sensitivity (default 3, or 30 at paper scale).
        #[arg(long)]
        realizations: Option<usize>,
        /// Random phase starts per draw for init-sensitivity (default 2, or 100 at paper scale).
        #[arg(long)]
        random_inits: Option<usize>,
    },
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn load(config: Option<&Path>, scale: Scale) -> Result<SystemConfig, (u8, String)> {
    match config {
        None => Ok(SystemConfig::defaults(scale)),
        Some(p) => load_config_with_base(p, scale).map_err(|e| match e {
            ris_aging_core::Error::Io(io) => (2, format!("cannot read {}: {io}", p.display())),
            other => (1, other.to_string()),
        }),
    }
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
    let Command::Run {
        experiment,
        config,
        seed,
        trials,
        out,
        paper_scale,
        doppler_convention,
        skip_optimization,
        realizations,
        random_inits,
    } = cli.command;

    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let mut timings = Timings::default();
    let scale = if paper_scale { Scale::Paper } else { Scale::Desk };
    let mut cfg = match timings.time("config", || load(config.as_deref(), scale)) {
        Ok(c) => c,
        Err((code, msg)) => return fail(code, msg),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(c) = doppler_convention {
        cfg.doppler_convention = match c {
            Convention::PerSymbol => DopplerConvention::PerSymbol,
            Convention::PerIndex => DopplerConvention::PerIndex,
        };
    }
    if trials == 0 {
        return fail(1, "--trials must be at least 1");
    }
    let run = RunSettings {
        seed: cfg.seed,
        trials,
        paper_scale,
        optimize: !skip_optimization,
        realizations: realizations.unwrap_or(if paper_scale { 30 } else { 3 }).max(1),
        random_inits: random_inits.unwrap_or(if paper_scale { 100 } else { 2 }),
    };

    if let Err(e) = std::fs::create_dir_all(&out) {
        return fail(2, format!("cannot create {}: {e}", out.display()));
    }
    let name = experiment.name();
    let paths = Paths::new(&out, name);

    let outcome = match run_experiment(experiment, &cfg, &run) {
        Ok(o) => o,
        Err(failure) => {
            let diag = serde_json::json!({
                "experiment": name,
                "seed": run.seed,
                "failure": failure,
            });
            eprintln!("{}", serde_json::to_string_pretty(&diag).unwrap_or_default());
            if let Err(e) = output::write_json(&paths.error, &diag) {
                eprintln!("error: cannot write {}: {e}", paths.error.display());
            }
            return ExitCode::from(3);
        }
    };
    timings.merge(&outcome.stages);

    let written = timings.time("write", || output::write_csv(&paths.csv, name, outcome.axis, &outcome.rows));
    if let Err(e) = written {
        return fail(2, format!("cannot write {}: {e}", paths.csv.display()));
    }
    let meta = Meta {
        experiment: name,
        seed: run.seed,
        trials: run.trials,
        paper_scale,
        git_revision: output::git_revision(),
        started_unix_s: started,
        wall_clock_s: timings.elapsed(),
        stages: timings.stages().to_vec(),
        rows: outcome.rows.len(),
        csv: paths.csv.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        config: &cfg,
    };
    if let Err(e) = output::write_json(&paths.meta, &meta) {
        return fail(2, format!("cannot write {}: {e}", paths.meta.display()));
    }
    println!("{} rows -> {}", outcome.rows.len(), paths.csv.display());
    ExitCode::SUCCESS
}
