//! `restshape` command-line front end.

mod commands;
mod config;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use commands::{Failure, MetricsOptions, Run};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "restshape", version, about = "Rest-shape optimization for tetrahedral elastic bodies")]
struct Cli {
    /// JSON run configuration; repeat for batch mode.
    #[arg(long, global = true)]
    config: Vec<PathBuf>,
    /// Output directory (one subdirectory per config in batch mode).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Shapes processed concurrently in batch mode.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[arg(long, global = true, default_value = "warn", value_parser = ["error", "warn", "info", "debug", "trace", "off"])]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Static equilibrium: static.tet, stress.csv, solve.json.
    Equilibrium {
        /// Plastic field (`plastic.txt`); identity when omitted.
        #[arg(long)]
        plastic: Option<PathBuf>,
    },
    /// Optimize the plastic field: plastic.txt, rest.tet, static_opt.tet, trace.csv, report.json.
    Optimize,
    /// Evaluation metrics: metrics.json, fracture.csv.
    Metrics {
        #[arg(long)]
        plastic: Option<PathBuf>,
        /// Target mesh for the silhouette loss.
        #[arg(long)]
        pair: Option<PathBuf>,
        /// Fail with exit 3 unless equilibrium converged.
        #[arg(long)]
        require_converged: bool,
        /// Volume-weighted mean stress.
        #[arg(long)]
        volume_weighted: bool,
    },
    /// Dynamic simulation: frame OBJs, trajectory.csv, simulate.json.
    Simulate {
        /// Plastic field; defaults to plastic.txt in the output directory.
        #[arg(long)]
        plastic: Option<PathBuf>,
    },
    /// Convert between .tet and .mesh, or export the boundary as .obj.
    Convert { input: PathBuf, output: PathBuf },
}

/// Output directory for each config.
fn output_dirs(configs: &[(PathBuf, RunConfig)], output: Option<&Path>) -> Result<Vec<PathBuf>, Failure> {
    if let [(_, cfg)] = configs {
        let dir = output
            .map(Path::to_path_buf)
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        return Ok(vec![dir]);
    }
    let base = output.unwrap_or(Path::new("."));
    let mut seen = BTreeSet::new();
    configs
        .iter()
        .map(|(p, _)| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            if !seen.insert(stem.clone()) {
                return Err(Failure::Usage(format!("batch configs share the name `{stem}`")));
            }
            Ok(base.join(stem))
        })
        .collect()
}

fn run_one(command: &Command, run: &Run) -> Result<Option<restshape::metrics::MetricsReport>, Failure> {
    log::info!("{}: {}", run.cfg.mesh_path.display(), commands::describe(&run.mesh));
    match command {
        Command::Equilibrium { plastic } => commands::equilibrium(run, plastic.as_deref()).map(|_| None),
        Command::Optimize => commands::optimize(run).map(|_| None),
        Command::Metrics { plastic, pair, require_converged, volume_weighted } => commands::metrics(
            run,
            &MetricsOptions {
                plastic: plastic.as_deref(),
                pair: pair.as_deref(),
                require_converged: *require_converged,
                volume_weighted: *volume_weighted,
            },
        )
        .map(Some),
        Command::Simulate { plastic } => commands::simulate(run, plastic.as_deref()).map(|_| None),
        Command::Convert { .. } => unreachable!("convert needs no config"),
    }
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    if let Command::Convert { input, output } = &cli.command {
        return commands::convert(input, output);
    }
    if cli.config.is_empty() {
        return Err(Failure::Usage("--config <path> is required".into()));
    }
    let configs = cli
        .config
        .iter()
        .map(|p| RunConfig::load(p).map(|c| (p.clone(), c)))
        .collect::<Result<Vec<_>, _>>()?;
    let dirs = output_dirs(&configs, cli.output.as_deref())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let results: Vec<_> = pool.install(|| {
        configs
            .into_par_iter()
            .zip(dirs.par_iter())
            .map(|((path, cfg), dir)| {
                let r = Run::new(cfg, dir.clone()).and_then(|run| run_one(&cli.command, &run));
                (path, r)
            })
            .collect()
    });

    let mut worst: Option<Failure> = None;
    let mut names = Vec::new();
    let mut reports = Vec::new();
    for (path, r) in results {
        match r {
            Ok(Some(report)) => {
                names.push(path.display().to_string());
                reports.push(report);
            }
            Ok(None) => {}
            Err(f) => {
                eprintln!("error: {}: {}", path.display(), f.message());
                if worst.as_ref().is_none_or(|w| f.code() > w.code()) {
                    worst = Some(f);
                }
            }
        }
    }
    if let (Command::Metrics { volume_weighted, .. }, true) = (&cli.command, cli.config.len() > 1) {
        let base = cli.output.clone().unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&base).map_err(|e| Failure::Usage(format!("{}: {e}", base.display())))?;
        let summary = commands::batch_summary(&names, &reports, *volume_weighted);
        let text = serde_json::to_string_pretty(&summary).map_err(|e| Failure::Usage(e.to_string()))? + "\n";
        std::fs::write(base.join("batch_metrics.json"), text)
            .map_err(|e| Failure::Usage(format!("batch_metrics.json: {e}")))?;
    }
    // per-run messages were already printed
    match worst {
        Some(Failure::Usage(_)) => Err(Failure::Usage(String::new())),
        Some(Failure::Numerical(_)) => Err(Failure::Numerical(String::new())),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message().is_empty() {
                eprintln!("error: {}", f.message());
            }
            ExitCode::from(f.code())
        }
    }
}
