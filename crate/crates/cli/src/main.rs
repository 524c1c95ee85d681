//! `bathy-slam`: simulate surveys, run submap SLAM, evaluate map consistency.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bathy_slam::config::PipelineConfig;
use bathy_slam::format::{load, load_survey, save_survey, write_file};
use bathy_slam::pipeline::{evaluate, report_json, run_slam, simulate, write_outputs};
use bathy_slam::Error;
use clap::{ArgAction, Parser, Subcommand};
use log::{info, warn};

const THREADS_ENV: &str = "BATHY_SLAM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "bathy-slam", version, about = "Offline bathymetric submap SLAM")]
struct Cli {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output file (simulate) or directory (slam, eval).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,

    /// Worker threads; falls back to BATHY_SLAM_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic survey (binary, or CSV with a .csv extension).
    Simulate,
    /// Build submaps, register overlaps, optimize and write maps and reports.
    Slam {
        /// Survey file.
        survey: PathBuf,
    },
    /// Consistency of a survey (at DR poses) or a saved submap map.
    Eval {
        /// Survey or .bsmap file.
        input: PathBuf,
    },
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Debug, Subcommand)]
enum ConfigAction {
    /// Print the effective configuration with every default spelled out.
    Dump,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Error> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count"))),
        Err(_) => Ok(None),
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let cfg = match cli.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(Error::Config("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size thread pool: {e}")))?;
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Config { action: ConfigAction::Dump } => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
        Command::Simulate => {
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| cfg.pipeline.out_dir.join("survey.bsv"));
            let survey = simulate(&cfg)?;
            save_survey(&out, &survey)?;
            info!("{} pings, {} beams -> {}", survey.pings.len(), survey.beam_count(), out.display());
            Ok(())
        }
        Command::Slam { survey } => {
            let dir = cli.out.clone().unwrap_or_else(|| cfg.pipeline.out_dir.clone());
            let survey = load_survey(survey)?;
            let output = run_slam(&survey, &cfg)?;
            write_outputs(&output, &cfg, &dir)?;
            let r = &output.report;
            if r.lc_edge_count == 0 {
                warn!("no loop closures: optimized trajectory equals dead reckoning");
            }
            println!(
                "submaps {} | loop closures {} | rms {} -> {} | outputs in {}",
                r.submap_count,
                r.lc_edge_count,
                fmt_rms(r.initial_rms),
                fmt_rms(r.optimized_rms),
                dir.display()
            );
            Ok(())
        }
        Command::Eval { input } => {
            let loaded = load(input)?;
            let (report, map) = evaluate(&loaded, &cfg)?;
            if let Some(dir) = &cli.out {
                write_eval(dir, &report, &map)?;
            }
            if report.zero_coverage {
                warn!("no cell is covered by two or more submaps");
            }
            print!("{}", report_json(&report));
            Ok(())
        }
    }
}

fn write_eval(
    dir: &Path,
    report: &bathy_slam::pipeline::EvalReport,
    map: &bathy_slam::consistency::ConsistencyMap,
) -> Result<(), Error> {
    write_file(&dir.join("consistency.asc"), map.raster.to_esri_ascii())?;
    write_file(&dir.join("consistency.csv"), map.raster.to_csv())?;
    write_file(&dir.join("eval.json"), report_json(report))?;
    Ok(())
}

fn fmt_rms(rms: Option<f64>) -> String {
    rms.map_or_else(|| "n/a (no overlap)".into(), |v| format!("{v:.4} m"))
}
