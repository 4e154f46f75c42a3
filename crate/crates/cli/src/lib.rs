//! `phdst` command-line interface. Each subcommand runs one phase against a
//! run directory; `pipeline` chains them into a fresh timestamped directory.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use phdst_core::dates::parse_iso_date;
use phdst_core::pipeline::{
    self, data_paths, evaluate_phase, features_phase, ingest_phase, load_bundle, load_config, load_tables,
    predict_day, prediction_rows, read_run_panel, report_phase, synth_phase, train_phase, write_config_snapshot,
    PipelineConfig, RunPaths, PREDICTIONS_HEADER,
};
use phdst_core::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "phdst", version, about = "Next-day exit volume forecasting for highway toll stations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run directory holding the artifacts of earlier phases.
    #[arg(long)]
    run_dir: PathBuf,
    /// Configuration file; defaults to the snapshot in the run directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of training and calibration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic input CSVs into <run-dir>/data.
    Synth(RunArgs),
    /// Validate inputs and aggregate toll records into the daily panel.
    Ingest(RunArgs),
    /// Fit normalization, vital flags and upstream lists; build training tensors.
    Features(RunArgs),
    /// Train the network and the calibration nets into model.json.
    Train(RunArgs),
    /// Write calibrated predictions for the day after --date.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Last observed day; predictions are for the following day.
        #[arg(long)]
        date: String,
        /// Run directory with panel.csv and config.json; defaults to the model's directory.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Output CSV; defaults to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score the model and baselines on the test range into metrics.json.
    Evaluate(RunArgs),
    /// Render report files from metrics.json.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Run every phase into a new timestamped run directory.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Parent directory of the run directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

/// Resolves the configuration of a phase: an explicit file (snapshotted into
/// the run directory) or the run directory's existing snapshot. Flags win.
fn phase_config(args: &RunArgs) -> Result<(PipelineConfig, RunPaths)> {
    let run = RunPaths::new(&args.run_dir);
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => load_config(&run.config())?,
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let cfg = cfg.resolve()?;
    std::fs::create_dir_all(&run.root).map_err(|e| Error::io(&run.root, e))?;
    if args.config.is_some() || args.seed.is_some() {
        write_config_snapshot(&cfg, &run)?;
    }
    Ok((cfg, run))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Validation(format!("{} is missing; {hint}", path.display())))
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth(args) => {
            let (cfg, run) = phase_config(&args)?;
            if cfg.data.is_some() {
                return Err(Error::Config("configuration reads input files; nothing to synthesize".into()));
            }
            synth_phase(&cfg.synth_config(), &run.data_dir())?;
        }
        Command::Ingest(args) => {
            let (cfg, run) = phase_config(&args)?;
            let paths = data_paths(&cfg, &run);
            require(&paths.toll, "run `phdst synth` first or configure input files")?;
            ingest_phase(&cfg, &paths, &run)?;
        }
        Command::Features(args) => {
            let (cfg, run) = phase_config(&args)?;
            require(&run.panel(), "run `phdst ingest` first")?;
            features_phase(&cfg, &run)?;
        }
        Command::Train(args) => {
            let (cfg, run) = phase_config(&args)?;
            require(&run.features(), "run `phdst features` first")?;
            train_phase(&cfg, &run)?;
        }
        Command::Predict {
            model,
            date,
            run_dir,
            out,
        } => {
            let anchor = parse_iso_date(&date)?;
            let run = RunPaths::new(
                run_dir.unwrap_or_else(|| model.parent().map(Path::to_path_buf).unwrap_or_default()),
            );
            let cfg = load_config(&run.config())?.resolve()?;
            let bundle = load_bundle(&model)?;
            let panel = read_run_panel(&run)?;
            let tables = load_tables(&cfg, &run)?;
            let values = predict_day(&bundle, &panel, &tables, anchor)?;
            let target = anchor
                .succ_opt()
                .ok_or_else(|| Error::Validation(format!("no day follows {anchor}")))?;
            let body = format!(
                "{PREDICTIONS_HEADER}{}",
                prediction_rows(bundle.stations(), target, &values)
            );
            match out {
                Some(p) => std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?,
                None => {
                    let mut stdout = std::io::stdout().lock();
                    stdout.write_all(body.as_bytes()).map_err(Error::Stream)?;
                    pipeline::flush(stdout)?;
                }
            }
        }
        Command::Evaluate(args) => {
            let (cfg, run) = phase_config(&args)?;
            require(&run.model(), "run `phdst train` first")?;
            evaluate_phase(&cfg, &run)?;
        }
        Command::Report { run_dir } => {
            let run = RunPaths::new(run_dir);
            require(&run.metrics(), "run `phdst evaluate` first")?;
            report_phase(&run)?;
        }
        Command::Pipeline {
            config,
            seed,
            output_dir,
        } => {
            let mut cfg = match config {
                Some(p) => load_config(&p)?,
                None => PipelineConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            let out = pipeline::run_pipeline(cfg)?;
            println!("{}", out.run.root.display());
        }
    }
    Ok(())
}

/// Exit code of an error: 1 for invalid input or configuration, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
