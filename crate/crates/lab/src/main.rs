use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qds_core::tensor_algebra::Capacity;
use qds_lab::config::{parse_model, SCHEMA};
use qds_lab::output::{read_fits, read_results, write_outputs};
use qds_lab::study::Record;
use qds_lab::{run_study, LabError, ModelSpec};

/// Batch runner for dilation experiments on finite lattice windows.
#[derive(Parser)]
#[command(name = "qds", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the study declared in a config file and write CSV artifacts.
    Run {
        config: PathBuf,
        /// Output directory [default: out/<model name>]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override `model.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Largest admissible side of a window matrix.
        #[arg(long, value_name = "DIM")]
        cap: Option<usize>,
    },
    /// Parse and validate a config file without running it.
    Validate {
        #[arg(required_unless_present = "schema")]
        config: Option<PathBuf>,
        /// Print the annotated reference config instead.
        #[arg(long)]
        schema: bool,
    },
    /// Summarize the artifacts of an earlier run.
    Report { dir: PathBuf },
}

/// Exit status for runs whose checks did not all pass.
const FAILED_CHECKS: u8 = 1;
/// Exit status for invalid input or runtime errors.
const ERROR: u8 = 2;

fn load(path: &Path) -> Result<ModelSpec, LabError> {
    let text = fs::read_to_string(path).map_err(|source| LabError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_model(&text).map_err(|e| match e {
        LabError::Config { .. } | LabError::Syntax(_) => LabError::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        },
        other => other,
    })
}

fn summarize_controls<'a>(controls: impl Iterator<Item = &'a Record>) {
    let (mut total, mut weakest) = (0, f64::INFINITY);
    for r in controls {
        total += 1;
        weakest = weakest.min(r.value);
        if !r.pass {
            println!(
                "negative control NOT detected: sample={} K={} case={} {} = {:e}",
                r.params.sample, r.params.steps, r.params.case, r.metric, r.value
            );
        }
    }
    if total > 0 {
        println!("{total} negative controls, smallest signal {weakest:e}");
    }
}

fn run(config: &Path, out: Option<PathBuf>, seed: Option<u64>, cap: Option<usize>) -> Result<bool, LabError> {
    let mut spec = load(config)?;
    if seed.is_some() {
        spec.seed = seed;
    }
    let mut capacity = Capacity::default();
    if let Some(side) = cap {
        capacity.max_local_side = side;
    }
    let result = run_study(&spec, &capacity)?;
    let dir = out.unwrap_or_else(|| Path::new("out").join(&spec.name));
    for path in write_outputs(&result, &dir)? {
        println!("wrote {}", path.display());
    }
    summarize_controls(result.negative_controls());
    let failures = result.failures();
    for f in &failures {
        eprintln!("FAIL {f}");
    }
    println!(
        "{}: {} records, {} fits, {} failed",
        result.study,
        result.records.len(),
        result.fits.len(),
        failures.len()
    );
    Ok(failures.is_empty())
}

fn report(dir: &Path) -> Result<bool, LabError> {
    let records = read_results(&dir.join("results.csv"))?;
    let fits_path = dir.join("fits.csv");
    let fits = if fits_path.exists() {
        read_fits(&fits_path)?
    } else {
        Vec::new()
    };
    let mut ok = true;
    for r in records.iter().filter(|r| !r.negative_control && !r.pass) {
        ok = false;
        println!(
            "FAIL {} sample={} level={} K={} case={} {} = {:e}",
            r.params.model, r.params.sample, r.params.level, r.params.steps, r.params.case, r.metric, r.value
        );
    }
    summarize_controls(records.iter().filter(|r| r.negative_control));
    for f in &fits {
        ok &= f.pass;
        let order = f
            .order
            .map_or_else(|| "exact".to_string(), |o| format!("{o:.4} ± {:.4}", f.std_err));
        println!(
            "{} {} level={} {}: order {} (target {} ± {}) {}",
            if f.pass { "PASS" } else { "FAIL" },
            f.model,
            f.level,
            f.case,
            order,
            f.target,
            f.tolerance,
            f.metric
        );
    }
    let checked = records.iter().filter(|r| !r.negative_control).count();
    println!(
        "{checked} checked records, {} fits: {}",
        fits.len(),
        if ok { "all pass" } else { "failures" }
    );
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, out, seed, cap } => run(&config, out, seed, cap),
        Command::Validate { schema: true, .. } => {
            print!("{SCHEMA}");
            Ok(true)
        }
        Command::Validate { config, .. } => {
            let path = config.expect("clap requires a config without --schema");
            load(&path).map(|spec| {
                println!(
                    "{}: {} study on `{}` is valid",
                    path.display(),
                    spec.study.kind(),
                    spec.name
                );
                true
            })
        }
        Command::Report { dir } => report(&dir),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(FAILED_CHECKS),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(ERROR)
        }
    }
}
