//! `bench`: run forecasting grids and inspect their results.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 data error,
//! 3 one or more grid cells failed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tsbench::data::{self, SynthKind};
use tsbench::harness::grid::{reevaluate, CellStatus, Manifest};
use tsbench::harness::{prediction_rows, run_grid, selftest, write_predictions, CellKey, GridError, RunConfig};

#[derive(Parser)]
#[command(name = "bench", version, about = "Transformer and baseline forecasters on daily closing prices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Md,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Train and score every cell of a config's grid, resuming a previous run.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's `parallelism`.
        #[arg(long)]
        parallelism: Option<usize>,
        /// Overrides the config's `output_dir`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Reload a cell's checkpoint and score it on the test split again.
    Eval {
        /// A cell directory, `<runs>/cells/<model>_<w>_<h>`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print the results table of a run.
    Table {
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one-step-ahead test predictions of a cell as CSV.
    Dump {
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
        /// `model,window,horizon`, e.g. `decoder_only,10,1`.
        #[arg(long)]
        cell: CellKey,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in sanity checks.
    Selftest,
    /// Write a synthetic `date,close` series.
    Synth {
        #[arg(long, default_value = "sine_trend")]
        kind: SynthKind,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summary statistics of a `date,close` file.
    Describe { csv: PathBuf },
}

struct Failure {
    code: u8,
    msg: String,
}

fn config(msg: impl ToString) -> Failure {
    Failure {
        code: 1,
        msg: msg.to_string(),
    }
}

fn data(msg: impl ToString) -> Failure {
    Failure {
        code: 2,
        msg: msg.to_string(),
    }
}

fn grid_failure(e: GridError) -> Failure {
    match e {
        GridError::Data(_) => data(e),
        _ => config(e),
    }
}

fn write_out(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| config(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// `<runs>/cells/<model>_<w>_<h>` into the run directory and cell.
fn split_cell_dir(dir: &Path) -> Result<(PathBuf, CellKey), Failure> {
    let bad = || config(format!("{} is not a `<runs>/cells/<model>_<w>_<h>` directory", dir.display()));
    let dir = dir.canonicalize().map_err(|e| config(format!("{}: {e}", dir.display())))?;
    let name = dir.file_name().and_then(|n| n.to_str()).ok_or_else(bad)?;
    let cell: CellKey = name.parse().map_err(|_| bad())?;
    let cells = dir.parent().ok_or_else(bad)?;
    if cells.file_name().and_then(|n| n.to_str()) != Some("cells") {
        return Err(bad());
    }
    Ok((cells.parent().ok_or_else(bad)?.to_path_buf(), cell))
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            config: path,
            parallelism,
            output_dir,
            quiet,
        } => {
            let mut rc = RunConfig::load(&path).map_err(config)?;
            if let Some(p) = parallelism {
                if p == 0 {
                    return Err(config("--parallelism must be at least 1"));
                }
                rc.parallelism = p;
            }
            if let Some(d) = output_dir {
                rc.output_dir = d;
            }
            let progress = |r: &tsbench::harness::grid::CellRecord| {
                if quiet {
                    return;
                }
                match (&r.status, &r.metrics) {
                    (CellStatus::Done, Some(m)) => eprintln!(
                        "{:<24} mae {:.6}  mse {:.3e}  ({:.1}s)",
                        r.cell.dir_name(),
                        m.mae,
                        m.mse,
                        r.fit_seconds
                    ),
                    _ => eprintln!(
                        "{:<24} FAILED: {}",
                        r.cell.dir_name(),
                        r.error.as_deref().unwrap_or("unknown")
                    ),
                }
            };
            let out = run_grid(&rc, &progress).map_err(grid_failure)?;
            eprintln!(
                "{} trained, {} already complete, {} failed; results in {}",
                out.trained.len(),
                out.skipped.len(),
                out.failed.len(),
                rc.output_dir.display()
            );
            if out.failed.is_empty() {
                Ok(())
            } else {
                let list: Vec<String> = out.failed.iter().map(|(k, e)| format!("  {}: {e}", k.dir_name())).collect();
                Err(Failure {
                    code: 3,
                    msg: format!("{} cell(s) failed:\n{}", out.failed.len(), list.join("\n")),
                })
            }
        }
        Command::Eval { checkpoint } => {
            let (run_dir, cell) = split_cell_dir(&checkpoint)?;
            let (m, _, _) = reevaluate(&run_dir, &cell).map_err(grid_failure)?;
            println!("cell       {}", cell.dir_name());
            println!("windows    {}", m.n_windows);
            println!("mae        {}", m.mae);
            println!("mse        {}", m.mse);
            println!("mae_price  {}", m.mae_price);
            println!("mse_price  {}", m.mse_price);
            Ok(())
        }
        Command::Table { runs, format, out } => {
            let m = Manifest::load(&runs).map_err(grid_failure)?;
            let g = m.result();
            let text = match format {
                Format::Md => g.to_markdown(),
                Format::Csv => g.to_csv(),
            };
            write_out(&text, out.as_deref())
        }
        Command::Dump { runs, cell, out } => {
            let (_, prepared, preds) = reevaluate(&runs, &cell).map_err(grid_failure)?;
            write_predictions(&prediction_rows(&preds, &prepared), &out).map_err(config)
        }
        Command::Selftest => {
            let checks = selftest::run();
            for c in &checks {
                let tag = if c.passed { "PASS" } else { "FAIL" };
                println!("{tag}  {}  {}", c.name, c.detail);
            }
            if checks.iter().all(|c| c.passed) {
                Ok(())
            } else {
                Err(config("self-test failed"))
            }
        }
        Command::Synth { kind, n, seed, out } => {
            let s = data::synth_series(kind, n, seed);
            data::write_csv(&s, &out).map_err(data)
        }
        Command::Describe { csv } => {
            let s = data::load_csv(&csv).map_err(data)?;
            let st = data::describe(s.closes()).ok_or_else(|| data("empty series"))?;
            let (first, last) = (s.dates()[0], s.dates()[s.len() - 1]);
            println!("rows   {}", st.count);
            println!("dates  {first} .. {last}");
            println!("mean   {:.2}", st.mean);
            println!("std    {:.2}", st.std);
            println!("min    {:.2}", st.min);
            println!("max    {:.2}", st.max);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    // clap's own usage-error code (2) would collide with data errors.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
