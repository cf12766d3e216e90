use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use basilic_core::analysis::{blockdepth_curve, branch_curve, frontier, min_blockdepth};
use basilic_core::harness::suites::{run_suite, SUITES};
use basilic_core::harness::{parse_seeds, run_batch, write_csv, HarnessError, RunRecord, Scenario};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::Serialize;

/// Environment variable naming the directory for run outputs.
const OUT_ENV: &str = "BASILIC_OUT_DIR";

const EXIT_SCENARIO: u8 = 2;
const EXIT_VIOLATION: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "basilic", version, about = "Accountable consensus simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file over a batch of seeds.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// `a..b`, `a,b,c` or one seed; defaults to the scenario's own list.
        #[arg(long)]
        seeds: Option<String>,
        /// Output directory; overrides the environment variable.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a named acceptance suite.
    Suite {
        /// Suite name, or `list`.
        name: String,
    },
    /// Emit analysis tables as CSV.
    Analyze {
        #[command(subcommand)]
        table: Table,
    },
}

#[derive(Subcommand)]
enum Table {
    /// Extremal tolerated profiles at threshold h.
    Frontier {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        h: usize,
    },
    /// Branch counts over the deceitful ratio.
    Branch {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 2.0 / 3.0)]
        h_ratio: f64,
    },
    /// Minimum blockdepth; one `--rho` prints the depth, several print a table.
    Blockdepth {
        #[arg(long)]
        a: f64,
        #[arg(long)]
        b: f64,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        rho: Vec<f64>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Run { scenario, seeds, out } => run(scenario, seeds, out),
        Command::Suite { name } => suite(&name),
        Command::Analyze { table } => analyze(table),
    }
}

fn scenario_error(e: HarnessError) -> anyhow::Result<ExitCode> {
    eprintln!("error: {e}");
    Ok(ExitCode::from(EXIT_SCENARIO))
}

fn run(path: PathBuf, seeds: Option<String>, out: Option<PathBuf>) -> anyhow::Result<ExitCode> {
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return Ok(ExitCode::from(EXIT_SCENARIO));
        }
    };
    let scenario = match Scenario::from_json(&text) {
        Ok(s) => s,
        Err(e) => return scenario_error(e),
    };
    let seeds = match seeds {
        Some(arg) => match parse_seeds(&arg) {
            Ok(s) => s,
            Err(e) => return scenario_error(e),
        },
        None => match &scenario.seeds {
            Some(s) if !s.is_empty() => s.clone(),
            _ => {
                eprintln!("error: scenario field `seeds`: none given and no --seeds flag");
                return Ok(ExitCode::from(EXIT_SCENARIO));
            }
        },
    };

    let dir = out
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let records = run_batch(&scenario, &seeds);
    let stem = file_stem(&scenario.name);
    let csv_path = dir.join(format!("{stem}.csv"));
    write_csv(fs::File::create(&csv_path)?, &records)?;
    let jsonl_path = dir.join(format!("{stem}.jsonl"));
    write_jsonl(&jsonl_path, &records)?;

    let violations: Vec<&RunRecord> = records.iter().filter(|r| r.violation.is_some()).collect();
    println!(
        "{}: {} runs, {} violations -> {}",
        scenario.name,
        records.len(),
        violations.len(),
        csv_path.display()
    );
    for r in &violations {
        eprintln!("seed {}: {}", r.seed, r.violation.as_deref().unwrap_or_default());
    }
    Ok(if violations.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VIOLATION)
    })
}

fn file_stem(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    if s.is_empty() {
        "scenario".into()
    } else {
        s
    }
}

fn write_jsonl(path: &PathBuf, records: &[RunRecord]) -> anyhow::Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn suite(name: &str) -> anyhow::Result<ExitCode> {
    if name == "list" {
        for (s, ids) in SUITES {
            println!("{s}: {ids:?}");
        }
        return Ok(ExitCode::SUCCESS);
    }
    let Some(verdicts) = run_suite(name, |v| println!("{}", v.line())) else {
        let names: Vec<&str> = SUITES.iter().map(|(s, _)| *s).collect();
        eprintln!("error: unknown suite `{name}`; known: {}", names.join(", "));
        return Ok(ExitCode::from(EXIT_USAGE));
    };
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!("{} passed, {failed} failed", verdicts.len() - failed);
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn print_csv<T: Serialize>(rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(io::stdout().lock());
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn analyze(table: Table) -> anyhow::Result<ExitCode> {
    match table {
        Table::Frontier { n, h } => match frontier(n, h) {
            Ok(rows) => print_csv(&rows)?,
            Err(e) => {
                eprintln!("error: {e}");
                return Ok(ExitCode::from(EXIT_SCENARIO));
            }
        },
        Table::Branch { n, h_ratio } => print_csv(&branch_curve(n, h_ratio))?,
        Table::Blockdepth { a, b, rho } => {
            if let [rho] = rho[..] {
                match min_blockdepth(a, b, rho) {
                    Ok(w) => println!("{w}"),
                    Err(e) => {
                        eprintln!("error: {e}");
                        return Ok(ExitCode::from(EXIT_SCENARIO));
                    }
                }
            } else {
                let rhos = if rho.is_empty() {
                    (1..20).map(|i| i as f64 / 20.0).collect()
                } else {
                    rho
                };
                print_csv(&blockdepth_curve(a, b, &rhos))?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
