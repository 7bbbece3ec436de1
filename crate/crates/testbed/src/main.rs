use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use ofo_testbed::log::CsvLogWriter;
use ofo_testbed::scenario::Pace;
use ofo_testbed::server::{self, Pacing};
use ofo_testbed::{Scenario, Simulation, LOG_DIR_ENV};

#[derive(Parser)]
#[command(name = "ofo", version, about = "Closed-loop OFO volt/VAr testbed")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PaceArg {
    Real,
    Fast,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its log.
    Run {
        scenario: PathBuf,
        /// Override the scenario's run length.
        #[arg(long)]
        steps: Option<u64>,
        /// CSV log path; defaults to $OFO_LOG_DIR/<name>.csv when that is set.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        pace: Option<PaceArg>,
    },
    /// Run a scenario live behind the operator HTTP API.
    Serve {
        scenario: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, value_enum, default_value_t = PaceArg::Real)]
        pace: PaceArg,
        /// Wall-clock milliseconds per step, overriding the pace.
        #[arg(long)]
        step_ms: Option<u64>,
    },
    /// Check a scenario and everything it references.
    Validate { scenario: PathBuf },
}

fn load(path: &Path) -> Result<Scenario, ExitCode> {
    Scenario::load(path).map_err(|e| {
        eprintln!("{e}");
        ExitCode::from(2)
    })
}

/// Explicit path, else `$OFO_LOG_DIR/<name>.csv`, else none.
fn log_path(out: Option<PathBuf>, name: &str) -> Option<PathBuf> {
    out.or_else(|| std::env::var_os(LOG_DIR_ENV).map(|d| PathBuf::from(d).join(format!("{name}.csv"))))
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// Config snapshot stored next to a CSV log.
fn write_snapshot(csv: &Path, scenario: &Scenario) -> anyhow::Result<()> {
    let path = csv.with_extension("scenario.json");
    ensure_parent(&path)?;
    let json = serde_json::to_string_pretty(&scenario.file)?;
    std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    ensure_parent(path)?;
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn run(mut scenario: Scenario, out: Option<PathBuf>, pace: Pace) -> anyhow::Result<()> {
    let path = log_path(out, &scenario.name);
    let mut writer = match &path {
        Some(p) => {
            write_snapshot(p, &scenario)?;
            let sc = &scenario;
            Some(CsvLogWriter::new(
                create(p)?,
                &sc.grid.measurement_buses,
                sc.plant.inverters.len(),
            )?)
        }
        None => None,
    };
    scenario.pace = pace;
    let period = Duration::from_secs(scenario.plant.period_s);
    let mut sim = Simulation::new(scenario)?;
    while !sim.is_finished() {
        let started = std::time::Instant::now();
        let rec = sim.step()?;
        if let Some(w) = writer.as_mut() {
            w.write_record(rec)?;
            if pace == Pace::Real {
                w.flush()?;
            }
        }
        if pace == Pace::Real {
            std::thread::sleep(period.saturating_sub(started.elapsed()));
        }
    }
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    let log = sim.log();
    let fallback = log.records().iter().filter(|r| r.flags.fallback).count();
    let last = log.records().last().expect("at least one step");
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "steps      {}", log.len())?;
    writeln!(stdout, "cost       {}", log.total_cost())?;
    writeln!(
        stdout,
        "levels     {:?}",
        last.decision.commands.iter().map(|l| l.get()).collect::<Vec<_>>()
    )?;
    writeln!(stdout, "fallback   {fallback} step(s)")?;
    if let Some(p) = path {
        writeln!(stdout, "log        {}", p.display())?;
    }
    Ok(())
}

async fn serve(scenario: Scenario, port: u16, pacing: Pacing) -> anyhow::Result<()> {
    let csv: Option<Box<dyn Write + Send>> = match log_path(None, &scenario.name) {
        Some(p) => {
            write_snapshot(&p, &scenario)?;
            Some(Box::new(create(&p)?))
        }
        None => None,
    };
    let service = server::start(Simulation::new(scenario)?, pacing, csv);
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port))
        .await
        .with_context(|| format!("binding port {port}"))?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    server::serve(service, listener).await?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { scenario } => {
            return match load(&scenario) {
                Ok(s) => {
                    println!(
                        "{}: ok ({} steps, {} inverters, {} measurement buses)",
                        scenario.display(),
                        s.steps,
                        s.plant.inverters.len(),
                        s.grid.measurement_buses.len()
                    );
                    ExitCode::SUCCESS
                }
                Err(code) => code,
            }
        }
        Command::Run {
            scenario,
            steps,
            out,
            pace,
        } => {
            let mut s = match load(&scenario) {
                Ok(s) => s,
                Err(code) => return code,
            };
            if let Some(n) = steps {
                s.steps = n;
                s.file.steps = n;
            }
            let pace = match pace {
                Some(PaceArg::Real) => Pace::Real,
                Some(PaceArg::Fast) => Pace::Fast,
                None => s.pace,
            };
            run(s, out, pace)
        }
        Command::Serve {
            scenario,
            port,
            pace,
            step_ms,
        } => {
            let s = match load(&scenario) {
                Ok(s) => s,
                Err(code) => return code,
            };
            let pacing = match (step_ms, pace) {
                (Some(ms), _) => Pacing::Every(Duration::from_millis(ms)),
                (None, PaceArg::Real) => Pacing::Every(Duration::from_secs(s.plant.period_s)),
                (None, PaceArg::Fast) => Pacing::Unpaced,
            };
            tokio::runtime::Runtime::new()
                .context("starting the runtime")
                .and_then(|rt| rt.block_on(serve(s, port, pacing)))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
