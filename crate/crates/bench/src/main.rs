use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use llmscale_bench::report::{summary_table, write_raw};
use llmscale_bench::sim::run_sim;
use llmscale_bench::{compare, run_scenario, BenchError, BenchReport, Source, TraceColumns, WorkloadSpec};
use llmscale_sim::Scenario;

#[derive(Parser)]
#[command(name = "bench", version, about = "Streaming latency benchmark for OpenAI-compatible targets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a closed-loop workload against a target.
    Run {
        /// Base URL, e.g. http://127.0.0.1:8080
        #[arg(long)]
        target: String,
        #[arg(long)]
        model: String,
        #[arg(long)]
        concurrency: u32,
        #[arg(long)]
        requests: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV trace with request/response token columns.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value = "Request tokens")]
        request_column: String,
        #[arg(long, default_value = "Response tokens")]
        response_column: String,
        /// Prompt length for synthetic requests.
        #[arg(long, default_value_t = 32)]
        input_tokens: u32,
        /// Output length for synthetic requests.
        #[arg(long, default_value_t = 128)]
        max_tokens: u32,
        #[arg(long, env = "BENCH_API_KEY", hide_env_values = true)]
        api_key: Option<String>,
        /// Repetitions of the whole workload.
        #[arg(long, default_value_t = 1)]
        runs: u32,
        /// Raw per-request timings, one JSON object per line.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Summary report as JSON, the input of `bench compare`.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Compare two summary reports: candidate minus baseline.
    Compare {
        baseline: PathBuf,
        candidate: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run the load of a scenario file against the deterministic simulator.
    Sim {
        #[arg(long)]
        scenario: PathBuf,
        /// Simulated time to run, e.g. "10m".
        #[arg(long, value_parser = humantime_serde::re::humantime::parse_duration)]
        duration: Duration,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(3) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn write_file(path: &PathBuf, f: impl FnOnce(&mut BufWriter<File>) -> Result<(), BenchError>) -> Result<(), BenchError> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

async fn run(command: Command) -> Result<(), BenchError> {
    match command {
        Command::Run {
            target,
            model,
            concurrency,
            requests,
            seed,
            trace,
            request_column,
            response_column,
            input_tokens,
            max_tokens,
            api_key,
            runs,
            out,
            summary,
        } => {
            let source = match trace {
                Some(path) => Source::Trace {
                    path,
                    columns: TraceColumns {
                        request_tokens: request_column,
                        response_tokens: response_column,
                    },
                },
                None => Source::Synthetic {
                    input_tokens,
                    max_tokens,
                },
            };
            let spec = WorkloadSpec {
                target_url: target,
                model,
                concurrency,
                total_requests: requests,
                seed,
                source,
                api_key,
            };
            let mut all = Vec::new();
            for _ in 0..runs.max(1) {
                all.push(run_scenario(&spec).await?.timings);
            }
            let report = BenchReport::new(spec, &all);
            print!("{}", summary_table(&report.pooled));
            if let Some(path) = out {
                write_file(&path, |w| write_raw(w, &all))?;
            }
            if let Some(path) = summary {
                write_file(&path, |w| Ok(serde_json::to_writer_pretty(w, &report)?))?;
            }
        }
        Command::Compare {
            baseline,
            candidate,
            json,
        } => {
            let c = compare(&BenchReport::load(&baseline)?, &BenchReport::load(&candidate)?)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&c)?);
            } else {
                print!("{c}");
            }
        }
        Command::Sim { scenario, duration, out } => {
            let timings = run_sim(Scenario::load(&scenario)?, duration)?;
            let summary = llmscale_core::timing::MetricsSummary::from_timings(&timings);
            print!("{}", summary_table(&summary));
            if let Some(path) = out {
                write_file(&path, |w| write_raw(w, &[timings]))?;
            }
        }
    }
    Ok(())
}
