use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use llmscale_controlplane::{Config, ControlPlane};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "llmscale", version, about = "Serve LLM inference from batch-scheduled jobs")]
struct Cli {
    /// TOML configuration file; `LLMSCALE_*` variables override it.
    #[arg(long, short, global = true, env = "LLMSCALE_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = LogFormat::Json)]
    log_format: LogFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LogFormat {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gateways and the control loops.
    Serve,
    /// Issue an API key for a tenant and print it once.
    AddKey {
        #[arg(long)]
        tenant: String,
        #[arg(long, default_value = "default")]
        label: String,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn init_logging(format: LogFormat) {
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info"));
    let builder = tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr);
    match format {
        LogFormat::Json => builder.json().flatten_event(true).init(),
        LogFormat::Text => builder.init(),
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.log_format);
    let config = match Config::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command, config).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

async fn run(command: Command, config: Config) -> Result<(), Box<dyn std::error::Error>> {
    match command {
        Command::ShowConfig => {
            print!("{}", toml::to_string_pretty(&config)?);
        }
        Command::AddKey { tenant, label } => {
            if config.store.path.is_none() {
                eprintln!("warning: no store.path configured; the key only lives in this process");
            }
            let cp = ControlPlane::build(config)?;
            println!("{}", cp.add_api_key(&tenant, &label)?);
        }
        Command::Serve => {
            let running = ControlPlane::build(config)?.start().await?;
            tokio::signal::ctrl_c().await?;
            tracing::info!("shutting down");
            running.shutdown().await;
        }
    }
    Ok(())
}
