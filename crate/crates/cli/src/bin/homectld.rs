//! homectld: the appliance control service.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use homectl::{router, Service, ServiceOptions};
use homectl_core::engine::DataPaths;
use homectl_core::registry::parse_config;
use homectl_core::relay::TraceBus;
use homectl_core::time::SystemClock;
use tracing::{error, info};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(version, about = "SMS-commanded appliance controller")]
struct Args {
    /// Service configuration (devices, allowlist, token, poll_ms).
    #[arg(long)]
    config: PathBuf,
    /// Root for inbox/, events.log, state.snap and relay.trace.
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Directory with the built control panel, served at `/`.
    #[arg(long)]
    panel_dir: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let args = Args::parse();
    match run(args).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}

async fn run(args: Args) -> Result<(), Box<dyn std::error::Error>> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| format!("reading {}: {e}", args.config.display()))?;
    let config = parse_config(&text).map_err(|e| format!("{}: {e}", args.config.display()))?;
    let options = ServiceOptions::from_config(&config);

    let paths = DataPaths::new(&args.data_dir);
    std::fs::create_dir_all(&paths.root)?;
    let bus = TraceBus::open(&paths.trace)?;
    let (service, report) = Service::start(config, paths, Box::new(bus), Arc::new(SystemClock), options)?;
    info!(snapshot = ?report.snapshot, frame = %report.frame, "recovered state");

    let listener = tokio::net::TcpListener::bind(args.bind).await?;
    info!(addr = %listener.local_addr()?, "listening");
    let app = router(service.clone(), args.panel_dir);
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown_signal())
        .await?;
    service.shutdown();
    Ok(())
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("install SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
    info!("shutting down");
}
