//! homectl: offline tools for the command language, configs, traces and logs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use homectl_core::engine::DataPaths;
use homectl_core::gateway::Inbox;
use homectl_core::registry::{parse_config, Msisdn};
use homectl_core::relay::read_trace;
use homectl_core::store::{query_messages, EventFilter, EventKind};
use homectl_core::time::{Clock, SystemClock};
use homectl_core::{parse_command, render_command};

#[derive(Debug, Parser)]
#[command(version, about = "homectl command-line tools")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Parse a message body and print its canonical form.
    Parse {
        /// Message text; multiple words are joined with single spaces.
        #[arg(required = true, num_args = 1..)]
        text: Vec<String>,
    },
    /// Validate a config file and list its devices.
    CheckConfig { path: PathBuf },
    /// Decode a relay trace, optionally naming lines from a config.
    Trace {
        path: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Drop a message into a data directory's inbox, as the SMS gateway would.
    Send {
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        #[arg(long)]
        from: String,
        #[arg(required = true, num_args = 1..)]
        body: Vec<String>,
    },
    /// Print event log records as JSON lines.
    Events {
        #[arg(long, default_value = "data")]
        data_dir: PathBuf,
        #[arg(long)]
        since_id: Option<u64>,
        #[arg(long, default_value_t = 100)]
        limit: usize,
        /// message_accepted, message_rejected, transition, startup or fatal
        #[arg(long)]
        kind: Option<String>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn read(path: &PathBuf) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn run(cmd: Cmd) -> Result<(), String> {
    match cmd {
        Cmd::Parse { text } => {
            let cmd = parse_command(&text.join(" ")).map_err(|e| e.to_string())?;
            println!("{}", render_command(&cmd));
        }
        Cmd::CheckConfig { path } => {
            let cfg = parse_config(&read(&path)?).map_err(|e| format!("{}: {e}", path.display()))?;
            for d in cfg.registry.devices() {
                println!("{:<12} line={} policy={}", d.name, d.line.index(), d.policy);
            }
            println!(
                "{} device(s), {} allowed sender(s), token {}, poll_ms {}",
                cfg.registry.len(),
                cfg.allowlist.len(),
                if cfg.token.is_some() { "set" } else { "MISSING" },
                cfg.poll_ms
            );
        }
        Cmd::Trace { path, config } => {
            let registry = match config {
                Some(c) => Some(parse_config(&read(&c)?).map_err(|e| e.to_string())?.registry),
                None => None,
            };
            let frames = read_trace(&read(&path)?).map_err(|e| e.to_string())?;
            for (at, frame) in frames {
                let on: Vec<String> = match &registry {
                    Some(reg) => reg
                        .devices()
                        .iter()
                        .filter(|d| frame.is_set(d.line.index()))
                        .map(|d| d.name.to_string())
                        .collect(),
                    None => (0..8).filter(|&l| frame.is_set(l)).map(|l| format!("line{l}")).collect(),
                };
                println!("{} {} {:08b} [{}]", at.format_secs(), frame, frame.bits(), on.join(" "));
            }
        }
        Cmd::Send { data_dir, from, body } => {
            let sender = Msisdn::parse(&from).ok_or_else(|| format!("{from:?} is not +<7..15 digits>"))?;
            let inbox = Inbox::open(DataPaths::new(&data_dir).inbox).map_err(|e| e.to_string())?;
            let name = inbox
                .deliver(&sender, &body.join(" "), SystemClock.now())
                .map_err(|e| e.to_string())?;
            println!("{name}");
        }
        Cmd::Events { data_dir, since_id, limit, kind } => {
            let kind = kind.map(|k| k.parse::<EventKind>()).transpose()?;
            let filter = EventFilter { since_id, kind, limit };
            let events = query_messages(&DataPaths::new(&data_dir).events, &filter).map_err(|e| e.to_string())?;
            for e in events {
                println!("{}", serde_json::to_string(&e).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(())
}
