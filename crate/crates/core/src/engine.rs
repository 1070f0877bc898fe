//! The single writer.
//!
//! [`Engine`] owns the state table, the event log, the snapshot and the relay
//! bus. Every mutation (an inbox message, an API command, an expiry sweep)
//! is one call on `&mut Engine`, so callers serialize simply by owning it.
//! Each call that produces transitions logs them, writes one relay frame and
//! replaces the snapshot before returning.
//!
//! Any storage or bus failure halts the engine; every later call returns
//! [`EngineError::Halted`].

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use tracing::{error, info, warn};

use crate::command::{Command, ParseErrorKind};
use crate::controller::{
    apply_command, expire_due, next_deadline, recover, snapshot_view, DeviceState, DeviceView,
    Rejection, StateTable, Transition,
};
use crate::gateway::{examine, examine_text, InboxItem, IngestOutcome, Verdict};
use crate::registry::{Allowlist, Registry};
use crate::relay::{encode_frame, BackendUnavailable, BusBackend, RelayFrame};
use crate::store::{
    load_snapshot, write_snapshot, Channel, EventBody, EventLog, PersistedDevice, RejectReason,
    SnapshotError, SnapshotStatus, StorageError,
};
use crate::time::Timestamp;

/// Where the service keeps its files under one data directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataPaths {
    pub root: PathBuf,
    pub inbox: PathBuf,
    pub events: PathBuf,
    pub snapshot: PathBuf,
    pub trace: PathBuf,
}

impl DataPaths {
    pub fn new(root: impl AsRef<Path>) -> Self {
        let root = root.as_ref().to_path_buf();
        DataPaths {
            inbox: root.join("inbox"),
            events: root.join("events.log"),
            snapshot: root.join("state.snap"),
            trace: root.join("relay.trace"),
            root,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Bus(#[from] BackendUnavailable),
    #[error("controller rejected a validated command: {0}")]
    Internal(#[from] Rejection),
    #[error("engine halted after fatal error: {0}")]
    Halted(String),
}

/// Why an API command was turned down.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandRejection {
    Parse(ParseErrorKind),
    UnknownDevice,
}

impl CommandRejection {
    pub fn as_str(self) -> &'static str {
        match self {
            CommandRejection::Parse(k) => k.as_str(),
            CommandRejection::UnknownDevice => "UnknownDevice",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommandOutcome {
    Accepted {
        event_id: u64,
        command: Command,
        transition: Transition,
    },
    Rejected {
        event_id: u64,
        reason: CommandRejection,
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StartupReport {
    pub snapshot: SnapshotStatus,
    pub transitions: Vec<Transition>,
    pub dropped: Vec<String>,
    pub frame: RelayFrame,
}

pub struct Engine<B> {
    registry: Arc<Registry>,
    allowlist: Allowlist,
    table: StateTable,
    log: EventLog,
    snapshot_path: PathBuf,
    bus: B,
    /// Inbox ids with a persisted outcome, and whether it was an acceptance.
    seen: HashMap<String, bool>,
    last_now: Timestamp,
    halted: Option<String>,
}

impl<B: BusBackend> Engine<B> {
    /// Loads the snapshot, recovers state, records the startup and rewrites
    /// the relay frame.
    pub fn open(
        registry: Arc<Registry>,
        allowlist: Allowlist,
        paths: &DataPaths,
        bus: B,
        now: Timestamp,
    ) -> Result<(Self, StartupReport), EngineError> {
        let mut log = EventLog::open(&paths.events)?;
        let mut seen = HashMap::new();
        for event in log.read_all()? {
            match event.body {
                EventBody::MessageAccepted { channel: Channel::Sms, msg_id: Some(id), .. } => {
                    seen.insert(id, true);
                }
                EventBody::MessageRejected { channel: Channel::Sms, msg_id: Some(id), .. } => {
                    seen.insert(id, false);
                }
                _ => {}
            }
        }

        let (status, persisted) = match load_snapshot(&paths.snapshot) {
            Ok(Some(s)) => (SnapshotStatus::Loaded, s.entries()),
            Ok(None) => (SnapshotStatus::Absent, Vec::new()),
            Err(SnapshotError::Corrupt { path, reason }) => {
                warn!(path = %path.display(), %reason, "corrupt snapshot, starting all off");
                (SnapshotStatus::Corrupt, Vec::new())
            }
            Err(SnapshotError::Storage(e)) => return Err(e.into()),
        };

        let loaded: Vec<PersistedDevice> = registry
            .devices()
            .iter()
            .map(|d| PersistedDevice {
                name: d.name.to_string(),
                state: persisted
                    .iter()
                    .find(|(n, _)| n == d.name.as_str())
                    .map_or(DeviceState::Off, |(_, s)| *s),
            })
            .collect();
        let recovery = recover(&persisted, &registry, now);
        for name in &recovery.dropped {
            warn!(device = %name, "snapshot device no longer registered, dropped");
        }
        log.append(
            now,
            EventBody::Startup {
                snapshot: status,
                devices: loaded,
                dropped: recovery.dropped.clone(),
            },
        )?;

        let mut engine = Engine {
            registry,
            allowlist,
            table: recovery.table,
            log,
            snapshot_path: paths.snapshot.clone(),
            bus,
            seen,
            last_now: now,
            halted: None,
        };
        engine.commit(&recovery.transitions, now)?;
        let frame = encode_frame(&engine.table, &engine.registry);
        info!(snapshot = ?status, recovered = recovery.transitions.len(), %frame, "engine started");
        Ok((
            engine,
            StartupReport {
                snapshot: status,
                transitions: recovery.transitions,
                dropped: recovery.dropped,
                frame,
            },
        ))
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn table(&self) -> &StateTable {
        &self.table
    }

    pub fn next_deadline(&self) -> Option<Timestamp> {
        next_deadline(&self.table)
    }

    pub fn view(&self, now: Timestamp) -> Vec<DeviceView> {
        snapshot_view(&self.table, &self.registry, now)
    }

    pub fn halted(&self) -> Option<&str> {
        self.halted.as_deref()
    }

    pub fn bus(&self) -> &B {
        &self.bus
    }

    pub fn log_path(&self) -> &Path {
        self.log.path()
    }

    /// Has this inbox id already been given an outcome?
    pub fn is_processed(&self, id: &str) -> bool {
        self.seen.contains_key(id)
    }

    fn tick_now(&mut self, now: Timestamp) -> Timestamp {
        self.last_now = self.last_now.max(now);
        self.last_now
    }

    fn guard(&self) -> Result<(), EngineError> {
        match &self.halted {
            Some(reason) => Err(EngineError::Halted(reason.clone())),
            None => Ok(()),
        }
    }

    fn fail(&mut self, err: EngineError, now: Timestamp) -> EngineError {
        let reason = err.to_string();
        error!(error = %reason, "fatal engine error, refusing further commands");
        if !matches!(err, EngineError::Storage(_)) {
            let _ = self.log.append(now, EventBody::Fatal { error: reason.clone() });
        }
        self.halted = Some(reason);
        err
    }

    fn run<T>(
        &mut self,
        now: Timestamp,
        f: impl FnOnce(&mut Self, Timestamp) -> Result<T, EngineError>,
    ) -> Result<T, EngineError> {
        self.guard()?;
        let now = self.tick_now(now);
        f(self, now).map_err(|e| self.fail(e, now))
    }

    /// Logs a batch of transitions, writes the resulting frame and snapshot.
    fn commit(&mut self, transitions: &[Transition], now: Timestamp) -> Result<(), EngineError> {
        for t in transitions {
            self.log.append(now, EventBody::from_transition(t))?;
        }
        let frame = encode_frame(&self.table, &self.registry);
        self.bus.write(frame, now)?;
        write_snapshot(&self.snapshot_path, &self.table, now)?;
        Ok(())
    }

    fn apply(&mut self, cmd: &Command, now: Timestamp, source: &str) -> Result<Transition, EngineError> {
        let t = apply_command(&mut self.table, &self.registry, cmd, now, source)?;
        self.commit(std::slice::from_ref(&t), now)?;
        Ok(t)
    }

    /// Records the outcome for one inbox file and applies it if accepted.
    /// An id that already has an outcome is not processed again.
    pub fn ingest(&mut self, item: InboxItem, now: Timestamp) -> Result<IngestOutcome, EngineError> {
        self.run(now, |eng, now| {
            if let Some(&accepted) = eng.seen.get(&item.id) {
                return Ok(IngestOutcome::AlreadyProcessed { accepted });
            }
            let id = item.id;
            let msg = match item.message {
                Ok(m) => m,
                Err(e) => {
                    eng.log.append(
                        now,
                        EventBody::MessageRejected {
                            channel: Channel::Sms,
                            msg_id: Some(id.clone()),
                            sender: None,
                            body: None,
                            outcome: RejectReason::Malformed,
                            error: Some(e.kind().to_string()),
                            detail: Some(e.to_string()),
                        },
                    )?;
                    eng.seen.insert(id, false);
                    return Ok(IngestOutcome::RejectedMalformed(e));
                }
            };

            let verdict = examine(&msg, &eng.allowlist, &eng.registry);
            let reject = |outcome, error: Option<String>, detail: Option<String>| EventBody::MessageRejected {
                channel: Channel::Sms,
                msg_id: Some(id.clone()),
                sender: Some(msg.sender.clone()),
                body: Some(msg.body.clone()),
                outcome,
                error,
                detail,
            };
            let (body, outcome) = match verdict {
                Verdict::Unauthorized => (
                    reject(RejectReason::Unauthorized, None, None),
                    IngestOutcome::RejectedUnauthorized,
                ),
                Verdict::Unparseable(e) => (
                    reject(
                        RejectReason::Unparseable,
                        Some(e.kind.to_string()),
                        Some(e.detail.clone()),
                    ),
                    IngestOutcome::RejectedUnparseable(e),
                ),
                Verdict::UnknownDevice(name) => (
                    reject(
                        RejectReason::UnknownDevice,
                        Some("UnknownDevice".into()),
                        Some(format!("no device named {name:?}")),
                    ),
                    IngestOutcome::RejectedUnknownDevice,
                ),
                Verdict::Accept(command) => {
                    let event_id = eng.log.append(
                        now,
                        EventBody::MessageAccepted {
                            channel: Channel::Sms,
                            msg_id: Some(id.clone()),
                            sender: Some(msg.sender.clone()),
                            body: msg.body.clone(),
                            device: command.appliance.to_string(),
                            command: command.to_string(),
                        },
                    )?;
                    eng.seen.insert(id.clone(), true);
                    eng.apply(&command, now, &id)?;
                    return Ok(IngestOutcome::Accepted { command, event_id });
                }
            };
            eng.log.append(now, body)?;
            eng.seen.insert(id, false);
            Ok(outcome)
        })
    }

    /// Runs command text straight through parse, resolve and apply.
    pub fn submit_text(&mut self, text: &str, now: Timestamp) -> Result<CommandOutcome, EngineError> {
        self.run(now, |eng, now| match examine_text(text, &eng.registry) {
            Verdict::Accept(command) => {
                let event_id = eng.log.append(
                    now,
                    EventBody::MessageAccepted {
                        channel: Channel::Api,
                        msg_id: None,
                        sender: None,
                        body: text.to_string(),
                        device: command.appliance.to_string(),
                        command: command.to_string(),
                    },
                )?;
                let transition = eng.apply(&command, now, "api")?;
                Ok(CommandOutcome::Accepted {
                    event_id,
                    command,
                    transition,
                })
            }
            verdict => {
                let (outcome, reason, detail) = match verdict {
                    Verdict::Unparseable(e) => (RejectReason::Unparseable, CommandRejection::Parse(e.kind), e.detail),
                    Verdict::UnknownDevice(name) => (
                        RejectReason::UnknownDevice,
                        CommandRejection::UnknownDevice,
                        format!("no device named {name:?}"),
                    ),
                    Verdict::Accept(_) | Verdict::Unauthorized => unreachable!("examine_text never authenticates"),
                };
                let event_id = eng.log.append(
                    now,
                    EventBody::MessageRejected {
                        channel: Channel::Api,
                        msg_id: None,
                        sender: None,
                        body: Some(text.to_string()),
                        outcome,
                        error: Some(reason.as_str().to_string()),
                        detail: Some(detail.clone()),
                    },
                )?;
                Ok(CommandOutcome::Rejected {
                    event_id,
                    reason,
                    detail,
                })
            }
        })
    }

    /// Switches off every timed device that is due. An empty sweep writes nothing.
    pub fn expire(&mut self, now: Timestamp) -> Result<Vec<Transition>, EngineError> {
        self.run(now, |eng, now| {
            let fired = expire_due(&mut eng.table, now);
            if !fired.is_empty() {
                eng.commit(&fired, now)?;
            }
            Ok(fired)
        })
    }
}
