//! Durable records: the append-only event log and the state snapshot.
//!
//! `events.log` holds one JSON object per line. Every record has `event_id`,
//! `ts` and `kind`; the remaining keys depend on the kind (see
//! `docs/FORMATS.md`). `state.snap` is a single JSON document replaced
//! atomically after every transition batch.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::{Cause, DeviceState, StateTable, Transition};
use crate::registry::Msisdn;
use crate::time::Timestamp;

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("storage I/O failed on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path} line {line_no} is not a valid record: {reason}")]
    Corrupt {
        path: PathBuf,
        line_no: usize,
        reason: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StorageError + '_ {
    move |source| StorageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Sms,
    Api,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Unauthorized,
    Unparseable,
    UnknownDevice,
    Malformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CauseKind {
    Command,
    AutoOff,
    StartupRecovery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotStatus {
    Absent,
    Loaded,
    Corrupt,
}

/// A device and its state as written to disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersistedDevice {
    pub name: String,
    #[serde(flatten)]
    pub state: DeviceState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventBody {
    MessageAccepted {
        channel: Channel,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        msg_id: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sender: Option<Msisdn>,
        body: String,
        device: String,
        command: String,
    },
    MessageRejected {
        channel: Channel,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        msg_id: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sender: Option<Msisdn>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        body: Option<String>,
        outcome: RejectReason,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        detail: Option<String>,
    },
    Transition {
        device: String,
        from: DeviceState,
        to: DeviceState,
        cause: CauseKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source: Option<String>,
        clamped: bool,
    },
    Startup {
        snapshot: SnapshotStatus,
        /// Table as loaded, before any recovery transitions.
        devices: Vec<PersistedDevice>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        dropped: Vec<String>,
    },
    Fatal {
        error: String,
    },
}

impl EventBody {
    pub fn kind(&self) -> EventKind {
        match self {
            EventBody::MessageAccepted { .. } => EventKind::MessageAccepted,
            EventBody::MessageRejected { .. } => EventKind::MessageRejected,
            EventBody::Transition { .. } => EventKind::Transition,
            EventBody::Startup { .. } => EventKind::Startup,
            EventBody::Fatal { .. } => EventKind::Fatal,
        }
    }

    pub fn from_transition(t: &Transition) -> Self {
        let (cause, source) = match &t.cause {
            Cause::Command(src) => (CauseKind::Command, Some(src.clone())),
            Cause::AutoOff => (CauseKind::AutoOff, None),
            Cause::StartupRecovery => (CauseKind::StartupRecovery, None),
        };
        EventBody::Transition {
            device: t.device.to_string(),
            from: t.from,
            to: t.to,
            cause,
            source,
            clamped: matches!(t.to, DeviceState::OnTimed { clamped: true, .. }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    MessageAccepted,
    MessageRejected,
    Transition,
    Startup,
    Fatal,
}

impl std::str::FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown event kind {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub event_id: u64,
    pub ts: Timestamp,
    #[serde(flatten)]
    pub body: EventBody,
}

/// Writer side of `events.log`. There is exactly one per log file.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
    next_id: u64,
}

impl EventLog {
    /// Opens (or creates) the log. An unterminated final line left by a
    /// crash mid-append is cut off before new records are written.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, StorageError> {
        let path = path.into();
        let data = match fs::read(&path) {
            Ok(d) => d,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let complete = data.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        let events = parse_events(&path, &data[..complete])?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        if complete < data.len() {
            file.set_len(complete as u64).map_err(io_err(&path))?;
        }
        let next_id = events.last().map_or(1, |e| e.event_id + 1);
        Ok(EventLog { path, file, next_id })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    /// Appends and syncs one record, returning its id.
    pub fn append(&mut self, ts: Timestamp, body: EventBody) -> Result<u64, StorageError> {
        let event = Event {
            event_id: self.next_id,
            ts,
            body,
        };
        let mut line = serde_json::to_vec(&event).expect("events always serialize");
        line.push(b'\n');
        self.file.write_all(&line).map_err(io_err(&self.path))?;
        self.file.sync_data().map_err(io_err(&self.path))?;
        self.next_id += 1;
        Ok(event.event_id)
    }

    pub fn read_all(&self) -> Result<Vec<Event>, StorageError> {
        read_events(&self.path)
    }
}

fn parse_events(path: &Path, data: &[u8]) -> Result<Vec<Event>, StorageError> {
    let mut events: Vec<Event> = Vec::new();
    for (i, line) in data.split(|&b| b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let corrupt = |reason: String| StorageError::Corrupt {
            path: path.to_path_buf(),
            line_no: i + 1,
            reason,
        };
        let event: Event = serde_json::from_slice(line).map_err(|e| corrupt(e.to_string()))?;
        if let Some(prev) = events.last() {
            if event.event_id <= prev.event_id {
                return Err(corrupt(format!(
                    "event_id {} does not follow {}",
                    event.event_id, prev.event_id
                )));
            }
        }
        events.push(event);
    }
    Ok(events)
}

/// Reads every complete record. A missing file is an empty log; a trailing
/// line without a newline is a write in progress and is ignored.
pub fn read_events(path: &Path) -> Result<Vec<Event>, StorageError> {
    let data = match fs::read(path) {
        Ok(d) => d,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let complete = data.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    parse_events(path, &data[..complete])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventFilter {
    pub since_id: Option<u64>,
    pub kind: Option<EventKind>,
    pub limit: usize,
}

impl Default for EventFilter {
    fn default() -> Self {
        EventFilter {
            since_id: None,
            kind: None,
            limit: 100,
        }
    }
}

/// Events with id greater than `since_id` and matching `kind`, oldest first.
pub fn filter_events(events: &[Event], filter: &EventFilter) -> Vec<Event> {
    events
        .iter()
        .filter(|e| filter.since_id.is_none_or(|s| e.event_id > s))
        .filter(|e| filter.kind.is_none_or(|k| e.body.kind() == k))
        .take(filter.limit.max(1))
        .cloned()
        .collect()
}

pub fn query_messages(path: &Path, filter: &EventFilter) -> Result<Vec<Event>, StorageError> {
    Ok(filter_events(&read_events(path)?, filter))
}

/// Rebuilds device states from the log: a startup record resets to the table
/// it carries, and each transition sets its device to the `to` state.
pub fn replay_transitions(events: &[Event]) -> BTreeMap<String, DeviceState> {
    let mut states = BTreeMap::new();
    for e in events {
        match &e.body {
            EventBody::Startup { devices, .. } => {
                states = devices.iter().map(|d| (d.name.clone(), d.state)).collect();
            }
            EventBody::Transition { device, to, .. } => {
                states.insert(device.clone(), *to);
            }
            _ => {}
        }
    }
    states
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub written_at: Timestamp,
    pub devices: Vec<PersistedDevice>,
}

impl Snapshot {
    pub fn of(table: &StateTable, now: Timestamp) -> Self {
        Snapshot {
            written_at: now,
            devices: table
                .iter()
                .map(|(name, state)| PersistedDevice {
                    name: name.to_string(),
                    state: *state,
                })
                .collect(),
        }
    }

    pub fn entries(&self) -> Vec<(String, DeviceState)> {
        self.devices.iter().map(|d| (d.name.clone(), d.state)).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("snapshot {path} is corrupt: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error(transparent)]
    Storage(#[from] StorageError),
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

fn stage_snapshot(path: &Path, snapshot: &Snapshot) -> Result<PathBuf, StorageError> {
    let tmp = temp_path(path);
    let mut data = serde_json::to_vec_pretty(snapshot).expect("snapshots always serialize");
    data.push(b'\n');
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&data).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    Ok(tmp)
}

fn commit_snapshot(tmp: &Path, path: &Path) -> Result<(), StorageError> {
    fs::rename(tmp, path).map_err(io_err(path))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        // Directory fsync is best effort; not every filesystem supports it.
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

/// Replaces the snapshot atomically: write a temp file, sync, rename.
pub fn write_snapshot(path: &Path, table: &StateTable, now: Timestamp) -> Result<(), StorageError> {
    let tmp = stage_snapshot(path, &Snapshot::of(table, now))?;
    commit_snapshot(&tmp, path)
}

/// `Ok(None)` when no snapshot exists yet.
pub fn load_snapshot(path: &Path) -> Result<Option<Snapshot>, SnapshotError> {
    let data = match fs::read(path) {
        Ok(d) => d,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(io_err(path)(e).into()),
    };
    serde_json::from_slice(&data)
        .map(Some)
        .map_err(|e| SnapshotError::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}
