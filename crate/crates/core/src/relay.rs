//! The 8-line relay bus: frame encoding and the backends frames are written to.
//!
//! The shipped backend appends one line per frame to a trace file:
//!
//! ```text
//! 1970-01-01T00:00:00Z FRAME 0x01
//! ```

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use crate::controller::StateTable;
use crate::registry::Registry;
use crate::time::Timestamp;

/// Full image of the relay lines; bit `i` set means line `i` is energized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RelayFrame(pub u8);

impl RelayFrame {
    pub const ALL_OFF: RelayFrame = RelayFrame(0);

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn is_set(self, line: u8) -> bool {
        line < 8 && self.0 & (1 << line) != 0
    }
}

impl fmt::Display for RelayFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{:02X}", self.0)
    }
}

/// Folds device states onto their lines. Lines with no device stay 0.
pub fn encode_frame(table: &StateTable, registry: &Registry) -> RelayFrame {
    let bits = registry
        .devices()
        .iter()
        .filter(|d| table.get(d.name.as_str()).is_some_and(|s| s.is_on()))
        .fold(0u8, |acc, d| acc | d.line.mask());
    RelayFrame(bits)
}

#[derive(Debug, thiserror::Error)]
#[error("relay backend unavailable: {0}")]
pub struct BackendUnavailable(#[from] pub std::io::Error);

/// Somewhere frames go. Writes must be observed in the order issued.
pub trait BusBackend: Send {
    fn write(&mut self, frame: RelayFrame, at: Timestamp) -> Result<(), BackendUnavailable>;
}

impl<B: BusBackend + ?Sized> BusBackend for Box<B> {
    fn write(&mut self, frame: RelayFrame, at: Timestamp) -> Result<(), BackendUnavailable> {
        (**self).write(frame, at)
    }
}

pub fn write_frame<B: BusBackend + ?Sized>(
    backend: &mut B,
    frame: RelayFrame,
    at: Timestamp,
) -> Result<(), BackendUnavailable> {
    backend.write(frame, at)
}

pub fn format_trace_line(frame: RelayFrame, at: Timestamp) -> String {
    format!("{} FRAME {}", at.format_secs(), frame)
}

/// Simulated relay board: appends every frame to a trace file and syncs it.
#[derive(Debug)]
pub struct TraceBus {
    path: PathBuf,
    file: File,
}

impl TraceBus {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, BackendUnavailable> {
        let path = path.into();
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(TraceBus { path, file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl BusBackend for TraceBus {
    fn write(&mut self, frame: RelayFrame, at: Timestamp) -> Result<(), BackendUnavailable> {
        let mut line = format_trace_line(frame, at);
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        Ok(())
    }
}

/// In-memory backend keeping full-resolution timestamps; clones share the record.
#[derive(Debug, Clone, Default)]
pub struct MemoryBus(Arc<Mutex<Vec<(Timestamp, RelayFrame)>>>);

impl MemoryBus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn frames(&self) -> Vec<(Timestamp, RelayFrame)> {
        self.0.lock().unwrap().clone()
    }

    pub fn last(&self) -> Option<(Timestamp, RelayFrame)> {
        self.0.lock().unwrap().last().copied()
    }
}

impl BusBackend for MemoryBus {
    fn write(&mut self, frame: RelayFrame, at: Timestamp) -> Result<(), BackendUnavailable> {
        self.0.lock().unwrap().push((at, frame));
        Ok(())
    }
}

/// Writes to two backends in turn; the first failure wins.
#[derive(Debug)]
pub struct Tee<A, B>(pub A, pub B);

impl<A: BusBackend, B: BusBackend> BusBackend for Tee<A, B> {
    fn write(&mut self, frame: RelayFrame, at: Timestamp) -> Result<(), BackendUnavailable> {
        self.0.write(frame, at)?;
        self.1.write(frame, at)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed trace at line {line_no}: {line:?}")]
pub struct MalformedTrace {
    pub line_no: usize,
    pub line: String,
}

fn parse_trace_line(line: &str) -> Option<(Timestamp, RelayFrame)> {
    let (ts, rest) = line.split_once(' ')?;
    let hex = rest.strip_prefix("FRAME 0x")?;
    if hex.len() != 2 || !hex.bytes().all(|b| b.is_ascii_digit() || (b'A'..=b'F').contains(&b)) {
        return None;
    }
    let bits = u8::from_str_radix(hex, 16).ok()?;
    Some((Timestamp::parse_secs(ts)?, RelayFrame(bits)))
}

/// Parses a whole trace file. Every line must be a well-formed record.
pub fn read_trace(text: &str) -> Result<Vec<(Timestamp, RelayFrame)>, MalformedTrace> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            parse_trace_line(line).ok_or_else(|| MalformedTrace {
                line_no: i + 1,
                line: line.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::command::parse_command;
    use crate::controller::{apply_command, expire_due};
    use crate::registry::parse_registry_config;
    use proptest::prelude::*;

    fn registry() -> Registry {
        parse_registry_config(
            "device ac line=0 policy=indefinite\ndevice cooker line=1 policy=max:1800\ndevice heater line=2 policy=indefinite",
        )
        .unwrap()
    }

    fn apply(table: &mut StateTable, reg: &Registry, body: &str) {
        apply_command(table, reg, &parse_command(body).unwrap(), Timestamp::EPOCH, "t").unwrap();
    }

    #[test]
    fn frames_from_tables() {
        let reg = registry();
        let mut table = StateTable::all_off(&reg);
        assert_eq!(encode_frame(&table, &reg), RelayFrame(0x00));
        apply(&mut table, &reg, "heater 1");
        assert_eq!(encode_frame(&table, &reg), RelayFrame(0x04));
        apply(&mut table, &reg, "heater 0");
        apply(&mut table, &reg, "ac 1");
        apply(&mut table, &reg, "cooker 1 60");
        assert_eq!(encode_frame(&table, &reg), RelayFrame(0x03));
    }

    #[test]
    fn trace_line_format() {
        assert_eq!(
            format_trace_line(RelayFrame(0x01), Timestamp::EPOCH),
            "1970-01-01T00:00:00Z FRAME 0x01"
        );
        assert_eq!(
            format_trace_line(RelayFrame(0xAB), Timestamp::from_secs(1800)),
            "1970-01-01T00:30:00Z FRAME 0xAB"
        );
    }

    #[test]
    fn read_trace_cases() {
        assert_eq!(read_trace("").unwrap(), vec![]);
        assert_eq!(
            read_trace("1970-01-01T00:00:00Z FRAME 0x01\n").unwrap(),
            vec![(Timestamp::EPOCH, RelayFrame(1))]
        );
        for bad in [
            "1970-01-01T00:00:00Z FRAME 0x1",
            "1970-01-01T00:00:00Z FRAME 0xab",
            "1970-01-01T00:00:00Z FRAME 0x0G",
            "1970-01-01T00:00:00Z FRAME  0x01",
            "1970-01-01T00:00:00 FRAME 0x01",
            "1970-01-01 00:00:00Z FRAME 0x01",
            "",
        ] {
            let text = format!("1970-01-01T00:00:00Z FRAME 0x00\n{bad}\n");
            assert_eq!(read_trace(&text).unwrap_err().line_no, 2, "{bad:?}");
        }
    }

    #[test]
    fn trace_bus_appends_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("relay.trace");
        let mut bus = TraceBus::open(&path).unwrap();
        write_frame(&mut bus, RelayFrame(1), Timestamp::EPOCH).unwrap();
        write_frame(&mut bus, RelayFrame(1), Timestamp::from_secs(1)).unwrap();
        drop(bus);
        let mut bus = TraceBus::open(&path).unwrap();
        write_frame(&mut bus, RelayFrame(0), Timestamp::from_secs(2)).unwrap();
        let frames = read_trace(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let bits: Vec<u8> = frames.iter().map(|(_, f)| f.bits()).collect();
        assert_eq!(bits, [1, 1, 0]);
    }

    #[test]
    fn unwritable_trace_is_unavailable() {
        let dir = tempfile::tempdir().unwrap();
        assert!(TraceBus::open(dir.path().join("missing").join("relay.trace")).is_err());
    }

    #[test]
    fn auto_off_ends_trace_with_zero() {
        let reg = registry();
        let mut table = StateTable::all_off(&reg);
        let mut bus = MemoryBus::new();
        apply(&mut table, &reg, "cooker 1 5");
        write_frame(&mut bus, encode_frame(&table, &reg), Timestamp::EPOCH).unwrap();
        expire_due(&mut table, Timestamp::from_secs(5));
        write_frame(&mut bus, encode_frame(&table, &reg), Timestamp::from_secs(5)).unwrap();
        assert_eq!(bus.last(), Some((Timestamp::from_secs(5), RelayFrame(0))));
    }

    proptest! {
        #[test]
        fn trace_round_trip(mut frames in proptest::collection::vec((0i64..4_000_000_000, any::<u8>()), 0..50)) {
            frames.sort_by_key(|(t, _)| *t);
            let text: String = frames
                .iter()
                .map(|&(t, b)| format_trace_line(RelayFrame(b), Timestamp::from_secs(t)) + "\n")
                .collect();
            let back = read_trace(&text).unwrap();
            let expected: Vec<_> = frames.iter().map(|&(t, b)| (Timestamp::from_secs(t), RelayFrame(b))).collect();
            prop_assert_eq!(back, expected);
        }
    }
}
