//! Inbound SMS gateway backed by a file-drop inbox.
//!
//! Each message is one UTF-8 file named `IN<yyyymmdd>_<hhmmss>_<seq>.txt`:
//!
//! ```text
//! From: +2348012345678
//! Received: 2025-01-01T00:00:01Z
//!
//! Cooker 1 1800
//! ```
//!
//! Files are handled in filename order and then moved to `processed/` or
//! `rejected/`. Only the poller moves files.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use tracing::{debug, warn};

use crate::command::{parse_command, Command, ParseError};
use crate::registry::{Allowlist, Msisdn, Registry};
use crate::time::Timestamp;

pub const PROCESSED_DIR: &str = "processed";
pub const REJECTED_DIR: &str = "rejected";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InboundMessage {
    /// Inbox filename, unique across the message log.
    pub id: String,
    pub sender: Msisdn,
    pub received_at: Timestamp,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("filename {0:?} does not match IN<yyyymmdd>_<hhmmss>_<seq>.txt")]
    BadFilename(String),
    #[error("file is not valid UTF-8")]
    NotUtf8,
    #[error("missing From: header")]
    MissingFrom,
    #[error("missing Received: header")]
    MissingReceived,
    #[error("bad Received: timestamp {0:?}")]
    BadTimestamp(String),
    #[error("missing blank line after headers")]
    MissingBlankLine,
    #[error("sender {0:?} is not +<7..15 digits>")]
    BadMsisdn(String),
}

impl FormatError {
    pub fn kind(&self) -> &'static str {
        match self {
            FormatError::BadFilename(_) => "BadFilename",
            FormatError::NotUtf8 => "NotUtf8",
            FormatError::MissingFrom => "MissingFrom",
            FormatError::MissingReceived => "MissingReceived",
            FormatError::BadTimestamp(_) => "BadTimestamp",
            FormatError::MissingBlankLine => "MissingBlankLine",
            FormatError::BadMsisdn(_) => "BadMsisdn",
        }
    }
}

pub fn is_inbox_filename(name: &str) -> bool {
    let b = name.as_bytes();
    let digits = |r: std::ops::Range<usize>| b[r].iter().all(u8::is_ascii_digit);
    b.len() == 25
        && name.starts_with("IN")
        && digits(2..10)
        && b[10] == b'_'
        && digits(11..17)
        && b[17] == b'_'
        && digits(18..21)
        && name.ends_with(".txt")
}

pub fn inbox_filename(at: Timestamp, seq: u16) -> String {
    format!("IN{}_{:03}.txt", at.format_compact(), seq)
}

fn header<'a>(line: Option<&'a str>, key: &str) -> Option<&'a str> {
    let line = line?;
    let line = line.strip_suffix('\r').unwrap_or(line);
    line.strip_prefix(key)?.strip_prefix(':').map(|v| v.trim())
}

pub fn parse_inbox_file(name: &str, bytes: &[u8]) -> Result<InboundMessage, FormatError> {
    if !is_inbox_filename(name) {
        return Err(FormatError::BadFilename(name.to_string()));
    }
    let text = std::str::from_utf8(bytes).map_err(|_| FormatError::NotUtf8)?;
    let mut parts = text.splitn(4, '\n');

    let from = header(parts.next(), "From").ok_or(FormatError::MissingFrom)?;
    let sender = Msisdn::parse(from).ok_or_else(|| FormatError::BadMsisdn(from.to_string()))?;
    let received = header(parts.next(), "Received").ok_or(FormatError::MissingReceived)?;
    let received_at = received
        .parse::<Timestamp>()
        .map_err(|_| FormatError::BadTimestamp(received.to_string()))?;
    match parts.next() {
        Some("") | Some("\r") => {}
        _ => return Err(FormatError::MissingBlankLine),
    }
    let body = parts.next().unwrap_or("").trim_matches(['\r', '\n']).to_string();

    Ok(InboundMessage {
        id: name.to_string(),
        sender,
        received_at,
        body,
    })
}

pub fn render_inbox_file(sender: &Msisdn, received_at: Timestamp, body: &str) -> String {
    format!("From: {sender}\nReceived: {received_at}\n\n{body}\n")
}

/// What examining a well-formed message decided.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Accept(Command),
    Unauthorized,
    Unparseable(ParseError),
    UnknownDevice(String),
}

/// Authenticates the sender, then parses and resolves the body.
/// The body of an unauthorized message is never parsed.
pub fn examine(msg: &InboundMessage, allowlist: &Allowlist, registry: &Registry) -> Verdict {
    if !allowlist.contains(&msg.sender) {
        return Verdict::Unauthorized;
    }
    examine_text(&msg.body, registry)
}

/// Parse and resolve only; the path API commands take.
pub fn examine_text(body: &str, registry: &Registry) -> Verdict {
    match parse_command(body) {
        Err(e) => Verdict::Unparseable(e),
        Ok(cmd) if registry.resolve(cmd.appliance.as_str()).is_err() => {
            Verdict::UnknownDevice(cmd.appliance.to_string())
        }
        Ok(cmd) => Verdict::Accept(cmd),
    }
}

/// The persisted result of handling one inbox file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IngestOutcome {
    Accepted { command: Command, event_id: u64 },
    RejectedUnauthorized,
    RejectedUnparseable(ParseError),
    RejectedUnknownDevice,
    /// The file itself could not be read as a message.
    RejectedMalformed(FormatError),
    /// This id already has an outcome; nothing new was recorded.
    AlreadyProcessed { accepted: bool },
}

impl IngestOutcome {
    pub fn disposition(&self) -> Disposition {
        match self {
            IngestOutcome::Accepted { .. } | IngestOutcome::AlreadyProcessed { accepted: true } => {
                Disposition::Processed
            }
            _ => Disposition::Rejected,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disposition {
    Processed,
    Rejected,
}

/// One inbox file as handed to the ingest step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InboxItem {
    pub id: String,
    pub message: Result<InboundMessage, FormatError>,
}

#[derive(Debug)]
pub struct Inbox {
    dir: PathBuf,
    processed: PathBuf,
    rejected: PathBuf,
    alloc: Mutex<()>,
}

impl Inbox {
    /// Opens `dir` as an inbox, creating it and its subdirectories if absent.
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        let processed = dir.join(PROCESSED_DIR);
        let rejected = dir.join(REJECTED_DIR);
        fs::create_dir_all(&processed)?;
        fs::create_dir_all(&rejected)?;
        Ok(Inbox {
            dir,
            processed,
            rejected,
            alloc: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn processed_dir(&self) -> &Path {
        &self.processed
    }

    pub fn rejected_dir(&self) -> &Path {
        &self.rejected
    }

    /// Pending files in arrival (filename) order. Dotfiles are in-flight writes and skipped.
    pub fn scan(&self) -> io::Result<Vec<PathBuf>> {
        let mut files = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let entry = entry?;
            if !entry.file_type()?.is_file() {
                continue;
            }
            if entry.file_name().to_string_lossy().starts_with('.') {
                continue;
            }
            files.push(entry.path());
        }
        files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
        Ok(files)
    }

    pub fn finish(&self, path: &Path, disposition: Disposition) -> io::Result<PathBuf> {
        let name = path
            .file_name()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "not a file path"))?;
        let target = match disposition {
            Disposition::Processed => self.processed.join(name),
            Disposition::Rejected => self.rejected.join(name),
        };
        fs::rename(path, &target)?;
        Ok(target)
    }

    fn name_taken(&self, name: &str) -> bool {
        [&self.dir, &self.processed, &self.rejected]
            .iter()
            .any(|d| d.join(name).exists())
    }

    /// Drops a new message into the inbox and returns its filename.
    ///
    /// The file is written under a dot-name and hard-linked into place, so a
    /// concurrent scan never sees a partial file and an existing name is never
    /// overwritten.
    pub fn deliver(&self, sender: &Msisdn, body: &str, received_at: Timestamp) -> io::Result<String> {
        let _guard = self.alloc.lock().unwrap_or_else(|e| e.into_inner());
        let content = render_inbox_file(sender, received_at, body);
        for seq in 0..1000u16 {
            let name = inbox_filename(received_at, seq);
            if self.name_taken(&name) {
                continue;
            }
            let tmp = self.dir.join(format!(".{name}.tmp"));
            fs::write(&tmp, &content)?;
            let linked = fs::hard_link(&tmp, self.dir.join(&name));
            fs::remove_file(&tmp)?;
            match linked {
                Ok(()) => return Ok(name),
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e),
            }
        }
        Err(io::Error::other("inbox sequence space exhausted for this second"))
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct PollReport {
    pub handled: usize,
    pub move_failures: usize,
    pub read_failures: usize,
}

/// Hands every pending file to `handle` in order, then moves it according to
/// the returned disposition.
///
/// A file that cannot be read or moved is left in place for the next poll.
/// An error from `handle` stops the poll.
pub fn poll_inbox<E>(
    inbox: &Inbox,
    mut handle: impl FnMut(InboxItem) -> Result<Disposition, E>,
) -> Result<PollReport, E> {
    let mut report = PollReport::default();
    let files = match inbox.scan() {
        Ok(f) => f,
        Err(e) => {
            warn!(error = %e, dir = %inbox.dir.display(), "inbox scan failed");
            return Ok(report);
        }
    };
    for path in files {
        let id = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                warn!(error = %e, file = %id, "inbox read failed");
                report.read_failures += 1;
                continue;
            }
        };
        let message = parse_inbox_file(&id, &bytes);
        let disposition = handle(InboxItem { id: id.clone(), message })?;
        report.handled += 1;
        match inbox.finish(&path, disposition) {
            Ok(to) => debug!(file = %id, to = %to.display(), "inbox file moved"),
            Err(e) => {
                warn!(error = %e, file = %id, "inbox move failed, will retry");
                report.move_failures += 1;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::command::ParseErrorKind;
    use crate::registry::parse_config;

    const NAME: &str = "IN20250101_000001_001.txt";

    fn msisdn(s: &str) -> Msisdn {
        Msisdn::parse(s).unwrap()
    }

    #[test]
    fn parses_well_formed_file() {
        let bytes = b"From: +2348012345678\nReceived: 2025-01-01T00:00:01Z\n\nCooker 1 1800\n";
        let msg = parse_inbox_file(NAME, bytes).unwrap();
        assert_eq!(msg.id, NAME);
        assert_eq!(msg.sender, msisdn("+2348012345678"));
        assert_eq!(msg.received_at, "2025-01-01T00:00:01Z".parse().unwrap());
        assert_eq!(msg.body, "Cooker 1 1800");
    }

    #[test]
    fn crlf_and_multiline_bodies() {
        let bytes = b"From: +2348012345678\r\nReceived: 2025-01-01T00:00:01Z\r\n\r\nac 1\r\n";
        assert_eq!(parse_inbox_file(NAME, bytes).unwrap().body, "ac 1");
        let bytes = b"From: +2348012345678\nReceived: 2025-01-01T00:00:01Z\n\nac\n1\n";
        assert_eq!(parse_inbox_file(NAME, bytes).unwrap().body, "ac\n1");
    }

    #[test]
    fn empty_body_is_kept() {
        let bytes = b"From: +2348012345678\nReceived: 2025-01-01T00:00:01Z\n\n";
        assert_eq!(parse_inbox_file(NAME, bytes).unwrap().body, "");
    }

    #[test]
    fn format_errors() {
        let ok = "From: +2348012345678\nReceived: 2025-01-01T00:00:01Z\n\nac 1\n";
        let cases: [(&str, &str, FormatError); 7] = [
            ("IN2025_1.txt", ok, FormatError::BadFilename("IN2025_1.txt".into())),
            (NAME, "Received: 2025-01-01T00:00:01Z\n\nac 1", FormatError::MissingFrom),
            (NAME, "From: +2348012345678\n\nac 1", FormatError::MissingReceived),
            (NAME, "From: +2348012345678\nReceived: yesterday\n\nac 1", FormatError::BadTimestamp("yesterday".into())),
            (NAME, "From: +2348012345678\nReceived: 2025-01-01T00:00:01Z\nac 1", FormatError::MissingBlankLine),
            (NAME, "From: +2348012345678\nReceived: 2025-01-01T00:00:01Z", FormatError::MissingBlankLine),
            (NAME, "From: 12345\nReceived: 2025-01-01T00:00:01Z\n\nac 1", FormatError::BadMsisdn("12345".into())),
        ];
        for (name, text, expected) in cases {
            assert_eq!(parse_inbox_file(name, text.as_bytes()), Err(expected));
        }
        assert_eq!(parse_inbox_file(NAME, b"\xff\xfe"), Err(FormatError::NotUtf8));
    }

    #[test]
    fn filename_shape() {
        assert!(is_inbox_filename(NAME));
        assert!(!is_inbox_filename("IN20250101_000001_01.txt"));
        assert!(!is_inbox_filename("IN20250101-000001_001.txt"));
        assert!(!is_inbox_filename("OUT0250101_000001_001.txt"));
        assert_eq!(inbox_filename(Timestamp::from_secs(1_735_689_601), 7), "IN20250101_000001_007.txt");
    }

    #[test]
    fn render_parses_back() {
        let at = Timestamp::from_millis(1_735_689_601_250);
        let text = render_inbox_file(&msisdn("+2348012345678"), at, "AC 1");
        let msg = parse_inbox_file(&inbox_filename(at, 0), text.as_bytes()).unwrap();
        assert_eq!(msg.received_at, at);
        assert_eq!(msg.body, "AC 1");
    }

    #[test]
    fn examine_verdicts() {
        let cfg = parse_config(
            "device ac line=0 policy=indefinite\ndevice cooker line=1 policy=max:1800\nallow +2348012345678",
        )
        .unwrap();
        let msg = |sender: &str, body: &str| InboundMessage {
            id: NAME.into(),
            sender: msisdn(sender),
            received_at: Timestamp::EPOCH,
            body: body.into(),
        };
        assert!(matches!(
            examine(&msg("+2348012345678", "AC 1"), &cfg.allowlist, &cfg.registry),
            Verdict::Accept(_)
        ));
        assert_eq!(
            examine(&msg("+2348099999999", "AC 1"), &cfg.allowlist, &cfg.registry),
            Verdict::Unauthorized
        );
        // unauthorized wins even over garbage bodies
        assert_eq!(
            examine(&msg("+2348099999999", ""), &cfg.allowlist, &cfg.registry),
            Verdict::Unauthorized
        );
        match examine(&msg("+2348012345678", "AC 9"), &cfg.allowlist, &cfg.registry) {
            Verdict::Unparseable(e) => assert_eq!(e.kind, ParseErrorKind::BadOpCode),
            other => panic!("{other:?}"),
        }
        assert_eq!(
            examine(&msg("+2348012345678", "fridge 1"), &cfg.allowlist, &cfg.registry),
            Verdict::UnknownDevice("fridge".into())
        );
    }

    #[test]
    fn scan_orders_by_name_and_skips_subdirs() {
        let dir = tempfile::tempdir().unwrap();
        let inbox = Inbox::open(dir.path().join("inbox")).unwrap();
        assert!(inbox.scan().unwrap().is_empty());
        for seq in ["001", "003", "002"] {
            fs::write(inbox.dir().join(format!("IN20250101_000001_{seq}.txt")), "x").unwrap();
        }
        fs::write(inbox.dir().join(".IN20250101_000001_004.txt.tmp"), "x").unwrap();
        fs::write(inbox.processed_dir().join("IN20250101_000000_000.txt"), "x").unwrap();
        let names: Vec<_> = inbox
            .scan()
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(
            names,
            ["IN20250101_000001_001.txt", "IN20250101_000001_002.txt", "IN20250101_000001_003.txt"]
        );
    }

    #[test]
    fn deliver_allocates_fresh_names() {
        let dir = tempfile::tempdir().unwrap();
        let inbox = Inbox::open(dir.path().join("inbox")).unwrap();
        let at = Timestamp::from_secs(1_735_689_601);
        let sender = msisdn("+2348012345678");
        let a = inbox.deliver(&sender, "ac 1", at).unwrap();
        let b = inbox.deliver(&sender, "ac 0", at).unwrap();
        assert_eq!(a, "IN20250101_000001_000.txt");
        assert_eq!(b, "IN20250101_000001_001.txt");
        inbox.finish(&inbox.dir().join(&a), Disposition::Processed).unwrap();
        // a processed name is never reused
        let c = inbox.deliver(&sender, "ac 1", at).unwrap();
        assert_eq!(c, "IN20250101_000001_002.txt");
        let bytes = fs::read(inbox.dir().join(&b)).unwrap();
        assert_eq!(parse_inbox_file(&b, &bytes).unwrap().body, "ac 0");
    }

    #[test]
    fn poll_moves_by_disposition() {
        let dir = tempfile::tempdir().unwrap();
        let inbox = Inbox::open(dir.path().join("inbox")).unwrap();
        let sender = msisdn("+2348012345678");
        let at = Timestamp::from_secs(1_735_689_601);
        inbox.deliver(&sender, "ac 1", at).unwrap();
        inbox.deliver(&sender, "ac 9", at).unwrap();
        fs::write(inbox.dir().join("junk.txt"), "hello").unwrap();

        let mut seen = Vec::new();
        let report = poll_inbox(&inbox, |item| {
            seen.push(item.id.clone());
            Ok::<_, ()>(match item.message {
                Ok(m) if m.body == "ac 1" => Disposition::Processed,
                _ => Disposition::Rejected,
            })
        })
        .unwrap();
        assert_eq!(report.handled, 3);
        assert_eq!(seen, ["IN20250101_000001_000.txt", "IN20250101_000001_001.txt", "junk.txt"]);
        assert!(inbox.processed_dir().join("IN20250101_000001_000.txt").exists());
        assert!(inbox.rejected_dir().join("IN20250101_000001_001.txt").exists());
        assert!(inbox.rejected_dir().join("junk.txt").exists());
        assert!(inbox.scan().unwrap().is_empty());
    }

    #[test]
    fn handler_error_stops_poll_and_leaves_file() {
        let dir = tempfile::tempdir().unwrap();
        let inbox = Inbox::open(dir.path().join("inbox")).unwrap();
        inbox
            .deliver(&msisdn("+2348012345678"), "ac 1", Timestamp::EPOCH)
            .unwrap();
        assert_eq!(poll_inbox(&inbox, |_| Err::<Disposition, _>("halted")), Err("halted"));
        assert_eq!(inbox.scan().unwrap().len(), 1);
    }
}
