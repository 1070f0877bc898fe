//! The SMS command language.
//!
//! A message body is two or three whitespace-separated fields:
//!
//! ```text
//! body := WS* name WS+ op (WS+ duration)? WS*
//! WS   := ' ' | '\t'
//! op   := "0" | "1"
//! duration := digit+        (1..=86400 seconds)
//! ```
//!
//! `ac 1` switches the `ac` on, `ac 0` switches it off and `cooker 1 1800`
//! runs the cooker for 1800 seconds. Names are matched case-insensitively
//! by lowering them to their canonical form.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Longest accepted run time for a timed ON, in seconds.
pub const MAX_DURATION_S: u32 = 86_400;

/// Longest accepted appliance name.
pub const MAX_NAME_LEN: usize = 32;

/// A canonical appliance name: `[a-z][a-z0-9_]*`, at most 32 bytes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ApplianceName(String);

impl ApplianceName {
    /// Accepts only names already in canonical (lowercase) form.
    pub fn new(name: &str) -> Option<Self> {
        is_canonical_name(name).then(|| ApplianceName(name.to_string()))
    }

    /// Lowercases `raw` and validates the result.
    pub fn canonicalize(raw: &str) -> Option<Self> {
        Self::new(&raw.to_ascii_lowercase())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

fn is_canonical_name(name: &str) -> bool {
    let bytes = name.as_bytes();
    !bytes.is_empty()
        && bytes.len() <= MAX_NAME_LEN
        && bytes[0].is_ascii_lowercase()
        && bytes[1..]
            .iter()
            .all(|&b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

impl fmt::Display for ApplianceName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for ApplianceName {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ApplianceName {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        if is_canonical_name(&value) {
            Ok(ApplianceName(value))
        } else {
            Err(format!("invalid appliance name {value:?}"))
        }
    }
}

impl From<ApplianceName> for String {
    fn from(name: ApplianceName) -> String {
        name.0
    }
}

/// A timed-ON run length in whole seconds, `1..=86400`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OnDuration(u32);

impl OnDuration {
    pub fn new(secs: u32) -> Option<Self> {
        (1..=MAX_DURATION_S).contains(&secs).then_some(OnDuration(secs))
    }

    pub fn secs(self) -> u32 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operation {
    TurnOn,
    TurnOff,
    TurnOnTimed(OnDuration),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Command {
    pub appliance: ApplianceName,
    pub op: Operation,
}

impl Command {
    pub fn new(appliance: ApplianceName, op: Operation) -> Self {
        Command { appliance, op }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.op {
            Operation::TurnOn => write!(f, "{} 1", self.appliance),
            Operation::TurnOff => write!(f, "{} 0", self.appliance),
            Operation::TurnOnTimed(d) => write!(f, "{} 1 {}", self.appliance, d.secs()),
        }
    }
}

/// Which grammar rule a body broke.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParseErrorKind {
    EmptyBody,
    WrongFieldCount,
    BadOpCode,
    BadDuration,
    DurationWithOff,
    BadName,
}

impl ParseErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParseErrorKind::EmptyBody => "EmptyBody",
            ParseErrorKind::WrongFieldCount => "WrongFieldCount",
            ParseErrorKind::BadOpCode => "BadOpCode",
            ParseErrorKind::BadDuration => "BadDuration",
            ParseErrorKind::DurationWithOff => "DurationWithOff",
            ParseErrorKind::BadName => "BadName",
        }
    }
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind}: {detail}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub detail: String,
}

impl ParseError {
    fn new(kind: ParseErrorKind, detail: impl Into<String>) -> Self {
        ParseError {
            kind,
            detail: detail.into(),
        }
    }
}

fn is_ws(c: char) -> bool {
    c == ' ' || c == '\t'
}

/// Parses a message body into a [`Command`].
///
/// Rules are checked in order: emptiness, field count, name, op code, then
/// (for three fields) that the op is ON and the duration is in range.
pub fn parse_command(body: &str) -> Result<Command, ParseError> {
    use ParseErrorKind::*;

    let trimmed = body.trim_matches(is_ws);
    if trimmed.is_empty() {
        return Err(ParseError::new(EmptyBody, "message body is blank"));
    }
    let fields: Vec<&str> = trimmed.split(is_ws).filter(|f| !f.is_empty()).collect();
    if !(2..=3).contains(&fields.len()) {
        return Err(ParseError::new(
            WrongFieldCount,
            format!("expected 2 or 3 fields, got {}", fields.len()),
        ));
    }

    let appliance = ApplianceName::canonicalize(fields[0])
        .ok_or_else(|| ParseError::new(BadName, format!("invalid appliance name {:?}", fields[0])))?;

    let on = match fields[1] {
        "1" => true,
        "0" => false,
        other => {
            return Err(ParseError::new(
                BadOpCode,
                format!("operation must be 0 or 1, got {other:?}"),
            ))
        }
    };

    let op = match (on, fields.get(2)) {
        (true, None) => Operation::TurnOn,
        (false, None) => Operation::TurnOff,
        (false, Some(_)) => {
            return Err(ParseError::new(
                DurationWithOff,
                "a duration is only allowed when switching on",
            ))
        }
        (true, Some(raw)) => Operation::TurnOnTimed(parse_duration(raw)?),
    };

    Ok(Command { appliance, op })
}

fn parse_duration(raw: &str) -> Result<OnDuration, ParseError> {
    let bad = || {
        ParseError::new(
            ParseErrorKind::BadDuration,
            format!("duration must be 1..={MAX_DURATION_S} seconds, got {raw:?}"),
        )
    };
    if !raw.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    // Leading zeros are allowed, so strip them before the length check.
    let digits = raw.trim_start_matches('0');
    if digits.len() > 6 {
        return Err(bad());
    }
    let secs: u32 = if digits.is_empty() { 0 } else { digits.parse().map_err(|_| bad())? };
    OnDuration::new(secs).ok_or_else(bad)
}

/// Canonical text for a command: `<name> <0|1>[ <duration>]`.
pub fn render_command(cmd: &Command) -> String {
    cmd.to_string()
}
