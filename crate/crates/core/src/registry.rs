//! Device registry and the service configuration file.
//!
//! ```text
//! # comment
//! device ac     line=0 policy=indefinite
//! device cooker line=1 policy=max:1800
//! allow +2348012345678
//! token s3cret
//! poll_ms 500
//! ```

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::command::{ApplianceName, MAX_DURATION_S};

/// Hard cap on registered appliances.
pub const MAX_DEVICES: usize = 4;
/// Number of data lines on the relay bus.
pub const RELAY_LINES: u8 = 8;
pub const DEFAULT_POLL_MS: u64 = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SafetyPolicy {
    /// Stays on until told otherwise.
    Indefinite,
    /// Never runs longer than this many seconds per arming.
    MaxOn(u32),
}

impl fmt::Display for SafetyPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SafetyPolicy::Indefinite => f.write_str("indefinite"),
            SafetyPolicy::MaxOn(s) => write!(f, "max:{s}"),
        }
    }
}

/// A relay line index, `0..8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelayLine(u8);

impl RelayLine {
    pub fn new(index: u8) -> Option<Self> {
        (index < RELAY_LINES).then_some(RelayLine(index))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn mask(self) -> u8 {
        1 << self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceSpec {
    pub name: ApplianceName,
    pub line: RelayLine,
    pub policy: SafetyPolicy,
}

/// The validated set of controllable appliances, in config order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registry {
    devices: Vec<DeviceSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown device {0:?}")]
pub struct UnknownDevice(pub String);

impl Registry {
    /// Checks the registry invariants: 1..=4 devices, distinct names, distinct lines.
    pub fn new(devices: Vec<DeviceSpec>) -> Result<Self, ConfigError> {
        if devices.is_empty() {
            return Err(ConfigError::NoDevices);
        }
        let mut names = BTreeSet::new();
        let mut lines = BTreeSet::new();
        for (i, d) in devices.iter().enumerate() {
            if i >= MAX_DEVICES {
                return Err(ConfigError::TooManyDevices { line_no: None });
            }
            if !names.insert(d.name.clone()) {
                return Err(ConfigError::DuplicateName { line_no: None, name: d.name.to_string() });
            }
            if !lines.insert(d.line) {
                return Err(ConfigError::DuplicateLine { line_no: None, line: d.line.index() });
            }
            if let SafetyPolicy::MaxOn(m) = d.policy {
                if !(1..=MAX_DURATION_S).contains(&m) {
                    return Err(ConfigError::BadPolicy { line_no: None, value: d.policy.to_string() });
                }
            }
        }
        Ok(Registry { devices })
    }

    pub fn devices(&self) -> &[DeviceSpec] {
        &self.devices
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.devices.iter().position(|d| d.name.as_str() == name)
    }

    pub fn resolve(&self, name: &str) -> Result<&DeviceSpec, UnknownDevice> {
        self.devices
            .iter()
            .find(|d| d.name.as_str() == name)
            .ok_or_else(|| UnknownDevice(name.to_string()))
    }
}

/// Looks up a canonical name in the registry.
pub fn resolve_device<'r>(registry: &'r Registry, name: &str) -> Result<&'r DeviceSpec, UnknownDevice> {
    registry.resolve(name)
}

/// A phone number in international form: `+` then 7 to 15 digits.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Msisdn(String);

impl Msisdn {
    pub fn parse(s: &str) -> Option<Self> {
        let digits = s.strip_prefix('+')?;
        ((7..=15).contains(&digits.len()) && digits.bytes().all(|b| b.is_ascii_digit()))
            .then(|| Msisdn(s.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Msisdn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for Msisdn {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Msisdn::parse(&value).ok_or_else(|| format!("invalid MSISDN {value:?}"))
    }
}

impl From<Msisdn> for String {
    fn from(m: Msisdn) -> String {
        m.0
    }
}

/// Senders whose messages are acted on.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Allowlist(BTreeSet<Msisdn>);

impl Allowlist {
    pub fn new(numbers: impl IntoIterator<Item = Msisdn>) -> Self {
        Allowlist(numbers.into_iter().collect())
    }

    pub fn contains(&self, sender: &Msisdn) -> bool {
        self.0.contains(sender)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Everything the config file declares.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub registry: Registry,
    pub allowlist: Allowlist,
    pub token: Option<String>,
    pub poll_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("no devices configured")]
    NoDevices,
    #[error("{}more than {MAX_DEVICES} devices", at(*.line_no))]
    TooManyDevices { line_no: Option<usize> },
    #[error("{}duplicate device name {name:?}", at(*.line_no))]
    DuplicateName { line_no: Option<usize>, name: String },
    #[error("{}relay line {line} used twice", at(*.line_no))]
    DuplicateLine { line_no: Option<usize>, line: u8 },
    #[error("{}relay line {value:?} outside 0..7", at(*.line_no))]
    BadLine { line_no: Option<usize>, value: String },
    #[error("{}bad policy {value:?} (expected indefinite or max:<1..86400>)", at(*.line_no))]
    BadPolicy { line_no: Option<usize>, value: String },
    #[error("line {line_no}: {message}")]
    SyntaxError { line_no: usize, message: String },
}

fn at(line_no: Option<usize>) -> String {
    line_no.map(|n| format!("line {n}: ")).unwrap_or_default()
}

fn syntax(line_no: usize, message: impl Into<String>) -> ConfigError {
    ConfigError::SyntaxError {
        line_no,
        message: message.into(),
    }
}

fn parse_policy(line_no: usize, value: &str) -> Result<SafetyPolicy, ConfigError> {
    let bad = || ConfigError::BadPolicy {
        line_no: Some(line_no),
        value: value.to_string(),
    };
    if value == "indefinite" {
        return Ok(SafetyPolicy::Indefinite);
    }
    let secs = value.strip_prefix("max:").ok_or_else(bad)?;
    if secs.is_empty() || !secs.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    match secs.parse::<u32>() {
        Ok(s) if (1..=MAX_DURATION_S).contains(&s) => Ok(SafetyPolicy::MaxOn(s)),
        _ => Err(bad()),
    }
}

fn parse_device(line_no: usize, args: &[&str]) -> Result<DeviceSpec, ConfigError> {
    let (raw_name, options) = args
        .split_first()
        .ok_or_else(|| syntax(line_no, "device needs a name"))?;
    let name = ApplianceName::new(raw_name).ok_or_else(|| {
        syntax(
            line_no,
            format!("device name {raw_name:?} must match [a-z][a-z0-9_]* (max 32)"),
        )
    })?;

    let mut line = None;
    let mut policy = None;
    for opt in options {
        let (key, value) = opt
            .split_once('=')
            .ok_or_else(|| syntax(line_no, format!("expected key=value, got {opt:?}")))?;
        match key {
            "line" if line.is_none() => {
                let bad = || ConfigError::BadLine {
                    line_no: Some(line_no),
                    value: value.to_string(),
                };
                if value.is_empty() || !value.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(bad());
                }
                let idx: u8 = value.parse().map_err(|_| bad())?;
                line = Some(RelayLine::new(idx).ok_or_else(bad)?);
            }
            "policy" if policy.is_none() => policy = Some(parse_policy(line_no, value)?),
            "line" | "policy" => return Err(syntax(line_no, format!("{key} given twice"))),
            _ => return Err(syntax(line_no, format!("unknown device option {key:?}"))),
        }
    }

    Ok(DeviceSpec {
        name,
        line: line.ok_or_else(|| syntax(line_no, "device needs line=<0..7>"))?,
        policy: policy.ok_or_else(|| syntax(line_no, "device needs policy=indefinite|max:<s>"))?,
    })
}

/// Parses the full service configuration.
pub fn parse_config(text: &str) -> Result<ServiceConfig, ConfigError> {
    let mut devices: Vec<DeviceSpec> = Vec::new();
    let mut allow = BTreeSet::new();
    let mut token = None;
    let mut poll_ms = None;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        let words: Vec<&str> = content.split_whitespace().collect();
        let Some((&directive, args)) = words.split_first() else {
            continue;
        };
        match directive {
            "device" => {
                let spec = parse_device(line_no, args)?;
                if devices.len() == MAX_DEVICES {
                    return Err(ConfigError::TooManyDevices { line_no: Some(line_no) });
                }
                if devices.iter().any(|d| d.name == spec.name) {
                    return Err(ConfigError::DuplicateName {
                        line_no: Some(line_no),
                        name: spec.name.to_string(),
                    });
                }
                if devices.iter().any(|d| d.line == spec.line) {
                    return Err(ConfigError::DuplicateLine {
                        line_no: Some(line_no),
                        line: spec.line.index(),
                    });
                }
                devices.push(spec);
            }
            "allow" => {
                let [number] = args else {
                    return Err(syntax(line_no, "allow takes exactly one number"));
                };
                let m = Msisdn::parse(number)
                    .ok_or_else(|| syntax(line_no, format!("{number:?} is not +<7..15 digits>")))?;
                allow.insert(m);
            }
            "token" => {
                let [value] = args else {
                    return Err(syntax(line_no, "token takes exactly one value"));
                };
                if token.replace(value.to_string()).is_some() {
                    return Err(syntax(line_no, "token given twice"));
                }
            }
            "poll_ms" => {
                let [value] = args else {
                    return Err(syntax(line_no, "poll_ms takes exactly one value"));
                };
                let ms = value
                    .parse::<u64>()
                    .ok()
                    .filter(|&ms| ms > 0)
                    .ok_or_else(|| syntax(line_no, format!("poll_ms must be a positive integer, got {value:?}")))?;
                if poll_ms.replace(ms).is_some() {
                    return Err(syntax(line_no, "poll_ms given twice"));
                }
            }
            other => return Err(syntax(line_no, format!("unknown directive {other:?}"))),
        }
    }

    Ok(ServiceConfig {
        registry: Registry::new(devices)?,
        allowlist: Allowlist(allow),
        token,
        poll_ms: poll_ms.unwrap_or(DEFAULT_POLL_MS),
    })
}

/// Parses a config file and keeps only the device registry.
pub fn parse_registry_config(text: &str) -> Result<Registry, ConfigError> {
    parse_config(text).map(|c| c.registry)
}
