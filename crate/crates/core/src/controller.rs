//! Device state machine: applies commands, enforces per-device run limits,
//! fires auto-off at deadlines and rebuilds state after a restart.
//!
//! Everything here is a pure function of its inputs and the `now` it is
//! handed. Serialization of calls is the caller's job (see [`crate::engine`]).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::command::{ApplianceName, Command, Operation};
use crate::registry::{Registry, SafetyPolicy};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum DeviceState {
    Off,
    On {
        since: Timestamp,
    },
    OnTimed {
        since: Timestamp,
        deadline: Timestamp,
        /// The requested run was cut short (or imposed) by the device's limit.
        clamped: bool,
    },
}

impl DeviceState {
    pub fn is_on(&self) -> bool {
        !matches!(self, DeviceState::Off)
    }

    pub fn tag(&self) -> &'static str {
        match self {
            DeviceState::Off => "off",
            DeviceState::On { .. } => "on",
            DeviceState::OnTimed { .. } => "on_timed",
        }
    }

    pub fn since(&self) -> Option<Timestamp> {
        match *self {
            DeviceState::Off => None,
            DeviceState::On { since } | DeviceState::OnTimed { since, .. } => Some(since),
        }
    }

    pub fn deadline(&self) -> Option<Timestamp> {
        match *self {
            DeviceState::OnTimed { deadline, .. } => Some(deadline),
            _ => None,
        }
    }
}

impl fmt::Display for DeviceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeviceState::Off => f.write_str("off"),
            DeviceState::On { since } => write!(f, "on since {since}"),
            DeviceState::OnTimed { since, deadline, clamped } => {
                write!(f, "on since {since} until {deadline}")?;
                if *clamped {
                    f.write_str(" (clamped)")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Cause {
    /// A user command; carries the source id (inbox filename or `api`).
    Command(String),
    AutoOff,
    StartupRecovery,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub device: ApplianceName,
    pub from: DeviceState,
    pub to: DeviceState,
    pub cause: Cause,
    pub at: Timestamp,
}

impl Transition {
    pub fn is_noop(&self) -> bool {
        self.from == self.to
    }
}

/// Runtime state of every registered device, in registry order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateTable {
    entries: Vec<(ApplianceName, DeviceState)>,
}

impl StateTable {
    pub fn all_off(registry: &Registry) -> Self {
        StateTable {
            entries: registry
                .devices()
                .iter()
                .map(|d| (d.name.clone(), DeviceState::Off))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&DeviceState> {
        self.entries
            .iter()
            .find(|(n, _)| n.as_str() == name)
            .map(|(_, s)| s)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ApplianceName, &DeviceState)> {
        self.entries.iter().map(|(n, s)| (n, s))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True when the keys are exactly the registry's names, in registry order.
    pub fn matches(&self, registry: &Registry) -> bool {
        self.entries.len() == registry.len()
            && self
                .entries
                .iter()
                .zip(registry.devices())
                .all(|((n, _), d)| *n == d.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Rejection {
    #[error("unknown device {0:?}")]
    UnknownDevice(String),
    #[error("state table does not match the registry")]
    TableMismatch,
}

/// Applies one command to one device.
///
/// Switching on a device with a run limit always yields a timed state; an
/// over-limit request is capped and marked `clamped`. Switching on a device
/// that is already on keeps its `since` and recomputes the deadline from `now`.
pub fn apply_command(
    table: &mut StateTable,
    registry: &Registry,
    cmd: &Command,
    now: Timestamp,
    source: &str,
) -> Result<Transition, Rejection> {
    if !table.matches(registry) {
        return Err(Rejection::TableMismatch);
    }
    let idx = registry
        .position(cmd.appliance.as_str())
        .ok_or_else(|| Rejection::UnknownDevice(cmd.appliance.to_string()))?;
    let policy = registry.devices()[idx].policy;
    let slot = &mut table.entries[idx].1;
    let from = *slot;

    let since = match from.since() {
        Some(s) if s <= now => s,
        _ => now,
    };
    let to = match (cmd.op, policy) {
        (Operation::TurnOff, _) => DeviceState::Off,
        (Operation::TurnOn, SafetyPolicy::Indefinite) => DeviceState::On { since },
        (Operation::TurnOn, SafetyPolicy::MaxOn(max)) => DeviceState::OnTimed {
            since,
            deadline: now.plus_secs(max),
            clamped: true,
        },
        (Operation::TurnOnTimed(d), SafetyPolicy::Indefinite) => DeviceState::OnTimed {
            since,
            deadline: now.plus_secs(d.secs()),
            clamped: false,
        },
        (Operation::TurnOnTimed(d), SafetyPolicy::MaxOn(max)) => DeviceState::OnTimed {
            since,
            deadline: now.plus_secs(d.secs().min(max)),
            clamped: d.secs() > max,
        },
    };
    *slot = to;

    Ok(Transition {
        device: cmd.appliance.clone(),
        from,
        to,
        cause: Cause::Command(source.to_string()),
        at: now,
    })
}

fn sweep(table: &mut StateTable, now: Timestamp, cause: Cause) -> Vec<Transition> {
    let mut out = Vec::new();
    for (name, state) in table.entries.iter_mut() {
        if let DeviceState::OnTimed { deadline, .. } = *state {
            if deadline <= now {
                out.push(Transition {
                    device: name.clone(),
                    from: *state,
                    to: DeviceState::Off,
                    cause: cause.clone(),
                    at: now,
                });
                *state = DeviceState::Off;
            }
        }
    }
    out
}

/// Switches off every timed device whose deadline is at or before `now`.
pub fn expire_due(table: &mut StateTable, now: Timestamp) -> Vec<Transition> {
    sweep(table, now, Cause::AutoOff)
}

/// Earliest pending deadline, if any timed device is on.
pub fn next_deadline(table: &StateTable) -> Option<Timestamp> {
    table.entries.iter().filter_map(|(_, s)| s.deadline()).min()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recovery {
    pub table: StateTable,
    pub transitions: Vec<Transition>,
    /// Snapshot entries whose device is no longer registered.
    pub dropped: Vec<String>,
}

/// Rebuilds the state table from persisted entries.
///
/// Unregistered entries are dropped, missing devices start off, and timed
/// runs whose deadline has passed are switched off. A persisted state that
/// the device's current policy forbids (plain on, or a run longer than the
/// limit) is first capped to `since + limit`.
pub fn recover(persisted: &[(String, DeviceState)], registry: &Registry, now: Timestamp) -> Recovery {
    let mut table = StateTable::all_off(registry);
    let mut transitions = Vec::new();
    let mut dropped = Vec::new();

    for (name, state) in persisted {
        let Some(idx) = registry.position(name) else {
            dropped.push(name.clone());
            continue;
        };
        let spec = &registry.devices()[idx];
        let capped = match (*state, spec.policy) {
            (DeviceState::On { since }, SafetyPolicy::MaxOn(max)) => DeviceState::OnTimed {
                since,
                deadline: since.plus_secs(max),
                clamped: true,
            },
            (DeviceState::OnTimed { since, deadline, .. }, SafetyPolicy::MaxOn(max))
                if deadline > since.plus_secs(max) =>
            {
                DeviceState::OnTimed {
                    since,
                    deadline: since.plus_secs(max),
                    clamped: true,
                }
            }
            (s, _) => s,
        };
        if capped != *state {
            transitions.push(Transition {
                device: spec.name.clone(),
                from: *state,
                to: capped,
                cause: Cause::StartupRecovery,
                at: now,
            });
        }
        table.entries[idx].1 = capped;
    }

    transitions.extend(sweep(&mut table, now, Cause::StartupRecovery));
    Recovery {
        table,
        transitions,
        dropped,
    }
}

/// One row of the externally visible device list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceView {
    pub name: String,
    pub line: u8,
    pub state: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub since: Option<Timestamp>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub deadline: Option<Timestamp>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub remaining_s: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clamped: Option<bool>,
}

/// Seconds left, rounded up so a countdown reads 0 only once the deadline is reached.
fn remaining_secs(deadline: Timestamp, now: Timestamp) -> u64 {
    let ms = deadline.millis_since(now).max(0) as u64;
    ms.div_ceil(1000)
}

pub fn snapshot_view(table: &StateTable, registry: &Registry, now: Timestamp) -> Vec<DeviceView> {
    registry
        .devices()
        .iter()
        .map(|spec| {
            let state = table.get(spec.name.as_str()).copied().unwrap_or(DeviceState::Off);
            let (remaining_s, clamped) = match state {
                DeviceState::OnTimed { deadline, clamped, .. } => {
                    (Some(remaining_secs(deadline, now)), Some(clamped))
                }
                _ => (None, None),
            };
            DeviceView {
                name: spec.name.to_string(),
                line: spec.line.index(),
                state: state.tag().to_string(),
                since: state.since(),
                deadline: state.deadline(),
                remaining_s,
                clamped,
            }
        })
        .collect()
}
