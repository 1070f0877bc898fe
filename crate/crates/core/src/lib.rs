//! Core of the homectl appliance service.
//!
//! Text commands (`cooker 1 1800`) arrive through the [`gateway`] inbox or
//! the HTTP API, are checked against the [`registry`], applied by the
//! [`controller`] state machine and mirrored onto the [`relay`] bus. The
//! [`engine`] is the single writer that sequences all of this and records it
//! in the [`store`].

pub mod command;
pub mod controller;
pub mod engine;
pub mod gateway;
pub mod registry;
pub mod relay;
pub mod store;
pub mod time;

pub use command::{parse_command, render_command, ApplianceName, Command, OnDuration, Operation, ParseError, ParseErrorKind};
pub use controller::{Cause, DeviceState, DeviceView, StateTable, Transition};
pub use engine::{CommandOutcome, CommandRejection, DataPaths, Engine, EngineError, StartupReport};
pub use gateway::{Inbox, InboundMessage, IngestOutcome};
pub use registry::{parse_config, Allowlist, DeviceSpec, Msisdn, Registry, SafetyPolicy, ServiceConfig};
pub use relay::{encode_frame, BusBackend, MemoryBus, RelayFrame, TraceBus};
pub use time::{Clock, ManualClock, SystemClock, Timestamp};
