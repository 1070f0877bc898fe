//! The homectl service: async runtime around the core engine and its HTTP API.

pub mod api;
pub mod runtime;

pub use api::router;
pub use runtime::{Service, ServiceError, ServiceOptions, StartError};
