#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use homectl::{Service, ServiceOptions};
use homectl_core::engine::DataPaths;
use homectl_core::registry::parse_config;
use homectl_core::relay::{MemoryBus, Tee, TraceBus};
use homectl_core::store::{read_events, Event, EventBody};
use homectl_core::time::Clock;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub const TOKEN: &str = "s3cret";
pub const OWNER: &str = "+2348012345678";

pub fn config_text(poll_ms: u64) -> String {
    format!(
        "# four appliances\n\
         device ac      line=0 policy=indefinite\n\
         device cooker  line=1 policy=max:1800\n\
         device heater  line=2 policy=max:3600\n\
         device washer  line=3 policy=indefinite\n\
         allow {OWNER}\n\
         token {TOKEN}\n\
         poll_ms {poll_ms}\n"
    )
}

/// Starts a service writing both a trace file and an in-memory frame record.
pub fn start(dir: &Path, clock: Arc<dyn Clock>, options: ServiceOptions) -> (Service, MemoryBus) {
    let cfg = parse_config(&config_text(options.poll_interval.as_millis() as u64)).unwrap();
    let paths = DataPaths::new(dir);
    std::fs::create_dir_all(&paths.root).unwrap();
    let mem = MemoryBus::new();
    let bus = Tee(TraceBus::open(&paths.trace).unwrap(), mem.clone());
    let (svc, _) = Service::start(cfg, paths, Box::new(bus), clock, options).unwrap();
    (svc, mem)
}

pub async fn call(app: &Router, method: &str, uri: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header("X-Auth-Token", t);
    }
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into_owned()));
    (status, value)
}

pub fn events(svc: &Service) -> Vec<Event> {
    read_events(&svc.paths().events).unwrap()
}

pub fn transitions(svc: &Service) -> Vec<Event> {
    events(svc)
        .into_iter()
        .filter(|e| matches!(e.body, EventBody::Transition { .. }))
        .collect()
}
