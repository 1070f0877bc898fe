//! Async service around the [`Engine`].
//!
//! The engine lives on its own thread and is fed through one bounded queue;
//! that queue is the only way to change device state. Two background tasks
//! feed it: the inbox poller (every `poll_ms`) and the deadline scheduler,
//! which sleeps until the next pending deadline and then asks for a sweep.
//! Readers get consistent copies of the state table through a watch channel.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use homectl_core::controller::{next_deadline, snapshot_view, DeviceView, StateTable};
use homectl_core::engine::{CommandOutcome, DataPaths, Engine, EngineError, StartupReport};
use homectl_core::gateway::{poll_inbox, Inbox, InboxItem, IngestOutcome};
use homectl_core::registry::{Msisdn, Registry, ServiceConfig};
use homectl_core::relay::BusBackend;
use homectl_core::store::{query_messages, Event, EventFilter};
use homectl_core::time::{Clock, Timestamp};
use homectl_core::Transition;
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::AbortHandle;
use tracing::{debug, error, info, warn};

const QUEUE_DEPTH: usize = 256;
/// Upper bound on one scheduler sleep, so a stepped clock is noticed eventually.
const MAX_SCHEDULER_SLEEP: Duration = Duration::from_secs(60);

#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error("config has no `token` line; the API cannot run without one")]
    MissingToken,
    #[error("cannot prepare data directory {path}: {source}")]
    DataDir {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum ServiceError {
    #[error("service halted: {0}")]
    Halted(String),
    #[error("service is shutting down")]
    Stopped,
    #[error("{0}")]
    Io(String),
}

impl From<EngineError> for ServiceError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Halted(reason) => ServiceError::Halted(reason),
            other => ServiceError::Halted(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ServiceOptions {
    pub poll_interval: Duration,
    pub run_poller: bool,
    pub run_scheduler: bool,
}

impl ServiceOptions {
    pub fn from_config(cfg: &ServiceConfig) -> Self {
        ServiceOptions {
            poll_interval: Duration::from_millis(cfg.poll_ms),
            run_poller: true,
            run_scheduler: true,
        }
    }

    /// No background tasks; the caller drives polls and sweeps explicitly.
    pub fn manual() -> Self {
        ServiceOptions {
            poll_interval: Duration::from_millis(500),
            run_poller: false,
            run_scheduler: false,
        }
    }
}

type Reply<T> = oneshot::Sender<Result<T, ServiceError>>;

enum Request {
    Inbox(InboxItem, Reply<IngestOutcome>),
    Text(String, Reply<CommandOutcome>),
    Expire(Reply<Vec<Transition>>),
}

#[derive(Debug, Clone)]
pub struct Published {
    pub table: StateTable,
    pub halted: Option<String>,
}

struct Inner {
    tx: mpsc::Sender<Request>,
    state: watch::Receiver<Published>,
    clock: Arc<dyn Clock>,
    inbox: Arc<Inbox>,
    paths: DataPaths,
    registry: Arc<Registry>,
    token: String,
    poll_lock: tokio::sync::Mutex<()>,
    tasks: Mutex<Vec<AbortHandle>>,
}

/// Cheap to clone; all clones talk to the same engine.
#[derive(Clone)]
pub struct Service {
    inner: Arc<Inner>,
}

fn engine_loop(
    mut engine: Engine<Box<dyn BusBackend>>,
    mut rx: mpsc::Receiver<Request>,
    state: watch::Sender<Published>,
    clock: Arc<dyn Clock>,
) {
    while let Some(req) = rx.blocking_recv() {
        let now = clock.now();
        // Publish before replying so a caller never reads a table older than its own write.
        let publish = |engine: &Engine<Box<dyn BusBackend>>| {
            state.send_replace(Published {
                table: engine.table().clone(),
                halted: engine.halted().map(str::to_string),
            });
        };
        match req {
            Request::Inbox(item, reply) => {
                let result = engine.ingest(item, now).map_err(Into::into);
                publish(&engine);
                let _ = reply.send(result);
            }
            Request::Text(text, reply) => {
                let result = engine.submit_text(&text, now).map_err(Into::into);
                publish(&engine);
                let _ = reply.send(result);
            }
            Request::Expire(reply) => {
                let result = engine.expire(now).map_err(Into::into);
                publish(&engine);
                let _ = reply.send(result);
            }
        }
    }
    debug!("engine queue closed");
}

impl Service {
    /// Opens the engine and starts the service. Must run inside a Tokio runtime.
    pub fn start(
        config: ServiceConfig,
        paths: DataPaths,
        bus: Box<dyn BusBackend>,
        clock: Arc<dyn Clock>,
        options: ServiceOptions,
    ) -> Result<(Service, StartupReport), StartError> {
        let token = config
            .token
            .clone()
            .filter(|t| !t.is_empty())
            .ok_or(StartError::MissingToken)?;
        let data_dir = |source| StartError::DataDir {
            path: paths.root.clone(),
            source,
        };
        std::fs::create_dir_all(&paths.root).map_err(data_dir)?;
        let inbox = Inbox::open(&paths.inbox).map_err(data_dir)?;

        let registry = Arc::new(config.registry);
        let (engine, report) = Engine::open(registry.clone(), config.allowlist, &paths, bus, clock.now())?;

        let (tx, rx) = mpsc::channel(QUEUE_DEPTH);
        let (state_tx, state_rx) = watch::channel(Published {
            table: engine.table().clone(),
            halted: None,
        });
        let loop_clock = clock.clone();
        std::thread::Builder::new()
            .name("homectl-engine".into())
            .spawn(move || engine_loop(engine, rx, state_tx, loop_clock))
            .map_err(data_dir)?;

        let service = Service {
            inner: Arc::new(Inner {
                tx,
                state: state_rx,
                clock,
                inbox: Arc::new(inbox),
                paths,
                registry,
                token,
                poll_lock: tokio::sync::Mutex::new(()),
                tasks: Mutex::new(Vec::new()),
            }),
        };

        let mut tasks = Vec::new();
        if options.run_poller {
            let svc = service.clone();
            tasks.push(tokio::spawn(svc.poller(options.poll_interval)).abort_handle());
        }
        if options.run_scheduler {
            let svc = service.clone();
            tasks.push(tokio::spawn(svc.scheduler()).abort_handle());
        }
        *service.inner.tasks.lock().unwrap() = tasks;
        info!(devices = service.inner.registry.len(), "service started");
        Ok((service, report))
    }

    /// Stops the background tasks. The engine thread exits once every clone is dropped.
    pub fn shutdown(&self) {
        for task in self.inner.tasks.lock().unwrap().drain(..) {
            task.abort();
        }
    }

    pub fn token(&self) -> &str {
        &self.inner.token
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.inner.registry
    }

    pub fn paths(&self) -> &DataPaths {
        &self.inner.paths
    }

    pub fn inbox(&self) -> &Arc<Inbox> {
        &self.inner.inbox
    }

    pub fn now(&self) -> Timestamp {
        self.inner.clock.now()
    }

    pub fn published(&self) -> Published {
        self.inner.state.borrow().clone()
    }

    pub fn halted(&self) -> Option<String> {
        self.inner.state.borrow().halted.clone()
    }

    /// Device rows computed from one consistent copy of the table.
    pub fn devices(&self) -> (Vec<DeviceView>, Timestamp) {
        let table = self.inner.state.borrow().table.clone();
        let now = self.now();
        (snapshot_view(&table, &self.inner.registry, now), now)
    }

    async fn call<T>(&self, make: impl FnOnce(Reply<T>) -> Request) -> Result<T, ServiceError> {
        let (reply, rx) = oneshot::channel();
        self.inner.tx.send(make(reply)).await.map_err(|_| ServiceError::Stopped)?;
        rx.await.map_err(|_| ServiceError::Stopped)?
    }

    pub async fn submit_text(&self, text: String) -> Result<CommandOutcome, ServiceError> {
        self.call(|r| Request::Text(text, r)).await
    }

    /// Sweeps due deadlines now.
    pub async fn expire_now(&self) -> Result<Vec<Transition>, ServiceError> {
        self.call(Request::Expire).await
    }

    /// Writes a message into the inbox exactly as the gateway would, stamped
    /// with the server's clock. It is picked up by the next poll.
    pub async fn deliver_sms(&self, sender: Msisdn, body: String) -> Result<String, ServiceError> {
        let inbox = self.inner.inbox.clone();
        let now = self.now();
        tokio::task::spawn_blocking(move || inbox.deliver(&sender, &body, now))
            .await
            .map_err(|e| ServiceError::Io(e.to_string()))?
            .map_err(|e| ServiceError::Io(e.to_string()))
    }

    /// Runs one inbox poll and returns the outcome for each file handled.
    pub async fn poll_now(&self) -> Result<Vec<(String, IngestOutcome)>, ServiceError> {
        let _guard = self.inner.poll_lock.lock().await;
        let inbox = self.inner.inbox.clone();
        let tx = self.inner.tx.clone();
        tokio::task::spawn_blocking(move || {
            let mut outcomes = Vec::new();
            poll_inbox(&inbox, |item| {
                let id = item.id.clone();
                let (reply, rx) = oneshot::channel();
                tx.blocking_send(Request::Inbox(item, reply))
                    .map_err(|_| ServiceError::Stopped)?;
                let outcome = rx.blocking_recv().map_err(|_| ServiceError::Stopped)??;
                let disposition = outcome.disposition();
                outcomes.push((id, outcome));
                Ok::<_, ServiceError>(disposition)
            })?;
            Ok(outcomes)
        })
        .await
        .map_err(|e| ServiceError::Io(e.to_string()))?
    }

    pub async fn messages(&self, filter: EventFilter) -> Result<Vec<Event>, ServiceError> {
        let path = self.inner.paths.events.clone();
        tokio::task::spawn_blocking(move || query_messages(&path, &filter))
            .await
            .map_err(|e| ServiceError::Io(e.to_string()))?
            .map_err(|e| ServiceError::Io(e.to_string()))
    }

    async fn poller(self, interval: Duration) {
        let mut ticker = tokio::time::interval(interval);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            ticker.tick().await;
            match self.poll_now().await {
                Ok(outcomes) if !outcomes.is_empty() => debug!(handled = outcomes.len(), "inbox poll"),
                Ok(_) => {}
                Err(ServiceError::Stopped) => break,
                Err(e) => {
                    error!(error = %e, "inbox poller stopping");
                    break;
                }
            }
        }
    }

    async fn scheduler(self) {
        let mut state = self.inner.state.clone();
        loop {
            let deadline = next_deadline(&state.borrow_and_update().table);
            let wait = match deadline {
                Some(d) => {
                    let ms = d.millis_since(self.now()).max(0) as u64;
                    Duration::from_millis(ms).min(MAX_SCHEDULER_SLEEP)
                }
                None => MAX_SCHEDULER_SLEEP,
            };
            tokio::select! {
                _ = tokio::time::sleep(wait) => {
                    if deadline.is_some_and(|d| d <= self.now()) {
                        match self.expire_now().await {
                            Ok(fired) => {
                                for t in &fired {
                                    info!(device = %t.device, "auto-off");
                                }
                            }
                            Err(ServiceError::Stopped) => break,
                            Err(e) => {
                                warn!(error = %e, "scheduler stopping");
                                break;
                            }
                        }
                    }
                }
                changed = state.changed() => {
                    if changed.is_err() {
                        break;
                    }
                }
            }
        }
    }
}
