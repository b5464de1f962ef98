//! Session API and live streaming loop.
//!
//! HTTP routes:
//!
//! | method | path                        |                                   |
//! |--------|-----------------------------|-----------------------------------|
//! | POST   | /sessions                   | create from a JSON config body    |
//! | GET    | /sessions/{id}              | status                            |
//! | GET    | /sessions/{id}/results      | archive, reports, analysis        |
//! | GET    | /sessions/{id}/last_trial   | applied input trace of last trial |
//! | POST   | /sessions/{id}/start        | start or resume a live session    |
//! | GET    | /sessions/{id}/stream       | WebSocket stream (live only)      |

pub mod mapping;
pub mod messages;

mod api;
mod live;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use hilo_core::protocol::{Session, TrialKind};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

pub use api::router;
use messages::Phase;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", content = "detail", rename_all = "snake_case")]
pub enum Status {
    Waiting,
    Running,
    Completed,
    Failed(String),
}

/// Inputs applied during the most recent live trial, one per control tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedTrial {
    pub kind: TrialKind,
    pub decision: Vec<f64>,
    /// Screen positions held at each control tick.
    pub trace: Vec<[f64; 2]>,
    pub cost: f64,
}

pub struct Entry {
    pub id: Uuid,
    pub live: bool,
    session: Mutex<Session>,
    status: Mutex<Status>,
    phase: Mutex<Phase>,
    started: AtomicBool,
    attached: AtomicBool,
    invalidated: AtomicU64,
    last_trial: Mutex<Option<AppliedTrial>>,
    save_to: Option<PathBuf>,
}

impl Entry {
    /// Consistent copy of the session.
    pub fn snapshot(&self) -> Session {
        self.session.lock().unwrap().clone()
    }

    pub fn status(&self) -> Status {
        self.status.lock().unwrap().clone()
    }

    pub fn invalidated_trials(&self) -> u64 {
        self.invalidated.load(Ordering::SeqCst)
    }

    fn set_status(&self, s: Status) {
        *self.status.lock().unwrap() = s;
    }

    fn set_phase(&self, p: Phase) {
        *self.phase.lock().unwrap() = p;
    }

    fn persist(&self, session: &Session) {
        if let Some(dir) = &self.save_to {
            if let Err(e) = session.save(&dir.join(format!("{}.json", self.id))) {
                log::warn!("session {}: snapshot not written: {e}", self.id);
            }
        }
    }
}

#[derive(Default)]
pub struct Registry {
    sessions: RwLock<HashMap<Uuid, Arc<Entry>>>,
    save_dir: Option<PathBuf>,
}

impl Registry {
    /// Sessions are snapshotted to `save_dir` after every trial when set.
    pub fn new(save_dir: Option<PathBuf>) -> Arc<Self> {
        Arc::new(Self {
            sessions: RwLock::default(),
            save_dir,
        })
    }

    pub fn get(&self, id: &str) -> Option<Arc<Entry>> {
        let id = Uuid::parse_str(id).ok()?;
        self.sessions.read().unwrap().get(&id).cloned()
    }

    /// Registers a session. Batch sessions start running at once on the
    /// blocking pool; live sessions wait for a stream and a start request.
    pub fn insert(&self, session: Session) -> Arc<Entry> {
        let live = session.config.live;
        let entry = Arc::new(Entry {
            id: Uuid::new_v4(),
            live,
            session: Mutex::new(session),
            status: Mutex::new(Status::Waiting),
            phase: Mutex::new(Phase::Idle),
            started: AtomicBool::new(false),
            attached: AtomicBool::new(false),
            invalidated: AtomicU64::new(0),
            last_trial: Mutex::new(None),
            save_to: self.save_dir.clone(),
        });
        self.sessions.write().unwrap().insert(entry.id, entry.clone());
        if !live {
            let e = entry.clone();
            e.started.store(true, Ordering::SeqCst);
            e.set_status(Status::Running);
            tokio::task::spawn_blocking(move || run_batch(&e));
        }
        entry
    }
}

/// Serves the API on `addr` until the process ends.
pub async fn serve(addr: &str, save_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Registry::new(save_dir))).await
}

fn run_batch(entry: &Entry) {
    loop {
        let mut work = entry.snapshot();
        if work.is_finished() {
            entry.set_status(Status::Completed);
            return;
        }
        if let Err(e) = work.run_trial() {
            entry.set_status(Status::Failed(e.to_string()));
            return;
        }
        entry.persist(&work);
        *entry.session.lock().unwrap() = work;
    }
}
