//! Per-thread signal handling behind one process-wide handler per signal
//! kind.
//!
//! Threads of one process cannot each install their own OS handler, so the
//! process handler becomes a dispatcher: each thread keeps a private
//! (handler, dispatch flag) pair per signal kind, set together by the owning
//! thread, and a delivery runs the target thread's handler exactly when its
//! flag is true. Every delivery is recorded in an append-only audit log
//! whether or not a handler ran.
//!
//! Delivery is an explicit [`Dispatcher::deliver`] call: the handler runs
//! synchronously on the delivering thread. For code that wants handlers on
//! the target thread instead, [`Dispatcher::deliver_deferred`] parks the
//! signal until the target calls [`Dispatcher::dispatch_pending`] at a yield
//! point. Real async-signal delivery is out of scope.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use thiserror::Error;

use crate::{current_tid, Tid};

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum SigError {
    #[error("table entries may only be changed by their owning thread")]
    WrongThread,
    #[error("target thread is unknown to the dispatcher")]
    UnknownThread,
    #[error("no dispatcher installed for that signal kind")]
    NotInstalled,
}

/// Closed set of signal kinds the daemon cares about.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum SignalKind {
    Hup,
    Term,
    Usr1,
    Usr2,
    Alarm,
    Child,
}

impl SignalKind {
    pub const ALL: [SignalKind; 6] = [
        SignalKind::Hup,
        SignalKind::Term,
        SignalKind::Usr1,
        SignalKind::Usr2,
        SignalKind::Alarm,
        SignalKind::Child,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SignalKind::Hup => "hup",
            SignalKind::Term => "term",
            SignalKind::Usr1 => "usr1",
            SignalKind::Usr2 => "usr2",
            SignalKind::Alarm => "alarm",
            SignalKind::Child => "child",
        }
    }
}

/// Per-thread handler callback.
pub type Handler = Arc<dyn Fn(SignalKind) + Send + Sync>;

struct Entry {
    handler: Handler,
    flag: bool,
}

#[derive(Default)]
struct ThreadTable {
    entries: HashMap<SignalKind, Entry>,
}

/// Audit record appended for every delivery.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeliveryRecord {
    pub kind: SignalKind,
    pub target: Tid,
    pub handled: bool,
    pub step: u64,
}

/// The process-wide signal dispatcher.
///
/// Routing holds no per-kind state beyond the per-thread tables: delivering
/// n signals appends exactly n records. Tables are mutated only by their
/// owning thread; `deliver` may be called from any thread.
#[derive(Default)]
pub struct Dispatcher {
    installed: Mutex<HashMap<SignalKind, bool>>,
    tables: RwLock<HashMap<Tid, ThreadTable>>,
    /// Threads that detached on exit: signals for them are recorded
    /// unhandled instead of erroring, since the sender may not have seen
    /// the exit yet.
    exited: Mutex<HashMap<Tid, bool>>,
    log: Mutex<Vec<DeliveryRecord>>,
    pending: Mutex<HashMap<Tid, Vec<SignalKind>>>,
    next_step: AtomicU64,
}

impl Dispatcher {
    pub fn new() -> Self {
        Self::default()
    }

    /// Installs the process-wide dispatcher for `kind`. Idempotent.
    pub fn install_dispatcher(&self, kind: SignalKind) {
        self.installed.lock().unwrap().insert(kind, true);
    }

    pub fn install_all(&self) {
        for kind in SignalKind::ALL {
            self.install_dispatcher(kind);
        }
    }

    pub fn is_installed(&self, kind: SignalKind) -> bool {
        self.installed.lock().unwrap().contains_key(&kind)
    }

    /// Makes the calling thread known to the dispatcher with an empty table.
    pub fn attach_thread(&self, tid: Tid) -> Result<(), SigError> {
        if current_tid() != Some(tid) {
            return Err(SigError::WrongThread);
        }
        self.tables.write().unwrap().entry(tid).or_default();
        Ok(())
    }

    /// Sets the calling thread's (handler, flag) pair for `kind` atomically.
    /// Only the owning thread may call this.
    pub fn set_thread_handler(
        &self,
        tid: Tid,
        kind: SignalKind,
        handler: Handler,
        flag: bool,
    ) -> Result<(), SigError> {
        if current_tid() != Some(tid) {
            return Err(SigError::WrongThread);
        }
        let mut tables = self.tables.write().unwrap();
        tables
            .entry(tid)
            .or_default()
            .entries
            .insert(kind, Entry { handler, flag });
        Ok(())
    }

    /// Flips only the flag of an existing pair; owner-only like the setter.
    pub fn set_dispatch_flag(&self, tid: Tid, kind: SignalKind, flag: bool) -> Result<(), SigError> {
        if current_tid() != Some(tid) {
            return Err(SigError::WrongThread);
        }
        let mut tables = self.tables.write().unwrap();
        if let Some(entry) = tables.entry(tid).or_default().entries.get_mut(&kind) {
            entry.flag = flag;
        }
        Ok(())
    }

    /// Drops the calling thread's table on its way out; later deliveries to
    /// it are recorded unhandled rather than failing.
    pub fn detach_thread(&self, tid: Tid) -> Result<(), SigError> {
        if current_tid() != Some(tid) {
            return Err(SigError::WrongThread);
        }
        self.tables.write().unwrap().remove(&tid);
        self.pending.lock().unwrap().remove(&tid);
        self.exited.lock().unwrap().insert(tid, true);
        Ok(())
    }

    fn route(&self, kind: SignalKind, target: Tid) -> Result<Option<Handler>, SigError> {
        if !self.is_installed(kind) {
            return Err(SigError::NotInstalled);
        }
        let tables = self.tables.read().unwrap();
        let Some(table) = tables.get(&target) else {
            if self.exited.lock().unwrap().contains_key(&target) {
                return Ok(None);
            }
            return Err(SigError::UnknownThread);
        };
        Ok(table
            .entries
            .get(&kind)
            .filter(|e| e.flag)
            .map(|e| Arc::clone(&e.handler)))
    }

    fn record(&self, kind: SignalKind, target: Tid, handled: bool) -> DeliveryRecord {
        let rec = DeliveryRecord {
            kind,
            target,
            handled,
            step: self.next_step.fetch_add(1, Ordering::SeqCst),
        };
        self.log.lock().unwrap().push(rec);
        rec
    }

    /// Routes one signal: the target's handler runs (synchronously, on the
    /// calling thread) iff the target registered it with a true flag.
    pub fn deliver(&self, kind: SignalKind, target: Tid) -> Result<DeliveryRecord, SigError> {
        let handler = self.route(kind, target)?;
        let handled = handler.is_some();
        let rec = self.record(kind, target, handled);
        if let Some(h) = handler {
            h(kind);
        }
        Ok(rec)
    }

    /// Parks one signal for the target thread's next
    /// [`Dispatcher::dispatch_pending`] call. Routing and recording happen at
    /// dispatch time.
    pub fn deliver_deferred(&self, kind: SignalKind, target: Tid) -> Result<(), SigError> {
        if !self.is_installed(kind) {
            return Err(SigError::NotInstalled);
        }
        if !self.tables.read().unwrap().contains_key(&target) {
            return Err(SigError::UnknownThread);
        }
        self.pending.lock().unwrap().entry(target).or_default().push(kind);
        Ok(())
    }

    /// Runs the calling thread's parked signals at a yield point. Returns the
    /// number dispatched.
    pub fn dispatch_pending(&self) -> usize {
        let Some(tid) = current_tid() else { return 0 };
        let queued = self
            .pending
            .lock()
            .unwrap()
            .remove(&tid)
            .unwrap_or_default();
        let n = queued.len();
        for kind in queued {
            let _ = self.deliver(kind, tid);
        }
        n
    }

    pub fn log(&self) -> Vec<DeliveryRecord> {
        self.log.lock().unwrap().clone()
    }

    /// Audit dump: one line per delivery, `step kind target handled`.
    pub fn dump(&self) -> String {
        let log = self.log.lock().unwrap();
        let mut out = String::new();
        for rec in log.iter() {
            writeln!(
                out,
                "{} {} {} {}",
                rec.step,
                rec.kind.name(),
                rec.target,
                rec.handled
            )
            .unwrap();
        }
        out
    }
}
