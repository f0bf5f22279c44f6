//! Thread lifecycle for the converted daemon.
//!
//! Process control maps onto threads: fork/main becomes [`Runtime::spawn`],
//! every exit flavor (`exit`, `_exit`, `abort`, return from main) converges
//! on [`exit_current`] or a plain return from the entry function, parent
//! waiting becomes [`Runtime::join`]/[`Runtime::detach`], and sleeping delays
//! only the calling thread. Thread ids live in a global registry so any part
//! of the daemon can look a thread up by slot.
//!
//! No wrappers exist for environment or session calls (`getenv`, `putenv`,
//! `setsid`): those stay process-wide on purpose.
//!
//! Dynamic memory owned by a thread that died is handed back through the
//! [`ReclaimList`]: threads register allocations they may leak, and the main
//! thread sweeps dead threads' entries. Abnormal exit is a recoverable
//! unwinding trap caught at the spawn boundary, so the process survives
//! to sweep.

use std::any::Any;
use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, Once};
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

use crate::{bind_current_tid, current_tid, globals, Tid};

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum LifecycleError {
    #[error("thread registry is full")]
    Exhausted,
    #[error("no such thread in the registry")]
    UnknownThread,
    #[error("thread was already joined or detached")]
    AlreadyJoined,
    #[error("thread is still running")]
    ThreadStillRunning,
    #[error("only the main thread may sweep")]
    NotMainThread,
}

/// Role a thread plays in the daemon topology.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum Role {
    /// The dispatcher: listens, spawns workers, supervises.
    Postmaster,
    /// Request processing.
    Worker,
    /// Startup/shutdown/checkpoint duties.
    Bootstrap,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Postmaster => "postmaster",
            Role::Worker => "worker",
            Role::Bootstrap => "bootstrap",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ThreadState {
    Running,
    Exited(i32),
    Abnormal,
}

impl fmt::Display for ThreadState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThreadState::Running => f.write_str("running"),
            ThreadState::Exited(s) => write!(f, "exited({s})"),
            ThreadState::Abnormal => f.write_str("abnormal"),
        }
    }
}

/// What [`Runtime::join`] observes once the thread is gone.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum JoinOutcome {
    Exited(i32),
    Abnormal,
}

/// Unwind payload carrying an explicit exit status through the trap.
struct ThreadExit(i32);

/// Unwind payload for a deliberate abnormal termination.
struct AbnormalTrap;

static HOOK: Once = Once::new();

/// Silences the controlled unwind payloads so exits don't spam stderr; every
/// other panic still reports through the previous hook.
fn install_panic_hook() {
    HOOK.call_once(|| {
        let prev = panic::take_hook();
        panic::set_hook(Box::new(move |info| {
            let p = info.payload();
            if p.is::<ThreadExit>() || p.is::<AbnormalTrap>() {
                return;
            }
            prev(info);
        }));
    });
}

/// Terminates the calling thread with `status`, like a process exit would
/// have. All exit flavors of the old code funnel here; the spawn wrapper
/// records the status and releases the thread's global contexts.
pub fn exit_current(status: i32) -> ! {
    panic::panic_any(ThreadExit(status));
}

/// Terminates the calling thread abnormally; the registry records
/// [`ThreadState::Abnormal`] and the thread's allocations wait for
/// [`Runtime::reclaim_sweep`].
pub fn trap_abnormal() -> ! {
    panic::panic_any(AbnormalTrap);
}

/// Delays only the calling thread, never the whole process.
pub fn sleep_current(d: Duration) {
    std::thread::sleep(d);
}

/// Counted allocation handle. Dropping it (directly or via a sweep) returns
/// the count to the global allocation counter.
pub struct TrackedAlloc {
    payload: Box<dyn Any + Send>,
    counter: Arc<AtomicUsize>,
}

impl TrackedAlloc {
    fn new(payload: Box<dyn Any + Send>, counter: Arc<AtomicUsize>) -> Self {
        counter.fetch_add(1, Ordering::SeqCst);
        TrackedAlloc { payload, counter }
    }

    pub fn payload(&self) -> &dyn Any {
        self.payload.as_ref()
    }
}

impl Drop for TrackedAlloc {
    fn drop(&mut self) {
        self.counter.fetch_sub(1, Ordering::SeqCst);
    }
}

struct ReclaimEntry {
    owner: Tid,
    handle_id: u64,
    // Held for its Drop: draining the entry frees the allocation.
    #[allow(dead_code)]
    alloc: TrackedAlloc,
}

/// Global list of (owner, allocation) pairs awaiting release by the main
/// thread after the owner died.
#[derive(Default)]
pub struct ReclaimList {
    entries: Mutex<Vec<ReclaimEntry>>,
    next_handle: AtomicU64,
}

impl ReclaimList {
    pub fn register(&self, owner: Tid, alloc: TrackedAlloc) -> u64 {
        let handle_id = self.next_handle.fetch_add(1, Ordering::SeqCst);
        self.entries.lock().unwrap().push(ReclaimEntry {
            owner,
            handle_id,
            alloc,
        });
        handle_id
    }

    fn drain_for(&self, owner: Tid) -> usize {
        let mut entries = self.entries.lock().unwrap();
        let before = entries.len();
        entries.retain(|e| e.owner != owner);
        before - entries.len()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn owners(&self) -> Vec<Tid> {
        self.entries.lock().unwrap().iter().map(|e| e.owner).collect()
    }

    pub fn handle_ids(&self) -> Vec<u64> {
        self.entries
            .lock()
            .unwrap()
            .iter()
            .map(|e| e.handle_id)
            .collect()
    }
}

struct SlotEntry {
    tid: Tid,
    role: Role,
    state: ThreadState,
    handle: Option<JoinHandle<i32>>,
}

struct RtInner {
    slots: Vec<SlotEntry>,
    capacity: usize,
}

/// Thread registry plus reclaim list: the process-control surface of the
/// converted daemon. The creating thread takes slot 0 as the postmaster.
pub struct Runtime {
    inner: Mutex<RtInner>,
    reclaim: ReclaimList,
    allocations: Arc<AtomicUsize>,
    main: Tid,
}

impl Runtime {
    /// `capacity` bounds the total number of registry slots, the creator's
    /// included.
    pub fn new(capacity: usize) -> Arc<Runtime> {
        install_panic_hook();
        assert!(capacity >= 1, "registry needs room for the main thread");
        let main = Tid(0);
        bind_current_tid(main);
        Arc::new(Runtime {
            inner: Mutex::new(RtInner {
                slots: vec![SlotEntry {
                    tid: main,
                    role: Role::Postmaster,
                    state: ThreadState::Running,
                    handle: None,
                }],
                capacity,
            }),
            reclaim: ReclaimList::default(),
            allocations: Arc::new(AtomicUsize::new(0)),
            main,
        })
    }

    pub fn main_tid(&self) -> Tid {
        self.main
    }

    pub fn reclaim(&self) -> &ReclaimList {
        &self.reclaim
    }

    /// Live count on the global allocation counter.
    pub fn live_allocations(&self) -> usize {
        self.allocations.load(Ordering::SeqCst)
    }

    /// Wraps a payload in a counted handle tied to this runtime's allocation
    /// counter.
    pub fn track<T: Any + Send>(&self, payload: T) -> TrackedAlloc {
        TrackedAlloc::new(Box::new(payload), Arc::clone(&self.allocations))
    }

    /// Starts a thread running `entry` and registers it. The entry's return
    /// value is its exit status; [`exit_current`] short-circuits to the same
    /// place, and any other unwind is recorded as abnormal.
    pub fn spawn(
        self: &Arc<Self>,
        role: Role,
        entry: impl FnOnce() -> i32 + Send + 'static,
    ) -> Result<Tid, LifecycleError> {
        let tid;
        {
            let mut inner = self.inner.lock().unwrap();
            if inner.slots.len() >= inner.capacity {
                return Err(LifecycleError::Exhausted);
            }
            tid = Tid(inner.slots.len() as u32);
            inner.slots.push(SlotEntry {
                tid,
                role,
                state: ThreadState::Running,
                handle: None,
            });
        }
        let rt = Arc::clone(self);
        let handle = std::thread::Builder::new()
            .name(format!("shim-{}", tid))
            .spawn(move || {
                bind_current_tid(tid);
                let result = panic::catch_unwind(AssertUnwindSafe(entry));
                // Thread-exit path: the per-thread global contexts go back
                // to the reclaim list whatever the outcome.
                for block in globals::take_current_contexts() {
                    let alloc =
                        TrackedAlloc::new(Box::new(block), Arc::clone(&rt.allocations));
                    rt.reclaim.register(tid, alloc);
                }
                let (state, status) = match result {
                    Ok(status) => (ThreadState::Exited(status), status),
                    Err(payload) => match payload.downcast::<ThreadExit>() {
                        Ok(exit) => (ThreadState::Exited(exit.0), exit.0),
                        Err(_) => (ThreadState::Abnormal, -1),
                    },
                };
                rt.set_state(tid, state);
                status
            })
            .expect("thread spawn");
        self.inner.lock().unwrap().slots[tid.0 as usize].handle = Some(handle);
        Ok(tid)
    }

    fn set_state(&self, tid: Tid, state: ThreadState) {
        let mut inner = self.inner.lock().unwrap();
        inner.slots[tid.0 as usize].state = state;
    }

    pub fn state(&self, tid: Tid) -> Result<ThreadState, LifecycleError> {
        let inner = self.inner.lock().unwrap();
        inner
            .slots
            .get(tid.0 as usize)
            .map(|s| s.state)
            .ok_or(LifecycleError::UnknownThread)
    }

    /// Blocks until the thread finishes and returns how it went. Each thread
    /// can be joined or detached once.
    pub fn join(&self, tid: Tid) -> Result<JoinOutcome, LifecycleError> {
        let handle = {
            let mut inner = self.inner.lock().unwrap();
            let slot = inner
                .slots
                .get_mut(tid.0 as usize)
                .ok_or(LifecycleError::UnknownThread)?;
            slot.handle.take().ok_or(LifecycleError::AlreadyJoined)?
        };
        match handle.join() {
            Ok(status) => match self.state(tid)? {
                ThreadState::Abnormal => Ok(JoinOutcome::Abnormal),
                _ => Ok(JoinOutcome::Exited(status)),
            },
            // The wrapper caught the entry's unwind, so this means the
            // wrapper itself died; record it as abnormal.
            Err(_) => {
                self.set_state(tid, ThreadState::Abnormal);
                Ok(JoinOutcome::Abnormal)
            }
        }
    }

    /// Lets the thread clean itself up without a join.
    pub fn detach(&self, tid: Tid) -> Result<(), LifecycleError> {
        let mut inner = self.inner.lock().unwrap();
        let slot = inner
            .slots
            .get_mut(tid.0 as usize)
            .ok_or(LifecycleError::UnknownThread)?;
        let handle = slot.handle.take().ok_or(LifecycleError::AlreadyJoined)?;
        drop(handle);
        Ok(())
    }

    /// Registers an allocation the calling thread may leave behind.
    pub fn reclaim_register(&self, owner: Tid, alloc: TrackedAlloc) -> u64 {
        self.reclaim.register(owner, alloc)
    }

    /// Frees every reclaim entry owned by `tid`. Main-thread only, and only
    /// once the owner is dead.
    pub fn reclaim_sweep(&self, tid: Tid) -> Result<usize, LifecycleError> {
        if current_tid() != Some(self.main) {
            return Err(LifecycleError::NotMainThread);
        }
        match self.state(tid)? {
            ThreadState::Running => Err(LifecycleError::ThreadStillRunning),
            ThreadState::Exited(_) | ThreadState::Abnormal => Ok(self.reclaim.drain_for(tid)),
        }
    }

    pub fn running_count(&self) -> usize {
        let inner = self.inner.lock().unwrap();
        inner
            .slots
            .iter()
            .filter(|s| s.state == ThreadState::Running)
            .count()
    }

    pub fn roles(&self) -> HashMap<Role, usize> {
        let inner = self.inner.lock().unwrap();
        let mut out = HashMap::new();
        for s in &inner.slots {
            *out.entry(s.role).or_insert(0) += 1;
        }
        out
    }

    /// Registry dump: one line per slot, `slot tid role state`.
    pub fn dump(&self) -> String {
        let inner = self.inner.lock().unwrap();
        let mut out = String::new();
        for (i, s) in inner.slots.iter().enumerate() {
            writeln!(out, "{} {} {} {}", i, s.tid, s.role, s.state).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spawn_registers_running_workers_in_distinct_slots() {
        let rt = Runtime::new(8);
        let mut tids = Vec::new();
        for _ in 0..3 {
            tids.push(
                rt.spawn(Role::Worker, || {
                    sleep_current(Duration::from_millis(30));
                    0
                })
                .unwrap(),
            );
        }
        assert_eq!(tids, vec![Tid(1), Tid(2), Tid(3)]);
        assert_eq!(rt.running_count(), 4); // main + 3 workers
        for t in tids {
            assert_eq!(rt.join(t).unwrap(), JoinOutcome::Exited(0));
        }
        assert_eq!(rt.running_count(), 1);
    }

    #[test]
    fn capacity_exhaustion_is_reported() {
        let rt = Runtime::new(2);
        rt.spawn(Role::Worker, || 0).unwrap();
        assert_eq!(
            rt.spawn(Role::Worker, || 0).unwrap_err(),
            LifecycleError::Exhausted
        );
        rt.join(Tid(1)).unwrap();
    }

    #[test]
    fn exit_current_carries_status_to_join() {
        let rt = Runtime::new(4);
        let t = rt
            .spawn(Role::Worker, || {
                exit_current(42);
            })
            .unwrap();
        assert_eq!(rt.join(t).unwrap(), JoinOutcome::Exited(42));
        assert_eq!(rt.state(t).unwrap(), ThreadState::Exited(42));
    }

    #[test]
    fn returning_from_entry_is_a_normal_exit() {
        let rt = Runtime::new(4);
        let t = rt.spawn(Role::Worker, || 7).unwrap();
        assert_eq!(rt.join(t).unwrap(), JoinOutcome::Exited(7));
    }

    #[test]
    fn abnormal_trap_is_recorded_not_fatal() {
        let rt = Runtime::new(4);
        let t = rt
            .spawn(Role::Worker, || {
                trap_abnormal();
            })
            .unwrap();
        assert_eq!(rt.join(t).unwrap(), JoinOutcome::Abnormal);
        assert_eq!(rt.state(t).unwrap(), ThreadState::Abnormal);
    }

    #[test]
    fn double_join_is_rejected() {
        let rt = Runtime::new(4);
        let t = rt.spawn(Role::Worker, || 0).unwrap();
        rt.join(t).unwrap();
        assert_eq!(rt.join(t).unwrap_err(), LifecycleError::AlreadyJoined);
    }

    #[test]
    fn detach_then_exit_cleans_slot_without_join() {
        let rt = Runtime::new(4);
        let t = rt.spawn(Role::Worker, || 0).unwrap();
        rt.detach(t).unwrap();
        assert_eq!(rt.join(t).unwrap_err(), LifecycleError::AlreadyJoined);
        // The thread still records its state on the way out.
        let deadline = std::time::Instant::now() + Duration::from_secs(2);
        while rt.state(t).unwrap() == ThreadState::Running
            && std::time::Instant::now() < deadline
        {
            sleep_current(Duration::from_millis(5));
        }
        assert_eq!(rt.state(t).unwrap(), ThreadState::Exited(0));
    }

    #[test]
    fn join_unknown_thread_fails() {
        let rt = Runtime::new(4);
        assert_eq!(rt.join(Tid(9)).unwrap_err(), LifecycleError::UnknownThread);
    }

    #[test]
    fn sleep_delays_only_the_caller() {
        let rt = Runtime::new(4);
        let counter = Arc::new(AtomicUsize::new(0));
        let c = Arc::clone(&counter);
        let busy = rt
            .spawn(Role::Worker, move || {
                for _ in 0..50 {
                    c.fetch_add(1, Ordering::SeqCst);
                    sleep_current(Duration::from_millis(1));
                }
                0
            })
            .unwrap();
        let sleeper = rt
            .spawn(Role::Worker, || {
                sleep_current(Duration::from_millis(50));
                0
            })
            .unwrap();
        rt.join(sleeper).unwrap();
        // While one thread slept 50ms the other made clear progress.
        assert!(counter.load(Ordering::SeqCst) >= 10);
        rt.join(busy).unwrap();
    }

    #[test]
    fn zero_sleep_returns_immediately() {
        sleep_current(Duration::ZERO);
    }

    #[test]
    fn sweep_frees_dead_threads_allocations() {
        let rt = Runtime::new(8);
        let rt2 = Arc::clone(&rt);
        let t = rt
            .spawn(Role::Worker, move || {
                let me = current_tid().unwrap();
                for i in 0..3 {
                    let alloc = rt2.track(vec![0u8; 64 + i]);
                    rt2.reclaim_register(me, alloc);
                }
                trap_abnormal();
            })
            .unwrap();
        rt.join(t).unwrap();
        assert_eq!(rt.reclaim().len(), 3);
        assert_eq!(rt.live_allocations(), 3);
        assert_eq!(rt.reclaim_sweep(t).unwrap(), 3);
        assert!(rt.reclaim().is_empty());
        assert_eq!(rt.live_allocations(), 0);
        // Second sweep has nothing left.
        assert_eq!(rt.reclaim_sweep(t).unwrap(), 0);
    }

    #[test]
    fn sweep_of_running_thread_is_rejected() {
        let rt = Runtime::new(4);
        let t = rt
            .spawn(Role::Worker, || {
                sleep_current(Duration::from_millis(50));
                0
            })
            .unwrap();
        assert_eq!(
            rt.reclaim_sweep(t).unwrap_err(),
            LifecycleError::ThreadStillRunning
        );
        rt.join(t).unwrap();
    }

    #[test]
    fn sweep_from_worker_thread_is_rejected() {
        let rt = Runtime::new(4);
        let victim = rt.spawn(Role::Worker, || 0).unwrap();
        rt.join(victim).unwrap();
        let rt2 = Arc::clone(&rt);
        let t = rt
            .spawn(Role::Worker, move || {
                match rt2.reclaim_sweep(victim) {
                    Err(LifecycleError::NotMainThread) => 0,
                    _ => 1,
                }
            })
            .unwrap();
        assert_eq!(rt.join(t).unwrap(), JoinOutcome::Exited(0));
    }

    #[test]
    fn exiting_thread_returns_global_contexts_to_reclaim() {
        let layout = Arc::new(globals::GlobalLayout::new());
        let slot = layout.define("w", globals::GValue::Int(1)).unwrap();
        layout.seal().unwrap();
        let rt = Runtime::new(4);
        let l = Arc::clone(&layout);
        let t = rt
            .spawn(Role::Worker, move || {
                let me = current_tid().unwrap();
                globals::context_attach(&l, me).unwrap();
                globals::set_int(slot, 5).unwrap();
                exit_current(0);
            })
            .unwrap();
        rt.join(t).unwrap();
        assert_eq!(rt.reclaim().len(), 1);
        assert_eq!(rt.live_allocations(), 1);
        assert_eq!(rt.reclaim_sweep(t).unwrap(), 1);
        assert_eq!(rt.live_allocations(), 0);
    }

    #[test]
    fn dump_shows_topology() {
        let rt = Runtime::new(8);
        let w = rt.spawn(Role::Worker, || 0).unwrap();
        let b = rt.spawn(Role::Bootstrap, || 0).unwrap();
        rt.join(w).unwrap();
        rt.join(b).unwrap();
        let dump = rt.dump();
        assert!(dump.starts_with("0 0 postmaster running\n"));
        assert!(dump.contains("1 1 worker exited(0)"));
        assert!(dump.contains("2 2 bootstrap exited(0)"));
        let roles = rt.roles();
        assert_eq!(roles[&Role::Postmaster], 1);
        assert_eq!(roles[&Role::Worker], 1);
        assert_eq!(roles[&Role::Bootstrap], 1);
    }
}
