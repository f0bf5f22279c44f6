//! System V semaphore emulation for threads.
//!
//! A kernel semaphore wakes sleepers on release; a plain thread mutex does
//! not, so a release here is two steps: commit the increment, then notify the
//! set's waiters. Blocked acquirers sit in a retry loop (attempt, wait for a
//! release notification, attempt again) which stays correct under spurious
//! wakeups.
//!
//! [`SemCore`] is the pure state machine: values plus a FIFO waiter queue,
//! with waiter admission re-evaluated after every value change. The blocking
//! registry ([`SemRegistry`]) and the virtual substrate driven by
//! [`crate::explore`] both run this same core.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::Tid;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum SemError {
    #[error("no semaphore set under that key or id")]
    NotFound,
    #[error("set exists and exclusive creation was requested")]
    AlreadyExists,
    #[error("existing set has fewer semaphores than requested")]
    NsemsMismatch,
    #[error("semaphore values must be non-negative")]
    InvalidValue,
    #[error("operation would block")]
    WouldBlock,
    #[error("semaphore set was removed")]
    SetRemoved,
    #[error("deadline exceeded")]
    Timeout,
    #[error("undo semantics are not supported")]
    Unsupported,
    #[error("malformed operation list")]
    InvalidOp,
}

/// One element of a `semop` list: negative delta acquires (P), positive
/// releases (V), zero waits for the value to reach zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SemOpRequest {
    pub sem_num: usize,
    pub delta: i32,
    pub nowait: bool,
    pub undo: bool,
}

impl SemOpRequest {
    pub fn new(sem_num: usize, delta: i32) -> Self {
        SemOpRequest {
            sem_num,
            delta,
            nowait: false,
            undo: false,
        }
    }

    /// Acquire: decrement by one.
    pub fn p(sem_num: usize) -> Self {
        Self::new(sem_num, -1)
    }

    /// Release: increment by one.
    pub fn v(sem_num: usize) -> Self {
        Self::new(sem_num, 1)
    }

    pub fn nowait(mut self) -> Self {
        self.nowait = true;
        self
    }
}

/// Blocked acquire request parked in a set's FIFO queue.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SemWaiter {
    pub token: Tid,
    pub ops: Vec<SemOpRequest>,
    /// Semaphore whose state blocked the request; doubles as its notification
    /// channel.
    pub blocked_on: usize,
}

/// Outcome of one atomic attempt at an op list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Attempt {
    /// All deltas applied; `changed` is true when any value moved.
    Committed { changed: bool },
    /// Op at `op_index` cannot proceed; nothing was applied.
    Blocked { op_index: usize },
}

/// Pure semaphore-set state machine: values plus the FIFO waiter queue.
///
/// Every observable value stays non-negative; an op list commits atomically
/// or not at all. Admission of queued waiters happens in FIFO order whenever
/// values change, repeated to a fixpoint so one release can admit several
/// requests.
#[derive(Clone, Debug)]
pub struct SemCore {
    values: Vec<i64>,
    waiters: VecDeque<SemWaiter>,
}

impl SemCore {
    pub fn new(nsems: usize) -> Self {
        SemCore {
            values: vec![0; nsems],
            waiters: VecDeque::new(),
        }
    }

    pub fn with_values(values: Vec<i64>) -> Self {
        assert!(values.iter().all(|&v| v >= 0), "initial values must be >= 0");
        SemCore {
            values,
            waiters: VecDeque::new(),
        }
    }

    pub fn nsems(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[i64] {
        &self.values
    }

    pub fn value(&self, sem_num: usize) -> Option<i64> {
        self.values.get(sem_num).copied()
    }

    pub fn waiters(&self) -> impl Iterator<Item = &SemWaiter> {
        self.waiters.iter()
    }

    pub fn waiter_count(&self, sem_num: usize) -> usize {
        self.waiters.iter().filter(|w| w.blocked_on == sem_num).count()
    }

    pub fn total_waiters(&self) -> usize {
        self.waiters.len()
    }

    /// Rejects empty lists, out-of-range indices and undo requests.
    pub fn validate(&self, ops: &[SemOpRequest]) -> Result<(), SemError> {
        if ops.is_empty() {
            return Err(SemError::InvalidOp);
        }
        for op in ops {
            if op.sem_num >= self.values.len() {
                return Err(SemError::InvalidOp);
            }
            if op.undo {
                return Err(SemError::Unsupported);
            }
        }
        Ok(())
    }

    /// Attempts the whole list atomically against current values.
    pub fn try_commit(&mut self, ops: &[SemOpRequest]) -> Attempt {
        let mut scratch = self.values.clone();
        for (i, op) in ops.iter().enumerate() {
            let v = &mut scratch[op.sem_num];
            if op.delta == 0 {
                if *v != 0 {
                    return Attempt::Blocked { op_index: i };
                }
            } else {
                let next = *v + i64::from(op.delta);
                if next < 0 {
                    return Attempt::Blocked { op_index: i };
                }
                *v = next;
            }
        }
        let changed = scratch != self.values;
        self.values = scratch;
        debug_assert!(self.values.iter().all(|&v| v >= 0));
        Attempt::Committed { changed }
    }

    /// Parks a blocked request at the tail of the FIFO queue.
    pub fn enqueue_waiter(&mut self, token: Tid, ops: Vec<SemOpRequest>, blocked_on: usize) {
        debug_assert!(!self.waiters.iter().any(|w| w.token == token));
        self.waiters.push_back(SemWaiter {
            token,
            ops,
            blocked_on,
        });
    }

    /// Drops a parked request (timeout path). Returns whether it was present.
    pub fn remove_waiter(&mut self, token: Tid) -> bool {
        let before = self.waiters.len();
        self.waiters.retain(|w| w.token != token);
        self.waiters.len() != before
    }

    /// Re-evaluates the queue in FIFO order, committing every request that
    /// has become satisfiable, until a full pass admits nothing. Returns the
    /// admitted tokens in admission order.
    pub fn admit_waiters(&mut self) -> Vec<Tid> {
        let mut admitted = Vec::new();
        loop {
            let mut progressed = false;
            let mut idx = 0;
            while idx < self.waiters.len() {
                let ops = self.waiters[idx].ops.clone();
                match self.try_commit(&ops) {
                    Attempt::Committed { .. } => {
                        let w = self.waiters.remove(idx).unwrap();
                        admitted.push(w.token);
                        progressed = true;
                        // Restart the scan: this commit may have freed an
                        // earlier waiter.
                        idx = 0;
                    }
                    Attempt::Blocked { .. } => idx += 1,
                }
            }
            if !progressed {
                break;
            }
        }
        admitted
    }

    /// Commit-then-admit: the shared entry point for both substrates.
    /// On commit, any waiter whose request became satisfiable is admitted
    /// (its deltas applied) before this call returns.
    pub fn apply(&mut self, ops: &[SemOpRequest]) -> Result<AppliedOutcome, BlockedOutcome> {
        match self.try_commit(ops) {
            Attempt::Committed { changed } => {
                let admitted = if changed { self.admit_waiters() } else { Vec::new() };
                Ok(AppliedOutcome { changed, admitted })
            }
            Attempt::Blocked { op_index } => Err(BlockedOutcome { op_index }),
        }
    }

    /// `semctl(SETVAL)` analogue: overwrite and re-evaluate waiters.
    pub fn set_value(&mut self, sem_num: usize, value: i64) -> Result<Vec<Tid>, SemError> {
        if sem_num >= self.values.len() {
            return Err(SemError::InvalidOp);
        }
        if value < 0 {
            return Err(SemError::InvalidValue);
        }
        self.values[sem_num] = value;
        Ok(self.admit_waiters())
    }

    /// Fails every parked request; used when the set is removed.
    pub fn take_all_waiters(&mut self) -> Vec<Tid> {
        self.waiters.drain(..).map(|w| w.token).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AppliedOutcome {
    pub changed: bool,
    pub admitted: Vec<Tid>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockedOutcome {
    pub op_index: usize,
}

/// Registry-unique semaphore-set id.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct SemSetId(u64);

impl SemSetId {
    pub fn raw(self) -> u64 {
        self.0
    }
}

struct SemSet {
    key: u64,
    state: Mutex<SetState>,
    cond: Condvar,
}

struct SetState {
    core: SemCore,
    /// Results published for waiters admitted or failed while parked.
    done: HashMap<Tid, Result<(), SemError>>,
    removed: bool,
}

#[derive(Default)]
struct RegInner {
    next_id: u64,
    by_key: HashMap<u64, SemSetId>,
    sets: HashMap<u64, Arc<SemSet>>,
}

/// Blocking semaphore registry: the real-thread substrate over [`SemCore`].
pub struct SemRegistry {
    inner: Mutex<RegInner>,
}

impl Default for SemRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl SemRegistry {
    pub fn new() -> Self {
        SemRegistry {
            inner: Mutex::new(RegInner::default()),
        }
    }

    /// `semget` analogue. New sets start with every value at zero. A lookup
    /// requesting more semaphores than the set holds fails, as the kernel's
    /// does; requesting fewer (or zero) succeeds.
    pub fn get(
        &self,
        key: u64,
        nsems: usize,
        create: bool,
        exclusive: bool,
    ) -> Result<SemSetId, SemError> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(&id) = inner.by_key.get(&key) {
            if create && exclusive {
                return Err(SemError::AlreadyExists);
            }
            let set = &inner.sets[&id.0];
            let existing = set.state.lock().unwrap().core.nsems();
            if nsems > existing {
                return Err(SemError::NsemsMismatch);
            }
            return Ok(id);
        }
        if !create {
            return Err(SemError::NotFound);
        }
        if nsems == 0 {
            return Err(SemError::InvalidOp);
        }
        let id = SemSetId(inner.next_id);
        inner.next_id += 1;
        inner.sets.insert(
            id.0,
            Arc::new(SemSet {
                key,
                state: Mutex::new(SetState {
                    core: SemCore::new(nsems),
                    done: HashMap::new(),
                    removed: false,
                }),
                cond: Condvar::new(),
            }),
        );
        inner.by_key.insert(key, id);
        Ok(id)
    }

    fn shared(&self, id: SemSetId) -> Result<Arc<SemSet>, SemError> {
        self.inner
            .lock()
            .unwrap()
            .sets
            .get(&id.0)
            .cloned()
            .ok_or(SemError::NotFound)
    }

    /// `semctl(SETVAL)` analogue. Raising a value admits queued acquirers in
    /// FIFO order before returning.
    pub fn set_value(&self, id: SemSetId, sem_num: usize, value: i64) -> Result<(), SemError> {
        let set = self.shared(id)?;
        let mut st = set.state.lock().unwrap();
        let admitted = st.core.set_value(sem_num, value)?;
        for t in admitted {
            st.done.insert(t, Ok(()));
        }
        set.cond.notify_all();
        Ok(())
    }

    /// `semctl(GETVAL)` analogue.
    pub fn get_value(&self, id: SemSetId, sem_num: usize) -> Result<i64, SemError> {
        let set = self.shared(id)?;
        let st = set.state.lock().unwrap();
        st.core.value(sem_num).ok_or(SemError::InvalidOp)
    }

    /// `semctl(IPC_RMID)` analogue: deletes the set and fails every parked
    /// waiter with [`SemError::SetRemoved`] so none is left stranded.
    pub fn remove(&self, id: SemSetId) -> Result<(), SemError> {
        let set = {
            let mut inner = self.inner.lock().unwrap();
            let set = inner.sets.remove(&id.0).ok_or(SemError::NotFound)?;
            if inner.by_key.get(&set.key) == Some(&id) {
                inner.by_key.remove(&set.key);
            }
            set
        };
        let mut st = set.state.lock().unwrap();
        st.removed = true;
        for t in st.core.take_all_waiters() {
            st.done.insert(t, Err(SemError::SetRemoved));
        }
        drop(st);
        set.cond.notify_all();
        Ok(())
    }

    /// `semop` analogue. The whole list applies atomically or the caller
    /// blocks (releasing admits waiters and notifies the set). With `nowait`
    /// on the blocking element the call fails instead of parking; `deadline`
    /// bounds the parked wait.
    pub fn op(
        &self,
        id: SemSetId,
        tid: Tid,
        ops: &[SemOpRequest],
        deadline: Option<Duration>,
    ) -> Result<(), SemError> {
        let set = self.shared(id)?;
        let mut st = set.state.lock().unwrap();
        if st.removed {
            return Err(SemError::SetRemoved);
        }
        st.core.validate(ops)?;
        match st.core.apply(ops) {
            Ok(outcome) => {
                if !outcome.admitted.is_empty() {
                    for t in outcome.admitted {
                        st.done.insert(t, Ok(()));
                    }
                    drop(st);
                    set.cond.notify_all();
                }
                Ok(())
            }
            Err(blocked) => {
                if ops[blocked.op_index].nowait {
                    return Err(SemError::WouldBlock);
                }
                let channel = ops[blocked.op_index].sem_num;
                st.core.enqueue_waiter(tid, ops.to_vec(), channel);
                let start = Instant::now();
                // The retry loop: wait for a release notification, then see
                // whether our request went through; spurious wakeups just go
                // around again.
                loop {
                    if let Some(result) = st.done.remove(&tid) {
                        return result;
                    }
                    match deadline {
                        Some(limit) => {
                            let elapsed = start.elapsed();
                            if elapsed >= limit {
                                if let Some(result) = st.done.remove(&tid) {
                                    return result;
                                }
                                st.core.remove_waiter(tid);
                                return Err(SemError::Timeout);
                            }
                            let (guard, _) =
                                set.cond.wait_timeout(st, limit - elapsed).unwrap();
                            st = guard;
                        }
                        None => {
                            st = set.cond.wait(st).unwrap();
                        }
                    }
                }
            }
        }
    }

    /// Snapshot of one set: current values and the waiter tokens in FIFO
    /// order (used by harnesses comparing substrates).
    pub fn snapshot(&self, id: SemSetId) -> Result<(Vec<i64>, Vec<Tid>), SemError> {
        let set = self.shared(id)?;
        let st = set.state.lock().unwrap();
        Ok((
            st.core.values().to_vec(),
            st.core.waiters().map(|w| w.token).collect(),
        ))
    }

    /// Debug dump: one line per set, `id key values=[..] waiters=[..]` with
    /// one waiter count per semaphore.
    pub fn dump(&self) -> String {
        let inner = self.inner.lock().unwrap();
        let mut ids: Vec<&u64> = inner.sets.keys().collect();
        ids.sort();
        let mut out = String::new();
        for id in ids {
            let set = &inner.sets[id];
            let st = set.state.lock().unwrap();
            let values: Vec<String> = st.core.values().iter().map(|v| v.to_string()).collect();
            let waiters: Vec<String> = (0..st.core.nsems())
                .map(|i| st.core.waiter_count(i).to_string())
                .collect();
            writeln!(
                out,
                "{} {} values=[{}] waiters=[{}]",
                id,
                set.key,
                values.join(","),
                waiters.join(",")
            )
            .unwrap();
        }
        out
    }
}
