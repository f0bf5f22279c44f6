//! Short lock: the brief exclusive lock guarding shared-memory structures,
//! with a FIFO wait queue and a pluggable release protocol.
//!
//! [`LockMode::Legacy`] reproduces the historical wake-flag protocol: the
//! flag is set when a thread enqueues and a release wakes the queue head only
//! while the flag is true, clearing it afterwards. That protocol can strand a
//! waiter forever: see [`crate::explore`] for the bounded proof.
//! [`LockMode::FlagLess`] drops the flag and wakes on every release with a
//! non-empty queue; [`LockMode::Fixed`] additionally arms a self-wake alarm
//! on every enqueued thread so a waiter retries on its own once the alarm
//! expires and the lock is free. The two repairs are deployed together in
//! `Fixed`; `FlagLess` exists to show the first repair alone already removes
//! the defect.
//!
//! [`LockCore`] is a pure state machine used by two substrates: real blocking
//! threads ([`ShortLock`], wall-clock alarms) and the step-driven virtual
//! mode of [`crate::explore`] (step-counted alarms). Both substrates produce
//! the same event log for the same schedule.

use std::collections::VecDeque;
use std::fmt;
use std::fmt::Write as _;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::Tid;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum LockError {
    #[error("thread already holds this lock")]
    Reentrancy,
    #[error("releasing thread is not the holder")]
    NotHolder,
    #[error("self-wake timeout must be positive in fixed mode")]
    InvalidTimeout,
    #[error("thread is already queued on this lock")]
    AlreadyQueued,
    #[error("lock was cancelled")]
    Cancelled,
}

/// Release/retry protocol variants.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LockMode {
    /// Historical protocol: wake gated by the wake flag.
    Legacy,
    /// First repair only: wake whenever the queue is non-empty.
    FlagLess,
    /// Both repairs: flagless wake plus self-wake alarms.
    Fixed,
}

impl fmt::Display for LockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LockMode::Legacy => "legacy",
            LockMode::FlagLess => "flagless",
            LockMode::Fixed => "fixed",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LockEventKind {
    Acquire,
    Enqueue,
    Release,
    Wake,
    SelfWake,
    Timeout,
}

impl fmt::Display for LockEventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LockEventKind::Acquire => "acquire",
            LockEventKind::Enqueue => "enqueue",
            LockEventKind::Release => "release",
            LockEventKind::Wake => "wake",
            LockEventKind::SelfWake => "self-wake",
            LockEventKind::Timeout => "timeout",
        };
        f.write_str(s)
    }
}

/// One entry of a lock's append-only, totally ordered event log.
/// `flag_after` snapshots the wake flag once the event took effect, which is
/// what lets tests replay the flag discipline step by step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LockEvent {
    pub step: u64,
    pub kind: LockEventKind,
    pub tid: Tid,
    pub flag_after: bool,
}

impl fmt::Display for LockEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.step, self.kind, self.tid)
    }
}

/// Outcome of one acquire attempt.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AcquireOutcome {
    Acquired,
    Enqueued,
}

/// Outcome of an alarm expiry check for one queued thread.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ExpireOutcome {
    /// Lock was free: the thread left the queue and should retry.
    SelfWoken,
    /// Lock was held: alarm re-armed, keep waiting.
    Rearmed,
    /// Thread was not in the queue (already woken).
    NotQueued,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct WaitEntry {
    tid: Tid,
    /// Remaining virtual steps until self-wake; `None` outside fixed mode.
    alarm: Option<u32>,
}

/// Pure short-lock state machine shared by both substrates.
#[derive(Clone, Debug)]
pub struct LockCore {
    mode: LockMode,
    held: bool,
    holder: Option<Tid>,
    queue: VecDeque<WaitEntry>,
    wake_flag: bool,
    self_wake_timeout: u32,
    clock: u64,
    auto_clock: bool,
    events: Vec<LockEvent>,
}

impl LockCore {
    /// `timeout` counts scheduler steps in virtual mode; it must be positive
    /// in [`LockMode::Fixed`] and is ignored otherwise.
    pub fn new(mode: LockMode, self_wake_timeout: u32) -> Result<Self, LockError> {
        if mode == LockMode::Fixed && self_wake_timeout == 0 {
            return Err(LockError::InvalidTimeout);
        }
        Ok(LockCore {
            mode,
            held: false,
            holder: None,
            queue: VecDeque::new(),
            wake_flag: false,
            self_wake_timeout,
            clock: 0,
            auto_clock: false,
            events: Vec::new(),
        })
    }

    pub fn legacy() -> Self {
        Self::new(LockMode::Legacy, 0).unwrap()
    }

    pub fn flagless() -> Self {
        Self::new(LockMode::FlagLess, 0).unwrap()
    }

    pub fn fixed(self_wake_timeout: u32) -> Result<Self, LockError> {
        Self::new(LockMode::Fixed, self_wake_timeout)
    }

    pub fn mode(&self) -> LockMode {
        self.mode
    }

    pub fn is_held(&self) -> bool {
        self.held
    }

    pub fn holder(&self) -> Option<Tid> {
        self.holder
    }

    pub fn wake_flag(&self) -> bool {
        self.wake_flag
    }

    pub fn queue(&self) -> Vec<Tid> {
        self.queue.iter().map(|e| e.tid).collect()
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_queued(&self, tid: Tid) -> bool {
        self.queue.iter().any(|e| e.tid == tid)
    }

    /// Remaining alarm steps per queue entry, for state hashing.
    pub fn queue_alarms(&self) -> Vec<(Tid, Option<u32>)> {
        self.queue.iter().map(|e| (e.tid, e.alarm)).collect()
    }

    pub fn events(&self) -> &[LockEvent] {
        &self.events
    }

    /// Sets the step index stamped on subsequent events (virtual mode and
    /// schedule-enforcing harnesses).
    pub fn set_clock(&mut self, step: u64) {
        self.clock = step;
    }

    /// With auto clock on, every public operation advances the step index by
    /// one before logging (free-running real substrate).
    pub fn set_auto_clock(&mut self, on: bool) {
        self.auto_clock = on;
    }

    fn log(&mut self, kind: LockEventKind, tid: Tid) {
        self.events.push(LockEvent {
            step: self.clock,
            kind,
            tid,
            flag_after: self.wake_flag,
        });
    }

    fn bump_clock(&mut self) {
        if self.auto_clock {
            self.clock += 1;
        }
    }

    /// One acquire attempt: take the lock if free, otherwise join the queue
    /// tail (legacy: flag goes true; fixed: alarm armed). A woken thread
    /// calls this again; the retry may enqueue it anew.
    pub fn acquire_attempt(&mut self, tid: Tid) -> Result<AcquireOutcome, LockError> {
        if self.holder == Some(tid) {
            return Err(LockError::Reentrancy);
        }
        if self.is_queued(tid) {
            return Err(LockError::AlreadyQueued);
        }
        self.bump_clock();
        if !self.held {
            self.held = true;
            self.holder = Some(tid);
            self.log(LockEventKind::Acquire, tid);
            Ok(AcquireOutcome::Acquired)
        } else {
            let alarm = match self.mode {
                LockMode::Fixed => Some(self.self_wake_timeout),
                _ => None,
            };
            self.queue.push_back(WaitEntry { tid, alarm });
            if self.mode == LockMode::Legacy {
                self.wake_flag = true;
            }
            self.log(LockEventKind::Enqueue, tid);
            Ok(AcquireOutcome::Enqueued)
        }
    }

    /// Releases the lock and applies the mode's wake rule. Returns the woken
    /// threads (at most one per release), which must retry acquisition.
    pub fn release(&mut self, tid: Tid) -> Result<Vec<Tid>, LockError> {
        if self.holder != Some(tid) {
            return Err(LockError::NotHolder);
        }
        self.bump_clock();
        self.held = false;
        self.holder = None;
        self.log(LockEventKind::Release, tid);
        let mut woken = Vec::new();
        let wake = match self.mode {
            // The defective rule: lock free AND flag true.
            LockMode::Legacy => self.wake_flag && !self.queue.is_empty(),
            LockMode::FlagLess | LockMode::Fixed => !self.queue.is_empty(),
        };
        if wake {
            let entry = self.queue.pop_front().unwrap();
            if self.mode == LockMode::Legacy {
                self.wake_flag = false;
            }
            self.log(LockEventKind::Wake, entry.tid);
            woken.push(entry.tid);
        }
        Ok(woken)
    }

    /// Virtual-time driver: one scheduler step elapsed. Decrements every
    /// armed alarm; an expired alarm self-wakes its thread if the lock is
    /// free, or re-arms if the lock is held.
    pub fn tick(&mut self) -> Vec<Tid> {
        let mut woken = Vec::new();
        let mut idx = 0;
        while idx < self.queue.len() {
            let expired = match &mut self.queue[idx].alarm {
                Some(a) => {
                    if *a > 0 {
                        *a -= 1;
                    }
                    *a == 0
                }
                None => false,
            };
            if expired {
                if !self.held {
                    let entry = self.queue.remove(idx).unwrap();
                    self.log(LockEventKind::SelfWake, entry.tid);
                    woken.push(entry.tid);
                    continue;
                } else {
                    let tid = self.queue[idx].tid;
                    self.queue[idx].alarm = Some(self.self_wake_timeout);
                    self.log(LockEventKind::Timeout, tid);
                }
            }
            idx += 1;
        }
        woken
    }

    /// Wall-clock alarm expiry for one thread (real substrate and the
    /// alarm-signal path).
    pub fn expire(&mut self, tid: Tid) -> ExpireOutcome {
        let Some(pos) = self.queue.iter().position(|e| e.tid == tid) else {
            return ExpireOutcome::NotQueued;
        };
        self.bump_clock();
        if !self.held {
            self.queue.remove(pos);
            self.log(LockEventKind::SelfWake, tid);
            ExpireOutcome::SelfWoken
        } else {
            self.queue[pos].alarm = Some(self.self_wake_timeout);
            self.log(LockEventKind::Timeout, tid);
            ExpireOutcome::Rearmed
        }
    }

    /// True when any queued thread still has an armed alarm.
    pub fn has_armed_alarm(&self) -> bool {
        self.queue.iter().any(|e| e.alarm.is_some())
    }

    /// Removes a queued entry without logging (cancellation plumbing).
    pub fn remove_queued(&mut self, tid: Tid) -> bool {
        let before = self.queue.len();
        self.queue.retain(|e| e.tid != tid);
        self.queue.len() != before
    }

    /// Event log export: one line per event, `step kind thread`.
    pub fn dump_events(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            writeln!(out, "{}", e).unwrap();
        }
        out
    }
}

struct RealState {
    core: LockCore,
    /// Threads woken by a release and not yet retried.
    woken: Vec<Tid>,
    cancelled: bool,
}

/// Blocking short lock for real threads.
///
/// Waiters park on a condvar; a release transfers the queue head into the
/// woken set and notifies. In fixed mode parked threads use
/// `wait_timeout(wall_timeout)` and run the self-wake check on expiry.
pub struct ShortLock {
    state: Mutex<RealState>,
    cond: Condvar,
    wall_timeout: Duration,
}

impl ShortLock {
    /// `wall_timeout` is the fixed-mode self-wake alarm; it must be non-zero
    /// in [`LockMode::Fixed`] and is ignored otherwise.
    pub fn new(mode: LockMode, wall_timeout: Duration) -> Result<Self, LockError> {
        if mode == LockMode::Fixed && wall_timeout.is_zero() {
            return Err(LockError::InvalidTimeout);
        }
        // Step-based alarm value is unused on this substrate; keep it valid.
        let mut core = LockCore::new(mode, 1)?;
        core.set_auto_clock(true);
        Ok(ShortLock {
            state: Mutex::new(RealState {
                core,
                woken: Vec::new(),
                cancelled: false,
            }),
            cond: Condvar::new(),
            wall_timeout,
        })
    }

    pub fn legacy() -> Self {
        Self::new(LockMode::Legacy, Duration::ZERO).unwrap()
    }

    pub fn flagless() -> Self {
        Self::new(LockMode::FlagLess, Duration::ZERO).unwrap()
    }

    pub fn fixed(wall_timeout: Duration) -> Result<Self, LockError> {
        Self::new(LockMode::Fixed, wall_timeout)
    }

    /// Blocks until the lock is held by `tid`.
    pub fn acquire(&self, tid: Tid) -> Result<(), LockError> {
        self.acquire_gated(tid, None)
    }

    /// Like [`ShortLock::acquire`], but a woken thread waits for its turn on
    /// `gate` before retrying, so a test harness can enforce a schedule.
    pub fn acquire_gated(&self, tid: Tid, gate: Option<&StepGate>) -> Result<(), LockError> {
        let mut st = self.state.lock().unwrap();
        loop {
            if st.cancelled {
                return Err(LockError::Cancelled);
            }
            match st.core.acquire_attempt(tid)? {
                AcquireOutcome::Acquired => return Ok(()),
                AcquireOutcome::Enqueued => {
                    let fixed = st.core.mode() == LockMode::Fixed;
                    loop {
                        if st.cancelled {
                            st.core.remove_queued(tid);
                            return Err(LockError::Cancelled);
                        }
                        if let Some(pos) = st.woken.iter().position(|&t| t == tid) {
                            st.woken.remove(pos);
                            break;
                        }
                        if fixed {
                            let (guard, timeout) = self
                                .cond
                                .wait_timeout(st, self.wall_timeout)
                                .unwrap();
                            st = guard;
                            if timeout.timed_out() {
                                match st.core.expire(tid) {
                                    ExpireOutcome::SelfWoken => break,
                                    ExpireOutcome::Rearmed | ExpireOutcome::NotQueued => {}
                                }
                            }
                        } else {
                            st = self.cond.wait(st).unwrap();
                        }
                    }
                    // Woken: retry, optionally on our scheduled turn.
                    if let Some(g) = gate {
                        drop(st);
                        g.wait_turn(tid).map_err(|_| LockError::Cancelled)?;
                        st = self.state.lock().unwrap();
                    }
                }
            }
        }
    }

    pub fn release(&self, tid: Tid) -> Result<(), LockError> {
        let mut st = self.state.lock().unwrap();
        let woken = st.core.release(tid)?;
        if !woken.is_empty() {
            st.woken.extend(woken);
            drop(st);
            self.cond.notify_all();
        }
        Ok(())
    }

    /// Fails every current and future acquire with [`LockError::Cancelled`].
    /// Snapshot state before calling: cancellation empties the queue.
    pub fn cancel_all(&self) {
        let mut st = self.state.lock().unwrap();
        st.cancelled = true;
        drop(st);
        self.cond.notify_all();
    }

    /// Runs `f` against the lock state machine (snapshots, event dumps).
    pub fn with_core<R>(&self, f: impl FnOnce(&LockCore) -> R) -> R {
        let st = self.state.lock().unwrap();
        f(&st.core)
    }

    /// Mutable access for schedule-enforcing harnesses (clock control).
    pub fn with_core_mut<R>(&self, f: impl FnOnce(&mut LockCore) -> R) -> R {
        let mut st = self.state.lock().unwrap();
        f(&mut st.core)
    }

    /// Alarm-driven self-wake entry point: lets a signal handler run the
    /// expiry check for a parked thread.
    pub fn expire_now(&self, tid: Tid) -> ExpireOutcome {
        let mut st = self.state.lock().unwrap();
        let out = st.core.expire(tid);
        if out == ExpireOutcome::SelfWoken {
            st.woken.push(tid);
            drop(st);
            self.cond.notify_all();
        }
        out
    }
}

/// Turnstile used by schedule-enforcing tests: threads wait for their turn,
/// the driver grants turns one at a time.
pub struct StepGate {
    state: Mutex<GateState>,
    cond: Condvar,
}

struct GateState {
    current: Option<Tid>,
    shutdown: bool,
}

/// Error returned from [`StepGate::wait_turn`] after shutdown.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateClosed;

impl Default for StepGate {
    fn default() -> Self {
        Self::new()
    }
}

impl StepGate {
    pub fn new() -> Self {
        StepGate {
            state: Mutex::new(GateState {
                current: None,
                shutdown: false,
            }),
            cond: Condvar::new(),
        }
    }

    /// Grants the next turn to `tid`. The previous turn must have been taken.
    pub fn grant(&self, tid: Tid) {
        let mut st = self.state.lock().unwrap();
        debug_assert!(st.current.is_none(), "previous turn not yet consumed");
        st.current = Some(tid);
        drop(st);
        self.cond.notify_all();
    }

    /// Blocks until `tid`'s turn comes up, then consumes it.
    pub fn wait_turn(&self, tid: Tid) -> Result<(), GateClosed> {
        let mut st = self.state.lock().unwrap();
        loop {
            if st.shutdown {
                return Err(GateClosed);
            }
            if st.current == Some(tid) {
                st.current = None;
                return Ok(());
            }
            st = self.cond.wait(st).unwrap();
        }
    }

    /// Releases every waiter with [`GateClosed`].
    pub fn shutdown(&self) {
        let mut st = self.state.lock().unwrap();
        st.shutdown = true;
        drop(st);
        self.cond.notify_all();
    }
}
