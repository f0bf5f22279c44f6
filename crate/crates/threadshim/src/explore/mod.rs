//! Deterministic interleaving exploration over the virtual-mode semaphore
//! and short-lock state machines.
//!
//! [`explore`] enumerates every schedule of a small [`Model`] up to a step
//! bound (depth-first, with duplicate-state pruning that respects the
//! remaining budget), checks safety invariants at every transition and the
//! requested property at every quiescent state, and returns either
//! [`Verdict::Pass`] or the first violating [`Witness`]. A state where all
//! threads are blocked is reported as a deadlock regardless of the property
//! under check. Replaying a witness schedule reproduces the identical final
//! state, which [`replay`] exposes for regression and demo use.
//!
//! Starvation in a bounded explorer is the finite-trace proxy for unbounded
//! waiting: a quiescent state whose lock is free while its wait queue is
//! non-empty, exactly the stranded-waiter shape of the legacy wake-flag
//! protocol.

mod model;

pub use model::{Model, ModelOp, ModelState, StepViolation, ThreadStatus, TraceStep};

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;

use thiserror::Error;

use crate::shortlock::LockEvent;
use crate::Tid;

/// Hard tractability bounds: models stay desk-sized.
pub const MAX_THREADS: usize = 4;
pub const MAX_STEPS: usize = 16;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum ExploreError {
    #[error("model exceeds exploration bounds (threads <= {MAX_THREADS}, steps <= {MAX_STEPS})")]
    BoundExceeded,
    #[error("schedule is not valid for this model")]
    InvalidSchedule,
}

/// Quiescent-state property to check.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CheckProperty {
    /// Free lock with a non-empty wait queue: a stranded waiter.
    LockStarvation,
    /// No lost wakeup: every blocked waiter's request must be unsatisfiable
    /// in the quiescent state. (Value and atomicity violations are caught at
    /// every step regardless of this selection.)
    SemSoundness,
}

/// Exploration statistics for a passing run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExploreStats {
    /// Complete (quiescent) schedules reached.
    pub schedules_completed: u64,
    /// Distinct states inserted into the memo table.
    pub states_seen: u64,
    /// Branches skipped because an equal state was already explored with at
    /// least as much remaining budget.
    pub memo_hits: u64,
    /// Branches cut by the step bound before quiescence.
    pub truncated: u64,
}

/// Summary of the shared state at the end of a witness schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalState {
    pub fingerprint: u64,
    pub lock_free: bool,
    pub lock_queue: Vec<Tid>,
    pub wake_flag: bool,
    pub sem_values: Vec<i64>,
    pub blocked_threads: Vec<usize>,
    pub done_threads: Vec<usize>,
}

impl fmt::Display for FinalState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let queue: Vec<String> = self.lock_queue.iter().map(|t| t.to_string()).collect();
        write!(
            f,
            "fingerprint={:016x} lock_free={} queue=[{}] wake_flag={} sem_values={:?} blocked={:?} done={:?}",
            self.fingerprint,
            self.lock_free,
            queue.join(","),
            self.wake_flag,
            self.sem_values,
            self.blocked_threads,
            self.done_threads
        )
    }
}

/// Counterexample: the schedule, its per-step trace, the lock event log and
/// the violated property. Replaying the schedule reproduces `final_state`.
#[derive(Clone, Debug)]
pub struct Witness {
    pub property: String,
    pub detail: String,
    pub schedule: Vec<usize>,
    pub trace: Vec<TraceStep>,
    pub lock_events: Vec<LockEvent>,
    pub final_state: FinalState,
}

impl Witness {
    /// Text export: the trace in the line protocol, then the lock event log.
    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(out, "violated: {} ({})", self.property, self.detail).unwrap();
        let sched: Vec<String> = self.schedule.iter().map(|t| t.to_string()).collect();
        writeln!(out, "schedule: {}", sched.join(" ")).unwrap();
        for step in &self.trace {
            writeln!(out, "{}", step).unwrap();
        }
        if !self.lock_events.is_empty() {
            writeln!(out, "lock events:").unwrap();
            for e in &self.lock_events {
                writeln!(out, "{}", e).unwrap();
            }
        }
        writeln!(out, "final: {}", self.final_state).unwrap();
        out
    }
}

/// Outcome of an exploration.
#[derive(Clone, Debug)]
pub enum Verdict {
    Pass(ExploreStats),
    Witness(Box<Witness>),
}

impl Verdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass(_))
    }

    pub fn witness(&self) -> Option<&Witness> {
        match self {
            Verdict::Witness(w) => Some(w),
            Verdict::Pass(_) => None,
        }
    }
}

fn check_bounds(model: &Model, max_steps: usize) -> Result<(), ExploreError> {
    if model.nthreads() > MAX_THREADS || max_steps > MAX_STEPS {
        return Err(ExploreError::BoundExceeded);
    }
    Ok(())
}

fn final_state(state: &ModelState) -> FinalState {
    FinalState {
        fingerprint: state.fingerprint(),
        lock_free: state.lock().map(|l| !l.is_held()).unwrap_or(true),
        lock_queue: state.lock().map(|l| l.queue()).unwrap_or_default(),
        wake_flag: state.lock().map(|l| l.wake_flag()).unwrap_or(false),
        sem_values: state.sem().map(|s| s.values().to_vec()).unwrap_or_default(),
        blocked_threads: state.blocked_threads(),
        done_threads: state.done_threads(),
    }
}

/// Property evaluation at a quiescent state. Returns (property, detail).
fn check_quiescent(state: &ModelState, property: CheckProperty) -> Option<(String, String)> {
    match property {
        CheckProperty::LockStarvation => {
            if let Some(lock) = state.lock() {
                if !lock.is_held() && lock.queue_len() > 0 {
                    let queue: Vec<String> =
                        lock.queue().iter().map(|t| t.to_string()).collect();
                    return Some((
                        "lock-starvation".to_string(),
                        format!(
                            "lock is free but threads [{}] wait in the queue",
                            queue.join(",")
                        ),
                    ));
                }
            }
        }
        CheckProperty::SemSoundness => {
            if let Some(sem) = state.sem() {
                for w in sem.waiters() {
                    let mut probe = sem.clone();
                    if matches!(
                        probe.try_commit(&w.ops),
                        crate::sem::Attempt::Committed { .. }
                    ) {
                        return Some((
                            "sem-lost-wakeup".to_string(),
                            format!(
                                "thread {} blocks on a satisfiable request {:?}",
                                w.token, w.ops
                            ),
                        ));
                    }
                }
            }
        }
    }
    // Always-on deadlock check: quiescent with a blocked thread.
    let blocked = state.blocked_threads();
    if !blocked.is_empty() {
        return Some((
            "deadlock".to_string(),
            format!("all remaining threads are blocked: {:?}", blocked),
        ));
    }
    None
}

fn make_witness(
    property: String,
    detail: String,
    schedule: Vec<usize>,
    state: &ModelState,
) -> Witness {
    Witness {
        property,
        detail,
        schedule,
        trace: state.trace().to_vec(),
        lock_events: state
            .lock()
            .map(|l| l.events().to_vec())
            .unwrap_or_default(),
        final_state: final_state(state),
    }
}

struct Search {
    max_steps: usize,
    property: CheckProperty,
    prune: bool,
    memo: HashMap<u64, usize>,
    stats: ExploreStats,
    witness: Option<Witness>,
}

impl Search {
    fn run(&mut self, state: &ModelState, depth: usize, schedule: &mut Vec<usize>) -> bool {
        let runnable = state.schedulable_threads();
        if runnable.is_empty() {
            self.stats.schedules_completed += 1;
            if let Some((property, detail)) = check_quiescent(state, self.property) {
                self.witness = Some(make_witness(property, detail, schedule.clone(), state));
                return true;
            }
            return false;
        }
        if depth == self.max_steps {
            self.stats.truncated += 1;
            return false;
        }
        for t in runnable {
            let mut next = state.clone();
            match next.step(t).expect("runnable thread steps") {
                Ok(_) => {}
                Err(violation) => {
                    schedule.push(t);
                    self.witness = Some(make_witness(
                        violation.property.to_string(),
                        violation.detail,
                        schedule.clone(),
                        &next,
                    ));
                    return true;
                }
            }
            next.resolve_idle();
            if self.prune {
                let remaining = self.max_steps - (depth + 1);
                let fp = next.fingerprint();
                match self.memo.get(&fp) {
                    Some(&seen) if seen >= remaining => {
                        self.stats.memo_hits += 1;
                        continue;
                    }
                    _ => {
                        if self.memo.insert(fp, remaining).is_none() {
                            self.stats.states_seen += 1;
                        }
                    }
                }
            }
            schedule.push(t);
            if self.run(&next, depth + 1, schedule) {
                return true;
            }
            schedule.pop();
        }
        false
    }
}

/// Exhaustive bounded exploration: every schedule of `model` up to
/// `max_steps` thread steps, with duplicate-state pruning. Returns the
/// first violating witness in depth-first order, or a pass with stats.
pub fn explore(
    model: &Model,
    max_steps: usize,
    property: CheckProperty,
) -> Result<Verdict, ExploreError> {
    check_bounds(model, max_steps)?;
    let mut search = Search {
        max_steps,
        property,
        prune: true,
        memo: HashMap::new(),
        stats: ExploreStats::default(),
        witness: None,
    };
    let mut initial = ModelState::new(model);
    initial.resolve_idle();
    let mut schedule = Vec::new();
    search.run(&initial, 0, &mut schedule);
    match search.witness {
        Some(w) => Ok(Verdict::Witness(Box::new(w))),
        None => Ok(Verdict::Pass(search.stats)),
    }
}

/// Deterministic replay of one schedule. The trace and final state are
/// identical across runs; an unschedulable entry fails with
/// [`ExploreError::InvalidSchedule`].
pub struct Replay {
    pub trace: Vec<TraceStep>,
    pub lock_events: Vec<LockEvent>,
    pub final_state: FinalState,
    pub violation: Option<StepViolation>,
    pub quiescent: bool,
}

pub fn replay(model: &Model, schedule: &[usize]) -> Result<Replay, ExploreError> {
    if model.nthreads() > MAX_THREADS {
        return Err(ExploreError::BoundExceeded);
    }
    let mut state = ModelState::new(model);
    state.resolve_idle();
    let mut violation = None;
    for &t in schedule {
        match state.step(t) {
            Err(_) => return Err(ExploreError::InvalidSchedule),
            Ok(Err(v)) => {
                violation = Some(v);
                break;
            }
            Ok(Ok(_)) => {}
        }
        state.resolve_idle();
    }
    Ok(Replay {
        trace: state.trace().to_vec(),
        lock_events: state
            .lock()
            .map(|l| l.events().to_vec())
            .unwrap_or_default(),
        final_state: final_state(&state),
        violation,
        quiescent: state.is_quiescent(),
    })
}

/// Number of distinct reachable states within `max_steps`, the initial state
/// included. A regression anchor: model changes move this number.
pub fn count_states(model: &Model, max_steps: usize) -> Result<u64, ExploreError> {
    check_bounds(model, max_steps)?;
    let mut initial = ModelState::new(model);
    initial.resolve_idle();
    let mut seen = HashMap::new();
    seen.insert(initial.fingerprint(), true);
    let mut frontier = vec![initial];
    for _ in 0..max_steps {
        let mut next_frontier = Vec::new();
        for state in &frontier {
            for t in state.schedulable_threads() {
                let mut next = state.clone();
                if next.step(t).expect("runnable").is_err() {
                    continue;
                }
                next.resolve_idle();
                if seen.insert(next.fingerprint(), true).is_none() {
                    next_frontier.push(next);
                }
            }
        }
        if next_frontier.is_empty() {
            break;
        }
        frontier = next_frontier;
    }
    Ok(seen.len() as u64)
}

/// Number of complete (quiescent) schedules within `max_steps`, with no
/// pruning: for models where nothing blocks this equals the closed-form
/// multinomial count of op interleavings. Schedules still runnable at the
/// bound are not counted.
pub fn count_schedules(model: &Model, max_steps: usize) -> Result<u64, ExploreError> {
    check_bounds(model, max_steps)?;
    fn go(state: &ModelState, depth: usize, max_steps: usize) -> u64 {
        let runnable = state.schedulable_threads();
        if runnable.is_empty() {
            return 1;
        }
        if depth == max_steps {
            return 0;
        }
        let mut total = 0;
        for t in runnable {
            let mut next = state.clone();
            if next.step(t).expect("runnable").is_err() {
                continue;
            }
            next.resolve_idle();
            total += go(&next, depth + 1, max_steps);
        }
        total
    }
    let mut initial = ModelState::new(model);
    initial.resolve_idle();
    Ok(go(&initial, 0, max_steps))
}
