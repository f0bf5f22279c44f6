//! Bounded thread-program models over the semaphore and short-lock state
//! machines.
//!
//! A model is a set of per-thread op lists plus shared initial state. The
//! step function `(state, thread) -> state` is pure and deterministic: it
//! executes the thread's current op against the shared [`SemCore`] /
//! [`LockCore`], marks the thread blocked when the op cannot proceed, and
//! advances virtual time by one tick. Blocked threads are not schedulable;
//! they come back when a release wakes them (lock), their request is
//! admitted (semaphore), or their self-wake alarm fires.

use crate::sem::{SemCore, SemOpRequest};
use crate::shortlock::{AcquireOutcome, LockCore, LockMode};
use crate::Tid;

/// One scheduled action of a thread program.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelOp {
    /// Atomic semaphore op list against the model's semaphore set.
    Sem(Vec<SemOpRequest>),
    /// Acquire the model's short lock (may enqueue).
    Acquire,
    /// Release the model's short lock.
    Release,
}

/// Immutable model description: shared initial state plus thread programs.
#[derive(Clone, Debug)]
pub struct Model {
    pub(crate) sem_values: Option<Vec<i64>>,
    pub(crate) lock: Option<(LockMode, u32)>,
    pub(crate) programs: Vec<Vec<ModelOp>>,
}

impl Model {
    /// Semaphore-only model with the given initial values.
    pub fn sem_model(values: Vec<i64>, programs: Vec<Vec<ModelOp>>) -> Model {
        Model {
            sem_values: Some(values),
            lock: None,
            programs,
        }
    }

    /// Lock-only model; `self_wake_timeout` counts scheduler steps and is
    /// meaningful in [`LockMode::Fixed`].
    pub fn lock_model(mode: LockMode, self_wake_timeout: u32, programs: Vec<Vec<ModelOp>>) -> Model {
        Model {
            sem_values: None,
            lock: Some((mode, self_wake_timeout)),
            programs,
        }
    }

    /// `threads` workers each doing acquire-then-release once.
    pub fn lock_acquire_release(mode: LockMode, self_wake_timeout: u32, threads: usize) -> Model {
        Self::lock_model(
            mode,
            self_wake_timeout,
            (0..threads)
                .map(|_| vec![ModelOp::Acquire, ModelOp::Release])
                .collect(),
        )
    }

    /// `threads` workers each doing one P;V pair on semaphore `sem_num`.
    pub fn sem_pv(values: Vec<i64>, sem_num: usize, threads: usize) -> Model {
        Self::sem_model(
            values,
            (0..threads)
                .map(|_| {
                    vec![
                        ModelOp::Sem(vec![SemOpRequest::p(sem_num)]),
                        ModelOp::Sem(vec![SemOpRequest::v(sem_num)]),
                    ]
                })
                .collect(),
        )
    }

    pub fn nthreads(&self) -> usize {
        self.programs.len()
    }

    pub fn total_ops(&self) -> usize {
        self.programs.iter().map(|p| p.len()).sum()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ThreadStatus {
    Ready,
    BlockedSem,
    BlockedLock,
    /// Woken by a release or self-wake; its next step retries the acquire.
    WokenRetry,
    Done,
}

impl ThreadStatus {
    pub fn schedulable(self) -> bool {
        matches!(self, ThreadStatus::Ready | ThreadStatus::WokenRetry)
    }

    fn rank(self) -> u8 {
        match self {
            ThreadStatus::Ready => 0,
            ThreadStatus::BlockedSem => 1,
            ThreadStatus::BlockedLock => 2,
            ThreadStatus::WokenRetry => 3,
            ThreadStatus::Done => 4,
        }
    }
}

#[derive(Clone, Debug)]
struct ThreadRt {
    pc: usize,
    status: ThreadStatus,
}

/// One line of a machine-readable execution trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceStep {
    pub step: u64,
    pub thread: usize,
    pub op: String,
    pub state_hash: u64,
}

impl std::fmt::Display for TraceStep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "step {} thread {} op {} -> {:016x}",
            self.step, self.thread, self.op, self.state_hash
        )
    }
}

/// A violation detected inside a step transition (safety invariants that
/// hold at every state, not just quiescent ones).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepViolation {
    pub property: &'static str,
    pub detail: String,
}

#[derive(Debug, PartialEq, Eq)]
pub enum StepError {
    /// Scheduled thread is blocked or done.
    NotSchedulable,
    /// Thread index out of range.
    UnknownThread,
}

/// Mutable execution state of a model: shared primitives plus per-thread
/// program counters and statuses, with the trace accumulated alongside.
#[derive(Clone, Debug)]
pub struct ModelState {
    model: Model,
    sem: Option<SemCore>,
    lock: Option<LockCore>,
    threads: Vec<ThreadRt>,
    steps: u64,
    trace: Vec<TraceStep>,
}

impl ModelState {
    pub fn new(model: &Model) -> ModelState {
        let sem = model
            .sem_values
            .as_ref()
            .map(|v| SemCore::with_values(v.clone()));
        let lock = model.lock.map(|(mode, timeout)| {
            LockCore::new(mode, if mode == LockMode::Fixed { timeout } else { 0 })
                .expect("valid lock config")
        });
        ModelState {
            model: model.clone(),
            sem,
            lock,
            threads: model
                .programs
                .iter()
                .map(|p| ThreadRt {
                    pc: 0,
                    status: if p.is_empty() {
                        ThreadStatus::Done
                    } else {
                        ThreadStatus::Ready
                    },
                })
                .collect(),
            steps: 0,
            trace: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn trace(&self) -> &[TraceStep] {
        &self.trace
    }

    pub fn sem(&self) -> Option<&SemCore> {
        self.sem.as_ref()
    }

    pub fn lock(&self) -> Option<&LockCore> {
        self.lock.as_ref()
    }

    pub fn status(&self, thread: usize) -> ThreadStatus {
        self.threads[thread].status
    }

    pub fn pc(&self, thread: usize) -> usize {
        self.threads[thread].pc
    }

    pub fn schedulable_threads(&self) -> Vec<usize> {
        self.threads
            .iter()
            .enumerate()
            .filter(|(_, t)| t.status.schedulable())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_quiescent(&self) -> bool {
        self.threads.iter().all(|t| !t.status.schedulable())
    }

    pub fn blocked_threads(&self) -> Vec<usize> {
        self.threads
            .iter()
            .enumerate()
            .filter(|(_, t)| {
                matches!(t.status, ThreadStatus::BlockedSem | ThreadStatus::BlockedLock)
            })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn done_threads(&self) -> Vec<usize> {
        self.threads
            .iter()
            .enumerate()
            .filter(|(_, t)| t.status == ThreadStatus::Done)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn nthreads(&self) -> usize {
        self.threads.len()
    }

    pub fn all_done(&self) -> bool {
        self.threads.iter().all(|t| t.status == ThreadStatus::Done)
    }

    fn advance_pc(&mut self, thread: usize) {
        let rt = &mut self.threads[thread];
        rt.pc += 1;
        rt.status = if rt.pc >= self.model.programs[thread].len() {
            ThreadStatus::Done
        } else {
            ThreadStatus::Ready
        };
    }

    /// Executes one step of `thread` and advances virtual time by one tick.
    /// Returns the trace entry, or the safety violation the step exposed.
    pub fn step(&mut self, thread: usize) -> Result<Result<TraceStep, StepViolation>, StepError> {
        if thread >= self.threads.len() {
            return Err(StepError::UnknownThread);
        }
        if !self.threads[thread].status.schedulable() {
            return Err(StepError::NotSchedulable);
        }
        let idx = self.steps;
        self.steps += 1;
        if let Some(lock) = &mut self.lock {
            lock.set_clock(idx);
        }
        let op = self.model.programs[thread][self.threads[thread].pc].clone();
        let op_name = match op {
            ModelOp::Sem(ops) => {
                let sem = self.sem.as_mut().expect("sem op in a model without sems");
                sem.validate(&ops).expect("well-formed model program");
                match sem.apply(&ops) {
                    Ok(outcome) => {
                        self.advance_pc(thread);
                        let admitted: Vec<u32> =
                            outcome.admitted.iter().map(|t| t.0).collect();
                        for t in &outcome.admitted {
                            self.advance_pc(t.0 as usize);
                        }
                        if admitted.is_empty() {
                            "semop".to_string()
                        } else {
                            let list: Vec<String> =
                                admitted.iter().map(|t| t.to_string()).collect();
                            format!("semop+admit:{}", list.join(","))
                        }
                    }
                    Err(blocked) => {
                        let channel = ops[blocked.op_index].sem_num;
                        sem.enqueue_waiter(Tid(thread as u32), ops.clone(), channel);
                        self.threads[thread].status = ThreadStatus::BlockedSem;
                        "semop-blocked".to_string()
                    }
                }
            }
            ModelOp::Acquire => {
                let lock = self.lock.as_mut().expect("lock op in a model without a lock");
                match lock
                    .acquire_attempt(Tid(thread as u32))
                    .expect("well-formed model program")
                {
                    AcquireOutcome::Acquired => {
                        self.advance_pc(thread);
                        "acquire".to_string()
                    }
                    AcquireOutcome::Enqueued => {
                        self.threads[thread].status = ThreadStatus::BlockedLock;
                        "enqueue".to_string()
                    }
                }
            }
            ModelOp::Release => {
                let lock = self.lock.as_mut().expect("lock op in a model without a lock");
                let woken = lock
                    .release(Tid(thread as u32))
                    .expect("well-formed model program");
                self.advance_pc(thread);
                if woken.is_empty() {
                    "release".to_string()
                } else {
                    let list: Vec<String> = woken.iter().map(|t| t.to_string()).collect();
                    for t in &woken {
                        self.threads[t.0 as usize].status = ThreadStatus::WokenRetry;
                    }
                    format!("release+wake:{}", list.join(","))
                }
            }
        };
        // One tick of virtual time: fixed-mode alarms count scheduler steps.
        if let Some(lock) = &mut self.lock {
            for t in lock.tick() {
                self.threads[t.0 as usize].status = ThreadStatus::WokenRetry;
            }
        }
        if let Some(v) = self.check_safety() {
            return Ok(Err(v));
        }
        let entry = TraceStep {
            step: idx,
            thread,
            op: op_name,
            state_hash: self.fingerprint(),
        };
        self.trace.push(entry.clone());
        Ok(Ok(entry))
    }

    /// Virtual time-jump: when nobody is runnable but a free lock has armed
    /// alarms, let ticks pass until a self-wake fires. A held lock stops the
    /// jump, since that situation is a genuine deadlock.
    pub fn resolve_idle(&mut self) {
        loop {
            if self.threads.iter().any(|t| t.status.schedulable()) {
                return;
            }
            let Some(lock) = &mut self.lock else { return };
            if lock.is_held() || !lock.has_armed_alarm() {
                return;
            }
            for t in lock.tick() {
                self.threads[t.0 as usize].status = ThreadStatus::WokenRetry;
            }
        }
    }

    /// Safety invariants that must hold at every reachable state.
    fn check_safety(&self) -> Option<StepViolation> {
        if let Some(sem) = &self.sem {
            if let Some(&v) = sem.values().iter().find(|&&v| v < 0) {
                return Some(StepViolation {
                    property: "sem-negative-value",
                    detail: format!("observed value {v}"),
                });
            }
            // Conservation doubles as the atomicity check: values must equal
            // the initial values plus the deltas of exactly the committed op
            // lists (a partially applied list breaks the equation).
            let init = self.model.sem_values.as_ref().unwrap();
            let mut expected = init.clone();
            for (t, rt) in self.threads.iter().enumerate() {
                for op in self.model.programs[t].iter().take(rt.pc) {
                    if let ModelOp::Sem(ops) = op {
                        for o in ops {
                            expected[o.sem_num] += i64::from(o.delta);
                        }
                    }
                }
            }
            if expected != sem.values() {
                return Some(StepViolation {
                    property: "sem-conservation",
                    detail: format!("expected {:?}, observed {:?}", expected, sem.values()),
                });
            }
            // Capacity: threads holding more P than V on a semaphore never
            // exceed its initial value (mutual exclusion for value 1).
            for (s, &cap) in init.iter().enumerate() {
                let mut inside = 0i64;
                for (t, rt) in self.threads.iter().enumerate() {
                    let mut net = 0i64;
                    for op in self.model.programs[t].iter().take(rt.pc) {
                        if let ModelOp::Sem(ops) = op {
                            for o in ops {
                                if o.sem_num == s {
                                    net += i64::from(o.delta);
                                }
                            }
                        }
                    }
                    if net < 0 {
                        inside += -net;
                    }
                }
                if inside > cap {
                    return Some(StepViolation {
                        property: "sem-capacity-overlap",
                        detail: format!(
                            "{} holders inside a capacity-{} section on sem {}",
                            inside, cap, s
                        ),
                    });
                }
            }
        }
        if let Some(lock) = &self.lock {
            if lock.is_held() != lock.holder().is_some() {
                return Some(StepViolation {
                    property: "lock-holder-consistency",
                    detail: format!(
                        "held={} holder={:?}",
                        lock.is_held(),
                        lock.holder()
                    ),
                });
            }
        }
        None
    }

    /// Stable 64-bit fingerprint of the logical state: per-thread pc and
    /// status, semaphore values and waiter queue, lock fields, queue and
    /// alarms. Excludes step counters and logs so equal states merge.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for rt in &self.threads {
            h.write_u64(rt.pc as u64);
            h.write_u64(u64::from(rt.status.rank()));
        }
        if let Some(sem) = &self.sem {
            h.write_u64(0x5e);
            for &v in sem.values() {
                h.write_u64(v as u64);
            }
            for w in sem.waiters() {
                h.write_u64(u64::from(w.token.0));
                h.write_u64(w.blocked_on as u64);
                for op in &w.ops {
                    h.write_u64(op.sem_num as u64);
                    h.write_u64(op.delta as u64);
                }
            }
        }
        if let Some(lock) = &self.lock {
            h.write_u64(0x10);
            h.write_u64(u64::from(lock.is_held()));
            h.write_u64(lock.holder().map(|t| u64::from(t.0) + 1).unwrap_or(0));
            h.write_u64(u64::from(lock.wake_flag()));
            for (tid, alarm) in lock.queue_alarms() {
                h.write_u64(u64::from(tid.0));
                h.write_u64(alarm.map(|a| u64::from(a) + 1).unwrap_or(0));
            }
        }
        h.finish()
    }
}

/// FNV-1a, fixed offset/prime: stable across runs and platforms.
struct Fnv(u64);

impl Fnv {
    fn new() -> Fnv {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}
