//! The mini daemon demo: a postmaster thread spawns workers that hammer a
//! shared counter living in an emulated shared-memory segment, guarded by
//! one emulated semaphore and one short lock.
//!
//! In fixed lock mode the workload free-runs on real threads and the counter
//! must come out exact. In legacy mode the demo first asks the explorer for
//! a starvation witness, then replays that schedule over real gated threads:
//! the stranded worker is reported, reproducing the wake-flag defect on the
//! actual lock implementation.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use threadshim::explore::{explore, CheckProperty, Model};
use threadshim::lifecycle::{JoinOutcome, Role, Runtime};
use threadshim::sem::{SemOpRequest, SemRegistry};
use threadshim::shm::{ShmKey, ShmRegistry};
use threadshim::shortlock::{LockError, LockMode, ShortLock, StepGate};
use threadshim::{current_tid, Tid};

const SHM_KEY: ShmKey = ShmKey(0x5348);
const SEM_KEY: u64 = 7;
const COUNTER_OFFSET: usize = 0;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DemoLockMode {
    Legacy,
    Fixed,
}

#[derive(Clone, Debug)]
pub struct DemoConfig {
    pub workers: usize,
    pub lock_mode: DemoLockMode,
    pub seed: u64,
    pub increments: u64,
}

#[derive(Debug)]
pub enum DemoError {
    Config(String),
    Runtime(String),
}

impl std::fmt::Display for DemoError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DemoError::Config(m) => write!(f, "config error: {m}"),
            DemoError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

/// Demo output: scriptable key=value lines plus the registry/event dumps.
#[derive(Debug, Default)]
pub struct DemoOutcome {
    pub kv: Vec<(String, String)>,
    pub dumps: String,
    /// True when the run exhibited the defect (legacy starvation) or failed
    /// its correctness checks.
    pub violation: bool,
}

impl DemoOutcome {
    fn put(&mut self, key: &str, value: impl std::fmt::Display) {
        self.kv.push((key.to_string(), value.to_string()));
    }

    pub fn kv_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.kv {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }
}

pub fn run_demo(cfg: &DemoConfig) -> Result<DemoOutcome, DemoError> {
    if cfg.workers == 0 {
        return Err(DemoError::Config("workers must be at least 1".into()));
    }
    if cfg.increments == 0 {
        return Err(DemoError::Config("increments must be at least 1".into()));
    }
    match cfg.lock_mode {
        DemoLockMode::Fixed => run_fixed(cfg),
        DemoLockMode::Legacy => run_legacy_replay(cfg),
    }
}

/// Free-running stress: 4 workers x 1000 guarded increments end at exactly
/// workers*increments, and shutdown drains the reclaim list.
fn run_fixed(cfg: &DemoConfig) -> Result<DemoOutcome, DemoError> {
    let mut out = DemoOutcome::default();
    out.put("demo", "fixed");
    out.put("workers", cfg.workers);
    out.put("lock_mode", "fixed");
    out.put("seed", cfg.seed);
    out.put("increments", cfg.increments);

    // Postmaster (this thread) + workers + one bootstrap.
    let rt = Runtime::new(cfg.workers + 2);
    let shm = Arc::new(ShmRegistry::new());
    let sems = Arc::new(SemRegistry::new());
    let lock = Arc::new(
        ShortLock::fixed(Duration::from_millis(10)).expect("nonzero timeout"),
    );

    // Bootstrap thread performs the startup duties: create the segment and
    // the semaphore, zero the counter.
    let shm_boot = Arc::clone(&shm);
    let sems_boot = Arc::clone(&sems);
    let boot = rt
        .spawn(Role::Bootstrap, move || {
            let seg = shm_boot.get(SHM_KEY, 64, true, false).unwrap();
            let att = shm_boot.attach(seg).unwrap();
            att.write_u64(COUNTER_OFFSET, 0).unwrap();
            let mut att = att;
            shm_boot.detach(&mut att).unwrap();
            let sem = sems_boot.get(SEM_KEY, 1, true, false).unwrap();
            sems_boot.set_value(sem, 0, 1).unwrap();
            0
        })
        .map_err(|e| DemoError::Runtime(e.to_string()))?;
    match rt.join(boot) {
        Ok(JoinOutcome::Exited(0)) => {}
        other => return Err(DemoError::Runtime(format!("bootstrap failed: {other:?}"))),
    }
    let seg = shm
        .get(SHM_KEY, 64, false, false)
        .map_err(|e| DemoError::Runtime(e.to_string()))?;
    let sem = sems
        .get(SEM_KEY, 1, false, false)
        .map_err(|e| DemoError::Runtime(e.to_string()))?;

    let mut workers = Vec::new();
    for w in 0..cfg.workers {
        let shm = Arc::clone(&shm);
        let sems = Arc::clone(&sems);
        let lock = Arc::clone(&lock);
        let rt2 = Arc::clone(&rt);
        let increments = cfg.increments;
        let seed = cfg.seed;
        let tid = rt
            .spawn(Role::Worker, move || {
                let me = current_tid().unwrap();
                let att = shm.attach(seg).unwrap();
                for _ in 0..increments {
                    sems.op(sem, me, &[SemOpRequest::p(0)], None).unwrap();
                    lock.acquire(me).unwrap();
                    let v = att.read_u64(COUNTER_OFFSET).unwrap();
                    att.write_u64(COUNTER_OFFSET, v + 1).unwrap();
                    lock.release(me).unwrap();
                    sems.op(sem, me, &[SemOpRequest::v(0)], None).unwrap();
                }
                // Seeded per-worker scratch allocations for the sweep.
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(w as u64));
                for _ in 0..rng.random_range(1..=3usize) {
                    let alloc = rt2.track(vec![0u8; rng.random_range(16..256)]);
                    rt2.reclaim_register(me, alloc);
                }
                let mut att = att;
                shm.detach(&mut att).unwrap();
                0
            })
            .map_err(|e| DemoError::Runtime(e.to_string()))?;
        workers.push(tid);
    }

    let mut all_ok = true;
    for &t in &workers {
        match rt.join(t) {
            Ok(JoinOutcome::Exited(0)) => {}
            other => {
                all_ok = false;
                out.put("worker_failure", format!("{t}:{other:?}"));
            }
        }
    }

    let att = shm.attach(seg).map_err(|e| DemoError::Runtime(e.to_string()))?;
    let counter = att.read_u64(COUNTER_OFFSET).unwrap();
    let mut att = att;
    shm.detach(&mut att).unwrap();

    let expected = cfg.workers as u64 * cfg.increments;
    out.put("counter", counter);
    out.put("expected", expected);

    // Snapshot the registries while the structures are still alive.
    let shm_dump = shm.dump();
    let sem_dump = sems.dump();

    // Clean shutdown: sweep every dead thread, then remove the segment.
    let mut swept = 0;
    for &t in &workers {
        swept += rt.reclaim_sweep(t).map_err(|e| DemoError::Runtime(e.to_string()))?;
    }
    swept += rt.reclaim_sweep(boot).map_err(|e| DemoError::Runtime(e.to_string()))?;
    shm.remove(seg).map_err(|e| DemoError::Runtime(e.to_string()))?;
    sems.remove(sem).map_err(|e| DemoError::Runtime(e.to_string()))?;

    out.put("reclaim_swept", swept);
    out.put("reclaim_empty", rt.reclaim().is_empty());
    out.put("live_allocations", rt.live_allocations());
    out.put("shm_leaks", shm.leak_count());
    out.put(
        "lock_events",
        lock.with_core(|c| c.events().len()),
    );

    let mut dumps = String::new();
    writeln!(dumps, "registry:").unwrap();
    dumps.push_str(&rt.dump());
    writeln!(dumps, "shm (before teardown):").unwrap();
    dumps.push_str(if shm_dump.is_empty() { "(empty)\n" } else { &shm_dump });
    writeln!(dumps, "sem (before teardown):").unwrap();
    dumps.push_str(if sem_dump.is_empty() { "(empty)\n" } else { &sem_dump });
    out.dumps = dumps;

    let correct = counter == expected
        && all_ok
        && rt.reclaim().is_empty()
        && rt.live_allocations() == 0
        && shm.leak_count() == 0;
    out.put("result", if correct { "pass" } else { "fail" });
    out.violation = !correct;
    Ok(out)
}

/// Witness replay: the explorer finds a legacy starvation schedule, real
/// gated threads replay it, and the stranded worker is reported.
fn run_legacy_replay(cfg: &DemoConfig) -> Result<DemoOutcome, DemoError> {
    if cfg.workers > threadshim::explore::MAX_THREADS {
        return Err(DemoError::Config(format!(
            "legacy replay explores at most {} workers",
            threadshim::explore::MAX_THREADS
        )));
    }
    let mut out = DemoOutcome::default();
    out.put("demo", "legacy-replay");
    out.put("workers", cfg.workers);
    out.put("lock_mode", "legacy");
    out.put("seed", cfg.seed);

    let model = Model::lock_acquire_release(LockMode::Legacy, 0, cfg.workers);
    let verdict = explore(&model, 12, CheckProperty::LockStarvation)
        .map_err(|e| DemoError::Runtime(e.to_string()))?;
    let Some(witness) = verdict.witness() else {
        out.put("result", "pass");
        out.put(
            "note",
            "no starvation schedule exists at this size; nothing to replay",
        );
        return Ok(out);
    };
    let schedule: Vec<String> = witness.schedule.iter().map(|t| t.to_string()).collect();
    out.put("witness_schedule", schedule.join(","));

    // Replay over real threads: one guarded increment per worker.
    let rt = Runtime::new(cfg.workers + 1);
    let shm = Arc::new(ShmRegistry::new());
    let seg = shm
        .get(SHM_KEY, 64, true, false)
        .map_err(|e| DemoError::Runtime(e.to_string()))?;
    let lock = Arc::new(ShortLock::legacy());
    lock.with_core_mut(|c| c.set_auto_clock(false));
    let gate = Arc::new(StepGate::new());

    let mut workers = Vec::new();
    for w in 0..cfg.workers {
        let lock = Arc::clone(&lock);
        let gate = Arc::clone(&gate);
        let shm = Arc::clone(&shm);
        let tid = rt
            .spawn(Role::Worker, move || {
                let me = Tid(w as u32 + 100); // lock identity, distinct from slots
                let att = shm.attach(seg).unwrap();
                if gate.wait_turn(me).is_err() {
                    return 3;
                }
                match lock.acquire_gated(me, Some(&gate)) {
                    Ok(()) => {}
                    Err(LockError::Cancelled) => return 3,
                    Err(e) => panic!("acquire: {e}"),
                }
                let v = att.read_u64(COUNTER_OFFSET).unwrap();
                att.write_u64(COUNTER_OFFSET, v + 1).unwrap();
                if gate.wait_turn(me).is_err() {
                    return 3;
                }
                lock.release(me).unwrap();
                let mut att = att;
                shm.detach(&mut att).unwrap();
                0
            })
            .map_err(|e| DemoError::Runtime(e.to_string()))?;
        workers.push(tid);
    }

    for (i, &t) in witness.schedule.iter().enumerate() {
        lock.with_core_mut(|c| c.set_clock(i as u64));
        let before = lock.with_core(|c| c.events().len());
        gate.grant(Tid(t as u32 + 100));
        let deadline = Instant::now() + Duration::from_secs(10);
        while lock.with_core(|c| c.events().len()) == before {
            if Instant::now() >= deadline {
                return Err(DemoError::Runtime(format!(
                    "replay stalled at step {i} (worker {t})"
                )));
            }
            std::thread::yield_now();
        }
    }

    // Quiescent snapshot: who is stranded while the lock sits free?
    let lock_free = lock.with_core(|c| !c.is_held());
    let stranded = lock.with_core(|c| c.queue());
    let events = lock.with_core(|c| c.dump_events());
    let att = shm.attach(seg).map_err(|e| DemoError::Runtime(e.to_string()))?;
    let counter = att.read_u64(COUNTER_OFFSET).unwrap();
    let mut att = att;
    shm.detach(&mut att).unwrap();

    out.put("lock_free", lock_free);
    out.put("counter", counter);
    let starved: Vec<String> = stranded.iter().map(|t| (t.0 - 100).to_string()).collect();
    if let Some(first) = starved.first() {
        out.put("starved_worker", first);
    }
    out.put("starved_count", starved.len());
    out.put(
        "result",
        if starved.is_empty() { "pass" } else { "starved" },
    );
    out.violation = !starved.is_empty();

    // Tear down: release the stranded and unscheduled workers.
    gate.shutdown();
    lock.cancel_all();
    for &t in &workers {
        let _ = rt.join(t);
    }
    for &t in &workers {
        let _ = rt.reclaim_sweep(t);
    }
    shm.remove(seg).map_err(|e| DemoError::Runtime(e.to_string()))?;

    let mut dumps = String::new();
    writeln!(dumps, "witness:").unwrap();
    dumps.push_str(&witness.render());
    writeln!(dumps, "replayed lock events:").unwrap();
    dumps.push_str(&events);
    writeln!(dumps, "registry:").unwrap();
    dumps.push_str(&rt.dump());
    out.dumps = dumps;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_demo_counts_exactly() {
        let cfg = DemoConfig {
            workers: 3,
            lock_mode: DemoLockMode::Fixed,
            seed: 11,
            increments: 50,
        };
        let out = run_demo(&cfg).unwrap();
        assert!(!out.violation, "kv: {}", out.kv_text());
        let kv = out.kv_text();
        assert!(kv.contains("counter=150"));
        assert!(kv.contains("reclaim_empty=true"));
        assert!(kv.contains("result=pass"));
    }

    #[test]
    fn legacy_demo_reports_a_starved_worker() {
        let cfg = DemoConfig {
            workers: 3,
            lock_mode: DemoLockMode::Legacy,
            seed: 11,
            increments: 1,
        };
        let out = run_demo(&cfg).unwrap();
        assert!(out.violation);
        let kv = out.kv_text();
        assert!(kv.contains("starved_worker="), "kv: {kv}");
        assert!(kv.contains("lock_free=true"));
        assert!(kv.contains("result=starved"));
    }

    #[test]
    fn legacy_demo_is_deterministic_per_seed() {
        let cfg = DemoConfig {
            workers: 3,
            lock_mode: DemoLockMode::Legacy,
            seed: 5,
            increments: 1,
        };
        let a = run_demo(&cfg).unwrap();
        let b = run_demo(&cfg).unwrap();
        assert_eq!(a.kv_text(), b.kv_text());
        assert_eq!(a.dumps, b.dumps);
    }

    #[test]
    fn zero_workers_is_a_config_error() {
        let cfg = DemoConfig {
            workers: 0,
            lock_mode: DemoLockMode::Fixed,
            seed: 0,
            increments: 1,
        };
        assert!(matches!(run_demo(&cfg), Err(DemoError::Config(_))));
    }
}
