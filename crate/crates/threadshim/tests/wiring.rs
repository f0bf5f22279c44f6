//! Cross-module integration: the signal path driving lock self-wakes, and a
//! miniature daemon wiring every mechanism together.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use threadshim::globals::{self, GValue, GlobalLayout};
use threadshim::lifecycle::{JoinOutcome, Role, Runtime};
use threadshim::sem::{SemOpRequest, SemRegistry};
use threadshim::shm::{ShmKey, ShmRegistry};
use threadshim::shortlock::{ExpireOutcome, LockEventKind, LockMode, ShortLock, StepGate};
use threadshim::sig::{Dispatcher, SignalKind};
use threadshim::{bind_current_tid, current_tid, Tid};

/// An alarm signal routed through the per-thread dispatcher triggers the
/// short lock's self-wake check for the stranded thread.
#[test]
fn alarm_signal_drives_lock_self_wake() {
    // Huge wall timeout: only the signal path can self-wake anyone.
    let lock = Arc::new(ShortLock::new(LockMode::Fixed, Duration::from_secs(3600)).unwrap());
    let gate = Arc::new(StepGate::new());
    let dispatcher = Arc::new(Dispatcher::new());
    dispatcher.install_dispatcher(SignalKind::Alarm);

    lock.acquire(Tid(0)).unwrap();

    // T1 queues first and will be woken by the release, then parked at the
    // gate so the lock stays free while T2 is still queued.
    let l1 = Arc::clone(&lock);
    let g1 = Arc::clone(&gate);
    let t1 = std::thread::spawn(move || {
        bind_current_tid(Tid(1));
        l1.acquire_gated(Tid(1), Some(&g1)).unwrap();
        l1.release(Tid(1)).unwrap();
    });
    wait_until(|| lock.with_core(|c| c.is_queued(Tid(1))));

    // T2 queues second and registers an alarm handler that runs the
    // self-wake check on its behalf.
    let l2 = Arc::clone(&lock);
    let d2 = Arc::clone(&dispatcher);
    let hits = Arc::new(AtomicUsize::new(0));
    let h2 = Arc::clone(&hits);
    let t2 = std::thread::spawn(move || {
        bind_current_tid(Tid(2));
        let lock_for_handler = Arc::clone(&l2);
        d2.set_thread_handler(
            Tid(2),
            SignalKind::Alarm,
            Arc::new(move |_| {
                h2.fetch_add(1, Ordering::SeqCst);
                lock_for_handler.expire_now(Tid(2));
            }),
            true,
        )
        .unwrap();
        l2.acquire(Tid(2)).unwrap();
        l2.release(Tid(2)).unwrap();
    });
    wait_until(|| lock.with_core(|c| c.is_queued(Tid(2))));

    // Release wakes T1 (the head); T1 parks at the gate, leaving the lock
    // free with T2 queued.
    lock.release(Tid(0)).unwrap();
    wait_until(|| lock.with_core(|c| !c.is_held() && c.queue() == vec![Tid(2)]));

    // The alarm fires for T2: its handler self-wakes it and it acquires.
    let rec = dispatcher.deliver(SignalKind::Alarm, Tid(2)).unwrap();
    assert!(rec.handled);
    t2.join().unwrap();
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    assert!(lock
        .with_core(|c| c.events().iter().any(|e| e.kind == LockEventKind::SelfWake)));

    // Let T1 retry and finish.
    gate.grant(Tid(1));
    t1.join().unwrap();
    assert!(lock.with_core(|c| !c.is_held() && c.queue_len() == 0));
}

/// Expiry through the signal path while the lock is held re-arms instead of
/// waking.
#[test]
fn alarm_while_held_rearms() {
    let lock = ShortLock::new(LockMode::Fixed, Duration::from_secs(3600)).unwrap();
    let lock = Arc::new(lock);
    lock.acquire(Tid(0)).unwrap();
    let l = Arc::clone(&lock);
    let t = std::thread::spawn(move || {
        l.acquire(Tid(1)).unwrap();
        l.release(Tid(1)).unwrap();
    });
    wait_until(|| lock.with_core(|c| c.is_queued(Tid(1))));
    assert_eq!(lock.expire_now(Tid(1)), ExpireOutcome::Rearmed);
    assert!(lock.with_core(|c| c.is_queued(Tid(1))));
    lock.release(Tid(0)).unwrap();
    t.join().unwrap();
}

/// The mini daemon: workers share one segment guarded by one semaphore and
/// one fixed-mode short lock; globals stay private; the reclaim list drains.
#[test]
fn mini_daemon_round_trip() {
    const WORKERS: usize = 4;
    const INCREMENTS: u64 = 200;

    let rt = Runtime::new(WORKERS + 1);
    let shm = Arc::new(ShmRegistry::new());
    let sems = Arc::new(SemRegistry::new());
    let lock = Arc::new(ShortLock::fixed(Duration::from_millis(5)).unwrap());
    let layout = Arc::new(GlobalLayout::new());
    let my_count = layout.define("worker.c::my_count", GValue::Int(0)).unwrap();
    layout.seal().unwrap();

    let seg = shm.get(ShmKey(0x42), 64, true, false).unwrap();
    let sem = sems.get(7, 1, true, false).unwrap();
    sems.set_value(sem, 0, 1).unwrap();

    let mut tids = Vec::new();
    for _ in 0..WORKERS {
        let shm = Arc::clone(&shm);
        let sems = Arc::clone(&sems);
        let lock = Arc::clone(&lock);
        let layout = Arc::clone(&layout);
        let rt2 = Arc::clone(&rt);
        let tid = rt
            .spawn(Role::Worker, move || {
                let me = current_tid().unwrap();
                globals::context_attach(&layout, me).unwrap();
                let att = shm.attach(seg).unwrap();
                for _ in 0..INCREMENTS {
                    sems.op(sem, me, &[SemOpRequest::p(0)], None).unwrap();
                    lock.acquire(me).unwrap();
                    let v = att.read_u64(0).unwrap();
                    att.write_u64(0, v + 1).unwrap();
                    lock.release(me).unwrap();
                    sems.op(sem, me, &[SemOpRequest::v(0)], None).unwrap();
                    let mine = globals::get_int(my_count).unwrap();
                    globals::set_int(my_count, mine + 1).unwrap();
                }
                // Leave an allocation behind for the sweep.
                let alloc = rt2.track(vec![0u8; 128]);
                rt2.reclaim_register(me, alloc);
                let mut att = att;
                shm.detach(&mut att).unwrap();
                assert_eq!(globals::get_int(my_count).unwrap(), INCREMENTS as i64);
                0
            })
            .unwrap();
        tids.push(tid);
    }

    for &t in &tids {
        assert_eq!(rt.join(t).unwrap(), JoinOutcome::Exited(0));
    }
    let att = shm.attach(seg).unwrap();
    assert_eq!(att.read_u64(0).unwrap(), WORKERS as u64 * INCREMENTS);
    let mut att = att;
    shm.detach(&mut att).unwrap();
    shm.remove(seg).unwrap();
    assert_eq!(shm.leak_count(), 0);

    // Sweep: worker allocations plus their global-context blocks.
    for &t in &tids {
        assert!(rt.reclaim_sweep(t).unwrap() >= 1);
    }
    assert!(rt.reclaim().is_empty());
    assert_eq!(rt.live_allocations(), 0);
    assert_eq!(rt.running_count(), 1);
}

fn wait_until(cond: impl Fn() -> bool) {
    let deadline = Instant::now() + Duration::from_secs(5);
    while !cond() {
        assert!(Instant::now() < deadline, "condition never became true");
        std::thread::sleep(Duration::from_millis(2));
    }
}
