//! Property tests over the explorer: randomized small models in the shapes
//! the daemon actually uses must pass every safety check in every
//! interleaving.

use proptest::prelude::*;

use threadshim::explore::{count_schedules, explore, CheckProperty, Model, ModelOp};
use threadshim::sem::SemOpRequest;
use threadshim::shortlock::LockMode;

fn pv_program(sem_num: usize, rounds: usize) -> Vec<ModelOp> {
    let mut ops = Vec::new();
    for _ in 0..rounds {
        ops.push(ModelOp::Sem(vec![SemOpRequest::p(sem_num)]));
        ops.push(ModelOp::Sem(vec![SemOpRequest::v(sem_num)]));
    }
    ops
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    // Non-nested P;V usage of one semaphore can neither deadlock nor lose a
    // wakeup, whatever the initial value, thread count or interleaving.
    #[test]
    fn balanced_pv_models_always_pass(
        value in 1i64..=3,
        threads in 2usize..=3,
        rounds in 1usize..=2,
    ) {
        let programs = (0..threads).map(|_| pv_program(0, rounds)).collect();
        let model = Model::sem_model(vec![value], programs);
        let steps = (threads * rounds * 2 + 2).min(16);
        let verdict = explore(&model, steps, CheckProperty::SemSoundness).unwrap();
        prop_assert!(verdict.is_pass(), "witness: {:?}", verdict.witness().map(|w| w.render()));
    }

    // Both repaired protocols stay starvation-free at every size the
    // explorer can afford.
    #[test]
    fn repaired_locks_never_starve(
        threads in 2usize..=4,
        fixed in any::<bool>(),
        timeout in 1u32..=4,
    ) {
        let mode = if fixed { LockMode::Fixed } else { LockMode::FlagLess };
        let model = Model::lock_acquire_release(mode, timeout, threads);
        let steps = (threads * 4).min(16);
        let verdict = explore(&model, steps, CheckProperty::LockStarvation).unwrap();
        prop_assert!(verdict.is_pass());
    }

    // When the semaphore is big enough that nothing blocks, the number of
    // complete schedules equals the closed-form interleaving count.
    #[test]
    fn unblocked_schedule_counts_are_multinomial(threads in 2usize..=3) {
        let model = Model::sem_pv(vec![threads as i64], 0, threads);
        let total_ops = threads * 2;
        let mut expected = 1u64;
        // multinomial(total; 2,2,...,2) computed incrementally:
        // product over threads of C(remaining, 2).
        let mut remaining = total_ops;
        for _ in 0..threads {
            expected *= (remaining * (remaining - 1) / 2) as u64;
            remaining -= 2;
        }
        let got = count_schedules(&model, total_ops).unwrap();
        prop_assert_eq!(got, expected);
    }
}
