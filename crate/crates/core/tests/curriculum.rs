mod common;

use indistill_core::curriculum::loss_for_subtask;
use indistill_core::{CurriculumSchedule, Error, LossSelector};
use proptest::prelude::*;

use common::closed_form_schedule;

#[test]
fn reference_setting_yields_3_4_5_58() {
    let s = CurriculumSchedule::build(2, 1, 70, 4).unwrap();
    assert_eq!(s.counts(), &[3, 4, 5, 58]);
    assert_eq!(s.offsets(), &[0, 3, 7, 12]);
    assert_eq!(s.epoch_range(4), 13..=70);
}

#[test]
fn minimum_feasible_epochs() {
    // head needs 3+4+5 = 12 epochs, so E = 12 leaves nothing for the task
    assert!(matches!(
        CurriculumSchedule::build(2, 1, 12, 4),
        Err(Error::InfeasibleSchedule { min_epochs: 13, .. })
    ));
    assert_eq!(CurriculumSchedule::build(2, 1, 13, 4).unwrap().counts(), &[3, 4, 5, 1]);
}

#[test]
fn single_subtask_is_all_task() {
    let s = CurriculumSchedule::build(5, 3, 9, 1).unwrap();
    assert_eq!(s.counts(), &[9]);
    assert_eq!(s.loss_sequence(), vec![LossSelector::Task; 9]);
}

#[test]
fn loss_selector_mapping() {
    assert_eq!(loss_for_subtask(1, 4), LossSelector::Mse { layer: 1 });
    assert_eq!(loss_for_subtask(3, 4), LossSelector::Mse { layer: 3 });
    assert_eq!(loss_for_subtask(4, 4), LossSelector::Task);
}

#[test]
fn csv_lists_every_subtask() {
    let csv = CurriculumSchedule::build(2, 1, 70, 4).unwrap().to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "subtask,epochs,first_epoch,last_epoch,loss");
    assert_eq!(lines[1], "1,3,1,3,mse1");
    assert_eq!(lines[4], "4,58,13,70,task");
}

fn feasible() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (0usize..6, 0usize..4, 1usize..8).prop_flat_map(|(a, b, l)| {
        let head: usize = (1..l).map(|i| a + i * b).sum();
        (Just(a), Just(b), head + 1..head + 120, Just(l))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn equals_closed_form((a, b, e, l) in feasible()) {
        let s = CurriculumSchedule::build(a, b, e, l).unwrap();
        let (counts, offsets) = closed_form_schedule(a, b, e, l);
        prop_assert_eq!(s.counts(), &counts[..]);
        prop_assert_eq!(s.offsets(), &offsets[..]);
    }
}

proptest! {
    #[test]
    fn epochs_partition_exactly((a, b, e, l) in feasible()) {
        let s = CurriculumSchedule::build(a, b, e, l).unwrap();
        prop_assert_eq!(s.counts().iter().sum::<usize>(), e);
        let seq = s.loss_sequence();
        prop_assert_eq!(seq.len(), e);
        for epoch in 1..=e {
            let i = s.active_subtask(epoch).unwrap();
            prop_assert!(s.epoch_range(i).contains(&epoch));
            prop_assert_eq!(seq[epoch - 1], loss_for_subtask(i, l));
        }
        prop_assert!(s.active_subtask(0).is_err());
        prop_assert!(s.active_subtask(e + 1).is_err());
        // the layer sequence never goes backwards
        let layers: Vec<usize> = (1..=e).map(|ep| s.active_subtask(ep).unwrap()).collect();
        prop_assert!(layers.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn infeasible_budgets_are_rejected(a in 0usize..6, b in 0usize..4, l in 2usize..8) {
        let head: usize = (1..l).map(|i| a + i * b).sum();
        prop_assume!(head > 0);
        prop_assert!(CurriculumSchedule::build(a, b, head, l).is_err());
    }
}
