mod common;

use indistill_core::prune::{filter_l1_scores, prune, select_channels};
use indistill_core::{KernelView, Tensor};
use proptest::prelude::*;
use rand::Rng;

use common::{brute_force_kept, rng, tie_heavy_kernel};

#[test]
fn matches_brute_force_on_fuzzed_kernels() {
    let mut g = rng(42);
    let mut ties = 0;
    for _ in 0..1000 {
        let kernel = tie_heavy_kernel(&mut g);
        let view = KernelView::new(&kernel).unwrap();
        let p = g.gen_range(0..view.outputs());
        let sel = prune(&view, p, 1).unwrap();
        let scores = filter_l1_scores(&view);
        let mut sorted = scores.clone();
        sorted.sort_by(f32::total_cmp);
        ties += sorted.windows(2).any(|w| w[0] == w[1]) as usize;
        assert_eq!(sel.kept, brute_force_kept(&scores, p), "scores {scores:?} p {p}");
    }
    assert!(ties > 100, "fuzzer produced only {ties} tied kernels");
}

#[test]
fn ties_drop_lower_index_first() {
    let kernel = Tensor::new(vec![1, 4, 1, 1], vec![1.0, -1.0, 1.0, 2.0]).unwrap();
    let sel = prune(&KernelView::new(&kernel).unwrap(), 2, 1).unwrap();
    assert_eq!(sel.kept, vec![2, 3]);
}

#[test]
fn dense_weights_score_by_output_column() {
    // [in=2, out=3]
    let w = Tensor::new(vec![2, 3], vec![1.0, 0.0, -3.0, 1.0, 0.5, 0.0]).unwrap();
    let view = KernelView::new(&w).unwrap();
    assert_eq!(filter_l1_scores(&view), vec![2.0, 0.5, 3.0]);
    assert_eq!(prune(&view, 1, 4).unwrap().kept, vec![0, 2]);
}

#[test]
fn pruning_everything_is_rejected() {
    let kernel = Tensor::full(vec![1, 3, 1, 1], 1.0f32);
    assert!(prune(&KernelView::new(&kernel).unwrap(), 3, 1).is_err());
}

#[test]
fn selection_rejects_mismatched_maps() {
    let kernel = Tensor::full(vec![1, 4, 1, 1], 1.0f32);
    let sel = prune(&KernelView::new(&kernel).unwrap(), 2, 1).unwrap();
    let map = Tensor::zeros(vec![2, 5, 3, 3]);
    assert!(matches!(select_channels(&map, &sel), Err(indistill_core::Error::Alignment { .. })));
}

proptest! {
    #[test]
    fn kept_set_is_sorted_sized_and_dominant(seed in any::<u64>(), frac in 0.0f64..1.0) {
        let mut g = rng(seed);
        let kernel = tie_heavy_kernel(&mut g);
        let view = KernelView::new(&kernel).unwrap();
        let n = view.outputs();
        let p = ((n as f64) * frac) as usize % n;
        let sel = prune(&view, p, 1).unwrap();
        prop_assert_eq!(sel.kept.len(), n - p);
        prop_assert!(sel.kept.windows(2).all(|w| w[0] < w[1]));
        let min_kept = sel.kept.iter().map(|&i| sel.scores[i]).fold(f32::INFINITY, f32::min);
        for j in (0..n).filter(|j| !sel.is_kept(*j)) {
            prop_assert!(sel.scores[j] <= min_kept);
        }
    }

    #[test]
    fn selected_maps_copy_kept_channels(seed in any::<u64>()) {
        let mut g = rng(seed);
        let kernel = tie_heavy_kernel(&mut g);
        let view = KernelView::new(&kernel).unwrap();
        let c = view.outputs();
        let sel = prune(&view, c / 2, 2).unwrap();
        let map: Tensor = Tensor::randn(vec![2, c, 2, 3], 1.0, &mut g);
        let out = select_channels(&map, &sel).unwrap();
        prop_assert_eq!(out.shape(), &[2, sel.kept.len(), 2, 3][..]);
        for s in 0..2 {
            for (slot, &k) in sel.kept.iter().enumerate() {
                let src = &map.data()[(s * c + k) * 6..(s * c + k + 1) * 6];
                let dst = &out.data()[(s * sel.kept.len() + slot) * 6..(s * sel.kept.len() + slot + 1) * 6];
                prop_assert_eq!(src, dst);
            }
        }
    }
}
