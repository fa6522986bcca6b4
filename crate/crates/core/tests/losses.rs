mod common;

use approx::assert_abs_diff_eq;
use common::*;
use cytocount::losses::*;
use ndarray::array;
use proptest::prelude::*;

fn pair(a: Map, b: Map) -> MapPair {
    [a, b]
}

#[test]
fn ce_identity_is_near_zero() {
    let g = pair(array![[1.0, 0.0], [0.0, 1.0]], array![[0.0, 0.0], [1.0, 1.0]]);
    let p = g.clone().map(|m| m.mapv(|v| v.clamp(1e-7, 1.0 - 1e-7)));
    assert!(ce_loss(&p, &g).unwrap() < 1e-5);
}

#[test]
fn uniform_prediction_costs_log_two() {
    let g = pair(array![[1.0]], array![[0.0]]);
    let p = pair(array![[0.5]], array![[0.5]]);
    assert_abs_diff_eq!(ce_loss(&p, &g).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
}

#[test]
fn ce_matches_double_loop() {
    let mut r = rng(1);
    for _ in 0..20 {
        let p = pair(random_map(&mut r, 4, 4, 0.0, 1.0), random_map(&mut r, 4, 4, 0.0, 1.0));
        let g = pair(random_binary(&mut r, 4, 4), random_binary(&mut r, 4, 4));
        assert_abs_diff_eq!(ce_loss(&p, &g).unwrap(), ce_oracle(&p, &g), epsilon = 1e-10);
    }
}

#[test]
fn iou_examples() {
    let g = pair(array![[1.0, 0.0], [0.0, 1.0]], array![[0.0, 1.0], [1.0, 1.0]]);
    assert_abs_diff_eq!(iou_loss(&g, &g, IouMode::Union).unwrap(), 0.0, epsilon = 1e-9);

    let p = pair(array![[0.0, 1.0], [0.0, 0.0]], array![[1.0, 0.0], [0.0, 0.0]]);
    let g = pair(array![[1.0, 0.0], [0.0, 0.0]], array![[0.0, 0.0], [0.0, 1.0]]);
    assert_abs_diff_eq!(iou_loss(&p, &g, IouMode::Union).unwrap(), 1.0, epsilon = 1e-6);

    // One target pixel predicted at 0.5: 1 - 0.5 / (1 + 0.5 - 0.5) per class.
    let g = pair(array![[1.0, 0.0]], array![[1.0, 0.0]]);
    let p = pair(array![[0.5, 0.0]], array![[0.5, 0.0]]);
    assert_abs_diff_eq!(iou_loss(&p, &g, IouMode::Union).unwrap(), 0.5, epsilon = 1e-6);
}

#[test]
fn iou_matches_oracle() {
    let mut r = rng(2);
    for _ in 0..20 {
        let p = pair(random_map(&mut r, 4, 4, 0.0, 1.0), random_map(&mut r, 4, 4, 0.0, 1.0));
        let g = pair(random_binary(&mut r, 4, 4), random_binary(&mut r, 4, 4));
        assert_abs_diff_eq!(iou_loss(&p, &g, IouMode::Union).unwrap(), iou_oracle(&p, &g), epsilon = 1e-12);
    }
}

#[test]
fn main_loss_examples() {
    assert_abs_diff_eq!(combine_main(0.5, 0.25, 0.8), 0.45, epsilon = 1e-12);
    let mut r = rng(3);
    let p = pair(random_map(&mut r, 3, 3, 0.0, 1.0), random_map(&mut r, 3, 3, 0.0, 1.0));
    let g = pair(random_binary(&mut r, 3, 3), random_binary(&mut r, 3, 3));
    let ce = ce_loss(&p, &g).unwrap();
    let iou = iou_loss(&p, &g, IouMode::Union).unwrap();
    assert_abs_diff_eq!(main_loss(&p, &g, 1.0, IouMode::Union).unwrap().total, ce, epsilon = 1e-12);
    assert_abs_diff_eq!(main_loss(&p, &g, 0.0, IouMode::Union).unwrap().total, iou, epsilon = 1e-12);
    assert!(main_loss(&p, &g, 1.5, IouMode::Union).is_err());
}

#[test]
fn l1_examples() {
    let a = pair(Map::ones((2, 2)), Map::ones((2, 2)));
    let b = pair(Map::zeros((2, 2)), Map::zeros((2, 2)));
    assert_abs_diff_eq!(l1_map_loss(&a, &a).unwrap(), 0.0);
    assert_abs_diff_eq!(l1_map_loss(&a, &b).unwrap(), 1.0);
    let c = pair(Map::from_elem((2, 2), 0.25), Map::from_elem((2, 2), 0.75));
    let d = pair(Map::from_elem((2, 2), 0.5), Map::from_elem((2, 2), 0.5));
    assert_abs_diff_eq!(l1_map_loss(&c, &d).unwrap(), 0.25, epsilon = 1e-12);
}

#[test]
fn prior_examples() {
    let g = array![[1.0, 0.0], [0.0, 1.0]];
    assert_abs_diff_eq!(prior_loss(&g, &g, false).unwrap(), 0.0);
    assert_abs_diff_eq!(prior_loss(&g, &g.mapv(|v| 1.0 - v), false).unwrap(), 4.0);
    let mut r = rng(4);
    for _ in 0..20 {
        let p = random_map(&mut r, 4, 4, 0.0, 1.0);
        let g = random_binary(&mut r, 4, 4);
        assert_abs_diff_eq!(prior_loss(&p, &g, false).unwrap(), prior_oracle(&p, &g), epsilon = 1e-10);
    }
}

#[test]
fn total_examples() {
    let w = LossWeights::default();
    assert_abs_diff_eq!(total_loss(0.4, 0.2, 0.1, 0.3, &w).unwrap(), 0.85, epsilon = 1e-12);
    assert_abs_diff_eq!(total_loss(0.0, 0.0, 0.0, 0.0, &w).unwrap(), 0.0);
    let zero = LossWeights {
        lambda_c: 0.0,
        lambda_p: 0.0,
        lambda_d: 0.0,
        ..w
    };
    assert_abs_diff_eq!(total_loss(0.4, 0.2, 0.1, 0.3, &zero).unwrap(), 0.4);
}

#[test]
fn weights_match_published_settings() {
    let w = LossWeights::default();
    assert_eq!((w.alpha, w.lambda_c, w.lambda_p, w.lambda_d), (0.8, 0.5, 0.5, 1.0));
}

/// Entries of `b` at least `gap` away from `a`, so |a - b| has no kink nearby.
fn away_from(r: &mut rand_chacha::ChaCha8Rng, a: &Map, gap: f64) -> Map {
    use rand::Rng;
    a.mapv(|v| loop {
        let u: f64 = r.random_range(0.0..1.0);
        if (u - v).abs() >= gap {
            break u;
        }
    })
}

#[test]
fn gradients_match_central_differences() {
    let h = 1e-4;
    let mut r = rng(5);
    for _ in 0..20 {
        let p = [random_map(&mut r, 4, 4, 0.02, 0.98), random_map(&mut r, 4, 4, 0.02, 0.98)];
        let g = pair(random_binary(&mut r, 4, 4), random_binary(&mut r, 4, 4));

        let (_, d) = ce_loss_grad(&p, &g).unwrap();
        let err = max_fd_error(&p, &d, h, |x| ce_loss(&[x[0].clone(), x[1].clone()], &g).unwrap());
        assert!(err < 1e-3, "ce {err}");

        for mode in [IouMode::Union, IouMode::Dice] {
            let (_, d) = iou_loss_grad(&p, &g, mode).unwrap();
            let err = max_fd_error(&p, &d, h, |x| iou_loss(&[x[0].clone(), x[1].clone()], &g, mode).unwrap());
            assert!(err < 1e-3, "iou {mode:?} {err}");
        }

        let b = [away_from(&mut r, &p[0], 1e-2), away_from(&mut r, &p[1], 1e-2)];
        let (_, d) = l1_map_loss_grad(&p, &b).unwrap();
        let err = max_fd_error(&p, &d, h, |x| l1_map_loss(&[x[0].clone(), x[1].clone()], &b).unwrap());
        assert!(err < 1e-3, "l1 {err}");

        for normalize in [false, true] {
            let (_, d) = prior_loss_grad(&p[0], &g[0], normalize).unwrap();
            let err = max_fd_error(&p[..1], &[d], h, |x| prior_loss(&x[0], &g[0], normalize).unwrap());
            assert!(err < 1e-3, "prior {err}");
        }
    }
}

fn map_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..0.999, len)
}

fn to_pair(v: &[f64], rows: usize, cols: usize) -> MapPair {
    let n = rows * cols;
    [
        Map::from_shape_vec((rows, cols), v[..n].to_vec()).unwrap(),
        Map::from_shape_vec((rows, cols), v[n..2 * n].to_vec()).unwrap(),
    ]
}

proptest! {
    #[test]
    fn losses_are_nonnegative(a in map_strategy(18), b in map_strategy(18), bits in prop::collection::vec(any::<bool>(), 18)) {
        let p = to_pair(&a, 3, 3);
        let q = to_pair(&b, 3, 3);
        let g = to_pair(&bits.iter().map(|&x| f64::from(u8::from(x))).collect::<Vec<_>>(), 3, 3);
        prop_assert!(ce_loss(&p, &g).unwrap() >= 0.0);
        let iou = iou_loss(&p, &g, IouMode::Union).unwrap();
        prop_assert!((0.0..=1.0).contains(&iou));
        prop_assert!(l1_map_loss(&p, &q).unwrap() >= 0.0);
        prop_assert!(prior_loss(&p[0], &g[0], false).unwrap() >= 0.0);
    }

    #[test]
    fn l1_is_symmetric(a in map_strategy(8), b in map_strategy(8)) {
        let p = to_pair(&a, 2, 2);
        let q = to_pair(&b, 2, 2);
        prop_assert_eq!(l1_map_loss(&p, &q).unwrap(), l1_map_loss(&q, &p).unwrap());
        prop_assert_eq!(l1_map_loss(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn iou_is_permutation_invariant(a in map_strategy(18), bits in prop::collection::vec(any::<bool>(), 18), perm in Just((0..9usize).collect::<Vec<_>>()).prop_shuffle()) {
        let p = to_pair(&a, 3, 3);
        let g = to_pair(&bits.iter().map(|&x| f64::from(u8::from(x))).collect::<Vec<_>>(), 3, 3);
        let shuffle = |m: &Map| {
            let flat: Vec<f64> = m.iter().copied().collect();
            Map::from_shape_vec((3, 3), perm.iter().map(|&i| flat[i]).collect()).unwrap()
        };
        let ps = [shuffle(&p[0]), shuffle(&p[1])];
        let gs = [shuffle(&g[0]), shuffle(&g[1])];
        let before = iou_loss(&p, &g, IouMode::Union).unwrap();
        let after = iou_loss(&ps, &gs, IouMode::Union).unwrap();
        prop_assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn ce_and_iou_vanish_at_binary_targets(bits in prop::collection::vec(any::<bool>(), 18)) {
        let g = to_pair(&bits.iter().map(|&x| f64::from(u8::from(x))).collect::<Vec<_>>(), 3, 3);
        prop_assert!(ce_loss(&g, &g).unwrap() < 1e-5);
        prop_assert!(iou_loss(&g, &g, IouMode::Union).unwrap() < 1e-6);
    }
}
