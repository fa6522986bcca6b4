mod common;

use common::*;
use cytocount::data::CellClass;
use cytocount::detect::*;
use cytocount::losses::Map;
use proptest::prelude::*;

fn params(d: usize, t: f64) -> PostprocParams {
    PostprocParams {
        min_distance: d,
        prob_threshold: t,
        class_exclusive: false,
    }
}

/// Wins its `(2d+1)^2` window, ties to the smallest `(y, x)`.
fn is_candidate(map: &Map, x: usize, y: usize, t: f64, d: usize) -> bool {
    let v = map[[y, x]];
    if v < t {
        return false;
    }
    map.indexed_iter().all(|((yy, xx), &u)| {
        let inside = yy.abs_diff(y) <= d && xx.abs_diff(x) <= d;
        !inside || (yy, xx) == (y, x) || u < v || (u == v && (yy, xx) > (y, x))
    })
}

fn before(a: (usize, usize, f64), b: (usize, usize, f64)) -> bool {
    a.2 > b.2 || (a.2 == b.2 && (a.1, a.0) < (b.1, b.0))
}

fn close(a: (usize, usize, f64), b: (usize, usize, f64), d: usize) -> bool {
    let (dx, dy) = (a.0 as f64 - b.0 as f64, a.1 as f64 - b.1 as f64);
    (dx * dx + dy * dy).sqrt() <= d as f64
}

/// The greedy result is the only set where every kept candidate has no
/// earlier kept candidate within `d` and every dropped one has.
fn check_greedy(map: &Map, t: f64, d: usize) {
    let peaks = find_peaks(map, &params(d, t));
    let candidates: Vec<(usize, usize, f64)> = map
        .indexed_iter()
        .filter(|((y, x), _)| is_candidate(map, *x, *y, t, d))
        .map(|((y, x), &v)| (x, y, v))
        .collect();
    for p in &peaks {
        assert!(candidates.contains(p), "{p:?} is not a window maximum");
    }
    for c in &candidates {
        let blocked = peaks.iter().any(|p| before(*p, *c) && close(*p, *c, d));
        assert_eq!(peaks.contains(c), !blocked, "candidate {c:?}");
    }
    for w in peaks.windows(2) {
        assert!(!before(w[1], w[0]), "not sorted by score");
    }
}

#[test]
fn spec_examples() {
    let mut map = Map::zeros((12, 12));
    map[[5, 5]] = 0.9;
    assert_eq!(find_peaks(&map, &PostprocParams::default()), vec![(5, 5, 0.9)]);
    assert!(find_peaks(&Map::zeros((12, 12)), &PostprocParams::default()).is_empty());

    let mut map = Map::zeros((20, 20));
    map[[10, 5]] = 0.9;
    map[[10, 8]] = 0.9;
    let peaks = find_peaks(&map, &PostprocParams::default());
    assert_eq!(peaks.len(), 1);
    check_greedy(&map, 0.5, 6);
}

#[test]
fn both_maps_zero_gives_no_detections() {
    let maps = [Map::zeros((16, 16)), Map::zeros((16, 16))];
    assert!(detect_from_maps(&maps, &PostprocParams::default()).is_empty());
}

#[test]
fn single_blob_is_one_positive_detection() {
    let blob = gaussian_blobs(&[(20.0, 12.0)], 2.0, 0.95, 32, 40);
    let maps = [Map::zeros((32, 40)), blob];
    let dets = detect_from_maps(&maps, &PostprocParams::default());
    assert_eq!(dets.len(), 1);
    assert_eq!((dets[0].x, dets[0].y, dets[0].label), (20, 12, CellClass::Tumor));
}

#[test]
fn classes_are_independent_unless_exclusive() {
    let blob = gaussian_blobs(&[(10.0, 10.0)], 2.0, 0.9, 24, 24);
    let weaker = blob.mapv(|v| v * 0.9);
    let maps = [weaker, blob];
    assert_eq!(detect_from_maps(&maps, &PostprocParams::default()).len(), 2);
    let exclusive = PostprocParams {
        class_exclusive: true,
        ..Default::default()
    };
    let dets = detect_from_maps(&maps, &exclusive);
    assert_eq!(dets.len(), 1);
    assert_eq!(dets[0].label, CellClass::Tumor);
}

#[test]
fn logit_and_probability_paths_agree() {
    let mut r = rng(20);
    for _ in 0..20 {
        let logits = [random_map(&mut r, 24, 24, -6.0, 6.0), random_map(&mut r, 24, 24, -6.0, 6.0)];
        let probs = logits.clone().map(|m| m.mapv(|z| 1.0 / (1.0 + (-z).exp())));
        let p = PostprocParams::default();
        let a = detect_from_logits(&logits, &p);
        let b = detect_from_maps(&probs, &p);
        assert_eq!(a.len(), b.len());
        for (u, v) in a.iter().zip(&b) {
            assert_eq!((u.x, u.y, u.label), (v.x, v.y, v.label));
            assert!((u.score - v.score).abs() < 1e-6);
        }
    }
}

#[test]
fn blobs_are_recovered_exactly() {
    let mut r = rng(21);
    for k in 1..=20 {
        let centers = separated_centers(&mut r, k, 13.0, 128, 128, 4.0);
        let map = gaussian_blobs(&centers, 2.0, 0.95, 128, 128);
        let peaks = find_peaks(&map, &PostprocParams::default());
        assert_eq!(peaks.len(), k);
        for c in &centers {
            assert!(peaks
                .iter()
                .any(|p| (p.0 as f64 - c.0).abs() <= 1.0 && (p.1 as f64 - c.1).abs() <= 1.0));
        }
    }
}

fn grid_map() -> impl Strategy<Value = Map> {
    prop::collection::vec(0u16..=256, 14 * 14).prop_map(|v| Map::from_shape_vec((14, 14), v.into_iter().map(|k| k as f64 / 256.0).collect()).unwrap())
}

proptest! {
    #[test]
    fn greedy_rule_holds(map in grid_map(), d in 1usize..5, t in 0.05f64..0.95) {
        check_greedy(&map, t, d);
    }

    #[test]
    fn peaks_are_separated(map in grid_map(), d in 1usize..6) {
        let peaks = find_peaks(&map, &params(d, 0.3));
        for (i, a) in peaks.iter().enumerate() {
            for b in &peaks[i + 1..] {
                prop_assert!(!close(*a, *b, d));
            }
        }
    }

    #[test]
    fn higher_threshold_never_adds_peaks(map in grid_map(), d in 1usize..5, lo in 0.05f64..0.9, gap in 0.0f64..0.5) {
        let hi = (lo + gap).min(0.99);
        prop_assert!(find_peaks(&map, &params(d, hi)).len() <= find_peaks(&map, &params(d, lo)).len());
    }

    #[test]
    fn peak_locations_are_shift_invariant(map in grid_map(), d in 1usize..5, k in 0u16..=64) {
        // Values are multiples of 1/256, so the shift is exact.
        let c = k as f64 / 256.0;
        let shifted = map.mapv(|v| v + c);
        let t = 0.5;
        let a: Vec<_> = find_peaks(&map, &params(d, t)).into_iter().map(|p| (p.0, p.1)).collect();
        let b: Vec<_> = cytocount::detect::find_peaks(&shifted, &PostprocParams { min_distance: d, prob_threshold: t + c, class_exclusive: false })
            .into_iter().map(|p| (p.0, p.1)).collect();
        prop_assert_eq!(a, b);
    }
}
