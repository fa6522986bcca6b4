//! Independent brute-force oracles shared by the integration suites.
#![allow(dead_code)]

use cytocount::data::{CellClass, PointAnnotation};
use cytocount::detect::Detection;
use cytocount::losses::{Map, MapPair};
use cytocount::maskgen::{dynamic_polygon, BinaryMap, ConvexPolygon, DynamicMaskParams};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Map {
    Map::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

pub fn random_binary(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Map {
    Map::from_shape_fn((rows, cols), |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
}

/// Double-loop binary cross-entropy with the same clamp as the library.
pub fn ce_oracle(p: &MapPair, g: &MapPair) -> f64 {
    let (rows, cols) = p[0].dim();
    let mut total = 0.0;
    for l in 0..2 {
        for i in 0..rows {
            for j in 0..cols {
                let pv = p[l][[i, j]].clamp(1e-7, 1.0 - 1e-7);
                let gv = g[l][[i, j]];
                total += -(gv * pv.ln() + (1.0 - gv) * (1.0 - pv).ln());
            }
        }
    }
    total / (2 * rows * cols) as f64
}

/// `1/2 * sum_l [1 - I / (|G| + |P| - I + eps)]`, with eps in the numerator as
/// well so an empty class scores 0.
pub fn iou_oracle(p: &MapPair, g: &MapPair) -> f64 {
    let eps = 1e-6;
    let mut total = 0.0;
    for l in 0..2 {
        let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
        for (a, b) in p[l].iter().zip(g[l].iter()) {
            inter += a * b;
            sp += a;
            sg += b;
        }
        total += 1.0 - (inter + eps) / (sg + sp - inter + eps);
    }
    total / 2.0
}

pub fn l1_oracle(a: &MapPair, b: &MapPair) -> f64 {
    let (rows, cols) = a[0].dim();
    let mut total = 0.0;
    for l in 0..2 {
        for i in 0..rows {
            for j in 0..cols {
                total += (a[l][[i, j]] - b[l][[i, j]]).abs();
            }
        }
    }
    total / (2 * rows * cols) as f64
}

pub fn prior_oracle(p: &Map, g: &Map) -> f64 {
    let (rows, cols) = p.dim();
    let mut total = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            total += (g[[i, j]] - p[[i, j]]).abs();
        }
    }
    total
}

/// Largest relative error between `analytic` and central differences of `f`
/// over every entry of `x`.
pub fn max_fd_error(x: &[Map], analytic: &[Map], h: f64, f: impl Fn(&[Map]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for (k, map) in x.iter().enumerate() {
        for idx in ndarray::indices(map.dim()) {
            let orig = map[idx];
            probe[k][idx] = orig + h;
            let up = f(&probe);
            probe[k][idx] = orig - h;
            let down = f(&probe);
            probe[k][idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[k][idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            worst = worst.max((fd - an).abs() / denom);
        }
    }
    worst
}

/// Full-grid disk membership per class.
pub fn circle_oracle(points: &[PointAnnotation], radius: f64, rows: usize, cols: usize) -> [BinaryMap; 2] {
    std::array::from_fn(|l| {
        Array2::from_shape_fn((rows, cols), |(y, x)| {
            let hit = points.iter().filter(|p| p.label.index() == l).any(|p| {
                let (dy, dx) = (y as f64 - p.y as f64, x as f64 - p.x as f64);
                dy * dy + dx * dx <= radius * radius
            });
            u8::from(hit)
        })
    })
}

/// Full-grid dynamic marks: each annotation covers its own pixel plus every
/// pixel inside its polygon.
pub fn dynamic_oracle(points: &[PointAnnotation], params: &DynamicMaskParams, iteration: u64, rows: usize, cols: usize) -> [BinaryMap; 2] {
    let polys: Vec<_> = points
        .iter()
        .enumerate()
        .map(|(i, a)| dynamic_polygon(a, params, iteration, i))
        .collect();
    std::array::from_fn(|l| {
        Array2::from_shape_fn((rows, cols), |(y, x)| {
            let hit = points.iter().zip(&polys).filter(|(a, _)| a.label.index() == l).any(|(a, poly)| {
                (a.x as usize == x && a.y as usize == y) || inside_polygon(poly, x as f64, y as f64)
            });
            u8::from(hit)
        })
    })
}

/// Point-in-convex-polygon by the sign of every edge cross product; points
/// on an edge count as inside.
pub fn inside_polygon(poly: &ConvexPolygon, x: f64, y: f64) -> bool {
    let v = &poly.vertices;
    if v.len() < 3 {
        return false;
    }
    let mut pos = true;
    let mut neg = true;
    for i in 0..v.len() {
        let (a, b) = (v[i], v[(i + 1) % v.len()]);
        let c = (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
        pos &= c >= -1e-9;
        neg &= c <= 1e-9;
    }
    pos || neg
}

/// 4-connected components of the ones in `map`.
pub fn count_components(map: &BinaryMap) -> usize {
    let (rows, cols) = map.dim();
    let mut seen = Array2::<bool>::from_elem((rows, cols), false);
    let mut count = 0;
    for start in ndarray::indices((rows, cols)) {
        if map[start] == 0 || seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some((y, x)) = stack.pop() {
            let around = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)];
            for (ny, nx) in around {
                if ny < rows && nx < cols && map[[ny, nx]] == 1 && !seen[[ny, nx]] {
                    seen[[ny, nx]] = true;
                    stack.push((ny, nx));
                }
            }
        }
    }
    count
}

/// Maximum one-to-one matching of same-class pairs closer than `r`, by
/// exhaustive search over subsets of annotations (bitmask DP).
pub fn max_matching(dets: &[Detection], gts: &[PointAnnotation], r: f64) -> [usize; 2] {
    assert!(gts.len() <= 16);
    std::array::from_fn(|l| {
        let ds: Vec<&Detection> = dets.iter().filter(|d| d.label.index() == l).collect();
        let gs: Vec<&PointAnnotation> = gts.iter().filter(|g| g.label.index() == l).collect();
        let close = |d: &Detection, g: &PointAnnotation| {
            let (dx, dy) = (d.x as f64 - g.x as f64, d.y as f64 - g.y as f64);
            (dx * dx + dy * dy).sqrt() < r
        };
        let states = 1usize << gs.len();
        // best[mask] = most matches using exactly the annotations in `mask`.
        let mut best = vec![None::<usize>; states];
        best[0] = Some(0);
        for d in &ds {
            let mut next = best.clone();
            for mask in 0..states {
                let Some(v) = best[mask] else { continue };
                for (j, g) in gs.iter().enumerate() {
                    if mask & (1 << j) == 0 && close(d, g) {
                        let m2 = mask | (1 << j);
                        next[m2] = Some(next[m2].map_or(v + 1, |w| w.max(v + 1)));
                    }
                }
            }
            best = next;
        }
        best.into_iter().flatten().max().unwrap_or(0)
    })
}

pub fn detection(x: usize, y: usize, label: CellClass) -> Detection {
    Detection {
        x,
        y,
        label,
        score: 0.9,
    }
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, rows: usize, cols: usize) -> Vec<PointAnnotation> {
    (0..n)
        .map(|_| {
            let label = if rng.random_bool(0.5) { CellClass::Tumor } else { CellClass::Other };
            PointAnnotation::new(rng.random_range(0..cols as i64), rng.random_range(0..rows as i64), label)
        })
        .collect()
}

/// Sum of isotropic Gaussian bumps of peak `amplitude`.
pub fn gaussian_blobs(centers: &[(f64, f64)], sigma: f64, amplitude: f64, rows: usize, cols: usize) -> Map {
    Map::from_shape_fn((rows, cols), |(y, x)| {
        centers
            .iter()
            .map(|&(cx, cy)| {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                amplitude * (-d2 / (2.0 * sigma * sigma)).exp()
            })
            .sum::<f64>()
            .min(0.999)
    })
}

/// `k` centers inside a margin with pairwise distance above `min_sep`.
pub fn separated_centers(rng: &mut ChaCha8Rng, k: usize, min_sep: f64, rows: usize, cols: usize, margin: f64) -> Vec<(f64, f64)> {
    for _ in 0..1000 {
        let mut out: Vec<(f64, f64)> = Vec::with_capacity(k);
        for _ in 0..k * 200 {
            if out.len() == k {
                break;
            }
            let c = (
                rng.random_range(margin..cols as f64 - margin),
                rng.random_range(margin..rows as f64 - margin),
            );
            if out.iter().all(|o| ((o.0 - c.0).powi(2) + (o.1 - c.1).powi(2)).sqrt() > min_sep) {
                out.push(c);
            }
        }
        if out.len() == k {
            return out;
        }
    }
    panic!("could not place {k} separated centers");
}
