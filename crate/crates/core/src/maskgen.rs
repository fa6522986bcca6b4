//! Pseudo ground-truth masks synthesized from point annotations.
//!
//! * circle masks: a fixed-radius disk per cell, the main branch target;
//! * dynamic masks: a random convex polygon of random size per cell, redrawn
//!   every training iteration;
//! * prior masks: the binarized, closed positive-class output of the
//!   pre-trained model, marking tumor regions.

use std::f64::consts::TAU;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CellClass, PointAnnotation};
use crate::error::{Error, Result};
use crate::seed;

pub type BinaryMap = Array2<u8>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    Circle,
    Dynamic,
    Prior,
}

/// One binary map per cell class.
#[derive(Debug, Clone, PartialEq)]
pub struct ProximityMaskPair {
    pub maps: [BinaryMap; 2],
    pub kind: MaskKind,
}

impl ProximityMaskPair {
    fn empty(rows: usize, cols: usize, kind: MaskKind) -> Self {
        Self {
            maps: [Array2::zeros((rows, cols)), Array2::zeros((rows, cols))],
            kind,
        }
    }

    pub fn get(&self, class: CellClass) -> &BinaryMap {
        &self.maps[class.index()]
    }

    pub fn dim(&self) -> (usize, usize) {
        self.maps[0].dim()
    }

    pub fn to_f64(&self) -> [Array2<f64>; 2] {
        [self.maps[0].mapv(f64::from), self.maps[1].mapv(f64::from)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicMaskParams {
    pub vertex_range: [usize; 2],
    pub radius_range: [f64; 2],
    /// Relative radial jitter of each vertex, at most 0.2.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for DynamicMaskParams {
    fn default() -> Self {
        Self {
            vertex_range: [3, 8],
            radius_range: [5.0, 9.0],
            jitter: 0.2,
            seed: 0,
        }
    }
}

impl DynamicMaskParams {
    pub fn validate(&self) -> Result<()> {
        let [k_lo, k_hi] = self.vertex_range;
        let [r_lo, r_hi] = self.radius_range;
        if k_lo < 3 || k_hi < k_lo {
            return Err(Error::Config(format!("vertex range [{k_lo}, {k_hi}] needs 3 <= lo <= hi")));
        }
        if !(r_lo >= 1.0 && r_hi >= r_lo && r_hi.is_finite()) {
            return Err(Error::Config(format!("radius range [{r_lo}, {r_hi}] needs 1 <= lo <= hi")));
        }
        if !(0.0..=0.2).contains(&self.jitter) {
            return Err(Error::Config(format!("dynamic jitter {} outside [0, 0.2]", self.jitter)));
        }
        Ok(())
    }
}

/// Binary positive-tumor region derived from a prior model.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorMask {
    pub p1: BinaryMap,
}

/// Marks every pixel within Euclidean distance `radius` of an annotation in its
/// class map. Overlapping marks are OR-ed; classes are not mutually exclusive.
pub fn circle_mask(annotations: &[PointAnnotation], radius: f64, rows: usize, cols: usize) -> ProximityMaskPair {
    let mut mask = ProximityMaskPair::empty(rows, cols, MaskKind::Circle);
    let r2 = radius * radius;
    let reach = radius.floor() as i64;
    for a in annotations {
        let map = &mut mask.maps[a.label.index()];
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (y, x) = (a.y + dy, a.x + dx);
                if y < 0 || x < 0 || y >= rows as i64 || x >= cols as i64 {
                    continue;
                }
                if ((dx * dx + dy * dy) as f64) <= r2 {
                    map[[y as usize, x as usize]] = 1;
                }
            }
        }
    }
    mask
}

/// A convex polygon in pixel coordinates (`x` = column, `y` = row), counter-clockwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    pub vertices: Vec<(f64, f64)>,
}

impl ConvexPolygon {
    /// Inclusive point test: points on an edge count as inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let (ax, ay) = self.vertices[i];
            let (bx, by) = self.vertices[(i + 1) % n];
            (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= -1e-9
        })
    }

    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        self.vertices.iter().fold(
            (f64::MAX, f64::MAX, f64::MIN, f64::MIN),
            |(x0, y0, x1, y1), &(x, y)| (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        )
    }
}

/// Andrew's monotone chain; returns the hull counter-clockwise without collinear points.
fn convex_hull(mut points: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    points.sort_by(|a, b| a.partial_cmp(b).expect("finite vertices"));
    points.dedup();
    if points.len() < 3 {
        return points;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(points.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> = if pass == 0 {
            Box::new(points.iter())
        } else {
            Box::new(points.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// The random polygon drawn for annotation `index` at `iteration`.
///
/// `k ~ U{k_lo..=k_hi}` vertices at evenly spaced angles with a random phase,
/// radius `r ~ U[r_lo, r_hi]`, each vertex radius scaled by `1 + jitter * u`
/// with `u ~ U[-1, 1]`. The convex hull is returned; with evenly spaced angles
/// it always contains the center.
pub fn dynamic_polygon(a: &PointAnnotation, params: &DynamicMaskParams, iteration: u64, index: usize) -> ConvexPolygon {
    let mut rng = seed::rng(&[params.seed, iteration, index as u64]);
    let [k_lo, k_hi] = params.vertex_range;
    let [r_lo, r_hi] = params.radius_range;
    let k = rng.random_range(k_lo..=k_hi);
    let r = if r_hi > r_lo { rng.random_range(r_lo..=r_hi) } else { r_lo };
    let phase = rng.random_range(0.0..TAU);
    let points = (0..k)
        .map(|i| {
            let u: f64 = rng.random_range(-1.0..=1.0);
            let ri = r * (1.0 + params.jitter * u);
            let angle = phase + TAU * i as f64 / k as f64;
            (a.x as f64 + ri * angle.cos(), a.y as f64 + ri * angle.sin())
        })
        .collect();
    ConvexPolygon {
        vertices: convex_hull(points),
    }
}

/// Rasterizes one fresh random convex polygon per annotation. Deterministic in
/// `(annotations, params, iteration)`.
pub fn dynamic_mask(
    annotations: &[PointAnnotation],
    params: &DynamicMaskParams,
    iteration: u64,
    rows: usize,
    cols: usize,
) -> ProximityMaskPair {
    let mut mask = ProximityMaskPair::empty(rows, cols, MaskKind::Dynamic);
    for (index, a) in annotations.iter().enumerate() {
        let poly = dynamic_polygon(a, params, iteration, index);
        let map = &mut mask.maps[a.label.index()];
        let (x0, y0, x1, y1) = poly.bounding_box();
        let ys = (y0.floor().max(0.0) as usize)..=(y1.ceil().min(rows as f64 - 1.0).max(0.0) as usize);
        for y in ys {
            for x in (x0.floor().max(0.0) as usize)..=(x1.ceil().min(cols as f64 - 1.0).max(0.0) as usize) {
                if poly.contains(x as f64, y as f64) {
                    map[[y, x]] = 1;
                }
            }
        }
        // The annotation pixel always belongs to its own mark.
        map[[a.y as usize, a.x as usize]] = 1;
    }
    mask
}

fn disk_offsets(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Binary dilation with a disk; out-of-bounds neighbors are ignored.
pub fn dilate(map: &BinaryMap, radius: usize) -> BinaryMap {
    morph(map, radius, true)
}

/// Binary erosion with a disk; out-of-bounds neighbors are ignored.
pub fn erode(map: &BinaryMap, radius: usize) -> BinaryMap {
    morph(map, radius, false)
}

fn morph(map: &BinaryMap, radius: usize, dilation: bool) -> BinaryMap {
    if radius == 0 {
        return map.clone();
    }
    let (rows, cols) = map.dim();
    let offsets = disk_offsets(radius);
    let target = u8::from(dilation);
    Array2::from_shape_fn((rows, cols), |(y, x)| {
        let hit = offsets.iter().any(|&(dy, dx)| {
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            ny >= 0 && nx >= 0 && ny < rows as i64 && nx < cols as i64 && map[[ny as usize, nx as usize]] == target
        });
        if hit {
            target
        } else {
            1 - target
        }
    })
}

pub fn binarize(prob: &Array2<f64>, threshold: f64) -> BinaryMap {
    prob.mapv(|v| u8::from(v >= threshold))
}

/// Thresholds the positive-class probability map and closes it with a disk
/// so neighboring cell responses merge into one tumor region.
pub fn prior_mask(positive_prob: &Array2<f64>, threshold: f64, closing_radius: usize) -> Result<PriorMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("prior threshold {threshold} outside (0, 1)")));
    }
    let binary = binarize(positive_prob, threshold);
    Ok(PriorMask {
        p1: erode(&dilate(&binary, closing_radius), closing_radius),
    })
}
