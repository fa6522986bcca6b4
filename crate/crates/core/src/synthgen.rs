//! Synthetic IHC-like images with point annotations.
//!
//! Positive-tumor cells are drawn as brown cytoplasm-stained blobs packed into
//! a few spatial clusters (touching and partially overlapping), while the
//! remaining cells are paler, bluish and scattered outside the clusters. Every
//! cell is an irregular star-shaped polygon with a soft edge and a nucleus, and
//! contributes one annotation at its center pixel.

use std::f64::consts::TAU;
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{quantize, save_dataset, CellClass, Dataset, ImageRecord, PointAnnotation, Split};
use crate::error::{Error, Result};
use crate::seed;

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
/// Within a cluster, centers may sit as close as this fraction of the summed radii.
const CLUSTER_PACKING: f64 = 0.7;
const EDGE_SOFTNESS: f64 = 1.5;

const BACKGROUND: [f32; 3] = [0.94, 0.90, 0.92];
const DAB_BROWN: [f32; 3] = [0.55, 0.33, 0.18];
const HEMATOXYLIN_BODY: [f32; 3] = [0.62, 0.58, 0.80];
const NUCLEUS: [f32; 3] = [0.30, 0.28, 0.55];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub rows: usize,
    pub cols: usize,
    pub n_clusters: usize,
    pub cells_per_cluster: [usize; 2],
    pub n_other: [usize; 2],
    pub cell_radius_range: [f64; 2],
    pub shape_jitter: f64,
    pub stain_intensity: f64,
    pub background_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            rows: 256,
            cols: 256,
            n_clusters: 3,
            cells_per_cluster: [8, 14],
            n_other: [20, 35],
            cell_radius_range: [5.0, 8.0],
            shape_jitter: 0.4,
            stain_intensity: 0.8,
            background_noise: 0.03,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let min_side = self.rows.min(self.cols);
        if min_side < crate::data::MIN_IMAGE_SIDE {
            return bad(format!("image {}x{} is below the minimum side", self.rows, self.cols));
        }
        let [r_lo, r_hi] = self.cell_radius_range;
        if !(r_lo >= 2.0 && r_hi >= r_lo && r_hi <= min_side as f64 / 8.0) {
            return bad(format!(
                "cell_radius_range [{r_lo}, {r_hi}] must satisfy 2 <= lo <= hi <= {}",
                min_side as f64 / 8.0
            ));
        }
        if !(0.0..=1.0).contains(&self.shape_jitter) {
            return bad(format!("shape_jitter {} outside [0, 1]", self.shape_jitter));
        }
        if !(self.stain_intensity > 0.0 && self.stain_intensity <= 1.0) {
            return bad(format!("stain_intensity {} outside (0, 1]", self.stain_intensity));
        }
        if !(self.background_noise >= 0.0 && self.background_noise.is_finite()) {
            return bad(format!("background_noise {} must be >= 0", self.background_noise));
        }
        for (name, [lo, hi]) in [("cells_per_cluster", self.cells_per_cluster), ("n_other", self.n_other)] {
            if lo > hi {
                return bad(format!("{name} range [{lo}, {hi}] is reversed"));
            }
        }
        Ok(())
    }

    /// Radius of the disk that holds one cluster's cell centers.
    pub fn cluster_radius(&self) -> f64 {
        self.rows.min(self.cols) as f64 / 8.0
    }
}

#[derive(Debug, Clone)]
struct Cell {
    cx: i64,
    cy: i64,
    radius: f64,
    /// Polygon vertices relative to the center, ordered by angle.
    vertices: Vec<(f64, f64)>,
    class: CellClass,
    color: [f32; 3],
    opacity: f32,
}

impl Cell {
    /// Distance from the center to the polygon boundary along `(dx, dy)`.
    fn boundary_distance(&self, dx: f64, dy: f64) -> f64 {
        let norm = (dx * dx + dy * dy).sqrt();
        if norm == 0.0 {
            return self.vertices.iter().map(|v| (v.0 * v.0 + v.1 * v.1).sqrt()).fold(f64::MAX, f64::min);
        }
        let (ux, uy) = (dx / norm, dy / norm);
        let k = self.vertices.len();
        let mut best = 0.0f64;
        for i in 0..k {
            let (ax, ay) = self.vertices[i];
            let (bx, by) = self.vertices[(i + 1) % k];
            let (ex, ey) = (bx - ax, by - ay);
            let denom = ux * ey - uy * ex;
            if denom.abs() < 1e-12 {
                continue;
            }
            let t = (ax * ey - ay * ex) / denom;
            let s = (ax * uy - ay * ux) / denom;
            if t > 0.0 && (-1e-9..=1.0 + 1e-9).contains(&s) {
                best = best.max(t);
            }
        }
        best
    }

    fn max_extent(&self) -> f64 {
        self.vertices.iter().map(|v| (v.0 * v.0 + v.1 * v.1).sqrt()).fold(0.0, f64::max)
    }
}

fn random_shape(rng: &mut ChaCha8Rng, radius: f64, jitter: f64) -> Vec<(f64, f64)> {
    let k = rng.random_range(5..=10usize);
    let phase = rng.random_range(0.0..TAU);
    (0..k)
        .map(|i| {
            let angle = phase + TAU * i as f64 / k as f64;
            // Radii shrink by at most half the jitter so the center stays well inside.
            let r = radius * (1.0 - 0.5 * jitter * rng.random::<f64>()) * (1.0 + 0.25 * jitter * rng.random::<f64>());
            (r * angle.cos(), r * angle.sin())
        })
        .collect()
}

struct Placer<'a> {
    spec: &'a SynthSpec,
    cells: Vec<Cell>,
    clusters: Vec<(f64, f64)>,
}

impl Placer<'_> {
    fn compatible(&self, cx: i64, cy: i64, radius: f64, class: CellClass) -> bool {
        if cx < 1 || cy < 1 || cx >= self.spec.cols as i64 - 1 || cy >= self.spec.rows as i64 - 1 {
            return false;
        }
        let rc = self.spec.cluster_radius();
        if class == CellClass::Other
            && self
                .clusters
                .iter()
                .any(|&(kx, ky)| dist(cx as f64, cy as f64, kx, ky) < rc + radius)
        {
            return false;
        }
        self.cells.iter().all(|c| {
            let d = dist(cx as f64, cy as f64, c.cx as f64, c.cy as f64);
            if class == CellClass::Tumor && c.class == CellClass::Tumor {
                d >= CLUSTER_PACKING * (radius + c.radius)
            } else {
                d >= radius + c.radius + 1.0
            }
        })
    }
}

fn dist(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
}

fn inclusive(rng: &mut ChaCha8Rng, [lo, hi]: [usize; 2]) -> usize {
    rng.random_range(lo..=hi)
}

fn lerp(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    std::array::from_fn(|c| a[c] + (b[c] - a[c]) * t)
}

/// Generates one image. Identical `(spec, seed)` pairs give bit-identical output.
pub fn generate_image(spec: &SynthSpec, seed: u64) -> Result<ImageRecord> {
    spec.validate()?;
    let mut rng = seed::rng(&[seed, 0x5EED]);
    let rc = spec.cluster_radius();
    let [r_lo, r_hi] = spec.cell_radius_range;
    let mut placer = Placer {
        spec,
        cells: Vec::new(),
        clusters: Vec::with_capacity(spec.n_clusters),
    };

    for _ in 0..spec.n_clusters {
        let kx = rng.random_range(0.5 * rc..spec.cols as f64 - 0.5 * rc);
        let ky = rng.random_range(0.5 * rc..spec.rows as f64 - 0.5 * rc);
        placer.clusters.push((kx, ky));
    }

    for k in 0..spec.n_clusters {
        let (kx, ky) = placer.clusters[k];
        let count = inclusive(&mut rng, spec.cells_per_cluster);
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let radius = rng.random_range(r_lo..=r_hi);
                let rho = rc * rng.random::<f64>().sqrt();
                let theta = rng.random_range(0.0..TAU);
                let cx = (kx + rho * theta.cos()).round() as i64;
                let cy = (ky + rho * theta.sin()).round() as i64;
                if dist(cx as f64, cy as f64, kx, ky) > rc || !placer.compatible(cx, cy, radius, CellClass::Tumor) {
                    continue;
                }
                let strength = (spec.stain_intensity * rng.random_range(0.5..=1.0)) as f32;
                let vertices = random_shape(&mut rng, radius, spec.shape_jitter);
                placer.cells.push(Cell {
                    cx,
                    cy,
                    radius,
                    vertices,
                    class: CellClass::Tumor,
                    color: DAB_BROWN,
                    opacity: 0.35 + 0.6 * strength,
                });
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::Infeasible(format!(
                    "could not place a tumor cell in cluster {k} after {MAX_PLACEMENT_ATTEMPTS} attempts"
                )));
            }
        }
    }

    let n_other = inclusive(&mut rng, spec.n_other);
    for i in 0..n_other {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let radius = rng.random_range(r_lo..=r_hi);
            let cx = rng.random_range(0..spec.cols as i64);
            let cy = rng.random_range(0..spec.rows as i64);
            if !placer.compatible(cx, cy, radius, CellClass::Other) {
                continue;
            }
            let tint = rng.random_range(0.0..0.3f32);
            let vertices = random_shape(&mut rng, radius, spec.shape_jitter);
            placer.cells.push(Cell {
                cx,
                cy,
                radius,
                vertices,
                class: CellClass::Other,
                color: lerp(HEMATOXYLIN_BODY, DAB_BROWN, tint),
                opacity: 0.55,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Infeasible(format!(
                "could not place other cell {i} after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )));
        }
    }

    let mut pixels = Array3::<f32>::zeros((3, spec.rows, spec.cols));
    for c in 0..3 {
        pixels.index_axis_mut(ndarray::Axis(0), c).fill(BACKGROUND[c]);
    }
    for cell in &placer.cells {
        render_cell(&mut pixels, cell);
    }
    if spec.background_noise > 0.0 {
        let noise = Normal::new(0.0, spec.background_noise).map_err(|e| Error::Config(e.to_string()))?;
        for v in pixels.iter_mut() {
            *v = (*v + noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
        }
    }

    let annotations = placer
        .cells
        .iter()
        .map(|c| PointAnnotation::new(c.cx, c.cy, c.class))
        .collect();
    ImageRecord::new(synth_id(seed), pixels, annotations)
}

fn smooth_alpha(inside: f64, softness: f64) -> f32 {
    (inside / softness + 0.5).clamp(0.0, 1.0) as f32
}

fn render_cell(pixels: &mut Array3<f32>, cell: &Cell) {
    let (_, rows, cols) = pixels.dim();
    let reach = (cell.max_extent() + EDGE_SOFTNESS + 1.0).ceil() as i64;
    let nucleus_radius = 0.4 * cell.radius;
    for y in (cell.cy - reach).max(0)..=(cell.cy + reach).min(rows as i64 - 1) {
        for x in (cell.cx - reach).max(0)..=(cell.cx + reach).min(cols as i64 - 1) {
            let (dx, dy) = ((x - cell.cx) as f64, (y - cell.cy) as f64);
            let d = (dx * dx + dy * dy).sqrt();
            let body = smooth_alpha(cell.boundary_distance(dx, dy) - d, EDGE_SOFTNESS);
            if body <= 0.0 {
                continue;
            }
            let nucleus = smooth_alpha(nucleus_radius - d, 1.0) * 0.6;
            let a_body = body * cell.opacity;
            for c in 0..3 {
                let px = &mut pixels[[c, y as usize, x as usize]];
                *px = *px * (1.0 - a_body) + cell.color[c] * a_body;
                *px = *px * (1.0 - nucleus) + NUCLEUS[c] * nucleus;
            }
        }
    }
}

pub fn synth_id(seed: u64) -> String {
    format!("synth_{seed:010}")
}

/// Writes `count` images in the dataset layout under `out` for the given split.
/// Image `i` uses seed `seed + i`. Returned pixels are 8-bit quantized, so they
/// equal what [`crate::data::load_dataset`] reads back.
pub fn generate_dataset(spec: &SynthSpec, count: usize, seed: u64, split: Split, out: &Path) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Config("image count must be at least 1".into()));
    }
    let mut records = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let mut record = generate_image(spec, seed + i)?;
        record.pixels.mapv_inplace(|v| quantize(v) as f32 / 255.0);
        records.push(record);
    }
    let dataset = Dataset::new(records, split)?;
    save_dataset(&dataset, out)?;
    Ok(dataset)
}

/// Mean of `R - B` over pixels, a simple proxy for brown (DAB) stain response.
pub fn brown_response(pixels: &Array3<f32>, y: usize, x: usize) -> f32 {
    pixels[[0, y, x]] - pixels[[2, y, x]]
}
