//! Probability maps to point detections by local-peak picking.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::data::CellClass;
use crate::error::{Error, Result};
use crate::losses::{Map, MapPair};
use crate::net::{sigmoid, Model, ProbabilityMapPair};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocParams {
    /// Peaks closer than or at this distance are suppressed.
    pub min_distance: usize,
    pub prob_threshold: f64,
    /// Keep a pixel only in the class whose probability is larger.
    pub class_exclusive: bool,
}

impl Default for PostprocParams {
    fn default() -> Self {
        Self {
            min_distance: 6,
            prob_threshold: 0.5,
            class_exclusive: false,
        }
    }
}

impl PostprocParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_distance == 0 {
            return Err(Error::Config("min_distance must be at least 1".into()));
        }
        if !(self.prob_threshold > 0.0 && self.prob_threshold < 1.0) {
            return Err(Error::Config(format!("prob_threshold {} outside (0, 1)", self.prob_threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: usize,
    pub y: usize,
    pub label: CellClass,
    pub score: f64,
}

pub type DetectionSet = Vec<Detection>;

/// `(x, y, score)` of every accepted peak, highest score first.
///
/// A candidate is a pixel at or above the threshold that beats every other
/// pixel in its `(2d+1)^2` window; equal values are won by the smallest
/// `(y, x)`. Candidates are then accepted greedily by descending score when
/// they lie farther than `d` from every accepted peak.
pub fn find_peaks(map: &Map, params: &PostprocParams) -> Vec<(usize, usize, f64)> {
    peaks_above(map, params.prob_threshold, params.min_distance)
}

fn peaks_above(map: &Map, threshold: f64, d: usize) -> Vec<(usize, usize, f64)> {
    let (rows, cols) = map.dim();
    let mut candidates = Vec::new();
    for y in 0..rows {
        for x in 0..cols {
            let v = map[[y, x]];
            if !(v >= threshold) {
                continue;
            }
            let mut is_max = true;
            'window: for yy in y.saturating_sub(d)..=(y + d).min(rows - 1) {
                for xx in x.saturating_sub(d)..=(x + d).min(cols - 1) {
                    let u = map[[yy, xx]];
                    if u > v || (u == v && (yy, xx) < (y, x)) {
                        is_max = false;
                        break 'window;
                    }
                }
            }
            if is_max {
                candidates.push((x, y, v));
            }
        }
    }
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.1, a.0).cmp(&(b.1, b.0))));
    let limit = (d * d) as i64;
    let mut accepted: Vec<(usize, usize, f64)> = Vec::new();
    for c in candidates {
        let far = accepted.iter().all(|a| {
            let (dx, dy) = (a.0 as i64 - c.0 as i64, a.1 as i64 - c.1 as i64);
            dx * dx + dy * dy > limit
        });
        if far {
            accepted.push(c);
        }
    }
    accepted
}

pub fn predict_maps(model: &Model, image: &Array3<f32>) -> Result<ProbabilityMapPair> {
    model.forward_main(image)
}

/// Peak picking on each class map independently.
pub fn detect_from_maps(maps: &MapPair, params: &PostprocParams) -> DetectionSet {
    detect_with(maps, params.prob_threshold, params, |v| v)
}

/// Same detections as [`detect_from_maps`] on `sigmoid(logits)`, computed on
/// the logits so saturated probabilities cannot tie.
pub fn detect_from_logits(logits: &MapPair, params: &PostprocParams) -> DetectionSet {
    let t = params.prob_threshold;
    detect_with(logits, (t / (1.0 - t)).ln(), params, |z| sigmoid(z as f32))
}

fn detect_with(maps: &MapPair, threshold: f64, params: &PostprocParams, score: impl Fn(f64) -> f64) -> DetectionSet {
    let mut out = Vec::new();
    for class in [CellClass::Other, CellClass::Tumor] {
        let l = class.index();
        let peaks = if params.class_exclusive {
            let own = &maps[l];
            let other = &maps[1 - l];
            // Ties go to the positive-tumor class.
            let keep_ties = class == CellClass::Tumor;
            let masked: Array2<f64> = Zip::from(own).and(other).map_collect(|&p, &q| {
                if p > q || (p == q && keep_ties) {
                    p
                } else {
                    f64::NEG_INFINITY
                }
            });
            peaks_above(&masked, threshold, params.min_distance)
        } else {
            peaks_above(&maps[l], threshold, params.min_distance)
        };
        out.extend(peaks.into_iter().map(|(x, y, v)| Detection {
            x,
            y,
            label: class,
            score: score(v),
        }));
    }
    out
}

pub fn detect_cells(model: &Model, image: &Array3<f32>, params: &PostprocParams) -> Result<DetectionSet> {
    params.validate()?;
    let logits = model.forward_main_logits(image)?;
    Ok(detect_from_logits(&logits, params))
}

/// Writes `image_id,x,y,label,score` rows.
pub fn write_detections_csv<'a>(path: &Path, rows: impl IntoIterator<Item = (&'a str, &'a [Detection])>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["image_id", "x", "y", "label", "score"])?;
    for (id, dets) in rows {
        for d in dets {
            w.write_record([
                id.to_string(),
                d.x.to_string(),
                d.y.to_string(),
                d.label.index().to_string(),
                d.score.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
