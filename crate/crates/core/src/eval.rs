//! Detection-to-annotation matching, pooled and per-image F1, radius sweeps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CellClass, PointAnnotation};
use crate::detect::{Detection, PostprocParams};
use crate::error::{Error, Result};

pub const CLASSES: [CellClass; 2] = [CellClass::Other, CellClass::Tumor];
pub const DEFAULT_RADIUS: f64 = 8.0;
pub const DEFAULT_RADII: [f64; 7] = [4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub detection: usize,
    pub annotation: usize,
    pub distance: f64,
}

/// Matching result for one image; indices refer to the input slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub radius: f64,
    /// Indexed by class.
    pub counts: [Counts; 2],
    pub pairs: Vec<MatchedPair>,
}

fn distance(d: &Detection, g: &PointAnnotation) -> f64 {
    let dx = d.x as f64 - g.x as f64;
    let dy = d.y as f64 - g.y as f64;
    (dx * dx + dy * dy).sqrt()
}

/// Greedy one-to-one matching: same-class pairs closer than `r` (strictly) are
/// taken by ascending distance, ties broken by detection then annotation index.
pub fn match_detections(dets: &[Detection], gts: &[PointAnnotation], r: f64) -> MatchReport {
    let mut candidates = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            if d.label != g.label {
                continue;
            }
            let dist = distance(d, g);
            if dist < r {
                candidates.push(MatchedPair {
                    detection: i,
                    annotation: j,
                    distance: dist,
                });
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then(a.detection.cmp(&b.detection))
            .then(a.annotation.cmp(&b.annotation))
    });
    let mut det_used = vec![false; dets.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for c in candidates {
        if !det_used[c.detection] && !gt_used[c.annotation] {
            det_used[c.detection] = true;
            gt_used[c.annotation] = true;
            pairs.push(c);
        }
    }
    let mut counts = [Counts::default(); 2];
    for p in &pairs {
        counts[dets[p.detection].label.index()].tp += 1;
    }
    for (d, used) in dets.iter().zip(&det_used) {
        if !used {
            counts[d.label.index()].fp += 1;
        }
    }
    for (g, used) in gts.iter().zip(&gt_used) {
        if !used {
            counts[g.label.index()].fn_ += 1;
        }
    }
    MatchReport { radius: r, counts, pairs }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1. Ratios with a zero denominator are 0, except that
/// `tp = fp = fn = 0` scores a perfect 1 everywhere.
pub fn f1_from_counts(c: Counts) -> Scores {
    if c.tp + c.fp + c.fn_ == 0 {
        return Scores {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Scores { precision, recall, f1 }
}

pub fn f1_scores(report: &MatchReport) -> [Scores; 2] {
    report.counts.map(f1_from_counts)
}

fn common_radius(reports: &[MatchReport]) -> Result<()> {
    if let Some(first) = reports.first() {
        if let Some(other) = reports.iter().find(|r| r.radius != first.radius) {
            return Err(Error::Eval(format!(
                "reports mix radii {} and {}",
                first.radius, other.radius
            )));
        }
    }
    Ok(())
}

/// Pooled counts over all images, scored once per class.
pub fn total_f1(reports: &[MatchReport]) -> Result<[Scores; 2]> {
    common_radius(reports)?;
    let pooled = reports.iter().fold([Counts::default(); 2], |acc, r| {
        [acc[0].add(r.counts[0]), acc[1].add(r.counts[1])]
    });
    Ok(pooled.map(f1_from_counts))
}

/// Per-class mean of per-image F1.
pub fn mean_f1(reports: &[MatchReport]) -> Result<[f64; 2]> {
    if reports.is_empty() {
        return Err(Error::Eval("mean F1 of an empty report list".into()));
    }
    common_radius(reports)?;
    let n = reports.len() as f64;
    Ok(std::array::from_fn(|l| {
        reports.iter().map(|r| f1_from_counts(r.counts[l]).f1).sum::<f64>() / n
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub r: f64,
    pub class: usize,
    pub total_f1: f64,
    pub mean_f1: f64,
    #[serde(skip)]
    pub tp: usize,
}

/// Re-matches every image at each radius. `dets[i]` and `gts[i]` belong to
/// the same image.
pub fn radius_sweep(dets: &[Vec<Detection>], gts: &[Vec<PointAnnotation>], radii: &[f64]) -> Result<Vec<SweepRow>> {
    if dets.len() != gts.len() {
        return Err(Error::Eval(format!(
            "{} detection sets for {} annotated images",
            dets.len(),
            gts.len()
        )));
    }
    if radii.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Eval("radii must be strictly ascending".into()));
    }
    let mut rows = Vec::new();
    for &r in radii {
        let reports: Vec<MatchReport> = dets.iter().zip(gts).map(|(d, g)| match_detections(d, g, r)).collect();
        let total = total_f1(&reports)?;
        let mean = mean_f1(&reports)?;
        for class in CLASSES {
            let l = class.index();
            rows.push(SweepRow {
                r,
                class: l,
                total_f1: total[l].f1,
                mean_f1: mean[l],
                tp: reports.iter().map(|rep| rep.counts[l].tp).sum(),
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `r,class,total_f1,mean_f1`; an empty table is an error.
pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let rows: Vec<SweepRow> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Eval(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        return Err(Error::Eval(format!("{}: no sweep rows", path.display())));
    }
    if let Some(bad) = rows.iter().find(|r| r.class > 1) {
        return Err(Error::Eval(format!("{}: class {} is not 0 or 1", path.display(), bad.class)));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub image_id: String,
    #[serde(rename = "F1(P)")]
    pub f1_p: f64,
    #[serde(rename = "F1(N)")]
    pub f1_n: f64,
    pub counts_p: Counts,
    pub counts_n: Counts,
}

/// The JSON report: per-class pooled and mean F1 at one radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub r: f64,
    #[serde(rename = "totalF1(P)")]
    pub total_f1_p: f64,
    #[serde(rename = "totalF1(N)")]
    pub total_f1_n: f64,
    #[serde(rename = "meanF1(P)")]
    pub mean_f1_p: f64,
    #[serde(rename = "meanF1(N)")]
    pub mean_f1_n: f64,
    pub precision_p: f64,
    pub recall_p: f64,
    pub precision_n: f64,
    pub recall_n: f64,
    pub postprocess: PostprocParams,
    /// Images with no annotation and no detection of a class score 1 for it.
    pub empty_agreement_f1: f64,
    pub per_image: Vec<ImageScores>,
}

pub fn f1_report(ids: &[String], reports: &[MatchReport], postprocess: PostprocParams) -> Result<F1Report> {
    if ids.len() != reports.len() {
        return Err(Error::Eval("one id per report required".into()));
    }
    let total = total_f1(reports)?;
    let mean = mean_f1(reports)?;
    let (n, p) = (CellClass::Other.index(), CellClass::Tumor.index());
    Ok(F1Report {
        r: reports[0].radius,
        total_f1_p: total[p].f1,
        total_f1_n: total[n].f1,
        mean_f1_p: mean[p],
        mean_f1_n: mean[n],
        precision_p: total[p].precision,
        recall_p: total[p].recall,
        precision_n: total[n].precision,
        recall_n: total[n].recall,
        postprocess,
        empty_agreement_f1: 1.0,
        per_image: ids
            .iter()
            .zip(reports)
            .map(|(id, r)| ImageScores {
                image_id: id.clone(),
                f1_p: f1_from_counts(r.counts[p]).f1,
                f1_n: f1_from_counts(r.counts[n]).f1,
                counts_p: r.counts[p],
                counts_n: r.counts[n],
            })
            .collect(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}
