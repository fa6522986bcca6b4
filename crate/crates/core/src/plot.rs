//! Two-panel radius-sweep figure: total F1 and mean F1 against `r`.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::eval::SweepRow;

/// One labelled sweep, typically one ablation tier.
#[derive(Debug, Clone)]
pub struct SweepSeries {
    pub label: String,
    pub rows: Vec<SweepRow>,
}

const CLASS_TAGS: [&str; 2] = ["N", "P"];

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

/// Writes an SVG with a total-F1 panel and a mean-F1 panel. Every series
/// contributes one line per class present in its rows.
pub fn plot_sweeps(series: &[SweepSeries], out: &Path) -> Result<()> {
    if series.is_empty() || series.iter().any(|s| s.rows.is_empty()) {
        return Err(Error::Eval("nothing to plot: empty sweep".into()));
    }
    match out.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("svg") => {}
        _ => {
            return Err(Error::Config(format!(
                "{}: only .svg output is supported",
                out.display()
            )))
        }
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let radii = series.iter().flat_map(|s| s.rows.iter().map(|r| r.r));
    let (r_min, r_max) = radii.fold((f64::MAX, f64::MIN), |(lo, hi), r| (lo.min(r), hi.max(r)));
    let (r_min, r_max) = if r_max > r_min { (r_min, r_max) } else { (r_min - 1.0, r_max + 1.0) };

    let root = SVGBackend::new(out, (1100, 450)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let panels = root.split_evenly((1, 2));
    let metrics: [(&str, fn(&SweepRow) -> f64); 2] = [("total F1", |r| r.total_f1), ("mean F1", |r| r.mean_f1)];
    for (area, (name, metric)) in panels.iter().zip(metrics) {
        let mut chart = ChartBuilder::on(area)
            .caption(format!("{name} vs radius r"), ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(r_min..r_max, 0.0..1.0)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("r (pixels)")
            .y_desc(name)
            .draw()
            .map_err(plot_err)?;
        let mut color_index = 0;
        for s in series {
            for class in [1usize, 0] {
                let mut points: Vec<(f64, f64)> = s.rows.iter().filter(|r| r.class == class).map(|r| (r.r, metric(r))).collect();
                if points.is_empty() {
                    continue;
                }
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                let color = Palette99::pick(color_index).to_rgba();
                color_index += 1;
                chart
                    .draw_series(LineSeries::new(points, color.stroke_width(2)))
                    .map_err(plot_err)?
                    .label(format!("{} {}", s.label, CLASS_TAGS[class]))
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
            }
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .position(SeriesLabelPosition::LowerRight)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}
