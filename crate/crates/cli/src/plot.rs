//! Static SVG figures.

use std::path::Path;

use dualtrack_core::geometry::Trajectory;
use dualtrack_core::metrics::Calibration;
use dualtrack_core::{Error, Result};
use plotters::prelude::*;

const PALETTE: [RGBColor; 6] = [BLACK, RGBColor(214, 39, 40), RGBColor(31, 119, 180), RGBColor(44, 160, 44), RGBColor(148, 103, 189), RGBColor(255, 127, 14)];

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn padded(lo: f64, hi: f64) -> std::ops::Range<f64> {
    let pad = ((hi - lo) * 0.05).max(0.5);
    lo - pad..hi + pad
}

/// Out-of-plane displacement against frame index, one curve per series.
pub fn out_of_plane_svg(path: &Path, series: &[(String, Vec<f64>)]) -> Result<()> {
    let n = series.iter().map(|(_, s)| s.len()).max().unwrap_or(1).max(2);
    let (lo, hi) = series
        .iter()
        .flat_map(|(_, s)| s.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Out-of-plane displacement", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0f64..(n - 1) as f64, padded(lo, hi))
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("frame")
        .y_desc("elevational displacement (mm)")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (k, (label, s)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        chart
            .draw_series(LineSeries::new(s.iter().enumerate().map(|(i, &v)| (i as f64, v)), color.stroke_width(2)))
            .map_err(|e| plot_err(path, e))?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Top image edge of every frame traced in 3D: the two corner paths plus
/// periodic rungs between them.
pub fn trajectory_svg(path: &Path, series: &[(String, Trajectory)], cal: &Calibration, width: usize) -> Result<()> {
    let edge = [cal.pixel_to_probe(0.0, 0.0), cal.pixel_to_probe((width - 1) as f64, 0.0)];
    let ribbons: Vec<[Vec<(f64, f64, f64)>; 2]> = series
        .iter()
        .map(|(_, t)| {
            edge.map(|c| {
                t.poses()
                    .iter()
                    .map(|p| {
                        let q = p.transform_point(&c);
                        (q.x, q.z, q.y)
                    })
                    .collect()
            })
        })
        .collect();
    let all = ribbons.iter().flat_map(|r| r.iter().flatten());
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &(x, y, z) in all {
        for (a, v) in [x, y, z].into_iter().enumerate() {
            lo[a] = lo[a].min(v);
            hi[a] = hi[a].max(v);
        }
    }
    let root = SVGBackend::new(path, (800, 640)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Probe trajectory", ("sans-serif", 20))
        .margin(12)
        .build_cartesian_3d(padded(lo[0], hi[0]), padded(lo[1], hi[1]), padded(lo[2], hi[2]))
        .map_err(|e| plot_err(path, e))?;
    chart.with_projection(|mut p| {
        p.yaw = 0.6;
        p.pitch = 0.4;
        p.scale = 0.8;
        p.into_matrix()
    });
    chart
        .configure_axes()
        .light_grid_style(BLACK.mix(0.1))
        .max_light_lines(3)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    for (k, ((label, _), ribbon)) in series.iter().zip(&ribbons).enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let step = (ribbon[0].len() / 16).max(1);
        let rungs = (0..ribbon[0].len())
            .step_by(step)
            .map(|i| PathElement::new(vec![ribbon[0][i], ribbon[1][i]], color.mix(0.6)));
        chart.draw_series(rungs).map_err(|e| plot_err(path, e))?;
        chart
            .draw_series(LineSeries::new(ribbon[1].iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(path, e))?;
        chart
            .draw_series(LineSeries::new(ribbon[0].iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_err(path, e))?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}
