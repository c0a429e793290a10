//! CSV metric tables and SVG plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::DepthMetrics;
use crate::error::{Error, Result};

pub const REPORT_COLUMNS: [&str; 10] = [
    "mode", "pattern", "rmse", "rmse_log", "abs_rel", "sq_rel", "d1", "d2", "d3", "arte",
];

/// One line of the metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub mode: String,
    pub pattern: String,
    pub metrics: DepthMetrics,
    pub arte: Option<f64>,
}

/// A labelled accumulated-RMSE curve, indexed by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    pub values: Vec<f64>,
}

/// RMSE as a function of sparse-input density for one pattern family.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSeries {
    pub label: String,
    pub x_label: String,
    /// `(density, rmse)` points.
    pub points: Vec<(f64, f64)>,
}

fn plot_err<E: std::fmt::Debug>(path: &Path) -> impl Fn(E) -> Error + '_ {
    move |e| Error::Format {
        path: path.to_path_buf(),
        message: format!("plotting failed: {e:?}"),
    }
}

fn csv(rows: &[ReportRow]) -> String {
    let mut s = REPORT_COLUMNS.join(",");
    s.push('\n');
    for r in rows {
        let m = &r.metrics;
        let arte = r.arte.map(|a| format!("{a:.6}")).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.mode, r.pattern, m.rmse, m.rmse_log, m.abs_rel, m.sq_rel, m.d1, m.d2, m.d3, arte
        );
    }
    s
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

fn plot_lines(path: &Path, title: &str, x_desc: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let err = plot_err(path);
    let (x0, x1) = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(&err)?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc("RMSE [m]")
        .draw()
        .map_err(&err)?;
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(&err)?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 2, color.filled())))
            .map_err(&err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(&err)?;
    root.present().map_err(&err)?;
    Ok(())
}

/// Write `metrics.csv` plus, when given, `accumulated_rmse.svg` and
/// `sparsity_sweep.svg` into `out_dir`. Returns the written paths.
pub fn emit_report(out_dir: &Path, rows: &[ReportRow], curves: &[Curve], sweeps: &[SweepSeries]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let table = out_dir.join("metrics.csv");
    std::fs::write(&table, csv(rows)).map_err(|e| Error::io(&table, e))?;
    written.push(table);

    if !curves.is_empty() {
        let path = out_dir.join("accumulated_rmse.svg");
        let series: Vec<_> = curves
            .iter()
            .map(|c| {
                let pts = c.values.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)).collect();
                (c.label.clone(), pts)
            })
            .collect();
        plot_lines(&path, "Accumulated average RMSE", "frame", &series)?;
        written.push(path);
    }

    if !sweeps.is_empty() {
        let path = out_dir.join("sparsity_sweep.svg");
        let x_desc = sweeps[0].x_label.clone();
        let series: Vec<_> = sweeps.iter().map(|s| (s.label.clone(), s.points.clone())).collect();
        plot_lines(&path, "RMSE vs. sparse input density", &x_desc, &series)?;
        written.push(path);
    }
    Ok(written)
}
