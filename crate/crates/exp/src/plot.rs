//! SVG line charts drawn from series CSVs (`round` column plus one column per line).

use std::path::Path;

use plotters::coord::ranged1d::{AsRangedCoord, ValueFormatter};
use plotters::prelude::*;

use crate::error::{ExpError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ChartData {
    pub rounds: Vec<f64>,
    pub series: Vec<(String, Vec<f64>)>,
}

impl ChartData {
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.get(0) != Some("round") || headers.len() < 2 {
            return Err(ExpError::Config(format!("{}: expected a 'round' column and at least one series", path.display())));
        }
        let mut rounds = Vec::new();
        let mut series: Vec<(String, Vec<f64>)> = headers.iter().skip(1).map(|h| (h.to_string(), Vec::new())).collect();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let parse = |i: usize| -> Result<f64> {
                record
                    .get(i)
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| ExpError::Config(format!("{}: bad value in row {}, column {i}", path.display(), line + 2)))
            };
            rounds.push(parse(0)?);
            for (i, (_, values)) in series.iter_mut().enumerate() {
                values.push(parse(i + 1)?);
            }
        }
        Ok(Self { rounds, series })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Linear,
    /// Spans at most [`LOG_DECADES`] decades below the largest value; smaller
    /// and non-positive values are drawn at the bottom edge.
    Log,
}

pub const LOG_DECADES: i32 = 30;

pub fn render_svg(data: &ChartData, path: &Path, title: &str, y_label: &str, scale: Scale) -> Result<()> {
    let values = data.series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    match scale {
        Scale::Linear => {
            let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            let (lo, hi) = padded(lo, hi);
            draw(data, path, title, y_label, lo..hi, |v| v)
        }
        Scale::Log => {
            let positive: Vec<f64> = values.filter(|&v| v > 0.0).collect();
            let floor = positive.iter().copied().fold(f64::INFINITY, f64::min);
            let top = positive.iter().copied().fold(0.0, f64::max);
            let (floor, top) = if floor.is_finite() { (floor, top) } else { (1e-12, 1.0) };
            // plotters stalls generating ticks over hundreds of decades
            let top = top.min(1e150);
            let floor = floor.max(top * 10f64.powi(-LOG_DECADES));
            let top = if top > floor { top } else { floor * 10.0 };
            draw(data, path, title, y_label, (floor..top).log_scale(), move |v| v.clamp(floor, top))
        }
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let span = (hi - lo).max(hi.abs() * 1e-9).max(1e-12);
    (lo - 0.05 * span, hi + 0.05 * span)
}

fn draw<Y>(data: &ChartData, path: &Path, title: &str, y_label: &str, y_range: Y, clamp: impl Fn(f64) -> f64) -> Result<()>
where
    Y: AsRangedCoord<Value = f64>,
    Y::CoordDescType: ValueFormatter<f64>,
{
    let plot_err = |e: &dyn std::fmt::Display| ExpError::Plot(format!("{}: {e}", path.display()));
    let root = SVGBackend::new(path, (960, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let x_max = data.rounds.last().copied().unwrap_or(1.0).max(1.0);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 24))
        .margin(16)
        .x_label_area_size(44)
        .y_label_area_size(84)
        .build_cartesian_2d(0.0..x_max, y_range)
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .x_desc("round")
        .y_desc(y_label)
        .draw()
        .map_err(|e| plot_err(&e))?;
    for (idx, (name, values)) in data.series.iter().enumerate() {
        let color = Palette99::pick(idx).to_rgba();
        let points = data.rounds.iter().zip(values).filter(|(_, v)| v.is_finite()).map(|(&x, &v)| (x, clamp(v)));
        chart
            .draw_series(LineSeries::new(points, color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .position(SeriesLabelPosition::UpperRight)
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

/// Re-reads `csv` and writes the chart next to it with an `.svg` extension.
pub fn chart_from_csv(csv: &Path, title: &str, y_label: &str, scale: Scale) -> Result<std::path::PathBuf> {
    let data = ChartData::from_csv(csv)?;
    let svg = csv.with_extension("svg");
    render_svg(&data, &svg, title, y_label, scale)?;
    Ok(svg)
}
