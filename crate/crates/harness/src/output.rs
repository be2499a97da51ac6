//! CSV tables and SVG line charts rendered from them.

use std::fmt::Write as _;
use std::path::Path;

use plotters::prelude::*;

use crate::error::{HarnessError, Result};

/// Columns written as integers; everything else uses 17 significant digits.
const INTEGER_COLUMNS: &[&str] = &["step", "depth", "mode", "layer"];

/// Numeric table with a fixed column order, stored row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len(), "row width must match header");
        self.rows.push(row);
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let ints: Vec<bool> = self
            .columns
            .iter()
            .map(|c| INTEGER_COLUMNS.contains(&c.as_str()))
            .collect();
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                if ints[i] {
                    write!(out, "{}", *v as i64).expect("string write");
                } else {
                    write!(out, "{v:.16e}").expect("string write");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| HarnessError::Config("empty csv".into()))?;
        let mut table = Table::new(header.split(','));
        for (n, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| HarnessError::Config(format!("csv line {}: {e}", n + 2)))?;
            if row.len() != table.columns.len() {
                return Err(HarnessError::Config(format!(
                    "csv line {}: {} fields, header has {}",
                    n + 2,
                    row.len(),
                    table.columns.len()
                )));
            }
            table.rows.push(row);
        }
        Ok(table)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| HarnessError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// Which columns of a CSV to draw and how.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartSpec {
    pub title: String,
    pub x: String,
    pub ys: Vec<String>,
    pub log_x: bool,
    pub log_y: bool,
}

impl ChartSpec {
    pub fn new(title: &str, x: &str, ys: impl IntoIterator<Item = String>) -> Self {
        Self {
            title: title.into(),
            x: x.into(),
            ys: ys.into_iter().collect(),
            log_x: false,
            log_y: false,
        }
    }

    pub fn log_x(mut self, on: bool) -> Self {
        self.log_x = on;
        self
    }

    pub fn log_y(mut self, on: bool) -> Self {
        self.log_y = on;
        self
    }
}

const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

fn transform(v: f64, log: bool) -> Option<f64> {
    if !v.is_finite() {
        return None;
    }
    if log {
        (v > 0.0).then(|| v.log10())
    } else {
        Some(v)
    }
}

/// Reads `csv` and renders `spec` to `svg`. Charts depend on nothing but the CSV.
pub fn render_chart(csv: &Path, svg: &Path, spec: &ChartSpec) -> Result<()> {
    let table = Table::read(csv)?;
    render_table(&table, svg, spec)
}

pub fn render_table(table: &Table, svg: &Path, spec: &ChartSpec) -> Result<()> {
    let chart_err = |reason: String| HarnessError::Chart {
        path: svg.display().to_string(),
        reason,
    };
    let xi = table
        .column_index(&spec.x)
        .ok_or_else(|| chart_err(format!("no column `{}`", spec.x)))?;
    let mut series = Vec::with_capacity(spec.ys.len());
    for y in &spec.ys {
        let yi = table
            .column_index(y)
            .ok_or_else(|| chart_err(format!("no column `{y}`")))?;
        let pts: Vec<(f64, f64)> = table
            .rows
            .iter()
            .filter_map(|r| Some((transform(r[xi], spec.log_x)?, transform(r[yi], spec.log_y)?)))
            .collect();
        series.push((y.clone(), pts));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for (x, y) in series.iter().flat_map(|(_, p)| p.iter()) {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if !x0.is_finite() {
        return Err(chart_err("no plottable points".into()));
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-12);
    let (y0, y1) = (y0 - pad, y1 + pad);

    let root = SVGBackend::new(svg, (800, 500)).into_drawing_area();
    let draw = |root: &DrawingArea<SVGBackend, plotters::coord::Shift>| -> std::result::Result<(), String> {
        root.fill(&WHITE).map_err(|e| e.to_string())?;
        let mut chart = ChartBuilder::on(root)
            .caption(&spec.title, ("sans-serif", 20))
            .margin(15)
            .x_label_area_size(40)
            .y_label_area_size(70)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(|e| e.to_string())?;
        let label = |name: &str, log: bool| if log { format!("log10 {name}") } else { name.to_string() };
        chart
            .configure_mesh()
            .x_desc(label(&spec.x, spec.log_x))
            .y_desc(if spec.log_y { "log10 value" } else { "value" })
            .draw()
            .map_err(|e| e.to_string())?;
        for (i, (name, pts)) in series.iter().enumerate() {
            let colour = PALETTE[i % PALETTE.len()];
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), colour.stroke_width(2)))
                .map_err(|e| e.to_string())?
                .label(name.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], colour));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| e.to_string())?;
        root.present().map_err(|e| e.to_string())
    };
    draw(&root).map_err(chart_err)
}
