//! Static SVG line charts.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::table::{ResultTable, Value};

#[derive(Debug, Error, PartialEq)]
pub enum PlotError {
    #[error("nothing to plot")]
    Empty,
    #[error("no column named {0:?}")]
    MissingColumn(String),
    #[error("column {column:?} holds a non-numeric or non-finite value in row {row}")]
    NotNumeric { column: String, row: usize },
    #[error("column {column:?} has nonpositive value {value} in row {row} on a log axis")]
    NonPositive { column: String, row: usize, value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub title: String,
    pub x: String,
    pub y: String,
    /// Column whose distinct values split the rows into series.
    pub group: Option<String>,
    pub log_x: bool,
    pub log_y: bool,
}

impl PlotSpec {
    pub fn new(title: &str, x: &str, y: &str) -> Self {
        Self {
            title: title.into(),
            x: x.into(),
            y: y.into(),
            group: None,
            log_x: false,
            log_y: false,
        }
    }

    pub fn group(mut self, column: &str) -> Self {
        self.group = Some(column.into());
        self
    }

    pub fn log_x(mut self) -> Self {
        self.log_x = true;
        self
    }

    pub fn log_y(mut self) -> Self {
        self.log_y = true;
        self
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

struct Axis {
    log: bool,
    lo: f64,
    hi: f64,
    ticks: Vec<(f64, String)>,
}

impl Axis {
    fn new(values: &[f64], log: bool) -> Self {
        let t: Vec<f64> = values.iter().map(|&v| if log { v.log10() } else { v }).collect();
        let (mut lo, mut hi) = t.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if log {
            lo = lo.floor();
            hi = hi.ceil().max(lo + 1.0);
            let step = ((hi - lo) / 8.0).ceil().max(1.0);
            let ticks = (0..)
                .map(|k| lo + step * k as f64)
                .take_while(|&d| d <= hi + 1e-9)
                .map(|d| (d, format!("1e{}", d as i64)))
                .collect();
            return Self { log, lo, hi, ticks };
        }
        if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
            let pad = if hi == 0.0 { 1.0 } else { 0.5 * hi.abs() };
            lo -= pad;
            hi += pad;
        }
        let raw = (hi - lo) / 6.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|&s| s >= raw).unwrap_or(10.0 * mag);
        lo = (lo / step).floor() * step;
        hi = (hi / step).ceil() * step;
        let decimals = (-step.log10().floor()).max(0.0) as usize;
        let n = ((hi - lo) / step).round() as usize;
        let ticks = (0..=n)
            .map(|k| {
                let v = lo + step * k as f64;
                (v, format!("{:.*}", decimals, if v.abs() < 0.5 * step { 0.0 } else { v }))
            })
            .collect();
        Self { log, lo, hi, ticks }
    }

    fn frac(&self, v: f64) -> f64 {
        let t = if self.log { v.log10() } else { v };
        (t - self.lo) / (self.hi - self.lo)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn label(v: &Value) -> String {
    match v {
        Value::Text(s) => s.clone(),
        Value::Int(i) => i.to_string(),
        Value::Num(x) => format!("{x}"),
    }
}

fn numbers(table: &ResultTable, column: &str, log: bool) -> Result<Vec<f64>, PlotError> {
    let col = table.column(column).ok_or_else(|| PlotError::MissingColumn(column.into()))?;
    col.iter()
        .enumerate()
        .map(|(row, v)| {
            let x = v
                .as_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| PlotError::NotNumeric { column: column.into(), row })?;
            if log && x <= 0.0 {
                return Err(PlotError::NonPositive { column: column.into(), row, value: x });
            }
            Ok(x)
        })
        .collect()
}

/// Renders the chart; identical inputs give identical bytes.
pub fn render_svg(table: &ResultTable, spec: &PlotSpec) -> Result<String, PlotError> {
    if table.is_empty() {
        return Err(PlotError::Empty);
    }
    let xs = numbers(table, &spec.x, spec.log_x)?;
    let ys = numbers(table, &spec.y, spec.log_y)?;
    let groups: Vec<String> = match &spec.group {
        Some(g) => table
            .column(g)
            .ok_or_else(|| PlotError::MissingColumn(g.clone()))?
            .into_iter()
            .map(label)
            .collect(),
        None => vec![spec.y.clone(); xs.len()],
    };
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for ((x, y), g) in xs.iter().zip(&ys).zip(&groups) {
        match series.iter_mut().find(|(name, _)| name == g) {
            Some((_, pts)) => pts.push((*x, *y)),
            None => series.push((g.clone(), vec![(*x, *y)])),
        }
    }

    let ax = Axis::new(&xs, spec.log_x);
    let ay = Axis::new(&ys, spec.log_y);
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let px = |v: f64| LEFT + pw * ax.frac(v);
    let py = |v: f64| TOP + ph * (1.0 - ay.frac(v));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(&spec.title)
    );
    for (v, text) in &ax.ticks {
        let x = LEFT + pw * (v - ax.lo) / (ax.hi - ax.lo);
        let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#e0e0e0"/>"##, TOP + ph);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{text}</text>"#, TOP + ph + 18.0);
    }
    for (v, text) in &ay.ticks {
        let y = TOP + ph * (1.0 - (v - ay.lo) / (ay.hi - ay.lo));
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e0e0e0"/>"##, LEFT + pw);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{text}</text>"#, LEFT - 6.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 16.0,
        escape(&spec.x)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(&spec.y)
    );
    for (k, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        for &(x, y) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = TOP + 10.0 + 18.0 * k as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, lx + 26.0, ly + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Renders and writes the chart; nothing is written on error.
pub fn emit_svg(table: &ResultTable, spec: &PlotSpec, path: &Path) -> Result<(), crate::CliError> {
    let svg = render_svg(table, spec).map_err(|e| crate::CliError::Plot(e.to_string()))?;
    std::fs::write(path, svg).map_err(|e| crate::CliError::output(path, e))
}
