//! Line charts rendered to SVG from the CSV files the harness writes.
//!
//! Every function takes CSV text and returns SVG text, so a figure can be
//! regenerated byte-for-byte from its CSV alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 78.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 36.0;
const MARGIN_BOTTOM: f64 = 52.0;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
    /// Dashed horizontal reference line.
    pub reference_y: Option<f64>,
}

impl Chart {
    fn new(title: &str, x_label: &str, y_label: &str, log_x: bool, log_y: bool) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            log_x,
            log_y,
            series: Vec::new(),
            reference_y: None,
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            let t = if log { v.log10() } else { v };
            lo = lo.min(t);
            hi = hi.max(t);
        }
        if !lo.is_finite() || !hi.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            let pad = if lo.abs() > 1e-12 { 0.1 * lo.abs() } else { 0.5 };
            lo -= pad;
            hi += pad;
        }
        Self { lo, hi, log }
    }

    fn frac(&self, v: f64) -> f64 {
        let t = if self.log { v.log10() } else { v };
        (t - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let (a, b) = (self.lo.floor() as i32, self.hi.ceil() as i32);
            let step = ((b - a) / 6).max(1);
            (a..=b)
                .step_by(step as usize)
                .map(|e| 10f64.powi(e))
                .filter(|v| (self.lo - 1e-9..=self.hi + 1e-9).contains(&v.log10()))
                .collect()
        } else {
            (0..=5)
                .map(|i| self.lo + (self.hi - self.lo) * i as f64 / 5.0)
                .collect()
        }
    }
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        format!("{}", (v * 1000.0).round() / 1000.0)
    }
}

/// Renders a chart. Non-finite points and, on log axes, non-positive points
/// are dropped.
pub fn render(chart: &Chart) -> String {
    let keep = |&(x, y): &(f64, f64)| {
        x.is_finite() && y.is_finite() && (!chart.log_x || x > 0.0) && (!chart.log_y || y > 0.0)
    };
    let series: Vec<(&str, Vec<(f64, f64)>)> = chart
        .series
        .iter()
        .map(|s| (s.label.as_str(), s.points.iter().copied().filter(keep).collect()))
        .collect();
    let all = || series.iter().flat_map(|(_, p)| p.iter().copied());
    let x_axis = Axis::fit(all().map(|p| p.0), chart.log_x);
    let reference = chart
        .reference_y
        .filter(|&r| r.is_finite() && (!chart.log_y || r > 0.0));
    let y_axis = Axis::fit(all().map(|p| p.1).chain(reference), chart.log_y);

    let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let px = |x: f64| MARGIN_LEFT + pw * x_axis.frac(x);
    let py = |y: f64| MARGIN_TOP + ph * (1.0 - y_axis.frac(y));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        MARGIN_LEFT + pw / 2.0,
        escape(&chart.title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for t in x_axis.ticks() {
        let x = px(t);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            MARGIN_TOP + ph,
            MARGIN_TOP + ph + 5.0,
            MARGIN_TOP + ph + 18.0,
            tick_label(t)
        );
    }
    for t in y_axis.ticks() {
        let y = py(t);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{MARGIN_LEFT}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            MARGIN_LEFT - 5.0,
            MARGIN_LEFT - 8.0,
            y + 4.0,
            tick_label(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + pw / 2.0,
        HEIGHT - 12.0,
        escape(&chart.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(16,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        MARGIN_TOP + ph / 2.0,
        escape(&chart.y_label)
    );
    if let Some(r) = reference {
        let y = py(r);
        let _ = writeln!(
            s,
            r#"<line x1="{MARGIN_LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="gray" stroke-dasharray="4,3"/>"#,
            MARGIN_LEFT + pw
        );
    }
    for (i, (label, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if points.len() > 1 {
            let path: Vec<String> = points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                path.join(" ")
            );
        }
        for &(x, y) in points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#,
                px(x),
                py(y)
            );
        }
        let ly = MARGIN_TOP + 10.0 + 15.0 * i as f64;
        let lx = MARGIN_LEFT + pw + 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 16.0,
            lx + 20.0,
            ly + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Parsed CSV with columns looked up by header name.
struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| Error::invalid(format!("CSV header: {e}")))?
            .iter()
            .map(str::to_owned)
            .collect();
        let rows = reader
            .records()
            .map(|r| {
                r.map(|r| r.iter().map(str::to_owned).collect())
                    .map_err(|e| Error::invalid(format!("CSV row: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { headers, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid(format!("CSV has no `{name}` column")))
    }

    fn num(row: &[String], idx: usize) -> f64 {
        row[idx].parse().unwrap_or(f64::NAN)
    }

    /// One series per distinct value of `key`, in first-appearance order.
    fn series_by(&self, key: &str, x: &str, y: &str) -> Result<Vec<Series>> {
        let (k, xi, yi) = (self.col(key)?, self.col(x)?, self.col(y)?);
        let mut order = Vec::new();
        let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for row in &self.rows {
            let entry = groups.entry(row[k].clone()).or_insert_with(|| {
                order.push(row[k].clone());
                Vec::new()
            });
            entry.push((Self::num(row, xi), Self::num(row, yi)));
        }
        Ok(order
            .into_iter()
            .map(|label| {
                let points = groups.remove(&label).unwrap_or_default();
                Series { label, points }
            })
            .collect())
    }
}

/// Pooled `vbar` against epoch, one line per run.
pub fn variance_trace(runs_csv: &str) -> Result<String> {
    let table = Table::parse(runs_csv)?;
    let mut chart = Chart::new("Averaged weight variance", "epoch", "vbar", false, true);
    chart.series = table.series_by("run_id", "epoch", "vbar")?;
    Ok(render(&chart))
}

/// Training loss against epoch, one line per run.
pub fn loss_trace(runs_csv: &str) -> Result<String> {
    let table = Table::parse(runs_csv)?;
    let mut chart = Chart::new("Training loss", "epoch", "train loss", false, true);
    chart.series = table.series_by("run_id", "epoch", "train_loss")?;
    Ok(render(&chart))
}

type Points = Vec<(f64, f64)>;

fn sweep_points(table: &Table, y: &str) -> Result<(Points, Points)> {
    let (s, yi) = (table.col("sigma0")?, table.col(y)?);
    let mut grid = Vec::new();
    let mut baseline = Vec::new();
    for row in &table.rows {
        match row[s].parse::<f64>() {
            Ok(sigma0) => grid.push((sigma0, Table::num(row, yi))),
            Err(_) => baseline.push((f64::NAN, Table::num(row, yi))),
        }
    }
    Ok((grid, baseline))
}

fn with_baseline(chart: &mut Chart, grid: Vec<(f64, f64)>, baseline: Vec<(f64, f64)>) {
    chart.series.push(Series {
        label: "gaussian".into(),
        points: grid,
    });
    if let Some(&(_, y)) = baseline.first() {
        chart.series.push(Series {
            label: "he_normal".into(),
            points: vec![],
        });
        chart.reference_y = Some(y);
    }
}

/// Mean final training loss against `sigma0`; a He-normal row, if present,
/// is drawn as a dashed reference level.
pub fn sweep_loss(sweep_csv: &str) -> Result<String> {
    let table = Table::parse(sweep_csv)?;
    let (grid, baseline) = sweep_points(&table, "final_loss_mean")?;
    let mut chart = Chart::new("Final training loss", "sigma0", "final loss (mean)", true, true);
    with_baseline(&mut chart, grid, baseline);
    Ok(render(&chart))
}

/// `vbar / sigma0^2` against `sigma0`, with the reference line at 1.
pub fn sweep_ratio(sweep_csv: &str) -> Result<String> {
    let table = Table::parse(sweep_csv)?;
    let (grid, _) = sweep_points(&table, "ratio")?;
    let mut chart = Chart::new(
        "Steady-state over initial variance",
        "sigma0",
        "vbar / sigma0^2",
        true,
        true,
    );
    chart.series.push(Series {
        label: "gaussian".into(),
        points: grid,
    });
    chart.reference_y = Some(1.0);
    Ok(render(&chart))
}

/// Bound and its two asymptotic terms against `sigma0^2`.
pub fn theory_bound(theory_csv: &str) -> Result<String> {
    let table = Table::parse(theory_csv)?;
    let kind = table.col("kind")?;
    let s = table.col("sigma0_sq")?;
    let mut chart = Chart::new("Loss bound", "sigma0^2", "per-parameter loss", true, false);
    for (label, column) in [
        ("bound", "rhs"),
        ("K1 vbar", "k1_vbar"),
        ("K2 log sigma0^2", "k2_log_sigma0_sq"),
    ] {
        let c = table.col(column)?;
        chart.series.push(Series {
            label: label.into(),
            points: table
                .rows
                .iter()
                .filter(|r| r[kind] == "grid")
                .map(|r| (Table::num(r, s), Table::num(r, c)))
                .collect(),
        });
    }
    let rhs = table.col("rhs")?;
    if let Some(opt) = table.rows.iter().find(|r| r[kind] == "optimum") {
        chart.series.push(Series {
            label: "optimum".into(),
            points: vec![(Table::num(opt, s), Table::num(opt, rhs))],
        });
    }
    Ok(render(&chart))
}

/// Ratio trajectory of the fixed-point `sigma0` search.
pub fn search_trajectory(search_csv: &str) -> Result<String> {
    let table = Table::parse(search_csv)?;
    let (it, r) = (table.col("iteration")?, table.col("ratio")?);
    let mut chart = Chart::new("sigma0 search", "iteration", "vbar / sigma0^2", false, true);
    chart.series.push(Series {
        label: "ratio".into(),
        points: table
            .rows
            .iter()
            .map(|row| (Table::num(row, it), Table::num(row, r)))
            .collect(),
    });
    chart.reference_y = Some(1.0);
    Ok(render(&chart))
}
