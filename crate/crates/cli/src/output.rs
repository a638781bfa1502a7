//! CSV, JSON and SVG artifacts.

use std::fmt::Write as _;
use std::path::Path;

use gkp_mbqc::gkp::SqueezingDb;
use gkp_mbqc::topo::{FailureRate, SweepPoint};
use serde::Serialize;

use crate::config::{ModeArg, RunConfig};
use crate::CliError;

pub const CSV_COLUMNS: [&str; 11] = [
    "l",
    "sigma",
    "squeezing_db",
    "d",
    "n_trials",
    "failures",
    "failure_rate",
    "ci_low",
    "ci_high",
    "mode",
    "analog",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CsvRow {
    pub l: f64,
    pub sigma: f64,
    pub squeezing_db: f64,
    pub d: usize,
    pub n_trials: u64,
    pub failures: u64,
    pub failure_rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub mode: ModeArg,
    pub analog: bool,
}

impl CsvRow {
    pub fn new(cfg: &RunConfig, point: &SweepPoint, rate: &FailureRate) -> Self {
        CsvRow {
            l: cfg.physics.loss,
            sigma: point.sigma,
            squeezing_db: SqueezingDb::from_sigma(point.sigma).db(),
            d: point.d,
            n_trials: rate.n_trials,
            failures: rate.failures,
            failure_rate: rate.rate,
            ci_low: rate.ci_low,
            ci_high: rate.ci_high,
            mode: cfg.sim.mode,
            analog: cfg.sim.analog,
        }
    }
}

fn io_err(path: &Path, e: impl ToString) -> CliError {
    CliError::Io(path.to_path_buf(), e.to_string())
}

pub fn write_csv(path: &Path, rows: &[CsvRow]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    w.write_record(CSV_COLUMNS).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// JSON document carrying the resolved config and code version next to the result.
#[derive(Debug, Serialize)]
pub struct Report<'a, T: Serialize> {
    pub version: &'static str,
    pub seed: u64,
    pub config: &'a RunConfig,
    pub result: T,
}

pub fn write_json<T: Serialize>(path: &Path, cfg: &RunConfig, result: T) -> Result<(), CliError> {
    let report = Report {
        version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")),
        seed: cfg.sim.seed,
        config: cfg,
        result,
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| io_err(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Failure rate against sigma, one polyline per distance, with a dB axis on top.
pub fn render_svg(rows: &[CsvRow], threshold_sigma: Option<f64>) -> String {
    let (w, h, m) = (640.0, 440.0, 60.0);
    let mut sig: Vec<f64> = rows.iter().map(|r| r.sigma).collect();
    sig.sort_by(f64::total_cmp);
    let (x0, x1) = match (sig.first(), sig.last()) {
        (Some(&a), Some(&b)) if b > a => (a, b),
        (Some(&a), _) => (a - 0.01, a + 0.01),
        _ => (0.0, 1.0),
    };
    let ymax = rows.iter().map(|r| r.ci_high).fold(0.05, f64::max).min(1.0);
    let px = |s: f64| m + (s - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |r: f64| h - m - r / ymax * (h - 2.0 * m);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{m} {t} V{b} H{r}" fill="none" stroke="black"/>"#,
        t = m,
        b = h - m,
        r = w - m
    );
    for i in 0..=4 {
        let s = x0 + (x1 - x0) * i as f64 / 4.0;
        let x = px(s);
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{}" stroke="black"/>"#,
            h - m,
            h - m + 5.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{x:.1}" y="{}" text-anchor="middle">{s:.3}</text>"#,
            h - m + 20.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{x:.1}" y="{}" text-anchor="middle" fill="gray">{:.1} dB</text>"#,
            m - 8.0,
            SqueezingDb::from_sigma(s).db()
        );
        let r = ymax * i as f64 / 4.0;
        let y = py(r);
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{y:.1}" x2="{m}" y2="{y:.1}" stroke="black"/>"#,
            m - 5.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{r:.2}</text>"#,
            m - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">standard deviation σ</text>"#,
        w / 2.0,
        h - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">logical failure rate</text>"#,
        h / 2.0,
        h / 2.0
    );

    let mut ds: Vec<usize> = rows.iter().map(|r| r.d).collect();
    ds.sort_unstable();
    ds.dedup();
    for (k, d) in ds.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let mut pts: Vec<&CsvRow> = rows.iter().filter(|r| r.d == *d).collect();
        pts.sort_by(|a, b| a.sigma.total_cmp(&b.sigma));
        let line: Vec<String> = pts
            .iter()
            .map(|r| format!("{:.1},{:.1}", px(r.sigma), py(r.failure_rate)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{colour}"/>"#,
            line.join(" ")
        );
        for r in &pts {
            let x = px(r.sigma);
            let _ = writeln!(
                svg,
                r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{colour}"/><circle cx="{x:.1}" cy="{:.1}" r="3" fill="{colour}"/>"#,
                py(r.ci_low),
                py(r.ci_high),
                py(r.failure_rate)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{colour}">d = {d}</text>"#,
            m + 10.0,
            m + 15.0 + 15.0 * k as f64
        );
    }
    if let Some(s) = threshold_sigma.filter(|s| (x0..=x1).contains(s)) {
        let x = px(s);
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.1}" y1="{m}" x2="{x:.1}" y2="{}" stroke="gray" stroke-dasharray="4 3"/>"#,
            h - m
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_svg(path: &Path, rows: &[CsvRow], threshold_sigma: Option<f64>) -> Result<(), CliError> {
    std::fs::write(path, render_svg(rows, threshold_sigma)).map_err(|e| io_err(path, e))
}
