//! Summary tables and SVG line plots derived from a run's CSV ledgers.
//! Plots are outputs only; nothing reads them back.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::Failure;

pub const SUMMARY_FILE: &str = "summary.csv";
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// A numeric CSV ledger; non-numeric ledgers are skipped by the report.
pub struct Ledger {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Ledger {
    pub fn read(path: &Path) -> Option<Ledger> {
        let mut r = csv::Reader::from_path(path).ok()?;
        let columns: Vec<String> = r.headers().ok()?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.ok()?;
            rows.push(rec.iter().map(|s| s.parse::<f64>().ok()).collect::<Option<Vec<_>>>()?);
        }
        let name = path.file_stem()?.to_string_lossy().into_owned();
        Some(Ledger { name, columns, rows })
    }

    fn column(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(move |r| r[k])
    }
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Writes `summary.csv` and one SVG per ledger; returns the files written
/// (relative to `dir`) and the summary as an aligned text table.
pub fn write_report(dir: &Path) -> Result<(Vec<String>, String), Failure> {
    let mut csvs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Failure::Usage(format!("cannot read run directory {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv") && p.file_name().is_some_and(|n| n != SUMMARY_FILE))
        .collect();
    csvs.sort();
    let ledgers: Vec<Ledger> = csvs.iter().filter_map(|p| Ledger::read(p)).filter(|l| !l.rows.is_empty()).collect();
    if ledgers.is_empty() {
        return Err(Failure::Domain(format!("no numeric CSV ledgers in {}", dir.display())));
    }

    let mut written = Vec::new();
    let mut w = csv::Writer::from_path(dir.join(SUMMARY_FILE)).map_err(csv_failure)?;
    w.write_record(["ledger", "column", "rows", "first", "last", "min", "max", "mean"]).map_err(csv_failure)?;
    let mut table = format!(
        "{:<24} {:<18} {:>6} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
        "ledger", "column", "rows", "first", "last", "min", "max", "mean"
    );
    for ledger in &ledgers {
        for (k, col) in ledger.columns.iter().enumerate() {
            let values: Vec<f64> = ledger.column(k).collect();
            let n = values.len();
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = values.iter().sum::<f64>() / n as f64;
            let stats = [values[0], values[n - 1], min, max, mean];
            let mut record = vec![ledger.name.clone(), col.clone(), n.to_string()];
            record.extend(stats.iter().map(|v| format!("{v:?}")));
            w.write_record(&record).map_err(csv_failure)?;
            let _ = write!(table, "{:<24} {:<18} {n:>6}", ledger.name, col);
            for v in stats {
                let _ = write!(table, " {v:>12.5e}");
            }
            table.push('\n');
        }
    }
    w.flush().map_err(|e| Failure::Domain(format!("io error: {e}")))?;
    written.push(SUMMARY_FILE.to_string());

    for ledger in &ledgers {
        if let Some((title, x_label, series)) = plot_series(ledger) {
            let name = format!("{}.svg", ledger.name);
            fs::write(dir.join(&name), line_plot(&title, &x_label, &series)).map_err(|e| Failure::Domain(format!("io error: {e}")))?;
            written.push(name);
        }
    }
    Ok((written, table))
}

fn csv_failure(e: csv::Error) -> Failure {
    Failure::Domain(format!("csv error: {e}"))
}

/// Ledgers with a `lambda` column become one `prior_mmd`-style curve per
/// λ against `step`; all others plot every column against the first.
pub fn plot_series(ledger: &Ledger) -> Option<(String, String, Vec<Series>)> {
    if ledger.columns.len() < 2 {
        return None;
    }
    let idx = |name: &str| ledger.columns.iter().position(|c| c == name);
    if let (Some(l), Some(x)) = (idx("lambda"), idx("step")) {
        let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        let y = (0..ledger.columns.len()).find(|&k| k != l && k != x)?;
        for row in &ledger.rows {
            groups.entry(format!("lambda={}", row[l])).or_default().push((row[x], row[y]));
        }
        let series = groups.into_iter().map(|(label, points)| Series { label, points }).collect();
        return Some((format!("{}: {}", ledger.name, ledger.columns[y]), "step".into(), series));
    }
    let series = (1..ledger.columns.len())
        .map(|k| Series {
            label: ledger.columns[k].clone(),
            points: ledger.rows.iter().map(|r| (r[0], r[k])).collect(),
        })
        .collect();
    Some((ledger.name.clone(), ledger.columns[0].clone(), series))
}

/// A self-contained SVG with axes, min/max tick labels and a legend.
/// Non-finite points are dropped.
pub fn line_plot(title: &str, x_label: &str, series: &[Series]) -> String {
    let finite = || series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        svg,
        r#"<polyline points="{left},{top} {left},{bottom} {right},{bottom}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(svg, r#"<text x="{left}" y="{}" text-anchor="middle">{}</text>"#, bottom + 16.0, tick(x0));
    let _ = writeln!(svg, r#"<text x="{right}" y="{}" text-anchor="middle">{}</text>"#, bottom + 16.0, tick(x1));
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, bottom + 32.0, escape(x_label));
    let _ = writeln!(svg, r#"<text x="{}" y="{bottom}" text-anchor="end">{}</text>"#, left - 4.0, tick(y0));
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 4.0, top + 4.0, tick(y1));
    for (k, s) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
            points.join(" ")
        );
        let ly = top + 14.0 * k as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            right - 110.0,
            right - 95.0,
            right - 90.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e6 {
        format!("{}", v as i64)
    } else {
        format!("{v:.3e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
