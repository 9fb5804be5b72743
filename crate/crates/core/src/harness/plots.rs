//! Per-metric line charts across pairs and the averaged comparison table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{write_report_csv, MetricReport, METRIC_NAMES};

/// Per-pair reports of one fusion method.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodReports {
    pub label: String,
    pub rows: Vec<(String, MetricReport)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotOutputs {
    /// One SVG per metric, in metric order.
    pub charts: Vec<PathBuf>,
    pub summary_csv: PathBuf,
    pub summary_txt: PathBuf,
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];
const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 56.0;

/// Writes `<metric>.svg` for each metric plus `summary.csv` (one mean row
/// per method, then the mean over methods) and `summary.txt`.
pub fn emit_plots(reports: &[MethodReports], out: &Path) -> Result<PlotOutputs> {
    if reports.is_empty() || reports.iter().all(|m| m.rows.is_empty()) {
        return Err(Error::EmptyReport);
    }
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let mut ids: Vec<&str> = Vec::new();
    for m in reports {
        for (id, _) in &m.rows {
            if !ids.contains(&id.as_str()) {
                ids.push(id);
            }
        }
    }
    let mut charts = Vec::with_capacity(METRIC_NAMES.len());
    for (k, metric) in METRIC_NAMES.iter().enumerate() {
        let series: Vec<(&str, Vec<Option<f64>>)> = reports
            .iter()
            .map(|m| {
                let pts = ids
                    .iter()
                    .map(|id| m.rows.iter().find(|(i, _)| i == id).map(|(_, r)| r.values()[k]))
                    .collect();
                (m.label.as_str(), pts)
            })
            .collect();
        let path = out.join(format!("{metric}.svg"));
        fs::write(&path, line_chart(metric, &ids, &series))
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        charts.push(path);
    }

    let mut means = Vec::with_capacity(reports.len());
    for m in reports.iter().filter(|m| !m.rows.is_empty()) {
        let rs: Vec<MetricReport> = m.rows.iter().map(|(_, r)| *r).collect();
        means.push((m.label.clone(), MetricReport::mean(&rs)?));
    }
    let summary_csv = out.join("summary.csv");
    write_report_csv(&summary_csv, &means)?;
    let summary_txt = out.join("summary.txt");
    fs::write(&summary_txt, text_table(&means)).map_err(|e| Error::io(format!("writing {}", summary_txt.display()), e))?;
    Ok(PlotOutputs {
        charts,
        summary_csv,
        summary_txt,
    })
}

fn text_table(rows: &[(String, MetricReport)]) -> String {
    let w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<w$}", "method");
    for m in METRIC_NAMES {
        let _ = write!(s, " {:>9}", m.to_uppercase());
    }
    s.push('\n');
    for (label, r) in rows {
        let _ = write!(s, "{label:<w$}");
        for v in r.values() {
            let _ = write!(s, " {v:>9.4}");
        }
        s.push('\n');
    }
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn line_chart(title: &str, ids: &[&str], series: &[(&str, Vec<Option<f64>>)]) -> String {
    let vals = series.iter().flat_map(|(_, p)| p.iter().flatten().copied());
    let (mut lo, mut hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let x_of = |i: usize| MARGIN + plot_w * (i as f64 + 0.5) / ids.len().max(1) as f64;
    let y_of = |v: f64| MARGIN + plot_h * (hi - v) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(&title.to_uppercase())
    );
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for t in 0..=4 {
        let v = lo + (hi - lo) * t as f64 / 4.0;
        let y = y_of(v);
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN}" x2="{}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
            MARGIN + plot_w,
            MARGIN - 4.0,
            y + 4.0
        );
    }
    for (i, id) in ids.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="end" transform="rotate(-40 {:.1} {})">{}</text>"#,
            x_of(i),
            HEIGHT - MARGIN + 14.0,
            x_of(i),
            HEIGHT - MARGIN + 14.0,
            escape(id)
        );
    }
    for (k, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut path = String::new();
        let mut pen_down = false;
        for (i, p) in pts.iter().enumerate() {
            match p {
                Some(v) => {
                    let _ = write!(path, "{}{:.1},{:.1} ", if pen_down { 'L' } else { 'M' }, x_of(i), y_of(*v));
                    pen_down = true;
                }
                None => pen_down = false,
            }
        }
        let _ = writeln!(
            s,
            r#"<path class="series" data-label="{}" d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            escape(label),
            path.trim_end()
        );
        for (i, v) in pts.iter().enumerate().filter_map(|(i, p)| p.map(|v| (i, v))) {
            let _ = writeln!(
                s,
                r#"<circle class="point" cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                x_of(i),
                y_of(v)
            );
        }
        let ly = MARGIN + 14.0 * k as f64 + 8.0;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            MARGIN + plot_w + 6.0 - 50.0,
            ly - 8.0,
            MARGIN + plot_w + 20.0 - 50.0,
            ly + 1.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}
