//! Accuracy plots (SVG) and summary tables from scored results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::eval::{summarize, write_summary_csv, EvalRow, SummaryRow, Task};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no results to report")]
    Empty,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 44.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart with y fixed to [0, 1] and x ticks at the given values.
pub fn line_chart(title: &str, xlabel: &str, xticks: &[f64], series: &[Series]) -> String {
    let (x0, x1) = match (xticks.first(), xticks.last()) {
        (Some(a), Some(b)) if b > a => (*a, *b),
        (Some(a), _) => (a - 0.5, a + 0.5),
        _ => (0.0, 1.0),
    };
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - y) * ph;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, LEFT + pw / 2.0, esc(title));
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{y:.1}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            sy(y) + 4.0,
            py = sy(y)
        );
    }
    for &x in xticks {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x}</text>"#, sx(x), TOP + ph + 16.0);
    }
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 8.0, esc(xlabel));
    let _ = writeln!(s, r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">accuracy</text>"#, TOP + ph / 2.0);
    for (k, ser) in series.iter().enumerate() {
        let c = COLORS[k % COLORS.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, pts.join(" "));
        for &(x, y) in &ser.points {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#, sx(x), sy(y));
        }
        let ly = TOP + 10.0 + 16.0 * k as f64;
        let lx = LEFT + pw + 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            lx + 22.0,
            ly + 4.0,
            esc(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn markdown_table(rows: &[SummaryRow]) -> String {
    let mut s = String::from("| model | dim | instances | sigma | task | systems | excluded | accuracy |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {:.3} |",
            r.model,
            r.dim,
            r.instances,
            r.sigma,
            r.task.name(),
            r.systems,
            r.excluded,
            r.accuracy
        );
    }
    s
}

fn sigma_label(s: f64) -> String {
    format!("{s}").replace('.', "p")
}

/// Accuracy-vs-instances charts (one per task and noise level) and
/// accuracy-vs-noise charts (one per task and instance count), with one
/// series per (model, dim).
pub fn charts(summary: &[SummaryRow]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for task in [Task::Reconstruction, Task::Generalization] {
        let rows: Vec<&SummaryRow> = summary.iter().filter(|r| r.task == task).collect();
        if rows.is_empty() {
            continue;
        }
        let mut by_sigma: BTreeMap<u64, Vec<&SummaryRow>> = BTreeMap::new();
        let mut by_n: BTreeMap<usize, Vec<&SummaryRow>> = BTreeMap::new();
        for r in &rows {
            by_sigma.entry(r.sigma.to_bits()).or_default().push(r);
            by_n.entry(r.instances).or_default().push(r);
        }
        for (sig, rs) in by_sigma {
            let sig = f64::from_bits(sig);
            let mut xs: Vec<f64> = rs.iter().map(|r| r.instances as f64).collect();
            xs.sort_by(f64::total_cmp);
            xs.dedup();
            let series = group_series(&rs, |r| r.instances as f64);
            let title = format!("{} accuracy, sigma = {sig}", task.name());
            out.push((
                format!("accuracy_vs_instances_{}_sigma{}.svg", task.name(), sigma_label(sig)),
                line_chart(&title, "number of instances", &xs, &series),
            ));
        }
        for (n, rs) in by_n {
            let mut xs: Vec<f64> = rs.iter().map(|r| r.sigma).collect();
            xs.sort_by(f64::total_cmp);
            xs.dedup();
            let series = group_series(&rs, |r| r.sigma);
            let title = format!("{} accuracy, {n} instance(s)", task.name());
            out.push((format!("accuracy_vs_noise_{}_n{n}.svg", task.name()), line_chart(&title, "noise sigma", &xs, &series)));
        }
    }
    out
}

fn group_series(rows: &[&SummaryRow], x: impl Fn(&SummaryRow) -> f64) -> Vec<Series> {
    let mut groups: BTreeMap<(String, usize), Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.model.clone(), r.dim)).or_default().push((x(r), r.accuracy));
    }
    groups
        .into_iter()
        .map(|((model, dim), mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label: format!("{model} D={dim}"), points: pts }
        })
        .collect()
}

/// Writes `summary.csv`, `summary.md` and the SVG charts into `dir`;
/// returns the written paths.
pub fn write_report(rows: &[EvalRow], dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let summary = summarize(rows);
    if summary.is_empty() {
        return Err(ReportError::Empty);
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let p = dir.join("summary.csv");
    let mut buf = Vec::new();
    write_summary_csv(&mut buf, &summary)?;
    std::fs::write(&p, buf)?;
    written.push(p);
    let p = dir.join("summary.md");
    std::fs::write(&p, markdown_table(&summary))?;
    written.push(p);
    for (name, svg) in charts(&summary) {
        let p = dir.join(name);
        std::fs::write(&p, svg)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, n: usize, sigma: f64, pass: bool) -> EvalRow {
        EvalRow {
            model: model.into(),
            id: 0,
            dim: 2,
            instances: n,
            sigma,
            task: Task::Reconstruction,
            r2: Some(0.5),
            pass,
            excluded: false,
            reason: None,
        }
    }

    #[test]
    fn empty_is_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(write_report(&[], dir.path()), Err(ReportError::Empty)));
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn deterministic_bytes() {
        let rows: Vec<EvalRow> =
            (1..=4).flat_map(|n| [0.0, 0.05].map(|s| row("mean", n, s, n > 2))).chain([row("stlsq", 1, 0.0, true)]).collect();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let pa = write_report(&rows, a.path()).unwrap();
        let pb = write_report(&rows, b.path()).unwrap();
        assert_eq!(pa.len(), pb.len());
        assert!(pa.iter().any(|p| p.ends_with("accuracy_vs_instances_reconstruction_sigma0.svg")));
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        let md = std::fs::read_to_string(a.path().join("summary.md")).unwrap();
        assert!(md.contains("| mean | 2 | 3 | 0 | reconstruction | 1 | 0 | 1.000 |"));
    }
}
