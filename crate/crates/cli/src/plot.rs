//! Metrics CSV reading and SVG line charts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::CliError;

/// One chart per entry: output file, CSV column, y-axis title.
pub const CHARTS: [(&str, &str, &str); 3] = [
    ("eval_accuracy.svg", "eval_accuracy", "eval accuracy"),
    ("pseudo_label_accuracy.svg", "pseudo_label_accuracy", "pseudo-label accuracy"),
    ("budget_usage.svg", "cumulative_budget_ratio", "cumulative budget ratio"),
];

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Reads the step column and `columns` from a metrics CSV; blank cells are gaps.
pub fn read_columns(path: &Path, columns: &[&str]) -> Result<Vec<Vec<(f64, f64)>>, CliError> {
    let bad = |msg: String| CliError::Validation(format!("{}: {msg}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let index = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| bad(format!("missing column `{name}`")))
    };
    let step_idx = index("step")?;
    let idx: Vec<usize> = columns.iter().map(|c| index(c)).collect::<Result<_, _>>()?;
    let mut out = vec![Vec::new(); columns.len()];
    for (row_no, row) in reader.records().enumerate() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        let line = row_no + 2;
        let step: f64 = row
            .get(step_idx)
            .unwrap_or("")
            .parse()
            .map_err(|_| bad(format!("line {line}: `step` is not a number")))?;
        for (series, (&i, name)) in out.iter_mut().zip(idx.iter().zip(columns)) {
            let cell = row.get(i).unwrap_or("").trim();
            if cell.is_empty() {
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| bad(format!("line {line}: `{name}` value `{cell}` is not a number")))?;
            series.push((step, v));
        }
    }
    Ok(out)
}

/// Legend label: the strategy in a sibling `summary.json`, else the parent
/// directory name, else the file stem.
pub fn label_for(path: &Path) -> String {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty());
    if let Some(dir) = dir {
        if let Ok(text) = std::fs::read_to_string(dir.join("summary.json")) {
            if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
                if let (Some(s), Some(seed)) = (v["strategy"].as_str(), v["seed"].as_u64()) {
                    return format!("{s} (seed {seed})");
                }
            }
        }
        if let Some(name) = dir.file_name() {
            return name.to_string_lossy().into_owned();
        }
    }
    path.file_stem().map_or_else(|| "metrics".into(), |s| s.to_string_lossy().into_owned())
}

pub fn plot_files(files: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>, CliError> {
    if files.is_empty() {
        return Err(CliError::Validation("plot needs at least one metrics CSV".into()));
    }
    let columns: Vec<&str> = CHARTS.iter().map(|c| c.1).collect();
    let mut per_file = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    for f in files {
        per_file.push(read_columns(f, &columns)?);
        let base = label_for(f);
        let mut label = base.clone();
        let mut n = 2;
        while labels.contains(&label) {
            label = format!("{base} #{n}");
            n += 1;
        }
        labels.push(label);
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(e.into()))?;
    let mut written = Vec::new();
    for (c, (file, _, title)) in CHARTS.iter().enumerate() {
        let series: Vec<Series> = per_file
            .iter()
            .zip(&labels)
            .map(|(cols, label)| Series {
                label: label.clone(),
                points: cols[c].clone(),
            })
            .collect();
        let path = out.join(file);
        std::fs::write(&path, render_svg(title, &series)).map_err(|e| CliError::Runtime(e.into()))?;
        written.push(path);
    }
    Ok(written)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn render_svg(title: &str, series: &[Series]) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (64.0, 180.0, 36.0, 48.0);
    let pw = w - left - right;
    let ph = h - top - bottom;

    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let (mut x0, mut x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    y0 = y0.min(0.0);
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let yv = y0 + t * (y1 - y0);
        let xv = x0 + t * (x1 - x0);
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{y:.1}" x2="{x2}" y2="{y:.1}" stroke="#e0e0e0"/><text x="{tx}" y="{ty:.1}" text-anchor="end">{yv:.2}</text>"##,
            y = sy(yv),
            x2 = left + pw,
            tx = left - 6.0,
            ty = sy(yv) + 4.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{x:.1}" y="{y}" text-anchor="middle">{xv:.0}</text>"#,
            x = sx(xv),
            y = top + ph + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !s.points.is_empty() {
            let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
            let _ = writeln!(
                svg,
                r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                pts.join(" ")
            );
        }
        let ly = top + 12.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            svg,
            r#"<g class="legend-entry"><line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}">{}</text></g>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
