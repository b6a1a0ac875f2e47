//! Minimal SVG charts for `report.csv` and `curves.csv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::CliError;

pub type Rows = Vec<BTreeMap<String, String>>;

pub fn read_csv(path: &Path) -> Result<Rows, CliError> {
    let bad = |e: csv::Error| CliError::Runtime(hetfuse::Error::Descriptor { path: path.to_path_buf(), reason: e.to_string() });
    let mut rd = csv::Reader::from_path(path).map_err(bad)?;
    let headers = rd.headers().map_err(bad)?.clone();
    rd.records()
        .map(|r| r.map(|r| headers.iter().zip(r.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect()).map_err(bad))
        .collect()
}

fn field<'a>(row: &'a BTreeMap<String, String>, k: &str) -> Result<&'a str, CliError> {
    row.get(k).map(String::as_str).ok_or_else(|| CliError::Usage(format!("csv lacks column `{k}`")))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const M: f64 = 56.0;

fn frame(title: &str, x_label: &str, y_label: &str, y_max: f64) -> String {
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = write!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
    let _ = write!(s, r#"<line x1="{M}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - M, W - M, H - M);
    let _ = write!(s, r#"<line x1="{M}" y1="{M}" x2="{M}" y2="{}" stroke="black"/>"#, H - M);
    for i in 0..=5 {
        let v = y_max * f64::from(i) / 5.0;
        let y = H - M - (H - 2.0 * M) * f64::from(i) / 5.0;
        let _ = write!(s, r##"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{v:.2}</text>"##, M, W - M, M - 4.0, y + 4.0);
    }
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, W / 2.0, H - 16.0);
    let _ = write!(s, r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{y_label}</text>"#, H / 2.0, H / 2.0);
    s
}

fn legend(s: &mut String, names: &[String]) {
    for (i, n) in names.iter().enumerate() {
        let y = M + 16.0 * i as f64;
        let _ = write!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{n}</text>"#, W - M - 110.0, y - 9.0, PALETTE[i % PALETTE.len()], W - M - 95.0, y);
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Seed-mean Dice per mode, grouped by training fraction.
pub fn report_svg(rows: &Rows) -> Result<String, CliError> {
    let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut modes: Vec<String> = Vec::new();
    for r in rows {
        let mode = field(r, "mode")?.to_string();
        let Ok(d) = field(r, "dice_mean")?.parse::<f64>() else { continue };
        if !modes.contains(&mode) {
            modes.push(mode.clone());
        }
        cells.entry((field(r, "pct")?.to_string(), mode)).or_default().push(d);
    }
    let mut pcts: Vec<String> = cells.keys().map(|(p, _)| p.clone()).collect();
    pcts.dedup();
    let mut s = frame("Test Dice by fusion mode", "training fraction", "mean Dice", 1.0);
    let group_w = (W - 2.0 * M) / pcts.len().max(1) as f64;
    let bar_w = group_w * 0.8 / modes.len().max(1) as f64;
    for (gi, p) in pcts.iter().enumerate() {
        let x0 = M + group_w * gi as f64 + group_w * 0.1;
        for (mi, m) in modes.iter().enumerate() {
            let Some(v) = cells.get(&(p.clone(), m.clone())) else { continue };
            let h = (H - 2.0 * M) * mean(v).clamp(0.0, 1.0);
            let x = x0 + bar_w * mi as f64;
            let _ = write!(s, r#"<rect x="{x}" y="{}" width="{}" height="{h}" fill="{}"/>"#, H - M - h, bar_w * 0.9, PALETTE[mi % PALETTE.len()]);
        }
        let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">{p}</text>"#, x0 + group_w * 0.4, H - M + 16.0);
    }
    legend(&mut s, &modes);
    s.push_str("</svg>\n");
    Ok(s)
}

/// AUPR against the number of cutout boxes, one line per mode.
pub fn curves_svg(rows: &Rows) -> Result<String, CliError> {
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        let n: f64 = field(r, "n_masks")?.parse().map_err(|_| CliError::Usage("non-numeric n_masks".into()))?;
        let a: f64 = field(r, "aupr")?.parse().map_err(|_| CliError::Usage("non-numeric aupr".into()))?;
        series.entry(field(r, "mode")?.to_string()).or_default().push((n, a));
    }
    let x_max = series.values().flatten().map(|p| p.0).fold(1.0, f64::max);
    let mut s = frame("AUPR under volume cutout", "cutout boxes", "pooled AUPR", 1.0);
    let px = |x: f64| M + (W - 2.0 * M) * x / x_max;
    let py = |y: f64| H - M - (H - 2.0 * M) * y.clamp(0.0, 1.0);
    let names: Vec<String> = series.keys().cloned().collect();
    for (i, pts) in series.values_mut().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let c = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = write!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#, path.join(" "));
        for &(x, y) in pts.iter() {
            let _ = write!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#, px(x), py(y));
        }
    }
    let mut ticks: Vec<f64> = series.values().flatten().map(|p| p.0).collect();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for t in ticks {
        let _ = write!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{t}</text>"#, px(t), H - M + 16.0);
    }
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    Ok(s)
}
