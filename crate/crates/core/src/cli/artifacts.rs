//! Manifest, JSONL, CSV and SVG writers.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

impl InputDigest {
    pub fn of_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let shown = fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
        Ok(Self {
            path: shown.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

/// Everything needed to re-run a command: the argument vector, the fully
/// resolved configuration, and digests of every input file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name.
    pub argv: Vec<String>,
    pub run_id: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String], seed: Option<u64>, config: serde_json::Value, inputs: Vec<InputDigest>) -> Self {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(config.to_string().as_bytes());
        for i in &inputs {
            h.update(i.sha256.as_bytes());
        }
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            argv: argv.to_vec(),
            run_id: hex::encode(&h.finalize()[..8]),
            seed,
            config,
            inputs,
            artifacts: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> crate::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io.into(),
        other => crate::Error::Data(format!("csv: {other:?}")),
    }
}

/// Formats an optional metric for a CSV cell; missing values are empty.
pub fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Line chart with one `<polyline>` per series over a shared x axis. The y
/// axis spans `[0, 1]`; missing points are skipped.
pub fn line_chart_svg(title: &str, x_label: &str, xs: &[f64], series: &[(&str, Vec<Option<f64>>)]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 360.0, 60.0, 140.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |x: f64| left + (x - x0) / span * pw;
    let py = |y: f64| top + (1.0 - y.clamp(0.0, 1.0)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#, left + pw / 2.0, xml_escape(title));
    let _ = writeln!(s, r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, top + ph, left + pw, top + ph);
    let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#, top + ph);
    for i in 0..=4 {
        let y = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{y:.2}</text>"#,
            left - 6.0,
            py(y) + 3.0
        );
    }
    for &x in [x0, x1].iter() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{x}</text>"#,
            px(x),
            top + ph + 14.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 12.0,
        xml_escape(x_label)
    );
    for (i, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = xs
            .iter()
            .zip(ys)
            .filter_map(|(&x, y)| y.map(|y| format!("{:.2},{:.2}", px(x), py(y))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline data-metric="{}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            xml_escape(name),
            points.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, left + pw + 12.0, left + pw + 32.0);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            left + pw + 38.0,
            ly + 4.0,
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Tokens laid out left to right, each on a box whose darkness grows with
/// its weight. `None` shades every token the same.
pub fn heatmap_svg(tokens: &[String], weights: Option<&[f64]>, note: Option<&str>) -> String {
    let max = weights.map(|w| w.iter().copied().fold(0.0, f64::max)).unwrap_or(0.0);
    let widths: Vec<f64> = tokens.iter().map(|t| 16.0 + 8.0 * t.chars().count() as f64).collect();
    let total: f64 = widths.iter().sum::<f64>() + 20.0;
    let h = if note.is_some() { 80.0 } else { 60.0 };

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{h}" viewBox="0 0 {total} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{total}" height="{h}" fill="white"/>"#);
    let mut x = 10.0;
    for (i, (tok, wdt)) in tokens.iter().zip(&widths).enumerate() {
        let level = match weights {
            Some(w) if max > 0.0 => w[i] / max,
            _ => 0.5,
        };
        // White to dark blue.
        let shade = |full: f64| (255.0 - level * (255.0 - full)).round() as u8;
        let fill = format!("rgb({},{},{})", shade(8.0), shade(48.0), shade(107.0));
        let ink = if level > 0.55 { "white" } else { "black" };
        let weight_attr = weights.map(|w| format!(r#" data-weight="{}""#, w[i])).unwrap_or_default();
        let _ = writeln!(s, r#"<rect x="{x}" y="15" width="{wdt}" height="30" fill="{fill}" stroke="gray"{weight_attr}/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="35" font-family="monospace" font-size="13" text-anchor="middle" fill="{ink}">{}</text>"#,
            x + wdt / 2.0,
            xml_escape(tok)
        );
        x += wdt;
    }
    if let Some(n) = note {
        let _ = writeln!(s, r#"<text x="10" y="66" font-family="sans-serif" font-size="11" fill="firebrick">{}</text>"#, xml_escape(n));
    }
    s.push_str("</svg>\n");
    s
}
