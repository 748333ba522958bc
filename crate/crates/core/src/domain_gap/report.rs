use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Direction, DistanceMatrix, DomainFeatureVector};
use crate::error::{Error, Result};

pub fn feature_csv_header() -> Vec<String> {
    let mut h = vec!["dataset".to_string(), "image".into(), "mean".into(), "std".into()];
    for d in Direction::ALL {
        let deg = d.degrees();
        h.extend([
            format!("asm_{deg}"),
            format!("homog_{deg}"),
            format!("contrast_{deg}"),
            format!("corr_{deg}"),
        ]);
    }
    h
}

/// Rows of `(dataset, image, features)`.
pub fn write_features_csv(rows: &[(String, String, DomainFeatureVector)], path: &Path) -> Result<()> {
    let to_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    };
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(feature_csv_header()).map_err(to_err)?;
    for (dataset, image, f) in rows {
        let mut rec = vec![dataset.clone(), image.clone()];
        rec.extend(f.values.iter().map(|v| format!("{v:.17e}")));
        w.write_record(rec).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainGapReport {
    pub levels: usize,
    pub distance: usize,
    pub matrix: DistanceMatrix,
    /// 2-D MDS coordinates, one per dataset.
    pub coordinates: Vec<Vec<f64>>,
    /// `(dataset, image)` pairs whose correlation feature used the sentinel.
    pub degenerate: Vec<(String, String)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Labelled 2-D scatter of dataset coordinates.
pub fn scatter_svg(labels: &[String], coords: &[Vec<f64>]) -> String {
    let (size, pad) = (480.0, 60.0);
    let xs: Vec<f64> = coords.iter().map(|c| c[0]).collect();
    let ys: Vec<f64> = coords.iter().map(|c| c.get(1).copied().unwrap_or(0.0)).collect();
    let span = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w = (hi - lo).max(1e-12);
        (lo - 0.1 * w, w * 1.2)
    };
    let (x0, xw) = span(&xs);
    let (y0, yw) = span(&ys);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{size}" height="{size}" fill="white"/>"#);
    let inner = size - 2.0 * pad;
    let _ = writeln!(
        svg,
        r#"<rect x="{pad}" y="{pad}" width="{inner}" height="{inner}" fill="none" stroke="grey"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">MDS 1</text>"#,
        size / 2.0,
        size - pad / 3.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 {} {})">MDS 2</text>"#,
        pad / 3.0,
        size / 2.0,
        pad / 3.0,
        size / 2.0
    );
    for (i, label) in labels.iter().enumerate() {
        let px = pad + (xs[i] - x0) / xw * inner;
        let py = size - pad - (ys[i] - y0) / yw * inner;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(svg, r#"<circle cx="{px:.2}" cy="{py:.2}" r="6" fill="{color}"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12">{}</text>"#,
            px + 9.0,
            py + 4.0,
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
