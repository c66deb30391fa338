//! CSV tables and small hand-rolled SVG plots for evaluation artifacts.

use crate::metrics::GeometryReport;
use crate::train::{EvalReport, LambdaSweepReport, MatrixReport, TeacherSweepReport};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> io::Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)
}

pub fn write_matrix_csv(path: &Path, report: &MatrixReport) -> io::Result<()> {
    let header =
        ["seed", "system", "dev_bleu", "dev_rouge", "dev_chrf", "test_bleu", "test_rouge", "test_chrf"];
    let mut rows = Vec::new();
    for seed in &report.per_seed {
        for r in &seed.rows {
            rows.push(vec![
                seed.seed.to_string(),
                r.system.clone(),
                format!("{:.4}", r.dev_bleu),
                format!("{:.4}", r.dev_rouge),
                format!("{:.4}", r.dev_chrf),
                format!("{:.4}", r.test_bleu),
                format!("{:.4}", r.test_rouge),
                format!("{:.4}", r.test_chrf),
            ]);
        }
    }
    for r in &report.mean {
        rows.push(vec![
            "mean".into(),
            r.system.clone(),
            format!("{:.4}", r.dev_bleu),
            format!("{:.4}", r.dev_rouge),
            format!("{:.4}", r.dev_chrf),
            format!("{:.4}", r.test_bleu),
            format!("{:.4}", r.test_rouge),
            format!("{:.4}", r.test_chrf),
        ]);
    }
    write_csv(path, &header, &rows)
}

pub fn write_lambda_csv(path: &Path, report: &LambdaSweepReport) -> io::Result<()> {
    let rows: Vec<Vec<String>> = report
        .points
        .iter()
        .map(|p| vec![p.label.clone(), format!("{:.4}", p.dev_bleu)])
        .collect();
    write_csv(path, &["lambda", "dev_bleu"], &rows)
}

pub fn write_teacher_csv(path: &Path, report: &TeacherSweepReport) -> io::Result<()> {
    let rows: Vec<Vec<String>> =
        report.points.iter().map(|(k, b)| vec![k.to_string(), format!("{:.4}", b)]).collect();
    write_csv(path, &["k", "dev_bleu"], &rows)
}

/// Bucket tables of one evaluation report.
pub fn write_bucket_csvs(dir: &Path, report: &EvalReport) -> io::Result<()> {
    let freq_rows: Vec<Vec<String>> =
        report.freq_f1.iter().map(|(b, v)| vec![b.clone(), format!("{:.6}", v)]).collect();
    write_csv(&dir.join(format!("{}_freq_f1.csv", report.split)), &["bucket", "f1"], &freq_rows)?;
    let len_rows: Vec<Vec<String>> =
        report.length_bleu.iter().map(|(b, v)| vec![b.clone(), format!("{:.4}", v)]).collect();
    write_csv(&dir.join(format!("{}_length_bleu.csv", report.split)), &["bucket", "bleu"], &len_rows)
}

struct SvgCanvas {
    body: String,
    width: f64,
    height: f64,
}

impl SvgCanvas {
    fn new(width: f64, height: f64) -> Self {
        SvgCanvas { body: String::new(), width, height }
    }

    fn text(&mut self, x: f64, y: f64, size: f64, s: &str) {
        let _ = write!(
            self.body,
            r#"<text x="{x:.1}" y="{y:.1}" font-size="{size}" font-family="sans-serif">{s}</text>"#
        );
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, color: &str, opacity: f64) {
        let _ = write!(
            self.body,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r}" fill="{color}" fill-opacity="{opacity:.2}"/>"#
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, color: &str, width: f64) {
        let _ = write!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{color}" stroke-width="{width}"/>"#
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: &str) {
        let mut s = String::new();
        for (x, y) in pts {
            let _ = write!(s, "{x:.2},{y:.2} ");
        }
        let _ = write!(
            self.body,
            r#"<polyline points="{s}" fill="none" stroke="{color}" stroke-width="2"/>"#
        );
    }

    fn finish(self) -> String {
        format!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" viewBox="0 0 {:.0} {:.0}"><rect width="100%" height="100%" fill="white"/>{}</svg>"#,
            self.width, self.height, self.width, self.height, self.body
        )
    }
}

/// Dev-BLEU vs λ curve; the dynamic point draws as a flat dashed reference.
pub fn write_lambda_svg(path: &Path, report: &LambdaSweepReport) -> io::Result<()> {
    let (w, h, margin) = (520.0, 320.0, 50.0);
    let mut svg = SvgCanvas::new(w, h);
    let static_pts: Vec<(f64, f64)> = report
        .points
        .iter()
        .filter_map(|p| p.lambda.map(|l| (l, p.dev_bleu)))
        .collect();
    if static_pts.is_empty() {
        return fs::write(path, svg.finish());
    }
    let ymin = report.points.iter().map(|p| p.dev_bleu).fold(f64::INFINITY, f64::min);
    let ymax = report.points.iter().map(|p| p.dev_bleu).fold(f64::NEG_INFINITY, f64::max);
    let pad = ((ymax - ymin) * 0.15).max(0.5);
    let (ylo, yhi) = (ymin - pad, ymax + pad);
    let sx = |l: f64| margin + l * (w - 2.0 * margin);
    let sy = |b: f64| h - margin - (b - ylo) / (yhi - ylo) * (h - 2.0 * margin);
    svg.line(margin, h - margin, w - margin, h - margin, "#333", 1.0);
    svg.line(margin, margin, margin, h - margin, "#333", 1.0);
    svg.text(w / 2.0 - 60.0, 20.0, 14.0, "dev BLEU vs mix-up ratio");
    svg.text(w / 2.0, h - 12.0, 12.0, "lambda");
    let pts: Vec<(f64, f64)> = static_pts.iter().map(|&(l, b)| (sx(l), sy(b))).collect();
    svg.polyline(&pts, "#1f6fb2");
    for (i, &(l, b)) in static_pts.iter().enumerate() {
        svg.circle(sx(l), sy(b), 4.0, "#1f6fb2", 1.0);
        svg.text(sx(l) - 12.0, sy(b) - 8.0, 10.0, &format!("{:.2}", static_pts[i].1));
    }
    if let Some(dynamic) = report.points.iter().find(|p| p.lambda.is_none()) {
        let y = sy(dynamic.dev_bleu);
        svg.line(margin, y, w - margin, y, "#c23b22", 1.5);
        svg.text(w - margin - 70.0, y - 6.0, 11.0, &format!("dynamic {:.2}", dynamic.dev_bleu));
    }
    fs::write(path, svg.finish())
}

/// 2-D PCA scatter of the geometry families.
pub fn write_geometry_svg(path: &Path, geometry: &GeometryReport) -> io::Result<()> {
    let (w, h, margin) = (520.0, 420.0, 40.0);
    let mut svg = SvgCanvas::new(w, h);
    let colors = [("sign", "#1f6fb2"), ("gloss", "#c23b22"), ("mixed", "#2e8b57")];
    let mut all: Vec<(f64, f64)> = Vec::new();
    for (_, pts) in geometry.pca_points.iter() {
        all.extend(pts.iter().copied());
    }
    if all.is_empty() {
        return fs::write(path, svg.finish());
    }
    let (mut xmin, mut xmax, mut ymin, mut ymax) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &all {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    let xr = (xmax - xmin).max(1e-9);
    let yr = (ymax - ymin).max(1e-9);
    let sx = |x: f64| margin + (x - xmin) / xr * (w - 2.0 * margin);
    let sy = |y: f64| h - margin - (y - ymin) / yr * (h - 2.0 * margin);
    let mut legend_y = margin;
    for (family, pts) in geometry.pca_points.iter() {
        let color = colors
            .iter()
            .find(|(n, _)| n == family)
            .map(|(_, c)| *c)
            .unwrap_or("#555555");
        for &(x, y) in pts {
            svg.circle(sx(x), sy(y), 3.0, color, 0.55);
        }
        let entropy = geometry.kde_entropy.get(family).copied().unwrap_or(f64::NAN);
        svg.circle(w - margin - 120.0, legend_y, 4.0, color, 1.0);
        svg.text(
            w - margin - 110.0,
            legend_y + 4.0,
            11.0,
            &format!("{family} (H={entropy:.2})"),
        );
        legend_y += 16.0;
    }
    svg.text(margin, 20.0, 14.0, "sentence-mean embeddings, 2-D PCA");
    fs::write(path, svg.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn csv_writer_emits_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_csv(&path, &["a", "b"], &[vec!["1".into(), "2".into()]]).unwrap();
        let got = fs::read_to_string(&path).unwrap();
        assert_eq!(got, "a,b\n1,2\n");
    }

    #[test]
    fn geometry_svg_is_valid_enough() {
        let mut pca_points = BTreeMap::new();
        pca_points.insert("sign".to_string(), vec![(0.0, 0.0), (1.0, 1.0), (0.5, -0.2)]);
        pca_points.insert("gloss".to_string(), vec![(2.0, 0.1), (1.5, 0.9), (-0.5, 0.2)]);
        let mut kde_entropy = BTreeMap::new();
        kde_entropy.insert("sign".to_string(), 1.5);
        kde_entropy.insert("gloss".to_string(), 0.2);
        let g = GeometryReport {
            kde_entropy,
            mean_euclidean: 1.0,
            mean_cosine: 0.5,
            pairs: 3,
            dim: 8,
            pca_points,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.svg");
        write_geometry_svg(&path, &g).unwrap();
        let body = fs::read_to_string(&path).unwrap();
        assert!(body.starts_with("<svg"));
        assert!(body.ends_with("</svg>"));
        assert!(body.contains("circle"));
    }
}
