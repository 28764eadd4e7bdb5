//! CSV and SVG emitters. Every `write_*` goes through an atomic rename.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::eval::AblationRow;
use crate::fsio::write_atomic;
use crate::metrics::{MetricsReport, RadialSpectrum};

pub const METRICS_HEADER: &str = "image_id,method,noise_level,psnr_db,ssim,hfrr,wavelet_mae";
pub const SUMMARY_HEADER: &str = "method,images,psnr_db,ssim,hfrr,wavelet_mae,hfrr_cutoff";
pub const SPECTRUM_HEADER: &str = "label,rho,power";
pub const ABLATION_HEADER: &str =
    "variant,label,table,seed,steps,completed,seconds,psnr_db,ssim,hfrr,wavelet_mae";

fn csv_text(header: &str, rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let write = || -> csv::Result<()> {
        w.write_record(header.split(','))?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        Ok(())
    };
    write().expect("writing CSV to memory cannot fail");
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("fields are UTF-8")
}

pub fn metrics_csv(report: &MetricsReport) -> String {
    csv_text(
        METRICS_HEADER,
        report.rows.iter().map(|r| {
            vec![
                r.image_id.clone(),
                r.method.clone(),
                r.noise_level.clone(),
                r.psnr_db.to_string(),
                r.ssim.to_string(),
                r.hfrr.to_string(),
                r.wavelet_mae.to_string(),
            ]
        }),
    )
}

pub fn summary_csv(report: &MetricsReport) -> String {
    csv_text(
        SUMMARY_HEADER,
        report.summary().into_iter().map(|s| {
            vec![
                s.method,
                s.images.to_string(),
                s.psnr_db.to_string(),
                s.ssim.to_string(),
                s.hfrr.to_string(),
                s.wavelet_mae.to_string(),
                report.hfrr_cutoff.to_string(),
            ]
        }),
    )
}

pub fn spectrum_csv(series: &[(String, RadialSpectrum)]) -> String {
    csv_text(
        SPECTRUM_HEADER,
        series.iter().flat_map(|(label, s)| {
            s.rho
                .iter()
                .zip(&s.power)
                .map(move |(rho, p)| vec![label.clone(), rho.to_string(), p.to_string()])
        }),
    )
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    csv_text(
        ABLATION_HEADER,
        rows.iter().map(|r| {
            vec![
                r.variant.clone(),
                r.label.clone(),
                r.table.clone(),
                r.seed.to_string(),
                r.steps.to_string(),
                r.completed.to_string(),
                format!("{:.3}", r.seconds),
                r.psnr_db.to_string(),
                r.ssim.to_string(),
                r.hfrr.to_string(),
                r.wavelet_mae.to_string(),
            ]
        }),
    )
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line plot of log10 power against radial frequency, one polyline per
/// series. Non-positive powers are skipped.
pub fn spectrum_svg(series: &[(String, RadialSpectrum)], title: &str) -> String {
    let (width, height) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 160.0, 40.0, 50.0);
    let (pw, ph) = (width - left - right, height - top - bottom);
    let logs: Vec<f64> = series
        .iter()
        .flat_map(|(_, s)| s.power.iter())
        .filter(|p| **p > 0.0)
        .map(|p| p.log10())
        .collect();
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min).floor();
    let mut hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max).ceil();
    let lo = if lo.is_finite() { lo } else { -1.0 };
    if !hi.is_finite() || hi <= lo {
        hi = lo + 1.0;
    }
    let x_of = |rho: f64| left + rho / 0.5 * pw;
    let y_of = |lp: f64| top + (hi - lp) / (hi - lo) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let rho = i as f64 * 0.1;
        let x = x_of(rho);
        let _ = writeln!(
            out,
            r##"<line x1="{x:.1}" y1="{top}" x2="{x:.1}" y2="{:.1}" stroke="#ddd"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{rho:.1}</text>"##,
            top + ph,
            top + ph + 16.0
        );
    }
    let decades = (hi - lo) as i64;
    for d in 0..=decades {
        let lp = lo + d as f64;
        let y = y_of(lp);
        let _ = writeln!(
            out,
            r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">1e{lp}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">radial frequency (cycles/pixel)</text>"#,
        left + pw / 2.0,
        height - 12.0
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">power</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, (label, s)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = s
            .rho
            .iter()
            .zip(&s.power)
            .filter(|(_, p)| **p > 0.0)
            .map(|(r, p)| format!("{:.2},{:.2}", x_of(*r), y_of(p.log10())))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

pub fn write_metrics(path: &Path, report: &MetricsReport) -> Result<()> {
    write_atomic(path, metrics_csv(report).as_bytes())
}

pub fn write_summary(path: &Path, report: &MetricsReport) -> Result<()> {
    write_atomic(path, summary_csv(report).as_bytes())
}

pub fn write_spectrum_csv(path: &Path, series: &[(String, RadialSpectrum)]) -> Result<()> {
    write_atomic(path, spectrum_csv(series).as_bytes())
}

pub fn write_spectrum_svg(path: &Path, series: &[(String, RadialSpectrum)], title: &str) -> Result<()> {
    write_atomic(path, spectrum_svg(series, title).as_bytes())
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    write_atomic(path, ablation_csv(rows).as_bytes())
}
