use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{ArmGroup, AveragedTrace, ExperimentReport, HarnessError};
use crate::guidance::{format_sig9, GuidanceTrace};

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const W: f64 = 520.0;
const H: f64 = 340.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 130.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 45.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

/// Plain SVG 1.1 line chart with an optional dashed vertical marker.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series], marker: Option<f64>) -> String {
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).chain(marker));
    let (y0, y1) = range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}">
<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>
<text x="{}" y="18" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<path d="M{LEFT:.2} {TOP:.2} L{LEFT:.2} {:.2} L{:.2} {:.2}" stroke="black" fill="none"/>"#,
        TOP + ph,
        LEFT + pw,
        TOP + ph
    );
    for (v, anchor_x) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(
            out,
            r#"<text x="{anchor_x:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
            TOP + ph + 14.0,
            format_sig9(v).trim_end_matches('0').trim_end_matches('.')
        );
    }
    for v in [y0, y1] {
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>"#,
            LEFT - 4.0,
            sy(v) + 3.0,
            format!("{v:.3}")
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );
    if let Some(m) = marker {
        let _ = writeln!(
            out,
            r#"<path d="M{:.2} {TOP:.2} L{:.2} {:.2}" stroke="gray" stroke-dasharray="4 3" fill="none"/>"#,
            sx(m),
            sx(m),
            TOP + ph
        );
    }
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        if !s.points.is_empty() {
            let mut d = String::new();
            for (i, &(x, y)) in s.points.iter().enumerate() {
                let _ = write!(d, "{}{:.2} {:.2} ", if i == 0 { "M" } else { "L" }, sx(x), sy(y));
            }
            let _ = writeln!(out, r#"<path d="{}" stroke="{color}" stroke-width="1.5" fill="none"/>"#, d.trim_end());
        }
        let ly = TOP + 14.0 * k as f64 + 6.0;
        let _ = writeln!(
            out,
            r#"<path d="M{:.2} {ly:.2} L{:.2} {ly:.2}" stroke="{color}" stroke-width="2" fill="none"/>
<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10">{}</text>"#,
            W - RIGHT + 10.0,
            W - RIGHT + 28.0,
            W - RIGHT + 32.0,
            ly + 3.0,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn opt(v: Option<f64>) -> String {
    v.map(format_sig9).unwrap_or_default()
}

pub fn averaged_csv(t: &AveragedTrace) -> String {
    let mut out = String::from("step,t,phase,s_cfg,s_ctl,s_cls,confidence\n");
    for s in &t.steps {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.step,
            s.t,
            s.phase.as_str(),
            format_sig9(s.s_cfg),
            format_sig9(s.s_ctl),
            format_sig9(s.s_cls),
            opt(s.confidence)
        );
    }
    out
}

fn scale_series(points: impl Iterator<Item = (usize, f64, f64, f64)> + Clone) -> Vec<Series> {
    let pick = |name: &str, f: fn(&(usize, f64, f64, f64)) -> f64| Series {
        name: name.into(),
        points: points.clone().map(|p| (p.0 as f64, f(&p))).collect(),
    };
    vec![
        pick("s_cfg", |p| p.1),
        pick("s_ctl", |p| p.2),
        pick("s_cls", |p| p.3),
    ]
}

pub fn trace_svg(title: &str, trace: &GuidanceTrace, n_s: usize) -> String {
    let pts = trace.records.iter().map(|r| (r.step, r.s_cfg, r.s_ctl, r.s_cls));
    line_chart_svg(title, "step", "scale", &scale_series(pts), Some(n_s as f64))
}

pub fn averaged_svg(t: &AveragedTrace) -> String {
    let pts = t.steps.iter().map(|s| (s.step, s.s_cfg, s.s_ctl, s.s_cls));
    let title = format!("{} (mean of {} samples)", t.arm, t.samples);
    line_chart_svg(&title, "step", "scale", &scale_series(pts), Some(t.n_s as f64))
}

#[derive(Serialize)]
struct Index {
    files: Vec<String>,
    notes: Vec<String>,
}

/// Cells as CSV rows, in report order.
pub fn cells_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("arm,mode,ratio,seed,accuracy,synthetic,error\n");
    for c in &report.cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            c.arm,
            c.mode,
            format_sig9(c.ratio),
            c.seed,
            opt(c.accuracy),
            c.synthetic,
            c.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        );
    }
    out
}

/// Accuracy against the classifier scale, one row per (strategy, scale,
/// ratio).
pub fn scale_sweep_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("strategy,s_cls,ratio,median\n");
    for arm in report.arms.iter().filter(|a| a.group == ArmGroup::ScaleSweep) {
        for m in report.medians.iter().filter(|m| m.arm == arm.name) {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                if arm.guidance.adaptive { "adaptive" } else { "fixed" },
                format_sig9(arm.guidance.s_cls_ns),
                format_sig9(m.ratio),
                opt(m.median)
            );
        }
    }
    out
}

/// Accuracy against the augmentation ratio, one row per (mode, ratio).
pub fn ratio_sweep_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("mode,ratio,median\n");
    for arm in report.arms.iter().filter(|a| a.group == ArmGroup::Mode) {
        for m in report.medians.iter().filter(|m| m.arm == arm.name) {
            let _ = writeln!(out, "{},{},{}", arm.mode, format_sig9(m.ratio), opt(m.median));
        }
    }
    out
}

/// Writes report.json, cells.csv, scale-evolution charts for the averaged
/// traces and for each labelled per-sample trace, the classifier-scale sweep
/// and the ratio sweep (CSV + SVG each), and an index.json listing them.
pub fn emit_plots(
    report: &ExperimentReport,
    traces: &[(String, GuidanceTrace, usize)],
    out_dir: &Path,
) -> Result<Vec<PathBuf>, HarnessError> {
    if report.cells.is_empty() && report.averaged_traces.is_empty() && traces.is_empty() {
        return Err(HarnessError::Config("nothing to plot: empty report".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut files: Vec<(String, String)> = Vec::new();
    let mut notes = Vec::new();
    files.push(("report.json".into(), serde_json::to_string_pretty(report)? + "\n"));
    files.push(("cells.csv".into(), cells_csv(report)));

    if traces.is_empty() && report.averaged_traces.is_empty() {
        notes.push("scale evolution skipped: no traces".to_string());
    }
    for t in &report.averaged_traces {
        files.push((format!("scales_mean_{}.csv", t.arm), averaged_csv(t)));
        files.push((format!("scales_mean_{}.svg", t.arm), averaged_svg(t)));
    }
    for (label, trace, n_s) in traces {
        files.push((format!("scales_{label}.csv"), trace.to_csv()));
        files.push((format!("scales_{label}.svg"), trace_svg(label, trace, *n_s)));
    }

    if report.arms.iter().any(|a| a.group == ArmGroup::ScaleSweep) {
        let csv = scale_sweep_csv(report);
        let mut series = Vec::new();
        for (strategy, adaptive) in [("adaptive", true), ("fixed", false)] {
            for &ratio in &report.ratios {
                let points: Vec<(f64, f64)> = report
                    .arms
                    .iter()
                    .filter(|a| a.group == ArmGroup::ScaleSweep && a.guidance.adaptive == adaptive)
                    .filter_map(|a| report.median(&a.name, ratio).map(|m| (a.guidance.s_cls_ns, m)))
                    .collect();
                series.push(Series {
                    name: format!("{strategy} r={ratio}"),
                    points,
                });
            }
        }
        files.push(("accuracy_vs_scls.csv".into(), csv));
        files.push((
            "accuracy_vs_scls.svg".into(),
            line_chart_svg("accuracy vs classifier scale", "s_cls", "median accuracy", &series, None),
        ));
    } else {
        notes.push("classifier-scale sweep skipped: no sweep arms".to_string());
    }

    let series: Vec<Series> = report
        .arms
        .iter()
        .filter(|a| a.group == ArmGroup::Mode)
        .map(|a| Series {
            name: a.name.clone(),
            points: report
                .ratios
                .iter()
                .filter_map(|&r| report.median(&a.name, r).map(|m| (r, m)))
                .collect(),
        })
        .collect();
    files.push(("accuracy_vs_ratio.csv".into(), ratio_sweep_csv(report)));
    files.push((
        "accuracy_vs_ratio.svg".into(),
        line_chart_svg("accuracy vs augmentation ratio", "ratio", "median accuracy", &series, None),
    ));

    let index = Index {
        files: files.iter().map(|(n, _)| n.clone()).collect(),
        notes,
    };
    files.push(("index.json".into(), serde_json::to_string_pretty(&index)? + "\n"));
    let mut written = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = out_dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}
