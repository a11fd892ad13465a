//! Run artifacts: CSV logs, JSONL sample dumps, config echoes, and SVG
//! charts.
//!
//! Artifacts carry no timestamps, hostnames, or other run-environment
//! residue, and floats are printed through Rust's deterministic formatter,
//! so rerunning a command overwrites every file with identical bytes. All
//! writes go through the same atomic temp-file rename as the dataset
//! writers.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::dataio::atomic_write;
use crate::dpo::DpoLog;
use crate::error::Result;
use crate::eval::{EvalCounts, EvalReport};
use crate::pretrain::StepLog;

/// Pretraining curve: one row per optimizer step.
pub fn write_pretrain_log(path: &Path, logs: &[StepLog]) -> Result<()> {
    let mut out = String::from("step,lr,train_loss,heldout_loss\n");
    for log in logs {
        let heldout = log.heldout_loss.map(|h| h.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", log.step, log.lr, log.train_loss, heldout)
            .expect("writing to a String cannot fail");
    }
    atomic_write(path, out.as_bytes())
}

/// Preference-finetuning curve: one row per step, reference hash included
/// so a reader can verify the reference never moved.
pub fn write_dpo_log(path: &Path, logs: &[DpoLog]) -> Result<()> {
    let mut out = String::from("step,dpo_loss,mean_preference_prob,ref_hash\n");
    for log in logs {
        writeln!(
            out,
            "{},{},{},{:016x}",
            log.step, log.dpo_loss, log.mean_preference_prob, log.ref_hash
        )
        .expect("writing to a String cannot fail");
    }
    atomic_write(path, out.as_bytes())
}

fn counts_row(out: &mut String, key: &str, counts: &EvalCounts) {
    writeln!(
        out,
        "{},{},{},{},{},{},{},{},{},{},{}",
        key,
        counts.tp,
        counts.fp,
        counts.fn_count,
        counts.tn,
        counts.ignored,
        counts.predictions,
        counts.positives,
        counts.negatives,
        counts.tpr(),
        counts.fpr()
    )
    .expect("writing to a String cannot fail");
}

/// Aggregate counts table, one row per labeled condition (a single run, a
/// budget sweep, a truncation sweep — the key column is the caller's).
pub fn write_counts_csv(path: &Path, key_name: &str, rows: &[(String, EvalCounts)]) -> Result<()> {
    let mut out =
        format!("{key_name},tp,fp,fn,tn,ignored,predictions,positives,negatives,tpr,fpr\n");
    for (key, counts) in rows {
        counts_row(&mut out, key, counts);
    }
    atomic_write(path, out.as_bytes())
}

/// Per-prompt breakdown of one evaluation.
pub fn write_per_set_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = String::from("scene_id,class,tp,fp,fn,tn,ignored\n");
    for s in &report.per_set {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.scene_id, s.class.0, s.counts.tp, s.counts.fp, s.counts.fn_count, s.counts.tn,
            s.counts.ignored
        )
        .expect("writing to a String cannot fail");
    }
    atomic_write(path, out.as_bytes())
}

/// One sampled box, as dumped by the sampling command.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct SampleRecord {
    pub scene_id: String,
    pub class: u32,
    /// `[x1, y1, x2, y2]` in image coordinates.
    pub bbox: [f64; 4],
    pub logprob: f64,
}

pub fn write_samples_jsonl(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    atomic_write(path, &out)
}

/// Echoes the exact configuration a command ran with, as pretty JSON.
pub fn write_config_echo<C: Serialize>(path: &Path, config: &C) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(config)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

/// A labeled point on an FPR/TPR chart.
#[derive(Debug, Clone, PartialEq)]
pub struct RatePoint {
    pub label: String,
    pub fpr: f64,
    pub tpr: f64,
}

impl RatePoint {
    pub fn from_counts(label: impl Into<String>, counts: &EvalCounts) -> Self {
        RatePoint { label: label.into(), fpr: counts.fpr(), tpr: counts.tpr() }
    }
}

const CHART_W: f64 = 640.0;
const CHART_H: f64 = 480.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_B: f64 = 48.0;
const MARGIN_T: f64 = 24.0;
const MARGIN_R: f64 = 24.0;

fn chart_x(fpr: f64) -> f64 {
    MARGIN_L + fpr.clamp(0.0, 1.0) * (CHART_W - MARGIN_L - MARGIN_R)
}

fn chart_y(tpr: f64) -> f64 {
    CHART_H - MARGIN_B - tpr.clamp(0.0, 1.0) * (CHART_H - MARGIN_T - MARGIN_B)
}

/// Renders points (connected in order) on unit FPR/TPR axes. Each marker
/// carries its exact rates in `data-fpr` / `data-tpr` attributes so the
/// chart doubles as a machine-readable record.
pub fn rate_chart_svg(title: &str, points: &[RatePoint]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {CHART_W} {CHART_H}\" \
         font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(s, "  <title>{title}</title>");
    let _ = writeln!(
        s,
        "  <rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{:.1}\" height=\"{:.1}\" \
         fill=\"none\" stroke=\"#444\"/>",
        CHART_W - MARGIN_L - MARGIN_R,
        CHART_H - MARGIN_T - MARGIN_B
    );
    for tick in 0..=5 {
        let f = f64::from(tick) / 5.0;
        let x = chart_x(f);
        let y = chart_y(f);
        let _ = writeln!(
            s,
            "  <line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#ccc\"/>",
            chart_y(0.0),
            chart_y(1.0)
        );
        let _ = writeln!(
            s,
            "  <line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ccc\"/>",
            chart_x(0.0),
            chart_x(1.0)
        );
        let _ = writeln!(
            s,
            "  <text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{f}</text>",
            chart_y(0.0) + 18.0
        );
        let _ = writeln!(
            s,
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{f}</text>",
            chart_x(0.0) - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">false positive rate</text>",
        chart_x(0.5),
        CHART_H - 8.0
    );
    let _ = writeln!(
        s,
        "  <text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">\
         true positive rate</text>",
        chart_y(0.5),
        chart_y(0.5)
    );
    if points.len() > 1 {
        let path: Vec<String> =
            points.iter().map(|p| format!("{:.2},{:.2}", chart_x(p.fpr), chart_y(p.tpr))).collect();
        let _ = writeln!(
            s,
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>",
            path.join(" ")
        );
    }
    for p in points {
        let _ = writeln!(
            s,
            "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"#1f77b4\" \
             data-label=\"{}\" data-fpr=\"{}\" data-tpr=\"{}\"><title>{}</title></circle>",
            chart_x(p.fpr),
            chart_y(p.tpr),
            p.label,
            p.fpr,
            p.tpr,
            p.label
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_rate_chart(path: &Path, title: &str, points: &[RatePoint]) -> Result<()> {
    atomic_write(path, rate_chart_svg(title, points).as_bytes())
}
