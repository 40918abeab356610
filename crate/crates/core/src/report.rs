//! Human-readable tables paired with `key=value` files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gradsuite::GradCheckResult;
use crate::metrics::MetricsReport;
use crate::pipeline::{AblationRow, QuantReport};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub text: String,
    pub kv: String,
}

impl Report {
    /// Writes `<stem>.txt` and `<stem>.kv` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, body) in [("txt", &self.text), ("kv", &self.kv)] {
            let path = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&path, body).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    fn kv(&mut self, key: impl std::fmt::Display, value: impl std::fmt::Display) {
        let _ = writeln!(self.kv, "{key}={value}");
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

fn metrics_header(classes: usize) -> String {
    let mut s = format!("{:<14}", "");
    for c in 0..classes {
        let _ = write!(s, "{:>8}", format!("c{c}"));
    }
    let _ = write!(s, "{:>8}{:>8}", "mAP", "acc%");
    s
}

fn metrics_row(label: &str, r: &MetricsReport) -> String {
    let mut s = format!("{label:<14}");
    for v in &r.recall {
        let _ = write!(s, "{:>8}", pct(*v));
    }
    let _ = write!(s, "{:>8.2}{:>8.2}", r.map, 100.0 * r.accuracy);
    s
}

fn metrics_kv(out: &mut Report, prefix: &str, r: &MetricsReport) {
    out.kv(format!("{prefix}.pairs"), r.pairs);
    out.kv(format!("{prefix}.mAP"), r.map);
    out.kv(format!("{prefix}.accuracy"), r.accuracy);
    for (c, v) in r.recall.iter().enumerate() {
        out.kv(format!("{prefix}.recall.c{c}"), pct(*v));
    }
    for (c, v) in r.ap.iter().enumerate() {
        out.kv(format!("{prefix}.ap.c{c}"), pct(*v));
    }
}

/// Per-class recall and mAP in one row per masking mode.
pub fn evaluation(rows: &[(&str, &MetricsReport)]) -> Report {
    let mut out = Report::default();
    let classes = rows.first().map_or(0, |(_, r)| r.recall.len());
    let _ = writeln!(out.text, "per-class recall (%) and mAP");
    let _ = writeln!(out.text, "{}", metrics_header(classes));
    for (label, r) in rows {
        let _ = writeln!(out.text, "{}", metrics_row(label, r));
        metrics_kv(&mut out, label, r);
    }
    out
}

pub fn ablation(rows: &[AblationRow]) -> Report {
    let mut out = Report::default();
    let _ = writeln!(
        out.text,
        "{:<12}{:>6}{:>6}{:>6}{:>6}{:>6}{:>9}{:>9}{:>10}",
        "row", "wbce", "bilat", "logit", "edge", "se", "mAP", "acc%", "loss"
    );
    let mark = |b: bool| if b { "x" } else { "" };
    for (k, r) in rows.iter().enumerate() {
        let t = r.toggles;
        let _ = writeln!(
            out.text,
            "{:<12}{:>6}{:>6}{:>6}{:>6}{:>6}{:>9.2}{:>9.2}{:>10.4}",
            r.name,
            mark(t.wbce),
            mark(t.bilateral),
            mark(t.logit_transform),
            mark(t.edge_query),
            mark(t.se_block),
            r.report.map,
            100.0 * r.report.accuracy,
            r.final_loss
        );
        out.kv(format!("row{k}.name"), &r.name);
        out.kv(format!("row{k}.mAP"), r.report.map);
        out.kv(format!("row{k}.accuracy"), r.report.accuracy);
        out.kv(format!("row{k}.loss"), r.final_loss);
    }
    out.kv("rows", rows.len());
    out
}

pub fn quantization(q: &QuantReport) -> Report {
    let mut out = Report::default();
    let classes = q.fp32.recall.len();
    let _ = writeln!(out.text, "{}", metrics_header(classes));
    let _ = writeln!(out.text, "{}", metrics_row("FP32 start", &q.pretrained));
    let _ = writeln!(out.text, "{}", metrics_row("FP32", &q.fp32));
    let _ = writeln!(
        out.text,
        "{}",
        metrics_row("FP32 (QAT w)", &q.fp32_after_qat)
    );
    let _ = writeln!(out.text, "{}", metrics_row("INT8 (QAT)", &q.int8));
    let _ = writeln!(
        out.text,
        "\nmAP drop FP32 -> INT8: {:.2} points",
        q.map_drop()
    );
    let s = &q.size;
    let _ = writeln!(out.text, "parameters:        {}", s.parameters);
    let _ = writeln!(
        out.text,
        "FP32 payload:      {} bytes",
        s.fp32_payload_bytes
    );
    let _ = writeln!(
        out.text,
        "INT8 payload:      {} bytes",
        s.int8_payload_bytes
    );
    let _ = writeln!(out.text, "FP32 file:         {} bytes", s.fp32_file_bytes);
    let _ = writeln!(out.text, "INT8 file:         {} bytes", s.int8_file_bytes);
    let _ = writeln!(out.text, "payload ratio:     {:.4}", s.payload_ratio);
    let _ = writeln!(out.text, "file ratio:        {:.4}", s.file_ratio);
    metrics_kv(&mut out, "pretrained", &q.pretrained);
    metrics_kv(&mut out, "fp32", &q.fp32);
    metrics_kv(&mut out, "fp32_after_qat", &q.fp32_after_qat);
    metrics_kv(&mut out, "int8", &q.int8);
    out.kv("map_drop", q.map_drop());
    out.kv("parameters", s.parameters);
    out.kv("fp32_payload_bytes", s.fp32_payload_bytes);
    out.kv("int8_payload_bytes", s.int8_payload_bytes);
    out.kv("fp32_file_bytes", s.fp32_file_bytes);
    out.kv("int8_file_bytes", s.int8_file_bytes);
    out.kv("payload_ratio", s.payload_ratio);
    out.kv("file_ratio", s.file_ratio);
    out
}

pub fn gradient_checks(results: &[GradCheckResult], tolerance: f64) -> Report {
    let mut out = Report::default();
    let _ = writeln!(
        out.text,
        "{:<14}{:>6}{:>14}{:>8}{:>9}{:>7}",
        "check", "seed", "max rel err", "coords", "skipped", "ok"
    );
    for r in results {
        let ok = r.max_rel_error <= tolerance;
        let _ = writeln!(
            out.text,
            "{:<14}{:>6}{:>14.3e}{:>8}{:>9}{:>7}",
            r.check,
            r.seed,
            r.max_rel_error,
            r.coords,
            r.skipped,
            if ok { "yes" } else { "NO" }
        );
        out.kv(
            format!("{}.seed{}.max_rel_error", r.check, r.seed),
            r.max_rel_error,
        );
    }
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    out.kv("max_rel_error", worst);
    out.kv("tolerance", tolerance);
    out.kv("passed", worst <= tolerance);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> MetricsReport {
        MetricsReport {
            pairs: 4,
            recall: vec![Some(50.0), None],
            map: 75.0,
            ap: vec![Some(75.0), None],
            accuracy: 0.5,
        }
    }

    #[test]
    fn evaluation_table_lists_every_class() {
        let r = report();
        let out = evaluation(&[("unilateral", &r)]);
        assert!(out.text.contains("c0") && out.text.contains("c1"));
        assert!(out.kv.contains("unilateral.mAP=75"));
        assert!(out.kv.contains("unilateral.recall.c1=-"));
    }

    #[test]
    fn reports_write_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = evaluation(&[("u", &report())]);
        out.write(dir.path(), "eval").unwrap();
        assert!(dir.path().join("eval.txt").exists());
        assert!(dir.path().join("eval.kv").exists());
    }
}
