//! Table-style rendering: segmentation by size bucket (gIoU/cIoU), then QA
//! by attribute (MVQA/OVQA). Percentages use one decimal; empty cells are
//! `--`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{EvalReport, QaCell, SegCell};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Text,
    Csv,
    Json,
}

const SEG_COLUMNS: [&str; 4] = ["S", "xS", "xxS", "All"];
const QA_COLUMNS: [&str; 5] = ["Color", "Shape", "Others", "Position", "All"];
const CELL_WIDTH: usize = 12;

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "--".to_string(), |x| format!("{x:.1}"))
}

fn seg_cells(r: &EvalReport) -> [&SegCell; 4] {
    let t = &r.segmentation.size;
    [&t.s, &t.xs, &t.xxs, &t.all]
}

fn qa_cells(r: &EvalReport) -> [&QaCell; 5] {
    let q = &r.qa;
    [&q.color, &q.shape, &q.others, &q.position, &q.all]
}

/// Column headers and one-decimal values, in table order.
pub fn flat_values(r: &EvalReport) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (name, c) in SEG_COLUMNS.iter().zip(seg_cells(r)) {
        out.push((format!("{name} gIoU"), pct(c.giou)));
        out.push((format!("{name} cIoU"), pct(c.ciou)));
    }
    for (name, c) in QA_COLUMNS.iter().zip(qa_cells(r)) {
        out.push((format!("{name} MVQA"), pct(c.mvqa.accuracy)));
        out.push((format!("{name} OVQA"), pct(c.ovqa.accuracy)));
    }
    out
}

pub fn render_text(r: &EvalReport) -> String {
    let row = |cells: Vec<String>| {
        cells.iter().map(|c| format!("{c:<CELL_WIDTH$}")).collect::<String>().trim_end().to_string()
    };
    let mut out = String::new();
    let _ = writeln!(out, "IoU (gIoU/cIoU)");
    let _ = writeln!(out, "{}", row(SEG_COLUMNS.iter().map(|s| s.to_string()).collect()));
    let _ = writeln!(out, "{}", row(seg_cells(r).iter().map(|c| format!("{}/{}", pct(c.giou), pct(c.ciou))).collect()));
    let _ = writeln!(out);
    let _ = writeln!(out, "QA Acc. (MVQA/OVQA)");
    let _ = writeln!(out, "{}", row(QA_COLUMNS.iter().map(|s| s.to_string()).collect()));
    let _ = writeln!(
        out,
        "{}",
        row(qa_cells(r).iter().map(|c| format!("{}/{}", pct(c.mvqa.accuracy), pct(c.ovqa.accuracy))).collect())
    );
    let _ = writeln!(out);
    let seg = &r.segmentation;
    let _ = write!(out, "samples: {}", r.samples);
    if seg.missing > 0 {
        let _ = write!(out, ", missing predictions: {}", seg.missing);
    }
    if seg.rasterized > 0 {
        let _ = write!(out, ", box-only predictions rasterized: {}", seg.rasterized);
    }
    if let Some(seed) = r.seed {
        let _ = write!(out, ", seed: {seed}");
    }
    out.push('\n');
    out
}

pub fn render_csv(r: &EvalReport) -> String {
    let (h, v): (Vec<_>, Vec<_>) = flat_values(r).into_iter().unzip();
    format!("{}\n{}\n", h.join(","), v.join(","))
}

pub fn render_json(r: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(r).expect("report serializes");
    s.push('\n');
    s
}

pub fn render_report(r: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Text => render_text(r),
        ReportFormat::Csv => render_csv(r),
        ReportFormat::Json => render_json(r),
    }
}
