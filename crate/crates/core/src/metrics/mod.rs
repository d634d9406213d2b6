//! gIoU/cIoU and QA accuracy, overall and per bucket or attribute.

mod report;

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use report::{render_csv, render_json, render_report, render_text, ReportFormat};

use crate::dataset::{Attribute, SampleRecord, SizeBucket, SpatialBucket};
use crate::geometry::BBox;
use crate::mask::{rasterize_box, MaskError, MaskRle};
use crate::parsing::{extract_answer_keywords, normalize_text, NormalizedAnswer};
use crate::pipeline::StageTrace;
use crate::rewards::{fuzzy_ratio, TaskType};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_mask: Option<MaskRle>,
    /// Original frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_box: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_trace: Option<StageTrace>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("duplicate prediction for `{0}`")]
    DuplicatePrediction(String),
    #[error("duplicate ground truth `{0}`")]
    DuplicateGroundTruth(String),
    #[error("prediction for `{id}`: {source}")]
    BadPrediction { id: String, source: MaskError },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Open-ended answers count as correct at or above this similarity.
    pub ovqa_thresh: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { ovqa_thresh: 0.8 }
    }
}

/// Ids present on only one side.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IdDiff {
    pub missing_predictions: Vec<String>,
    pub unknown_predictions: Vec<String>,
}

impl IdDiff {
    pub fn is_empty(&self) -> bool {
        self.missing_predictions.is_empty() && self.unknown_predictions.is_empty()
    }
}

/// Per-sample intersection and union in pixels.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleIou {
    pub sample_id: String,
    pub intersection: u64,
    pub union: u64,
    pub size: SizeBucket,
    pub spatial: SpatialBucket,
    pub missing: bool,
    pub rasterized: bool,
}

impl SampleIou {
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            0.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegCell {
    pub count: usize,
    pub intersection: u64,
    pub union: u64,
    /// Percent; absent for an empty cell.
    pub giou: Option<f64>,
    pub ciou: Option<f64>,
}

impl SegCell {
    fn from_samples<'a>(it: impl Iterator<Item = &'a SampleIou>) -> Self {
        let (mut count, mut inter, mut union, mut sum) = (0usize, 0u64, 0u64, 0.0f64);
        for s in it {
            count += 1;
            inter += s.intersection;
            union += s.union;
            sum += s.iou();
        }
        Self {
            count,
            intersection: inter,
            union,
            giou: (count > 0).then(|| 100.0 * sum / count as f64),
            ciou: (union > 0).then(|| 100.0 * inter as f64 / union as f64),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegTable {
    pub s: SegCell,
    pub xs: SegCell,
    pub xxs: SegCell,
    pub all: SegCell,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpatialTable {
    pub center: SegCell,
    pub middle: SegCell,
    pub border: SegCell,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegEval {
    pub size: SegTable,
    pub spatial: SpatialTable,
    pub missing: usize,
    pub rasterized: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
    /// Percent; absent when `total` is 0.
    pub accuracy: Option<f64>,
}

impl Accuracy {
    fn add(&mut self, ok: bool) {
        self.total += 1;
        self.correct += ok as usize;
        self.accuracy = Some(100.0 * self.correct as f64 / self.total as f64);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QaCell {
    pub mvqa: Accuracy,
    pub ovqa: Accuracy,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QaTable {
    pub color: QaCell,
    pub shape: QaCell,
    pub others: QaCell,
    pub position: QaCell,
    pub all: QaCell,
}

impl QaTable {
    fn cell_mut(&mut self, a: Attribute) -> &mut QaCell {
        match a {
            Attribute::Color => &mut self.color,
            Attribute::Shape => &mut self.shape,
            Attribute::Position => &mut self.position,
            Attribute::Others => &mut self.others,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub samples: usize,
    pub segmentation: SegEval,
    pub qa: QaTable,
}

fn index_predictions(preds: &[PredictionRecord]) -> Result<HashMap<&str, &PredictionRecord>, EvalError> {
    let mut map = HashMap::with_capacity(preds.len());
    for p in preds {
        if map.insert(p.sample_id.as_str(), p).is_some() {
            return Err(EvalError::DuplicatePrediction(p.sample_id.clone()));
        }
    }
    Ok(map)
}

pub fn id_diff(preds: &[PredictionRecord], gts: &[SampleRecord]) -> IdDiff {
    let p: BTreeSet<&str> = preds.iter().map(|p| p.sample_id.as_str()).collect();
    let g: BTreeSet<&str> = gts.iter().map(|g| g.id.as_str()).collect();
    IdDiff {
        missing_predictions: g.difference(&p).map(|s| s.to_string()).collect(),
        unknown_predictions: p.difference(&g).map(|s| s.to_string()).collect(),
    }
}

fn sample_iou(gt: &SampleRecord, pred: Option<&PredictionRecord>) -> Result<SampleIou, EvalError> {
    let (size, spatial) = gt.buckets();
    let bad = |source| EvalError::BadPrediction { id: gt.id.clone(), source };
    let gt_area = gt.mask.area();
    let mut out = SampleIou {
        sample_id: gt.id.clone(),
        intersection: 0,
        union: gt_area,
        size,
        spatial,
        missing: pred.is_none(),
        rasterized: false,
    };
    let Some(pred) = pred else { return Ok(out) };
    let mask = match (&pred.pred_mask, &pred.pred_box) {
        (Some(m), _) => Some(m.clone()),
        (None, Some(b)) => {
            let frame = gt.original_frame().map_err(|e| bad(e.into()))?;
            let bbox = BBox::clamped(b[0], b[1], b[2], b[3], frame).map_err(|e| bad(e.into()))?;
            out.rasterized = true;
            Some(rasterize_box(&bbox).map_err(bad)?.encode())
        }
        (None, None) => None,
    };
    if let Some(m) = mask {
        let (i, u) = m.intersection_union(&gt.mask).map_err(bad)?;
        out.intersection = i;
        out.union = u;
    }
    Ok(out)
}

/// Per-sample IoUs in ground-truth order. A missing prediction scores 0 and
/// adds the ground-truth area to the union; a box without a mask is
/// rasterized.
pub fn sample_ious(preds: &[PredictionRecord], gts: &[SampleRecord]) -> Result<Vec<SampleIou>, EvalError> {
    let map = index_predictions(preds)?;
    let mut seen = BTreeSet::new();
    if let Some(g) = gts.iter().find(|g| !seen.insert(g.id.as_str())) {
        return Err(EvalError::DuplicateGroundTruth(g.id.clone()));
    }
    gts.par_iter().map(|g| sample_iou(g, map.get(g.id.as_str()).copied())).collect()
}

pub fn eval_segmentation(preds: &[PredictionRecord], gts: &[SampleRecord]) -> Result<SegEval, EvalError> {
    let ious = sample_ious(preds, gts)?;
    let by_size = |b: SizeBucket| SegCell::from_samples(ious.iter().filter(|s| s.size == b));
    let by_spatial = |b: SpatialBucket| SegCell::from_samples(ious.iter().filter(|s| s.spatial == b));
    Ok(SegEval {
        size: SegTable {
            s: by_size(SizeBucket::S),
            xs: by_size(SizeBucket::XS),
            xxs: by_size(SizeBucket::XXS),
            all: SegCell::from_samples(ious.iter()),
        },
        spatial: SpatialTable {
            center: by_spatial(SpatialBucket::Center),
            middle: by_spatial(SpatialBucket::Middle),
            border: by_spatial(SpatialBucket::Border),
        },
        missing: ious.iter().filter(|s| s.missing).count(),
        rasterized: ious.iter().filter(|s| s.rasterized).count(),
    })
}

/// Whether a free-form or option answer matches the record.
pub fn answer_correct(pred: Option<&str>, gt: &SampleRecord, cfg: &MetricsConfig) -> bool {
    let Some(pred) = pred else { return false };
    match gt.task {
        TaskType::Is => false,
        TaskType::Mvqa => match (extract_answer_keywords(pred, TaskType::Mvqa), gt.gt_answer()) {
            (NormalizedAnswer::Choice(Some(a)), NormalizedAnswer::Choice(Some(g))) => a == g,
            _ => false,
        },
        TaskType::Ovqa => {
            let g = normalize_text(gt.answer.as_deref().unwrap_or(""));
            fuzzy_ratio(&normalize_text(pred), &g) >= cfg.ovqa_thresh
        }
    }
}

pub fn eval_qa(preds: &[PredictionRecord], gts: &[SampleRecord], cfg: &MetricsConfig) -> Result<QaTable, EvalError> {
    let map = index_predictions(preds)?;
    let mut t = QaTable::default();
    for g in gts.iter().filter(|g| g.task != TaskType::Is) {
        let ok = answer_correct(map.get(g.id.as_str()).and_then(|p| p.pred_answer.as_deref()), g, cfg);
        let add = |cell: &mut QaCell| match g.task {
            TaskType::Mvqa => cell.mvqa.add(ok),
            _ => cell.ovqa.add(ok),
        };
        add(&mut t.all);
        add(t.cell_mut(g.attribute));
    }
    Ok(t)
}

pub fn evaluate(
    preds: &[PredictionRecord],
    gts: &[SampleRecord],
    cfg: &MetricsConfig,
    seed: Option<u64>,
) -> Result<(EvalReport, IdDiff), EvalError> {
    let segmentation = eval_segmentation(preds, gts)?;
    let qa = eval_qa(preds, gts, cfg)?;
    Ok((
        EvalReport { schema_version: REPORT_SCHEMA_VERSION, seed, samples: gts.len(), segmentation, qa },
        id_diff(preds, gts),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;

    fn gt(id: &str, task: TaskType, segs: Vec<(u32, u32, u32)>) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            image_path: String::new(),
            width: 64,
            height: 64,
            task,
            attribute: Attribute::Color,
            question: "q".into(),
            answer: match task {
                TaskType::Is => None,
                TaskType::Mvqa => Some("B".into()),
                TaskType::Ovqa => Some("a blue truck".into()),
            },
            options: (task == TaskType::Mvqa).then(|| vec!["x".into(), "y".into()]),
            mask: MaskRle::from_segments(64, 64, segs).unwrap(),
            split: Split::Test,
        }
    }

    fn pred(id: &str, mask: Option<MaskRle>, answer: Option<&str>) -> PredictionRecord {
        PredictionRecord {
            sample_id: id.into(),
            pred_mask: mask,
            pred_box: None,
            pred_answer: answer.map(String::from),
            stage_trace: None,
        }
    }

    #[test]
    fn perfect_predictions() {
        let g = vec![gt("a", TaskType::Is, vec![(1, 1, 5)]), gt("b", TaskType::Is, vec![(9, 3, 4)])];
        let p: Vec<_> = g.iter().map(|r| pred(&r.id, Some(r.mask.clone()), None)).collect();
        let e = eval_segmentation(&p, &g).unwrap();
        assert_eq!(e.size.all.giou, Some(100.0));
        assert_eq!(e.size.all.ciou, Some(100.0));
    }

    #[test]
    fn hit_and_disjoint_miss() {
        // Two GT masks of area 4; first predicted exactly, second disjoint.
        let g = vec![gt("a", TaskType::Is, vec![(0, 0, 4)]), gt("b", TaskType::Is, vec![(10, 0, 4)])];
        let miss = MaskRle::from_segments(64, 64, [(20, 0, 4)]).unwrap();
        let p = vec![pred("a", Some(g[0].mask.clone()), None), pred("b", Some(miss), None)];
        let e = eval_segmentation(&p, &g).unwrap();
        assert!((e.size.all.giou.unwrap() - 50.0).abs() < 1e-12);
        assert!((e.size.all.ciou.unwrap() - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn missing_prediction_counts_gt_area() {
        let g = vec![gt("a", TaskType::Is, vec![(0, 0, 4)]), gt("b", TaskType::Is, vec![(10, 0, 4)])];
        let p = vec![pred("a", Some(g[0].mask.clone()), None)];
        let e = eval_segmentation(&p, &g).unwrap();
        assert_eq!(e.missing, 1);
        assert_eq!((e.size.all.intersection, e.size.all.union), (4, 8));
        assert_eq!(id_diff(&p, &g).missing_predictions, ["b"]);
    }

    #[test]
    fn duplicates_rejected() {
        let g = vec![gt("a", TaskType::Is, vec![(0, 0, 4)])];
        let p = vec![pred("a", None, None), pred("a", None, None)];
        assert_eq!(eval_segmentation(&p, &g), Err(EvalError::DuplicatePrediction("a".into())));
    }

    #[test]
    fn box_only_is_rasterized() {
        let g = vec![gt("a", TaskType::Is, (0..4).map(|y| (y, 0, 4)).collect())];
        let mut p = pred("a", None, None);
        p.pred_box = Some([0.0, 0.0, 4.0, 4.0]);
        let e = eval_segmentation(&[p], &g).unwrap();
        assert_eq!(e.rasterized, 1);
        assert_eq!(e.size.all.giou, Some(100.0));
    }

    #[test]
    fn qa_examples() {
        let cfg = MetricsConfig::default();
        let m = gt("m", TaskType::Mvqa, vec![(0, 0, 1)]);
        let o = gt("o", TaskType::Ovqa, vec![(0, 0, 1)]);
        assert!(answer_correct(Some("b"), &m, &cfg));
        assert!(!answer_correct(Some("A"), &m, &cfg));
        assert!(answer_correct(Some("Blue Truck"), &o, &cfg));
        assert!(!answer_correct(None, &o, &cfg));
        let t = eval_qa(
            &[pred("m", None, Some("B")), pred("o", None, Some("green car"))],
            &[m, o, gt("i", TaskType::Is, vec![(0, 0, 1)])],
            &cfg,
        )
        .unwrap();
        assert_eq!(t.all.mvqa.accuracy, Some(100.0));
        assert_eq!(t.all.ovqa.accuracy, Some(0.0));
        assert_eq!(t.color.mvqa.total, 1);
        assert_eq!(t.shape.mvqa.accuracy, None);
    }
}
