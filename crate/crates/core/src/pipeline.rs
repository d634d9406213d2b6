//! Inference: resize, global stage, region, crop, local stage, segmenter.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{ImageSource, ImageView, PolicyBackend, SegmenterBackend};
use crate::dataset::SampleRecord;
use crate::geometry::{clamp_region, BBox, Frame, GeometryError, Point, Reframe, RegionBox};
use crate::mask::{derive_gt_points, MaskError, MaskRle};
use crate::metrics::PredictionRecord;
use crate::parsing::{parse_gse, parse_lpr, ParsedGseOutput, ParsedLprOutput};
use crate::prompt::{PromptError, PromptTemplates, PromptVars};
use crate::retrospective::{sample_candidates, LabelError, OffsetSampling};
use crate::rewards::Stage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("cancelled")]
    Cancelled,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerSource {
    #[default]
    Gse,
    Lpr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub gse_width: u32,
    pub gse_height: u32,
    pub crop_side_original: u32,
    pub gse_region_side: u32,
    pub prompts: PromptTemplates,
    pub concurrency_cap: usize,
    pub answer_source: AnswerSource,
    pub temperature: f64,
    pub record_timings: bool,
    /// Random crop placement for local-stage training crops; off centres
    /// the crop on the target.
    pub crop_augmentation: bool,
    /// Image paths in records are resolved against this directory.
    pub image_root: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            gse_width: 1920,
            gse_height: 1080,
            crop_side_original: 512,
            gse_region_side: 256,
            prompts: PromptTemplates::default(),
            concurrency_cap: 8,
            answer_source: AnswerSource::Gse,
            temperature: 0.0,
            record_timings: true,
            crop_augmentation: true,
            image_root: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.gse_width == 0 || self.gse_height == 0 {
            return Err(PipelineError::Config("GSE frame must be non-empty".into()));
        }
        if self.crop_side_original == 0 || self.gse_region_side == 0 {
            return Err(PipelineError::Config("region sides must be positive".into()));
        }
        if self.gse_region_side > self.gse_width.min(self.gse_height) {
            return Err(PipelineError::Config("GSE region larger than the GSE frame".into()));
        }
        if self.concurrency_cap == 0 {
            return Err(PipelineError::Config("concurrency cap must be at least 1".into()));
        }
        self.prompts.validate()?;
        Ok(())
    }

    fn image_path(&self, r: &SampleRecord) -> PathBuf {
        match &self.image_root {
            Some(root) => root.join(&r.image_path),
            None => PathBuf::from(&r.image_path),
        }
    }
}

#[derive(Clone)]
pub struct Backends {
    pub gse: Arc<dyn PolicyBackend>,
    pub lpr: Arc<dyn PolicyBackend>,
    pub segmenter: Arc<dyn SegmenterBackend>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GseSummary {
    pub format_ok: bool,
    pub think_ok: bool,
    pub size_ok: bool,
    /// GSE frame.
    pub region: Option<[f64; 4]>,
    pub response: Option<String>,
}

impl From<&ParsedGseOutput> for GseSummary {
    fn from(p: &ParsedGseOutput) -> Self {
        Self {
            format_ok: p.format_ok,
            think_ok: p.think_ok,
            size_ok: p.size_ok,
            region: p.region.map(|r| r.to_array()),
            response: p.response.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LprSummary {
    pub format_ok: bool,
    pub think_ok: bool,
    /// Crop frame.
    pub bbox: Option<[f64; 4]>,
    pub point1: Option<[f64; 2]>,
    pub point2: Option<[f64; 2]>,
    pub response: Option<String>,
}

impl From<&ParsedLprOutput> for LprSummary {
    fn from(p: &ParsedLprOutput) -> Self {
        Self {
            format_ok: p.format_ok,
            think_ok: p.think_ok,
            bbox: p.bbox.map(|b| b.to_array()),
            point1: p.point1.map(|q| q.to_array()),
            point2: p.point2.map(|q| q.to_array()),
            response: p.response.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum StageFailure {
    GseBackend(String),
    GseFormat,
    /// The image-centred region replaced a missing global-stage region.
    RegionFallback,
    /// The region does not contain the ground-truth box.
    MissedRegion,
    LprBackend(String),
    LprFormat,
    SegmenterBackend(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub gse_ms: f64,
    pub lpr_ms: f64,
    pub segment_ms: f64,
}

/// Every intermediate of one run; coordinates are exact copies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub original_frame: [u32; 2],
    pub gse_frame: [u32; 2],
    pub gse_raw: Option<String>,
    pub gse_parsed: Option<GseSummary>,
    pub region_original: [f64; 4],
    pub crop_origin: [f64; 2],
    pub crop_side: u32,
    pub lpr_raw: Option<String>,
    pub lpr_parsed: Option<LprSummary>,
    pub box_original: Option<[f64; 4]>,
    pub points_original: Option<[[f64; 2]; 2]>,
    pub gse_answer: Option<String>,
    pub lpr_answer: Option<String>,
    pub failures: Vec<StageFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn first(mut v: Vec<String>) -> Option<String> {
    (!v.is_empty()).then(|| v.swap_remove(0))
}

/// Maps a GSE-frame region to a fixed-side square in the Original frame,
/// keeping its centre.
pub fn region_to_original(region: &BBox, original: Frame, side: u32) -> Result<RegionBox, GeometryError> {
    let (cx, cy) = region.center();
    let c = Point::clamped(cx, cy, region.frame())?.to_frame(original, None)?;
    clamp_region(&c, side, original)
}

pub fn run_sample(r: &SampleRecord, cfg: &PipelineConfig, be: &Backends) -> Result<PredictionRecord, PipelineError> {
    let original = r.original_frame()?;
    let gse_frame = Frame::fit_gse(original, cfg.gse_width, cfg.gse_height)?;
    let region_side_gse = cfg.gse_region_side.min(gse_frame.width()).min(gse_frame.height());
    let crop_side = cfg.crop_side_original.min(original.width()).min(original.height());
    let crop_frame = Frame::crop(crop_side)?;
    let view = ImageView::new(&r.id, Arc::new(ImageSource::file(cfg.image_path(r))), original);
    let mut failures = Vec::new();
    let prompt = |stage, frame, side| {
        cfg.prompts.render(
            stage,
            r.task,
            &PromptVars { question: &r.question, options: r.options.as_deref(), frame, region_side: side },
        )
    };

    let t0 = Instant::now();
    let gse_raw = match be.gse.complete(
        &view.resized(gse_frame),
        &prompt(Stage::Gse, gse_frame, region_side_gse)?,
        1,
        cfg.temperature,
    ) {
        Ok(v) => first(v),
        Err(e) => {
            failures.push(StageFailure::GseBackend(e.to_string()));
            None
        }
    };
    let gse_parsed = gse_raw.as_deref().map(|raw| parse_gse(raw, gse_frame, region_side_gse));
    let gse_ms = ms_since(t0);

    let parsed_region = gse_parsed.as_ref().filter(|p| p.format_ok).and_then(|p| p.region);
    if gse_parsed.as_ref().is_some_and(|p| !p.format_ok) {
        failures.push(StageFailure::GseFormat);
    }
    let region = match parsed_region {
        Some(reg) => region_to_original(&reg, original, crop_side)?,
        None => {
            failures.push(StageFailure::RegionFallback);
            let c = Point::clamped(original.width() as f64 / 2.0, original.height() as f64 / 2.0, original)?;
            clamp_region(&c, crop_side, original)?
        }
    };
    if let Ok(gt) = r.gt_bbox() {
        if !region.bbox().contains(&gt)? {
            failures.push(StageFailure::MissedRegion);
        }
    }
    let origin = region.origin()?;

    let t1 = Instant::now();
    let lpr_raw = match be.lpr.complete(
        &view.crop(origin, crop_frame),
        &prompt(Stage::Lpr, crop_frame, crop_side)?,
        1,
        cfg.temperature,
    ) {
        Ok(v) => first(v),
        Err(e) => {
            failures.push(StageFailure::LprBackend(e.to_string()));
            None
        }
    };
    let lpr_parsed = lpr_raw.as_deref().map(|raw| parse_lpr(raw, crop_frame));
    let lpr_ms = ms_since(t1);

    let geometry = match lpr_parsed.as_ref() {
        Some(p) if p.format_ok => match (p.bbox, p.point1, p.point2) {
            (Some(b), Some(p1), Some(p2)) => Some((
                b.to_frame(original, Some(&origin))?,
                p1.to_frame(original, Some(&origin))?,
                p2.to_frame(original, Some(&origin))?,
            )),
            _ => None,
        },
        Some(_) => {
            failures.push(StageFailure::LprFormat);
            None
        }
        None => None,
    };

    let t2 = Instant::now();
    let mut pred_mask = None;
    if let Some((b, p1, p2)) = &geometry {
        match be.segmenter.segment(&view, b, (p1, p2)) {
            Ok(m) => pred_mask = Some(m),
            Err(e) => failures.push(StageFailure::SegmenterBackend(e.to_string())),
        }
    } else {
        pred_mask = Some(MaskRle::empty(original.width(), original.height())?);
    }
    let segment_ms = ms_since(t2);

    let gse_answer = gse_parsed.as_ref().and_then(|p| p.response.clone());
    let lpr_answer = lpr_parsed.as_ref().and_then(|p| p.response.clone());
    let pred_answer = match cfg.answer_source {
        AnswerSource::Gse => gse_answer.clone(),
        AnswerSource::Lpr => lpr_answer.clone(),
    };
    let trace = StageTrace {
        original_frame: [original.width(), original.height()],
        gse_frame: [gse_frame.width(), gse_frame.height()],
        gse_raw,
        gse_parsed: gse_parsed.as_ref().map(GseSummary::from),
        region_original: region.to_array(),
        crop_origin: origin.to_array(),
        crop_side,
        lpr_raw,
        lpr_parsed: lpr_parsed.as_ref().map(LprSummary::from),
        box_original: geometry.as_ref().map(|g| g.0.to_array()),
        points_original: geometry.as_ref().map(|g| [g.1.to_array(), g.2.to_array()]),
        gse_answer,
        lpr_answer,
        failures,
        timings: cfg.record_timings.then_some(Timings { gse_ms, lpr_ms, segment_ms }),
    };
    Ok(PredictionRecord {
        sample_id: r.id.clone(),
        pred_mask,
        pred_box: trace.box_original,
        pred_answer,
        stage_trace: Some(trace),
    })
}

/// Runs every record with at most `concurrency_cap` in flight. Results
/// follow input order; a set `cancel` flag makes unstarted samples return
/// [`PipelineError::Cancelled`].
pub fn run_batch(
    records: &[SampleRecord],
    cfg: &PipelineConfig,
    be: &Backends,
    cancel: &AtomicBool,
) -> Vec<Result<PredictionRecord, PipelineError>> {
    let work = || {
        records
            .par_iter()
            .map(|r| {
                if cancel.load(Ordering::Relaxed) {
                    return Err(PipelineError::Cancelled);
                }
                run_sample(r, cfg, be)
            })
            .collect()
    };
    match rayon::ThreadPoolBuilder::new().num_threads(cfg.concurrency_cap.max(1)).build() {
        Ok(pool) => pool.install(work),
        Err(e) => {
            log::warn!("thread pool unavailable ({e}); running on the global pool");
            work()
        }
    }
}

/// A local-stage training crop and the target geometry inside it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainCrop {
    pub sample_id: String,
    pub seed: u64,
    /// Original frame.
    pub crop_origin: [f64; 2],
    pub crop_side: u32,
    /// Crop frame.
    pub gt_box: [f64; 4],
    pub gt_points: [[f64; 2]; 2],
}

pub fn lpr_train_crop(r: &SampleRecord, seed: u64, cfg: &PipelineConfig) -> Result<TrainCrop, PipelineError> {
    let original = r.original_frame()?;
    let gt = r.gt_bbox()?;
    let side = cfg.crop_side_original;
    let region = if cfg.crop_augmentation {
        sample_candidates(&r.id, &gt, 1, side, seed, OffsetSampling::Uniform, 0.25)?.candidates[0]
    } else {
        if gt.width() > side as f64 || gt.height() > side as f64 {
            return Err(LabelError::GtExceedsRegion { width: gt.width(), height: gt.height(), side }.into());
        }
        let (cx, cy) = gt.center();
        clamp_region(&Point::clamped(cx, cy, original)?, side, original)?
    };
    let origin = region.origin()?;
    let crop = Frame::crop(side)?;
    let (p1, p2) = derive_gt_points(&r.mask.decode())?;
    Ok(TrainCrop {
        sample_id: r.id.clone(),
        seed,
        crop_origin: origin.to_array(),
        crop_side: side,
        gt_box: gt.to_frame(crop, Some(&origin))?.to_array(),
        gt_points: [p1.to_frame(crop, Some(&origin))?.to_array(), p2.to_frame(crop, Some(&origin))?.to_array()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{OracleGse, OracleLpr, OracleSegmenter, OracleTruth, ScriptedPolicy};
    use crate::dataset::{synth_generate, SynthConfig};
    use crate::metrics::{evaluate, MetricsConfig};
    use std::collections::HashMap;

    fn records(n: usize) -> Vec<SampleRecord> {
        synth_generate(n, 21, &SynthConfig::default()).into_iter().map(|s| s.record).collect()
    }

    fn truths(recs: &[SampleRecord]) -> Arc<HashMap<String, OracleTruth>> {
        Arc::new(
            recs.iter()
                .map(|r| (r.id.clone(), OracleTruth::from_mask(r.mask.clone(), r.reference_response()).unwrap()))
                .collect(),
        )
    }

    fn oracle(recs: &[SampleRecord]) -> Backends {
        let t = truths(recs);
        Backends {
            gse: Arc::new(OracleGse::new(t.clone(), 256)),
            lpr: Arc::new(OracleLpr::new(t.clone(), 0.0)),
            segmenter: Arc::new(OracleSegmenter::new(t)),
        }
    }

    #[test]
    fn oracle_run_is_perfect() {
        let recs = records(24);
        let cfg = PipelineConfig { record_timings: false, ..PipelineConfig::default() };
        let out: Vec<_> = run_batch(&recs, &cfg, &oracle(&recs), &AtomicBool::new(false))
            .into_iter()
            .collect::<Result<_, _>>()
            .unwrap();
        for (p, r) in out.iter().zip(&recs) {
            assert_eq!(p.sample_id, r.id);
            let t = p.stage_trace.as_ref().unwrap();
            assert!(t.failures.is_empty(), "{:?}", t.failures);
            assert_eq!(t.region_original[2] - t.region_original[0], 512.0);
        }
        let (rep, diff) = evaluate(&out, &recs, &MetricsConfig::default(), None).unwrap();
        assert!(diff.is_empty());
        assert_eq!(rep.segmentation.size.all.giou, Some(100.0));
        assert_eq!(rep.segmentation.size.all.ciou, Some(100.0));
        assert_eq!(rep.qa.all.mvqa.accuracy.unwrap_or(100.0), 100.0);
        assert_eq!(rep.qa.all.ovqa.accuracy.unwrap_or(100.0), 100.0);
    }

    #[test]
    fn missed_region_scores_zero() {
        let recs = records(6);
        let mut be = oracle(&recs);
        // A corner region far from every target.
        let far: HashMap<String, (f64, f64)> = recs
            .iter()
            .map(|r| {
                let (cx, cy) = r.gt_bbox().unwrap().center();
                let x = if cx < 1920.0 { 1900.0 } else { 0.0 };
                let y = if cy < 1080.0 { 1060.0 } else { 0.0 };
                (r.id.clone(), (x, y))
            })
            .collect();
        be.gse = Arc::new(ScriptedPolicy::rule(move |v, _, _| {
            let (x, y) = far[v.sample_id()];
            format!("<think>t</think>{{\"region\":[{x},{y}],\"response\":\"A\"}}")
        }));
        let cfg = PipelineConfig { record_timings: false, ..PipelineConfig::default() };
        for r in &recs {
            let p = run_sample(r, &cfg, &be).unwrap();
            let t = p.stage_trace.as_ref().unwrap();
            assert!(t.failures.contains(&StageFailure::MissedRegion), "{:?}", t.failures);
            let (rep, _) = evaluate(&[p], std::slice::from_ref(r), &MetricsConfig::default(), None).unwrap();
            assert_eq!(rep.segmentation.size.all.giou, Some(0.0));
        }
    }

    #[test]
    fn malformed_lpr_keeps_gse_answer() {
        let recs = records(6);
        let mut be = oracle(&recs);
        be.lpr = Arc::new(ScriptedPolicy::rule(|_, _, _| "<think>t</think>{\"bbox\": [1, 2".into()));
        let cfg = PipelineConfig { record_timings: false, ..PipelineConfig::default() };
        for r in &recs {
            let p = run_sample(r, &cfg, &be).unwrap();
            assert_eq!(p.pred_mask.as_ref().unwrap().area(), 0);
            assert_eq!(p.pred_answer.as_deref(), Some(r.reference_response().as_str()));
            assert!(p.stage_trace.unwrap().failures.contains(&StageFailure::LprFormat));
        }
    }

    #[test]
    fn gse_failure_falls_back_to_centre() {
        let recs = records(2);
        let mut be = oracle(&recs);
        be.gse = Arc::new(ScriptedPolicy::rule(|_, _, _| "nothing useful".into()));
        let cfg = PipelineConfig { record_timings: false, ..PipelineConfig::default() };
        let p = run_sample(&recs[0], &cfg, &be).unwrap();
        let t = p.stage_trace.unwrap();
        assert!(t.failures.contains(&StageFailure::RegionFallback));
        assert_eq!(t.region_original, [1664.0, 824.0, 2176.0, 1336.0]);
    }

    #[test]
    fn cancelled_batch_reports_cancelled() {
        let recs = records(4);
        let out = run_batch(&recs, &PipelineConfig::default(), &oracle(&recs), &AtomicBool::new(true));
        assert!(out.iter().all(|r| matches!(r, Err(PipelineError::Cancelled))));
    }

    #[test]
    fn train_crops() {
        let recs = records(10);
        let cfg = PipelineConfig::default();
        for r in &recs {
            let a = lpr_train_crop(r, 5, &cfg).unwrap();
            assert_eq!(a, lpr_train_crop(r, 5, &cfg).unwrap());
            let crop = Frame::crop(512).unwrap();
            let o = Point::new(a.crop_origin[0], a.crop_origin[1], r.original_frame().unwrap()).unwrap();
            let back =
                BBox::from_array(a.gt_box, crop).unwrap().to_frame(r.original_frame().unwrap(), Some(&o)).unwrap();
            assert_eq!(back, r.gt_bbox().unwrap());
        }
        let fixed = PipelineConfig { crop_augmentation: false, ..cfg };
        let c = lpr_train_crop(&recs[0], 5, &fixed).unwrap();
        let (cx, cy) = recs[0].gt_bbox().unwrap().center();
        let o = c.crop_origin;
        // Interior targets sit at the crop centre up to lattice snapping.
        if o[0] > 0.0 && o[0] < 3840.0 - 512.0 {
            assert!((o[0] + 256.0 - cx).abs() <= 0.5);
        }
        if o[1] > 0.0 && o[1] < 2160.0 - 512.0 {
            assert!((o[1] + 256.0 - cy).abs() <= 0.5);
        }
    }
}
