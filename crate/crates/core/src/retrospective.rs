//! Ground-truth regions for the global stage: sample covering squares
//! around the target, score each by how well the local policy localizes the
//! target inside it, and keep the best one.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{ImageSource, ImageView, PolicyBackend};
use crate::dataset::SampleRecord;
use crate::geometry::{box_iou, clamp_region, BBox, Frame, GeometryError, Point, Reframe, RegionBox};
use crate::mask::MaskError;
use crate::parsing::parse_lpr;
use crate::prompt::{PromptError, PromptTemplates, PromptVars};
use crate::rewards::Stage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelError {
    #[error("target box {width}x{height} does not fit in a {side}px region")]
    GtExceedsRegion { width: f64, height: f64, side: u32 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetSampling {
    /// Uniform over every integer origin whose square covers the target.
    #[default]
    Uniform,
    /// Normal around the centre of the feasible origins, clipped to them.
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelerConfig {
    pub n_cand: usize,
    pub side: u32,
    /// Local-policy completions averaged per candidate.
    pub rollouts_per_candidate: usize,
    pub temperature: f64,
    pub sampling: OffsetSampling,
    /// Gaussian std as a fraction of the feasible extent.
    pub gaussian_sigma: f64,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self {
            n_cand: 8,
            side: 512,
            rollouts_per_candidate: 1,
            temperature: 0.0,
            sampling: OffsetSampling::Uniform,
            gaussian_sigma: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub sample_id: String,
    pub candidates: Vec<RegionBox>,
    pub rng_seed: u64,
    /// No integer origin covers the target; every candidate is the single
    /// clamped placement around its centre.
    pub fallback: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Lpr,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionLabel {
    pub sample_id: String,
    pub region: [f64; 4],
    pub scores: Vec<f64>,
    pub chosen_index: usize,
    pub provenance: Provenance,
    pub seed: u64,
    #[serde(default)]
    pub low_confidence: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Integer origins along one axis whose square `[o, o + side)` covers
/// `[lo, hi)` and stays inside `[0, limit)`.
fn feasible(lo: f64, hi: f64, side: u32, limit: u32) -> Option<(u32, u32)> {
    let first = (hi - side as f64).ceil().max(0.0);
    let last = lo.floor().min((limit - side) as f64);
    (first <= last).then_some((first as u32, last as u32))
}

fn draw(rng: &mut ChaCha8Rng, (a, b): (u32, u32), sampling: OffsetSampling, sigma: f64) -> u32 {
    match sampling {
        OffsetSampling::Uniform => rng.random_range(a..=b),
        OffsetSampling::Gaussian => {
            let mid = (a as f64 + b as f64) / 2.0;
            let sd = ((b - a) as f64 * sigma).max(1e-9);
            let v = Normal::new(mid, sd).expect("positive std").sample(rng);
            (v.round().clamp(a as f64, b as f64)) as u32
        }
    }
}

pub fn sample_candidates(
    sample_id: &str,
    gt_box: &BBox,
    n_cand: usize,
    side: u32,
    seed: u64,
    sampling: OffsetSampling,
    sigma: f64,
) -> Result<CandidateSet, LabelError> {
    let frame = gt_box.frame();
    if gt_box.width() > side as f64 || gt_box.height() > side as f64 {
        return Err(LabelError::GtExceedsRegion { width: gt_box.width(), height: gt_box.height(), side });
    }
    if side > frame.width() || side > frame.height() {
        return Err(GeometryError::RegionTooLarge { side, width: frame.width(), height: frame.height() }.into());
    }
    let fx = feasible(gt_box.x_min(), gt_box.x_max(), side, frame.width());
    let fy = feasible(gt_box.y_min(), gt_box.y_max(), side, frame.height());
    let (candidates, fallback) = match fx.zip(fy) {
        Some((rx, ry)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = (0..n_cand)
                .map(|_| {
                    let x = draw(&mut rng, rx, sampling, sigma);
                    let y = draw(&mut rng, ry, sampling, sigma);
                    RegionBox::new(x as f64, y as f64, side, frame)
                })
                .collect::<Result<Vec<_>, _>>()?;
            (c, false)
        }
        None => {
            log::warn!("{sample_id}: no integer {side}px placement covers the target; using the clamped one");
            let (cx, cy) = gt_box.center();
            let r = clamp_region(&Point::clamped(cx, cy, frame)?, side, frame)?;
            (vec![r; n_cand], true)
        }
    };
    Ok(CandidateSet { sample_id: sample_id.to_string(), candidates, rng_seed: seed, fallback })
}

/// Mean IoU of the local policy's boxes for one candidate crop.
fn score_candidate(
    region: &RegionBox,
    gt_box: &BBox,
    view: &ImageView,
    lpr: &dyn PolicyBackend,
    prompt: &str,
    cfg: &LabelerConfig,
) -> (f64, Option<String>) {
    let origin = match region.origin() {
        Ok(o) => o,
        Err(e) => return (0.0, Some(e.to_string())),
    };
    let crop_frame = match Frame::crop(region.side()) {
        Ok(f) => f,
        Err(e) => return (0.0, Some(e.to_string())),
    };
    let k = cfg.rollouts_per_candidate.max(1);
    let outs = match lpr.complete(&view.crop(origin, crop_frame), prompt, k, cfg.temperature) {
        Ok(o) => o,
        Err(e) => return (0.0, Some(format!("local policy failed: {e}"))),
    };
    let total: f64 = outs
        .iter()
        .map(|raw| {
            let p = parse_lpr(raw, crop_frame);
            p.bbox
                .filter(|_| p.format_ok)
                .and_then(|b| b.to_frame(gt_box.frame(), Some(&origin)).ok())
                .and_then(|b| box_iou(&b, gt_box).ok())
                .unwrap_or(0.0)
        })
        .sum();
    (total / k as f64, None)
}

/// First index of the maximum.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn label_region(
    cands: &CandidateSet,
    gt_box: &BBox,
    view: &ImageView,
    lpr: &dyn PolicyBackend,
    prompt: &str,
    cfg: &LabelerConfig,
) -> RegionLabel {
    let scored: Vec<(f64, Option<String>)> =
        cands.candidates.par_iter().map(|r| score_candidate(r, gt_box, view, lpr, prompt, cfg)).collect();
    let scores: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let mut notes: Vec<String> =
        scored.iter().enumerate().filter_map(|(i, (_, n))| n.as_ref().map(|n| format!("candidate {i}: {n}"))).collect();
    if cands.fallback {
        notes.push("no covering placement; clamped region used".into());
    }
    let chosen_index = argmax(&scores);
    RegionLabel {
        sample_id: cands.sample_id.clone(),
        region: cands.candidates.get(chosen_index).map(|r| r.to_array()).unwrap_or_default(),
        low_confidence: scores.iter().all(|&s| s == 0.0),
        scores,
        chosen_index,
        provenance: Provenance::Lpr,
        seed: cands.rng_seed,
        notes,
    }
}

/// One random covering region, no policy queries.
pub fn ablation_random_label(
    sample_id: &str,
    gt_box: &BBox,
    side: u32,
    seed: u64,
    cfg: &LabelerConfig,
) -> Result<RegionLabel, LabelError> {
    let c = sample_candidates(sample_id, gt_box, 1, side, seed, cfg.sampling, cfg.gaussian_sigma)?;
    Ok(RegionLabel {
        sample_id: sample_id.to_string(),
        region: c.candidates[0].to_array(),
        scores: Vec::new(),
        chosen_index: 0,
        provenance: Provenance::Random,
        seed,
        low_confidence: false,
        notes: if c.fallback { vec!["no covering placement; clamped region used".into()] } else { Vec::new() },
    })
}

/// Labels one record end to end: target box from its mask, candidates,
/// local-policy prompt and scoring.
pub fn label_record(
    record: &SampleRecord,
    image_root: Option<&std::path::Path>,
    lpr: &dyn PolicyBackend,
    prompts: &PromptTemplates,
    cfg: &LabelerConfig,
    seed: u64,
) -> Result<RegionLabel, LabelError> {
    let frame = record.original_frame()?;
    let gt_box = record.gt_bbox()?;
    let cands = sample_candidates(&record.id, &gt_box, cfg.n_cand, cfg.side, seed, cfg.sampling, cfg.gaussian_sigma)?;
    let prompt = prompts.render(
        Stage::Lpr,
        record.task,
        &PromptVars {
            question: &record.question,
            options: record.options.as_deref(),
            frame: Frame::crop(cfg.side)?,
            region_side: cfg.side,
        },
    )?;
    let path = match image_root {
        Some(root) => root.join(&record.image_path),
        None => record.image_path.clone().into(),
    };
    let view = ImageView::new(&record.id, Arc::new(ImageSource::file(path)), frame);
    Ok(label_region(&cands, &gt_box, &view, lpr, &prompt, cfg))
}

/// Labels every record in order, each with its own seed derived from
/// `seed` and the record id; per-record failures stay isolated.
pub fn label_records(
    records: &[SampleRecord],
    image_root: Option<&std::path::Path>,
    lpr: &dyn PolicyBackend,
    prompts: &PromptTemplates,
    cfg: &LabelerConfig,
    seed: u64,
) -> Vec<Result<RegionLabel, LabelError>> {
    records.iter().map(|r| label_record(r, image_root, lpr, prompts, cfg, crate::derive_seed(seed, &r.id))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ScriptedPolicy;

    fn orig() -> Frame {
        Frame::original(3840, 2160).unwrap()
    }

    fn gt() -> BBox {
        BBox::new(1000.0, 1000.0, 1100.0, 1100.0, orig()).unwrap()
    }

    #[test]
    fn candidates_cover_target() {
        let c = sample_candidates("s", &gt(), 8, 512, 1, OffsetSampling::Uniform, 0.25).unwrap();
        assert_eq!(c.candidates.len(), 8);
        for r in &c.candidates {
            assert!(r.bbox().contains(&gt()).unwrap());
            assert_eq!(r.side(), 512);
        }
        let again = sample_candidates("s", &gt(), 8, 512, 1, OffsetSampling::Uniform, 0.25).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn exact_fit_repeats_one_candidate() {
        let b = BBox::new(100.0, 200.0, 612.0, 712.0, orig()).unwrap();
        let c = sample_candidates("s", &b, 5, 512, 3, OffsetSampling::Uniform, 0.25).unwrap();
        assert!(c.candidates.iter().all(|r| r.to_array() == [100.0, 200.0, 612.0, 712.0]));
    }

    #[test]
    fn too_large_target_errors() {
        let b = BBox::new(0.0, 0.0, 600.0, 100.0, orig()).unwrap();
        assert!(matches!(
            sample_candidates("s", &b, 5, 512, 3, OffsetSampling::Uniform, 0.25),
            Err(LabelError::GtExceedsRegion { .. })
        ));
    }

    #[test]
    fn gaussian_mode_stays_feasible() {
        let c = sample_candidates("s", &gt(), 50, 512, 9, OffsetSampling::Gaussian, 0.25).unwrap();
        assert!(c.candidates.iter().all(|r| r.bbox().contains(&gt()).unwrap()));
    }

    fn view() -> ImageView {
        ImageView::new("s", Arc::new(ImageSource::file("unused")), orig())
    }

    #[test]
    fn exact_policy_ties_pick_first() {
        let lpr = ScriptedPolicy::rule(|v, _, _| {
            let o = v.crop_origin().unwrap();
            format!(
                "<think>t</think>{{\"bbox\":[{},{},{},{}],\"points_1\":[1,1],\"points_2\":[2,2],\"response\":\"x\"}}",
                1000.0 - o.x(),
                1000.0 - o.y(),
                1100.0 - o.x(),
                1100.0 - o.y()
            )
        });
        let c = sample_candidates("s", &gt(), 8, 512, 4, OffsetSampling::Uniform, 0.25).unwrap();
        let l = label_region(&c, &gt(), &view(), &lpr, "p", &LabelerConfig::default());
        assert_eq!(l.scores, vec![1.0; 8]);
        assert_eq!(l.chosen_index, 0);
        assert!(!l.low_confidence);
    }

    #[test]
    fn malformed_policy_is_low_confidence() {
        let lpr = ScriptedPolicy::rule(|_, _, _| "no json here".to_string());
        let c = sample_candidates("s", &gt(), 4, 512, 4, OffsetSampling::Uniform, 0.25).unwrap();
        let l = label_region(&c, &gt(), &view(), &lpr, "p", &LabelerConfig::default());
        assert_eq!(l.scores, vec![0.0; 4]);
        assert!(l.low_confidence);
        assert_eq!(l.chosen_index, 0);
    }

    #[test]
    fn random_ablation() {
        let cfg = LabelerConfig::default();
        let a = ablation_random_label("s", &gt(), 512, 11, &cfg).unwrap();
        assert_eq!(a, ablation_random_label("s", &gt(), 512, 11, &cfg).unwrap());
        assert_eq!(a.provenance, Provenance::Random);
        let r = BBox::from_array(a.region, orig()).unwrap();
        assert!(r.contains(&gt()).unwrap());
        let c = sample_candidates("s", &gt(), 1, 512, 11, cfg.sampling, cfg.gaussian_sigma).unwrap();
        assert_eq!(c.candidates[0].to_array(), a.region);
    }

    #[test]
    fn json_shape() {
        let a = ablation_random_label("s", &gt(), 512, 11, &LabelerConfig::default()).unwrap();
        let v: serde_json::Value = serde_json::to_value(&a).unwrap();
        for k in ["sample_id", "region", "scores", "chosen_index", "provenance", "seed"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["provenance"], "random");
    }
}
