//! Binary reward terms for both stages and their equal-weight sums.
//!
//! Every threshold is strict: "less than" for distances, "greater than"
//! for IoU and fuzzy similarity.

mod fuzzy;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fuzzy::{fuzzy_ratio, matching_characters};

use crate::geometry::{box_iou, box_l1_with, point_l1, BBox, BoxL1Mode, Point, Reframe, RegionBox};
use crate::parsing::{NormalizedAnswer, ParsedGseOutput, ParsedLprOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskType {
    #[serde(rename = "IS")]
    Is,
    #[serde(rename = "MVQA")]
    Mvqa,
    #[serde(rename = "OVQA")]
    Ovqa,
}

impl TaskType {
    pub const ALL: [TaskType; 3] = [TaskType::Is, TaskType::Mvqa, TaskType::Ovqa];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskType::Is => "IS",
            TaskType::Mvqa => "MVQA",
            TaskType::Ovqa => "OVQA",
        }
    }
}

/// Which policy a completion came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Gse,
    Lpr,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Gse => "gse",
            Stage::Lpr => "lpr",
        }
    }
}

/// Declaration order is the serialization order of a breakdown.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RewardTerm {
    #[serde(rename = "b_iou")]
    BoxIou,
    #[serde(rename = "b_l1")]
    BoxL1,
    #[serde(rename = "point")]
    Point,
    #[serde(rename = "format1")]
    Format1,
    #[serde(rename = "region_iou")]
    RegionIou,
    #[serde(rename = "region_l1")]
    RegionL1,
    #[serde(rename = "size")]
    Size,
    #[serde(rename = "cover")]
    Cover,
    #[serde(rename = "format2")]
    Format2,
    #[serde(rename = "response")]
    Response,
    #[serde(rename = "think")]
    Think,
}

impl RewardTerm {
    pub const LPR: [RewardTerm; 6] = [
        RewardTerm::BoxIou,
        RewardTerm::BoxL1,
        RewardTerm::Point,
        RewardTerm::Format1,
        RewardTerm::Response,
        RewardTerm::Think,
    ];

    pub const GSE: [RewardTerm; 7] = [
        RewardTerm::RegionIou,
        RewardTerm::RegionL1,
        RewardTerm::Size,
        RewardTerm::Cover,
        RewardTerm::Format2,
        RewardTerm::Response,
        RewardTerm::Think,
    ];

    pub fn terms_for(stage: Stage) -> &'static [RewardTerm] {
        match stage {
            Stage::Gse => &Self::GSE,
            Stage::Lpr => &Self::LPR,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardConfigError {
    #[error("threshold `{0}` must be positive, got {1}")]
    NonPositive(&'static str, f64),
    #[error("fuzzy threshold must lie in (0, 1], got {0}")]
    FuzzyRange(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub point_thresh: f64,
    pub box_l1_thresh: f64,
    pub iou_thresh: f64,
    pub region_l1_thresh: f64,
    pub fuzzy_thresh: f64,
    pub fixed_region_side_original: u32,
    pub l1_mode: BoxL1Mode,
    /// Terms switched off for ablations; they are dropped from breakdowns.
    pub disabled_terms: BTreeSet<RewardTerm>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            point_thresh: 100.0,
            box_l1_thresh: 10.0,
            iou_thresh: 0.5,
            region_l1_thresh: 10.0,
            fuzzy_thresh: 0.8,
            fixed_region_side_original: 512,
            l1_mode: BoxL1Mode::Mean,
            disabled_terms: BTreeSet::new(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardConfigError> {
        for (name, v) in [
            ("point_thresh", self.point_thresh),
            ("box_l1_thresh", self.box_l1_thresh),
            ("iou_thresh", self.iou_thresh),
            ("region_l1_thresh", self.region_l1_thresh),
            ("fixed_region_side_original", self.fixed_region_side_original as f64),
        ] {
            if !(v > 0.0) {
                return Err(RewardConfigError::NonPositive(name, v));
            }
        }
        if !(self.fuzzy_thresh > 0.0 && self.fuzzy_thresh <= 1.0) {
            return Err(RewardConfigError::FuzzyRange(self.fuzzy_thresh));
        }
        Ok(())
    }

    pub fn enabled(&self, term: RewardTerm) -> bool {
        !self.disabled_terms.contains(&term)
    }

    pub fn without(mut self, term: RewardTerm) -> Self {
        self.disabled_terms.insert(term);
        self
    }
}

/// Per-term binary rewards and their sum.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub terms: BTreeMap<RewardTerm, u8>,
    pub total: u32,
}

impl RewardBreakdown {
    fn build(cfg: &RewardConfig, values: impl IntoIterator<Item = (RewardTerm, bool)>) -> Self {
        let terms: BTreeMap<RewardTerm, u8> =
            values.into_iter().filter(|(t, _)| cfg.enabled(*t)).map(|(t, v)| (t, v as u8)).collect();
        let total = terms.values().map(|&v| v as u32).sum();
        Self { terms, total }
    }

    pub fn get(&self, term: RewardTerm) -> Option<u8> {
        self.terms.get(&term).copied()
    }
}

/// Task-conditional correctness of a normalized answer.
pub fn r_response(answer: &NormalizedAnswer, gt: &NormalizedAnswer, task: TaskType, cfg: &RewardConfig) -> u8 {
    let ok = match (task, answer, gt) {
        (TaskType::Is, NormalizedAnswer::Found(found), _) => *found,
        (TaskType::Mvqa, NormalizedAnswer::Choice(Some(a)), NormalizedAnswer::Choice(Some(g))) => a == g,
        (TaskType::Ovqa, NormalizedAnswer::Text(a), NormalizedAnswer::Text(g)) => fuzzy_ratio(a, g) > cfg.fuzzy_thresh,
        _ => false,
    };
    ok as u8
}

fn response_term(response: Option<&str>, gt_answer: &NormalizedAnswer, task: TaskType, cfg: &RewardConfig) -> bool {
    response.is_some_and(|r| {
        let ans = crate::parsing::extract_answer_keywords(r, task);
        r_response(&ans, gt_answer, task, cfg) == 1
    })
}

/// Both predicted points lie within the threshold of the GT points, under
/// either the given order or the swapped one.
fn points_close(p1: &Point, p2: &Point, g1: &Point, g2: &Point, thresh: f64) -> bool {
    let close = |a: &Point, b: &Point| point_l1(a, b).is_ok_and(|d| d < thresh);
    (close(p1, g1) && close(p2, g2)) || (close(p1, g2) && close(p2, g1))
}

/// Local-stage reward. GT geometry is expected in the crop frame.
pub fn r_lpr(
    parsed: &ParsedLprOutput,
    gt_box: &BBox,
    gt_p1: &Point,
    gt_p2: &Point,
    gt_answer: &NormalizedAnswer,
    task: TaskType,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let geometry = parsed.format_ok.then_some(()).and(parsed.bbox.zip(parsed.point1).zip(parsed.point2));
    let (b_iou, b_l1, point) = match geometry {
        Some(((bbox, p1), p2)) => (
            box_iou(&bbox, gt_box).is_ok_and(|v| v > cfg.iou_thresh),
            box_l1_with(&bbox, gt_box, cfg.l1_mode).is_ok_and(|v| v < cfg.box_l1_thresh),
            points_close(&p1, &p2, gt_p1, gt_p2, cfg.point_thresh),
        ),
        None => (false, false, false),
    };
    RewardBreakdown::build(
        cfg,
        [
            (RewardTerm::BoxIou, b_iou),
            (RewardTerm::BoxL1, b_l1),
            (RewardTerm::Point, point),
            (RewardTerm::Format1, parsed.format_ok),
            (RewardTerm::Response, response_term(parsed.response.as_deref(), gt_answer, task, cfg)),
            (RewardTerm::Think, parsed.think_ok),
        ],
    )
}

/// Global-stage reward. The predicted region is mapped into the frame of
/// `gt_region` (the Original frame) before comparison.
pub fn r_gse(
    parsed: &ParsedGseOutput,
    gt_region: &RegionBox,
    gt_box: &BBox,
    gt_answer: &NormalizedAnswer,
    task: TaskType,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let target = gt_region.frame();
    let region = parsed.format_ok.then_some(parsed.region).flatten().and_then(|r| r.to_frame(target, None).ok());
    let side = cfg.fixed_region_side_original as f64;
    let (iou, l1, size, cover) = match region {
        Some(r) => (
            box_iou(&r, gt_region.bbox()).is_ok_and(|v| v > cfg.iou_thresh),
            box_l1_with(&r, gt_region.bbox(), cfg.l1_mode).is_ok_and(|v| v < cfg.region_l1_thresh),
            r.width() == side && r.height() == side,
            r.contains(gt_box).unwrap_or(false),
        ),
        None => (false, false, false, false),
    };
    RewardBreakdown::build(
        cfg,
        [
            (RewardTerm::RegionIou, iou),
            (RewardTerm::RegionL1, l1),
            (RewardTerm::Size, size),
            (RewardTerm::Cover, cover),
            (RewardTerm::Format2, parsed.format_ok),
            (RewardTerm::Response, response_term(parsed.response.as_deref(), gt_answer, task, cfg)),
            (RewardTerm::Think, parsed.think_ok),
        ],
    )
}
