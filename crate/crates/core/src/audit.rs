//! Offline reward scoring of logged rollouts, one JSON object per line, and
//! the flat group-scoring surface used by external trainers.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::config::{ConfigError, EngineConfig};
use crate::geometry::{BBox, Frame, GeometryError, Point, RegionBox};
use crate::grpo::{group_advantages, GrpoConfig, GrpoError};
use crate::parsing::{extract_answer_keywords, parse_gse, parse_lpr, NormalizedAnswer};
use crate::rewards::{r_gse, r_lpr, RewardBreakdown, RewardConfig, RewardTerm, Stage, TaskType};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("{sample_id}: {source}")]
    Geometry { sample_id: String, source: GeometryError },
    #[error("{sample_id}: missing {field} for the {stage} stage")]
    MissingField { sample_id: String, stage: &'static str, field: &'static str },
    #[error("group {sample_id}/{stage}: {source}")]
    Group { sample_id: String, stage: &'static str, source: GrpoError },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One logged completion with its ground truth. Local-stage geometry is in
/// the crop frame given by `frame`; global-stage boxes are in
/// `original_frame` and the completion in `frame`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditInput {
    pub sample_id: String,
    pub stage: Stage,
    pub raw_completion: String,
    pub task: TaskType,
    #[serde(default)]
    pub answer: Option<String>,
    pub frame: [u32; 2],
    #[serde(default)]
    pub original_frame: Option<[u32; 2]>,
    pub gt_box: [f64; 4],
    #[serde(default)]
    pub gt_points: Option<[[f64; 2]; 2]>,
    #[serde(default)]
    pub gt_region: Option<[f64; 4]>,
    /// Side of a centre-only region in `frame` pixels.
    #[serde(default)]
    pub region_side: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditOutput {
    pub sample_id: String,
    pub stage: Stage,
    pub raw_completion: String,
    pub breakdown: BTreeMap<RewardTerm, u8>,
    pub total: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAdvantages {
    pub sample_id: String,
    pub stage: Stage,
    pub totals: Vec<u32>,
    pub advantages: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Ground-truth answer in comparable form.
pub fn normalize_gt_answer(task: TaskType, answer: Option<&str>) -> NormalizedAnswer {
    match task {
        TaskType::Is => NormalizedAnswer::Found(true),
        t => extract_answer_keywords(answer.unwrap_or(""), t),
    }
}

/// Default centre-only region side for a global-stage frame.
pub const DEFAULT_GSE_REGION_SIDE: u32 = 256;

pub fn score(input: &AuditInput, cfg: &RewardConfig) -> Result<RewardBreakdown, AuditError> {
    let id = &input.sample_id;
    let geo = |source| AuditError::Geometry { sample_id: id.clone(), source };
    let missing = |field| AuditError::MissingField { sample_id: id.clone(), stage: input.stage.as_str(), field };
    let gt_answer = normalize_gt_answer(input.task, input.answer.as_deref());
    match input.stage {
        Stage::Lpr => {
            let frame = Frame::crop(input.frame[0]).map_err(geo)?;
            if input.frame[0] != input.frame[1] {
                return Err(AuditError::Schema { line: 0, message: format!("{id}: local-stage frame must be square") });
            }
            let [p1, p2] = input.gt_points.ok_or_else(|| missing("gt_points"))?;
            let gt_box = BBox::from_array(input.gt_box, frame).map_err(geo)?;
            let g1 = Point::new(p1[0], p1[1], frame).map_err(geo)?;
            let g2 = Point::new(p2[0], p2[1], frame).map_err(geo)?;
            let parsed = parse_lpr(&input.raw_completion, frame);
            Ok(r_lpr(&parsed, &gt_box, &g1, &g2, &gt_answer, input.task, cfg))
        }
        Stage::Gse => {
            let [ow, oh] = input.original_frame.ok_or_else(|| missing("original_frame"))?;
            let original = Frame::original(ow, oh).map_err(geo)?;
            let frame = Frame::gse_input(input.frame[0], input.frame[1]).map_err(geo)?;
            let region = input.gt_region.ok_or_else(|| missing("gt_region"))?;
            let gt_region = RegionBox::from_bbox(BBox::from_array(region, original).map_err(geo)?).map_err(geo)?;
            let gt_box = BBox::from_array(input.gt_box, original).map_err(geo)?;
            let side = input.region_side.unwrap_or(DEFAULT_GSE_REGION_SIDE);
            let parsed = parse_gse(&input.raw_completion, frame, side);
            Ok(r_gse(&parsed, &gt_region, &gt_box, &gt_answer, input.task, cfg))
        }
    }
}

pub fn audit_one(input: &AuditInput, cfg: &RewardConfig) -> Result<AuditOutput, AuditError> {
    let b = score(input, cfg)?;
    Ok(AuditOutput {
        sample_id: input.sample_id.clone(),
        stage: input.stage,
        raw_completion: input.raw_completion.clone(),
        breakdown: b.terms,
        total: b.total,
    })
}

pub fn read_audit_inputs(r: impl BufRead) -> Result<Vec<AuditInput>, AuditError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| AuditError::Schema { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

/// Splits scored lines into runs of equal `(sample_id, stage)` and
/// normalizes each run; every run must hold exactly one group.
pub fn group_runs(
    outputs: &[AuditOutput],
    cfg: &GrpoConfig,
    seed: Option<u64>,
) -> Result<Vec<GroupAdvantages>, AuditError> {
    let mut groups = Vec::new();
    let mut start = 0;
    while start < outputs.len() {
        let key = (&outputs[start].sample_id, outputs[start].stage);
        let end =
            outputs[start..].iter().position(|o| (&o.sample_id, o.stage) != key).map_or(outputs.len(), |p| start + p);
        let totals: Vec<u32> = outputs[start..end].iter().map(|o| o.total).collect();
        let rewards: Vec<f64> = totals.iter().map(|&t| t as f64).collect();
        let advantages = group_advantages(&rewards, cfg).map_err(|source| AuditError::Group {
            sample_id: key.0.clone(),
            stage: key.1.as_str(),
            source,
        })?;
        groups.push(GroupAdvantages { sample_id: key.0.clone(), stage: key.1, totals, advantages, seed });
        start = end;
    }
    Ok(groups)
}

pub fn write_jsonl<T: Serialize>(mut w: impl Write, items: &[T]) -> std::io::Result<()> {
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Flat ground truth of one group, shared by every completion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupTruth {
    pub task: TaskType,
    #[serde(default)]
    pub answer: Option<String>,
    pub frame: [u32; 2],
    #[serde(default)]
    pub original_frame: Option<[u32; 2]>,
    pub gt_box: [f64; 4],
    #[serde(default)]
    pub gt_points: Option<[[f64; 2]; 2]>,
    #[serde(default)]
    pub gt_region: Option<[f64; 4]>,
    #[serde(default)]
    pub region_side: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreGroupRequest {
    #[serde(default)]
    pub sample_id: String,
    pub stage: Stage,
    pub raw_completions: Vec<String>,
    pub gt: GroupTruth,
    /// Dotted config overrides, e.g. `{"rewards.point_thresh": 50}`.
    #[serde(default)]
    pub overrides: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreGroupResponse {
    pub totals: Vec<f64>,
    pub breakdowns: Vec<BTreeMap<RewardTerm, u8>>,
    pub advantages: Vec<f64>,
}

impl ScoreGroupRequest {
    pub fn audit_inputs(&self) -> Vec<AuditInput> {
        let g = &self.gt;
        self.raw_completions
            .iter()
            .map(|raw| AuditInput {
                sample_id: self.sample_id.clone(),
                stage: self.stage,
                raw_completion: raw.clone(),
                task: g.task,
                answer: g.answer.clone(),
                frame: g.frame,
                original_frame: g.original_frame,
                gt_box: g.gt_box,
                gt_points: g.gt_points,
                gt_region: g.gt_region,
                region_side: g.region_side,
            })
            .collect()
    }
}

/// Scores a group with the same code path as `reward-audit`.
pub fn score_group(req: &ScoreGroupRequest, base: &EngineConfig) -> Result<ScoreGroupResponse, AuditError> {
    let overrides: Vec<String> = req.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let cfg = base.clone().with_overrides(&overrides)?;
    cfg.rewards.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let outputs = req.audit_inputs().iter().map(|i| audit_one(i, &cfg.rewards)).collect::<Result<Vec<_>, _>>()?;
    let grpo = GrpoConfig { group_size: outputs.len(), ..cfg.grpo };
    let advantages = match group_runs(&outputs, &grpo, None)?.pop() {
        Some(g) => g.advantages,
        None => Vec::new(),
    };
    Ok(ScoreGroupResponse {
        totals: outputs.iter().map(|o| o.total as f64).collect(),
        breakdowns: outputs.into_iter().map(|o| o.breakdown).collect(),
        advantages,
    })
}

/// JSON in, JSON out.
pub fn score_group_json(request: &str, base: &EngineConfig) -> Result<String, AuditError> {
    let req: ScoreGroupRequest =
        serde_json::from_str(request).map_err(|e| AuditError::Schema { line: 1, message: e.to_string() })?;
    Ok(serde_json::to_string(&score_group(&req, base)?).expect("response serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lpr_input(raw: &str) -> AuditInput {
        AuditInput {
            sample_id: "s1".into(),
            stage: Stage::Lpr,
            raw_completion: raw.into(),
            task: TaskType::Ovqa,
            answer: Some("red kite".into()),
            frame: [512, 512],
            original_frame: None,
            gt_box: [100.0, 100.0, 140.0, 130.0],
            gt_points: Some([[110.0, 110.0], [130.0, 120.0]]),
            gt_region: None,
            region_side: None,
        }
    }

    const PERFECT_LPR: &str = r#"<think>ok</think>{"bbox":[100,100,140,130],"points_1":[130,120],"points_2":[110,110],"response":"a red kite"}"#;
    const PERFECT_GSE: &str = r#"<think>ok</think>{"region":[400,300],"response":"Red kite"}"#;

    fn gse_input(raw: &str) -> AuditInput {
        AuditInput {
            sample_id: "s2".into(),
            stage: Stage::Gse,
            raw_completion: raw.into(),
            task: TaskType::Ovqa,
            answer: Some("red kite".into()),
            frame: [1920, 1080],
            original_frame: Some([3840, 2160]),
            gt_box: [780.0, 580.0, 820.0, 620.0],
            gt_points: None,
            gt_region: Some([544.0, 344.0, 1056.0, 856.0]),
            region_side: None,
        }
    }

    #[test]
    fn perfect_lines() {
        let cfg = RewardConfig::default();
        let l = audit_one(&lpr_input(PERFECT_LPR), &cfg).unwrap();
        assert_eq!(l.total, 6);
        let g = audit_one(&gse_input(PERFECT_GSE), &cfg).unwrap();
        assert_eq!(g.total, 7, "{:?}", g.breakdown);
    }

    #[test]
    fn wire_shape() {
        let l = audit_one(&lpr_input(PERFECT_LPR), &RewardConfig::default()).unwrap();
        let s = serde_json::to_string(&l).unwrap();
        assert!(s.starts_with(r#"{"sample_id":"s1","stage":"lpr","raw_completion":"#));
        assert!(
            s.contains(r#""breakdown":{"b_iou":1,"b_l1":1,"point":1,"format1":1,"response":1,"think":1},"total":6}"#),
            "{s}"
        );
        let line = serde_json::to_string(&lpr_input(PERFECT_LPR)).unwrap();
        let back = read_audit_inputs(line.as_bytes()).unwrap();
        assert_eq!(back, vec![lpr_input(PERFECT_LPR)]);
    }

    #[test]
    fn missing_gt_is_an_error() {
        let mut i = lpr_input(PERFECT_LPR);
        i.gt_points = None;
        assert!(matches!(audit_one(&i, &RewardConfig::default()), Err(AuditError::MissingField { .. })));
        assert!(read_audit_inputs("{\"sample_id\":1}".as_bytes()).is_err());
    }

    #[test]
    fn groups_follow_runs() {
        let cfg = RewardConfig::default();
        let mut outs = Vec::new();
        for raw in [PERFECT_LPR, "garbage"] {
            outs.push(audit_one(&lpr_input(raw), &cfg).unwrap());
        }
        let g = group_runs(&outs, &GrpoConfig { group_size: 2, ..GrpoConfig::default() }, Some(3)).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].totals, vec![6, 0]);
        assert_eq!(g[0].advantages, vec![1.0, -1.0]);
        assert!(group_runs(&outs, &GrpoConfig::default(), None).is_err());
    }

    #[test]
    fn score_group_matches_audit() {
        let req = ScoreGroupRequest {
            sample_id: "s1".into(),
            stage: Stage::Lpr,
            raw_completions: vec![PERFECT_LPR.into(); 8],
            gt: GroupTruth {
                task: TaskType::Ovqa,
                answer: Some("red kite".into()),
                frame: [512, 512],
                original_frame: None,
                gt_box: [100.0, 100.0, 140.0, 130.0],
                gt_points: Some([[110.0, 110.0], [130.0, 120.0]]),
                gt_region: None,
                region_side: None,
            },
            overrides: BTreeMap::new(),
        };
        let r = score_group(&req, &EngineConfig::default()).unwrap();
        assert_eq!(r.totals, vec![6.0; 8]);
        assert_eq!(r.advantages, vec![0.0; 8]);
        let mut req2 = req.clone();
        req2.overrides.insert("rewards.disabled_terms".into(), serde_json::json!(["think"]));
        let r2 = score_group(&req2, &EngineConfig::default()).unwrap();
        assert_eq!(r2.totals, vec![5.0; 8]);
        let json = score_group_json(&serde_json::to_string(&req).unwrap(), &EngineConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<ScoreGroupResponse>(&json).unwrap(), r);
    }

    #[test]
    fn side_511_region_loses_size() {
        let raw = r#"<think>ok</think>{"region":[144,44,399.5,299.5],"response":"red kite"}"#;
        let b = score(&gse_input(raw), &RewardConfig::default()).unwrap();
        assert_eq!(b.get(RewardTerm::Size), Some(0));
    }
}
