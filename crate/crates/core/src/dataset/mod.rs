//! Annotation records, manifest I/O, validation and size/spatial buckets.

mod stats;
mod synth;

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use stats::{stats, AxisCount, DistributionReport, StatsCell};
pub use synth::{synth_generate, synth_render, ShapeKind, SynthConfig, SynthScene};

use crate::geometry::{BBox, Frame};
use crate::mask::MaskRle;
use crate::parsing::{extract_answer_keywords, NormalizedAnswer};
use crate::rewards::TaskType;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Color,
    Shape,
    Position,
    Others,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [Attribute::Color, Attribute::Shape, Attribute::Position, Attribute::Others];

    pub fn as_str(&self) -> &'static str {
        match self {
            Attribute::Color => "color",
            Attribute::Shape => "shape",
            Attribute::Position => "position",
            Attribute::Others => "others",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SizeBucket {
    S,
    XS,
    XXS,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::S, SizeBucket::XS, SizeBucket::XXS];

    pub fn as_str(&self) -> &'static str {
        match self {
            SizeBucket::S => "S",
            SizeBucket::XS => "XS",
            SizeBucket::XXS => "XXS",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialBucket {
    Center,
    Middle,
    Border,
}

impl SpatialBucket {
    pub const ALL: [SpatialBucket; 3] = [SpatialBucket::Center, SpatialBucket::Middle, SpatialBucket::Border];

    pub fn as_str(&self) -> &'static str {
        match self {
            SpatialBucket::Center => "center",
            SpatialBucket::Middle => "middle",
            SpatialBucket::Border => "border",
        }
    }
}

/// One annotated question/answer/mask triplet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    pub task: TaskType,
    pub attribute: Attribute,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    pub mask: MaskRle,
    pub split: Split,
}

/// Index of an option letter `A`..`D` (either case).
pub fn option_index(letter: &str) -> Option<usize> {
    match letter.trim() {
        l if l.len() == 1 => {
            let c = l.chars().next()?.to_ascii_uppercase();
            ('A'..='D').contains(&c).then(|| (c as u8 - b'A') as usize)
        }
        _ => None,
    }
}

impl SampleRecord {
    /// Every invariant violated by this record.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.id.trim().is_empty() {
            out.push("empty id".to_string());
        }
        if self.width == 0 || self.height == 0 {
            out.push(format!("image size {}x{} is empty", self.width, self.height));
        }
        if self.question.trim().is_empty() {
            out.push("empty question".to_string());
        }
        if (self.mask.width(), self.mask.height()) != (self.width, self.height) {
            out.push(format!(
                "mask is {}x{}, image is {}x{}",
                self.mask.width(),
                self.mask.height(),
                self.width,
                self.height
            ));
        }
        if self.mask.area() == 0 {
            out.push("mask is empty".to_string());
        }
        match self.task {
            TaskType::Is => {
                if self.answer.is_some() {
                    out.push("IS records carry no answer".to_string());
                }
                if self.options.is_some() {
                    out.push("IS records carry no options".to_string());
                }
            }
            TaskType::Mvqa => match (&self.options, self.answer.as_deref()) {
                (None, _) => out.push("MVQA record has no options".to_string()),
                (Some(o), _) if o.is_empty() || o.len() > 4 => {
                    out.push(format!("MVQA needs 1 to 4 options, got {}", o.len()))
                }
                (_, None) => out.push("MVQA record has no answer".to_string()),
                (Some(o), Some(a)) => match option_index(a) {
                    Some(i) if i < o.len() => {}
                    _ => out.push(format!("MVQA answer `{a}` is not one of the option letters")),
                },
            },
            TaskType::Ovqa => {
                if self.answer.as_deref().is_none_or(|a| a.trim().is_empty()) {
                    out.push("OVQA record has no answer".to_string());
                }
                if self.options.is_some() {
                    out.push("OVQA records carry no options".to_string());
                }
            }
        }
        out
    }

    pub fn original_frame(&self) -> Result<Frame, crate::geometry::GeometryError> {
        Frame::original(self.width, self.height)
    }

    /// Tight box around the mask in the Original frame.
    pub fn gt_bbox(&self) -> Result<BBox, crate::mask::MaskError> {
        self.mask.bbox()
    }

    /// Normalized ground-truth answer for reward and metric comparison.
    pub fn gt_answer(&self) -> NormalizedAnswer {
        match self.task {
            TaskType::Is => NormalizedAnswer::Found(true),
            t => extract_answer_keywords(self.answer.as_deref().unwrap_or(""), t),
        }
    }

    /// A response that a perfect model would give.
    pub fn reference_response(&self) -> String {
        match self.task {
            TaskType::Is => "The target is found.".to_string(),
            _ => self.answer.clone().unwrap_or_default(),
        }
    }

    pub fn buckets(&self) -> (SizeBucket, SpatialBucket) {
        bucketize(self)
    }
}

/// Size bucket from exact integer comparison of `area / (width * height)`
/// against 0.017% and 0.055%; XS owns both endpoints.
pub fn size_bucket(area: u64, width: u32, height: u32) -> SizeBucket {
    let scaled = area as u128 * 100_000;
    let total = width as u128 * height as u128;
    if scaled > 55 * total {
        SizeBucket::S
    } else if scaled < 17 * total {
        SizeBucket::XXS
    } else {
        SizeBucket::XS
    }
}

/// Ring of the mask centroid by normalized Chebyshev distance to the image
/// center: up to 1/3 is center, up to 2/3 middle, beyond that border.
/// Pixel centers sit at `x + 0.5`.
pub fn spatial_bucket(area: u64, sum_x: u128, sum_y: u128, width: u32, height: u32) -> SpatialBucket {
    // d_x = |2*sum_x + area - W*area| / (W*area), likewise for y.
    let a = area as i128;
    let num = |s: u128, w: u32| (2 * s as i128 + a - w as i128 * a).abs();
    let (nx, ny) = (num(sum_x, width), num(sum_y, height));
    let (dx, dy) = (width as i128 * a, height as i128 * a);
    // d = max(nx/dx, ny/dy); compare d against k/3 without division.
    let within = |k: i128| 3 * nx <= k * dx && 3 * ny <= k * dy;
    if within(1) {
        SpatialBucket::Center
    } else if within(2) {
        SpatialBucket::Middle
    } else {
        SpatialBucket::Border
    }
}

pub fn bucketize(r: &SampleRecord) -> (SizeBucket, SpatialBucket) {
    let (area, sx, sy) = r.mask.moments();
    let size = size_bucket(area, r.width, r.height);
    let spatial = if area == 0 { SpatialBucket::Center } else { spatial_bucket(area, sx, sy, r.width, r.height) };
    (size, spatial)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub reason: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.id {
            Some(id) => write!(f, "line {} ({id}): {}", self.line, self.reason),
            None => write!(f, "line {}: {}", self.line, self.reason),
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest has {} invalid record(s); first: {}", .0.len(), .0[0])]
    Invalid(Vec<Finding>),
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Parses and validates a JSON-lines manifest, keeping every valid record
/// and a finding for every bad line. Blank lines are ignored.
pub fn read_manifest(reader: impl BufRead) -> std::io::Result<(Vec<SampleRecord>, Vec<Finding>)> {
    let mut records = Vec::new();
    let mut findings = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                findings.push(Finding { line: n, id: None, reason: e.to_string() });
                continue;
            }
        };
        let mut problems = rec.problems();
        if !seen.insert(rec.id.clone()) {
            problems.push("duplicate id".to_string());
        }
        if problems.is_empty() {
            records.push(rec);
        } else {
            findings.extend(problems.into_iter().map(|reason| Finding { line: n, id: Some(rec.id.clone()), reason }));
        }
    }
    Ok((records, findings))
}

/// Strict loader: any finding fails the whole manifest.
pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>, DatasetError> {
    let io = |source| DatasetError::Io { path: path.display().to_string(), source };
    let file = std::fs::File::open(path).map_err(io)?;
    let (records, findings) = read_manifest(BufReader::new(file)).map_err(io)?;
    if findings.is_empty() {
        Ok(records)
    } else {
        Err(DatasetError::Invalid(findings))
    }
}

pub fn write_manifest(mut w: impl Write, records: &[SampleRecord]) -> Result<(), DatasetError> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|source| DatasetError::Io { path: "<writer>".into(), source })?;
    }
    Ok(())
}

pub fn save_manifest(path: &Path, records: &[SampleRecord]) -> Result<(), DatasetError> {
    let io = |source| DatasetError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    write_manifest(&mut w, records)?;
    w.flush().map_err(io)
}
