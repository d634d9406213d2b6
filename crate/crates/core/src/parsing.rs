//! Post-processing of raw policy completions.
//!
//! A canonical completion is `<think>REASONING</think>{JSON}`. The local
//! stage answers with `{"bbox", "points_1", "points_2", "response"}` and the
//! global stage with `{"region", "response"}`. Parsing never fails: problems
//! only clear the `format_ok` / `think_ok` flags that feed the format
//! rewards.

use serde::Serialize;
use serde_json::{Map, Value};

use crate::geometry::{clamp_region, BBox, Frame, Point};
use crate::rewards::TaskType;

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";

pub const LPR_KEYS: [&str; 4] = ["bbox", "points_1", "points_2", "response"];
pub const GSE_KEYS: [&str; 2] = ["region", "response"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParsedLprOutput {
    pub think: Option<String>,
    pub bbox: Option<BBox>,
    pub point1: Option<Point>,
    pub point2: Option<Point>,
    pub response: Option<String>,
    pub format_ok: bool,
    pub think_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParsedGseOutput {
    pub think: Option<String>,
    /// The region as emitted (after clamping), in the frame it was parsed in.
    pub region: Option<BBox>,
    /// True when `region` is a square of exactly the configured side.
    pub size_ok: bool,
    pub response: Option<String>,
    pub format_ok: bool,
    pub think_ok: bool,
}

/// A response reduced to what the response reward compares.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum NormalizedAnswer {
    /// Segmentation-only samples: whether a found/detected phrase occurs.
    Found(bool),
    /// Multiple choice: the selected option letter, or none.
    Choice(Option<char>),
    /// Open-ended: trimmed, lowercased, whitespace-collapsed text.
    Text(String),
}

struct ThinkScan {
    body: Option<String>,
    /// Byte range of the single `<think>...</think>` block, if well formed.
    span: Option<(usize, usize)>,
    ok_structure: bool,
}

fn scan_think(raw: &str) -> ThinkScan {
    let opens: Vec<usize> = raw.match_indices(THINK_OPEN).map(|(i, _)| i).collect();
    let closes: Vec<usize> = raw.match_indices(THINK_CLOSE).map(|(i, _)| i).collect();
    match (opens.as_slice(), closes.as_slice()) {
        ([open], [close]) if open < close => {
            let body = &raw[open + THINK_OPEN.len()..*close];
            ThinkScan {
                body: Some(body.to_string()),
                span: Some((*open, close + THINK_CLOSE.len())),
                ok_structure: !body.trim().is_empty(),
            }
        }
        _ => ThinkScan { body: None, span: None, ok_structure: false },
    }
}

/// Every top-level JSON object in `text`, with its starting byte offset.
fn json_objects(text: &str) -> Vec<(usize, Map<String, Value>)> {
    let mut out = Vec::new();
    let mut i = 0;
    while let Some(off) = text[i..].find('{') {
        let start = i + off;
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => {
                out.push((start, map));
                i = start + stream.byte_offset();
            }
            _ => i = start + 1,
        }
    }
    out
}

/// The answer object: the last top-level JSON object outside the think
/// block, plus whether the think block precedes it. No object means the
/// think block has nothing to precede.
fn answer_object(raw: &str, think: &ThinkScan) -> (Option<Map<String, Value>>, bool) {
    let outside = json_objects(raw).into_iter().filter(|(start, _)| match think.span {
        Some((a, b)) => *start < a || *start >= b,
        None => true,
    });
    match outside.last() {
        Some((start, map)) => {
            let after_think = think.span.is_none_or(|(_, end)| start >= end);
            (Some(map), after_think)
        }
        None => (None, false),
    }
}

fn number(v: &Value) -> Option<f64> {
    v.as_f64().filter(|x| x.is_finite())
}

fn numbers<const N: usize>(v: &Value) -> Option<[f64; N]> {
    let arr = v.as_array()?;
    if arr.len() != N {
        return None;
    }
    let mut out = [0.0; N];
    for (slot, item) in out.iter_mut().zip(arr) {
        *slot = number(item)?;
    }
    Some(out)
}

/// Maps the tokenizer-friendly aliases (`"points 1"`) onto canonical keys.
fn canonical_key(k: &str) -> &str {
    match k {
        "points 1" => "points_1",
        "points 2" => "points_2",
        other => other,
    }
}

fn keys_exact(map: &Map<String, Value>, expected: &[&str]) -> bool {
    let mut keys: Vec<&str> = map.keys().map(|k| canonical_key(k)).collect();
    keys.sort_unstable();
    let mut want = expected.to_vec();
    want.sort_unstable();
    keys == want
}

fn field<'a>(map: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    map.iter().find(|(k, _)| canonical_key(k) == key).map(|(_, v)| v)
}

pub fn parse_lpr(raw: &str, crop_frame: Frame) -> ParsedLprOutput {
    let think = scan_think(raw);
    let (obj, after_think) = answer_object(raw, &think);
    let think_ok = think.ok_structure && after_think;

    let mut out = ParsedLprOutput {
        think: think.body,
        bbox: None,
        point1: None,
        point2: None,
        response: None,
        format_ok: false,
        think_ok,
    };
    let Some(map) = obj else { return out };

    out.bbox = field(&map, "bbox")
        .and_then(numbers::<4>)
        .and_then(|[a, b, c, d]| (a < c && b < d).then_some([a, b, c, d]))
        .and_then(|[a, b, c, d]| BBox::clamped(a, b, c, d, crop_frame).ok());
    let point = |key| field(&map, key).and_then(numbers::<2>).and_then(|[x, y]| Point::clamped(x, y, crop_frame).ok());
    out.point1 = point("points_1");
    out.point2 = point("points_2");
    out.response = field(&map, "response").and_then(|v| v.as_str()).map(str::to_string);
    out.format_ok = keys_exact(&map, &LPR_KEYS)
        && out.bbox.is_some()
        && out.point1.is_some()
        && out.point2.is_some()
        && out.response.is_some();
    out
}

/// Parses a global-stage completion. The region may be given as corners
/// `[x_min, y_min, x_max, y_max]` or as a center `[x, y]`, which expands to a
/// square of `region_side` pixels placed inside `gse_frame`.
pub fn parse_gse(raw: &str, gse_frame: Frame, region_side: u32) -> ParsedGseOutput {
    let think = scan_think(raw);
    let (obj, after_think) = answer_object(raw, &think);
    let think_ok = think.ok_structure && after_think;

    let mut out =
        ParsedGseOutput { think: think.body, region: None, size_ok: false, response: None, format_ok: false, think_ok };
    let Some(map) = obj else { return out };

    out.region = field(&map, "region").and_then(|v| {
        if let Some([a, b, c, d]) = numbers::<4>(v) {
            if a < c && b < d {
                return BBox::clamped(a, b, c, d, gse_frame).ok();
            }
            return None;
        }
        let [x, y] = numbers::<2>(v)?;
        let center = Point::clamped(x, y, gse_frame).ok()?;
        clamp_region(&center, region_side, gse_frame).ok().map(|r| *r.bbox())
    });
    out.size_ok = out.region.is_some_and(|r| r.width() == region_side as f64 && r.height() == region_side as f64);
    out.response = field(&map, "response").and_then(|v| v.as_str()).map(str::to_string);
    out.format_ok = keys_exact(&map, &GSE_KEYS) && out.region.is_some() && out.response.is_some();
    out
}

/// First standalone option letter A-D: uppercase letters are preferred,
/// lowercase ones are the fallback.
fn option_letter(text: &str) -> Option<char> {
    let chars: Vec<char> = text.chars().collect();
    let standalone = |i: usize| {
        let before = i.checked_sub(1).map(|p| chars[p]);
        let after = chars.get(i + 1).copied();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    };
    let find =
        |range: std::ops::RangeInclusive<char>| (0..chars.len()).find(|&i| range.contains(&chars[i]) && standalone(i));
    find('A'..='D').or_else(|| find('a'..='d')).map(|i| chars[i].to_ascii_uppercase())
}

pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub fn extract_answer_keywords(response: &str, task: TaskType) -> NormalizedAnswer {
    match task {
        TaskType::Is => {
            let lower = response.to_lowercase();
            NormalizedAnswer::Found(lower.contains("is detected") || lower.contains("is found"))
        }
        TaskType::Mvqa => NormalizedAnswer::Choice(option_letter(response)),
        TaskType::Ovqa => NormalizedAnswer::Text(normalize_text(response)),
    }
}
