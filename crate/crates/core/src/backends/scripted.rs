//! Deterministic backends for tests and offline simulation.

use std::collections::HashMap;
use std::sync::Arc;

use serde_json::json;

use super::{BackendError, ImageView, PolicyBackend, Result, SegmenterBackend, ViewKind};
use crate::geometry::{clamp_region, BBox, FrameTag, Point, Reframe};
use crate::mask::{derive_gt_points, rasterize_box, MaskError, MaskRle};

pub type RuleFn = dyn Fn(&ImageView, &str, usize) -> String + Send + Sync;

/// Completions from a lookup table or a pure function of
/// `(image, prompt, index)`.
#[derive(Clone)]
pub enum ScriptedPolicy {
    /// Keyed by view fingerprint first, then by sample id; completion `i`
    /// is entry `i % len`.
    Table(HashMap<String, Vec<String>>),
    Rule(Arc<RuleFn>),
}

impl ScriptedPolicy {
    pub fn rule(f: impl Fn(&ImageView, &str, usize) -> String + Send + Sync + 'static) -> Self {
        ScriptedPolicy::Rule(Arc::new(f))
    }
}

impl PolicyBackend for ScriptedPolicy {
    fn complete(&self, image: &ImageView, prompt: &str, n: usize, _temperature: f64) -> Result<Vec<String>> {
        match self {
            ScriptedPolicy::Rule(f) => Ok((0..n).map(|i| f(image, prompt, i)).collect()),
            ScriptedPolicy::Table(t) => {
                let list = t
                    .get(&image.fingerprint())
                    .or_else(|| t.get(image.sample_id()))
                    .filter(|l| !l.is_empty())
                    .ok_or_else(|| BackendError::NoScript(image.sample_id().to_string()))?;
                Ok((0..n).map(|i| list[i % list.len()].clone()).collect())
            }
        }
    }
}

/// Ground truth an oracle answers from, all in the Original frame.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleTruth {
    pub mask: MaskRle,
    pub bbox: BBox,
    pub points: (Point, Point),
    pub response: String,
}

impl OracleTruth {
    pub fn from_mask(mask: MaskRle, response: impl Into<String>) -> std::result::Result<Self, MaskError> {
        let bbox = mask.bbox()?;
        let points = derive_gt_points(&mask.decode())?;
        Ok(Self { mask, bbox, points, response: response.into() })
    }
}

type Truths = Arc<HashMap<String, OracleTruth>>;

fn lookup<'a>(truths: &'a Truths, view: &ImageView) -> Result<&'a OracleTruth> {
    truths.get(view.sample_id()).ok_or_else(|| BackendError::NoScript(view.sample_id().to_string()))
}

fn completion(body: serde_json::Value) -> String {
    format!("<think>Locating the target described in the instruction.</think>{body}")
}

/// Global-stage oracle: a region centred on the target, plus the answer.
pub struct OracleGse {
    truths: Truths,
    region_side: u32,
}

impl OracleGse {
    pub fn new(truths: Arc<HashMap<String, OracleTruth>>, region_side: u32) -> Self {
        Self { truths, region_side }
    }
}

impl PolicyBackend for OracleGse {
    fn complete(&self, image: &ImageView, _prompt: &str, n: usize, _temperature: f64) -> Result<Vec<String>> {
        let t = lookup(&self.truths, image)?;
        let frame = image.frame();
        let (cx, cy) = t.bbox.center();
        let center = Point::clamped(cx, cy, image.original())
            .and_then(|c| c.to_frame(frame, None))
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let region = clamp_region(&center, self.region_side, frame).map_err(|e| BackendError::Config(e.to_string()))?;
        let out = completion(json!({"region": region.to_array(), "response": t.response}));
        Ok(vec![out; n])
    }
}

/// Local-stage oracle. Answers with the exact target box and points when
/// the target sits inside the crop with at least `min_margin` pixels to
/// every edge; a displaced box when it is only partly visible or too close
/// to an edge; and no JSON at all when it is outside the crop.
pub struct OracleLpr {
    truths: Truths,
    min_margin: f64,
}

impl OracleLpr {
    pub fn new(truths: Arc<HashMap<String, OracleTruth>>, min_margin: f64) -> Self {
        Self { truths, min_margin }
    }

    fn answer(&self, image: &ImageView) -> Result<String> {
        let t = lookup(&self.truths, image)?;
        let (origin, frame) = match image.kind() {
            ViewKind::Crop { origin, frame } => (origin, frame),
            _ => return Err(BackendError::Config("local oracle expects a crop view".into())),
        };
        let (ox, oy) = (origin.x(), origin.y());
        let s = frame.width() as f64;
        let [x0, y0, x1, y1] = t.bbox.to_array();
        let (x0, y0, x1, y1) = (x0 - ox, y0 - oy, x1 - ox, y1 - oy);
        if x1 <= 0.0 || y1 <= 0.0 || x0 >= s || y0 >= s {
            return Ok("<think>Scanning the crop.</think>The target is not visible here.".into());
        }
        let margin = x0.min(y0).min(s - x1).min(s - y1);
        let to_crop = |p: &Point| [p.x() - ox, p.y() - oy];
        let (bbox, p1, p2) = if margin >= self.min_margin && margin >= 0.0 {
            ([x0, y0, x1, y1], to_crop(&t.points.0), to_crop(&t.points.1))
        } else {
            // Shift by half the box size, toward the crop centre.
            let (dx, dy) = ((x1 - x0) / 2.0, (y1 - y0) / 2.0);
            let sx = if x0 + x1 > s { -dx } else { dx };
            let sy = if y0 + y1 > s { -dy } else { dy };
            let b = [
                (x0 + sx).clamp(0.0, s - 1.0),
                (y0 + sy).clamp(0.0, s - 1.0),
                (x1 + sx).clamp(1.0, s),
                (y1 + sy).clamp(1.0, s),
            ];
            let c = [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0];
            (b, c, c)
        };
        Ok(completion(json!({
            "bbox": bbox,
            "points_1": p1,
            "points_2": p2,
            "response": t.response,
        })))
    }
}

impl PolicyBackend for OracleLpr {
    fn complete(&self, image: &ImageView, _prompt: &str, n: usize, _temperature: f64) -> Result<Vec<String>> {
        Ok(vec![self.answer(image)?; n])
    }
}

/// Returns the part of the true mask that falls inside the prompt box.
pub struct OracleSegmenter {
    truths: Truths,
}

impl OracleSegmenter {
    pub fn new(truths: Arc<HashMap<String, OracleTruth>>) -> Self {
        Self { truths }
    }
}

impl SegmenterBackend for OracleSegmenter {
    fn segment(&self, image: &ImageView, bbox: &BBox, _points: (&Point, &Point)) -> Result<MaskRle> {
        let t = lookup(&self.truths, image)?;
        if image.frame().tag() != FrameTag::Original {
            return Err(BackendError::Config("oracle segmenter expects the original image".into()));
        }
        let r = |v: f64| (v + 0.5).floor().max(0.0) as u32;
        let (bx0, by0, bx1, by1) = (r(bbox.x_min()), r(bbox.y_min()), r(bbox.x_max()), r(bbox.y_max()));
        let segs = t
            .mask
            .row_segments()
            .filter(|&(y, _, _)| y >= by0 && y < by1)
            .map(|(y, x0, x1)| (y, x0.max(bx0), x1.min(bx1)));
        MaskRle::from_segments(t.mask.width(), t.mask.height(), segs)
            .map_err(|e| BackendError::MalformedMask(e.to_string()))
    }
}

/// Stand-in when no segmenter is available: the box itself.
pub struct BoxRasterizeSegmenter;

impl SegmenterBackend for BoxRasterizeSegmenter {
    fn segment(&self, _image: &ImageView, bbox: &BBox, _points: (&Point, &Point)) -> Result<MaskRle> {
        rasterize_box(bbox).map(|m| m.encode()).map_err(|e| BackendError::MalformedMask(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ImageSource;
    use crate::geometry::Frame;
    use crate::parsing::{parse_gse, parse_lpr};

    fn setup() -> (Truths, ImageView) {
        let orig = Frame::original(400, 300).unwrap();
        let segs = (100..120).map(|y| (y, 200u32, 230u32));
        let mask = MaskRle::from_segments(400, 300, segs).unwrap();
        let truth = OracleTruth::from_mask(mask, "B").unwrap();
        let truths = Arc::new(HashMap::from([("s1".to_string(), truth)]));
        let view = ImageView::new("s1", Arc::new(ImageSource::file("unused.png")), orig);
        (truths, view)
    }

    #[test]
    fn oracle_chain_recovers_truth() {
        let (truths, view) = setup();
        let gse_frame = Frame::gse_input(200, 150).unwrap();
        let g = OracleGse::new(truths.clone(), 64).complete(&view.resized(gse_frame), "", 1, 0.0).unwrap();
        let pg = parse_gse(&g[0], gse_frame, 64);
        assert!(pg.format_ok && pg.size_ok && pg.think_ok);

        let origin = Point::new(150.0, 50.0, view.original()).unwrap();
        let crop = view.crop(origin, Frame::crop(128).unwrap());
        let l = OracleLpr::new(truths.clone(), 0.0).complete(&crop, "", 2, 0.0).unwrap();
        assert_eq!(l.len(), 2);
        let pl = parse_lpr(&l[0], Frame::crop(128).unwrap());
        assert!(pl.format_ok);
        assert_eq!(pl.bbox.unwrap().to_array(), [50.0, 50.0, 80.0, 70.0]);

        let t = &truths["s1"];
        let m = OracleSegmenter::new(truths.clone()).segment(&view, &t.bbox, (&t.points.0, &t.points.1)).unwrap();
        assert_eq!(m, t.mask);
    }

    #[test]
    fn margin_rule_displaces_box() {
        let (truths, view) = setup();
        let origin = Point::new(180.0, 50.0, view.original()).unwrap();
        let crop = view.crop(origin, Frame::crop(128).unwrap());
        let l = OracleLpr::new(truths, 50.0).complete(&crop, "", 1, 0.0).unwrap();
        let pl = parse_lpr(&l[0], Frame::crop(128).unwrap());
        assert!(pl.format_ok);
        assert_ne!(pl.bbox.unwrap().to_array(), [20.0, 50.0, 50.0, 70.0]);
    }

    #[test]
    fn target_outside_crop_is_malformed() {
        let (truths, view) = setup();
        let crop = view.crop(Point::new(0.0, 0.0, view.original()).unwrap(), Frame::crop(64).unwrap());
        let l = OracleLpr::new(truths, 0.0).complete(&crop, "", 1, 0.0).unwrap();
        assert!(!parse_lpr(&l[0], Frame::crop(64).unwrap()).format_ok);
    }

    #[test]
    fn table_and_rule() {
        let (_, view) = setup();
        let t = ScriptedPolicy::Table(HashMap::from([("s1".to_string(), vec!["a".into(), "b".into()])]));
        assert_eq!(t.complete(&view, "", 3, 1.0).unwrap(), ["a", "b", "a"]);
        let r = ScriptedPolicy::rule(|v, p, i| format!("{}:{p}:{i}", v.sample_id()));
        assert_eq!(r.complete(&view, "q", 2, 1.0).unwrap(), ["s1:q:0", "s1:q:1"]);
        let missing = ImageView::new("other", Arc::new(ImageSource::file("x")), view.original());
        assert!(matches!(t.complete(&missing, "", 1, 0.0), Err(BackendError::NoScript(_))));
    }

    #[test]
    fn rasterize_fallback_area() {
        let (_, view) = setup();
        let b = BBox::new(0.0, 0.0, 10.0, 10.0, view.original()).unwrap();
        let p = Point::new(1.0, 1.0, view.original()).unwrap();
        assert_eq!(BoxRasterizeSegmenter.segment(&view, &b, (&p, &p)).unwrap().area(), 100);
    }
}
