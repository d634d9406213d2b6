//! Coordinate frames, boxes and points, and the transform chain between the
//! original image, the downscaled global-stage input and a local crop.
//!
//! All boxes follow the half-open pixel convention: pixel `(i, j)` is inside
//! iff `x_min <= i < x_max` and `y_min <= j < y_max`, so the area of an
//! integer box equals its lattice pixel count.

use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("frame mismatch: {left} vs {right}")]
    FrameMismatch { left: Frame, right: Frame },
    #[error("frame must have a positive size, got {width}x{height}")]
    EmptyFrame { width: u32, height: u32 },
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("coordinates {coords:?} lie outside the {frame} frame")]
    OutOfFrame { coords: Vec<f64>, frame: Frame },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("region side {side} does not fit in a {width}x{height} frame")]
    RegionTooLarge { side: u32, width: u32, height: u32 },
    #[error("a crop origin is required to map {src:?} -> {dst:?}")]
    MissingCropOrigin { src: FrameTag, dst: FrameTag },
    #[error("unsupported transform {src} -> {dst}")]
    UnsupportedTransform { src: Frame, dst: Frame },
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameTag {
    Original,
    GseInput,
    Crop,
}

/// A named pixel coordinate system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "FrameRepr")]
pub struct Frame {
    width: u32,
    height: u32,
    tag: FrameTag,
}

#[derive(Deserialize)]
struct FrameRepr {
    width: u32,
    height: u32,
    tag: FrameTag,
}

impl TryFrom<FrameRepr> for Frame {
    type Error = GeometryError;

    fn try_from(r: FrameRepr) -> Result<Self> {
        Frame::new(r.width, r.height, r.tag)
    }
}

impl std::fmt::Display for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}({}x{})", self.tag, self.width, self.height)
    }
}

impl Frame {
    pub fn new(width: u32, height: u32, tag: FrameTag) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyFrame { width, height });
        }
        Ok(Self { width, height, tag })
    }

    pub fn original(width: u32, height: u32) -> Result<Self> {
        Self::new(width, height, FrameTag::Original)
    }

    pub fn gse_input(width: u32, height: u32) -> Result<Self> {
        Self::new(width, height, FrameTag::GseInput)
    }

    pub fn crop(side: u32) -> Result<Self> {
        Self::new(side, side, FrameTag::Crop)
    }

    /// The global-stage input frame for `original`: the largest
    /// aspect-preserving fit inside `target_width`x`target_height`,
    /// top-left anchored with no padding.
    pub fn fit_gse(original: Frame, target_width: u32, target_height: u32) -> Result<Self> {
        let s = fit_scale(original.width, original.height, target_width, target_height);
        let w = ((original.width as f64 * s).round() as u32).clamp(1, target_width.max(1));
        let h = ((original.height as f64 * s).round() as u32).clamp(1, target_height.max(1));
        Self::gse_input(w, h)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn tag(&self) -> FrameTag {
        self.tag
    }

    pub fn area(&self) -> u64 {
        self.width as u64 * self.height as u64
    }

    fn ensure_same(&self, other: &Frame) -> Result<()> {
        if self != other {
            return Err(GeometryError::FrameMismatch { left: *self, right: *other });
        }
        Ok(())
    }
}

fn fit_scale(src_w: u32, src_h: u32, dst_w: u32, dst_h: u32) -> f64 {
    (dst_w as f64 / src_w as f64).min(dst_h as f64 / src_h as f64)
}

/// A point with `0 <= x < width` and `0 <= y < height`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    x: f64,
    y: f64,
    frame: Frame,
}

impl Point {
    pub fn new(x: f64, y: f64, frame: Frame) -> Result<Self> {
        if !x.is_finite() || !y.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        if x < 0.0 || y < 0.0 || x >= frame.width as f64 || y >= frame.height as f64 {
            return Err(GeometryError::OutOfFrame { coords: vec![x, y], frame });
        }
        Ok(Self { x, y, frame })
    }

    /// Builds a point, clamping finite coordinates into the frame.
    pub fn clamped(x: f64, y: f64, frame: Frame) -> Result<Self> {
        if !x.is_finite() || !y.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self { x: clamp_open(x, frame.width), y: clamp_open(y, frame.height), frame })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn to_array(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.x + dx, self.y + dy, self.frame)
    }
}

impl Serialize for Point {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

fn clamp_open(v: f64, limit: u32) -> f64 {
    v.max(0.0).min((limit as f64).next_down())
}

/// Axis-aligned box with `x_min < x_max`, `y_min < y_max`, inside its frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    frame: Frame,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, frame: Frame) -> Result<Self> {
        let coords = [x_min, y_min, x_max, y_max];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::DegenerateGeometry(format!("box {coords:?} has no area")));
        }
        if x_min < 0.0 || y_min < 0.0 || x_max > frame.width as f64 || y_max > frame.height as f64 {
            return Err(GeometryError::OutOfFrame { coords: coords.to_vec(), frame });
        }
        Ok(Self { x_min, y_min, x_max, y_max, frame })
    }

    pub fn from_array(c: [f64; 4], frame: Frame) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3], frame)
    }

    /// Clamps finite coordinates into the frame; fails if nothing is left.
    pub fn clamped(x_min: f64, y_min: f64, x_max: f64, y_max: f64, frame: Frame) -> Result<Self> {
        if ![x_min, y_min, x_max, y_max].iter().all(|c| c.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let (w, h) = (frame.width as f64, frame.height as f64);
        Self::new(x_min.clamp(0.0, w), y_min.clamp(0.0, h), x_max.clamp(0.0, w), y_max.clamp(0.0, h), frame)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy, self.frame)
    }

    /// Intersection area with `other` (0 when disjoint).
    pub fn intersection_area(&self, other: &BBox) -> Result<f64> {
        self.frame.ensure_same(&other.frame)?;
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        Ok(w * h)
    }

    /// True iff all four coordinates of `inner` lie within this box's
    /// closed bounds.
    pub fn contains(&self, inner: &BBox) -> Result<bool> {
        self.frame.ensure_same(&inner.frame)?;
        Ok(inner.x_min >= self.x_min
            && inner.y_min >= self.y_min
            && inner.x_max <= self.x_max
            && inner.y_max <= self.y_max)
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

/// A square region of exactly `side` pixels, parametrized by its position
/// only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionBox {
    bbox: BBox,
    side: u32,
}

impl RegionBox {
    pub fn new(x_min: f64, y_min: f64, side: u32, frame: Frame) -> Result<Self> {
        let bbox = BBox::new(x_min, y_min, x_min + side as f64, y_min + side as f64, frame)?;
        Ok(Self { bbox, side })
    }

    /// Accepts `bbox` when it is a square with an integral side.
    pub fn from_bbox(bbox: BBox) -> Result<Self> {
        let (w, h) = (bbox.width(), bbox.height());
        if w != h || w.fract() != 0.0 {
            return Err(GeometryError::DegenerateGeometry(format!(
                "box {:?} is not an integral square",
                bbox.to_array()
            )));
        }
        Ok(Self { bbox, side: w as u32 })
    }

    pub fn side(&self) -> u32 {
        self.side
    }

    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }

    pub fn frame(&self) -> Frame {
        self.bbox.frame
    }

    pub fn origin(&self) -> Result<Point> {
        Point::new(self.bbox.x_min, self.bbox.y_min, self.bbox.frame)
    }

    pub fn to_array(&self) -> [f64; 4] {
        self.bbox.to_array()
    }
}

impl Serialize for RegionBox {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.bbox.serialize(s)
    }
}

/// `|a ∩ b| / |a ∪ b|`.
pub fn box_iou(a: &BBox, b: &BBox) -> Result<f64> {
    let inter = a.intersection_area(b)?;
    let union = a.area() + b.area() - inter;
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

/// How the four per-coordinate deviations of two boxes are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxL1Mode {
    #[default]
    Mean,
    Sum,
}

/// Mean absolute deviation over the four box coordinates.
pub fn box_l1(a: &BBox, b: &BBox) -> Result<f64> {
    box_l1_with(a, b, BoxL1Mode::Mean)
}

pub fn box_l1_with(a: &BBox, b: &BBox, mode: BoxL1Mode) -> Result<f64> {
    a.frame.ensure_same(&b.frame)?;
    let sum = a.to_array().iter().zip(b.to_array()).map(|(p, q)| (p - q).abs()).sum::<f64>();
    Ok(match mode {
        BoxL1Mode::Mean => sum / 4.0,
        BoxL1Mode::Sum => sum,
    })
}

pub fn point_l1(a: &Point, b: &Point) -> Result<f64> {
    a.frame.ensure_same(&b.frame)?;
    Ok((a.x - b.x).abs() + (a.y - b.y).abs())
}

pub fn contains(region: &RegionBox, inner: &BBox) -> Result<bool> {
    region.bbox.contains(inner)
}

/// Square of exactly `side` pixels centered at `center` where possible,
/// otherwise shifted by the minimal amount needed to fit in `frame`.
/// The top-left corner is snapped to the integer lattice (round half up).
pub fn clamp_region(center: &Point, side: u32, frame: Frame) -> Result<RegionBox> {
    if side == 0 {
        return Err(GeometryError::DegenerateGeometry("zero region side".into()));
    }
    if side > frame.width || side > frame.height {
        return Err(GeometryError::RegionTooLarge { side, width: frame.width, height: frame.height });
    }
    let half = side as f64 / 2.0;
    let place = |c: f64, limit: u32| -> f64 {
        let start = (c - half + 0.5).floor();
        start.clamp(0.0, (limit - side) as f64)
    };
    RegionBox::new(place(center.x, frame.width), place(center.y, frame.height), side, frame)
}

/// Coordinate map `v -> scale * v + offset` applied to both axes.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Affine {
    scale: f64,
    dx: f64,
    dy: f64,
}

impl Affine {
    const IDENTITY: Affine = Affine { scale: 1.0, dx: 0.0, dy: 0.0 };

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.scale * x + self.dx, self.scale * y + self.dy)
    }

    /// `other` after `self`.
    fn then(self, other: Affine) -> Affine {
        Affine {
            scale: self.scale * other.scale,
            dx: other.scale * self.dx + other.dx,
            dy: other.scale * self.dy + other.dy,
        }
    }
}

/// Resolves the map between two frames. Original<->GseInput is a uniform
/// scale `s = min(gse.w / orig.w, gse.h / orig.h)` in either direction, so
/// the pair of maps are exact inverses. Crop frames are translations by the
/// crop origin, which must be given in the Original frame.
fn resolve(src: Frame, dst: Frame, crop_origin: Option<&Point>) -> Result<Affine> {
    use FrameTag::*;
    if src == dst {
        return Ok(Affine::IDENTITY);
    }
    let origin = || -> Result<&Point> {
        let o = crop_origin.ok_or(GeometryError::MissingCropOrigin { src: src.tag, dst: dst.tag })?;
        if o.frame.tag != Original {
            return Err(GeometryError::UnsupportedTransform { src, dst });
        }
        Ok(o)
    };
    match (src.tag, dst.tag) {
        (Original, GseInput) => {
            Ok(Affine { scale: fit_scale(src.width, src.height, dst.width, dst.height), dx: 0.0, dy: 0.0 })
        }
        (GseInput, Original) => {
            Ok(Affine { scale: 1.0 / fit_scale(dst.width, dst.height, src.width, src.height), dx: 0.0, dy: 0.0 })
        }
        (Original, Crop) => {
            let o = origin()?;
            Ok(Affine { scale: 1.0, dx: -o.x, dy: -o.y })
        }
        (Crop, Original) => {
            let o = origin()?;
            Ok(Affine { scale: 1.0, dx: o.x, dy: o.y })
        }
        (GseInput, Crop) => {
            let o = origin()?;
            Ok(resolve(src, o.frame, None)?.then(resolve(o.frame, dst, Some(o))?))
        }
        (Crop, GseInput) => {
            let o = origin()?;
            Ok(resolve(src, o.frame, Some(o))?.then(resolve(o.frame, dst, None)?))
        }
        _ => Err(GeometryError::UnsupportedTransform { src, dst }),
    }
}

/// Geometry that can be re-expressed in another frame.
pub trait Reframe: Sized {
    fn src_frame(&self) -> Frame;

    /// Maps into `dst`, clamping to its bounds. `crop_origin` (in the
    /// Original frame) is required whenever either side is a crop frame.
    fn to_frame(&self, dst: Frame, crop_origin: Option<&Point>) -> Result<Self>;
}

impl Reframe for Point {
    fn src_frame(&self) -> Frame {
        self.frame
    }

    fn to_frame(&self, dst: Frame, crop_origin: Option<&Point>) -> Result<Self> {
        let (x, y) = resolve(self.frame, dst, crop_origin)?.apply(self.x, self.y);
        Point::clamped(x, y, dst)
    }
}

impl Reframe for BBox {
    fn src_frame(&self) -> Frame {
        self.frame
    }

    fn to_frame(&self, dst: Frame, crop_origin: Option<&Point>) -> Result<Self> {
        let map = resolve(self.frame, dst, crop_origin)?;
        let (x0, y0) = map.apply(self.x_min, self.y_min);
        let (x1, y1) = map.apply(self.x_max, self.y_max);
        BBox::clamped(x0, y0, x1, y1, dst)
    }
}

impl Reframe for RegionBox {
    fn src_frame(&self) -> Frame {
        self.bbox.frame
    }

    /// The side is rescaled (rounded to whole pixels) and the region is
    /// re-placed around the mapped center, shifted rather than shrunk at
    /// the border.
    fn to_frame(&self, dst: Frame, crop_origin: Option<&Point>) -> Result<Self> {
        let map = resolve(self.bbox.frame, dst, crop_origin)?;
        let (cx, cy) = self.bbox.center();
        let (mx, my) = map.apply(cx, cy);
        let side = (self.side as f64 * map.scale).round() as u32;
        clamp_region(&Point::clamped(mx, my, dst)?, side, dst)
    }
}
