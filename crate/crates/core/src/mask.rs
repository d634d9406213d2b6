//! Binary masks and their alternating-run encoding.
//!
//! [`MaskRle`] stores row-major runs that alternate background/foreground,
//! always starting with a (possibly empty) background run. Only the leading
//! run may be zero, which makes the encoding of a mask unique.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, Frame, GeometryError, Point};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("corrupt RLE: {0}")]
    CorruptRle(String),
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("mask is empty")]
    EmptyMask,
    #[error("mask must have a positive size")]
    ZeroSize,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T, E = MaskError> = std::result::Result<T, E>;

/// Row-major bitmap packed into 64-bit words. Bits past `width * height` in
/// the last word are always zero.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    words: Vec<u64>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(MaskError::ZeroSize);
        }
        let len = width as usize * height as usize;
        Ok(Self { width, height, words: vec![0; len.div_ceil(64)] })
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Result<Self> {
        let mut m = Self::new(width, height)?;
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        Ok(m)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    fn index(&self, x: u32, y: u32) -> usize {
        assert!(x < self.width && y < self.height, "pixel ({x},{y}) out of range");
        y as usize * self.width as usize + x as usize
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        let i = self.index(x, y);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = self.index(x, y);
        if value {
            self.words[i / 64] |= 1 << (i % 64);
        } else {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    /// Sets the flat bit range `[start, end)`.
    fn fill(&mut self, start: usize, end: usize) {
        if start >= end {
            return;
        }
        let (first, last) = (start / 64, (end - 1) / 64);
        let lo = !0u64 << (start % 64);
        let hi = !0u64 >> (63 - (end - 1) % 64);
        if first == last {
            self.words[first] |= lo & hi;
            return;
        }
        self.words[first] |= lo;
        for w in &mut self.words[first + 1..last] {
            *w = !0;
        }
        self.words[last] |= hi;
    }

    /// Sets pixels `x0..x1` of row `y`.
    pub fn fill_row(&mut self, y: u32, x0: u32, x1: u32) {
        let x1 = x1.min(self.width);
        if x0 < x1 {
            let base = y as usize * self.width as usize;
            self.fill(base + x0 as usize, base + x1 as usize);
        }
    }

    /// First flat index `>= from` whose bit equals `value`, or `len()`.
    fn find_next(&self, from: usize, value: bool) -> usize {
        let len = self.len();
        if from >= len {
            return len;
        }
        let flip = if value { 0 } else { !0u64 };
        let mut wi = from / 64;
        let mut word = (self.words[wi] ^ flip) & (!0u64 << (from % 64));
        loop {
            if word != 0 {
                return (wi * 64 + word.trailing_zeros() as usize).min(len);
            }
            wi += 1;
            if wi == self.words.len() {
                return len;
            }
            word = self.words[wi] ^ flip;
        }
    }

    pub fn area(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// Foreground runs as flat `[start, end)` ranges.
    fn runs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut pos = 0;
        std::iter::from_fn(move || {
            let start = self.find_next(pos, true);
            if start >= self.len() {
                return None;
            }
            let end = self.find_next(start, false);
            pos = end;
            Some((start, end))
        })
    }

    fn ensure_same_dims(&self, other: &BinaryMask) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(MaskError::DimensionMismatch(self.width, self.height, other.width, other.height));
        }
        Ok(())
    }

    /// Pixel-wise intersection of two masks of equal size.
    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.ensure_same_dims(other)?;
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            words: self.words.iter().zip(&other.words).map(|(a, b)| a & b).collect(),
        })
    }

    /// Tight bounding box of the foreground in pixel units (half-open).
    pub fn bounds(&self) -> Option<[u32; 4]> {
        let w = self.width as usize;
        let mut out: Option<[u32; 4]> = None;
        for (start, end) in self.runs() {
            let mut p = start;
            while p < end {
                let (y, x) = (p / w, p % w);
                let row_end = (y + 1) * w;
                let stop = end.min(row_end);
                let (x0, x1, y) = (x as u32, (x + stop - p) as u32, y as u32);
                out = Some(match out {
                    None => [x0, y, x1, y + 1],
                    Some([a, b, c, d]) => [a.min(x0), b.min(y), c.max(x1), d.max(y + 1)],
                });
                p = stop;
            }
        }
        out
    }

    pub fn encode(&self) -> MaskRle {
        rle_encode(self)
    }
}

/// Run-length encoded mask, see the module docs for the canonical form.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RleRepr")]
pub struct MaskRle {
    width: u32,
    height: u32,
    counts: Vec<u64>,
}

#[derive(Deserialize)]
struct RleRepr {
    width: u32,
    height: u32,
    counts: Vec<u64>,
}

impl TryFrom<RleRepr> for MaskRle {
    type Error = MaskError;

    fn try_from(r: RleRepr) -> Result<Self> {
        MaskRle::new(r.width, r.height, r.counts)
    }
}

impl MaskRle {
    pub fn new(width: u32, height: u32, counts: Vec<u64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(MaskError::ZeroSize);
        }
        let total = width as u64 * height as u64;
        let sum: u64 = counts.iter().sum();
        if sum != total {
            return Err(MaskError::CorruptRle(format!("counts sum to {sum}, expected {total}")));
        }
        if counts.iter().skip(1).any(|&c| c == 0) {
            return Err(MaskError::CorruptRle("zero-length run after the leading run".into()));
        }
        Ok(Self { width, height, counts })
    }

    /// A mask with no foreground.
    pub fn empty(width: u32, height: u32) -> Result<Self> {
        Self::new(width, height, vec![width as u64 * height as u64])
    }

    /// Builds a mask from half-open row segments `(y, x0, x1)` given in
    /// row-major order. Empty segments are skipped; touching ones merge.
    pub fn from_segments(width: u32, height: u32, segments: impl IntoIterator<Item = (u32, u32, u32)>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(MaskError::ZeroSize);
        }
        let w = width as u64;
        let total = w * height as u64;
        let mut counts = Vec::new();
        // `pos` is the end of the last foreground run, `fg_start` its start.
        let (mut pos, mut fg_start) = (0u64, None::<u64>);
        for (y, x0, x1) in segments {
            if x1 <= x0 {
                continue;
            }
            if y >= height || x1 > width {
                return Err(MaskError::CorruptRle(format!("segment ({y}, {x0}, {x1}) outside {width}x{height}")));
            }
            let (s, e) = (y as u64 * w + x0 as u64, y as u64 * w + x1 as u64);
            if s < pos {
                return Err(MaskError::CorruptRle("segments out of order".into()));
            }
            match fg_start {
                Some(_) if s == pos => {}
                Some(start) => {
                    counts.push(pos - start);
                    counts.push(s - pos);
                    fg_start = Some(s);
                }
                None => {
                    counts.push(s);
                    fg_start = Some(s);
                }
            }
            pos = e;
        }
        match fg_start {
            Some(start) => {
                counts.push(pos - start);
                if pos < total {
                    counts.push(total - pos);
                }
            }
            None => counts.push(total),
        }
        Self::new(width, height, counts)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).sum()
    }

    pub fn decode(&self) -> BinaryMask {
        rle_decode(self)
    }

    /// Foreground runs as flat `[start, end)` ranges.
    fn fg_runs(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.counts.iter().enumerate().filter_map(move |(i, &c)| {
            let start = pos;
            pos += c;
            (i % 2 == 1).then_some((start, pos))
        })
    }

    /// Row segments `(y, x0, x1)` covered by the foreground.
    pub fn row_segments(&self) -> impl Iterator<Item = (u32, u32, u32)> + '_ {
        let w = self.width as u64;
        self.fg_runs().flat_map(move |(start, end)| {
            let mut p = start;
            std::iter::from_fn(move || {
                if p >= end {
                    return None;
                }
                let y = p / w;
                let stop = end.min((y + 1) * w);
                let seg = (y as u32, (p % w) as u32, (p % w + stop - p) as u32);
                p = stop;
                Some(seg)
            })
        })
    }

    /// `(area, Σx, Σy)` over foreground pixel indices.
    pub fn moments(&self) -> (u64, u128, u128) {
        let (mut n, mut sx, mut sy) = (0u64, 0u128, 0u128);
        for (y, x0, x1) in self.row_segments() {
            let len = (x1 - x0) as u128;
            n += len as u64;
            sx += (x0 as u128 + x1 as u128 - 1) * len / 2;
            sy += y as u128 * len;
        }
        (n, sx, sy)
    }

    /// Tight half-open pixel bounds of the foreground.
    pub fn bounds(&self) -> Option<[u32; 4]> {
        self.row_segments().fold(None, |acc, (y, x0, x1)| {
            Some(match acc {
                None => [x0, y, x1, y + 1],
                Some([a, b, c, d]) => [a.min(x0), b.min(y), c.max(x1), d.max(y + 1)],
            })
        })
    }

    /// Tight bounding box of the foreground in the Original frame.
    pub fn bbox(&self) -> Result<BBox> {
        let [x0, y0, x1, y1] = self.bounds().ok_or(MaskError::EmptyMask)?;
        let frame = Frame::original(self.width, self.height)?;
        Ok(BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64, frame)?)
    }

    /// Exact `(|a ∩ b|, |a ∪ b|)` computed by merging runs.
    pub fn intersection_union(&self, other: &MaskRle) -> Result<(u64, u64)> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(MaskError::DimensionMismatch(self.width, self.height, other.width, other.height));
        }
        let mut a = self.fg_runs().peekable();
        let mut b = other.fg_runs().peekable();
        let mut inter = 0;
        while let (Some(&(a0, a1)), Some(&(b0, b1))) = (a.peek(), b.peek()) {
            inter += a1.min(b1).saturating_sub(a0.max(b0));
            if a1 <= b1 {
                a.next();
            } else {
                b.next();
            }
        }
        Ok((inter, self.area() + other.area() - inter))
    }
}

pub fn rle_encode(m: &BinaryMask) -> MaskRle {
    let len = m.len();
    let mut counts = Vec::new();
    let mut pos = 0;
    for (start, end) in m.runs() {
        counts.push((start - pos) as u64);
        counts.push((end - start) as u64);
        pos = end;
    }
    if pos < len || counts.is_empty() {
        counts.push((len - pos) as u64);
    }
    MaskRle { width: m.width, height: m.height, counts }
}

pub fn rle_decode(r: &MaskRle) -> BinaryMask {
    let mut m = BinaryMask::new(r.width, r.height).expect("validated dimensions");
    for (start, end) in r.fg_runs() {
        m.fill(start as usize, end as usize);
    }
    m
}

/// `(intersection, union)` pixel counts of two equally sized masks.
pub fn mask_intersection_union(a: &BinaryMask, b: &BinaryMask) -> Result<(u64, u64)> {
    a.ensure_same_dims(b)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (x, y) in a.words.iter().zip(&b.words) {
        inter += (x & y).count_ones() as u64;
        union += (x | y).count_ones() as u64;
    }
    Ok((inter, union))
}

/// Rasterizes `b` onto a mask the size of its frame, rounding coordinates
/// half up onto the pixel lattice.
pub fn rasterize_box(b: &BBox) -> Result<BinaryMask> {
    let f = b.frame();
    let snap = |v: f64, limit: u32| ((v + 0.5).floor().max(0.0) as u64).min(limit as u64) as u32;
    let (x0, y0) = (snap(b.x_min(), f.width()), snap(b.y_min(), f.height()));
    let (x1, y1) = (snap(b.x_max(), f.width()), snap(b.y_max(), f.height()));
    if x0 >= x1 || y0 >= y1 {
        return Err(
            GeometryError::DegenerateGeometry(format!("box {:?} rounds to an empty raster", b.to_array())).into()
        );
    }
    let mut m = BinaryMask::new(f.width(), f.height())?;
    for y in y0..y1 {
        m.fill_row(y, x0, x1);
    }
    Ok(m)
}

/// Two deterministic prompt points for a mask, in the Original frame:
/// the foreground pixel closest (L1) to the foreground centroid, and the
/// foreground pixel deepest inside the mask (largest 4-connected distance
/// to background, the image outside counting as background). Ties go to
/// the smallest `(y, x)`.
pub fn derive_gt_points(m: &BinaryMask) -> Result<(Point, Point)> {
    let [bx0, by0, bx1, by1] = m.bounds().ok_or(MaskError::EmptyMask)?;
    let frame = Frame::original(m.width, m.height)?;

    // Window with a one-pixel background border.
    let ww = (bx1 - bx0 + 2) as usize;
    let wh = (by1 - by0 + 2) as usize;
    let mut fg = vec![false; ww * wh];
    let (mut n, mut sx, mut sy) = (0i128, 0i128, 0i128);
    for y in by0..by1 {
        for x in bx0..bx1 {
            if m.get(x, y) {
                fg[(y - by0 + 1) as usize * ww + (x - bx0 + 1) as usize] = true;
                n += 1;
                sx += x as i128;
                sy += y as i128;
            }
        }
    }

    // Nearest to centroid, compared exactly as |n*x - Σx| + |n*y - Σy|.
    let mut best_center: Option<(i128, u32, u32)> = None;
    // City-block distance transform, two passes.
    let inf = u32::MAX / 2;
    let mut dist: Vec<u32> = fg.iter().map(|&f| if f { inf } else { 0 }).collect();
    for y in 1..wh - 1 {
        for x in 1..ww - 1 {
            let i = y * ww + x;
            if fg[i] {
                dist[i] = dist[i].min(dist[i - 1] + 1).min(dist[i - ww] + 1);
            }
        }
    }
    for y in (1..wh - 1).rev() {
        for x in (1..ww - 1).rev() {
            let i = y * ww + x;
            if fg[i] {
                dist[i] = dist[i].min(dist[i + 1] + 1).min(dist[i + ww] + 1);
            }
        }
    }

    let mut deepest: Option<(u32, u32, u32)> = None;
    for y in by0..by1 {
        for x in bx0..bx1 {
            let i = (y - by0 + 1) as usize * ww + (x - bx0 + 1) as usize;
            if !fg[i] {
                continue;
            }
            let d = (n * x as i128 - sx).abs() + (n * y as i128 - sy).abs();
            if best_center.is_none_or(|(bd, _, _)| d < bd) {
                best_center = Some((d, x, y));
            }
            if deepest.is_none_or(|(bd, _, _)| dist[i] > bd) {
                deepest = Some((dist[i], x, y));
            }
        }
    }
    let (_, x1, y1) = best_center.ok_or(MaskError::EmptyMask)?;
    let (_, x2, y2) = deepest.ok_or(MaskError::EmptyMask)?;
    Ok((Point::new(x1 as f64, y1 as f64, frame)?, Point::new(x2 as f64, y2 as f64, frame)?))
}
