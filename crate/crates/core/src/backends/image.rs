//! What a backend is shown: a full image, its GSE-frame resize or a crop.
//! Pixels are only loaded when a backend actually needs them.

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use base64::Engine;
use image::{imageops, RgbImage};
use sha2::{Digest, Sha256};

use super::BackendError;
use crate::geometry::{Frame, Point};

#[derive(Debug)]
pub enum ImageSource {
    File { path: PathBuf, cache: OnceLock<Result<Arc<RgbImage>, String>> },
    Memory(Arc<RgbImage>),
}

impl ImageSource {
    pub fn file(path: impl Into<PathBuf>) -> Self {
        ImageSource::File { path: path.into(), cache: OnceLock::new() }
    }

    fn identity(&self) -> String {
        match self {
            ImageSource::File { path, .. } => format!("file:{}", path.display()),
            ImageSource::Memory(img) => {
                let mut h = Sha256::new();
                h.update(img.as_raw());
                format!("mem:{}", hex::encode(h.finalize()))
            }
        }
    }

    fn pixels(&self) -> Result<Arc<RgbImage>, BackendError> {
        match self {
            ImageSource::Memory(img) => Ok(img.clone()),
            ImageSource::File { path, cache } => cache
                .get_or_init(|| {
                    image::open(path).map(|i| Arc::new(i.to_rgb8())).map_err(|e| format!("{}: {e}", path.display()))
                })
                .clone()
                .map_err(BackendError::Image),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ViewKind {
    Full,
    /// Whole image resized to the given frame.
    Resized(Frame),
    /// A window of the original starting at `origin`, shown at native scale.
    Crop {
        origin: Point,
        frame: Frame,
    },
}

#[derive(Clone, Debug)]
pub struct ImageView {
    sample_id: String,
    source: Arc<ImageSource>,
    original: Frame,
    kind: ViewKind,
}

impl ImageView {
    pub fn new(sample_id: impl Into<String>, source: Arc<ImageSource>, original: Frame) -> Self {
        Self { sample_id: sample_id.into(), source, original, kind: ViewKind::Full }
    }

    pub fn resized(&self, frame: Frame) -> Self {
        Self { kind: ViewKind::Resized(frame), ..self.clone() }
    }

    pub fn crop(&self, origin: Point, frame: Frame) -> Self {
        Self { kind: ViewKind::Crop { origin, frame }, ..self.clone() }
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn original(&self) -> Frame {
        self.original
    }

    pub fn kind(&self) -> ViewKind {
        self.kind
    }

    /// Frame of the pixels a backend receives.
    pub fn frame(&self) -> Frame {
        match self.kind {
            ViewKind::Full => self.original,
            ViewKind::Resized(f) | ViewKind::Crop { frame: f, .. } => f,
        }
    }

    pub fn crop_origin(&self) -> Option<Point> {
        match self.kind {
            ViewKind::Crop { origin, .. } => Some(origin),
            _ => None,
        }
    }

    /// Stable hex digest of the source identity and the view geometry.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.source.identity().as_bytes());
        h.update(format!("|{}|{}", self.original, self.frame()).as_bytes());
        if let Some(o) = self.crop_origin() {
            h.update(format!("|{}:{}", o.x(), o.y()).as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn render(&self) -> Result<RgbImage, BackendError> {
        let img = self.source.pixels()?;
        if (img.width(), img.height()) != (self.original.width(), self.original.height()) {
            return Err(BackendError::Image(format!(
                "image is {}x{}, record says {}",
                img.width(),
                img.height(),
                self.original
            )));
        }
        Ok(match self.kind {
            ViewKind::Full => (*img).clone(),
            ViewKind::Resized(f) => imageops::resize(&*img, f.width(), f.height(), imageops::FilterType::Triangle),
            ViewKind::Crop { origin, frame } => {
                let (x, y) = (origin.x().round() as u32, origin.y().round() as u32);
                imageops::crop_imm(&*img, x, y, frame.width(), frame.height()).to_image()
            }
        })
    }

    pub fn png_base64(&self) -> Result<String, BackendError> {
        let img = self.render()?;
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| BackendError::Image(e.to_string()))?;
        Ok(base64::engine::general_purpose::STANDARD.encode(buf.into_inner()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view() -> ImageView {
        let img = RgbImage::from_fn(64, 32, |x, y| image::Rgb([x as u8, y as u8, 7]));
        ImageView::new("s", Arc::new(ImageSource::Memory(Arc::new(img))), Frame::original(64, 32).unwrap())
    }

    #[test]
    fn crop_and_resize_shapes() {
        let v = view();
        let c = v.crop(Point::new(10.0, 4.0, v.original()).unwrap(), Frame::crop(16).unwrap());
        let px = c.render().unwrap();
        assert_eq!((px.width(), px.height()), (16, 16));
        assert_eq!(px.get_pixel(0, 0).0, [10, 4, 7]);
        let r = v.resized(Frame::gse_input(32, 16).unwrap()).render().unwrap();
        assert_eq!((r.width(), r.height()), (32, 16));
        assert_ne!(v.fingerprint(), c.fingerprint());
        assert_eq!(c.fingerprint(), c.clone().fingerprint());
    }

    #[test]
    fn png_round_trip() {
        let v = view();
        let b = v.png_base64().unwrap();
        let bytes = base64::engine::general_purpose::STANDARD.decode(b).unwrap();
        let back = image::load_from_memory(&bytes).unwrap().to_rgb8();
        assert_eq!(back, v.render().unwrap());
    }

    #[test]
    fn missing_file_is_an_image_error() {
        let v = ImageView::new("s", Arc::new(ImageSource::file("/nonexistent/x.png")), Frame::original(4, 4).unwrap());
        assert!(matches!(v.render(), Err(BackendError::Image(_))));
    }
}
