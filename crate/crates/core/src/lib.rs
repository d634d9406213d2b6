//! Two-stage zoom-in segmentation and VQA for high-resolution images:
//! frame-tagged geometry, RLE masks, output parsing, verifiable rewards,
//! GRPO advantages, region labeling, evaluation and the inference pipeline.

pub mod audit;
pub mod backends;
pub mod config;
pub mod dataset;
pub mod geometry;
pub mod grpo;
pub mod mask;
pub mod metrics;
pub mod parsing;
pub mod pipeline;
pub mod prompt;
pub mod retrospective;
pub mod rewards;
pub mod simulate;

pub use geometry::{BBox, Frame, FrameTag, GeometryError, Point, Reframe, RegionBox};
pub use mask::{BinaryMask, MaskError, MaskRle};

/// Stable per-item seed: the first eight bytes of SHA-256 over the base
/// seed and a key.
pub fn derive_seed(base: u64, key: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(key.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}
