//! Deterministic synthetic scenes: one small solid shape on textured noise,
//! with templated questions per task and attribute.

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{size_bucket, Attribute, SampleRecord, SizeBucket, Split};
use crate::derive_seed;
use crate::mask::MaskRle;
use crate::rewards::TaskType;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Square,
    Ellipse,
    Circle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Rectangle, ShapeKind::Square, ShapeKind::Ellipse, ShapeKind::Circle];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Square => "square",
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Circle => "circle",
        }
    }
}

const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [220, 30, 30]),
    ("green", [30, 190, 50]),
    ("blue", [30, 60, 220]),
    ("yellow", [240, 220, 20]),
    ("orange", [250, 140, 10]),
    ("purple", [140, 40, 200]),
    ("white", [250, 250, 250]),
    ("cyan", [20, 220, 230]),
];

const QUADRANTS: [&str; 4] = ["top left", "top right", "bottom left", "bottom right"];
const COUNTS: [&str; 4] = ["one", "two", "three", "four"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: u32,
    pub height: u32,
    /// Relative weights of IS, MVQA, OVQA.
    pub task_weights: [f64; 3],
    /// Relative weights of S, XS, XXS.
    pub bucket_weights: [f64; 3],
    /// Relative weights of train, val, test.
    pub split_weights: [f64; 3],
    /// Largest area of an S object as a fraction of the image.
    pub max_area_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 3840,
            height: 2160,
            task_weights: [39.0, 30.5, 30.5],
            bucket_weights: [1.0, 1.0, 1.0],
            split_weights: [8956.0, 749.0, 2427.0],
            max_area_fraction: 0.0025,
        }
    }
}

/// A generated record plus what is needed to paint it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthScene {
    pub record: SampleRecord,
    pub color: [u8; 3],
    pub shape: ShapeKind,
    pub bucket: SizeBucket,
}

/// Largest-remainder apportionment of `n` items over `weights`.
fn quotas(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().map(|w| w.max(0.0)).sum();
    if total <= 0.0 {
        let mut q = vec![0; weights.len()];
        q[0] = n;
        return q;
    }
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w.max(0.0) / total).collect();
    let mut q: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = n - q.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        q[i] += 1;
    }
    q
}

fn assignment<T: Copy>(n: usize, weights: &[f64], labels: &[T], rng: &mut ChaCha8Rng) -> Vec<T> {
    let mut out: Vec<T> =
        quotas(n, weights).into_iter().zip(labels).flat_map(|(k, &l)| std::iter::repeat_n(l, k)).collect();
    out.shuffle(rng);
    out
}

/// Row segments of a `w`x`h` shape with its top-left at the origin.
fn shape_rows(shape: ShapeKind, w: u32, h: u32) -> Vec<(u32, u32, u32)> {
    match shape {
        ShapeKind::Rectangle | ShapeKind::Square => (0..h).map(|y| (y, 0, w)).collect(),
        ShapeKind::Ellipse | ShapeKind::Circle => (0..h)
            .filter_map(|y| {
                let dy = (y as f64 + 0.5) / h as f64 * 2.0 - 1.0;
                let half = w as f64 / 2.0 * (1.0 - dy * dy).max(0.0).sqrt();
                let c = w as f64 / 2.0;
                let x0 = (c - half).round().max(0.0) as u32;
                let x1 = ((c + half).round() as u32).min(w);
                (x0 < x1).then_some((y, x0, x1))
            })
            .collect(),
    }
}

fn dims(shape: ShapeKind, area: f64, rng: &mut ChaCha8Rng) -> (u32, u32) {
    let side = |a: f64| (a.sqrt().round() as u32).max(1);
    match shape {
        ShapeKind::Square => (side(area), side(area)),
        ShapeKind::Circle => {
            let d = side(area * 4.0 / std::f64::consts::PI);
            (d, d)
        }
        ShapeKind::Rectangle | ShapeKind::Ellipse => {
            let a = if shape == ShapeKind::Ellipse { area * 4.0 / std::f64::consts::PI } else { area };
            let mut aspect: f64 = rng.random_range(0.5..2.0);
            if (aspect - 1.0).abs() < 0.2 {
                aspect = 1.6;
            }
            let w = ((a * aspect).sqrt().round() as u32).max(1);
            (w, ((a / w as f64).round() as u32).max(1))
        }
    }
}

/// Area range for a bucket, as fractions of the image.
fn area_range(bucket: SizeBucket, total: f64, max_fraction: f64) -> (f64, f64) {
    match bucket {
        SizeBucket::S => (0.00056 * total, (max_fraction * total).max(0.0006 * total)),
        SizeBucket::XS => (0.00018 * total, 0.00054 * total),
        SizeBucket::XXS => ((0.00002 * total).max(4.0), 0.00016 * total),
    }
}

fn options_with(answer: &str, pool: &[&str], rng: &mut ChaCha8Rng) -> (Vec<String>, String) {
    let mut others: Vec<&str> = pool.iter().copied().filter(|p| *p != answer).collect();
    others.shuffle(rng);
    let mut opts: Vec<String> = others.into_iter().take(3).map(String::from).collect();
    opts.push(answer.to_string());
    opts.shuffle(rng);
    let idx = opts.iter().position(|o| o == answer).expect("answer present");
    (opts, ((b'A' + idx as u8) as char).to_string())
}

struct Plan {
    task: TaskType,
    bucket: SizeBucket,
    split: Split,
    attribute: Attribute,
}

fn scene(i: usize, seed: u64, plan: &Plan, cfg: &SynthConfig) -> SynthScene {
    let id = format!("synth-{i:06}");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &id));
    let (w_img, h_img) = (cfg.width, cfg.height);
    let total = w_img as f64 * h_img as f64;
    let (lo, hi) = area_range(plan.bucket, total, cfg.max_area_fraction);
    let color_idx = rng.random_range(0..COLORS.len());
    let (color_name, color) = COLORS[color_idx];

    let mut shape = ShapeKind::ALL[rng.random_range(0..4)];
    let mut rows = Vec::new();
    let (mut w, mut h) = (1, 1);
    for attempt in 0..64 {
        if attempt == 48 {
            shape = ShapeKind::Square;
        }
        let area = rng.random_range(lo..hi.max(lo + 1.0));
        (w, h) = dims(shape, area, &mut rng);
        if w > w_img || h > h_img {
            continue;
        }
        rows = shape_rows(shape, w, h);
        let a: u64 = rows.iter().map(|&(_, x0, x1)| (x1 - x0) as u64).sum();
        if a > 0 && size_bucket(a, w_img, h_img) == plan.bucket {
            break;
        }
        rows.clear();
    }
    if rows.is_empty() {
        // Tiny frames cannot always hit the requested bucket; fall back to
        // a single pixel so the record stays valid.
        (w, h, shape) = (1, 1, ShapeKind::Square);
        rows = vec![(0, 0, 1)];
    }
    let ox = rng.random_range(0..=w_img - w);
    let oy = rng.random_range(0..=h_img - h);
    let mask = MaskRle::from_segments(w_img, h_img, rows.iter().map(|&(y, x0, x1)| (y + oy, x0 + ox, x1 + ox)))
        .expect("shape rows lie inside the frame");

    let (cx, cy) = (ox as f64 + w as f64 / 2.0, oy as f64 + h as f64 / 2.0);
    let quadrant = QUADRANTS[(cx >= w_img as f64 / 2.0) as usize + 2 * (cy >= h_img as f64 / 2.0) as usize];
    let sname = shape.name();
    let (question, truth, pool): (String, &str, Vec<&str>) = match (plan.attribute, plan.task) {
        (Attribute::Color, TaskType::Is) => (format!("Segment the {color_name} {sname}."), color_name, vec![]),
        (Attribute::Color, _) => {
            (format!("What color is the small {sname}?"), color_name, COLORS.iter().map(|c| c.0).collect())
        }
        (Attribute::Shape, TaskType::Is) => (format!("Segment the small {sname}-shaped object."), sname, vec![]),
        (Attribute::Shape, _) => (
            format!("What shape is the small {color_name} object?"),
            sname,
            ShapeKind::ALL.iter().map(|s| s.name()).collect(),
        ),
        (Attribute::Position, TaskType::Is) => {
            (format!("Segment the small object in the {quadrant} part of the image."), quadrant, vec![])
        }
        (Attribute::Position, _) => {
            (format!("In which part of the image is the {color_name} {sname}?"), quadrant, QUADRANTS.to_vec())
        }
        (Attribute::Others, TaskType::Is) => {
            (format!("Segment the only {color_name} object in the scene."), "one", vec![])
        }
        (Attribute::Others, _) => (format!("How many {color_name} {sname}s are in the image?"), "one", COUNTS.to_vec()),
    };
    let (answer, options) = match plan.task {
        TaskType::Is => (None, None),
        TaskType::Ovqa => (Some(truth.to_string()), None),
        TaskType::Mvqa => {
            let (opts, letter) = options_with(truth, &pool, &mut rng);
            (Some(letter), Some(opts))
        }
    };
    let record = SampleRecord {
        image_path: format!("images/{id}.png"),
        id,
        width: w_img,
        height: h_img,
        task: plan.task,
        attribute: plan.attribute,
        question,
        answer,
        options,
        mask,
        split: plan.split,
    };
    SynthScene { record, color, shape, bucket: plan.bucket }
}

/// `n` scenes, identical for identical `(n, seed, cfg)`.
pub fn synth_generate(n: usize, seed: u64, cfg: &SynthConfig) -> Vec<SynthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tasks = assignment(n, &cfg.task_weights, &TaskType::ALL, &mut rng);
    let buckets = assignment(n, &cfg.bucket_weights, &SizeBucket::ALL, &mut rng);
    let splits = assignment(n, &cfg.split_weights, &Split::ALL, &mut rng);
    let attrs = assignment(n, &[1.0; 4], &Attribute::ALL, &mut rng);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let plan = Plan { task: tasks[i], bucket: buckets[i], split: splits[i], attribute: attrs[i] };
            scene(i, seed, &plan, cfg)
        })
        .collect()
}

/// Paints a scene: per-pixel gray noise with the object in its color.
pub fn synth_render(scene: &SynthScene, seed: u64) -> RgbImage {
    let r = &scene.record;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("{}/pixels", r.id)));
    let mut img = RgbImage::from_fn(r.width, r.height, |_, _| {
        let g: u8 = rng.random_range(70..170);
        Rgb([g, g.saturating_add(6), g.saturating_sub(6)])
    });
    for (y, x0, x1) in r.mask.row_segments() {
        for x in x0..x1 {
            img.put_pixel(x, y, Rgb(scene.color));
        }
    }
    img
}
