//! Procedural scene generator: paired (image, depth, class) samples where the
//! depth map is recoverable from the image by construction. Channel 0 stores
//! `1 - depth` exactly; channel 1 carries a class-dependent texture so the
//! class label is a meaningful prompt.

use crate::archive::TensorArchive;
use crate::config::{IMG_CHANNELS, IMG_SIZE};
use crate::error::{Error, Result};
use crate::rng::rng_from;
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

const SS: usize = 2; // supersampling factor per axis

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// 2×32×32, values in [0,1]; channel 0 = 1 - depth exactly.
    pub image: Array3<f64>,
    /// 32×32 in [0,1]; 0 = near, 1 = far/background.
    pub depth: Array2<f64>,
    pub label: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sample_count: usize,
    pub split: Split,
    pub base_seed: u64,
    pub class_count: usize,
}

enum Shape {
    Circle {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Rect {
        cx: f64,
        cy: f64,
        hw: f64,
        hh: f64,
    },
    Triangle {
        verts: [(f64, f64); 3],
    },
}

impl Shape {
    fn covers(&self, x: f64, y: f64) -> bool {
        match self {
            Shape::Circle { cx, cy, r } => {
                let dx = x - cx;
                let dy = y - cy;
                dx * dx + dy * dy <= r * r
            }
            Shape::Rect { cx, cy, hw, hh } => (x - cx).abs() <= *hw && (y - cy).abs() <= *hh,
            Shape::Triangle { verts } => {
                let sign = |a: (f64, f64), b: (f64, f64), p: (f64, f64)| {
                    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
                };
                let p = (x, y);
                let d0 = sign(verts[0], verts[1], p);
                let d1 = sign(verts[1], verts[2], p);
                let d2 = sign(verts[2], verts[0], p);
                let has_neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let has_pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }
}

/// Map a raw draw from [0.05, 0.9] into a usable radius/half-extent. Keeps
/// every drawn quantity inside the documented range while bounding shape size.
fn size_from_draw(u: f64) -> f64 {
    0.05 + (u - 0.05) / 0.85 * 0.25
}

fn texture_value(class: usize, px: f64, py: f64) -> f64 {
    match class {
        // horizontal stripes, period 4 px (2 on, 2 off)
        0 => {
            if (py.floor() as i64).rem_euclid(4) < 2 {
                1.0
            } else {
                0.0
            }
        }
        // vertical stripes, period 4 px
        1 => {
            if (px.floor() as i64).rem_euclid(4) < 2 {
                1.0
            } else {
                0.0
            }
        }
        // checkerboard, period 4 px (2×2 cells)
        2 => {
            let cx = (px / 2.0).floor() as i64;
            let cy = (py / 2.0).floor() as i64;
            if (cx + cy).rem_euclid(2) == 0 {
                1.0
            } else {
                0.0
            }
        }
        _ => 0.5,
    }
}

/// Render one sample with an explicit shape count; `render_scene` draws the
/// count itself. A count of zero produces the background-only degenerate case
/// used by tests.
pub fn render_scene_with_shape_count(
    seed: u64,
    class_count: usize,
    shape_count: usize,
) -> SceneSample {
    assert!(class_count >= 2, "class_count must be >= 2");
    let mut rng = rng_from(seed);
    let label = rng.random_range(0..class_count);

    let mut shapes = Vec::with_capacity(shape_count);
    let mut depths = Vec::with_capacity(shape_count);
    for _ in 0..shape_count {
        let kind = rng.random_range(0..3u32);
        let depth = rng.random_range(0.05..=0.9);
        let shape = match kind {
            0 => {
                let cx = rng.random_range(0.05..=0.9);
                let cy = rng.random_range(0.05..=0.9);
                let r = size_from_draw(rng.random_range(0.05..=0.9));
                Shape::Circle { cx, cy, r }
            }
            1 => {
                let cx = rng.random_range(0.05..=0.9);
                let cy = rng.random_range(0.05..=0.9);
                let hw = size_from_draw(rng.random_range(0.05..=0.9));
                let hh = size_from_draw(rng.random_range(0.05..=0.9));
                Shape::Rect { cx, cy, hw, hh }
            }
            _ => {
                let cx = rng.random_range(0.05..=0.9);
                let cy = rng.random_range(0.05..=0.9);
                let theta0 = rng.random_range(0.0..std::f64::consts::TAU);
                let mut verts = [(0.0, 0.0); 3];
                for (i, v) in verts.iter_mut().enumerate() {
                    let r = size_from_draw(rng.random_range(0.05..=0.9));
                    let a = theta0 + i as f64 * std::f64::consts::TAU / 3.0;
                    *v = (cx + r * a.cos(), cy + r * a.sin());
                }
                Shape::Triangle { verts }
            }
        };
        shapes.push(shape);
        depths.push(depth);
    }

    // supersampled depth and texture-mask buffers
    let hi = IMG_SIZE * SS;
    let mut depth_hi = Array2::from_elem((hi, hi), 1.0f64);
    let mut tex_hi = Array2::zeros((hi, hi));
    for sy in 0..hi {
        for sx in 0..hi {
            // subpixel center in canvas units [0,1] and base-pixel units
            let x = (sx as f64 + 0.5) / hi as f64;
            let y = (sy as f64 + 0.5) / hi as f64;
            let px = (sx as f64 + 0.5) / SS as f64;
            let py = (sy as f64 + 0.5) / SS as f64;
            let mut d = 1.0f64;
            for (shape, sd) in shapes.iter().zip(&depths) {
                if shape.covers(x, y) && *sd < d {
                    d = *sd;
                }
            }
            depth_hi[[sy, sx]] = d;
            if d < 1.0 {
                tex_hi[[sy, sx]] = texture_value(label, px, py);
            }
        }
    }

    // average down to base resolution
    let mut depth = Array2::zeros((IMG_SIZE, IMG_SIZE));
    let mut image = Array3::zeros((IMG_CHANNELS, IMG_SIZE, IMG_SIZE));
    let inv = 1.0 / (SS * SS) as f64;
    for y in 0..IMG_SIZE {
        for x in 0..IMG_SIZE {
            let mut dsum = 0.0;
            let mut tsum = 0.0;
            for oy in 0..SS {
                for ox in 0..SS {
                    dsum += depth_hi[[y * SS + oy, x * SS + ox]];
                    tsum += tex_hi[[y * SS + oy, x * SS + ox]];
                }
            }
            let d = dsum * inv;
            depth[[y, x]] = d;
            image[[0, y, x]] = 1.0 - d;
            image[[1, y, x]] = tsum * inv;
        }
    }

    SceneSample {
        image,
        depth,
        label,
        seed,
    }
}

// separate stream for the shape count so the per-shape draws inside
// render_scene_with_shape_count stay aligned with the forced-count hook
const SHAPE_COUNT_STREAM: u64 = 0x73_68_61_70_65_63_6e_74;

/// Deterministic sample generation: 1–4 shapes with seeded geometry.
pub fn render_scene(seed: u64, class_count: usize) -> SceneSample {
    let mut count_rng = rng_from(seed ^ SHAPE_COUNT_STREAM);
    let shape_count = count_rng.random_range(1..=4usize);
    render_scene_with_shape_count(seed, class_count, shape_count)
}

/// Recover the depth map encoded in channel 0.
pub fn extract_depth(image: &Array3<f64>) -> Array2<f64> {
    let (_, h, w) = image.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        1.0 - image[[0, y, x]].clamp(0.0, 1.0)
    })
}

/// All samples of one split; sample `i` uses seed `base_seed + i`.
pub fn generate_split(manifest: &DatasetManifest) -> Vec<SceneSample> {
    (0..manifest.sample_count)
        .map(|i| render_scene(manifest.base_seed + i as u64, manifest.class_count))
        .collect()
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    pub fn generate(manifest: DatasetManifest) -> Self {
        let samples = generate_split(&manifest);
        Self { manifest, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_archive(&self, extra_meta: serde_json::Value) -> TensorArchive {
        let n = self.samples.len();
        let mut images = Vec::with_capacity(n * IMG_CHANNELS * IMG_SIZE * IMG_SIZE);
        let mut depths = Vec::with_capacity(n * IMG_SIZE * IMG_SIZE);
        let mut labels = Vec::with_capacity(n);
        let mut seeds = Vec::with_capacity(n);
        for s in &self.samples {
            images.extend(s.image.iter().map(|&v| v as f32));
            depths.extend(s.depth.iter().map(|&v| v as f32));
            labels.push(s.label as f32);
            seeds.push(s.seed as f32);
        }
        let mut meta = serde_json::Map::new();
        meta.insert(
            "manifest".into(),
            serde_json::to_value(&self.manifest).expect("manifest serializes"),
        );
        if let serde_json::Value::Object(extra) = extra_meta {
            for (k, v) in extra {
                meta.insert(k, v);
            }
        }
        let mut arc = TensorArchive::new(serde_json::Value::Object(meta));
        arc.insert(
            "images",
            vec![n, IMG_CHANNELS, IMG_SIZE, IMG_SIZE],
            images,
        );
        arc.insert("depths", vec![n, IMG_SIZE, IMG_SIZE], depths);
        arc.insert("labels", vec![n], labels);
        arc.insert("seeds", vec![n], seeds);
        arc
    }

    pub fn from_archive(arc: &TensorArchive) -> Result<Self> {
        let manifest: DatasetManifest =
            serde_json::from_value(arc.meta["manifest"].clone()).map_err(|e| {
                Error::ArchiveHeader(format!("missing or invalid manifest: {e}"))
            })?;
        let (ishape, idata) = arc.get("images")?;
        let (dshape, ddata) = arc.get("depths")?;
        let (_, ldata) = arc.get("labels")?;
        let (_, sdata) = arc.get("seeds")?;
        let n = ishape[0];
        if ishape != [n, IMG_CHANNELS, IMG_SIZE, IMG_SIZE] || dshape != [n, IMG_SIZE, IMG_SIZE] {
            return Err(Error::ShapeMismatch {
                context: "dataset archive".into(),
                expected: "images [n,2,32,32], depths [n,32,32]".into(),
                actual: format!("{ishape:?}, {dshape:?}"),
            });
        }
        let plane = IMG_SIZE * IMG_SIZE;
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let img = Array3::from_shape_vec(
                (IMG_CHANNELS, IMG_SIZE, IMG_SIZE),
                idata[i * IMG_CHANNELS * plane..(i + 1) * IMG_CHANNELS * plane]
                    .iter()
                    .map(|&v| v as f64)
                    .collect(),
            )
            .expect("validated shape");
            let dep = Array2::from_shape_vec(
                (IMG_SIZE, IMG_SIZE),
                ddata[i * plane..(i + 1) * plane]
                    .iter()
                    .map(|&v| v as f64)
                    .collect(),
            )
            .expect("validated shape");
            samples.push(SceneSample {
                image: img,
                depth: dep,
                label: ldata[i] as usize,
                seed: sdata[i] as u64,
            });
        }
        Ok(Self { manifest, samples })
    }

    pub fn save(&self, path: impl AsRef<Path>, extra_meta: serde_json::Value) -> Result<()> {
        self.to_archive(extra_meta).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn determinism() {
        let a = render_scene(42, 4);
        let b = render_scene(42, 4);
        assert_eq!(a, b);
    }

    #[test]
    fn background_only_when_no_shapes() {
        let s = render_scene_with_shape_count(123, 4, 0);
        assert!(s.depth.iter().all(|&d| d == 1.0));
        assert!(s.image.slice(ndarray::s![0, .., ..]).iter().all(|&v| v == 0.0));
        assert!(s.image.slice(ndarray::s![1, .., ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel0_is_one_minus_depth_exactly() {
        for seed in [0u64, 7, 42, 999] {
            let s = render_scene(seed, 4);
            for y in 0..IMG_SIZE {
                for x in 0..IMG_SIZE {
                    assert_eq!(s.image[[0, y, x]], 1.0 - s.depth[[y, x]]);
                }
            }
        }
    }

    #[test]
    fn extract_depth_inverts_render() {
        for seed in [1u64, 50, 4242] {
            let s = render_scene(seed, 4);
            let d = extract_depth(&s.image);
            assert_eq!(d, s.depth);
        }
    }

    #[test]
    fn extract_depth_clamps() {
        let mut img = Array3::zeros((2, 4, 4));
        img[[0, 0, 0]] = 1.3;
        img[[0, 1, 1]] = -0.5;
        let d = extract_depth(&img);
        assert_eq!(d[[0, 0]], 0.0);
        assert_eq!(d[[1, 1]], 1.0);
        // zero channel 0 elsewhere -> depth 1
        assert_eq!(d[[2, 2]], 1.0);
    }

    #[test]
    fn value_ranges_over_seed_sweep() {
        for seed in 0..2_000u64 {
            let s = render_scene(seed, 4);
            for &v in s.image.iter() {
                assert!((0.0..=1.0).contains(&v), "image value {v} out of range");
            }
            for &d in s.depth.iter() {
                assert!((0.0..=1.0).contains(&d), "depth value {d} out of range");
            }
        }
    }

    #[test]
    fn splits_with_different_base_seeds_are_disjoint() {
        let a = Dataset::generate(DatasetManifest {
            sample_count: 8,
            split: Split::Train,
            base_seed: 100,
            class_count: 4,
        });
        let b = Dataset::generate(DatasetManifest {
            sample_count: 8,
            split: Split::Eval,
            base_seed: 900,
            class_count: 4,
        });
        for sa in &a.samples {
            for sb in &b.samples {
                assert_ne!(sa.seed, sb.seed);
            }
        }
    }

    #[test]
    fn archive_roundtrip_preserves_f32_payload() {
        let ds = Dataset::generate(DatasetManifest {
            sample_count: 4,
            split: Split::Train,
            base_seed: 77,
            class_count: 4,
        });
        let arc = ds.to_archive(serde_json::json!({}));
        let back = Dataset::from_archive(&arc).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        assert_eq!(back.len(), 4);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.seed, b.seed);
            for (x, y) in a.image.iter().zip(b.image.iter()) {
                assert!((x - y).abs() <= f32::EPSILON as f64 * 2.0);
            }
        }
    }
}
