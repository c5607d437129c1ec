//! Procedural multi-view stand-in dataset.
//!
//! Every class is a flat body primitive carrying two or three small raised
//! features that face different directions. A capture places the object at
//! an azimuth on a gray table and renders `V` top-down views from cameras
//! spaced evenly around it: the body silhouette turns with the relative
//! azimuth, and each feature is visible only from the two thirds of
//! directions it faces. Colors are quantized to 8 bits and depth to whole
//! millimeters so a dataset survives a save/load round trip bit for bit.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CameraInfo, ClassInfo, DatasetIndex, Image, ImageSet, Manifest, ObjectMeta, Split, ViewRecord, MANIFEST_FORMAT};
use crate::error::{Error, Result};
use crate::seed;

/// How class weights are spread.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightSpacing {
    /// Every pair differs by at least `gap` relative to the lighter one.
    Separable { gap: f64 },
    /// Classes come in groups of `group` whose weights lie within
    /// `±tolerance` of the group center; group centers are 5% apart.
    Ambiguous { group: usize, tolerance: f64 },
    /// Independent draws in `[0.1, 5]` kg.
    Uniform,
}

impl Default for WeightSpacing {
    fn default() -> Self {
        WeightSpacing::Separable { gap: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub views: usize,
    pub lay_positions: usize,
    pub train_rotations: usize,
    pub val_per_lay: usize,
    pub test_per_lay: usize,
    /// Side length of the rendered raw views.
    pub image_size: usize,
    pub weight_spacing: WeightSpacing,
    /// Probability that a view is partly covered by an occluder.
    pub occlusion: f64,
    /// Pairs of classes share one body and differ only in their features.
    pub twin_classes: bool,
    pub super_classes: usize,
    pub tag_vocabulary: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            views: 3,
            lay_positions: 1,
            train_rotations: 12,
            val_per_lay: 5,
            test_per_lay: 5,
            image_size: 64,
            weight_spacing: WeightSpacing::default(),
            occlusion: 0.0,
            twin_classes: false,
            super_classes: 4,
            tag_vocabulary: 12,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.views < 1 {
            return Err(Error::config("need at least one view"));
        }
        if self.lay_positions < 1 || self.train_rotations < 1 || self.val_per_lay < 1 || self.test_per_lay < 1 {
            return Err(Error::config("every split needs at least one set per lay position"));
        }
        if self.image_size < 16 {
            return Err(Error::config("image_size below 16"));
        }
        if !(0.0..=1.0).contains(&self.occlusion) {
            return Err(Error::config("occlusion probability outside [0, 1]"));
        }
        if self.super_classes < 1 {
            return Err(Error::config("need at least one super-class"));
        }
        match self.weight_spacing {
            WeightSpacing::Separable { gap } if !(gap > 0.0 && gap < 1.0) => {
                Err(Error::config(format!("separable gap {gap} outside (0, 1)")))
            }
            WeightSpacing::Ambiguous { group, tolerance } if group < 2 || !(tolerance > 0.0 && tolerance < 0.02) => {
                Err(Error::config("ambiguous spacing needs group ≥ 2 and tolerance in (0, 0.02)"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Hexagon,
    Cross,
}

const BODY_SHAPES: [Shape; 5] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Hexagon, Shape::Cross];

#[derive(Clone, Debug)]
struct Feature {
    azimuth: f64,
    /// Offset along the silhouette's vertical axis, in body radii.
    lift: f64,
    size: f64,
    shape: Shape,
    color: [f32; 3],
    height_m: f64,
}

#[derive(Clone, Debug)]
struct ClassModel {
    body: Shape,
    body_color: [f32; 3],
    radius: f64,
    body_height_m: f64,
    features: Vec<Feature>,
}

const TABLE_GRAY: f32 = 0.15;
const TABLE_DISTANCE_M: f64 = 1.0;
const OCCLUDER_GRAY: f32 = 0.45;

/// Generates the whole dataset. Equal `(config, seed)` give bit-identical
/// output regardless of thread count.
pub fn synthesize_dataset(config: &SynthConfig, seed: u64) -> Result<DatasetIndex> {
    config.validate()?;
    let n = config.classes;
    let models: Vec<ClassModel> = (0..n).map(|c| class_model(config, seed, c)).collect();
    let weights = class_weights(config, seed);

    let mut tag_rng = seed::rng(&[seed, 0x7a9]);
    let classes: Vec<ClassInfo> = (0..n)
        .map(|c| {
            let m = &models[c];
            let side = m.radius * 2.0 * 500.0;
            let mut tags: Vec<u32> = (0..config.tag_vocabulary as u32).collect();
            tags.shuffle(&mut tag_rng);
            tags.truncate(2.min(tags.len()));
            tags.sort_unstable();
            ClassInfo {
                name: format!("part_{c:03}"),
                meta: ObjectMeta {
                    class_id: c,
                    super_class_id: c % config.super_classes,
                    weight_kg: weights[c],
                    package_lwh_mm: [
                        (side * 1.1).round(),
                        (side * 1.1).round(),
                        ((m.body_height_m + 0.02) * 1000.0 * 1.1).round(),
                    ],
                    nl_tags: tags,
                },
            }
        })
        .collect();

    let mut jobs = Vec::new();
    for c in 0..n {
        for lay in 0..config.lay_positions {
            for r in 0..config.train_rotations {
                jobs.push((c, lay, Split::Train, r));
            }
            for k in 0..config.val_per_lay {
                jobs.push((c, lay, Split::Val, k));
            }
            for k in 0..config.test_per_lay {
                jobs.push((c, lay, Split::Test, k));
            }
        }
    }
    let sets: Vec<Arc<ImageSet>> = jobs
        .par_iter()
        .map(|&(c, lay, split, k)| {
            Arc::new(render_set(config, seed, &models[c], &classes[c].meta, c, lay, split, k))
        })
        .collect();

    let size = config.image_size as f64;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        class_count: n,
        super_class_count: config.super_classes.min(n),
        tag_vocabulary: (0..config.tag_vocabulary).map(|t| format!("tag_{t:02}")).collect(),
        views: config.views,
        cameras: (0..config.views)
            .map(|_| CameraInfo {
                intrinsics: [size, size, size / 2.0, size / 2.0],
                gravity: [0.0, 0.0, 1.0],
            })
            .collect(),
        real: false,
    };
    DatasetIndex::new(manifest, classes, sets)
}

fn class_model(config: &SynthConfig, seed: u64, class: usize) -> ClassModel {
    // Twins draw their body from the pair's first member.
    let body_id = if config.twin_classes { class / 2 } else { class };
    let body_count = if config.twin_classes { config.classes.div_ceil(2) } else { config.classes };
    let mut body_rng = seed::rng(&[seed, 0xb0d1, body_id as u64]);
    let hue = (body_id as f64 + body_rng.gen_range(0.0..0.3)) / body_count as f64;
    let body = BODY_SHAPES[body_id % BODY_SHAPES.len()];
    let body_color = hsv(hue, 0.75, 0.85);
    let radius = body_rng.gen_range(0.2..0.27);
    let body_height_m = body_rng.gen_range(0.03..0.12);

    let mut rng = seed::rng(&[seed, 0xfea7, class as u64]);
    let count = rng.gen_range(2..=3);
    let base = rng.gen_range(0.0..std::f64::consts::TAU);
    let features = (0..count)
        .map(|i| Feature {
            azimuth: base + std::f64::consts::TAU * i as f64 / count as f64 + rng.gen_range(-0.3..0.3),
            lift: rng.gen_range(-0.45..0.45),
            size: rng.gen_range(0.28..0.4),
            shape: if rng.gen_bool(0.5) { Shape::Disk } else { Shape::Square },
            color: hsv(rng.gen_range(0.0..1.0), 0.9, rng.gen_range(0.55..1.0)),
            height_m: rng.gen_range(0.01..0.04),
        })
        .collect();
    ClassModel {
        body,
        body_color,
        radius,
        body_height_m,
        features,
    }
}

/// Class weights in kg, rounded to 0.1 g, in class order.
pub fn class_weights(config: &SynthConfig, seed: u64) -> Vec<f64> {
    let n = config.classes;
    let mut rng = seed::rng(&[seed, 0x3e16]);
    let mut w: Vec<f64> = match config.weight_spacing {
        WeightSpacing::Separable { gap } => {
            let mut cur = rng.gen_range(0.2..0.5);
            (0..n)
                .map(|_| {
                    let v = cur;
                    cur *= (1.0 + gap) * (1.0 + rng.gen_range(0.0..0.5 * gap));
                    v
                })
                .collect()
        }
        WeightSpacing::Ambiguous { group, tolerance } => {
            let groups = n.div_ceil(group);
            let mut center = rng.gen_range(0.2..0.5);
            let mut out = Vec::with_capacity(n);
            for _ in 0..groups {
                for _ in 0..group {
                    if out.len() < n {
                        out.push(center * (1.0 + rng.gen_range(-tolerance..tolerance)));
                    }
                }
                // next group clear of this one by 5% after both tolerances
                center *= (1.0 + 0.05) * (1.0 + tolerance) / (1.0 - tolerance) * 1.01;
            }
            out
        }
        WeightSpacing::Uniform => (0..n).map(|_| rng.gen_range(0.1..5.0)).collect(),
    };
    if !matches!(config.weight_spacing, WeightSpacing::Ambiguous { .. }) {
        w.shuffle(&mut rng);
    }
    w.iter().map(|v| (v * 1e4).round() / 1e4).collect()
}

#[allow(clippy::too_many_arguments)]
fn render_set(
    config: &SynthConfig,
    seed: u64,
    model: &ClassModel,
    meta: &ObjectMeta,
    class: usize,
    lay: usize,
    split: Split,
    k: usize,
) -> ImageSet {
    let split_tag = match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    };
    let mut rng = seed::rng(&[seed, 0x5e7, class as u64, lay as u64, split_tag, k as u64]);
    let lay_offset = lay as f64 * 0.7;
    let pose = match split {
        Split::Train => lay_offset + std::f64::consts::TAU * k as f64 / config.train_rotations as f64,
        _ => lay_offset + rng.gen_range(0.0..std::f64::consts::TAU),
    };
    let views = (0..config.views)
        .map(|v| {
            let azimuth = std::f64::consts::TAU * v as f64 / config.views as f64 - pose;
            let occluded = config.occlusion > 0.0 && rng.gen_bool(config.occlusion);
            render_view(config, model, v, azimuth, occluded, &mut rng)
        })
        .collect();
    ImageSet {
        set_id: format!("c{class:03}_l{lay}_{}_{k:02}", split.as_str()),
        rotation_id: k,
        lay_position_id: lay,
        views,
        meta: meta.clone(),
        split,
        background_set: None,
    }
}

fn render_view(
    config: &SynthConfig,
    model: &ClassModel,
    view_id: usize,
    azimuth: f64,
    occluded: bool,
    rng: &mut impl Rng,
) -> ViewRecord {
    let s = config.image_size;
    let sf = s as f64;
    let scale = 1.0 + rng.gen_range(-0.08..0.08);
    let cy = sf / 2.0 + rng.gen_range(-0.06..0.06) * sf;
    let cx = sf / 2.0 + rng.gen_range(-0.06..0.06) * sf;
    let light = 1.0 + rng.gen_range(-0.08..0.08) as f32;
    let r = model.radius * sf * scale;
    let (sin_a, cos_a) = azimuth.sin_cos();

    let visible: Vec<(&Feature, f64, f64, f64)> = model
        .features
        .iter()
        .filter_map(|f| {
            let rel = f.azimuth - azimuth;
            let facing = rel.cos();
            // visible from the two thirds of directions it faces
            (facing > -0.5).then(|| {
                let fx = cx + 0.6 * r * rel.sin();
                let fy = cy + f.lift * r;
                let fr = f.size * r * (0.65 + 0.35 * facing);
                (f, fy, fx, fr)
            })
        })
        .collect();

    let occluder = occluded.then(|| {
        let side = rng.gen_range(0.5..0.65) * 2.0 * r;
        let from_left = rng.gen_bool(0.5);
        let x0 = if from_left { cx - r * 1.6 } else { cx + r * 1.6 - side };
        (cy - r * 1.6, x0, cy + r * 1.6, x0 + side)
    });

    let mut color = Image::filled(s, s, 3, 0.0);
    let mut depth = Image::filled(s, s, 1, 0.0);
    let mut mask = Image::filled(s, s, 1, 0.0);
    for y in 0..s {
        for x in 0..s {
            let (py, px) = (y as f64, x as f64);
            let mut rgb = [TABLE_GRAY; 3];
            let mut height = 0.0;
            let mut fg = false;
            // body in its own rotated frame
            let dy = py - cy;
            let dx = px - cx;
            let uy = (cos_a * dy - sin_a * dx) / r;
            let ux = (sin_a * dy + cos_a * dx) / r;
            if inside(model.body, uy, ux) {
                let shade = (1.0 - 0.25 * (uy * uy + ux * ux)).max(0.6) as f32;
                rgb = model.body_color.map(|c| c * shade);
                height = model.body_height_m;
                fg = true;
            }
            for (f, fy, fx, fr) in &visible {
                if inside(f.shape, (py - fy) / fr, (px - fx) / fr) {
                    rgb = f.color;
                    height = model.body_height_m + f.height_m;
                    fg = true;
                }
            }
            if let Some((y0, x0, y1, x1)) = occluder {
                if py >= y0 && py < y1 && px >= x0 && px < x1 {
                    rgb = [OCCLUDER_GRAY; 3];
                    height = model.body_height_m + 0.08;
                    fg = false;
                }
            }
            for (c, v) in rgb.iter().enumerate() {
                let noisy = (v * light + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
                color.set(y, x, c, quantize_color(noisy));
            }
            depth.set(y, x, 0, quantize_depth(TABLE_DISTANCE_M - height));
            mask.set(y, x, 0, if fg { 1.0 } else { 0.0 });
        }
    }
    // a fully hidden object would violate the non-empty mask invariant
    if mask.count_foreground() == 0 {
        return render_view(config, model, view_id, azimuth, false, rng);
    }
    ViewRecord {
        view_id,
        color,
        depth,
        mask,
        hha: None,
        mean_color: None,
        mean_depth: None,
    }
}

fn inside(shape: Shape, y: f64, x: f64) -> bool {
    match shape {
        Shape::Disk => y * y + x * x <= 1.0,
        Shape::Square => y.abs() <= 0.8 && x.abs() <= 0.8,
        Shape::Triangle => y <= 0.6 && x.abs() <= (y + 1.0) * 0.625,
        Shape::Hexagon => {
            let (ay, ax) = (y.abs(), x.abs());
            ay <= 0.87 && 0.87 * ax + 0.5 * ay <= 0.87
        }
        Shape::Cross => (y.abs() <= 0.3 && x.abs() <= 1.0) || (x.abs() <= 0.3 && y.abs() <= 1.0),
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i32;
    let f = h - i as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r as f32, g as f32, b as f32]
}

/// Rounds to the nearest 8-bit level, as stored in a PNG.
pub(crate) fn quantize_color(v: f32) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() as u8) as f32 / 255.0
}

/// Rounds meters to whole millimeters, as stored in a 16-bit PNG.
pub(crate) fn quantize_depth(m: f64) -> f32 {
    ((m * 1000.0).round().clamp(0.0, 65535.0) as u16) as f32 / 1000.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(classes: usize) -> SynthConfig {
        SynthConfig {
            classes,
            image_size: 32,
            ..Default::default()
        }
    }

    #[test]
    fn split_policy_counts() {
        let d = synthesize_dataset(&small(8), 7).unwrap();
        assert_eq!(d.split_counts[&Split::Train], 96);
        assert_eq!(d.split_counts[&Split::Val], 40);
        assert_eq!(d.split_counts[&Split::Test], 40);
        assert!(d.classes_missing_splits().is_empty());
        for s in &d.sets {
            s.validate().unwrap();
        }
    }

    #[test]
    fn same_seed_same_checksum() {
        let cfg = SynthConfig {
            classes: 8,
            views: 3,
            image_size: 32,
            ..Default::default()
        };
        let a = synthesize_dataset(&cfg, 7).unwrap();
        let b = synthesize_dataset(&cfg, 7).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = synthesize_dataset(&cfg, 8).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn separable_weights_keep_gap() {
        let cfg = SynthConfig {
            classes: 40,
            weight_spacing: WeightSpacing::Separable { gap: 0.05 },
            ..small(40)
        };
        let w = class_weights(&cfg, 3);
        for i in 0..w.len() {
            for j in i + 1..w.len() {
                let gap = (w[i] - w[j]).abs() / w[i].min(w[j]);
                assert!(gap >= 0.05, "{} vs {}", w[i], w[j]);
            }
        }
    }

    #[test]
    fn ambiguous_weights_have_close_pairs() {
        let cfg = SynthConfig {
            weight_spacing: WeightSpacing::Ambiguous {
                group: 4,
                tolerance: 0.005,
            },
            ..small(16)
        };
        let w = class_weights(&cfg, 3);
        let close = (0..w.len())
            .flat_map(|i| (i + 1..w.len()).map(move |j| (i, j)))
            .filter(|&(i, j)| (w[i] - w[j]).abs() / w[i].min(w[j]) <= 0.01)
            .count();
        assert!(close >= 1);
        assert!(w.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(synthesize_dataset(&small(1), 0).is_err());
        let no_views = SynthConfig { views: 0, ..small(4) };
        assert!(matches!(synthesize_dataset(&no_views, 0), Err(Error::Config(_))));
    }

    #[test]
    fn occlusion_keeps_masks_non_empty() {
        let cfg = SynthConfig {
            occlusion: 1.0,
            ..small(3)
        };
        let d = synthesize_dataset(&cfg, 1).unwrap();
        for s in &d.sets {
            s.validate().unwrap();
        }
    }

    #[test]
    fn quantization_is_stable() {
        for v in [0.0f32, 0.1, 0.5, 0.73, 1.0] {
            let q = quantize_color(v);
            assert_eq!(quantize_color(q), q);
        }
        let d = quantize_depth(0.9123);
        assert_eq!(quantize_depth(d as f64), d);
    }
}
