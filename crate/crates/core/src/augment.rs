//! Multi-view aware augmentation and sampling: view selection and order,
//! view-/class-wise shuffling between sets, per-view geometric and color
//! transforms, and multi-scale resolution.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Image, ImageSet, ViewRecord};
use crate::error::{Error, Result};

/// Which exchanges between sets are allowed. `vw` keeps a view in its slot,
/// `cw` restricts exchanges to sets of the same class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleMode {
    #[default]
    None,
    VwCw,
    NotVwCw,
    VwNotCw,
    NotVwNotCw,
}

impl ShuffleMode {
    pub const ALL: [ShuffleMode; 5] = [
        ShuffleMode::None,
        ShuffleMode::VwCw,
        ShuffleMode::NotVwCw,
        ShuffleMode::VwNotCw,
        ShuffleMode::NotVwNotCw,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ShuffleMode::None => "none",
            ShuffleMode::VwCw => "vw_cw",
            ShuffleMode::NotVwCw => "not_vw_cw",
            ShuffleMode::VwNotCw => "vw_not_cw",
            ShuffleMode::NotVwNotCw => "not_vw_not_cw",
        }
    }

    fn view_wise(self) -> bool {
        matches!(self, ShuffleMode::VwCw | ShuffleMode::VwNotCw)
    }

    fn class_wise(self) -> bool {
        matches!(self, ShuffleMode::VwCw | ShuffleMode::NotVwCw)
    }
}

impl fmt::Display for ShuffleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShuffleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShuffleMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| Error::config(format!("unknown shuffle mode '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugPolicy {
    /// ROI crop jitter, fraction of the bounding box.
    pub crop_jitter: f64,
    pub upsample_roi: bool,
    pub flip: bool,
    pub rotate: bool,
    /// Rotation is uniform in `±rotate_max_deg`.
    pub rotate_max_deg: f64,
    /// Brightness, contrast and saturation are each scaled by `1 + U(−s, s)`.
    pub colorjitter: f64,
    /// Standard deviation of additive depth noise, meters.
    pub depth_noise: f64,
    pub random_view_order: bool,
    pub shuffle: ShuffleMode,
    pub multi_scale: bool,
}

impl AugPolicy {
    /// No augmentation at all.
    pub fn none() -> Self {
        Self {
            crop_jitter: 0.0,
            upsample_roi: true,
            flip: false,
            rotate: false,
            rotate_max_deg: 180.0,
            colorjitter: 0.0,
            depth_noise: 0.0,
            random_view_order: false,
            shuffle: ShuffleMode::None,
            multi_scale: false,
        }
    }

    pub fn standard() -> Self {
        Self {
            crop_jitter: 0.1,
            flip: true,
            rotate: true,
            colorjitter: 0.2,
            depth_noise: 0.002,
            random_view_order: true,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.crop_jitter) {
            return Err(Error::config("crop_jitter must lie in [0, 0.5)"));
        }
        if !(0.0..1.0).contains(&self.colorjitter) || self.depth_noise < 0.0 || self.rotate_max_deg < 0.0 {
            return Err(Error::config("augmentation strengths out of range"));
        }
        Ok(())
    }
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self::standard()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewSelection {
    /// View ids available for training draws.
    pub train_pool: Vec<usize>,
    /// Views fed to the model.
    pub views: usize,
    /// Fixed evaluation order.
    pub test_order: Vec<usize>,
}

impl ViewSelection {
    /// Pool `0..pool`, evaluation on the first `views` ids.
    pub fn first(views: usize, pool: usize) -> Self {
        Self {
            train_pool: (0..pool).collect(),
            views,
            test_order: (0..views).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::config("view selection needs V ≥ 1"));
        }
        if self.train_pool.len() < self.views {
            return Err(Error::config(format!(
                "view pool of {} is smaller than V = {}",
                self.train_pool.len(),
                self.views
            )));
        }
        if self.test_order.len() != self.views {
            return Err(Error::config("test order length must equal V"));
        }
        if let Some(v) = self.test_order.iter().find(|v| !self.train_pool.contains(v)) {
            return Err(Error::config(format!("test view {v} is not in the pool")));
        }
        Ok(())
    }
}

/// Training: `V` distinct pool views in random order. Evaluation: exactly
/// `test_order`.
pub fn sample_views(set: &ImageSet, sel: &ViewSelection, training: bool, rng: &mut impl Rng) -> Result<Vec<ViewRecord>> {
    sel.validate()?;
    let ids: Vec<usize> = if training {
        let mut ids: Vec<usize> = sel.train_pool.choose_multiple(rng, sel.views).copied().collect();
        // choose_multiple does not randomize order
        ids.shuffle(rng);
        ids
    } else {
        sel.test_order.clone()
    };
    ids.iter()
        .map(|id| {
            set.view(*id)
                .cloned()
                .ok_or_else(|| Error::config(format!("set {} has no view {id}", set.set_id)))
        })
        .collect()
}

/// One set of a batch together with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledViews {
    pub views: Vec<ViewRecord>,
    /// Class of the object each view shows.
    pub view_classes: Vec<usize>,
    /// Class of the set the views were drawn for.
    pub class: usize,
}

impl LabeledViews {
    pub fn new(views: Vec<ViewRecord>, class: usize) -> Self {
        let view_classes = vec![class; views.len()];
        Self {
            views,
            view_classes,
            class,
        }
    }

    /// Union of the classes present, as a 0/1 vector of length `n`.
    pub fn multi_hot(&self, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        for c in &self.view_classes {
            v[*c] = 1.0;
        }
        v
    }
}

/// Exchanges views between sets of a batch. A set whose class occurs once
/// in the batch passes through unchanged under class-wise modes.
pub fn shuffle_sets(batch: &[LabeledViews], mode: ShuffleMode, rng: &mut impl Rng) -> Vec<LabeledViews> {
    let mut out = batch.to_vec();
    if mode == ShuffleMode::None || batch.len() < 2 {
        return out;
    }
    // groups of sets allowed to exchange
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in batch.iter().enumerate() {
        let key = if mode.class_wise() { s.class } else { 0 };
        groups.entry(key).or_default().push(i);
    }
    for members in groups.values().filter(|m| m.len() > 1) {
        // slots that exchange together: one per view index, or all at once
        let slot_sets: Vec<Vec<(usize, usize)>> = if mode.view_wise() {
            let max_v = members.iter().map(|&i| batch[i].views.len()).max().unwrap_or(0);
            (0..max_v)
                .map(|v| members.iter().filter(|&&i| v < batch[i].views.len()).map(|&i| (i, v)).collect())
                .collect()
        } else {
            vec![members
                .iter()
                .flat_map(|&i| (0..batch[i].views.len()).map(move |v| (i, v)))
                .collect()]
        };
        for slots in slot_sets {
            let mut sources = slots.clone();
            sources.shuffle(rng);
            for (&(di, dv), &(si, sv)) in slots.iter().zip(&sources) {
                out[di].views[dv] = batch[si].views[sv].clone();
                out[di].view_classes[dv] = batch[si].view_classes[sv];
            }
        }
    }
    out
}

fn rotate_image(img: &Image, cos: f64, sin: f64, nearest: bool) -> Image {
    let (h, w) = img.dims();
    let c = img.channels();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Image::filled(h, w, c, 0.0);
    let mut px = vec![0.0f32; c];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            // inverse rotation of the output coordinate
            let sy = cos * dy - sin * dx + cy;
            let sx = sin * dy + cos * dx + cx;
            if nearest {
                img.sample_nearest(sy, sx, &mut px);
            } else {
                img.sample_bilinear(sy, sx, &mut px);
            }
            for (ch, v) in px.iter().enumerate() {
                out.set(y, x, ch, *v);
            }
        }
    }
    out
}

fn color_jitter(img: &Image, strength: f64, rng: &mut impl Rng) -> Image {
    let mut draw = || 1.0 + rng.gen_range(-strength..=strength) as f32;
    let (brightness, contrast, saturation) = (draw(), draw(), draw());
    let mut out = img.clone();
    let n = out.data().len() as f32 / 3.0;
    let mean = out.data().iter().sum::<f32>() / (3.0 * n);
    for px in out.data_mut().chunks_mut(3) {
        let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        for v in px.iter_mut() {
            let s = gray + (*v - gray) * saturation;
            let c = mean + (s - mean) * contrast;
            *v = (c * brightness).clamp(0.0, 1.0);
        }
    }
    out
}

/// Independent per-view transforms. Geometric ops act on every channel and
/// the mask alike; depth gets optional additive noise on measured pixels
/// and never color jitter.
pub fn geometric_color_augment(view: &ViewRecord, policy: &AugPolicy, rng: &mut impl Rng) -> ViewRecord {
    let mut v = view.clone();
    let map = |v: &mut ViewRecord, f: &dyn Fn(&Image, bool) -> Image| {
        v.color = f(&v.color, false);
        v.depth = f(&v.depth, false);
        v.mask = f(&v.mask, true);
        v.hha = v.hha.as_ref().map(|h| f(h, false));
        v.mean_color = v.mean_color.as_ref().map(|m| f(m, false));
        v.mean_depth = v.mean_depth.as_ref().map(|m| f(m, false));
    };
    if policy.flip && rng.gen_bool(0.5) {
        map(&mut v, &|img, _| img.flip_horizontal());
    }
    if policy.rotate && policy.rotate_max_deg > 0.0 {
        let a = rng.gen_range(-policy.rotate_max_deg..=policy.rotate_max_deg).to_radians();
        let (sin, cos) = a.sin_cos();
        map(&mut v, &|img, nearest| rotate_image(img, cos, sin, nearest));
    }
    if policy.colorjitter > 0.0 {
        v.color = color_jitter(&v.color, policy.colorjitter, rng);
        v.mean_color = v.mean_color.as_ref().map(|m| color_jitter(m, policy.colorjitter, rng));
    }
    if policy.depth_noise > 0.0 {
        let normal = Normal::new(0.0, policy.depth_noise).expect("finite std");
        for d in v.depth.data_mut() {
            if *d > 0.0 {
                *d = (*d + normal.sample(rng) as f32).max(0.0);
            }
        }
    }
    v
}

/// Even side length uniform in `[0.9·base, 1.1·base]` with multi-scale
/// enabled, else `base`.
pub fn resolve_resolution(policy: &AugPolicy, base: usize, rng: &mut impl Rng) -> usize {
    if !policy.multi_scale {
        return base;
    }
    let lo = ((0.9 * base as f64) / 2.0).ceil() as usize;
    let hi = ((1.1 * base as f64) / 2.0).floor() as usize;
    if hi < lo {
        return base;
    }
    2 * rng.gen_range(lo..=hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_dataset, Split, SynthConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn tiny_set() -> ImageSet {
        let cfg = SynthConfig {
            classes: 2,
            views: 10,
            train_rotations: 1,
            val_per_lay: 1,
            test_per_lay: 1,
            image_size: 24,
            ..SynthConfig::default()
        };
        let idx = synthesize_dataset(&cfg, 5).unwrap();
        (*idx.split_sets(Split::Train)[0]).clone()
    }

    fn disk_view(side: usize, radius: f64) -> ViewRecord {
        let mut mask = Image::filled(side, side, 1, 0.0);
        let mut color = Image::filled(side, side, 3, 0.15);
        let mut depth = Image::filled(side, side, 1, 1.0);
        let c = (side as f64 - 1.0) / 2.0;
        for y in 0..side {
            for x in 0..side {
                if ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt() < radius {
                    mask.set(y, x, 0, 1.0);
                    color.set(y, x, 0, 0.9);
                    color.set(y, x, 1, 0.3);
                    depth.set(y, x, 0, 0.9);
                }
            }
        }
        ViewRecord {
            view_id: 0,
            color,
            depth,
            mask,
            hha: None,
            mean_color: None,
            mean_depth: None,
        }
    }

    #[test]
    fn evaluation_uses_fixed_order() {
        let set = tiny_set();
        let sel = ViewSelection {
            train_pool: (0..10).collect(),
            views: 3,
            test_order: vec![0, 4, 8],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let ids: Vec<usize> = sample_views(&set, &sel, false, &mut rng).unwrap().iter().map(|v| v.view_id).collect();
            assert_eq!(ids, [0, 4, 8]);
        }
    }

    #[test]
    fn training_draws_distinct_views() {
        let set = tiny_set();
        let sel = ViewSelection::first(3, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let ids: BTreeSet<usize> = sample_views(&set, &sel, true, &mut rng).unwrap().iter().map(|v| v.view_id).collect();
            assert_eq!(ids.len(), 3);
        }
    }

    #[test]
    fn pool_smaller_than_views_is_rejected() {
        let set = tiny_set();
        let sel = ViewSelection {
            train_pool: vec![0, 1],
            views: 3,
            test_order: vec![0, 1, 0],
        };
        let err = sample_views(&set, &sel, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn orderings_are_uniform() {
        let set = tiny_set();
        let sel = ViewSelection::first(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
        for _ in 0..n {
            let ids = sample_views(&set, &sel, true, &mut rng).unwrap().iter().map(|v| v.view_id).collect();
            *counts.entry(ids).or_default() += 1;
        }
        assert_eq!(counts.len(), 6);
        let p = 1.0 / 6.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts.values() {
            assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    fn batch() -> Vec<LabeledViews> {
        let set = tiny_set();
        let views: Vec<ViewRecord> = set.views[..3].to_vec();
        // tag each view by a unique view id: set index · 10 + slot
        (0..6)
            .map(|i| {
                let vs = views
                    .iter()
                    .enumerate()
                    .map(|(s, v)| ViewRecord {
                        view_id: i * 10 + s,
                        ..v.clone()
                    })
                    .collect();
                LabeledViews::new(vs, i % 3)
            })
            .collect()
    }

    #[test]
    fn view_and_class_wise_keeps_labels_and_slots() {
        let b = batch();
        let out = shuffle_sets(&b, ShuffleMode::VwCw, &mut ChaCha8Rng::seed_from_u64(3));
        for s in &out {
            assert!(s.view_classes.iter().all(|c| *c == s.class));
            for (slot, v) in s.views.iter().enumerate() {
                assert_eq!(v.view_id % 10, slot);
                assert_eq!((v.view_id / 10) % 3, s.class);
            }
        }
    }

    #[test]
    fn cross_class_shuffle_mixes_labels() {
        let b = batch();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut seen_mixed = false;
        for _ in 0..10 {
            let out = shuffle_sets(&b, ShuffleMode::VwNotCw, &mut rng);
            for s in &out {
                for (slot, v) in s.views.iter().enumerate() {
                    assert_eq!(v.view_id % 10, slot);
                }
                seen_mixed |= s.multi_hot(3).iter().sum::<f64>() > 1.0;
            }
        }
        assert!(seen_mixed);
    }

    #[test]
    fn none_and_singletons_pass_through() {
        let b = batch();
        assert_eq!(shuffle_sets(&b, ShuffleMode::None, &mut ChaCha8Rng::seed_from_u64(0)), b);
        let single: Vec<LabeledViews> = b.iter().take(3).cloned().collect();
        assert_eq!(shuffle_sets(&single, ShuffleMode::NotVwCw, &mut ChaCha8Rng::seed_from_u64(0)), single);
    }

    #[test]
    fn flip_twice_is_identity() {
        let v = disk_view(20, 6.0);
        let f = v.color.flip_horizontal().flip_horizontal();
        assert_eq!(f, v.color);
    }

    #[test]
    fn zero_jitter_keeps_color() {
        let v = disk_view(20, 6.0);
        let p = AugPolicy {
            depth_noise: 0.01,
            ..AugPolicy::none()
        };
        let out = geometric_color_augment(&v, &p, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out.color, v.color);
        assert_ne!(out.depth, v.depth);
    }

    #[test]
    fn geometry_preserves_mask_area_and_alignment() {
        let v = disk_view(64, 18.0);
        let area = v.mask.count_foreground() as f64;
        let p = AugPolicy {
            colorjitter: 0.0,
            depth_noise: 0.0,
            ..AugPolicy::standard()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..30 {
            let out = geometric_color_augment(&v, &p, &mut rng);
            let a = out.mask.count_foreground() as f64;
            assert!((a - area).abs() / area <= 0.01, "{a} vs {area}");
            let fg: Vec<(usize, usize)> = (0..64)
                .flat_map(|y| (0..64).map(move |x| (y, x)))
                .filter(|(y, x)| out.mask.get(*y, *x, 0) > 0.5)
                .collect();
            let overlap = fg.iter().filter(|(y, x)| (out.color.get(*y, *x, 0) - 0.15).abs() > 0.01).count();
            assert!(overlap as f64 / fg.len() as f64 >= 0.99);
        }
    }

    #[test]
    fn resolution_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(resolve_resolution(&AugPolicy::none(), 224, &mut rng), 224);
        let p = AugPolicy {
            multi_scale: true,
            ..AugPolicy::none()
        };
        for _ in 0..500 {
            let r = resolve_resolution(&p, 224, &mut rng);
            assert!((202..=246).contains(&r) && r % 2 == 0);
            let r = resolve_resolution(&p, 512, &mut rng);
            assert!((460..=564).contains(&r) && r % 2 == 0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn shuffles_keep_shapes(seed in 0u64..1000, mode_i in 0usize..5) {
            let b = batch();
            let out = shuffle_sets(&b, ShuffleMode::ALL[mode_i], &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(out.len(), b.len());
            for (o, i) in out.iter().zip(&b) {
                prop_assert_eq!(o.views.len(), i.views.len());
                prop_assert_eq!(o.class, i.class);
            }
            // every view appears exactly once across the batch
            let mut ids: Vec<usize> = out.iter().flat_map(|s| s.views.iter().map(|v| v.view_id)).collect();
            ids.sort();
            let mut want: Vec<usize> = b.iter().flat_map(|s| s.views.iter().map(|v| v.view_id)).collect();
            want.sort();
            prop_assert_eq!(ids, want);
        }
    }
}
