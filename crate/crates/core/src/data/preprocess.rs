//! Image-level preprocessing: ROI crop, depth standardization, HHA.

use rand::Rng;

use super::{Image, ViewRecord};
use crate::error::{Error, Result};

/// Square crop around the mask's bounding box, resampled to
/// `target × target`.
///
/// The box side is the larger bbox side, enlarged by up to `jitter` and its
/// center shifted by up to `±jitter` of the bbox size. With `upsample`
/// unset the box is first grown to at least `target`, so small objects keep
/// their native scale; large ones are always downscaled. Color, depth and
/// HHA use bilinear sampling, the mask nearest-neighbour, all on the same
/// sampling grid.
pub fn roi_crop(
    view: &ViewRecord,
    target: usize,
    jitter: f64,
    upsample: bool,
    rng: &mut impl Rng,
) -> Result<ViewRecord> {
    if target == 0 {
        return Err(Error::config("roi crop target must be positive"));
    }
    if !(0.0..0.5).contains(&jitter) {
        return Err(Error::config(format!("crop jitter {jitter} outside [0, 0.5)")));
    }
    let window = crop_window(&view.mask, target, jitter, upsample, rng, view.view_id)?;
    Ok(ViewRecord {
        view_id: view.view_id,
        color: window.resample(&view.color, Sampling::Bilinear),
        depth: window.resample(&view.depth, Sampling::Bilinear),
        mask: window.resample(&view.mask, Sampling::Nearest),
        hha: view.hha.as_ref().map(|h| window.resample(h, Sampling::Bilinear)),
        mean_color: view
            .mean_color
            .as_ref()
            .map(|m| window.resample(m, Sampling::Bilinear)),
        mean_depth: view
            .mean_depth
            .as_ref()
            .map(|m| window.resample(m, Sampling::Bilinear)),
    })
}

/// Crop of the mask alone with the same draws as [`roi_crop`].
pub fn roi_crop_mask(
    mask: &Image,
    target: usize,
    jitter: f64,
    upsample: bool,
    rng: &mut impl Rng,
) -> Result<Image> {
    let window = crop_window(mask, target, jitter, upsample, rng, 0)?;
    Ok(window.resample(mask, Sampling::Nearest))
}

#[derive(Clone, Copy, Debug)]
enum Sampling {
    Bilinear,
    Nearest,
}

#[derive(Clone, Copy, Debug)]
struct CropWindow {
    y0: f64,
    x0: f64,
    side: f64,
    target: usize,
}

fn crop_window(
    mask: &Image,
    target: usize,
    jitter: f64,
    upsample: bool,
    rng: &mut impl Rng,
    view_id: usize,
) -> Result<CropWindow> {
    let bbox = mask.foreground_bbox().ok_or_else(|| {
        Error::integrity(
            format!("view {view_id}"),
            "roi crop on a mask without foreground",
        )
    })?;
    if bbox.width() == 0 || bbox.height() == 0 {
        return Err(Error::integrity(format!("view {view_id}"), "degenerate bounding box"));
    }
    let (bw, bh) = (bbox.width() as f64, bbox.height() as f64);
    let mut cy = bbox.y0 as f64 + bh / 2.0;
    let mut cx = bbox.x0 as f64 + bw / 2.0;
    let mut side = bw.max(bh);
    if jitter > 0.0 {
        side *= 1.0 + rng.gen_range(0.0..jitter);
        cy += rng.gen_range(-jitter..jitter) * bh;
        cx += rng.gen_range(-jitter..jitter) * bw;
    }
    if !upsample {
        side = side.max(target as f64);
    }
    let side = side.round().max(1.0);
    Ok(CropWindow {
        y0: (cy - side / 2.0).round(),
        x0: (cx - side / 2.0).round(),
        side,
        target,
    })
}

impl CropWindow {
    fn resample(&self, src: &Image, mode: Sampling) -> Image {
        let t = self.target;
        let c = src.channels();
        let scale = self.side / t as f64;
        let mut out = Image::filled(t, t, c, 0.0);
        let mut px = vec![0.0f32; c];
        for oy in 0..t {
            for ox in 0..t {
                // Output pixel centers mapped into source pixel-center coordinates.
                let sy = self.y0 + (oy as f64 + 0.5) * scale - 0.5;
                let sx = self.x0 + (ox as f64 + 0.5) * scale - 0.5;
                match mode {
                    Sampling::Bilinear => src.sample_bilinear(sy, sx, &mut px),
                    Sampling::Nearest => {
                        // floor of the continuous position avoids .5 ties
                        src.sample_nearest((sy + 0.5).floor(), (sx + 0.5).floor(), &mut px)
                    }
                }
                for (ch, v) in px.iter().enumerate() {
                    out.set(oy, ox, ch, *v);
                }
            }
        }
        out
    }
}

/// Zero-mean, unit-variance depth over the valid region (mask foreground,
/// or every pixel without a mask). Pixels outside the region become 0, and
/// a region with (numerically) constant depth maps to all zeros.
pub fn depth_normalize(depth: &Image, mask: Option<&Image>) -> Image {
    let valid: Vec<bool> = match mask {
        Some(m) => m.data().iter().map(|v| *v > 0.5).collect(),
        None => vec![true; depth.data().len()],
    };
    let vals: Vec<f64> = depth
        .data()
        .iter()
        .zip(&valid)
        .filter(|(_, v)| **v)
        .map(|(d, _)| *d as f64)
        .collect();
    let (h, w) = depth.dims();
    let mut out = Image::filled(h, w, 1, 0.0);
    if vals.is_empty() {
        return out;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-9 * mean.abs().max(1.0) {
        return out;
    }
    for ((o, d), v) in out.data_mut().iter_mut().zip(depth.data()).zip(&valid) {
        if *v {
            *o = ((*d as f64 - mean) / std) as f32;
        }
    }
    out
}

/// Pinhole camera parameters in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            fx: a[0],
            fy: a[1],
            cx: a[2],
            cy: a[3],
        }
    }
}

/// HHA encoding plus the mask of pixels that had a depth measurement.
#[derive(Clone, Debug)]
pub struct HhaOutput {
    pub hha: Image,
    pub valid: Vec<bool>,
}

/// Three-channel depth encoding: horizontal disparity, height above the
/// lowest point along `-gravity`, and angle between the surface normal and
/// `-gravity`.
///
/// Channel scaling, all into `[0, 1]`:
/// * disparity = `z_min / z` (strictly decreasing in depth); pixels with no
///   depth get the maximum, 1, and are flagged invalid;
/// * height is min-max scaled over valid pixels (constant height → 0);
/// * angle is `acos(n̂ · up) / π`, normals oriented towards the camera.
pub fn hha_encode(depth: &Image, k: &Intrinsics, gravity: [f64; 3]) -> Result<HhaOutput> {
    if k.fx.abs() < 1e-12 || k.fy.abs() < 1e-12 {
        return Err(Error::config("intrinsics are not invertible"));
    }
    let gnorm = gravity.iter().map(|g| g * g).sum::<f64>().sqrt();
    if (gnorm - 1.0).abs() > 1e-6 {
        return Err(Error::config(format!("gravity must be a unit vector, |g| = {gnorm}")));
    }
    let up = [-gravity[0], -gravity[1], -gravity[2]];
    let (h, w) = depth.dims();
    let z: Vec<f64> = depth.data().iter().map(|d| *d as f64).collect();
    let valid: Vec<bool> = z.iter().map(|d| d.is_finite() && *d > 0.0).collect();
    let point = |y: usize, x: usize| -> [f64; 3] {
        let d = z[y * w + x];
        [(x as f64 - k.cx) * d / k.fx, (y as f64 - k.cy) * d / k.fy, d]
    };

    let z_min = z
        .iter()
        .zip(&valid)
        .filter(|(_, v)| **v)
        .map(|(d, _)| *d)
        .fold(f64::INFINITY, f64::min);

    let heights: Vec<f64> = (0..h * w)
        .map(|i| {
            if valid[i] {
                dot(point(i / w, i % w), up)
            } else {
                0.0
            }
        })
        .collect();
    let (hmin, hmax) = heights
        .iter()
        .zip(&valid)
        .filter(|(_, v)| **v)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (h, _)| {
            (lo.min(*h), hi.max(*h))
        });

    let mut out = Image::filled(h, w, 3, 0.0);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !valid[i] {
                out.set(y, x, 0, 1.0);
                continue;
            }
            out.set(y, x, 0, (z_min / z[i]) as f32);
            let hr = hmax - hmin;
            let hn = if hr > 1e-12 { (heights[i] - hmin) / hr } else { 0.0 };
            out.set(y, x, 1, hn as f32);

            let nb = |yy: isize, xx: isize| -> Option<[f64; 3]> {
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    return None;
                }
                let (yy, xx) = (yy as usize, xx as usize);
                valid[yy * w + xx].then(|| point(yy, xx))
            };
            let p = point(y, x);
            let (yi, xi) = (y as isize, x as isize);
            let du = match (nb(yi, xi + 1), nb(yi, xi - 1)) {
                (Some(a), Some(b)) => sub(a, b),
                (Some(a), None) => sub(a, p),
                (None, Some(b)) => sub(p, b),
                (None, None) => [1.0, 0.0, 0.0],
            };
            let dv = match (nb(yi + 1, xi), nb(yi - 1, xi)) {
                (Some(a), Some(b)) => sub(a, b),
                (Some(a), None) => sub(a, p),
                (None, Some(b)) => sub(p, b),
                (None, None) => [0.0, 1.0, 0.0],
            };
            let mut n = cross(du, dv);
            let nn = dot(n, n).sqrt();
            let angle = if nn > 0.0 {
                n = [n[0] / nn, n[1] / nn, n[2] / nn];
                if dot(n, p) > 0.0 {
                    n = [-n[0], -n[1], -n[2]];
                }
                dot(n, up).clamp(-1.0, 1.0).acos() / std::f64::consts::PI
            } else {
                0.0
            };
            out.set(y, x, 2, angle as f32);
        }
    }
    Ok(HhaOutput { hha: out, valid })
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record_with_box(h: usize, w: usize, y0: usize, x0: usize, bh: usize, bw: usize) -> ViewRecord {
        let mut mask = Image::filled(h, w, 1, 0.0);
        let mut color = Image::filled(h, w, 3, 0.1);
        let mut depth = Image::filled(h, w, 1, 1.0);
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                mask.set(y, x, 0, 1.0);
                color.set(y, x, 0, 0.9);
                depth.set(y, x, 0, 0.8);
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
    fn upsampled_crop_contains_whole_bbox() {
        let v = record_with_box(400, 400, 50, 60, 80, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = roi_crop(&v, 224, 0.0, true, &mut rng).unwrap();
        assert_eq!(c.color.dims(), (224, 224));
        let bb = c.mask.foreground_bbox().unwrap();
        // wider side spans the full output
        assert_eq!((bb.x0, bb.x1), (0, 224));
        // ~80/100 of the height is foreground
        let expected = 224.0 * 0.8;
        assert!((bb.height() as f64 - expected).abs() <= 2.0, "{bb:?}");
    }

    #[test]
    fn large_bbox_is_downscaled() {
        let v = record_with_box(400, 400, 40, 40, 300, 300);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for upsample in [true, false] {
            let c = roi_crop(&v, 224, 0.0, upsample, &mut rng).unwrap();
            assert_eq!(c.mask.dims(), (224, 224));
            assert_eq!(c.mask.count_foreground(), 224 * 224);
        }
    }

    #[test]
    fn small_bbox_without_upsampling_keeps_scale() {
        let v = record_with_box(400, 400, 150, 150, 40, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = roi_crop(&v, 100, 0.0, false, &mut rng).unwrap();
        assert_eq!(c.mask.count_foreground(), 40 * 40);
    }

    #[test]
    fn jitter_is_reproducible_and_mask_alignment_holds() {
        let v = record_with_box(120, 140, 30, 20, 50, 70);
        for seed in 0..5 {
            let a = roi_crop(&v, 64, 0.2, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = roi_crop(&v, 64, 0.2, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(a, b);
            let m = roi_crop_mask(&v.mask, 64, 0.2, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(m, a.mask);
        }
    }

    #[test]
    fn empty_mask_is_an_integrity_error() {
        let mut v = record_with_box(20, 20, 0, 0, 1, 1);
        v.mask = Image::filled(20, 20, 1, 0.0);
        let err = roi_crop(&v, 8, 0.0, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Integrity { .. }));
    }

    #[test]
    fn constant_depth_normalizes_to_zero() {
        let d = Image::filled(8, 8, 1, 1.5);
        assert!(depth_normalize(&d, None).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_level_depth_maps_to_unit_values() {
        let data: Vec<f32> = (0..16).map(|i| if i % 2 == 0 { 1.0 } else { 3.0 }).collect();
        let d = Image::new(4, 4, 1, data);
        let n = depth_normalize(&d, None);
        for (o, i) in n.data().iter().zip(d.data()) {
            let expected = if *i == 1.0 { -1.0 } else { 1.0 };
            assert!((o - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn normalized_depth_statistics_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..32 * 32).map(|_| rng.gen_range(0.4..2.5)).collect();
        let d = Image::new(32, 32, 1, data);
        let mut mask = Image::filled(32, 32, 1, 0.0);
        for i in 0..32 * 32 {
            if rng.gen_bool(0.6) {
                mask.data_mut()[i] = 1.0;
            }
        }
        for m in [None, Some(&mask)] {
            let n = depth_normalize(&d, m);
            let vals: Vec<f64> = n
                .data()
                .iter()
                .enumerate()
                .filter(|(i, _)| m.map_or(true, |m| m.data()[*i] > 0.5))
                .map(|(_, v)| *v as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((std - 1.0).abs() < 1e-4, "std {std}");
            let twice = depth_normalize(&n, m);
            let diff = twice
                .data()
                .iter()
                .zip(n.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(diff < 1e-5, "idempotence {diff}");
        }
    }

    fn top_down() -> (Intrinsics, [f64; 3]) {
        (
            Intrinsics {
                fx: 50.0,
                fy: 50.0,
                cx: 16.0,
                cy: 16.0,
            },
            [0.0, 0.0, 1.0],
        )
    }

    #[test]
    fn floor_plane_has_zero_angle() {
        let (k, g) = top_down();
        let d = Image::filled(32, 32, 1, 1.2);
        let out = hha_encode(&d, &k, g).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                assert!(out.hha.get(y, x, 2).abs() < 1e-6);
                assert!(out.hha.get(y, x, 1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn disparity_decreases_with_depth() {
        let (k, g) = top_down();
        let mut d = Image::filled(4, 4, 1, 1.0);
        d.set(2, 2, 0, 2.0);
        d.set(0, 0, 0, 0.0);
        let out = hha_encode(&d, &k, g).unwrap();
        assert!(out.hha.get(1, 1, 0) > out.hha.get(2, 2, 0));
        assert!(!out.valid[0]);
        assert_eq!(out.hha.get(0, 0, 0), 1.0);
    }

    #[test]
    fn rejects_bad_frames() {
        let d = Image::filled(4, 4, 1, 1.0);
        let (k, _) = top_down();
        assert!(hha_encode(&d, &k, [0.0, 0.0, 2.0]).is_err());
        let singular = Intrinsics { fx: 0.0, ..k };
        assert!(hha_encode(&d, &singular, [0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn sphere_scene_channels_in_unit_range() {
        let (k, g) = top_down();
        let (h, w) = (32, 32);
        let mut d = Image::filled(h, w, 1, 1.5);
        // sphere of radius 0.2 m centred 1.2 m in front of the camera
        for y in 0..h {
            for x in 0..w {
                let rx = (x as f64 - k.cx) / k.fx;
                let ry = (y as f64 - k.cy) / k.fy;
                let (a, b, c) = (rx * rx + ry * ry + 1.0, -2.0 * 1.2, 1.2 * 1.2 - 0.04);
                let disc = b * b - 4.0 * a * c;
                if disc >= 0.0 {
                    d.set(y, x, 0, ((-b - disc.sqrt()) / (2.0 * a)) as f32);
                }
            }
        }
        let out = hha_encode(&d, &k, g).unwrap();
        assert!(out.hha.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let angles: Vec<f32> = (0..h * w).map(|i| out.hha.data()[i * 3 + 2]).collect();
        assert!(angles.iter().cloned().fold(0.0, f32::max) > 0.1);
    }
}
