//! On-disk dataset layout.
//!
//! ```text
//! root/manifest.json
//! root/classes/<class_id>/meta.json
//! root/classes/<class_id>/sets/<set_id>/split.txt
//! root/classes/<class_id>/sets/<set_id>/view_<k>_color.png
//! root/classes/<class_id>/sets/<set_id>/view_<k>_depth.u16.png   (millimeters)
//! root/classes/<class_id>/sets/<set_id>/view_<k>_mask.png
//! ```
//!
//! `split.txt` holds the split name on its first line followed by optional
//! `key=value` lines (`rotation_id`, `lay_position_id`, `background_set`).
//! The published MVIP layout maps onto this one class directory per part,
//! one set directory per capture and one file triple per camera.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use rayon::prelude::*;
use serde::Serialize;

use super::{ClassInfo, DatasetIndex, Image, ImageSet, Manifest, Split, ViewRecord, MANIFEST_FORMAT};
use crate::error::{Error, Result};

fn schema(path: &Path, reason: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| schema(path, format!("cannot read: {e}")))?;
    serde_json::from_str(&text).map_err(|e| schema(path, format!("malformed: {e}")))
}

struct SetHeader {
    dir: PathBuf,
    set_id: String,
    class_id: usize,
    split: Split,
    rotation_id: usize,
    lay_position_id: usize,
    background_set: Option<String>,
}

fn read_split_file(dir: &Path, set_id: &str, class_id: usize) -> Result<SetHeader> {
    let path = dir.join("split.txt");
    let text = fs::read_to_string(&path).map_err(|e| schema(&path, format!("cannot read: {e}")))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let split: Split = lines
        .next()
        .ok_or_else(|| schema(&path, "empty split file"))?
        .parse()
        .map_err(|e: Error| schema(&path, e.to_string()))?;
    let mut header = SetHeader {
        dir: dir.to_path_buf(),
        set_id: set_id.to_string(),
        class_id,
        split,
        rotation_id: 0,
        lay_position_id: 0,
        background_set: None,
    };
    for line in lines {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| schema(&path, format!("expected key=value, got '{line}'")))?;
        let v = v.trim();
        let parse = |v: &str| v.parse::<usize>().map_err(|_| schema(&path, format!("bad integer '{v}'")));
        match k.trim() {
            "rotation_id" => header.rotation_id = parse(v)?,
            "lay_position_id" => header.lay_position_id = parse(v)?,
            "background_set" => header.background_set = Some(v.to_string()),
            other => return Err(schema(&path, format!("unknown key '{other}'"))),
        }
    }
    Ok(header)
}

/// Everything found on disk before rasters are read.
struct Scan {
    manifest: Manifest,
    classes: Vec<ClassInfo>,
    headers: Vec<SetHeader>,
    warnings: Vec<String>,
}

fn scan(root: &Path) -> Result<Scan> {
    let manifest: Manifest = read_json(&root.join("manifest.json"))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(schema(
            &root.join("manifest.json"),
            format!("format '{}' is not '{MANIFEST_FORMAT}'", manifest.format),
        ));
    }
    let classes_dir = root.join("classes");
    let mut entries: Vec<(usize, PathBuf)> = Vec::new();
    let mut warnings = Vec::new();
    let listing = fs::read_dir(&classes_dir).map_err(|e| schema(&classes_dir, format!("cannot list: {e}")))?;
    for entry in listing {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        match name.parse::<usize>() {
            Ok(id) if id < manifest.class_count => entries.push((id, entry.path())),
            _ => warnings.push(format!("unknown class directory '{name}' ignored")),
        }
    }
    entries.sort();

    let mut classes = Vec::with_capacity(entries.len());
    let mut headers = Vec::new();
    for (id, dir) in &entries {
        let meta_path = dir.join("meta.json");
        let info: ClassInfo = read_json(&meta_path)?;
        if info.meta.class_id != *id {
            return Err(schema(
                &meta_path,
                format!("class_id {} does not match directory {id}", info.meta.class_id),
            ));
        }
        info.meta
            .validate(manifest.real)
            .map_err(|reason| schema(&meta_path, reason))?;
        classes.push(info);

        let sets_dir = dir.join("sets");
        let mut set_dirs: Vec<(String, PathBuf)> = fs::read_dir(&sets_dir)
            .map_err(|e| schema(&sets_dir, format!("cannot list: {e}")))?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_dir()).unwrap_or(false))
            .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
            .collect();
        set_dirs.sort();
        for (set_id, path) in set_dirs {
            headers.push(read_split_file(&path, &set_id, *id)?);
        }
    }
    if classes.len() != manifest.class_count {
        warnings.push(format!(
            "manifest lists {} classes, found {}",
            manifest.class_count,
            classes.len()
        ));
    }
    Ok(Scan {
        manifest,
        classes,
        headers,
        warnings,
    })
}

fn read_color(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Image::new(h as usize, w as usize, 3, data))
}

fn read_mask(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| if v > 127 { 1.0 } else { 0.0 }).collect();
    Ok(Image::new(h as usize, w as usize, 1, data))
}

fn read_depth(path: &Path) -> Result<Image> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 1000.0).collect();
    Ok(Image::new(h as usize, w as usize, 1, data))
}

fn load_set(header: &SetHeader, classes: &[ClassInfo]) -> Result<ImageSet> {
    let mut view_ids: Vec<usize> = fs::read_dir(&header.dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_prefix("view_")?
                .strip_suffix("_color.png")?
                .parse()
                .ok()
        })
        .collect();
    view_ids.sort_unstable();
    if view_ids.is_empty() {
        return Err(Error::integrity(&header.set_id, "no views found"));
    }
    let mut views = Vec::with_capacity(view_ids.len());
    for k in view_ids {
        let file = |suffix: &str| header.dir.join(format!("view_{k}_{suffix}"));
        for suffix in ["depth.u16.png", "mask.png"] {
            if !file(suffix).exists() {
                return Err(Error::integrity(&header.set_id, format!("view {k}: missing {suffix}")));
            }
        }
        views.push(ViewRecord {
            view_id: k,
            color: read_color(&file("color.png"))?,
            depth: read_depth(&file("depth.u16.png"))?,
            mask: read_mask(&file("mask.png"))?,
            hha: None,
            mean_color: None,
            mean_depth: None,
        });
    }
    let meta = classes
        .iter()
        .find(|c| c.meta.class_id == header.class_id)
        .expect("header class was scanned")
        .meta
        .clone();
    let set = ImageSet {
        set_id: header.set_id.clone(),
        rotation_id: header.rotation_id,
        lay_position_id: header.lay_position_id,
        views,
        meta,
        split: header.split,
        background_set: header.background_set.clone(),
    };
    set.validate()?;
    Ok(set)
}

/// Loads the dataset under `root`. With `split` given only that split's
/// rasters are read; split exclusivity is always checked over all sets.
pub fn load_dataset(root: &Path, split: Option<Split>) -> Result<DatasetIndex> {
    let scan = scan(root)?;
    let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
    for h in &scan.headers {
        if let Some(prev) = seen.insert(&h.set_id, h.split) {
            return Err(Error::integrity(
                &h.set_id,
                format!("set appears in both {prev} and {}", h.split),
            ));
        }
    }
    let wanted: Vec<&SetHeader> = scan
        .headers
        .iter()
        .filter(|h| split.map_or(true, |s| h.split == s))
        .collect();
    let sets: Vec<Arc<ImageSet>> = wanted
        .par_iter()
        .map(|h| load_set(h, &scan.classes).map(Arc::new))
        .collect::<Result<_>>()?;
    let mut index = DatasetIndex::new(scan.manifest, scan.classes, sets)?;
    index.warnings = scan.warnings;
    if split.is_none() {
        for (class, s) in index.classes_missing_splits() {
            index.warnings.push(format!("class {class} has no {s} set"));
        }
    }
    Ok(index)
}

/// Writes `index` in the documented layout, replacing nothing outside
/// `root`. Colors are stored as 8-bit RGB, depth as 16-bit millimeters.
pub fn save_dataset(index: &DatasetIndex, root: &Path) -> Result<()> {
    fs::create_dir_all(root.join("classes"))?;
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&index.manifest)?)?;
    for c in &index.classes {
        let dir = root.join("classes").join(c.meta.class_id.to_string());
        fs::create_dir_all(dir.join("sets"))?;
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(c)?)?;
    }
    index.sets.par_iter().try_for_each(|s| -> Result<()> {
        let dir = root
            .join("classes")
            .join(s.meta.class_id.to_string())
            .join("sets")
            .join(&s.set_id);
        fs::create_dir_all(&dir)?;
        let mut split = format!(
            "{}\nrotation_id={}\nlay_position_id={}\n",
            s.split, s.rotation_id, s.lay_position_id
        );
        if let Some(bg) = &s.background_set {
            split.push_str(&format!("background_set={bg}\n"));
        }
        fs::write(dir.join("split.txt"), split)?;
        for v in &s.views {
            let (h, w) = v.dims();
            let (h, w) = (h as u32, w as u32);
            let to_u8 = |x: f32| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
            let color = RgbImage::from_raw(w, h, v.color.data().iter().map(|x| to_u8(*x)).collect())
                .expect("color buffer size");
            color.save(dir.join(format!("view_{}_color.png", v.view_id)))?;
            let depth: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
                w,
                h,
                v.depth
                    .data()
                    .iter()
                    .map(|d| (*d as f64 * 1000.0).round().clamp(0.0, 65535.0) as u16)
                    .collect(),
            )
            .expect("depth buffer size");
            depth.save(dir.join(format!("view_{}_depth.u16.png", v.view_id)))?;
            let mask = GrayImage::from_raw(
                w,
                h,
                v.mask.data().iter().map(|m| if *m > 0.5 { 255 } else { 0 }).collect(),
            )
            .expect("mask buffer size");
            mask.save(dir.join(format!("view_{}_mask.png", v.view_id)))?;
        }
        Ok(())
    })
}

/// Machine-readable result of `validate`.
#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub root: PathBuf,
    pub ok: bool,
    pub class_count: usize,
    pub super_class_count: usize,
    pub tag_vocabulary: usize,
    pub split_counts: BTreeMap<Split, usize>,
    pub checksum: Option<String>,
    pub warnings: Vec<String>,
    pub errors: Vec<String>,
}

/// Loads everything under `root` and reports instead of failing.
pub fn validate_root(root: &Path) -> ValidationReport {
    match load_dataset(root, None) {
        Ok(index) => {
            let mut errors = Vec::new();
            for (class, s) in index.classes_missing_splits() {
                errors.push(format!("class {class} has no {s} set"));
            }
            if index.distinct_super_classes() > index.manifest.super_class_count {
                errors.push(format!(
                    "{} super-classes in use, manifest allows {}",
                    index.distinct_super_classes(),
                    index.manifest.super_class_count
                ));
            }
            ValidationReport {
                root: root.to_path_buf(),
                ok: errors.is_empty(),
                class_count: index.num_classes(),
                super_class_count: index.distinct_super_classes(),
                tag_vocabulary: index.manifest.tag_vocabulary.len(),
                split_counts: index.split_counts.clone(),
                checksum: Some(index.checksum()),
                warnings: index
                    .warnings
                    .iter()
                    .filter(|w| !w.contains("has no"))
                    .cloned()
                    .collect(),
                errors,
            }
        }
        Err(e) => ValidationReport {
            root: root.to_path_buf(),
            ok: false,
            class_count: 0,
            super_class_count: 0,
            tag_vocabulary: 0,
            split_counts: BTreeMap::new(),
            checksum: None,
            warnings: Vec::new(),
            errors: vec![e.to_string()],
        },
    }
}
