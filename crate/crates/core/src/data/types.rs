use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Image;
use crate::error::{Error, Result};

/// Real-dataset bounds on object size and weight.
pub const MAX_WEIGHT_KG: f64 = 15.0;
pub const MAX_PACKAGE_MM: [f64; 3] = [350.0, 450.0, 300.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split '{other}'"))),
        }
    }
}

/// One camera perspective of a capture.
///
/// `mean_color`/`mean_depth` hold temporally averaged counterparts when the
/// source provides them; `None` means "same as the instant image".
#[derive(Clone, Debug, PartialEq)]
pub struct ViewRecord {
    pub view_id: usize,
    /// `H×W×3`, values in `[0, 1]`.
    pub color: Image,
    /// `H×W×1`, meters; zero marks a missing measurement.
    pub depth: Image,
    /// `H×W×1`, 0 or 1.
    pub mask: Image,
    pub hha: Option<Image>,
    pub mean_color: Option<Image>,
    pub mean_depth: Option<Image>,
}

impl ViewRecord {
    pub fn dims(&self) -> (usize, usize) {
        self.color.dims()
    }

    pub fn mean_color(&self) -> &Image {
        self.mean_color.as_ref().unwrap_or(&self.color)
    }

    pub fn mean_depth(&self) -> &Image {
        self.mean_depth.as_ref().unwrap_or(&self.depth)
    }

    pub fn validate(&self, set_id: &str) -> Result<()> {
        let dims = self.color.dims();
        let fail = |reason: String| Err(Error::integrity(set_id, reason));
        if self.color.channels() != 3 || self.depth.channels() != 1 || self.mask.channels() != 1 {
            return fail(format!("view {}: unexpected channel counts", self.view_id));
        }
        if self.depth.dims() != dims || self.mask.dims() != dims {
            return fail(format!(
                "view {}: color {:?}, depth {:?}, mask {:?} sizes differ",
                self.view_id,
                dims,
                self.depth.dims(),
                self.mask.dims()
            ));
        }
        if let Some(h) = &self.hha {
            if h.dims() != dims || h.channels() != 3 {
                return fail(format!("view {}: hha size mismatch", self.view_id));
            }
        }
        if self.mask.count_foreground() == 0 {
            return fail(format!("view {}: mask has no foreground pixel", self.view_id));
        }
        if self.depth.data().iter().any(|d| !d.is_finite() || *d < 0.0) {
            return fail(format!("view {}: depth not finite and non-negative", self.view_id));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMeta {
    pub class_id: usize,
    pub super_class_id: usize,
    pub weight_kg: f64,
    pub package_lwh_mm: [f64; 3],
    pub nl_tags: Vec<u32>,
}

impl ObjectMeta {
    /// `real` additionally enforces the capture-station limits.
    pub fn validate(&self, real: bool) -> std::result::Result<(), String> {
        if !(self.weight_kg > 0.0) || !self.weight_kg.is_finite() {
            return Err(format!("weight {} kg is not positive", self.weight_kg));
        }
        if self.package_lwh_mm.iter().any(|d| !(*d > 0.0)) {
            return Err(format!("package size {:?} not positive", self.package_lwh_mm));
        }
        if real {
            if self.weight_kg >= MAX_WEIGHT_KG {
                return Err(format!("weight {} kg exceeds limit", self.weight_kg));
            }
            if self
                .package_lwh_mm
                .iter()
                .zip(MAX_PACKAGE_MM)
                .any(|(d, max)| *d > max)
            {
                return Err(format!("package size {:?} exceeds limit", self.package_lwh_mm));
            }
        }
        Ok(())
    }
}

/// One multi-view capture of a single object.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub set_id: String,
    pub rotation_id: usize,
    pub lay_position_id: usize,
    pub views: Vec<ViewRecord>,
    pub meta: ObjectMeta,
    pub split: Split,
    /// Capture of the empty scene; stored, never consumed by the pipeline.
    pub background_set: Option<String>,
}

impl ImageSet {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for v in &self.views {
            if !seen.insert(v.view_id) {
                return Err(Error::integrity(
                    &self.set_id,
                    format!("duplicate view id {}", v.view_id),
                ));
            }
            v.validate(&self.set_id)?;
        }
        Ok(())
    }

    pub fn view(&self, view_id: usize) -> Option<&ViewRecord> {
        self.views.iter().find(|v| v.view_id == view_id)
    }

    pub fn view_ids(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.view_id).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub name: String,
    #[serde(flatten)]
    pub meta: ObjectMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraInfo {
    /// `[fx, fy, cx, cy]` in pixels.
    pub intrinsics: [f64; 4],
    /// Unit gravity direction in the camera frame.
    pub gravity: [f64; 3],
}

/// Dataset-level facts stored in `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub class_count: usize,
    pub super_class_count: usize,
    pub tag_vocabulary: Vec<String>,
    pub views: usize,
    #[serde(default)]
    pub cameras: Vec<CameraInfo>,
    /// `true` for captured data, which must satisfy the station limits.
    #[serde(default)]
    pub real: bool,
}

pub const MANIFEST_FORMAT: &str = "mvip-layout/1";

/// Immutable, shareable view of a loaded or generated dataset.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub manifest: Manifest,
    pub classes: Vec<ClassInfo>,
    pub sets: Vec<Arc<ImageSet>>,
    pub split_counts: BTreeMap<Split, usize>,
    pub warnings: Vec<String>,
}

impl DatasetIndex {
    pub fn new(manifest: Manifest, classes: Vec<ClassInfo>, sets: Vec<Arc<ImageSet>>) -> Result<Self> {
        let mut split_counts = BTreeMap::new();
        for s in &sets {
            *split_counts.entry(s.split).or_insert(0) += 1;
        }
        let index = Self {
            manifest,
            classes,
            sets,
            split_counts,
            warnings: Vec::new(),
        };
        index.check_split_exclusivity()?;
        Ok(index)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Arc<ImageSet>> {
        self.sets.iter().filter(move |s| s.split == split)
    }

    pub fn split_sets(&self, split: Split) -> Vec<Arc<ImageSet>> {
        self.split(split).cloned().collect()
    }

    /// No `set_id` may appear twice, in particular not in two splits.
    pub fn check_split_exclusivity(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for s in &self.sets {
            if let Some(prev) = seen.insert(&s.set_id, s.split) {
                return Err(Error::integrity(
                    &s.set_id,
                    format!("set appears in both {prev} and {}", s.split),
                ));
            }
        }
        Ok(())
    }

    /// Classes lacking at least one set in some split.
    pub fn classes_missing_splits(&self) -> Vec<(usize, Split)> {
        let mut have: BTreeSet<(usize, Split)> = BTreeSet::new();
        for s in &self.sets {
            have.insert((s.meta.class_id, s.split));
        }
        let mut missing = Vec::new();
        for c in &self.classes {
            for split in Split::ALL {
                if !have.contains(&(c.meta.class_id, split)) {
                    missing.push((c.meta.class_id, split));
                }
            }
        }
        missing
    }

    pub fn distinct_super_classes(&self) -> usize {
        self.classes
            .iter()
            .map(|c| c.meta.super_class_id)
            .collect::<BTreeSet<_>>()
            .len()
    }

    /// SHA-256 over metadata and every raster, in set order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.classes {
            h.update(serde_json::to_vec(c).expect("class info serializes"));
        }
        for s in &self.sets {
            h.update(s.set_id.as_bytes());
            h.update(s.split.as_str().as_bytes());
            h.update((s.rotation_id as u64).to_le_bytes());
            h.update((s.lay_position_id as u64).to_le_bytes());
            for v in &s.views {
                h.update((v.view_id as u64).to_le_bytes());
                for img in [&v.color, &v.depth, &v.mask] {
                    for x in img.data() {
                        h.update(x.to_bits().to_le_bytes());
                    }
                }
            }
        }
        hex::encode(h.finalize())
    }
}
