//! Run configuration: named profiles, a flat `key = value` file format,
//! dotted-key overrides and a content hash.
//!
//! Every field is addressable by its dotted path, e.g. `model.fusion`,
//! `train.epochs` or `aug.shuffle`. A few short aliases are accepted:
//! `anchor.mode`, `rgbd.direction`, `weight.d`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::augment::{AugPolicy, ViewSelection};
use crate::data::{SynthConfig, WeightSpacing};
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::losses::LossMode;
use crate::model::ModelConfig;
use crate::schedule::ScheduleConfig;
use crate::weight::{NoiseMode, PropertyTrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Dataset directory; empty synthesizes one from `synth`.
    pub root: String,
    pub synth: SynthConfig,
    /// Seed of the synthetic set; independent of the run seed so repeated
    /// runs see the same data.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewConfig {
    /// View ids available for training; empty uses every dataset view.
    pub pool: Vec<usize>,
    /// Evaluation order; empty uses the first `model.views` pool ids.
    pub test_order: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub loss: LossMode,
    /// Side length of the ROI crops fed to the network.
    pub resolution: usize,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    /// Score the train split (without augmentation) after the last epoch.
    pub eval_train: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub lr_start: f64,
    pub lr_max: f64,
    pub lr_end: f64,
    pub peak_fraction: f64,
}

impl ScheduleParams {
    pub fn with_steps(&self, total_steps: usize) -> ScheduleConfig {
        ScheduleConfig {
            lr_start: self.lr_start,
            lr_max: self.lr_max,
            lr_end: self.lr_end,
            peak_fraction: self.peak_fraction,
            total_steps,
        }
    }
}

impl From<ScheduleConfig> for ScheduleParams {
    fn from(s: ScheduleConfig) -> Self {
        Self {
            lr_start: s.lr_start,
            lr_max: s.lr_max,
            lr_end: s.lr_end,
            peak_fraction: s.peak_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> mvip_autograd::optim::AdamConfig {
        mvip_autograd::optim::AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightConfig {
    /// Measurement noise applied to the weight fed to anchors in training.
    pub noise: NoiseMode,
    /// Recipe for the standalone weight classifier, also used to pretrain
    /// the frozen anchor upscaler.
    pub property: PropertyTrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    /// Directory for the metrics log and checkpoints; empty writes nothing.
    pub dir: String,
    /// Log one line per optimizer step in addition to one per epoch.
    pub log_steps: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub profile: String,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub views: ViewConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleParams,
    pub optim: OptimConfig,
    pub aug: AugPolicy,
    pub weight: WeightConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Profile {
    /// 8 synthetic classes, 3 views, 20 epochs; the overfit sanity run.
    Toy,
    /// Larger synthetic set with occlusion and a 5-view pool.
    Desk,
    /// Batch 32, 224 px, `Ch_V` 1024, the original schedule.
    Paper,
}

impl Profile {
    pub const ALL: [Profile; 3] = [Profile::Toy, Profile::Desk, Profile::Paper];

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Toy => "toy",
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Profile::ALL
            .into_iter()
            .find(|p| p.as_str() == s.trim())
            .ok_or_else(|| Error::config(format!("unknown profile '{s}'")))
    }
}

impl RunConfig {
    pub fn profile(p: Profile) -> Self {
        let synth = SynthConfig::default();
        let toy = Self {
            profile: p.as_str().to_string(),
            seed: 0,
            data: DataConfig {
                root: String::new(),
                synth: synth.clone(),
                seed: 0,
            },
            model: ModelConfig::new(3, synth.classes),
            views: ViewConfig {
                pool: Vec::new(),
                test_order: Vec::new(),
            },
            train: TrainConfig {
                epochs: 20,
                batch: 8,
                loss: LossMode::Mh,
                resolution: 64,
                threads: 0,
                eval_train: true,
            },
            // the standard shape at 10x the rates: from-scratch training
            // on 240 steps
            schedule: ScheduleConfig::standard(0).scaled(10.0).into(),
            optim: OptimConfig::default(),
            aug: AugPolicy {
                crop_jitter: 0.05,
                rotate_max_deg: 15.0,
                colorjitter: 0.1,
                depth_noise: 0.0,
                random_view_order: true,
                ..AugPolicy::standard()
            },
            weight: WeightConfig {
                noise: NoiseMode::Both,
                property: PropertyTrainConfig {
                    epochs: 60,
                    ..PropertyTrainConfig::desk()
                },
            },
            output: OutputConfig {
                dir: String::new(),
                log_steps: true,
            },
        };
        match p {
            Profile::Toy => toy,
            Profile::Desk => {
                let mut c = toy;
                c.data.synth = SynthConfig {
                    classes: 16,
                    views: 5,
                    lay_positions: 2,
                    occlusion: 0.3,
                    ..SynthConfig::default()
                };
                c.model.classes = 16;
                c.aug = AugPolicy::standard();
                c.train.epochs = 30;
                c
            }
            Profile::Paper => {
                let mut c = toy;
                c.data.synth = SynthConfig {
                    classes: 16,
                    views: 10,
                    image_size: 256,
                    ..SynthConfig::default()
                };
                c.model.classes = 16;
                c.model.width = 1024;
                c.train.batch = 32;
                c.train.epochs = 100;
                c.train.resolution = 224;
                c.schedule = ScheduleConfig::standard(0).into();
                c.aug = AugPolicy::standard();
                c.weight.property = PropertyTrainConfig::long_run();
                c
            }
        }
    }

    /// Profile defaults, then `key = value` lines from `path`, then the
    /// overrides in order. A `profile` key in the file or overrides picks
    /// the base profile.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        if let Some(p) = path {
            pairs.extend(parse_lines(&std::fs::read_to_string(p)?)?);
        }
        for o in overrides {
            pairs.push(split_pair(o)?);
        }
        let profile = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "profile")
            .map(|(_, v)| v.parse())
            .transpose()?
            .unwrap_or(Profile::Toy);
        let rest: Vec<(String, String)> = pairs.into_iter().filter(|(k, _)| k != "profile").collect();
        Self::profile(profile).with_all(&rest)
    }

    /// Copy with one dotted key set from its text form.
    pub fn with(&self, key: &str, value: &str) -> Result<Self> {
        self.with_all(&[(key.to_string(), value.to_string())])
    }

    /// Copy with every pair applied in order; the result is checked once,
    /// so a tagged variant can switch kind and then receive its fields.
    pub fn with_all(&self, pairs: &[(String, String)]) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for (k, v) in pairs {
            set_path(&mut tree, &alias(k), v).map_err(|e| Error::config(format!("{k} = {v}: {e}")))?;
        }
        serde_json::from_value(tree).map_err(|e| Error::config(format!("invalid setting: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.aug.validate()?;
        if self.train.epochs == 0 || self.train.batch == 0 {
            return Err(Error::config("epochs and batch must be positive"));
        }
        if self.train.resolution < 16 {
            return Err(Error::config("resolution below 16"));
        }
        self.schedule.with_steps(1).validate()?;
        if self.data.root.is_empty() {
            self.data.synth.validate()?;
            if self.data.synth.classes != self.model.classes {
                return Err(Error::config(format!(
                    "model.classes = {} but the synthetic set has {}",
                    self.model.classes, self.data.synth.classes
                )));
            }
        }
        Ok(())
    }

    /// Resolved view selection for a dataset with `available` views.
    pub fn view_selection(&self, available: usize) -> Result<ViewSelection> {
        let pool = if self.views.pool.is_empty() { (0..available).collect() } else { self.views.pool.clone() };
        let test_order = if self.views.test_order.is_empty() {
            pool.iter().take(self.model.views).copied().collect()
        } else {
            self.views.test_order.clone()
        };
        let sel = ViewSelection {
            train_pool: pool,
            views: self.model.views,
            test_order,
        };
        sel.validate()?;
        if let Some(v) = sel.train_pool.iter().find(|v| **v >= available) {
            return Err(Error::config(format!("view {v} does not exist, dataset has {available} views")));
        }
        Ok(sel)
    }

    /// Sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.flat() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn flat(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        flatten(&serde_json::to_value(self).expect("config serializes"), "", &mut m);
        m
    }

    /// SHA-256 over the sorted semantic keys; `output.*` and the thread
    /// count do not count.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.flat() {
            if k.starts_with("output.") || k == "train.threads" {
                continue;
            }
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Convenience for sweeps.
    pub fn with_fusion(mut self, kind: FusionKind) -> Self {
        self.model.fusion = kind;
        self
    }
}

const ALIASES: [(&str, &str); 7] = [
    ("anchor.mode", "model.anchor"),
    ("anchor.combine", "model.anchor_combine"),
    ("rgbd.direction", "model.rgbd_direction"),
    ("rgbd.final", "model.rgbd_final"),
    ("weight.d", "model.weight_d"),
    ("weight.d_h", "weight.property.d_h"),
    ("fusion", "model.fusion"),
];

fn alias(key: &str) -> String {
    let key = key.trim();
    ALIASES
        .iter()
        .find(|(a, _)| *a == key)
        .map_or(key.to_string(), |(_, k)| k.to_string())
}

fn split_pair(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(format!("expected key=value, got '{s}'")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// `key = value` lines; `#` starts a comment.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(|l| l.split_once('#').map_or(l, |(a, _)| a).trim())
        .filter(|l| !l.is_empty())
        .map(split_pair)
        .collect()
}

fn render(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Array(items) if items.iter().all(|i| !i.is_object() && !i.is_array()) => {
            items.iter().map(render).collect::<Vec<_>>().join(",")
        }
        other => other.to_string(),
    }
}

fn flatten(v: &Value, prefix: &str, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(child, &key, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), render(leaf));
        }
    }
}

fn parse_scalar(like: Option<&Value>, text: &str) -> Result<Value> {
    let bad = || Error::config(format!("cannot parse '{text}'"));
    Ok(match like {
        Some(Value::Bool(_)) => Value::Bool(match text {
            "true" | "1" | "yes" | "on" => true,
            "false" | "0" | "no" | "off" => false,
            _ => return Err(bad()),
        }),
        Some(Value::Number(n)) if n.is_f64() => Value::from(text.parse::<f64>().map_err(|_| bad())?),
        Some(Value::Number(_)) => match text.parse::<u64>() {
            Ok(u) => Value::from(u),
            Err(_) => Value::from(text.parse::<f64>().map_err(|_| bad())?),
        },
        Some(Value::String(_)) => Value::String(text.to_string()),
        Some(Value::Array(items)) => {
            if text.starts_with('[') {
                serde_json::from_str(text).map_err(|_| bad())?
            } else if text.is_empty() {
                Value::Array(Vec::new())
            } else {
                let elem = items.first().cloned().unwrap_or(Value::Number(0.into()));
                Value::Array(
                    text.split(',')
                        .map(|p| parse_scalar(Some(&elem), p.trim()))
                        .collect::<Result<_>>()?,
                )
            }
        }
        _ => {
            if let Ok(u) = text.parse::<u64>() {
                Value::from(u)
            } else if let Ok(f) = text.parse::<f64>() {
                Value::from(f)
            } else if let Ok(b) = text.parse::<bool>() {
                Value::Bool(b)
            } else {
                Value::String(text.to_string())
            }
        }
    })
}

fn set_path(tree: &mut Value, key: &str, text: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = tree;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let map: &mut Map<String, Value> = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("'{key}' does not name a setting")))?;
        if last {
            // new keys are only accepted inside tagged variants
            if !map.contains_key(*part) && !map.contains_key("kind") {
                return Err(Error::config(format!("unknown setting '{key}'")));
            }
            let value = parse_scalar(map.get(*part), text)?;
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .get_mut(*part)
            .ok_or_else(|| Error::config(format!("unknown setting '{key}'")))?;
    }
    Ok(())
}

/// Weight spacing from its text form, e.g. `separable:0.05`,
/// `ambiguous:3:0.005` or `uniform`.
pub fn parse_weight_spacing(s: &str) -> Result<WeightSpacing> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |i: usize| -> Result<f64> {
        parts
            .get(i)
            .ok_or_else(|| Error::config(format!("weight spacing '{s}' is missing a field")))?
            .parse::<f64>()
            .map_err(|_| Error::config(format!("weight spacing '{s}' has a bad number")))
    };
    Ok(match parts[0] {
        "separable" => WeightSpacing::Separable { gap: num(1)? },
        "ambiguous" => WeightSpacing::Ambiguous {
            group: num(1)? as usize,
            tolerance: num(2)?,
        },
        "uniform" => WeightSpacing::Uniform,
        other => return Err(Error::config(format!("unknown weight spacing '{other}'"))),
    })
}
