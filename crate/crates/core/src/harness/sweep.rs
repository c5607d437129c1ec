//! Grid presets over the base configuration and their results table.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::{prepare_dataset, summarize, train_on};
use crate::augment::ShuffleMode;
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::losses::LossMode;
use crate::rgbd::FusionDirection;
use crate::weight::AnchorMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepPreset {
    /// Every fusion kind, with plain CE and with the multi-head loss.
    Fusion,
    /// One model per view count `1..=V_max`, scored on the first `k` test
    /// views.
    Views,
    /// RGBD fusion directions.
    Rgbd,
    /// Weight anchor modes with the encoder-decoder fusion.
    Anchor,
    /// No augmentation, then each set-shuffling mode.
    Augment,
}

impl SweepPreset {
    pub const ALL: [SweepPreset; 5] = [
        SweepPreset::Fusion,
        SweepPreset::Views,
        SweepPreset::Rgbd,
        SweepPreset::Anchor,
        SweepPreset::Augment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepPreset::Fusion => "fusion",
            SweepPreset::Views => "views",
            SweepPreset::Rgbd => "rgbd",
            SweepPreset::Anchor => "anchor",
            SweepPreset::Augment => "augment",
        }
    }
}

impl fmt::Display for SweepPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s.trim())
            .ok_or_else(|| Error::config(format!("unknown sweep preset '{s}'")))
    }
}

/// One grid point: a label and the overrides applied to the base config.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

fn cell(label: impl Into<String>, overrides: &[(&str, String)]) -> SweepCell {
    SweepCell {
        label: label.into(),
        overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
    }
}

/// Grid of `preset` around `base`.
pub fn cells(preset: SweepPreset, base: &RunConfig) -> Vec<SweepCell> {
    match preset {
        SweepPreset::Fusion => FusionKind::ALL
            .iter()
            .flat_map(|k| {
                [LossMode::Ce, LossMode::Mh].map(|l| {
                    cell(
                        format!("{k}/{}", l.as_str()),
                        &[("model.fusion", k.to_string()), ("train.loss", l.as_str().to_string())],
                    )
                })
            })
            .collect(),
        SweepPreset::Views => {
            let pool: Vec<usize> = if base.views.pool.is_empty() {
                (0..base.data.synth.views).collect()
            } else {
                base.views.pool.clone()
            };
            (1..=pool.len())
                .map(|k| {
                    let order: Vec<String> = pool[..k].iter().map(|v| v.to_string()).collect();
                    cell(
                        format!("views={k}"),
                        &[("model.views", k.to_string()), ("views.test_order", order.join(","))],
                    )
                })
                .collect()
        }
        SweepPreset::Rgbd => [
            FusionDirection::None,
            FusionDirection::CToD,
            FusionDirection::DToC,
            FusionDirection::Bidirectional,
        ]
        .iter()
        .map(|d| {
            let name = serde_json::to_value(d).expect("serializes").as_str().unwrap_or_default().to_string();
            cell(
                format!("direction={name}"),
                &[("model.modality", "rgbd".into()), ("model.rgbd_direction", name.clone())],
            )
        })
        .collect(),
        SweepPreset::Anchor => AnchorMode::ALL
            .iter()
            .map(|a| {
                let name = serde_json::to_value(a).expect("serializes").as_str().unwrap_or_default().to_string();
                cell(
                    format!("anchor={name}"),
                    &[("model.fusion", "tr_ende".into()), ("model.anchor", name.clone())],
                )
            })
            .collect(),
        SweepPreset::Augment => {
            let mut out = vec![cell(
                "no_augmentation",
                &[
                    ("aug.crop_jitter", "0".into()),
                    ("aug.flip", "false".into()),
                    ("aug.rotate", "false".into()),
                    ("aug.colorjitter", "0".into()),
                    ("aug.depth_noise", "0".into()),
                    ("aug.multi_scale", "false".into()),
                ],
            )];
            out.extend(ShuffleMode::ALL.iter().map(|m| {
                cell(
                    format!("shuffle={}", m.as_str()),
                    &[("train.loss", "bce_stage1".into()), ("aug.shuffle", m.as_str().to_string())],
                )
            }));
            out
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub preset: String,
    pub cell: String,
    pub config_hash: String,
    pub seed: u64,
    pub runs: usize,
    pub finished_runs: usize,
    /// Best single-run values, the way a "maximum of n runs" table reports.
    pub val_top1_max: f64,
    pub test_top1_max: f64,
    pub test_top3_max: f64,
    pub test_top5_max: f64,
    /// Mean and sample std of test top-1 across runs.
    pub test_top1_mean: f64,
    pub test_top1_std: f64,
    pub status: String,
    pub error: String,
    /// Views preset only: outcome of the monotonicity check over 1→3 views.
    pub trend: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    /// Test top-1 for 1, 2, 3 views (as far as available).
    pub values: Vec<f64>,
    pub non_decreasing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub preset: SweepPreset,
    pub rows: Vec<SweepRow>,
    pub trend: Option<TrendCheck>,
}

impl SweepTable {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r).map_err(|e| Error::config(format!("csv: {e}")))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

fn views_trend(rows: &[SweepRow]) -> Option<TrendCheck> {
    let values: Vec<f64> = rows.iter().take(3).map(|r| r.test_top1_max).collect();
    if values.len() < 2 || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let non_decreasing = values.windows(2).all(|w| w[1] >= w[0]);
    Some(TrendCheck { values, non_decreasing })
}

/// Runs every cell of `preset` with `runs` seeds each (`seed + 0..runs`).
/// A failing cell is recorded and the sweep moves on.
pub fn sweep(preset: SweepPreset, base: &RunConfig, runs: usize) -> Result<SweepTable> {
    if runs == 0 {
        return Err(Error::config("sweep needs at least one run per cell"));
    }
    let data = prepare_dataset(base)?;
    let mut rows = Vec::new();
    for c in cells(preset, base) {
        let (cfg, mut err) = match base.with_all(&c.overrides) {
            Ok(cfg) => (cfg, None),
            Err(e) => (base.clone(), Some(e.to_string())),
        };
        let mut reports = Vec::new();
        if err.is_none() {
            for i in 0..runs as u64 {
                let mut run_cfg = cfg.clone();
                run_cfg.seed = base.seed + i;
                if !base.output.dir.is_empty() {
                    let safe: String = c.label.chars().map(|ch| if ch.is_alphanumeric() { ch } else { '_' }).collect();
                    run_cfg.output.dir = format!("{}/{}/{safe}/run{i}", base.output.dir, preset);
                }
                match train_on(&run_cfg, &data) {
                    Ok(r) => reports.push(r),
                    Err(e) => {
                        err = Some(e.to_string());
                    }
                }
            }
        }
        let max_of = |f: &dyn Fn(&super::train::RunReport) -> f64| {
            reports.iter().map(f).fold(f64::NAN, f64::max)
        };
        let top1: Vec<f64> = reports.iter().map(|r| r.test.top1).collect();
        let (_, mean, std) = summarize(&top1);
        rows.push(SweepRow {
            preset: preset.to_string(),
            cell: c.label.clone(),
            config_hash: cfg.hash(),
            seed: base.seed,
            runs,
            finished_runs: reports.len(),
            val_top1_max: max_of(&|r| r.best_val_top1),
            test_top1_max: max_of(&|r| r.test.top1),
            test_top3_max: max_of(&|r| r.test.top3),
            test_top5_max: max_of(&|r| r.test.top5),
            test_top1_mean: mean,
            test_top1_std: std,
            status: match (&err, reports.len()) {
                (None, _) => "ok".into(),
                (Some(_), 0) => "failed".into(),
                (Some(_), _) => "partial".into(),
            },
            error: err.unwrap_or_default(),
            trend: String::new(),
        });
    }
    let trend = (preset == SweepPreset::Views).then(|| views_trend(&rows)).flatten();
    if let Some(t) = &trend {
        let label = if t.non_decreasing { "non_decreasing" } else { "decreasing" };
        for r in &mut rows {
            r.trend = label.to_string();
        }
    }
    Ok(SweepTable { preset, rows, trend })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SynthConfig;
    use crate::harness::config::Profile;

    #[test]
    fn grid_axes() {
        let base = RunConfig::profile(Profile::Toy);
        assert_eq!(cells(SweepPreset::Fusion, &base).len(), FusionKind::ALL.len() * 2);
        let views = cells(SweepPreset::Views, &base);
        assert_eq!(views.len(), 3);
        assert_eq!(views[1].overrides[1].1, "0,1");
        assert_eq!(cells(SweepPreset::Rgbd, &base).len(), 4);
        assert_eq!(cells(SweepPreset::Anchor, &base).len(), 4);
        assert_eq!(cells(SweepPreset::Augment, &base).len(), 6);
        for p in SweepPreset::ALL {
            for c in cells(p, &base) {
                base.with_all(&c.overrides).unwrap().validate().unwrap();
            }
        }
    }

    #[test]
    fn failing_cells_are_recorded() {
        let mut base = RunConfig::profile(Profile::Toy);
        base.data.synth = SynthConfig {
            classes: 3,
            train_rotations: 2,
            val_per_lay: 1,
            test_per_lay: 1,
            image_size: 32,
            ..SynthConfig::default()
        };
        base.model.classes = 3;
        // 6 heads divide neither the tr_ende width nor pass validation
        base.model.width = 16;
        base.model.attn_heads = 6;
        base.train.epochs = 1;
        base.train.resolution = 16;
        let t = sweep(SweepPreset::Anchor, &base, 1).unwrap();
        assert_eq!(t.rows.len(), 4);
        assert!(t.rows.iter().all(|r| r.status == "failed" && !r.error.is_empty()));
        let csv = t.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("preset,cell,config_hash"));
    }

    #[test]
    fn trend_flags() {
        let row = |v: f64| SweepRow {
            preset: "views".into(),
            cell: String::new(),
            config_hash: String::new(),
            seed: 0,
            runs: 1,
            finished_runs: 1,
            val_top1_max: v,
            test_top1_max: v,
            test_top3_max: v,
            test_top5_max: v,
            test_top1_mean: v,
            test_top1_std: 0.0,
            status: "ok".into(),
            error: String::new(),
            trend: String::new(),
        };
        assert!(views_trend(&[row(0.5), row(0.6), row(0.6), row(0.1)]).unwrap().non_decreasing);
        assert!(!views_trend(&[row(0.5), row(0.4), row(0.6)]).unwrap().non_decreasing);
    }
}
