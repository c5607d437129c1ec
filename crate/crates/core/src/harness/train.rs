//! Training loop, evaluation and the multi-run stability protocol.
//!
//! Every random draw comes from a stream keyed by `(seed, epoch, index)`,
//! each sample is differentiated on its own tape and the per-sample
//! gradients are summed in batch order, so results do not depend on the
//! number of worker threads.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use mvip_autograd::optim::Adam;
use mvip_autograd::{GradBuffer, ParamId, Tape};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use crate::augment::{
    geometric_color_augment, resolve_resolution, sample_views, shuffle_sets, LabeledViews, ViewSelection,
};
use crate::data::{
    hha_encode, load_dataset, roi_crop, synthesize_dataset, DatasetIndex, ImageSet, Intrinsics, Split, ViewRecord,
};
use crate::error::{Error, Result};
use crate::losses::{effective_mode, mh_loss_on_tape, topk, LossMode, MetricReport, Target};
use crate::model::{DepthEncoding, Model, SampleInput, ViewTensors};
use crate::schedule::lr_at;
use crate::seed;
use crate::weight::{train_weight_classifier, weight_noise, AnchorMode, PropertyTrainConfig};

const ORDER_STREAM: u64 = 0x4f52_4445;
const BATCH_STREAM: u64 = 0x4241_5443;
const VIEW_STREAM: u64 = 0x5649_4557;
const AUG_STREAM: u64 = 0x4155_4721;
const EVAL_STREAM: u64 = 0x4556_414c;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_mode: LossMode,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    /// Mean per-head loss, overall head first.
    pub head_losses: Vec<f64>,
    pub val_top1: f64,
    pub val_top3: f64,
    pub val_top5: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_top1: f64,
    /// Path of the best checkpoint when an output directory was set.
    pub best_checkpoint: Option<PathBuf>,
    /// SHA-256 of the best checkpoint's bytes.
    pub checkpoint_digest: String,
    /// Train split scored with the final parameters, if requested.
    pub final_train: Option<MetricReport>,
    /// Test split scored with the best checkpoint.
    pub test: MetricReport,
    pub wall_clock_s: f64,
    /// The JSON-lines metrics log, also written to `metrics.jsonl`.
    #[serde(skip)]
    pub log: Vec<String>,
    #[serde(skip)]
    pub best: Option<Checkpoint>,
}

impl RunReport {
    /// SHA-256 of the metrics log.
    pub fn log_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for line in &self.log {
            h.update(line.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Loads `data.root`, or synthesizes the configured set when it is empty.
pub fn prepare_dataset(cfg: &RunConfig) -> Result<DatasetIndex> {
    if cfg.data.root.is_empty() {
        synthesize_dataset(&cfg.data.synth, cfg.data.seed)
    } else {
        load_dataset(Path::new(&cfg.data.root), None)
    }
}

/// Fills in HHA images from depth and the camera records where missing.
pub fn with_hha(data: &DatasetIndex) -> Result<DatasetIndex> {
    let mut out = data.clone();
    for set in &mut out.sets {
        if set.views.iter().all(|v| v.hha.is_some()) {
            continue;
        }
        let mut s = ImageSet::clone(set);
        for v in &mut s.views {
            if v.hha.is_some() {
                continue;
            }
            let cam = data
                .manifest
                .cameras
                .get(v.view_id)
                .or(data.manifest.cameras.first())
                .ok_or_else(|| Error::config("HHA needs camera intrinsics in the manifest"))?;
            v.hha = Some(hha_encode(&v.depth, &Intrinsics::from_array(cam.intrinsics), cam.gravity)?.hha);
        }
        *set = Arc::new(s);
    }
    Ok(out)
}

fn check_compat(cfg: &RunConfig, data: &DatasetIndex) -> Result<()> {
    if data.num_classes() != cfg.model.classes {
        return Err(Error::config(format!(
            "model has {} classes, dataset has {}",
            cfg.model.classes,
            data.num_classes()
        )));
    }
    Ok(())
}

/// Class weights of the dataset, in class order.
pub fn class_weights(data: &DatasetIndex) -> Vec<f64> {
    data.classes.iter().map(|c| c.meta.weight_kg).collect()
}

fn crop_views(
    views: &[ViewRecord],
    res: usize,
    cfg: &RunConfig,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Vec<ViewTensors>> {
    views
        .iter()
        .map(|v| {
            let jitter = if training { cfg.aug.crop_jitter } else { 0.0 };
            let mut r = roi_crop(v, res, jitter, cfg.aug.upsample_roi, rng)?;
            if training {
                r = geometric_color_augment(&r, &cfg.aug, rng);
            }
            ViewTensors::from_record(&r, &cfg.model)
        })
        .collect()
}

/// Deterministic scoring of `sets` with the fixed test view order, no
/// jitter and the base resolution.
pub fn evaluate_sets(
    model: &Model,
    cfg: &RunConfig,
    sel: &ViewSelection,
    weights: &[f64],
    sets: &[Arc<ImageSet>],
) -> Result<MetricReport> {
    let logits: Vec<Vec<f64>> = sets
        .par_iter()
        .enumerate()
        .map(|(i, set)| {
            let mut rng = seed::rng(&[cfg.seed, i as u64, EVAL_STREAM]);
            let views = sample_views(set, sel, false, &mut rng)?;
            let input = SampleInput {
                views: crop_views(&views, cfg.train.resolution, cfg, false, &mut rng)?,
                weight_kg: Some(weights[set.meta.class_id]),
            };
            Ok(model.forward(&input)?.o.data().to_vec())
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = sets.iter().map(|s| s.meta.class_id).collect();
    Ok(topk(&logits, &labels))
}

/// Scores one split of the dataset the model was configured for.
pub fn evaluate_model(model: &Model, cfg: &RunConfig, data: &DatasetIndex, split: Split) -> Result<MetricReport> {
    check_compat(cfg, data)?;
    let data = if cfg.model.depth_encoding == DepthEncoding::Hha && cfg.model.has_depth() {
        with_hha(data)?
    } else {
        data.clone()
    };
    let sel = cfg.view_selection(data.manifest.views)?;
    in_pool(cfg, || evaluate_sets(model, cfg, &sel, &class_weights(&data), &data.split_sets(split)))
}

/// Loads a checkpoint, rebuilds its dataset and scores `split`.
pub fn evaluate_checkpoint(path: &Path, split: Split) -> Result<MetricReport> {
    let ck = Checkpoint::load(path)?;
    let model = ck.restore()?;
    let data = prepare_dataset(&ck.header.config)?;
    evaluate_model(&model, &ck.header.config, &data, split)
}

fn in_pool<T: Send>(cfg: &RunConfig, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.train.threads)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(f)
}

/// Pretrains the anchor PropertyNet as a weight classifier on the class
/// weights.
pub fn pretrain_property_net(model: &mut Model, cfg: &RunConfig, weights: &[f64]) -> Result<()> {
    let pcfg = PropertyTrainConfig {
        d: cfg.model.weight_d,
        d_h: cfg.model.width,
        seed: cfg.seed,
        ..cfg.weight.property.clone()
    };
    let (state, _) = train_weight_classifier(weights, &pcfg)?;
    model.load_property_net(&state)
}

struct SampleGrad {
    grads: GradBuffer,
    loss: f64,
    heads: Vec<f64>,
}

struct Log {
    lines: Vec<String>,
    file: Option<BufWriter<File>>,
}

impl Log {
    fn push(&mut self, v: serde_json::Value) -> Result<()> {
        let line = v.to_string();
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}")?;
        }
        self.lines.push(line);
        Ok(())
    }
}

pub fn train(cfg: &RunConfig) -> Result<RunReport> {
    let data = prepare_dataset(cfg)?;
    train_on(cfg, &data)
}

/// Trains on an already loaded dataset.
pub fn train_on(cfg: &RunConfig, data: &DatasetIndex) -> Result<RunReport> {
    cfg.validate()?;
    in_pool(cfg, || run(cfg, data))
}

fn run(cfg: &RunConfig, data: &DatasetIndex) -> Result<RunReport> {
    let start = Instant::now();
    check_compat(cfg, data)?;
    let data = if cfg.model.depth_encoding == DepthEncoding::Hha && cfg.model.has_depth() {
        with_hha(data)?
    } else {
        data.clone()
    };
    let sel = cfg.view_selection(data.manifest.views)?;
    let weights = class_weights(&data);
    let train_sets = data.split_sets(Split::Train);
    let val_sets = data.split_sets(Split::Val);
    let test_sets = data.split_sets(Split::Test);
    if train_sets.is_empty() {
        return Err(Error::config("dataset has no training sets"));
    }

    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    if cfg.model.anchor == AnchorMode::PePnFrozen {
        pretrain_property_net(&mut model, cfg, &weights)?;
    }
    let frozen: BTreeSet<ParamId> = model.frozen_ids().into_iter().collect();

    let out_dir = (!cfg.output.dir.is_empty()).then(|| PathBuf::from(&cfg.output.dir));
    if let Some(d) = &out_dir {
        std::fs::create_dir_all(d)?;
        std::fs::write(d.join("config.txt"), cfg.to_text())?;
    }
    let mut log = Log {
        lines: Vec::new(),
        file: match &out_dir {
            Some(d) => Some(BufWriter::new(File::create(d.join("metrics.jsonl"))?)),
            None => None,
        },
    };
    log.push(json!({"event": "start", "seed": cfg.seed, "config_hash": cfg.hash(),
        "train_sets": train_sets.len(), "val_sets": val_sets.len(), "test_sets": test_sets.len(),
        "parameters": model.store.num_scalars(), "frozen": frozen.len()}))?;

    let epochs = cfg.train.epochs;
    let batch = cfg.train.batch;
    let steps_per_epoch = train_sets.len().div_ceil(batch);
    let sched = cfg.schedule.with_steps(steps_per_epoch * epochs);
    let mut adam = Adam::new(cfg.optim.adam());
    let n_classes = cfg.model.classes;
    let mut records = Vec::with_capacity(epochs);
    let mut best: Option<Checkpoint> = None;
    let mut step = 0usize;

    for epoch in 0..epochs {
        let mode = effective_mode(cfg.train.loss, epoch, epochs, true);
        let mut order: Vec<usize> = (0..train_sets.len()).collect();
        order.shuffle(&mut seed::rng(&[cfg.seed, epoch as u64, ORDER_STREAM]));
        let mut loss_sum = 0.0;
        let mut head_sum: Vec<f64> = Vec::new();
        let mut lr = 0.0;
        for (b, chunk) in order.chunks(batch).enumerate() {
            let mut brng = seed::rng(&[cfg.seed, epoch as u64, b as u64, BATCH_STREAM]);
            let res = resolve_resolution(&cfg.aug, cfg.train.resolution, &mut brng);
            let mut drawn = chunk
                .iter()
                .map(|&i| {
                    let set = &train_sets[i];
                    let mut rng = seed::rng(&[cfg.seed, epoch as u64, i as u64, VIEW_STREAM]);
                    let mut views = sample_views(set, &sel, true, &mut rng)?;
                    if !cfg.aug.random_view_order {
                        views.sort_by_key(|v| sel.train_pool.iter().position(|p| *p == v.view_id));
                    }
                    Ok(LabeledViews::new(views, set.meta.class_id))
                })
                .collect::<Result<Vec<_>>>()?;
            if mode == LossMode::BceStage1 {
                drawn = shuffle_sets(&drawn, cfg.aug.shuffle, &mut brng);
            }
            let results: Vec<Result<SampleGrad>> = chunk
                .par_iter()
                .zip(drawn.par_iter())
                .map(|(&i, lv)| {
                    let mut rng = seed::rng(&[cfg.seed, epoch as u64, i as u64, AUG_STREAM]);
                    sample_grad(&model, cfg, lv, &weights, mode, res, n_classes, &mut rng)
                })
                .collect();
            let mut grads = GradBuffer::new(&model.store);
            let mut batch_loss = 0.0;
            let mut batch_heads: Vec<f64> = Vec::new();
            for r in results {
                let s = match r {
                    Ok(s) => s,
                    Err(e) => {
                        let ids: Vec<&str> = chunk.iter().map(|&i| train_sets[i].set_id.as_str()).collect();
                        log.push(json!({"event": "abort", "epoch": epoch, "batch": b, "set_ids": ids,
                            "error": e.to_string()}))?;
                        if let Some(f) = &mut log.file {
                            f.flush()?;
                        }
                        return Err(match e {
                            Error::NonFinite { stage } => Error::NonFinite {
                                stage: format!("{stage} (epoch {epoch}, batch {b}, sets {})", ids.join(", ")),
                            },
                            other => other,
                        });
                    }
                };
                grads.merge(&s.grads);
                batch_loss += s.loss;
                if batch_heads.len() < s.heads.len() {
                    batch_heads.resize(s.heads.len(), 0.0);
                }
                for (a, h) in batch_heads.iter_mut().zip(&s.heads) {
                    *a += h;
                }
            }
            let n = chunk.len() as f64;
            grads.scale(1.0 / n);
            lr = lr_at(step, &sched);
            adam.step(&mut model.store, &grads, lr, &|id| frozen.contains(&id));
            loss_sum += batch_loss;
            if head_sum.len() < batch_heads.len() {
                head_sum.resize(batch_heads.len(), 0.0);
            }
            for (a, h) in head_sum.iter_mut().zip(&batch_heads) {
                *a += h;
            }
            if cfg.output.log_steps {
                let heads: Vec<f64> = batch_heads.iter().map(|h| h / n).collect();
                log.push(json!({"event": "step", "epoch": epoch, "step": step, "lr": lr,
                    "loss": batch_loss / n, "head_losses": heads}))?;
            }
            step += 1;
        }
        let n_train = train_sets.len() as f64;
        let val = if val_sets.is_empty() {
            topk(&[], &[])
        } else {
            evaluate_sets(&model, cfg, &sel, &weights, &val_sets)?
        };
        let rec = EpochRecord {
            epoch,
            loss_mode: mode,
            lr,
            train_loss: loss_sum / n_train,
            head_losses: head_sum.iter().map(|h| h / n_train).collect(),
            val_top1: val.top1,
            val_top3: val.top3,
            val_top5: val.top5,
        };
        log.push(json!({"event": "epoch", "record": rec}))?;
        if best.as_ref().map_or(true, |b| val.top1 > b.header.val_top1) {
            best = Some(Checkpoint::capture(&model, cfg, epoch, val.top1));
        }
        records.push(rec);
    }

    let final_train = if cfg.train.eval_train {
        Some(evaluate_sets(&model, cfg, &sel, &weights, &train_sets)?)
    } else {
        None
    };
    let best = best.expect("at least one epoch");
    best.apply(&mut model)?;
    let test = evaluate_sets(&model, cfg, &sel, &weights, &test_sets)?;
    let best_checkpoint = match &out_dir {
        Some(d) => {
            let p = d.join("best.ckpt");
            best.save(&p)?;
            Some(p)
        }
        None => None,
    };
    log.push(json!({"event": "end", "best_epoch": best.header.epoch, "best_val_top1": best.header.val_top1,
        "final_train": final_train, "test": test}))?;
    if let Some(f) = &mut log.file {
        f.flush()?;
    }
    Ok(RunReport {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        epochs: records,
        best_epoch: best.header.epoch,
        best_val_top1: best.header.val_top1,
        best_checkpoint,
        checkpoint_digest: best.digest()?,
        final_train,
        test,
        wall_clock_s: start.elapsed().as_secs_f64(),
        log: log.lines,
        best: Some(best),
    })
}

#[allow(clippy::too_many_arguments)]
fn sample_grad(
    model: &Model,
    cfg: &RunConfig,
    lv: &LabeledViews,
    weights: &[f64],
    mode: LossMode,
    res: usize,
    n_classes: usize,
    rng: &mut impl Rng,
) -> Result<SampleGrad> {
    let weight_kg = match cfg.model.anchor {
        AnchorMode::None => None,
        _ => Some(weight_noise(weights[lv.class], cfg.weight.noise, rng)),
    };
    let input = SampleInput {
        views: crop_views(&lv.views, res, cfg, true, rng)?,
        weight_kg,
    };
    let target = Target {
        class: lv.class,
        multi_hot: (mode == LossMode::BceStage1).then(|| lv.multi_hot(n_classes)),
        view_classes: Some(lv.view_classes.clone()),
    };
    let mut tape = Tape::new();
    let out = model.forward_on(&mut tape, &model.store, &input)?;
    let terms = mh_loss_on_tape(&mut tape, &out.heads, &target, mode)?;
    let loss = tape.value(terms.total).scalar_value();
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            stage: format!("{} loss", mode.as_str()),
        });
    }
    let mut grads = GradBuffer::new(&model.store);
    tape.backward(terms.total).accumulate_into(&mut grads);
    Ok(SampleGrad {
        grads,
        loss,
        heads: terms.heads,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRun {
    pub seed: u64,
    pub best_val_top1: Option<f64>,
    pub test_top1: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub n_runs: usize,
    pub runs: Vec<StabilityRun>,
    pub max: f64,
    pub mean: f64,
    /// Sample standard deviation over finished runs.
    pub std: f64,
    /// `false` when any run aborted; statistics cover the finished ones.
    pub complete: bool,
}

/// `(max, mean, sample std)`; std is 0 for fewer than two values.
pub fn summarize(values: &[f64]) -> (f64, f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (max, mean, std)
}

/// Runs with seeds `seed + 0 .. seed + n_runs - 1` (all `seed` when
/// `same_seed`) and summarizes the best validation top-1.
pub fn stability(cfg: &RunConfig, n_runs: usize, same_seed: bool) -> Result<StabilityReport> {
    if n_runs < 2 {
        return Err(Error::config("stability needs at least two runs"));
    }
    let data = prepare_dataset(cfg)?;
    let runs: Vec<StabilityRun> = (0..n_runs as u64)
        .map(|i| {
            let seed = if same_seed { cfg.seed } else { cfg.seed + i };
            let mut c = cfg.clone();
            c.seed = seed;
            if !c.output.dir.is_empty() {
                c.output.dir = format!("{}/run{i}", c.output.dir);
            }
            match train_on(&c, &data) {
                Ok(r) => StabilityRun {
                    seed,
                    best_val_top1: Some(r.best_val_top1),
                    test_top1: Some(r.test.top1),
                    error: None,
                },
                Err(e) => StabilityRun {
                    seed,
                    best_val_top1: None,
                    test_top1: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let values: Vec<f64> = runs.iter().filter_map(|r| r.best_val_top1).collect();
    let (max, mean, std) = summarize(&values);
    Ok(StabilityReport {
        n_runs,
        complete: values.len() == n_runs,
        runs,
        max,
        mean,
        std,
    })
}
