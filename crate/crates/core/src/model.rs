//! The full multi-view classifier.
//!
//! Every view passes through the same color encoder (and, with depth, the
//! same depth encoder). Intermediate stages exchange information through
//! the RGBD stage blocks, the last stage is merged by `F_I`, pooled and
//! projected by `λ_p` to a view token. Tokens are stacked to `χ`, optionally
//! passed through `τ`, reduced by the view-fusion operator and classified
//! by `λ`. Auxiliary heads classify each view token (`λ_v`) and the
//! unfused last-stage color and depth maps (`λ_c`, `λ_d`).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use mvip_autograd::nn::{Conv2d, Linear};
use mvip_autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{depth_normalize, ViewRecord};
use crate::error::{Error, Result};
use crate::fusion::{AnchorCombine, ConvInit, FusionHyper, FusionKind, FusionNet, Tau};
use crate::losses::Heads;
use crate::rgbd::{FinalFusion, FusionDirection, StageFusion};
use crate::seed;
use crate::weight::{make_anchor, AnchorMode, PropertyNet, PropertyNetState};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    /// Stride-2 3×3 convolution + ReLU per stage.
    #[default]
    ToyCnn,
    /// Inputs already are last-stage feature maps from an outside encoder.
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub variant: BackboneVariant,
    /// Output channels of stages `1..=I`.
    pub channels: Vec<usize>,
}

impl BackboneSpec {
    pub fn toy() -> Self {
        Self {
            variant: BackboneVariant::ToyCnn,
            channels: vec![8, 16, 32, 64, 64],
        }
    }

    /// Last-stage features of `channels` width supplied by the caller.
    pub fn external(channels: usize) -> Self {
        Self {
            variant: BackboneVariant::External,
            channels: vec![channels],
        }
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("backbone has stages")
    }

    /// Side length after stage `i` (1-based) for input side `side`.
    pub fn stage_side(&self, side: usize, i: usize) -> usize {
        (0..i).fold(side, |s, _| s.div_ceil(2))
    }
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self::toy()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[default]
    Rgb,
    Rgbd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthEncoding {
    /// One channel, standardized inside the object mask.
    #[default]
    Raw,
    Hha,
}

impl DepthEncoding {
    pub fn channels(self) -> usize {
        match self {
            DepthEncoding::Raw => 1,
            DepthEncoding::Hha => 3,
        }
    }
}

/// Last-stage merge of the two streams.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalMode {
    #[default]
    Gate,
    /// Keep the color map, as in the RGB-only network.
    Identity,
}

macro_rules! str_enum {
    ($t:ty { $($v:ident => $s:literal),+ $(,)? }) => {
        impl $t {
            pub fn as_str(self) -> &'static str {
                match self { $(<$t>::$v => $s),+ }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($s => Ok(<$t>::$v),)+
                    other => Err(Error::config(format!(concat!("unknown ", stringify!($t), " '{}'"), other))),
                }
            }
        }
    };
}

str_enum!(BackboneVariant { ToyCnn => "toy_cnn", External => "external" });
str_enum!(Modality { Rgb => "rgb", Rgbd => "rgbd" });
str_enum!(DepthEncoding { Raw => "raw", Hha => "hha" });
str_enum!(FinalMode { Gate => "gate", Identity => "identity" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub views: usize,
    pub classes: usize,
    /// Token width `Ch_V`.
    pub width: usize,
    pub fusion: FusionKind,
    pub attn_heads: usize,
    /// Transformer feed-forward width as a multiple of `Ch_V`.
    pub ff_mult: usize,
    /// MLP-fusion hidden width as a multiple of `Ch_V`.
    pub mlp_mult: usize,
    pub se_reduction: usize,
    pub conv_init: ConvInit,
    pub use_tau: bool,
    pub modality: Modality,
    pub depth_encoding: DepthEncoding,
    pub rgbd_direction: FusionDirection,
    /// Per intermediate stage enable flags; empty enables all.
    pub rgbd_stages: Vec<bool>,
    pub rgbd_final: FinalMode,
    pub rgbd_reduction: usize,
    pub anchor: AnchorMode,
    pub anchor_combine: AnchorCombine,
    /// Frequency count `d` of the weight encoding.
    pub weight_d: usize,
    /// Color and depth auxiliary heads.
    pub aux_heads: bool,
    /// One `λ_v` per view slot instead of a shared one.
    pub per_view_heads: bool,
    pub backbone: BackboneSpec,
}

impl ModelConfig {
    pub fn new(views: usize, classes: usize) -> Self {
        Self {
            views,
            classes,
            width: 256,
            fusion: FusionKind::Mean,
            attn_heads: 8,
            ff_mult: 2,
            mlp_mult: 2,
            se_reduction: 16,
            conv_init: ConvInit::Uniform,
            use_tau: false,
            modality: Modality::Rgb,
            depth_encoding: DepthEncoding::Raw,
            rgbd_direction: FusionDirection::None,
            rgbd_stages: Vec::new(),
            rgbd_final: FinalMode::Gate,
            rgbd_reduction: 4,
            anchor: AnchorMode::None,
            anchor_combine: AnchorCombine::Add,
            weight_d: 8,
            aux_heads: true,
            per_view_heads: false,
            backbone: BackboneSpec::toy(),
        }
    }

    pub fn fusion_hyper(&self) -> FusionHyper {
        FusionHyper {
            views: self.views,
            width: self.width,
            heads: self.attn_heads,
            ff_width: self.ff_mult * self.width,
            se_reduction: self.se_reduction,
            mlp_hidden: self.mlp_mult * self.width,
            conv_init: self.conv_init,
        }
    }

    pub fn has_depth(&self) -> bool {
        self.modality == Modality::Rgbd
    }

    pub fn has_modality_heads(&self) -> bool {
        self.has_depth() && self.aux_heads
    }

    /// Direction of intermediate stage `i` (0-based).
    pub fn stage_direction(&self, i: usize) -> FusionDirection {
        if !self.has_depth() || !self.rgbd_stages.get(i).copied().unwrap_or(true) {
            FusionDirection::None
        } else {
            self.rgbd_direction
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.views == 0 || self.classes < 2 || self.width == 0 {
            return Err(Error::config("model needs V ≥ 1, N ≥ 2 and Ch_V ≥ 1"));
        }
        if self.backbone.channels.is_empty() || self.backbone.channels.contains(&0) {
            return Err(Error::config("backbone needs at least one stage of positive width"));
        }
        let inner = self.backbone.stages() - 1;
        if !self.rgbd_stages.is_empty() && self.rgbd_stages.len() != inner {
            return Err(Error::config(format!(
                "{} rgbd stage flags for {inner} intermediate stages",
                self.rgbd_stages.len()
            )));
        }
        if self.anchor != AnchorMode::None && self.fusion != FusionKind::TrEnde {
            return Err(Error::config(format!("anchor {} requires tr_ende fusion", self.anchor)));
        }
        if self.anchor != AnchorMode::None && self.weight_d == 0 {
            return Err(Error::config("weight encoding needs d ≥ 1"));
        }
        if self.backbone.variant == BackboneVariant::External
            && (0..inner).any(|i| self.stage_direction(i) != FusionDirection::None)
        {
            return Err(Error::config("external features allow last-stage fusion only"));
        }
        self.fusion_hyper().validate()?;
        let needs_heads = self.use_tau || matches!(self.fusion, FusionKind::TrEn | FusionKind::TrEnde);
        if needs_heads && (self.attn_heads == 0 || self.width % self.attn_heads != 0) {
            return Err(Error::config(format!(
                "{} attention heads do not divide Ch_V = {}",
                self.attn_heads, self.width
            )));
        }
        Ok(())
    }
}

/// Network inputs for one view, channel-first.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewTensors {
    /// `3×H×W`, or last-stage features for an external backbone.
    pub color: Tensor,
    pub depth: Option<Tensor>,
}

impl ViewTensors {
    /// Color scaled to `[−1, 1]`; depth standardized inside the mask or
    /// HHA scaled to `[−1, 1]`.
    pub fn from_record(rec: &ViewRecord, cfg: &ModelConfig) -> Result<Self> {
        let color = rec.color.to_chw_tensor(0.5, 2.0);
        let depth = match (cfg.has_depth(), cfg.depth_encoding) {
            (false, _) => None,
            (true, DepthEncoding::Raw) => Some(depth_normalize(&rec.depth, Some(&rec.mask)).to_chw_tensor(0.0, 1.0)),
            (true, DepthEncoding::Hha) => {
                let hha = rec
                    .hha
                    .as_ref()
                    .ok_or_else(|| Error::config(format!("view {} has no HHA image", rec.view_id)))?;
                Some(hha.to_chw_tensor(0.5, 2.0))
            }
        };
        Ok(Self { color, depth })
    }
}

/// One multi-view sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleInput {
    pub views: Vec<ViewTensors>,
    /// Object weight in kg, read by weight anchors.
    pub weight_kg: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadOutputs {
    pub o: Tensor,
    pub per_view: Vec<Tensor>,
    pub per_view_color: Option<Vec<Tensor>>,
    pub per_view_depth: Option<Vec<Tensor>>,
    /// `χ` after `τ`, `V×Ch_V`.
    pub view_tokens: Tensor,
}

impl MultiHeadOutputs {
    pub fn heads(&self) -> Heads<Tensor> {
        Heads {
            o: self.o.clone(),
            per_view: self.per_view.clone(),
            per_view_color: self.per_view_color.clone(),
            per_view_depth: self.per_view_depth.clone(),
        }
    }
}

/// Tape nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub heads: Heads<Var>,
    pub view_tokens: Var,
}

/// Component names, in forward order.
pub const COMPONENTS: [&str; 11] = [
    "encoder.color",
    "encoder.depth",
    "rgbd",
    "projection",
    "head.view",
    "head.color",
    "head.depth",
    "tau",
    "fusion",
    "head.out",
    "property_net",
];

fn component_prefix(name: &str) -> &'static str {
    match name {
        "encoder.color" => "enc_c.",
        "encoder.depth" => "enc_d.",
        "rgbd" => "rgbd.",
        "projection" => "proj.",
        "head.view" => "head_v.",
        "head.color" => "head_c.",
        "head.depth" => "head_d.",
        "tau" => "tau.",
        "fusion" => "fusion.",
        "head.out" => "head_o.",
        "property_net" => "pn.",
        _ => unreachable!("unknown component {name}"),
    }
}

/// Exact trainable-scalar count per component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub components: BTreeMap<String, usize>,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.components.values().sum()
    }

    pub fn get(&self, name: &str) -> usize {
        self.components.get(name).copied().unwrap_or(0)
    }
}

const KERNEL: usize = 3;

fn encoder_count(in_ch: usize, channels: &[usize]) -> usize {
    let mut c_in = in_ch;
    channels
        .iter()
        .map(|c| {
            let n = Conv2d::param_count(c_in, *c, KERNEL);
            c_in = *c;
            n
        })
        .sum()
}

/// Closed-form per-component counts for `cfg`.
pub fn count_parameters(cfg: &ModelConfig) -> Result<ParamBreakdown> {
    cfg.validate()?;
    let hyper = cfg.fusion_hyper();
    let ch = &cfg.backbone.channels;
    let c_last = cfg.backbone.out_channels();
    let toy = cfg.backbone.variant == BackboneVariant::ToyCnn;
    let mut m = BTreeMap::new();
    m.insert("encoder.color", if toy { encoder_count(3, ch) } else { 0 });
    m.insert(
        "encoder.depth",
        if toy && cfg.has_depth() { encoder_count(cfg.depth_encoding.channels(), ch) } else { 0 },
    );
    let mut rgbd: usize = (0..ch.len() - 1)
        .map(|i| StageFusion::param_count(ch[i], cfg.stage_direction(i), cfg.rgbd_reduction))
        .sum();
    if cfg.has_depth() && cfg.rgbd_final == FinalMode::Gate {
        rgbd += FinalFusion::param_count(c_last, cfg.rgbd_reduction);
    }
    m.insert("rgbd", rgbd);
    m.insert("projection", Linear::param_count(c_last, cfg.width));
    let view_heads = if cfg.per_view_heads { cfg.views } else { 1 };
    m.insert("head.view", view_heads * Linear::param_count(cfg.width, cfg.classes));
    let modality_head = if cfg.has_modality_heads() { Linear::param_count(c_last, cfg.classes) } else { 0 };
    m.insert("head.color", modality_head);
    m.insert("head.depth", modality_head);
    m.insert("tau", if cfg.use_tau { Tau::param_count(&hyper) } else { 0 });
    m.insert("fusion", cfg.fusion.param_count(&hyper));
    m.insert("head.out", Linear::param_count(cfg.width, cfg.classes));
    m.insert(
        "property_net",
        if cfg.anchor.uses_property_net() { PropertyNet::upscaler_param_count(cfg.weight_d, cfg.width) } else { 0 },
    );
    Ok(ParamBreakdown {
        components: m.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    })
}

#[derive(Clone, Debug)]
struct Encoder {
    convs: Vec<Conv2d>,
}

impl Encoder {
    fn build(store: &mut ParamStore, prefix: &str, in_ch: usize, channels: &[usize], seed: u64) -> Self {
        let mut rng = seed::rng_named(seed, prefix);
        let mut c_in = in_ch;
        let convs = channels
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let conv = Conv2d::new(store, &format!("{prefix}.s{}", i + 1), c_in, *c, KERNEL, 2, 1, &mut rng);
                c_in = *c;
                conv
            })
            .collect();
        Self { convs }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    color_encoder: Option<Encoder>,
    depth_encoder: Option<Encoder>,
    stages: Vec<StageFusion>,
    final_fusion: Option<FinalFusion>,
    projection: Linear,
    view_heads: Vec<Linear>,
    color_head: Option<Linear>,
    depth_head: Option<Linear>,
    tau: Option<Tau>,
    fusion: FusionNet,
    out_head: Linear,
    property_net: Option<PropertyNet>,
    frozen: BTreeSet<ParamId>,
}

fn check_finite(tape: &Tape, v: Var, stage: impl FnOnce() -> String) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { stage: stage() })
    }
}

impl Model {
    /// Each component draws from its own seeded stream, so components
    /// shared by two configurations start from identical values.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let ch = config.backbone.channels.clone();
        let c_last = config.backbone.out_channels();
        let toy = config.backbone.variant == BackboneVariant::ToyCnn;
        let color_encoder = toy.then(|| Encoder::build(&mut store, "enc_c", 3, &ch, seed));
        let depth_encoder = (toy && config.has_depth())
            .then(|| Encoder::build(&mut store, "enc_d", config.depth_encoding.channels(), &ch, seed));

        let mut rng = seed::rng_named(seed, "rgbd");
        let stages = (0..ch.len() - 1)
            .map(|i| {
                StageFusion::build(
                    &mut store,
                    &format!("rgbd.s{}", i + 1),
                    ch[i],
                    config.stage_direction(i),
                    config.rgbd_reduction,
                    &mut rng,
                )
            })
            .collect();
        let final_fusion = (config.has_depth() && config.rgbd_final == FinalMode::Gate)
            .then(|| FinalFusion::build(&mut store, "rgbd.final", c_last, config.rgbd_reduction, &mut rng));

        let projection = Linear::new(&mut store, "proj", c_last, config.width, &mut seed::rng_named(seed, "proj"));
        let mut rng = seed::rng_named(seed, "head_v");
        let n_view_heads = if config.per_view_heads { config.views } else { 1 };
        let view_heads = (0..n_view_heads)
            .map(|i| Linear::new(&mut store, &format!("head_v.{i}"), config.width, config.classes, &mut rng))
            .collect();
        let (color_head, depth_head) = if config.has_modality_heads() {
            (
                Some(Linear::new(&mut store, "head_c", c_last, config.classes, &mut seed::rng_named(seed, "head_c"))),
                Some(Linear::new(&mut store, "head_d", c_last, config.classes, &mut seed::rng_named(seed, "head_d"))),
            )
        } else {
            (None, None)
        };
        let hyper = config.fusion_hyper();
        let tau = if config.use_tau {
            Some(Tau::build(&hyper, &mut store, "tau", &mut seed::rng_named(seed, "tau"))?)
        } else {
            None
        };
        let fusion = FusionNet::build(config.fusion, &hyper, &mut store, "fusion", &mut seed::rng_named(seed, "fusion"))?;
        let out_head = Linear::new(&mut store, "head_o", config.width, config.classes, &mut seed::rng_named(seed, "head_o"));
        let property_net = if config.anchor.uses_property_net() {
            Some(PropertyNet::upscaler(
                &mut store,
                "pn",
                config.weight_d,
                config.width,
                &mut seed::rng_named(seed, "pn"),
            )?)
        } else {
            None
        };
        let frozen = match (&property_net, config.anchor) {
            (Some(pn), AnchorMode::PePnFrozen) => pn.upscaler_ids().into_iter().collect(),
            _ => BTreeSet::new(),
        };
        Ok(Self {
            config,
            store,
            color_encoder,
            depth_encoder,
            stages,
            final_fusion,
            projection,
            view_heads,
            color_head,
            depth_head,
            tau,
            fusion,
            out_head,
            property_net,
            frozen,
        })
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen.contains(&id)
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.frozen.iter().copied().collect()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.store.ids().filter(|id| !self.is_frozen(*id)).collect()
    }

    /// Counts read off the parameter store.
    pub fn parameter_breakdown(&self) -> ParamBreakdown {
        ParamBreakdown {
            components: COMPONENTS
                .iter()
                .map(|c| (c.to_string(), self.store.count_with_prefix(component_prefix(c))))
                .collect(),
        }
    }

    /// Copies a trained weight classifier's upscaling layers into the
    /// anchor PropertyNet.
    pub fn load_property_net(&mut self, trained: &PropertyNetState) -> Result<()> {
        let pn = self
            .property_net
            .as_ref()
            .ok_or_else(|| Error::config("model has no PropertyNet"))?;
        if trained.net.d != pn.d || trained.net.d_h != pn.d_h {
            return Err(Error::config(format!(
                "PropertyNet {}→{} does not fit anchor {}→{}",
                trained.net.d, trained.net.d_h, pn.d, pn.d_h
            )));
        }
        for (dst, src) in pn.upscaler_ids().into_iter().zip(trained.net.upscaler_ids()) {
            *self.store.get_mut(dst) = trained.store.get(src).clone();
        }
        Ok(())
    }

    fn check_input(&self, input: &SampleInput) -> Result<()> {
        let cfg = &self.config;
        if input.views.len() != cfg.views {
            return Err(Error::shape(format!("model takes {} views, got {}", cfg.views, input.views.len())));
        }
        let first = input.views[0].color.shape().to_vec();
        let (in_c, min_side) = match cfg.backbone.variant {
            BackboneVariant::ToyCnn => (3, 1usize << (cfg.backbone.stages() - 1)),
            BackboneVariant::External => (cfg.backbone.out_channels(), 1),
        };
        if first.len() != 3 || first[0] != in_c {
            return Err(Error::shape(format!("view 0 color is {first:?}, expected {in_c}×H×W")));
        }
        if first[1] < min_side || first[2] < min_side {
            return Err(Error::shape(format!(
                "resolution {}×{} too small for {} stages",
                first[1],
                first[2],
                cfg.backbone.stages()
            )));
        }
        let depth_c = match cfg.backbone.variant {
            BackboneVariant::ToyCnn => cfg.depth_encoding.channels(),
            BackboneVariant::External => in_c,
        };
        for (i, v) in input.views.iter().enumerate() {
            if v.color.shape() != first.as_slice() {
                return Err(Error::shape(format!(
                    "resolution mismatch: view {i} is {:?}, view 0 is {first:?}",
                    v.color.shape()
                )));
            }
            match (&v.depth, cfg.has_depth()) {
                (None, true) => return Err(Error::shape(format!("view {i} lacks depth"))),
                (Some(d), true) if d.shape() != [depth_c, first[1], first[2]] => {
                    return Err(Error::shape(format!("view {i} depth is {:?}", d.shape())))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Records the forward pass of one sample on `tape`, reading parameters
    /// from `store`.
    pub fn forward_on(&self, tape: &mut Tape, store: &ParamStore, input: &SampleInput) -> Result<ForwardVars> {
        self.check_input(input)?;
        let cfg = &self.config;
        let n_stages = cfg.backbone.stages();
        let mut tokens = Vec::with_capacity(cfg.views);
        let mut per_view = Vec::with_capacity(cfg.views);
        let mut per_color = Vec::new();
        let mut per_depth = Vec::new();
        for (vi, view) in input.views.iter().enumerate() {
            let mut c = tape.constant(view.color.clone());
            let mut d = if cfg.has_depth() { view.depth.clone().map(|t| tape.constant(t)) } else { None };
            if let Some(enc) = &self.color_encoder {
                for i in 0..n_stages {
                    let x = enc.convs[i].forward(tape, store, c);
                    c = tape.relu(x);
                    check_finite(tape, x, || format!("view {vi} color encoder stage {}", i + 1))?;
                    if let (Some(denc), Some(dv)) = (&self.depth_encoder, d) {
                        let x = denc.convs[i].forward(tape, store, dv);
                        let y = tape.relu(x);
                        check_finite(tape, x, || format!("view {vi} depth encoder stage {}", i + 1))?;
                        d = Some(y);
                    }
                    if i + 1 < n_stages {
                        if let Some(dv) = d {
                            let (c2, d2) = self.stages[i].forward(tape, store, c, dv)?;
                            check_finite(tape, c2, || format!("view {vi} rgbd stage {}", i + 1))?;
                            check_finite(tape, d2, || format!("view {vi} rgbd stage {}", i + 1))?;
                            c = c2;
                            d = Some(d2);
                        }
                    }
                }
            }
            let fused = match (&self.final_fusion, d) {
                (Some(f), Some(dv)) => {
                    let y = f.forward(tape, store, c, dv)?;
                    check_finite(tape, y, || format!("view {vi} final rgbd fusion"))?;
                    y
                }
                _ => c,
            };
            let pooled = tape.global_avg_pool(fused);
            let token = self.projection.forward(tape, store, pooled);
            check_finite(tape, token, || format!("view {vi} projection"))?;
            let head = &self.view_heads[if cfg.per_view_heads { vi } else { 0 }];
            per_view.push(head.forward(tape, store, token));
            if let (Some(hc), Some(hd), Some(dv)) = (&self.color_head, &self.depth_head, d) {
                let pc = tape.global_avg_pool(c);
                per_color.push(hc.forward(tape, store, pc));
                let pd = tape.global_avg_pool(dv);
                per_depth.push(hd.forward(tape, store, pd));
            }
            tokens.push(token);
        }
        let mut chi = if tokens.len() == 1 { tokens[0] } else { tape.concat_rows(&tokens) };
        if let Some(tau) = &self.tau {
            chi = tau.forward(tape, store, chi)?;
            check_finite(tape, chi, || "tau".to_string())?;
        }
        let anchor = match cfg.anchor {
            AnchorMode::None => None,
            mode => {
                let w = input
                    .weight_kg
                    .ok_or_else(|| Error::config(format!("anchor mode {mode} needs the object weight")))?;
                make_anchor(tape, store, w, mode, self.property_net.as_ref(), cfg.weight_d, cfg.width)?
                    .map(|a| (a, cfg.anchor_combine))
            }
        };
        let fused = self.fusion.forward(tape, store, &cfg.fusion_hyper(), chi, anchor)?;
        check_finite(tape, fused, || format!("{} view fusion", cfg.fusion))?;
        let o = self.out_head.forward(tape, store, fused);
        check_finite(tape, o, || "output head".to_string())?;
        let modality = self.color_head.is_some();
        Ok(ForwardVars {
            heads: Heads {
                o,
                per_view,
                per_view_color: modality.then_some(per_color),
                per_view_depth: modality.then_some(per_depth),
            },
            view_tokens: chi,
        })
    }

    pub fn forward(&self, input: &SampleInput) -> Result<MultiHeadOutputs> {
        let mut tape = Tape::new();
        let out = self.forward_on(&mut tape, &self.store, input)?;
        let get = |v: &Var| tape.value(*v).clone();
        Ok(MultiHeadOutputs {
            o: get(&out.heads.o),
            per_view: out.heads.per_view.iter().map(get).collect(),
            per_view_color: out.heads.per_view_color.as_ref().map(|v| v.iter().map(get).collect()),
            per_view_depth: out.heads.per_view_depth.as_ref().map(|v| v.iter().map(get).collect()),
            view_tokens: get(&out.view_tokens),
        })
    }
}
