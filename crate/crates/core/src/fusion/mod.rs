//! View fusion: operators reducing the `V×J` view-token matrix χ to a
//! single `1×J` vector, plus the optional token self-attention τ.
//!
//! | kind        | trainable parameters                                  |
//! |-------------|-------------------------------------------------------|
//! | `max`       | 0                                                     |
//! | `mean`      | 0                                                     |
//! | `conv`      | `V·a + a + a·b + b + b + 1`, `a = ⌈V/2⌉`, `b = ⌈a/2⌉` |
//! | `se`        | `V · (2·J·h + h + J)`, `h = max(1, J/r)`              |
//! | `shared_se` | `2·J·h + h + J`                                       |
//! | `mlp`       | `V·J·m + m + m·m + m + m·J + J`, `m` hidden width     |
//! | `tr_en`     | `E + J`                                               |
//! | `tr_ende`   | `E + D + J`                                           |
//! | τ           | `E`                                                   |
//!
//! with `E = 4(J²+J) + 2·J·F + F + J + 4·J` for one encoder block of
//! feed-forward width `F`, and `D = 8(J²+J) + 2·J·F + F + J + 6·J` for the
//! decoder block.

mod attention;

use std::fmt;
use std::str::FromStr;

use mvip_autograd::nn::{self, Linear};
use mvip_autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attention::{DecoderBlock, EncoderBlock, FeedForward, MultiHeadAttention};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    #[serde(alias = "max_pool")]
    Max,
    Mean,
    Conv,
    Se,
    SharedSe,
    Mlp,
    TrEn,
    #[serde(alias = "tr_de")]
    TrEnde,
}

/// Which kinds of view interaction an operator can express.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Taxonomy {
    /// Views combine through one scalar weight per node (`⊙`).
    pub node_wise: bool,
    /// A view's weights depend on that view's whole token (`↔`).
    pub intra_view: bool,
    /// An output node can depend on every node of every view (`↕`).
    pub inter_view: bool,
}

impl FusionKind {
    pub const ALL: [FusionKind; 8] = [
        FusionKind::Max,
        FusionKind::Mean,
        FusionKind::Conv,
        FusionKind::Se,
        FusionKind::SharedSe,
        FusionKind::Mlp,
        FusionKind::TrEn,
        FusionKind::TrEnde,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Max => "max",
            FusionKind::Mean => "mean",
            FusionKind::Conv => "conv",
            FusionKind::Se => "se",
            FusionKind::SharedSe => "shared_se",
            FusionKind::Mlp => "mlp",
            FusionKind::TrEn => "tr_en",
            FusionKind::TrEnde => "tr_ende",
        }
    }

    pub fn taxonomy(self) -> Taxonomy {
        let t = |node_wise, intra_view, inter_view| Taxonomy {
            node_wise,
            intra_view,
            inter_view,
        };
        match self {
            FusionKind::Max | FusionKind::Mean => t(true, false, false),
            FusionKind::Conv => t(true, false, true),
            FusionKind::Se | FusionKind::SharedSe => t(true, true, false),
            FusionKind::Mlp | FusionKind::TrEn | FusionKind::TrEnde => t(false, true, true),
        }
    }

    pub fn is_trainable(self) -> bool {
        !matches!(self, FusionKind::Max | FusionKind::Mean)
    }

    /// Output unchanged by any reordering of the view rows.
    pub fn is_permutation_invariant(self) -> bool {
        !matches!(self, FusionKind::Conv | FusionKind::Se | FusionKind::Mlp)
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(self, hyper: &FusionHyper) -> usize {
        let (v, j) = (hyper.views, hyper.width);
        match self {
            FusionKind::Max | FusionKind::Mean => 0,
            FusionKind::Conv => {
                let (a, b) = conv_widths(v);
                v * a + a + a * b + b + b + 1
            }
            FusionKind::Se => v * se_module_count(j, hyper.se_hidden()),
            FusionKind::SharedSe => se_module_count(j, hyper.se_hidden()),
            FusionKind::Mlp => {
                let m = hyper.mlp_hidden;
                v * j * m + m + m * m + m + m * j + j
            }
            FusionKind::TrEn => EncoderBlock::param_count(j, hyper.ff_width) + j,
            FusionKind::TrEnde => {
                EncoderBlock::param_count(j, hyper.ff_width) + DecoderBlock::param_count(j, hyper.ff_width) + j
            }
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "max" | "max_pool" => FusionKind::Max,
            "mean" => FusionKind::Mean,
            "conv" => FusionKind::Conv,
            "se" => FusionKind::Se,
            "shared_se" | "sse" => FusionKind::SharedSe,
            "mlp" => FusionKind::Mlp,
            "tr_en" => FusionKind::TrEn,
            "tr_ende" | "tr_de" => FusionKind::TrEnde,
            other => return Err(Error::config(format!("unknown fusion kind '{other}'"))),
        })
    }
}

/// Taxonomy of the token self-attention block τ.
pub fn tau_taxonomy() -> Taxonomy {
    Taxonomy {
        node_wise: false,
        intra_view: true,
        inter_view: true,
    }
}

/// Widths of the second and third view-mixing layers of `conv`.
pub fn conv_widths(views: usize) -> (usize, usize) {
    let a = views.div_ceil(2).max(1);
    (a, a.div_ceil(2).max(1))
}

fn se_module_count(j: usize, h: usize) -> usize {
    Linear::param_count(j, h) + Linear::param_count(h, j)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvInit {
    /// Seeded uniform, like every other operator.
    #[default]
    Uniform,
    /// Every layer averages its inputs, so the operator starts as `mean`.
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorCombine {
    /// `Q = Q_emb + anchor`.
    #[default]
    Add,
    /// `Q = anchor`.
    Replace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionHyper {
    pub views: usize,
    /// Token width `J`.
    pub width: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub se_reduction: usize,
    pub mlp_hidden: usize,
    pub conv_init: ConvInit,
}

impl FusionHyper {
    /// Defaults: 8 heads, feed-forward and MLP hidden width `2J`, S&E
    /// reduction 16.
    pub fn new(views: usize, width: usize) -> Self {
        Self {
            views,
            width,
            heads: 8,
            ff_width: 2 * width,
            se_reduction: 16,
            mlp_hidden: 2 * width,
            conv_init: ConvInit::Uniform,
        }
    }

    pub fn se_hidden(&self) -> usize {
        (self.width / self.se_reduction.max(1)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.views == 0 || self.width == 0 {
            return Err(Error::config("fusion needs V ≥ 1 and J ≥ 1"));
        }
        if self.ff_width == 0 || self.mlp_hidden == 0 {
            return Err(Error::config("hidden widths must be positive"));
        }
        Ok(())
    }
}

/// Squeeze-and-excitation gate `σ(W₂ relu(W₁ x + b₁) + b₂)` on tokens.
#[derive(Clone, Debug)]
pub struct SeModule {
    pub squeeze: Linear,
    pub excite: Linear,
}

impl SeModule {
    fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            squeeze: Linear::with_bound(store, &format!("{name}.fc1"), width, hidden, nn::relu_bound(width), rng),
            excite: Linear::new(store, &format!("{name}.fc2"), hidden, width, rng),
        }
    }

    /// Gates for every row of `tokens` (`[m×J] → [m×J]`).
    pub fn gates(&self, tape: &mut Tape, store: &ParamStore, tokens: Var) -> Var {
        let h = self.squeeze.forward(tape, store, tokens);
        let h = tape.relu(h);
        let z = self.excite.forward(tape, store, h);
        tape.sigmoid(z)
    }

    /// Saturates the gates at `σ(bias)` regardless of input.
    pub fn force_gates(&self, store: &mut ParamStore, bias: f64) {
        store.get_mut(self.excite.weight).data_mut().fill(0.0);
        store.get_mut(self.excite.bias).data_mut().fill(bias);
    }
}

/// Parameter layout of one fusion operator inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub enum FusionNet {
    Max,
    Mean,
    Conv([Linear; 3]),
    Se(Vec<SeModule>),
    SharedSe(SeModule),
    Mlp([Linear; 3]),
    TrEn { block: EncoderBlock, query: ParamId },
    TrEnde { encoder: EncoderBlock, decoder: DecoderBlock, query: ParamId },
}

impl FusionNet {
    /// Registers the operator's parameters under `prefix`.
    pub fn build(kind: FusionKind, hyper: &FusionHyper, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        hyper.validate()?;
        let (v, j) = (hyper.views, hyper.width);
        let name = |s: &str| format!("{prefix}.{s}");
        Ok(match kind {
            FusionKind::Max => FusionNet::Max,
            FusionKind::Mean => FusionNet::Mean,
            FusionKind::Conv => {
                let (a, b) = conv_widths(v);
                let layers = [
                    Linear::new(store, &name("l1"), v, a, rng),
                    Linear::new(store, &name("l2"), a, b, rng),
                    Linear::new(store, &name("l3"), b, 1, rng),
                ];
                if hyper.conv_init == ConvInit::Mean {
                    for l in &layers {
                        let fan_in = l.fan_in as f64;
                        store.get_mut(l.weight).data_mut().fill(1.0 / fan_in);
                        store.get_mut(l.bias).data_mut().fill(0.0);
                    }
                }
                FusionNet::Conv(layers)
            }
            FusionKind::Se => FusionNet::Se(
                (0..v)
                    .map(|i| SeModule::new(store, &name(&format!("se{i}")), j, hyper.se_hidden(), rng))
                    .collect(),
            ),
            FusionKind::SharedSe => FusionNet::SharedSe(SeModule::new(store, &name("se"), j, hyper.se_hidden(), rng)),
            FusionKind::Mlp => {
                let m = hyper.mlp_hidden;
                FusionNet::Mlp([
                    Linear::with_bound(store, &name("fc1"), v * j, m, nn::relu_bound(v * j), rng),
                    Linear::with_bound(store, &name("fc2"), m, m, nn::relu_bound(m), rng),
                    Linear::new(store, &name("fc3"), m, j, rng),
                ])
            }
            FusionKind::TrEn => {
                let block = EncoderBlock::new(store, &name("enc"), j, hyper.heads, hyper.ff_width, rng)?;
                let query = store.add(name("query"), nn::uniform(rng, &[1, j], nn::default_bound(j)));
                FusionNet::TrEn { block, query }
            }
            FusionKind::TrEnde => {
                let encoder = EncoderBlock::new(store, &name("enc"), j, hyper.heads, hyper.ff_width, rng)?;
                let decoder = DecoderBlock::new(store, &name("dec"), j, hyper.heads, hyper.ff_width, rng)?;
                let query = store.add(name("query"), nn::uniform(rng, &[1, j], nn::default_bound(j)));
                FusionNet::TrEnde { encoder, decoder, query }
            }
        })
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            FusionNet::Max => FusionKind::Max,
            FusionNet::Mean => FusionKind::Mean,
            FusionNet::Conv(_) => FusionKind::Conv,
            FusionNet::Se(_) => FusionKind::Se,
            FusionNet::SharedSe(_) => FusionKind::SharedSe,
            FusionNet::Mlp(_) => FusionKind::Mlp,
            FusionNet::TrEn { .. } => FusionKind::TrEn,
            FusionNet::TrEnde { .. } => FusionKind::TrEnde,
        }
    }

    /// Reduces `chi` (`[V×J]`) to `[1×J]`. `anchor` (`[1×J]`) conditions
    /// the decoder query and is only accepted by `tr_ende`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        hyper: &FusionHyper,
        chi: Var,
        anchor: Option<(Var, AnchorCombine)>,
    ) -> Result<Var> {
        let (v, j) = tape.value(chi).dims2();
        if j != hyper.width {
            return Err(Error::shape(format!("token width {j}, fusion built for {}", hyper.width)));
        }
        let fixed_views = matches!(self, FusionNet::Conv(_) | FusionNet::Se(_) | FusionNet::Mlp(_));
        if fixed_views && v != hyper.views {
            return Err(Error::shape(format!(
                "{} fusion built for {} views, got {v}",
                self.kind(),
                hyper.views
            )));
        }
        if anchor.is_some() && !matches!(self, FusionNet::TrEnde { .. }) {
            return Err(Error::config(format!("{} fusion takes no anchor", self.kind())));
        }
        Ok(match self {
            FusionNet::Max => tape.col_max(chi),
            FusionNet::Mean => tape.col_mean(chi),
            FusionNet::Conv(layers) => {
                // view-axis mixing shared across the J nodes: work on χᵀ
                let mut h = tape.transpose(chi);
                for l in layers {
                    h = l.forward(tape, store, h);
                }
                tape.transpose(h)
            }
            FusionNet::Se(modules) => {
                let mut acc: Option<Var> = None;
                for (i, m) in modules.iter().enumerate() {
                    let row = tape.slice_rows(chi, i, 1);
                    let g = m.gates(tape, store, row);
                    let term = tape.mul(g, row);
                    acc = Some(match acc {
                        Some(a) => tape.add(a, term),
                        None => term,
                    });
                }
                acc.expect("at least one view")
            }
            FusionNet::SharedSe(m) => {
                let g = m.gates(tape, store, chi);
                let weighted = tape.mul(g, chi);
                tape.col_sum(weighted)
            }
            FusionNet::Mlp(layers) => {
                let flat = tape.reshape(chi, [1, v * j]);
                let h = layers[0].forward(tape, store, flat);
                let h = tape.relu(h);
                let h = layers[1].forward(tape, store, h);
                let h = tape.relu(h);
                layers[2].forward(tape, store, h)
            }
            FusionNet::TrEn { block, query } => {
                let q = tape.param(store, *query);
                let tokens = tape.concat_rows(&[q, chi]);
                let out = block.forward(tape, store, tokens);
                tape.slice_rows(out, 0, 1)
            }
            FusionNet::TrEnde { encoder, decoder, query } => {
                let memory = encoder.forward(tape, store, chi);
                let q_emb = tape.param(store, *query);
                let q = match anchor {
                    None => q_emb,
                    Some((a, combine)) => {
                        let (ar, ac) = tape.value(a).dims2();
                        if ar != 1 || ac != j {
                            return Err(Error::shape(format!("anchor is {ar}×{ac}, query is 1×{j}")));
                        }
                        match combine {
                            AnchorCombine::Add => tape.add(q_emb, a),
                            AnchorCombine::Replace => a,
                        }
                    }
                };
                decoder.forward(tape, store, q, memory)
            }
        })
    }
}

/// The optional self-attention block τ over the view tokens.
#[derive(Clone, Debug)]
pub struct Tau {
    pub block: EncoderBlock,
}

impl Tau {
    pub fn build(hyper: &FusionHyper, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<Self> {
        hyper.validate()?;
        Ok(Self {
            block: EncoderBlock::new(store, prefix, hyper.width, hyper.heads, hyper.ff_width, rng)?,
        })
    }

    pub fn param_count(hyper: &FusionHyper) -> usize {
        EncoderBlock::param_count(hyper.width, hyper.ff_width)
    }

    /// `[V×J] → [V×J]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, chi: Var) -> Result<Var> {
        let j = tape.value(chi).dims2().1;
        if j != self.block.attn.width {
            return Err(Error::shape(format!("token width {j}, tau built for {}", self.block.attn.width)));
        }
        Ok(self.block.forward(tape, store, chi))
    }
}

/// Named parameter segment of a flat vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

/// Layout of every parameter in `store` within [`ParamStore::flatten`].
pub fn segments(store: &ParamStore) -> Vec<Segment> {
    let mut offset = 0;
    store
        .iter()
        .map(|(_, name, t)| {
            let s = Segment {
                name: name.to_string(),
                offset,
                shape: t.shape().to_vec(),
            };
            offset += t.len();
            s
        })
        .collect()
}

/// A standalone fusion operator with its own parameters.
#[derive(Clone, Debug)]
pub struct FusionState {
    pub kind: FusionKind,
    pub hyper: FusionHyper,
    pub net: FusionNet,
    pub store: ParamStore,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FusionHeader {
    pub kind: FusionKind,
    pub hyper: FusionHyper,
    pub segments: Vec<Segment>,
}

impl FusionState {
    pub fn new(kind: FusionKind, hyper: FusionHyper, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = seed::rng_named(seed, kind.as_str());
        let net = FusionNet::build(kind, &hyper, &mut store, "fusion", &mut rng)?;
        Ok(Self { kind, hyper, net, store })
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn header(&self) -> FusionHeader {
        FusionHeader {
            kind: self.kind,
            hyper: self.hyper.clone(),
            segments: segments(&self.store),
        }
    }

    pub fn forward_on(&self, tape: &mut Tape, store: &ParamStore, chi: Var, anchor: Option<(Var, AnchorCombine)>) -> Result<Var> {
        self.net.forward(tape, store, &self.hyper, chi, anchor)
    }

    /// Evaluates on a plain `[V×J]` matrix.
    pub fn forward(&self, chi: &Tensor, anchor: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(chi.clone());
        let a = anchor.map(|a| (tape.constant(a.clone()), AnchorCombine::Add));
        let y = self.forward_on(&mut tape, &self.store, x, a)?;
        Ok(tape.value(y).clone())
    }
}

/// Evaluates τ on a plain matrix with its own parameters.
#[derive(Clone, Debug)]
pub struct TauState {
    pub hyper: FusionHyper,
    pub tau: Tau,
    pub store: ParamStore,
}

impl TauState {
    pub fn new(hyper: FusionHyper, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = seed::rng_named(seed, "tau");
        let tau = Tau::build(&hyper, &mut store, "tau", &mut rng)?;
        Ok(Self { hyper, tau, store })
    }

    pub fn forward(&self, chi: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(chi.clone());
        let y = self.tau.forward(&mut tape, &self.store, x)?;
        Ok(tape.value(y).clone())
    }
}
