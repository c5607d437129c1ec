//! Multi-head attention and the single transformer blocks used for view
//! aggregation. Blocks are pre-norm, `x + Attn(LN x)` then `x + FF(LN x)`,
//! with no trailing normalization, so a block with zeroed output
//! projections is exactly the identity.

use mvip_autograd::nn::{LayerNorm, Linear};
use mvip_autograd::{ParamStore, Tape, Var};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::config(format!("{heads} attention heads do not divide width {width}")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, rng),
            out: Linear::new(store, &format!("{name}.o"), width, width, rng),
            heads,
            width,
        })
    }

    pub fn param_count(width: usize) -> usize {
        4 * Linear::param_count(width, width)
    }

    /// `query` is `[m×J]`, `memory` is `[n×J]`; returns `[m×J]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, query: Var, memory: Var) -> Var {
        let q = self.q.forward(tape, store, query);
        let k = self.k.forward(tape, store, memory);
        let v = self.v.forward(tape, store, memory);
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            outs.push(tape.matmul(attn, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        self.out.forward(tape, store, joined)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), width, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, width, rng),
        }
    }

    pub fn param_count(width: usize, hidden: usize) -> usize {
        Linear::param_count(width, hidden) + Linear::param_count(hidden, width)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(tape, store, x);
        let h = tape.relu(h);
        self.down.forward(tape, store, h)
    }
}

/// Self-attention plus feed-forward over a token matrix.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ff_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln1"), width),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln2"), width),
            ff: FeedForward::new(store, &format!("{name}.ff"), width, ff_width, rng),
        })
    }

    pub fn param_count(width: usize, ff_width: usize) -> usize {
        2 * LayerNorm::param_count(width)
            + MultiHeadAttention::param_count(width)
            + FeedForward::param_count(width, ff_width)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let n = self.ln_attn.forward(tape, store, x);
        let a = self.attn.forward(tape, store, n, n);
        let x = tape.add(x, a);
        let n = self.ln_ff.forward(tape, store, x);
        let f = self.ff.forward(tape, store, n);
        tape.add(x, f)
    }

    /// Zeroes the attention output projection and the second feed-forward
    /// layer, turning the block into the identity.
    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        self.attn.out.zero(store);
        self.ff.down.zero(store);
    }
}

/// Query self-attention, cross-attention into encoded memory, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ff_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln1"), width),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), width, heads, rng)?,
            ln_cross: LayerNorm::new(store, &format!("{name}.ln2"), width),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), width, heads, rng)?,
            ln_ff: LayerNorm::new(store, &format!("{name}.ln3"), width),
            ff: FeedForward::new(store, &format!("{name}.ff"), width, ff_width, rng),
        })
    }

    pub fn param_count(width: usize, ff_width: usize) -> usize {
        3 * LayerNorm::param_count(width)
            + 2 * MultiHeadAttention::param_count(width)
            + FeedForward::param_count(width, ff_width)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, query: Var, memory: Var) -> Var {
        let n = self.ln_self.forward(tape, store, query);
        let a = self.self_attn.forward(tape, store, n, n);
        let q = tape.add(query, a);
        let n = self.ln_cross.forward(tape, store, q);
        let c = self.cross_attn.forward(tape, store, n, memory);
        let q = tape.add(q, c);
        let n = self.ln_ff.forward(tape, store, q);
        let f = self.ff.forward(tape, store, n);
        tape.add(q, f)
    }
}
