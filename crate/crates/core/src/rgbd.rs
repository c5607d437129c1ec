//! Stage-wise fusion between the color and depth feature streams.
//!
//! Every fusion block squeezes both `C×H×W` maps to their channel means,
//! runs the `2C` context through a bottleneck and produces sigmoid gates.
//! A one-directional block rewrites only its target stream,
//! `t̂ = a ⊙ t + b ⊙ s`, and hands the source stream through untouched; a
//! bidirectional block rewrites both. The final block `F_I` merges the two
//! streams into one map, `a ⊙ color + b ⊙ depth`.

use std::fmt;
use std::str::FromStr;

use mvip_autograd::nn::{self, Linear};
use mvip_autograd::{ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Which stream receives information from the joint context.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionDirection {
    /// Color flows into the depth stream; color passes through.
    #[serde(alias = "c2d")]
    CToD,
    /// Depth flows into the color stream; depth passes through.
    #[serde(alias = "d2c")]
    DToC,
    #[serde(alias = "bidir")]
    Bidirectional,
    #[default]
    None,
}

impl FusionDirection {
    pub const ALL: [FusionDirection; 4] = [
        FusionDirection::None,
        FusionDirection::CToD,
        FusionDirection::DToC,
        FusionDirection::Bidirectional,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionDirection::CToD => "c2d",
            FusionDirection::DToC => "d2c",
            FusionDirection::Bidirectional => "bidir",
            FusionDirection::None => "none",
        }
    }

    /// Number of gate vectors of width `C` the block emits.
    fn gate_groups(self) -> usize {
        match self {
            FusionDirection::None => 0,
            FusionDirection::CToD | FusionDirection::DToC => 2,
            FusionDirection::Bidirectional => 4,
        }
    }
}

impl fmt::Display for FusionDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "c2d" | "c_to_d" => FusionDirection::CToD,
            "d2c" | "d_to_c" => FusionDirection::DToC,
            "bidir" | "bidirectional" => FusionDirection::Bidirectional,
            "none" => FusionDirection::None,
            other => return Err(Error::config(format!("unknown rgbd direction '{other}'"))),
        })
    }
}

/// Squeeze-excitation over the concatenated channel means of both streams.
#[derive(Clone, Debug)]
pub struct JointGate {
    pub squeeze: Linear,
    pub excite: Linear,
    pub channels: usize,
}

impl JointGate {
    fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let context = 2 * channels;
        let hidden = (context / reduction.max(1)).max(1);
        Self {
            squeeze: Linear::with_bound(store, &format!("{name}.fc1"), context, hidden, nn::relu_bound(context), rng),
            excite: Linear::new(store, &format!("{name}.fc2"), hidden, groups * channels, rng),
            channels,
        }
    }

    fn param_count(channels: usize, groups: usize, reduction: usize) -> usize {
        let context = 2 * channels;
        let hidden = (context / reduction.max(1)).max(1);
        Linear::param_count(context, hidden) + Linear::param_count(hidden, groups * channels)
    }

    /// Gates `[1 × groups·C]` from both maps.
    fn gates(&self, tape: &mut Tape, store: &ParamStore, color: Var, depth: Var) -> Var {
        let pc = tape.global_avg_pool(color);
        let pd = tape.global_avg_pool(depth);
        let ctx = tape.concat_cols(&[pc, pd]);
        let h = self.squeeze.forward(tape, store, ctx);
        let h = tape.relu(h);
        let z = self.excite.forward(tape, store, h);
        tape.sigmoid(z)
    }

    /// Pins the gates to `σ(bias[g])` for each group `g`.
    pub fn force_gates(&self, store: &mut ParamStore, bias: &[f64]) {
        store.get_mut(self.excite.weight).data_mut().fill(0.0);
        let c = self.channels;
        let b = store.get_mut(self.excite.bias).data_mut();
        for (g, v) in bias.iter().enumerate() {
            b[g * c..(g + 1) * c].fill(*v);
        }
    }

    fn group(&self, tape: &mut Tape, gates: Var, g: usize) -> Var {
        tape.slice_cols(gates, g * self.channels, self.channels)
    }
}

/// `a ⊙ x + b ⊙ y` with per-channel gates.
fn mix(tape: &mut Tape, a: Var, x: Var, b: Var, y: Var) -> Var {
    let ax = tape.channel_scale(x, a);
    let by = tape.channel_scale(y, b);
    tape.add(ax, by)
}

fn check_pair(tape: &Tape, color: Var, depth: Var, channels: usize) -> Result<()> {
    let cs = tape.value(color).shape();
    let ds = tape.value(depth).shape();
    if cs != ds {
        return Err(Error::shape(format!("color {cs:?} and depth {ds:?} differ")));
    }
    if cs.len() != 3 || cs[0] != channels {
        return Err(Error::shape(format!("stage maps {cs:?}, fusion built for {channels} channels")));
    }
    Ok(())
}

/// One intermediate-stage fusion block.
#[derive(Clone, Debug)]
pub struct StageFusion {
    pub direction: FusionDirection,
    pub gate: Option<JointGate>,
    pub channels: usize,
}

impl StageFusion {
    pub fn build(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        direction: FusionDirection,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let groups = direction.gate_groups();
        let gate = (groups > 0).then(|| JointGate::new(store, name, channels, groups, reduction, rng));
        Self {
            direction,
            gate,
            channels,
        }
    }

    pub fn param_count(channels: usize, direction: FusionDirection, reduction: usize) -> usize {
        match direction.gate_groups() {
            0 => 0,
            g => JointGate::param_count(channels, g, reduction),
        }
    }

    /// Returns the updated `(color, depth)` pair. Streams that are not a
    /// target come back as the very same tape node.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, color: Var, depth: Var) -> Result<(Var, Var)> {
        check_pair(tape, color, depth, self.channels)?;
        let Some(gate) = &self.gate else {
            return Ok((color, depth));
        };
        let g = gate.gates(tape, store, color, depth);
        Ok(match self.direction {
            FusionDirection::None => (color, depth),
            FusionDirection::CToD => {
                let (a, b) = (gate.group(tape, g, 0), gate.group(tape, g, 1));
                (color, mix(tape, a, depth, b, color))
            }
            FusionDirection::DToC => {
                let (a, b) = (gate.group(tape, g, 0), gate.group(tape, g, 1));
                (mix(tape, a, color, b, depth), depth)
            }
            FusionDirection::Bidirectional => {
                let (ac, bc) = (gate.group(tape, g, 0), gate.group(tape, g, 1));
                let (ad, bd) = (gate.group(tape, g, 2), gate.group(tape, g, 3));
                let c = mix(tape, ac, color, bc, depth);
                let d = mix(tape, ad, depth, bd, color);
                (c, d)
            }
        })
    }
}

/// The last-stage merge `F_I`. Absent in RGB-only models, where it is the
/// identity on the color stream.
#[derive(Clone, Debug)]
pub struct FinalFusion {
    pub gate: JointGate,
}

impl FinalFusion {
    pub fn build(store: &mut ParamStore, name: &str, channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        Self {
            gate: JointGate::new(store, name, channels, 2, reduction, rng),
        }
    }

    pub fn param_count(channels: usize, reduction: usize) -> usize {
        JointGate::param_count(channels, 2, reduction)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, color: Var, depth: Var) -> Result<Var> {
        check_pair(tape, color, depth, self.gate.channels)?;
        let g = self.gate.gates(tape, store, color, depth);
        let a = self.gate.group(tape, g, 0);
        let b = self.gate.group(tape, g, 1);
        Ok(mix(tape, a, color, b, depth))
    }

    /// Zero weights and biases: both gates sit at exactly 0.5.
    pub fn equal_gates(&self, store: &mut ParamStore) {
        self.gate.squeeze.zero(store);
        self.gate.excite.zero(store);
    }
}

/// Stage blocks plus the final merge, with their own parameters.
#[derive(Clone, Debug)]
pub struct RgbdState {
    pub stages: Vec<StageFusion>,
    pub last: Option<FinalFusion>,
    pub store: ParamStore,
}

impl RgbdState {
    /// `channels[i]` is the width of stage `i + 1`; the last entry feeds
    /// `F_I`. `rgb_only` drops `F_I`.
    pub fn new(channels: &[usize], direction: FusionDirection, rgb_only: bool, reduction: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = seed::rng_named(seed, "rgbd");
        let (last_c, inner) = channels.split_last().expect("at least one stage");
        let stages = inner
            .iter()
            .enumerate()
            .map(|(i, c)| StageFusion::build(&mut store, &format!("rgbd.s{}", i + 1), *c, direction, reduction, &mut rng))
            .collect();
        let last = (!rgb_only).then(|| FinalFusion::build(&mut store, "rgbd.final", *last_c, reduction, &mut rng));
        Self { stages, last, store }
    }

    /// Runs every stage block on the given per-stage maps (each stage is
    /// fed its own input pair) and the final merge on the last pair.
    pub fn forward(&self, pairs: &[(Tensor, Tensor)]) -> Result<(Vec<(Tensor, Tensor)>, Tensor)> {
        let mut tape = Tape::new();
        let mut out = Vec::new();
        for (s, (c, d)) in self.stages.iter().zip(pairs) {
            let (cv, dv) = (tape.constant(c.clone()), tape.constant(d.clone()));
            let (c2, d2) = s.forward(&mut tape, &self.store, cv, dv)?;
            out.push((tape.value(c2).clone(), tape.value(d2).clone()));
        }
        let (c, d) = pairs.last().expect("at least one stage");
        let fused = match &self.last {
            None => c.clone(),
            Some(f) => {
                let (cv, dv) = (tape.constant(c.clone()), tape.constant(d.clone()));
                let y = f.forward(&mut tape, &self.store, cv, dv)?;
                tape.value(y).clone()
            }
        };
        Ok((out, fused))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mvip_autograd::gradcheck::{self, Coverage};
    use mvip_autograd::ParamId;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn maps(rng: &mut ChaCha8Rng, c: usize, hw: usize) -> (Tensor, Tensor) {
        (nn::uniform(rng, &[c, hw, hw], 1.0), nn::uniform(rng, &[c, hw, hw], 1.0))
    }

    fn stage(direction: FusionDirection, c: usize, seed: u64) -> (StageFusion, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = StageFusion::build(&mut store, "s", c, direction, 4, &mut rng);
        (s, store)
    }

    fn run(s: &StageFusion, store: &ParamStore, c: &Tensor, d: &Tensor) -> (Tensor, Tensor) {
        let mut t = Tape::new();
        let (cv, dv) = (t.constant(c.clone()), t.constant(d.clone()));
        let (a, b) = s.forward(&mut t, store, cv, dv).unwrap();
        (t.value(a).clone(), t.value(b).clone())
    }

    #[test]
    fn none_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (c, d) = maps(&mut rng, 4, 5);
        let (s, store) = stage(FusionDirection::None, 4, 0);
        assert_eq!(store.num_scalars(), 0);
        assert_eq!(run(&s, &store, &c, &d), (c, d));
    }

    #[test]
    fn one_directional_blocks_keep_the_source_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, d) = maps(&mut rng, 4, 5);
        let (s, store) = stage(FusionDirection::CToD, 4, 0);
        let (c2, d2) = run(&s, &store, &c, &d);
        assert_eq!(c2.data(), c.data());
        assert!(d2.max_abs_diff(&d) > 0.0);
        let (s, store) = stage(FusionDirection::DToC, 4, 0);
        let (c2, d2) = run(&s, &store, &c, &d);
        assert_eq!(d2.data(), d.data());
        assert!(c2.max_abs_diff(&c) > 0.0);
    }

    #[test]
    fn identity_gates_pass_the_target_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, d) = maps(&mut rng, 4, 5);
        for dir in [FusionDirection::CToD, FusionDirection::DToC, FusionDirection::Bidirectional] {
            let (s, mut store) = stage(dir, 4, 0);
            let bias: &[f64] = if dir == FusionDirection::Bidirectional {
                &[50.0, -50.0, 50.0, -50.0]
            } else {
                &[50.0, -50.0]
            };
            s.gate.as_ref().unwrap().force_gates(&mut store, bias);
            let (c2, d2) = run(&s, &store, &c, &d);
            assert!(c2.max_abs_diff(&c) < 1e-6, "{dir}");
            assert!(d2.max_abs_diff(&d) < 1e-6, "{dir}");
        }
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, d) = maps(&mut rng, 3, 5);
        let (s, store) = stage(FusionDirection::CToD, 4, 0);
        let mut t = Tape::new();
        let (cv, dv) = (t.constant(c), t.constant(d));
        assert!(matches!(s.forward(&mut t, &store, cv, dv), Err(Error::Shape(_))));
    }

    #[test]
    fn final_fuse_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (c, d) = maps(&mut rng, 4, 3);
        let rgb = RgbdState::new(&[4], FusionDirection::None, true, 4, 0);
        assert_eq!(rgb.forward(&[(c.clone(), d.clone())]).unwrap().1, c);

        let mut both = RgbdState::new(&[4], FusionDirection::None, false, 4, 0);
        let last = both.last.clone().unwrap();
        last.equal_gates(&mut both.store);
        let fused = both.forward(&[(c.clone(), c.clone())]).unwrap().1;
        assert!(fused.max_abs_diff(&c) < 1e-6);
    }

    #[test]
    fn counts_match_store() {
        for dir in FusionDirection::ALL {
            let (_, store) = stage(dir, 6, 0);
            assert_eq!(store.num_scalars(), StageFusion::param_count(6, dir, 4));
        }
        let s = RgbdState::new(&[4, 6], FusionDirection::Bidirectional, false, 4, 0);
        assert_eq!(
            s.store.num_scalars(),
            StageFusion::param_count(4, FusionDirection::Bidirectional, 4) + FinalFusion::param_count(6, 4)
        );
    }

    #[test]
    fn stage_then_final_gradient_check() {
        for dir in [FusionDirection::CToD, FusionDirection::DToC, FusionDirection::Bidirectional] {
            let state = RgbdState::new(&[3, 3], dir, false, 2, 9);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let (c, d) = maps(&mut rng, 3, 4);
            let ids: Vec<ParamId> = state.store.ids().collect();
            let report = gradcheck::check(&state.store, &ids, Coverage::All, 1e-6, |st| {
                let mut t = Tape::new();
                let (cv, dv) = (t.constant(c.clone()), t.constant(d.clone()));
                let (c2, d2) = state.stages[0].forward(&mut t, st, cv, dv).unwrap();
                let y = state.last.as_ref().unwrap().forward(&mut t, st, c2, d2).unwrap();
                let sq = t.mul(y, y);
                let loss = t.sum_all(sq);
                (t, loss)
            });
            assert!(report.passes(1e-4), "{dir}: {report:?}");
        }
    }
}
