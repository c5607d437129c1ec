//! Object weight as a classification cue: the sinusoidal encoding `PE(ω)`,
//! measurement-noise augmentation, the four-layer PropertyNet upscaler,
//! the weight-only classifier and decoder-query anchors.

use std::fmt;
use std::str::FromStr;

use mvip_autograd::nn::Linear;
use mvip_autograd::optim::{Adam, AdamConfig};
use mvip_autograd::{GradBuffer, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{topk, MetricReport};
use crate::schedule::{lr_at, ScheduleConfig};
use crate::seed;

/// Frequency base of the encoding.
pub const PE_BASE: f64 = 10_000.0;
/// Half-width of the uniform measurement error, in kg or as a fraction of ω.
pub const NOISE_AMPLITUDE: f64 = 0.01;
/// Noisy weights are clamped to at least this many kg.
pub const MIN_WEIGHT_KG: f64 = 1e-6;

/// `[sin(ω/T^{0/d}), cos(ω/T^{0/d}), …, sin(ω/T^{(d−1)/d}), cos(ω/T^{(d−1)/d})]`.
pub fn pe(w: f64, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * d);
    for k in 0..d {
        let arg = w / PE_BASE.powf(k as f64 / d as f64);
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

pub fn pe_tensor(w: f64, d: usize) -> Tensor {
    Tensor::row(pe(w, d))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    None,
    Constant,
    Proportional,
    /// Constant or proportional, chosen uniformly per draw.
    Both,
}

impl NoiseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseMode::None => "none",
            NoiseMode::Constant => "constant",
            NoiseMode::Proportional => "proportional",
            NoiseMode::Both => "both",
        }
    }
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "none" => NoiseMode::None,
            "constant" => NoiseMode::Constant,
            "proportional" => NoiseMode::Proportional,
            "both" | "paper" => NoiseMode::Both,
            other => return Err(Error::config(format!("unknown weight noise '{other}'"))),
        })
    }
}

pub fn weight_noise(w: f64, mode: NoiseMode, rng: &mut impl Rng) -> f64 {
    let mode = match mode {
        NoiseMode::Both if rng.gen_bool(0.5) => NoiseMode::Constant,
        NoiseMode::Both => NoiseMode::Proportional,
        m => m,
    };
    let noisy = match mode {
        NoiseMode::None | NoiseMode::Both => return w,
        NoiseMode::Constant => w + rng.gen_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE),
        NoiseMode::Proportional => w + rng.gen_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE) * w,
    };
    noisy.max(MIN_WEIGHT_KG)
}

/// Four affine layers `2d → d_h → d_h → d_h → d_h` with ReLU between them,
/// plus a linear classifier `d_h → N` when used on its own.
#[derive(Clone, Debug)]
pub struct PropertyNet {
    pub layers: [Linear; 4],
    pub classifier: Option<Linear>,
    pub d: usize,
    pub d_h: usize,
    pub classes: usize,
}

impl PropertyNet {
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        d_h: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::config("PropertyNet needs at least one class"));
        }
        let mut net = Self::upscaler(store, prefix, d, d_h, rng)?;
        net.classifier = Some(Linear::new(store, &format!("{prefix}.fc"), d_h, classes, rng));
        net.classes = classes;
        Ok(net)
    }

    /// The four upscaling layers without a classifier, for anchors.
    pub fn upscaler(store: &mut ParamStore, prefix: &str, d: usize, d_h: usize, rng: &mut impl Rng) -> Result<Self> {
        if d == 0 || d_h == 0 {
            return Err(Error::config("PropertyNet widths must be positive"));
        }
        let widths = [2 * d, d_h, d_h, d_h, d_h];
        let layers = std::array::from_fn(|i| Linear::new(store, &format!("{prefix}.l{i}"), widths[i], widths[i + 1], rng));
        Ok(Self {
            layers,
            classifier: None,
            d,
            d_h,
            classes: 0,
        })
    }

    pub fn upscaler_param_count(d: usize, d_h: usize) -> usize {
        Linear::param_count(2 * d, d_h) + 3 * Linear::param_count(d_h, d_h)
    }

    pub fn param_count(d: usize, d_h: usize, classes: usize) -> usize {
        Self::upscaler_param_count(d, d_h) + Linear::param_count(d_h, classes)
    }

    /// Parameters of the four upscaling layers.
    pub fn upscaler_ids(&self) -> Vec<mvip_autograd::ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    /// `x` is `[B×2d]`; returns `[B×d_h]`.
    pub fn upscale(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    /// `x` is `[B×2d]`; returns `[B×N]` logits. Panics on an upscaler
    /// built without classifier.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.upscale(tape, store, x);
        self.classifier.as_ref().expect("PropertyNet has no classifier").forward(tape, store, h)
    }
}

/// A PropertyNet together with its parameters.
#[derive(Clone, Debug)]
pub struct PropertyNetState {
    pub net: PropertyNet,
    pub store: ParamStore,
    pub frozen: bool,
}

impl PropertyNetState {
    pub fn new(d: usize, d_h: usize, classes: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = seed::rng_named(seed, "property_net");
        let net = PropertyNet::build(&mut store, "pn", d, d_h, classes, &mut rng)?;
        Ok(Self {
            net,
            store,
            frozen: false,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    /// `classifier(mlp4(pe(ω)))` as a `1×N` row.
    pub fn forward(&self, w: f64) -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(pe_tensor(w, self.net.d));
        let z = self.net.logits(&mut tape, &self.store, x);
        tape.value(z).data().to_vec()
    }
}

/// How the weight enters the tr_ende decoder query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    #[default]
    None,
    /// Raw encoding, zero-padded or truncated to the query width.
    #[serde(alias = "pe_only")]
    Pe,
    /// PropertyNet upscaling, trained with the model.
    PePn,
    /// PropertyNet upscaling with its parameters excluded from updates.
    PePnFrozen,
}

impl AnchorMode {
    pub const ALL: [AnchorMode; 4] = [AnchorMode::None, AnchorMode::Pe, AnchorMode::PePn, AnchorMode::PePnFrozen];

    pub fn as_str(self) -> &'static str {
        match self {
            AnchorMode::None => "none",
            AnchorMode::Pe => "pe",
            AnchorMode::PePn => "pe_pn",
            AnchorMode::PePnFrozen => "pe_pn_frozen",
        }
    }

    pub fn uses_property_net(self) -> bool {
        matches!(self, AnchorMode::PePn | AnchorMode::PePnFrozen)
    }
}

impl fmt::Display for AnchorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnchorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "none" => AnchorMode::None,
            "pe" | "pe_only" => AnchorMode::Pe,
            "pe_pn" => AnchorMode::PePn,
            "pe_pn_frozen" => AnchorMode::PePnFrozen,
            other => return Err(Error::config(format!("unknown anchor mode '{other}'"))),
        })
    }
}

/// Zero-pads or truncates `v` to length `n`.
pub fn fit_width(mut v: Vec<f64>, n: usize) -> Vec<f64> {
    v.resize(n, 0.0);
    v
}

/// Builds the `1×d_d` anchor for weight `w`, or `None` for mode `none`.
pub fn make_anchor(
    tape: &mut Tape,
    store: &ParamStore,
    w: f64,
    mode: AnchorMode,
    net: Option<&PropertyNet>,
    d: usize,
    d_d: usize,
) -> Result<Option<Var>> {
    match mode {
        AnchorMode::None => Ok(None),
        AnchorMode::Pe => Ok(Some(tape.constant(Tensor::row(fit_width(pe(w, d), d_d))))),
        AnchorMode::PePn | AnchorMode::PePnFrozen => {
            let net = net.ok_or_else(|| Error::config(format!("anchor mode {mode} needs a PropertyNet")))?;
            if net.d_h != d_d {
                return Err(Error::config(format!(
                    "PropertyNet width {} does not match query width {d_d}",
                    net.d_h
                )));
            }
            let x = tape.constant(pe_tensor(w, net.d));
            Ok(Some(net.upscale(tape, store, x)))
        }
    }
}

/// Training recipe for the standalone weight classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyTrainConfig {
    pub d: usize,
    pub d_h: usize,
    pub epochs: usize,
    pub batch: usize,
    /// Fresh noisy draws per class and epoch.
    pub samples_per_class: usize,
    pub noise: NoiseMode,
    pub schedule: ScheduleConfig,
    pub seed: u64,
}

impl PropertyTrainConfig {
    /// Desk-scale defaults: the long-run schedule shape at 10⁴× the rates.
    pub fn desk() -> Self {
        Self {
            d: 8,
            d_h: 64,
            epochs: 150,
            batch: 128,
            samples_per_class: 64,
            noise: NoiseMode::Proportional,
            schedule: ScheduleConfig::property_net(0).scaled(1e4),
            seed: 0,
        }
    }

    /// 10k epochs at batch 512 with `1e-7 ↗ 1e-6 ↘ 1e-9`.
    pub fn long_run() -> Self {
        Self {
            epochs: 10_000,
            batch: 512,
            schedule: ScheduleConfig::property_net(0),
            ..Self::desk()
        }
    }

    fn steps_per_epoch(&self, classes: usize) -> usize {
        (classes * self.samples_per_class).div_ceil(self.batch.max(1))
    }
}

/// Mean cross-entropy over the rows of `logits`.
fn batch_ce(tape: &mut Tape, logits: Var, labels: &[usize]) -> Var {
    let rows: Vec<Var> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let r = tape.slice_rows(logits, i, 1);
            tape.cross_entropy(r, y)
        })
        .collect();
    let mut sum = rows[0];
    for r in &rows[1..] {
        sum = tape.add(sum, *r);
    }
    tape.scale(sum, 1.0 / labels.len() as f64)
}

fn encode_batch(ws: &[f64], d: usize) -> Tensor {
    let data = ws.iter().flat_map(|w| pe(*w, d)).collect();
    Tensor::matrix(ws.len(), 2 * d, data)
}

/// Trains a classifier on class weights `weights[c]` (kg). Returns the
/// state and the mean loss per epoch.
pub fn train_weight_classifier(weights: &[f64], cfg: &PropertyTrainConfig) -> Result<(PropertyNetState, Vec<f64>)> {
    if weights.len() < 2 {
        return Err(Error::config("weight classifier needs at least two classes"));
    }
    if cfg.batch == 0 || cfg.samples_per_class == 0 {
        return Err(Error::config("batch and samples_per_class must be positive"));
    }
    let mut state = PropertyNetState::new(cfg.d, cfg.d_h, weights.len(), cfg.seed)?;
    let steps_per_epoch = cfg.steps_per_epoch(weights.len());
    let sched = ScheduleConfig {
        total_steps: steps_per_epoch * cfg.epochs,
        ..cfg.schedule
    };
    sched.validate()?;
    let mut adam = Adam::new(AdamConfig::default());
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut rng = seed::rng(&[cfg.seed, epoch as u64, 0x5745_4947]);
        let mut samples: Vec<(f64, usize)> = (0..cfg.samples_per_class)
            .flat_map(|_| 0..weights.len())
            .map(|c| (c, weights[c]))
            .map(|(c, w)| (weight_noise(w, cfg.noise, &mut rng), c))
            .collect();
        rand::seq::SliceRandom::shuffle(samples.as_mut_slice(), &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in samples.chunks(cfg.batch) {
            let ws: Vec<f64> = chunk.iter().map(|s| s.0).collect();
            let ys: Vec<usize> = chunk.iter().map(|s| s.1).collect();
            let mut tape = Tape::new();
            let x = tape.constant(encode_batch(&ws, cfg.d));
            let z = state.net.logits(&mut tape, &state.store, x);
            let loss = batch_ce(&mut tape, z, &ys);
            let value = tape.value(loss).scalar_value();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    stage: format!("weight classifier loss, epoch {epoch}"),
                });
            }
            epoch_loss += value * chunk.len() as f64;
            let mut buf = GradBuffer::new(&state.store);
            tape.backward(loss).accumulate_into(&mut buf);
            adam.step(&mut state.store, &buf, lr_at(step, &sched), &|_| false);
            step += 1;
        }
        losses.push(epoch_loss / samples.len() as f64);
    }
    Ok((state, losses))
}

/// Scores `per_class` noisy draws of every class weight.
pub fn evaluate_weight_classifier(
    state: &PropertyNetState,
    weights: &[f64],
    noise: NoiseMode,
    per_class: usize,
    seed: u64,
) -> MetricReport {
    let mut rng = seed::rng(&[seed, 0x4556_414c]);
    let mut logits = Vec::with_capacity(weights.len() * per_class);
    let mut labels = Vec::with_capacity(weights.len() * per_class);
    for _ in 0..per_class {
        for (c, w) in weights.iter().enumerate() {
            logits.push(state.forward(weight_noise(*w, noise, &mut rng)));
            labels.push(c);
        }
    }
    topk(&logits, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mvip_autograd::gradcheck::{check, Coverage};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pe_at_zero() {
        assert_eq!(pe(0.0, 4), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn pe_first_pair_is_unit_frequency() {
        let v = pe(0.7, 8);
        assert_eq!(v[0], 0.7f64.sin());
        assert_eq!(v[1], 0.7f64.cos());
        let last = 0.7 / 10_000f64.powf(7.0 / 8.0);
        assert!((v[14] - last.sin()).abs() < 1e-15);
    }

    #[test]
    fn pe_injective_on_gram_grid() {
        let d = 8;
        let codes: Vec<Vec<f64>> = (0..=15_000).map(|g| pe(g as f64 * 1e-3, d)).collect();
        for pair in codes.windows(2) {
            let dist: f64 = pair[0].iter().zip(&pair[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(dist > 1e-4, "neighbouring grid points collide");
        }
        // a full period of the fastest frequency apart still differs
        let a = pe(1.0, d);
        let b = pe(1.0 + 2.0 * std::f64::consts::PI, d);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-3));
    }

    #[test]
    fn noise_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let p = weight_noise(10.0, NoiseMode::Proportional, &mut rng);
            assert!((9.9..=10.1).contains(&p));
            let c = weight_noise(10.0, NoiseMode::Constant, &mut rng);
            assert!((9.99..=10.01).contains(&c));
            let b = weight_noise(10.0, NoiseMode::Both, &mut rng);
            assert!((9.9..=10.1).contains(&b));
        }
        assert_eq!(weight_noise(10.0, NoiseMode::None, &mut rng), 10.0);
        assert!(weight_noise(0.001, NoiseMode::Constant, &mut ChaCha8Rng::seed_from_u64(0)) >= MIN_WEIGHT_KG);
    }

    #[test]
    fn both_mode_mixes_the_two_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let outside_constant = (0..1000)
            .map(|_| weight_noise(10.0, NoiseMode::Both, &mut rng))
            .filter(|w| (w - 10.0).abs() > 0.01)
            .count();
        assert!(outside_constant > 300 && outside_constant < 700);
    }

    #[test]
    fn property_net_gradient() {
        for seed in 0..3 {
            let st = PropertyNetState::new(4, 8, 3, seed).unwrap();
            let ids: Vec<_> = st.store.ids().collect();
            let net = st.net.clone();
            let report = check(&st.store, &ids, Coverage::All, 1e-6, |s| {
                let mut tape = Tape::new();
                let x = tape.constant(encode_batch(&[0.4, 1.3], 4));
                let z = net.logits(&mut tape, s, x);
                let l = batch_ce(&mut tape, z, &[2, 0]);
                (tape, l)
            });
            assert!(report.passes(1e-4), "{report:?}");
        }
    }

    #[test]
    fn counts() {
        let st = PropertyNetState::new(8, 64, 5, 1).unwrap();
        assert_eq!(st.param_count(), PropertyNet::param_count(8, 64, 5));
        assert_eq!(st.net.layers.len(), 4);
    }

    #[test]
    fn frozen_forward_is_deterministic() {
        let mut st = PropertyNetState::new(8, 16, 3, 4).unwrap();
        st.frozen = true;
        assert_eq!(st.forward(1.25), st.forward(1.25));
    }

    #[test]
    fn anchors() {
        let st = PropertyNetState::new(4, 8, 3, 4).unwrap();
        let mut tape = Tape::new();
        let a = make_anchor(&mut tape, &st.store, 0.0, AnchorMode::Pe, None, 4, 8).unwrap().unwrap();
        assert_eq!(tape.value(a).data(), pe(0.0, 4).as_slice());
        let padded = make_anchor(&mut tape, &st.store, 0.0, AnchorMode::Pe, None, 4, 10).unwrap().unwrap();
        assert_eq!(&tape.value(padded).data()[8..], &[0.0, 0.0]);
        assert!(make_anchor(&mut tape, &st.store, 1.0, AnchorMode::None, None, 4, 8).unwrap().is_none());

        let one = make_anchor(&mut tape, &st.store, 1.0, AnchorMode::PePn, Some(&st.net), 4, 8).unwrap().unwrap();
        let one_frozen =
            make_anchor(&mut tape, &st.store, 1.0, AnchorMode::PePnFrozen, Some(&st.net), 4, 8).unwrap().unwrap();
        let two = make_anchor(&mut tape, &st.store, 2.0, AnchorMode::PePn, Some(&st.net), 4, 8).unwrap().unwrap();
        assert_eq!(tape.value(one).data(), tape.value(one_frozen).data());
        assert!(tape.value(one).max_abs_diff(tape.value(two)) > 0.0);

        let err = make_anchor(&mut tape, &st.store, 1.0, AnchorMode::PePn, Some(&st.net), 4, 16).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = make_anchor(&mut tape, &st.store, 1.0, AnchorMode::PePn, None, 4, 8).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn two_weights_are_learned() {
        let cfg = PropertyTrainConfig {
            epochs: 40,
            ..PropertyTrainConfig::desk()
        };
        let weights = [1.0, 2.0];
        let (st, losses) = train_weight_classifier(&weights, &cfg).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        let report = evaluate_weight_classifier(&st, &weights, NoiseMode::Proportional, 100, 1);
        assert_eq!(report.top1, 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = PropertyTrainConfig {
            epochs: 3,
            ..PropertyTrainConfig::desk()
        };
        let (a, la) = train_weight_classifier(&[0.3, 0.5, 0.9], &cfg).unwrap();
        let (b, lb) = train_weight_classifier(&[0.3, 0.5, 0.9], &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.store.flatten(), b.store.flatten());
    }

    proptest! {
        #[test]
        fn pe_bounded_and_lipschitz(w in 0.0f64..15.0, h in 1e-6f64..1e-3) {
            let a = pe(w, 8);
            let b = pe(w + h, 8);
            prop_assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
            // every coordinate moves at most frequency·h, highest frequency is 1
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= h * (1.0 + 1e-9));
            }
        }

        #[test]
        fn proportional_noise_keeps_order(wa in 0.01f64..15.0, ratio in 1.03f64..2.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let wb = wa * ratio;
            let na = weight_noise(wa, NoiseMode::Proportional, &mut rng);
            let nb = weight_noise(wb, NoiseMode::Proportional, &mut rng);
            prop_assert!(nb > na);
        }
    }
}
