//! Classification losses, the multi-head auxiliary loss and top-k metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use mvip_autograd::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Cross-entropy of the overall logits only.
    Ce,
    /// `(ζ(o) + Σ_v ζ(o_v)) / (V + 1)`.
    #[default]
    Mh,
    /// As `mh` with every view term the mean of its full, color and depth
    /// head losses.
    MhRgbd,
    /// Binary cross-entropy against multi-hot targets during the first
    /// 30% of epochs, then the multi-head loss.
    BceStage1,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Ce => "ce",
            LossMode::Mh => "mh",
            LossMode::MhRgbd => "mh_rgbd",
            LossMode::BceStage1 => "bce_stage1",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "ce" => LossMode::Ce,
            "mh" => LossMode::Mh,
            "mh_rgbd" => LossMode::MhRgbd,
            "bce_stage1" | "bce" => LossMode::BceStage1,
            other => return Err(Error::config(format!("unknown loss mode '{other}'"))),
        })
    }
}

/// Fraction of the epochs trained with binary cross-entropy.
pub const BCE_STAGE_FRACTION: f64 = 0.3;

/// Number of leading epochs in the BCE stage, `⌊0.3 · epochs⌋`.
pub fn bce_stage_epochs(epochs: usize) -> usize {
    (BCE_STAGE_FRACTION * epochs as f64).floor() as usize
}

/// The criterion actually applied in `epoch` (0-based).
pub fn effective_mode(mode: LossMode, epoch: usize, epochs: usize, has_view_heads: bool) -> LossMode {
    match mode {
        LossMode::BceStage1 if epoch < bce_stage_epochs(epochs) => LossMode::BceStage1,
        LossMode::BceStage1 if has_view_heads => LossMode::Mh,
        LossMode::BceStage1 => LossMode::Ce,
        m => m,
    }
}

/// Overall and auxiliary logits of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Heads<T> {
    pub o: T,
    pub per_view: Vec<T>,
    pub per_view_color: Option<Vec<T>>,
    pub per_view_depth: Option<Vec<T>>,
}

/// Labels of one sample. `multi_hot` and `view_classes` are only read by
/// the BCE stage and default to the one-hot of `class`.
#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub class: usize,
    pub multi_hot: Option<Vec<f64>>,
    pub view_classes: Option<Vec<usize>>,
}

impl Target {
    pub fn single(class: usize) -> Self {
        Self {
            class,
            multi_hot: None,
            view_classes: None,
        }
    }
}

fn one_hot(n: usize, c: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[c] = 1.0;
    v
}

/// The scalar loss node plus each head's (unweighted) contribution.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    /// `[ζ(o), ζ_1, …, ζ_V]` for the multi-head modes, `[ζ(o)]` for `ce`.
    pub heads: Vec<f64>,
}

/// Records the loss of `mode` on `tape`.
pub fn mh_loss_on_tape(tape: &mut Tape, heads: &Heads<Var>, target: &Target, mode: LossMode) -> Result<LossTerms> {
    let n = tape.value(heads.o).len();
    if target.class >= n {
        return Err(Error::Index(format!("class {} out of range for {n} logits", target.class)));
    }
    let v = heads.per_view.len();
    match mode {
        LossMode::Ce => {
            let l = tape.cross_entropy(heads.o, target.class);
            let value = tape.value(l).scalar_value();
            Ok(LossTerms {
                total: l,
                heads: vec![value],
            })
        }
        LossMode::Mh | LossMode::MhRgbd => {
            if v == 0 {
                return Err(Error::config(format!("{mode} loss needs per-view heads")));
            }
            let (colors, depths) = match mode {
                LossMode::MhRgbd => match (&heads.per_view_color, &heads.per_view_depth) {
                    (Some(c), Some(d)) if c.len() == v && d.len() == v => (Some(c), Some(d)),
                    _ => return Err(Error::config("mh_rgbd loss needs color and depth view heads")),
                },
                _ => (None, None),
            };
            let lo = tape.cross_entropy(heads.o, target.class);
            let mut values = vec![tape.value(lo).scalar_value()];
            let mut sum = lo;
            for i in 0..v {
                let lv = tape.cross_entropy(heads.per_view[i], target.class);
                let term = match (colors, depths) {
                    (Some(c), Some(d)) => {
                        let lc = tape.cross_entropy(c[i], target.class);
                        let ld = tape.cross_entropy(d[i], target.class);
                        let s = tape.add(lv, lc);
                        let s = tape.add(s, ld);
                        tape.scale(s, 1.0 / 3.0)
                    }
                    _ => lv,
                };
                values.push(tape.value(term).scalar_value());
                sum = tape.add(sum, term);
            }
            let total = tape.scale(sum, 1.0 / (v as f64 + 1.0));
            Ok(LossTerms { total, heads: values })
        }
        LossMode::BceStage1 => {
            let mh = target.multi_hot.clone().unwrap_or_else(|| one_hot(n, target.class));
            if mh.len() != n {
                return Err(Error::shape(format!("multi-hot target of {} for {n} classes", mh.len())));
            }
            let lo = tape.bce_with_logits(heads.o, &mh);
            let mut values = vec![tape.value(lo).scalar_value()];
            if v == 0 {
                return Ok(LossTerms { total: lo, heads: values });
            }
            let mut sum = lo;
            for i in 0..v {
                let c = target.view_classes.as_ref().map_or(target.class, |vc| vc[i]);
                if c >= n {
                    return Err(Error::Index(format!("view class {c} out of range")));
                }
                let lv = tape.bce_with_logits(heads.per_view[i], &one_hot(n, c));
                values.push(tape.value(lv).scalar_value());
                sum = tape.add(sum, lv);
            }
            let total = tape.scale(sum, 1.0 / (v as f64 + 1.0));
            Ok(LossTerms { total, heads: values })
        }
    }
}

/// Loss value for plain logit tensors.
pub fn mh_loss(heads: &Heads<Tensor>, target: &Target, mode: LossMode) -> Result<f64> {
    let mut tape = Tape::new();
    let mut put = |t: &Tensor| tape.constant(t.clone());
    let vars = Heads {
        o: put(&heads.o),
        per_view: heads.per_view.iter().map(&mut put).collect(),
        per_view_color: heads.per_view_color.as_ref().map(|v| v.iter().map(&mut put).collect()),
        per_view_depth: heads.per_view_depth.as_ref().map(|v| v.iter().map(&mut put).collect()),
    };
    let terms = mh_loss_on_tape(&mut tape, &vars, target, mode)?;
    Ok(tape.value(terms.total).scalar_value())
}

/// Softmax cross-entropy, computed through log-sum-exp.
pub fn ce(logits: &[f64], y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::Index(format!("class {y} out of range for {} logits", logits.len())));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[y])
}

/// Mean binary cross-entropy on logits.
pub fn bce(logits: &[f64], targets: &[f64]) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::shape(format!("{} logits, {} targets", logits.len(), targets.len())));
    }
    let sp = |x: f64| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    Ok(logits.iter().zip(targets).map(|(x, t)| sp(*x) - t * x).sum::<f64>() / logits.len() as f64)
}

/// Position of class `y` when classes are sorted by descending logit,
/// ties broken towards the lower class index.
pub fn rank_of(logits: &[f64], y: usize) -> usize {
    let z = logits[y];
    logits
        .iter()
        .enumerate()
        .filter(|(c, v)| **v > z || (**v == z && *c < y))
        .count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
    pub n_samples: usize,
    /// Top-1 accuracy per class that occurs in the labels.
    pub per_class: BTreeMap<usize, f64>,
}

impl MetricReport {
    pub fn topk(&self, k: usize) -> f64 {
        match k {
            1 => self.top1,
            3 => self.top3,
            5 => self.top5,
            _ => panic!("report holds top-1, top-3 and top-5 only"),
        }
    }
}

/// Fraction of rows whose label ranks within the top `k`.
pub fn topk_accuracy(logits: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits.iter().zip(labels).filter(|(z, y)| rank_of(z, **y) < k).count();
    hits as f64 / labels.len() as f64
}

/// Top-1/3/5 report; `k` larger than the class count counts every sample.
pub fn topk(logits: &[Vec<f64>], labels: &[usize]) -> MetricReport {
    assert_eq!(logits.len(), labels.len(), "one label per row");
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (z, y) in logits.iter().zip(labels) {
        let e = per_class.entry(*y).or_default();
        e.1 += 1;
        if rank_of(z, *y) == 0 {
            e.0 += 1;
        }
    }
    MetricReport {
        top1: topk_accuracy(logits, labels, 1),
        top3: topk_accuracy(logits, labels, 3),
        top5: topk_accuracy(logits, labels, 5),
        n_samples: labels.len(),
        per_class: per_class
            .into_iter()
            .map(|(c, (hit, total))| (c, hit as f64 / total as f64))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mvip_autograd::nn;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row(v: &[f64]) -> Tensor {
        Tensor::row(v.to_vec())
    }

    fn direct_ce(z: &[f64], y: usize) -> f64 {
        let e: Vec<f64> = z.iter().map(|v| v.exp()).collect();
        -(e[y] / e.iter().sum::<f64>()).ln()
    }

    #[test]
    fn ce_examples() {
        assert!((ce(&[0.0; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 80.0] {
            let l = ce(&[margin, 0.0, 0.0], 0).unwrap();
            assert!(l < prev && l >= 0.0);
            prev = l;
        }
        assert!(prev < 1e-30);
        assert!(matches!(ce(&[0.0, 1.0], 2), Err(Error::Index(_))));
    }

    #[test]
    fn ce_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let z: Vec<f64> = (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let y = rng.gen_range(0..6);
            assert!((ce(&z, y).unwrap() - direct_ce(&z, y)).abs() < 1e-10);
        }
    }

    #[test]
    fn tape_and_plain_ce_agree() {
        let z = [0.3, -1.2, 2.0];
        let heads = Heads {
            o: row(&z),
            per_view: vec![],
            per_view_color: None,
            per_view_depth: None,
        };
        let a = mh_loss(&heads, &Target::single(1), LossMode::Ce).unwrap();
        assert!((a - ce(&z, 1).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn bce_values() {
        let l = bce(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!(bce(&[100.0, -100.0], &[1.0, 0.0]).unwrap() < 1e-40);
    }

    #[test]
    fn mh_two_views_term_by_term() {
        let o = [0.1, 0.5, -0.3];
        let v1 = [1.0, -1.0, 0.0];
        let v2 = [0.0, 0.2, 0.9];
        let heads = Heads {
            o: row(&o),
            per_view: vec![row(&v1), row(&v2)],
            per_view_color: None,
            per_view_depth: None,
        };
        let expect = (direct_ce(&o, 2) + direct_ce(&v1, 2) + direct_ce(&v2, 2)) / 3.0;
        assert!((mh_loss(&heads, &Target::single(2), LossMode::Mh).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn mh_rgbd_uniform_depth_heads() {
        let o = [0.1, 0.5, -0.3, 0.0];
        let v = [1.0, -1.0, 0.0, 0.4];
        let c = [0.2, 0.2, 0.1, -0.4];
        let u = [0.0; 4];
        let heads = Heads {
            o: row(&o),
            per_view: vec![row(&v)],
            per_view_color: Some(vec![row(&c)]),
            per_view_depth: Some(vec![row(&u)]),
        };
        let view_term = (direct_ce(&v, 0) + direct_ce(&c, 0) + 4f64.ln()) / 3.0;
        let expect = (direct_ce(&o, 0) + view_term) / 2.0;
        assert!((mh_loss(&heads, &Target::single(0), LossMode::MhRgbd).unwrap() - expect).abs() < 1e-12);
        let missing = Heads {
            per_view_depth: None,
            ..heads
        };
        assert!(matches!(mh_loss(&missing, &Target::single(0), LossMode::MhRgbd), Err(Error::Config(_))));
    }

    #[test]
    fn mh_gradient_per_head_is_scaled_ce_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = 3;
        let mut tape = Tape::new();
        let logits: Vec<Tensor> = (0..=3 * v).map(|_| nn::uniform(&mut rng, &[1, 5], 2.0)).collect();
        let vars: Vec<Var> = logits.iter().map(|t| tape.constant(t.clone())).collect();
        let heads = Heads {
            o: vars[0],
            per_view: vars[1..=v].to_vec(),
            per_view_color: Some(vars[v + 1..=2 * v].to_vec()),
            per_view_depth: Some(vars[2 * v + 1..].to_vec()),
        };
        let y = 3;
        let terms = mh_loss_on_tape(&mut tape, &heads, &Target::single(y), LossMode::MhRgbd).unwrap();
        let g = tape.backward(terms.total);
        for (i, t) in logits.iter().enumerate() {
            let z = t.data();
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|x| (x - zmax).exp()).sum();
            let weight = if i == 0 { 1.0 / 4.0 } else if i <= v { 1.0 / 12.0 } else { 1.0 / 12.0 };
            for k in 0..5 {
                let p = (z[k] - zmax).exp() / sum;
                let expect = weight * (p - if k == y { 1.0 } else { 0.0 });
                assert!((g.wrt(vars[i]).unwrap().data()[k] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bce_stage_boundary_rounds_down() {
        assert_eq!(bce_stage_epochs(20), 6);
        assert_eq!(bce_stage_epochs(7), 2);
        assert_eq!(bce_stage_epochs(3), 0);
        assert_eq!(effective_mode(LossMode::BceStage1, 5, 20, true), LossMode::BceStage1);
        assert_eq!(effective_mode(LossMode::BceStage1, 6, 20, true), LossMode::Mh);
        assert_eq!(effective_mode(LossMode::BceStage1, 6, 20, false), LossMode::Ce);
    }

    #[test]
    fn topk_examples() {
        let z = vec![vec![0.1, 0.5, 0.4]];
        assert_eq!(topk_accuracy(&z, &[1], 1), 1.0);
        assert_eq!(topk_accuracy(&z, &[2], 1), 0.0);
        assert_eq!(topk_accuracy(&z, &[2], 2), 1.0);
        // ties go to the lower index
        assert_eq!(rank_of(&[1.0, 1.0, 0.0], 0), 0);
        assert_eq!(rank_of(&[1.0, 1.0, 0.0], 1), 1);
    }

    #[test]
    fn random_logits_score_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 8000;
        let z: Vec<Vec<f64>> = (0..n).map(|_| (0..8).map(|_| rng.gen::<f64>()).collect()).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..8)).collect();
        let r = topk(&z, &y);
        let p = 1.0 / 8.0;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((r.top1 - p).abs() < 3.0 * sigma, "{}", r.top1);
    }

    proptest! {
        #[test]
        fn mh_is_a_convex_combination(seed in 0u64..10_000, v in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| Tensor::row((0..4).map(|_| rng.gen_range(-3.0..3.0)).collect());
            let heads = Heads {
                o: mk(&mut rng),
                per_view: (0..v).map(|_| mk(&mut rng)).collect(),
                per_view_color: None,
                per_view_depth: None,
            };
            let y = rng.gen_range(0..4);
            let l = mh_loss(&heads, &Target::single(y), LossMode::Mh).unwrap();
            let each: Vec<f64> = std::iter::once(&heads.o).chain(&heads.per_view).map(|t| ce(t.data(), y).unwrap()).collect();
            let lo = each.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = each.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(l >= lo - 1e-12 && l <= hi + 1e-12);

            let mut swapped = heads.clone();
            swapped.per_view.reverse();
            let l2 = mh_loss(&swapped, &Target::single(y), LossMode::Mh).unwrap();
            prop_assert!((l - l2).abs() < 1e-12);
        }

        #[test]
        fn topk_is_monotone(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z: Vec<Vec<f64>> = (0..50).map(|_| (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let y: Vec<usize> = (0..50).map(|_| rng.gen_range(0..7)).collect();
            let r = topk(&z, &y);
            prop_assert!(r.top1 <= r.top3 && r.top3 <= r.top5);
        }
    }
}
