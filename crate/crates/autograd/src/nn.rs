//! Parameter layouts for the handful of layers the models are built from.
//!
//! A layer struct only stores [`ParamId`]s; the values live in a
//! [`ParamStore`] so one store can hold a whole model and be serialized as a
//! flat vector.

use rand::Rng;

use crate::{ParamId, ParamStore, Tape, Tensor, Var};

/// Seeded uniform initialization in `[-bound, bound]`.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if bound == 0.0 { 0.0 } else { rng.gen_range(-bound..=bound) })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Bound used for affine layers: `1/√fan_in`.
pub fn default_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// He-uniform bound `√(6/fan_in)` for layers followed by a ReLU.
pub fn relu_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Affine map `y = x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = default_bound(fan_in);
        Self::with_bound(store, name, fan_in, fan_out, bound, rng)
    }

    pub fn with_bound(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.w"), uniform(rng, &[fan_in, fan_out], bound));
        let bias = store.add(format!("{name}.b"), uniform(rng, &[fan_out], bound));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn param_count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }

    /// `x` is `[m × fan_in]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w);
        tape.add_row_bias(y, b)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

/// Square-kernel 2-D convolution with zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(
            format!("{name}.w"),
            uniform(rng, &[out_ch, in_ch, kernel, kernel], relu_bound(fan_in)),
        );
        let bias = store.add(format!("{name}.b"), Tensor::zeros([out_ch]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn param_count(in_ch: usize, out_ch: usize, kernel: usize) -> usize {
        out_ch * in_ch * kernel * kernel + out_ch
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Row-wise layer normalization with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled([width], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([width]));
        Self {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn param_count(width: usize) -> usize {
        2 * width
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm_rows(x, g, b, self.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_matches_manual_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, &mut rng);
        assert_eq!(store.num_scalars(), Linear::param_count(3, 2));
        let x = Tensor::row(vec![1.0, -2.0, 0.5]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = lin.forward(&mut tape, &store, xv);
        let w = store.get(lin.weight);
        let b = store.get(lin.bias);
        for j in 0..2 {
            let manual: f64 = (0..3).map(|i| x.data()[i] * w.at2(i, j)).sum::<f64>() + b.data()[j];
            assert!((tape.value(y).data()[j] - manual).abs() < 1e-14);
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 4);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 4, vec![1., 2., 3., 4., -1., 0., 5., 2.]));
        let y = ln.forward(&mut tape, &store, x);
        for r in 0..2 {
            let row = tape.value(y).row_slice(r);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
