//! Central finite-difference gradient checking.
//!
//! The relative error reported is norm-based,
//! `‖g_analytic − g_numeric‖₂ / max(‖g_analytic‖₂, ‖g_numeric‖₂, 1e-8)`,
//! over every checked scalar. Per-element ratios are too noisy for entries
//! whose true gradient is near zero.

use crate::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub analytic_norm: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_error < tol
    }
}

/// Which scalars of a parameter to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many scalars per tensor, evenly strided.
    AtMost(usize),
}

/// Compares the tape gradient of `loss` against central differences with
/// step `eps` for the parameters in `ids`.
///
/// `loss` must rebuild the full forward pass from the store each call.
pub fn check<F>(
    store: &ParamStore,
    ids: &[ParamId],
    coverage: Coverage,
    eps: f64,
    loss: F,
) -> GradCheckReport
where
    F: Fn(&ParamStore) -> (Tape, Var),
{
    let (tape, root) = loss(store);
    let grads = tape.backward(root);

    let mut work = store.clone();
    let mut diff_sq = 0.0;
    let mut a_sq = 0.0;
    let mut n_sq = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut checked = 0;

    for &id in ids {
        let len = store.get(id).len();
        let analytic = grads.param(id).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; len]);
        let step = match coverage {
            Coverage::All => 1,
            Coverage::AtMost(k) => len.div_ceil(k.max(1)).max(1),
        };
        for i in (0..len).step_by(step) {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let (t_plus, r_plus) = loss(&work);
            let f_plus = t_plus.value(r_plus).scalar_value();
            work.get_mut(id).data_mut()[i] = orig - eps;
            let (t_minus, r_minus) = loss(&work);
            let f_minus = t_minus.value(r_minus).scalar_value();
            work.get_mut(id).data_mut()[i] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[i];
            diff_sq += (a - numeric).powi(2);
            a_sq += a * a;
            n_sq += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
            checked += 1;
        }
    }

    let denom = a_sq.sqrt().max(n_sq.sqrt()).max(1e-8);
    GradCheckReport {
        rel_error: diff_sq.sqrt() / denom,
        max_abs_error: max_abs,
        checked,
        analytic_norm: a_sq.sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerNorm, Linear};
    use crate::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        crate::nn::uniform(rng, shape, 1.0)
    }

    #[test]
    fn every_primitive_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::new();
        let x = store.add("x", random_tensor(&mut rng, &[3, 4]));
        let y = store.add("y", random_tensor(&mut rng, &[3, 4]));
        let s = store.add("s", random_tensor(&mut rng, &[4]));
        let img = store.add("img", random_tensor(&mut rng, &[2, 5, 5]));
        let cw = store.add("cw", random_tensor(&mut rng, &[3, 2, 3, 3]));
        let cb = store.add("cb", random_tensor(&mut rng, &[3]));
        let chs = store.add("chs", random_tensor(&mut rng, &[3]));
        let ln = LayerNorm::new(&mut store, "ln", 4);
        store.get_mut(ln.gamma).data_mut().copy_from_slice(&[0.5, 1.5, -1.0, 2.0]);
        let lin = Linear::new(&mut store, "lin", 4, 5, &mut rng);
        let ids: Vec<ParamId> = store.ids().collect();

        let report = check(&store, &ids, Coverage::All, 1e-6, |st| {
            let mut t = Tape::new();
            let xv = t.param(st, x);
            let yv = t.param(st, y);
            let sv = t.param(st, s);
            let a = t.mul(xv, yv);
            let b = t.sub(a, xv);
            let c = t.mul_row_broadcast(b, sv);
            let d = ln.forward(&mut t, st, c);
            let e = lin.forward(&mut t, st, d);
            let f = t.sigmoid(e);
            let g = t.softmax_rows(f);
            let yt = t.transpose(yv);
            let h = t.matmul(xv, yt);
            let h2 = t.col_max(h);
            let h3 = t.col_mean(xv);
            let h4 = t.slice_cols(g, 1, 3);
            let h5 = t.slice_rows(h4, 1, 2);
            let h6 = t.concat_cols(&[h5, h5]);
            let h7 = t.concat_rows(&[h3, h3]);
            let iv = t.param(st, img);
            let wv = t.param(st, cw);
            let bv = t.param(st, cb);
            let conv = t.conv2d(iv, wv, bv, 2, 1);
            let conv = t.relu(conv);
            let chv = t.param(st, chs);
            let conv = t.channel_scale(conv, chv);
            let pooled = t.global_avg_pool(conv);
            let ce = t.cross_entropy(pooled, 1);
            let bce = t.bce_with_logits(h2, &[1.0, 0.0, 1.0]);
            let s6 = t.sum_all(h6);
            let s7 = t.col_sum(h7);
            let s7 = t.sum_all(s7);
            let s7 = t.scale(s7, 0.3);
            let total = t.add(ce, bce);
            let total = t.add(total, s6);
            let total = t.add(total, s7);
            (t, total)
        });
        assert!(report.passes(1e-6), "{report:?}");
        assert!(report.checked > 100);
    }
}
