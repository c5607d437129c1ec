use std::collections::HashMap;

use crate::params::{GradBuffer, ParamId, ParamStore};
use crate::tensor::{matmul_at_into, matmul_bt_into};
use crate::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    MulRowBroadcast(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    SliceRows {
        src: Var,
        start: usize,
    },
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    ColMax {
        src: Var,
        argmax: Vec<usize>,
    },
    ColMean(Var),
    ColSum(Var),
    SumAll(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool(Var),
    ChannelScale(Var, Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        target: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records one forward pass for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Brings a stored parameter onto the tape; repeated calls for the same
    /// id return the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    /// `x[m×n] + b[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let (m, n) = self.value(x).dims2();
        assert_eq!(self.value(b).len(), n, "bias length");
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for r in 0..m {
            for (o, bv) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRowBias(x, b))
    }

    /// `x[m×n] ⊙ s[n]` broadcast over rows.
    pub fn mul_row_broadcast(&mut self, x: Var, s: Var) -> Var {
        let (m, n) = self.value(x).dims2();
        assert_eq!(self.value(s).len(), n, "broadcast length");
        let mut out = self.value(x).clone();
        let sv = self.value(s).data();
        for r in 0..m {
            for (o, s) in out.data_mut()[r * n..(r + 1) * n].iter_mut().zip(sv) {
                *o *= s;
            }
        }
        self.push(out, Op::MulRowBroadcast(x, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let mut out = self.value(a).clone().reshape([m, n]);
        for r in 0..m {
            softmax_in_place(&mut out.data_mut()[r * n..(r + 1) * n]);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Layer normalization of every row, biased variance, `eps` inside the
    /// square root.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (m, n) = self.value(x).dims2();
        assert_eq!(self.value(gamma).len(), n);
        assert_eq!(self.value(beta).len(), n);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        self.push(
            Tensor::new([m, n], out),
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Var {
        let out = self.value(a).clone().reshape(shape);
        self.push(out, Op::Reshape(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(a).dims2();
        assert!(start + len <= m, "row slice out of range");
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        self.push(Tensor::new([len, n], data), Op::SliceRows { src: a, start })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.value(a).dims2();
        assert!(start + len <= n, "column slice out of range");
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        self.push(Tensor::new([m, len], data), Op::SliceCols { src: a, start })
    }

    /// Stacks matrices (or `[n]` vectors as single rows) vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            assert_eq!(c, n, "concat_rows width mismatch");
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::new([rows, n], data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.value(p).dims2();
                assert_eq!(r, m, "concat_cols height mismatch");
                c
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..m {
                data[r * n + offset..r * n + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        self.push(Tensor::new([m, n], data), Op::ConcatCols(parts.to_vec()))
    }

    /// Column-wise maximum `[m×n] → [1×n]`; ties resolve to the lowest row.
    pub fn col_max(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let src = self.value(a).data();
        let mut out = vec![f64::NEG_INFINITY; n];
        let mut argmax = vec![0; n];
        for r in 0..m {
            for j in 0..n {
                if src[r * n + j] > out[j] {
                    out[j] = src[r * n + j];
                    argmax[j] = r;
                }
            }
        }
        self.push(Tensor::row(out), Op::ColMax { src: a, argmax })
    }

    /// Column-wise mean `[m×n] → [1×n]`. Each column is summed in sorted
    /// order, so the result is bitwise independent of the row order.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let out = sorted_col_sums(self.value(a).data(), m, n)
            .into_iter()
            .map(|s| s / m as f64)
            .collect();
        self.push(Tensor::row(out), Op::ColMean(a))
    }

    pub fn col_sum(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let out = col_sums(self.value(a).data(), m, n);
        self.push(Tensor::row(out), Op::ColSum(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// 2-D convolution of one `C×H×W` map with `O×C×k×k` weights, zero
    /// padding. Output side is `(H + 2·pad − k) / stride + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = self.value(x).dims3();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be O×C×k×k");
        let (o, wc, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(wc, c, "conv input channels {c} vs weight {wc}");
        assert_eq!(ws[3], k);
        assert_eq!(self.value(b).len(), o);
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv input smaller than kernel");
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; o * oh * ow];
        for oc in 0..o {
            let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = bv[oc]);
            for ic in 0..c {
                let xin = &xv[ic * h * wd..(ic + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wgt = wv[((oc * c + ic) * k + ky) * k + kx];
                        let (ox0, ox1) = valid_range(ow, wd, stride, kx, pad);
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            for ox in ox0..ox1 {
                                orow[ox] += wgt * xrow[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new([o, oh, ow], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    /// Spatial mean `C×H×W → [1×C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let hw = (h * w) as f64;
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect::<Vec<_>>();
        debug_assert_eq!(out.len(), c);
        self.push(Tensor::row(out), Op::GlobalAvgPool(x))
    }

    /// Scales every channel of a `C×H×W` map by the matching entry of `s`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        assert_eq!(self.value(s).len(), c, "channel scale length");
        let sv = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        for (plane, s) in out.data_mut().chunks_mut(h * w).zip(sv) {
            plane.iter_mut().for_each(|v| *v *= s);
        }
        self.push(out, Op::ChannelScale(x, s))
    }

    /// Softmax cross-entropy of one logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let z = self.value(logits).data();
        assert!(target < z.len(), "target {target} out of range {}", z.len());
        let mut probs = z.to_vec();
        softmax_in_place(&mut probs);
        let loss = log_sum_exp(z) - z[target];
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
        )
    }

    /// Mean element-wise binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[f64]) -> Var {
        let z = self.value(logits).data();
        assert_eq!(z.len(), target.len());
        let loss = z
            .iter()
            .zip(target)
            .map(|(&x, &t)| softplus(x) - t * x)
            .sum::<f64>()
            / z.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                target: target.to_vec(),
            },
        )
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::filled(self.nodes[root.0].value.shape().to_vec(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Gradients { grads, params }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, zip_map(g, val(*b), |x, y| x * y));
                acc(grads, *b, zip_map(g, val(*a), |x, y| x * y));
            }
            Op::Scale(a, s) => acc(grads, *a, g.map(|x| x * s)),
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let (_, n) = val(*b).dims2();
                let mut ga = vec![0.0; m * k];
                matmul_bt_into(g.data(), val(*b).data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                matmul_at_into(val(*a).data(), g.data(), &mut gb, k, m, n);
                acc(grads, *a, Tensor::new(val(*a).shape().to_vec(), ga));
                acc(grads, *b, Tensor::new(val(*b).shape().to_vec(), gb));
            }
            Op::Transpose(a) => {
                let gt = g.transpose().reshape(val(*a).shape().to_vec());
                acc(grads, *a, gt);
            }
            Op::AddRowBias(x, b) => {
                let (m, n) = g.dims2();
                acc(grads, *x, g.clone());
                let gb = col_sums(g.data(), m, n);
                acc(grads, *b, Tensor::new(val(*b).shape().to_vec(), gb));
            }
            Op::MulRowBroadcast(x, s) => {
                let (m, n) = g.dims2();
                let sv = val(*s).data();
                let xv = val(*x).data();
                let mut gx = g.clone();
                let mut gs = vec![0.0; n];
                for r in 0..m {
                    for j in 0..n {
                        gx.data_mut()[r * n + j] *= sv[j];
                        gs[j] += g.data()[r * n + j] * xv[r * n + j];
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *s, Tensor::new(val(*s).shape().to_vec(), gs));
            }
            Op::Relu(a) => {
                let out = &node.value;
                acc(
                    grads,
                    *a,
                    zip_map(g, out, |gv, y| if y > 0.0 { gv } else { 0.0 }),
                );
            }
            Op::Sigmoid(a) => {
                acc(grads, *a, zip_map(g, &node.value, |gv, y| gv * y * (1.0 - y)));
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = node.value.dims2();
                let y = node.value.data();
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        ga[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *a, Tensor::new(val(*a).shape().to_vec(), ga));
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = node.value.dims2();
                let gv = val(*gamma).data();
                let mut gx = vec![0.0; m * n];
                let mut ggamma = vec![0.0; n];
                let mut gbeta = vec![0.0; n];
                for r in 0..m {
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut sum_gh = 0.0;
                    let mut sum_gh_h = 0.0;
                    for j in 0..n {
                        let gh = gr[j] * gv[j];
                        sum_gh += gh;
                        sum_gh_h += gh * hr[j];
                        ggamma[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                    }
                    let nf = n as f64;
                    for j in 0..n {
                        let gh = gr[j] * gv[j];
                        gx[r * n + j] = inv_std[r] / nf * (nf * gh - sum_gh - hr[j] * sum_gh_h);
                    }
                }
                acc(grads, *x, Tensor::new(val(*x).shape().to_vec(), gx));
                acc(grads, *gamma, Tensor::new(val(*gamma).shape().to_vec(), ggamma));
                acc(grads, *beta, Tensor::new(val(*beta).shape().to_vec(), gbeta));
            }
            Op::Reshape(a) => acc(grads, *a, g.clone().reshape(val(*a).shape().to_vec())),
            Op::SliceRows { src, start } => {
                let (_, n) = val(*src).dims2();
                let mut gs = Tensor::zeros(val(*src).shape().to_vec());
                gs.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                acc(grads, *src, gs);
            }
            Op::SliceCols { src, start } => {
                let (m, n) = val(*src).dims2();
                let (_, len) = g.dims2();
                let mut gs = Tensor::zeros(val(*src).shape().to_vec());
                for r in 0..m {
                    gs.data_mut()[r * n + start..r * n + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                acc(grads, *src, gs);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    let gp = g.data()[offset..offset + len].to_vec();
                    acc(grads, p, Tensor::new(val(p).shape().to_vec(), gp));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = g.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = val(p).dims2();
                    let mut gp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        gp.extend_from_slice(&g.data()[r * n + offset..r * n + offset + w]);
                    }
                    acc(grads, p, Tensor::new(val(p).shape().to_vec(), gp));
                    offset += w;
                }
            }
            Op::ColMax { src, argmax } => {
                let (_, n) = val(*src).dims2();
                let mut gs = Tensor::zeros(val(*src).shape().to_vec());
                for (j, &r) in argmax.iter().enumerate() {
                    gs.data_mut()[r * n + j] += g.data()[j];
                }
                acc(grads, *src, gs);
            }
            Op::ColMean(src) | Op::ColSum(src) => {
                let (m, n) = val(*src).dims2();
                let s = if matches!(node.op, Op::ColMean(_)) {
                    1.0 / m as f64
                } else {
                    1.0
                };
                let mut gs = vec![0.0; m * n];
                for r in 0..m {
                    for j in 0..n {
                        gs[r * n + j] = g.data()[j] * s;
                    }
                }
                acc(grads, *src, Tensor::new(val(*src).shape().to_vec(), gs));
            }
            Op::SumAll(a) => {
                let s = g.scalar_value();
                acc(grads, *a, Tensor::filled(val(*a).shape().to_vec(), s));
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv2d_backward(g, *x, *w, *b, *stride, *pad, grads),
            Op::GlobalAvgPool(x) => {
                let (c, h, w) = val(*x).dims3();
                let hw = h * w;
                let mut gx = vec![0.0; c * hw];
                for ch in 0..c {
                    let v = g.data()[ch] / hw as f64;
                    gx[ch * hw..(ch + 1) * hw].iter_mut().for_each(|x| *x = v);
                }
                acc(grads, *x, Tensor::new([c, h, w], gx));
            }
            Op::ChannelScale(x, s) => {
                let (c, h, w) = val(*x).dims3();
                let hw = h * w;
                let sv = val(*s).data();
                let xv = val(*x).data();
                let mut gx = g.clone();
                let mut gs = vec![0.0; c];
                for ch in 0..c {
                    for p in ch * hw..(ch + 1) * hw {
                        gs[ch] += g.data()[p] * xv[p];
                        gx.data_mut()[p] *= sv[ch];
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *s, Tensor::new(val(*s).shape().to_vec(), gs));
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let s = g.scalar_value();
                let mut gl = probs.clone();
                gl[*target] -= 1.0;
                gl.iter_mut().for_each(|v| *v *= s);
                acc(grads, *logits, Tensor::new(val(*logits).shape().to_vec(), gl));
            }
            Op::BceWithLogits { logits, target } => {
                let s = g.scalar_value() / target.len() as f64;
                let gl = val(*logits)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&x, &t)| (sigmoid(x) - t) * s)
                    .collect();
                acc(grads, *logits, Tensor::new(val(*logits).shape().to_vec(), gl));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        g: &Tensor,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Tensor>],
    ) {
        let xt = &self.nodes[x.0].value;
        let wt = &self.nodes[w.0].value;
        let (c, h, wd) = xt.dims3();
        let ws = wt.shape();
        let (o, k) = (ws[0], ws[2]);
        let (_, oh, ow) = g.dims3();
        let xv = xt.data();
        let wv = wt.data();
        let gv = g.data();
        let mut gx = vec![0.0; c * h * wd];
        let mut gw = vec![0.0; wv.len()];
        let mut gb = vec![0.0; o];
        for oc in 0..o {
            let gplane = &gv[oc * oh * ow..(oc + 1) * oh * ow];
            gb[oc] = gplane.iter().sum();
            for ic in 0..c {
                let xin = &xv[ic * h * wd..(ic + 1) * h * wd];
                let gxin = &mut gx[ic * h * wd..(ic + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((oc * c + ic) * k + ky) * k + kx;
                        let wgt = wv[widx];
                        let (ox0, ox1) = valid_range(ow, wd, stride, kx, pad);
                        let mut acc_w = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = iy as usize * wd;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            for ox in ox0..ox1 {
                                let ix = base + ox * stride + kx - pad;
                                acc_w += grow[ox] * xin[ix];
                                gxin[ix] += grow[ox] * wgt;
                            }
                        }
                        gw[widx] += acc_w;
                    }
                }
            }
        }
        acc(grads, x, Tensor::new([c, h, wd], gx));
        acc(grads, w, Tensor::new(ws.to_vec(), gw));
        acc(grads, b, Tensor::new(self.nodes[b.0].value.shape().to_vec(), gb));
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to any recorded value, if it influenced the root.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// Adds every parameter gradient into `buf`.
    pub fn accumulate_into(&self, buf: &mut GradBuffer) {
        let mut params = self.params.clone();
        params.sort_by_key(|(id, _)| *id);
        for (id, v) in params {
            if let Some(g) = self.wrt(v) {
                buf.accumulate(id, g);
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(
        a.shape(),
        b.shape(),
        "elementwise shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn col_sums(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for r in 0..m {
        for (o, v) in out.iter_mut().zip(&data[r * n..(r + 1) * n]) {
            *o += v;
        }
    }
    out
}

fn sorted_col_sums(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut column = vec![0.0; m];
    (0..n)
        .map(|j| {
            for (r, c) in column.iter_mut().enumerate() {
                *c = data[r * n + j];
            }
            column.sort_by(f64::total_cmp);
            column.iter().sum()
        })
        .collect()
}

/// Output columns `ox` for which `ox·stride + kx − pad` lands inside `[0, w)`.
fn valid_range(ow: usize, w: usize, stride: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    // ox·stride + kx − pad ≤ w − 1
    let hi = if w + pad > kx {
        ((w - 1 + pad - kx) / stride + 1).min(ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_valid_range_matches_bruteforce() {
        for w in 1..9 {
            for stride in 1..3 {
                for pad in 0..2 {
                    for k in 1..4 {
                        if w + 2 * pad < k {
                            continue;
                        }
                        let ow = (w + 2 * pad - k) / stride + 1;
                        for kx in 0..k {
                            let (lo, hi) = valid_range(ow, w, stride, kx, pad);
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let inside = ix >= 0 && ix < w as isize;
                                assert_eq!(inside, ox >= lo && ox < hi, "w{w} s{stride} p{pad} k{k} kx{kx} ox{ox}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 3, 3], (1..=9).map(f64::from).collect()));
        let mut wk = vec![0.0; 9];
        wk[4] = 1.0;
        let w = tape.constant(Tensor::new([1, 1, 3, 3], wk));
        let b = tape.constant(Tensor::zeros([1]));
        let y = tape.conv2d(x, w, b, 1, 1);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let y2 = tape.conv2d(x, w, b, 2, 1);
        assert_eq!(tape.value(y2).data(), &[1.0, 3.0, 7.0, 9.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_log_n() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::row(vec![0.3; 4]));
        let l = tape.cross_entropy(z, 2);
        assert!((tape.value(l).scalar_value() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn param_nodes_are_shared() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::row(vec![2.0]));
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        let y = tape.mul(a, b);
        let s = tape.sum_all(y);
        let grads = tape.backward(s);
        assert_eq!(grads.param(id).unwrap().data(), &[4.0]);
    }
}
