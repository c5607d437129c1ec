//! End-to-end use of the public API: a two-layer classifier trained with
//! per-sample tapes and Adam.

use mvip_autograd::gradcheck::{check, Coverage};
use mvip_autograd::nn::{LayerNorm, Linear};
use mvip_autograd::optim::{Adam, AdamConfig};
use mvip_autograd::{GradBuffer, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Net {
    l1: Linear,
    norm: LayerNorm,
    l2: Linear,
}

impl Net {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        Self {
            l1: Linear::new(store, "l1", 2, 16, rng),
            norm: LayerNorm::new(store, "ln", 16),
            l2: Linear::new(store, "l2", 16, 2, rng),
        }
    }

    fn loss(&self, tape: &mut Tape, store: &ParamStore, x: &[f64], y: usize) -> Var {
        let xv = tape.constant(Tensor::row(x.to_vec()));
        let h = self.l1.forward(tape, store, xv);
        let h = self.norm.forward(tape, store, h);
        let h = tape.relu(h);
        let z = self.l2.forward(tape, store, h);
        tape.cross_entropy(z, y)
    }
}

fn xor_data(rng: &mut ChaCha8Rng, n: usize) -> Vec<([f64; 2], usize)> {
    (0..n)
        .map(|_| {
            let a: f64 = rng.gen_range(-1.0..1.0);
            let b: f64 = rng.gen_range(-1.0..1.0);
            ([a, b], usize::from((a > 0.0) != (b > 0.0)))
        })
        .collect()
}

fn train(seed: u64) -> (ParamStore, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let net = Net::new(&mut store, &mut rng);
    let data = xor_data(&mut rng, 128);
    let mut adam = Adam::new(AdamConfig::default());
    let mut losses = Vec::new();
    for _ in 0..150 {
        let mut buf = GradBuffer::new(&store);
        let mut total = 0.0;
        for (x, y) in &data {
            let mut tape = Tape::new();
            let l = net.loss(&mut tape, &store, x, *y);
            total += tape.value(l).scalar_value();
            tape.backward(l).accumulate_into(&mut buf);
        }
        buf.scale(1.0 / data.len() as f64);
        adam.step(&mut store, &buf, 0.02, &|_| false);
        losses.push(total / data.len() as f64);
    }
    (store, losses)
}

#[test]
fn learns_xor() {
    let (_, losses) = train(1);
    assert!(losses[0] > 0.5);
    assert!(*losses.last().unwrap() < 0.15, "final loss {}", losses.last().unwrap());
}

#[test]
fn training_is_reproducible() {
    let (a, la) = train(4);
    let (b, lb) = train(4);
    assert_eq!(la, lb);
    assert_eq!(a.flatten(), b.flatten());
}

#[test]
fn composed_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let net = Net::new(&mut store, &mut rng);
    let ids: Vec<_> = store.ids().collect();
    let report = check(&store, &ids, Coverage::All, 1e-6, |s| {
        let mut tape = Tape::new();
        let a = net.loss(&mut tape, s, &[0.3, -0.7], 1);
        let b = net.loss(&mut tape, s, &[-0.2, -0.4], 0);
        let l = tape.add(a, b);
        (tape, l)
    });
    assert!(report.passes(1e-6), "{report:?}");
}
