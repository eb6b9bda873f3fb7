//! One-hidden-layer MLP trained with softmax cross-entropy and plain SGD.

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::ProbeConfig;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose, Rng};
use crate::tensor::{gemm, MatRef};

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    inputs: usize,
    hidden: usize,
    classes: usize,
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
    b2: Vec<f32>,
}

fn uniform(rng: &mut Rng, n: usize, bound: f64) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect()
}

impl Mlp {
    /// He-uniform hidden layer, Glorot-uniform output layer, zero biases.
    pub fn new(inputs: usize, hidden: usize, classes: usize, rng: &mut Rng) -> Self {
        let w1 = uniform(rng, inputs * hidden, (6.0 / inputs as f64).sqrt());
        let w2 = uniform(rng, hidden * classes, (6.0 / (hidden + classes) as f64).sqrt());
        Self { inputs, hidden, classes, w1, b1: vec![0.0; hidden], w2, b2: vec![0.0; classes] }
    }

    /// Hidden activations and logits for `n` row-major inputs.
    fn forward(&self, x: &[f32], n: usize) -> (Vec<f32>, Vec<f32>) {
        let mut h = vec![0.0; n * self.hidden];
        gemm(1.0, MatRef::new(x, n, self.inputs), MatRef::new(&self.w1, self.inputs, self.hidden), 0.0, &mut h);
        for row in h.chunks_mut(self.hidden) {
            row.iter_mut().zip(&self.b1).for_each(|(v, b)| *v = (*v + b).max(0.0));
        }
        let mut logits = vec![0.0; n * self.classes];
        gemm(1.0, MatRef::new(&h, n, self.hidden), MatRef::new(&self.w2, self.hidden, self.classes), 0.0, &mut logits);
        for row in logits.chunks_mut(self.classes) {
            row.iter_mut().zip(&self.b2).for_each(|(v, b)| *v += b);
        }
        (h, logits)
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Vec<usize> {
        let flat: Vec<f32> = x.iter().flatten().map(|&v| v as f32).collect();
        let (_, logits) = self.forward(&flat, x.len());
        logits
            .chunks(self.classes)
            .map(|row| (0..self.classes).fold(0, |best, c| if row[c] > row[best] { c } else { best }))
            .collect()
    }

    /// One SGD step on a minibatch; returns its mean cross-entropy.
    fn step(&mut self, x: &[f32], y: &[usize], lr: f32) -> f64 {
        let n = y.len();
        let (h, logits) = self.forward(x, n);
        let mut dlogits = vec![0.0f32; n * self.classes];
        let mut loss = 0.0;
        for ((row, d), &label) in logits.chunks(self.classes).zip(dlogits.chunks_mut(self.classes)).zip(y) {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            loss += z.ln() + max - row[label] as f64;
            for (c, slot) in d.iter_mut().enumerate() {
                let p = (row[c] as f64 - max).exp() / z;
                *slot = ((p - if c == label { 1.0 } else { 0.0 }) / n as f64) as f32;
            }
        }
        let dl = MatRef::new(&dlogits, n, self.classes);
        let mut dw2 = vec![0.0; self.hidden * self.classes];
        gemm(1.0, MatRef::new(&h, n, self.hidden).t(), dl, 0.0, &mut dw2);
        let mut dh = vec![0.0; n * self.hidden];
        gemm(1.0, dl, MatRef::new(&self.w2, self.hidden, self.classes).t(), 0.0, &mut dh);
        dh.iter_mut().zip(&h).for_each(|(g, &a)| if a <= 0.0 { *g = 0.0 });
        let mut dw1 = vec![0.0; self.inputs * self.hidden];
        gemm(1.0, MatRef::new(x, n, self.inputs).t(), MatRef::new(&dh, n, self.hidden), 0.0, &mut dw1);

        let column_sums = |m: &[f32], cols: usize| -> Vec<f32> {
            let mut s = vec![0.0; cols];
            m.chunks(cols).for_each(|r| s.iter_mut().zip(r).for_each(|(a, v)| *a += v));
            s
        };
        let db1 = column_sums(&dh, self.hidden);
        let db2 = column_sums(&dlogits, self.classes);
        for (p, g) in [(&mut self.w1, &dw1), (&mut self.b1, &db1), (&mut self.w2, &dw2), (&mut self.b2, &db2)] {
            p.iter_mut().zip(g).for_each(|(w, d)| *w -= lr * d);
        }
        loss / n as f64
    }
}

/// Trains a probe on standardized features. `seed` picks the run and `part`
/// the fold, so every (run, fold) pair has its own initialization and order.
pub fn train_probe(x: &[Vec<f64>], y: &[usize], classes: usize, config: &ProbeConfig, seed: u64, part: u64) -> Result<Mlp> {
    config.validate()?;
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::invalid("probe needs matching, non-empty features and labels"));
    }
    if classes < 2 || y.iter().any(|&c| c >= classes) {
        return Err(Error::invalid(format!("labels must lie in [0, {classes}) with at least two classes")));
    }
    let dim = x[0].len();
    if x.iter().any(|v| v.len() != dim) {
        return Err(Error::shape("probe features differ in length"));
    }
    let mut rng = rng::stream(seed, Purpose::Probe, part);
    let mut mlp = Mlp::new(dim, config.hidden, classes, &mut rng);
    let mut order: Vec<usize> = (0..x.len()).collect();
    let (mut bx, mut by) = (Vec::new(), Vec::new());
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.extend(x[i].iter().map(|&v| v as f32));
                by.push(y[i]);
            }
            let loss = mlp.step(&bx, &by, config.learning_rate as f32);
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "probe cross-entropy" });
            }
        }
    }
    Ok(mlp)
}

pub fn accuracy(mlp: &Mlp, x: &[Vec<f64>], y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let hits = mlp.predict(x).iter().zip(y).filter(|(p, t)| p == t).count();
    hits as f64 / y.len() as f64
}
