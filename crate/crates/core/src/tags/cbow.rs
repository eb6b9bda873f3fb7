use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{TagSet, Vocabulary};
use crate::error::{Error, Result};
use crate::format::TensorFile;
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CbowConfig {
    pub dim: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::negatives")]
    pub negatives: usize,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn epochs() -> usize {
        15
    }
    pub fn learning_rate() -> f64 {
        0.025
    }
    pub fn negatives() -> usize {
        5
    }
}

impl CbowConfig {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, epochs: defaults::epochs(), learning_rate: defaults::learning_rate(), negatives: defaults::negatives(), seed }
    }
}

/// Frozen `C × F_w` word-vector table.
#[derive(Clone, Debug, PartialEq)]
pub struct WordTable {
    dim: usize,
    data: Vec<f32>,
}

impl WordTable {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.len() != rows * dim {
            return Err(Error::shape(format!("word table {rows}×{dim} with {} values", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "word table" });
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.rows(), self.dim], self.data.clone()).expect("table shape is consistent")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let [rows, dim] = *t.shape() else {
            return Err(Error::shape(format!("word table must be 2-d, got {:?}", t.shape())));
        };
        Self::new(rows, dim, t.data().to_vec())
    }

    /// Rescales every row to Euclidean norm `√F_w` (unit mean square),
    /// leaving directions and cosines untouched. Zero rows stay zero.
    pub fn with_unit_rms_rows(mut self) -> Self {
        let target = (self.dim as f64).sqrt();
        for row in self.data.chunks_mut(self.dim) {
            let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v = (*v as f64 * target / norm) as f32);
            }
        }
        self
    }

    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        let (x, y) = (self.row(a), self.row(b));
        let dot: f64 = x.iter().zip(y).map(|(&p, &q)| p as f64 * q as f64).sum();
        let nx: f64 = x.iter().map(|&p| (p as f64).powi(2)).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|&p| (p as f64).powi(2)).sum::<f64>().sqrt();
        dot / (nx * ny + 1e-12)
    }

    /// Table plus vocabulary in one tensor file.
    pub fn to_file(&self, vocab: &Vocabulary, config: &CbowConfig) -> Result<TensorFile> {
        let meta = serde_json::json!({ "vocabulary": vocab, "cbow": config });
        let mut f = TensorFile::new("word-table", meta);
        f.push_f32("table", self.to_tensor())?;
        Ok(f)
    }

    pub fn from_file(f: &TensorFile) -> Result<(Self, Vocabulary, CbowConfig)> {
        if f.kind != "word-table" {
            return Err(Error::invalid(format!("expected a word-table file, found {}", f.kind)));
        }
        let table = Self::from_tensor(&f.get_f32("table")?)?;
        let vocab: Vocabulary = serde_json::from_value(f.meta["vocabulary"].clone())?;
        let config: CbowConfig = serde_json::from_value(f.meta["cbow"].clone())?;
        if vocab.len() != table.rows() {
            return Err(Error::ConfigMismatch("word table and vocabulary sizes differ".into()));
        }
        Ok((table, vocab, config))
    }
}

/// Negative-sampling loss for one (context, target) pair and its gradient.
/// `hidden` is the gradient w.r.t. the context mean; each context row
/// receives `hidden / |context|`.
#[derive(Clone, Debug)]
pub struct CbowGrad {
    pub loss: f64,
    pub hidden: Vec<f64>,
    pub outputs: Vec<(usize, Vec<f64>)>,
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn cbow_loss_and_grad(
    input: &[f64],
    output: &[f64],
    dim: usize,
    context: &[usize],
    target: usize,
    negatives: &[usize],
) -> CbowGrad {
    let mut h = vec![0.0; dim];
    for &c in context {
        for (a, b) in h.iter_mut().zip(&input[c * dim..(c + 1) * dim]) {
            *a += b;
        }
    }
    let inv = 1.0 / context.len() as f64;
    h.iter_mut().for_each(|v| *v *= inv);

    let mut loss = 0.0;
    let mut hidden = vec![0.0; dim];
    let mut outputs = Vec::with_capacity(1 + negatives.len());
    for (word, label) in std::iter::once((target, 1.0)).chain(negatives.iter().map(|&n| (n, 0.0))) {
        let u = &output[word * dim..(word + 1) * dim];
        let score: f64 = u.iter().zip(&h).map(|(a, b)| a * b).sum();
        // label 1: −ln σ(s); label 0: −ln σ(−s)
        loss -= if label == 1.0 { log_sigmoid(score) } else { log_sigmoid(-score) };
        let g = sigmoid(score) - label;
        for (acc, &uv) in hidden.iter_mut().zip(u) {
            *acc += g * uv;
        }
        outputs.push((word, h.iter().map(|&hv| g * hv).collect()));
    }
    CbowGrad { loss, hidden, outputs }
}

/// CBOW with negative sampling over unordered tag sets: every tag is a
/// target once per epoch, with all other tags of its document as context.
pub fn train_cbow(documents: &[TagSet], vocab: &Vocabulary, config: &CbowConfig) -> Result<WordTable> {
    if vocab.is_empty() {
        return Err(Error::invalid("vocabulary is empty"));
    }
    if config.dim == 0 || config.epochs == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::invalid("cbow dim, epochs and learning rate must be positive"));
    }
    let dim = config.dim;
    let docs: Vec<Vec<usize>> = documents
        .iter()
        .map(|d| vocab.indices(d))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|d| d.len() >= 2)
        .collect();

    let mut init = rng::stream(config.seed, Purpose::Init, 0);
    let half = 0.5 / dim as f64;
    let mut input: Vec<f64> = (0..vocab.len() * dim).map(|_| init.gen_range(-half..half)).collect();
    let mut output = vec![0.0; vocab.len() * dim];

    let weights: Vec<f64> = vocab.entries().iter().map(|e| (e.df as f64).powf(0.75)).collect();
    let sampler = WeightedIndex::new(&weights).map_err(|e| Error::invalid(format!("unigram table: {e}")))?;

    let pairs_per_epoch: usize = docs.iter().map(Vec::len).sum();
    let total = (pairs_per_epoch * config.epochs).max(1) as f64;
    let mut step = 0usize;
    let mut context = Vec::new();
    let mut negatives = Vec::with_capacity(config.negatives);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.shuffle(&mut rng::stream(config.seed, Purpose::Shuffle, epoch as u64));
        let mut sampling = rng::stream(config.seed, Purpose::Sampling, epoch as u64);
        for &d in &order {
            let doc = &docs[d];
            for (pos, &target) in doc.iter().enumerate() {
                context.clear();
                context.extend(doc.iter().enumerate().filter(|&(i, _)| i != pos).map(|(_, &w)| w));
                negatives.clear();
                for _ in 0..config.negatives {
                    let n = sampler.sample(&mut sampling);
                    if n != target {
                        negatives.push(n);
                    }
                }
                let lr = config.learning_rate * (1.0 - step as f64 / total).max(1e-4);
                let grad = cbow_loss_and_grad(&input, &output, dim, &context, target, &negatives);
                for (w, g) in &grad.outputs {
                    for (p, gv) in output[w * dim..(w + 1) * dim].iter_mut().zip(g) {
                        *p -= lr * gv;
                    }
                }
                let scale = lr / context.len() as f64;
                for &c in &context {
                    for (p, gv) in input[c * dim..(c + 1) * dim].iter_mut().zip(&grad.hidden) {
                        *p -= scale * gv;
                    }
                }
                step += 1;
            }
        }
    }
    // Input plus output vectors: for two-tag documents the input vectors of
    // co-occurring tags never share a target, so alone they stay unrelated.
    WordTable::new(vocab.len(), dim, input.iter().zip(&output).map(|(i, o)| (i + o) as f32).collect())
}
