//! Finite-difference check of the full joint objective.

use rand::seq::index::sample;
use rand::Rng as _;

use super::{Batch, Graph, Model, Outputs, Variant, LAYERS};
use crate::error::{Error, Result};
use crate::objectives::{total_loss, LossWeights};
use crate::rng::{self, Purpose, Rng};
use crate::tags::MAX_TAGS;
use crate::tensor::gradcheck::{CheckReport, DEFAULT_STEP};
use crate::tensor::{Mode, Tensor, Var};

#[derive(Clone, Debug)]
pub struct ModelCheckConfig {
    pub variant: Variant,
    pub seed: u64,
    pub batch: usize,
    /// Entries sampled from every trainable tensor.
    pub per_tensor: usize,
    pub step: f64,
    pub weights: LossWeights,
}

impl ModelCheckConfig {
    pub fn new(variant: Variant, seed: u64) -> Self {
        Self { variant, seed, batch: 4, per_tensor: 5, step: DEFAULT_STEP, weights: LossWeights::default() }
    }
}

#[derive(Clone, Debug)]
pub struct ModelCheck {
    pub overall: CheckReport,
    /// One report per parameter tensor, in store order.
    pub tensors: Vec<CheckReport>,
    /// Largest |gradient| of each invariant parameter tensor.
    pub invariant: Vec<(String, f64)>,
}

impl ModelCheck {
    pub fn worst(&self) -> &CheckReport {
        self.tensors.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).expect("at least one tensor")
    }

    pub fn largest_invariant_gradient(&self) -> f64 {
        self.invariant.iter().fold(0.0, |m, (_, g)| m.max(*g))
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.overall.max_rel_error < tolerance && self.largest_invariant_gradient() <= INVARIANT_TOLERANCE
    }
}

/// A random batch with 1 to 10 valid tags per example.
pub fn random_batch(variant: Variant, n: usize, seed: u64) -> Batch<f64> {
    let mut r = rng::stream(seed, Purpose::GradCheck, 0);
    let patches = Tensor::from_fn(vec![n, 1, 96, 96], |_| r.gen_range(0.0..1.0));
    let tags = Tensor::from_fn(vec![n, MAX_TAGS, variant.word_dim], |_| r.gen_range(-1.0..1.0));
    let mask: Vec<bool> = (0..n)
        .flat_map(|i| {
            let valid = 1 + (i * 3) % MAX_TAGS;
            (0..MAX_TAGS).map(move |s| s < valid)
        })
        .collect();
    let mut tags = tags;
    let width = variant.word_dim;
    for (slot, &m) in mask.iter().enumerate() {
        if !m {
            tags.data_mut()[slot * width..(slot + 1) * width].fill(0.0);
        }
    }
    Batch { patches, tags, mask }
}

/// Parameters whose gradient is identically zero: biases feeding a
/// train-mode batch norm and attention key biases (softmax shift).
pub fn is_invariant(name: &str) -> bool {
    let bias_before_norm = (name.starts_with("enc.conv") || name.starts_with("dec.convt")) && name.ends_with(".bias");
    let key_bias = name.starts_with("att.head") && name.ends_with(".k.bias");
    bias_before_norm || key_bias
}

/// Largest |gradient| tolerated for an invariant parameter.
pub const INVARIANT_TOLERANCE: f64 = 1e-8;

/// Largest relative error a passing check may show.
pub const RELATIVE_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    /// Encoder block `i`; `LAYERS` stands for the final layer norm.
    Encoder(usize),
    Decoder,
    Heads,
}

impl Stage {
    fn of(name: &str) -> Self {
        if let Some(rest) = name.strip_prefix("enc.") {
            let block = rest.strip_prefix("conv").or_else(|| rest.strip_prefix("bn"));
            let layer = block.and_then(|b| b.split('.').next()).and_then(|d| d.parse().ok());
            Stage::Encoder(layer.unwrap_or(LAYERS))
        } else if name.starts_with("dec.") {
            Stage::Decoder
        } else {
            Stage::Heads
        }
    }
}

/// Values cached from the unperturbed pass. A perturbed parameter leaves
/// every activation and the dropout stream before its own block unchanged,
/// so evaluations restart there.
struct Cache {
    /// Input of each encoder block, then the input of the layer norm.
    enc_inputs: Vec<Tensor<f64>>,
    enc_rngs: Vec<Rng>,
    /// Relus recorded before each encoder block and the layer norm.
    enc_relus: Vec<usize>,
    /// Relus recorded before the projection and attention heads.
    head_relus: usize,
    z_a: Tensor<f64>,
    /// Decoder output before the sigmoid.
    reconstruction: Tensor<f64>,
    after_encoder: Rng,
    after_decoder: Rng,
    patterns: Vec<Vec<u64>>,
}

type Gradients = Vec<(usize, Tensor<f64>)>;

struct Objective<'a> {
    cfg: &'a ModelCheckConfig,
    batch: Batch<f64>,
    dropout: Rng,
}

impl Objective<'_> {
    fn loss(&self, g: &mut Graph<f64>, logits: Var, phi_a: Var, phi_w: Var) -> Result<crate::objectives::LossVars> {
        let out = Outputs { z_a: phi_a, reconstruction_logits: logits, reconstruction: logits, phi_a, phi_w };
        total_loss(&mut g.tape, &self.batch, &out, &self.cfg.weights)
    }

    /// Loss, gradients by parameter id, and the cache for staged evaluations.
    fn full(&self, model: &mut Model<f64>) -> Result<(f64, Gradients, Cache)> {
        let mut g = Graph::new(Mode::Train, self.dropout.clone());
        let mut h = g.tape.constant(self.batch.patches.clone())?;
        let mut enc_inputs = Vec::with_capacity(LAYERS + 1);
        let mut enc_rngs = Vec::with_capacity(LAYERS + 1);
        let mut enc_relus = Vec::with_capacity(LAYERS + 1);
        for i in 0..=LAYERS {
            enc_inputs.push(g.tape.value(h).clone());
            enc_rngs.push(g.rng.clone());
            enc_relus.push(g.tape.relu_patterns().len());
            if i < LAYERS {
                h = model.encode_layer(&mut g, h, i)?;
            }
        }
        let z_a = model.encode_norm(&mut g, h)?;
        let after_encoder = g.rng.clone();
        let reconstruction = model.decode_logits(&mut g, z_a)?;
        let after_decoder = g.rng.clone();
        let head_relus = g.tape.relu_patterns().len();
        let phi_a = model.project(&mut g, z_a)?;
        let phi_w = model.attend(&mut g, &self.batch.tags, &self.batch.mask)?;
        let loss = self.loss(&mut g, reconstruction, phi_a, phi_w)?;
        let cache = Cache {
            enc_inputs,
            enc_rngs,
            enc_relus,
            head_relus,
            z_a: g.tape.value(z_a).clone(),
            reconstruction: g.tape.value(reconstruction).clone(),
            after_encoder,
            after_decoder,
            patterns: g.tape.relu_patterns(),
        };
        let grads = g.gradients(loss.total)?;
        Ok((g.tape.value(loss.total).item(), grads, cache))
    }

    /// Loss on the linear piece of the unperturbed pass: every relu replays
    /// its cached mask, so the difference quotient converges to exactly the
    /// derivative back-propagation computes, even across a kink.
    fn value(&self, model: &mut Model<f64>, stage: Stage, cache: &Cache) -> Result<f64> {
        let (rng, relus_before) = match stage {
            Stage::Encoder(i) => (&cache.enc_rngs[i], cache.enc_relus[i]),
            Stage::Decoder => (&cache.after_encoder, cache.enc_relus[LAYERS]),
            Stage::Heads => (&cache.after_decoder, cache.head_relus),
        };
        let mut g = Graph::new(Mode::Train, rng.clone());
        g.tape.freeze_relus(cache.patterns[relus_before..].to_vec());
        let z_a = match stage {
            Stage::Encoder(start) => {
                let mut h = g.tape.constant(cache.enc_inputs[start].clone())?;
                for i in start..LAYERS {
                    h = model.encode_layer(&mut g, h, i)?;
                }
                model.encode_norm(&mut g, h)?
            }
            _ => g.tape.constant(cache.z_a.clone())?,
        };
        let reconstruction = match stage {
            Stage::Heads => g.tape.constant(cache.reconstruction.clone())?,
            _ => model.decode_logits(&mut g, z_a)?,
        };
        let phi_a = model.project(&mut g, z_a)?;
        let phi_w = model.attend(&mut g, &self.batch.tags, &self.batch.mask)?;
        let loss = self.loss(&mut g, reconstruction, phi_a, phi_w)?;
        Ok(g.tape.value(loss.total).item())
    }
}

/// Compares back-propagated gradients of the 64-bit objective against central
/// differences. Train mode, with the same dropout masks in every evaluation.
/// Invariant parameters are checked separately for a vanishing gradient,
/// since their finite differences are pure rounding noise.
pub fn check_model(cfg: &ModelCheckConfig) -> Result<ModelCheck> {
    let mut model: Model<f64> = Model::new(cfg.variant, cfg.seed)?.cast();
    let objective = Objective {
        cfg,
        batch: random_batch(cfg.variant, cfg.batch, cfg.seed),
        dropout: rng::stream(cfg.seed, Purpose::GradCheck, 1),
    };
    let (base, grads, cache) = objective.full(&mut model)?;
    let stages = (0..=LAYERS).map(Stage::Encoder).chain([Stage::Decoder, Stage::Heads]);
    for stage in stages {
        let v = objective.value(&mut model, stage, &cache)?;
        if v != base {
            return Err(Error::invalid(format!("staged loss {v} differs from the full pass {base}")));
        }
    }

    let mut pick = rng::stream(cfg.seed, Purpose::GradCheck, 2);
    let mut overall = CheckReport::new("model");
    let mut tensors = Vec::new();
    let mut invariant = Vec::new();
    for (id, grad) in grads {
        let name = model.params.by_id(id).name.clone();
        if is_invariant(&name) {
            let largest = grad.data().iter().fold(0.0f64, |m, g| m.max(g.abs()));
            invariant.push((name, largest));
            continue;
        }
        let stage = Stage::of(&name);
        let mut report = CheckReport::new(name);
        for idx in sample(&mut pick, grad.numel(), cfg.per_tensor.min(grad.numel())).into_iter() {
            let original = model.params.by_id(id).value.data()[idx];
            model.params.by_id_mut(id).value.data_mut()[idx] = original + cfg.step;
            let plus = objective.value(&mut model, stage, &cache)?;
            model.params.by_id_mut(id).value.data_mut()[idx] = original - cfg.step;
            let minus = objective.value(&mut model, stage, &cache)?;
            model.params.by_id_mut(id).value.data_mut()[idx] = original;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            report.record(grad.data()[idx], numeric);
            overall.record(grad.data()[idx], numeric);
        }
        tensors.push(report);
    }
    Ok(ModelCheck { overall, tensors, invariant })
}
