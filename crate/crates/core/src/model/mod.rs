//! Audio autoencoder, tag self-attention encoder and audio projection head.

pub mod check;
mod variant;

pub use variant::{Aggregation, Variant};

use std::collections::HashMap;

use rand::Rng as _;

use crate::audio::{MEL_BANDS, PATCH_FRAMES};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose, Rng};
use crate::tags::MAX_TAGS;
use crate::tensor::{Float, Mode, ParamStore, Tape, Tensor, Var};

pub const LAYERS: usize = 5;
pub const CHANNELS: usize = 128;
pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PADDING: usize = 1;
pub const AUDIO_DROPOUT: f64 = 0.25;
pub const TAG_DROPOUT: f64 = 0.1;
/// Spatial extent after the encoder: 96 → 48 → 24 → 12 → 6 → 3.
pub const BOTTLENECK: usize = 3;
/// Length of the audio embedding z_a.
pub const EMBED_DIM: usize = CHANNELS * BOTTLENECK * BOTTLENECK;

/// One minibatch of model inputs.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[N, 1, 96, 96]`, values in `[0, 1]`.
    pub patches: Tensor<T>,
    /// `[N, 10, F_w]`, padding rows after valid rows.
    pub tags: Tensor<T>,
    /// `N * 10` validity bits.
    pub mask: Vec<bool>,
}

impl<T: Float> Batch<T> {
    pub fn len(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameters bound onto a tape for one forward/backward pass.
pub struct Graph<T> {
    pub tape: Tape<T>,
    pub mode: Mode,
    bound: HashMap<usize, Var>,
    rng: Rng,
}

impl<T: Float> Graph<T> {
    /// `rng` drives every dropout mask drawn in this pass.
    pub fn new(mode: Mode, rng: Rng) -> Self {
        Self { tape: Tape::new(), mode, bound: HashMap::new(), rng }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, rng::stream(0, Purpose::Dropout, 0))
    }

    fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let p = store.by_id(id);
        let v = if p.trainable { self.tape.param(p.value.clone())? } else { self.tape.constant(p.value.clone())? };
        self.bound.insert(id, v);
        Ok(v)
    }

    fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        self.tape.dropout(x, p, self.mode, &mut self.rng)
    }

    /// Gradients of `loss` for every bound trainable parameter, by store id.
    pub fn gradients(&self, loss: Var) -> Result<Vec<(usize, Tensor<T>)>> {
        let mut grads = self.tape.backward(loss)?;
        let mut ids: Vec<(&usize, &Var)> = self.bound.iter().collect();
        ids.sort_by_key(|(id, _)| **id);
        Ok(ids.into_iter().filter_map(|(&id, &v)| grads.take(v).map(|g| (id, g))).collect())
    }
}

/// Output handles of a full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub z_a: Var,
    /// Decoder output before the sigmoid.
    pub reconstruction_logits: Var,
    pub reconstruction: Var,
    pub phi_a: Var,
    pub phi_w: Var,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub variant: Variant,
    pub params: ParamStore<T>,
}

fn uniform<T: Float>(shape: Vec<usize>, bound: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)))
}

impl Model<f32> {
    pub fn new(variant: Variant, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut index = 0u64;
        let mut add = |params: &mut ParamStore<f32>, name: String, shape: Vec<usize>, fan_in: usize| -> Result<()> {
            let mut r = rng::stream(seed, Purpose::Init, index);
            index += 1;
            params.insert(name, uniform(shape, 1.0 / (fan_in as f64).sqrt(), &mut r), true).map(|_| ())
        };
        let norm = |params: &mut ParamStore<f32>, prefix: &str, c: usize, running: bool| -> Result<()> {
            params.insert(format!("{prefix}.gamma"), Tensor::full(vec![c], 1.0), true)?;
            params.insert(format!("{prefix}.beta"), Tensor::zeros(vec![c]), true)?;
            if running {
                let mut stats = Tensor::zeros(vec![2, c]);
                stats.data_mut()[c..].fill(1.0);
                params.insert(format!("{prefix}.running"), stats, false)?;
            }
            Ok(())
        };

        for i in 0..LAYERS {
            let c_in = if i == 0 { 1 } else { CHANNELS };
            let fan_in = c_in * KERNEL * KERNEL;
            add(&mut params, format!("enc.conv{i}.weight"), vec![CHANNELS, c_in, KERNEL, KERNEL], fan_in)?;
            add(&mut params, format!("enc.conv{i}.bias"), vec![CHANNELS], fan_in)?;
            norm(&mut params, &format!("enc.bn{i}"), CHANNELS, true)?;
        }
        norm(&mut params, "enc.ln", EMBED_DIM, false)?;

        for i in 0..LAYERS {
            let c_out = if i == LAYERS - 1 { 1 } else { CHANNELS };
            // Transposed weights are [C_in, C_out, K, K]; fan-in follows dim 1.
            let fan_in = c_out * KERNEL * KERNEL;
            add(&mut params, format!("dec.convt{i}.weight"), vec![CHANNELS, c_out, KERNEL, KERNEL], fan_in)?;
            add(&mut params, format!("dec.convt{i}.bias"), vec![c_out], fan_in)?;
            norm(&mut params, &format!("dec.bn{i}"), c_out, true)?;
        }

        let fw = variant.word_dim;
        if variant.aggregation == Aggregation::Attention {
            for h in 0..variant.heads {
                for proj in ["q", "k", "v"] {
                    add(&mut params, format!("att.head{h}.{proj}.weight"), vec![fw, fw], fw)?;
                    add(&mut params, format!("att.head{h}.{proj}.bias"), vec![fw], fw)?;
                }
            }
            let width = variant.heads * fw;
            add(&mut params, "att.o.weight".into(), vec![variant.contrastive_dim(), width], width)?;
            add(&mut params, "att.o.bias".into(), vec![variant.contrastive_dim()], width)?;
        }
        norm(&mut params, "att.ln", variant.contrastive_dim(), false)?;

        add(&mut params, "proj.weight".into(), vec![variant.contrastive_dim(), EMBED_DIM], EMBED_DIM)?;
        add(&mut params, "proj.bias".into(), vec![variant.contrastive_dim()], EMBED_DIM)?;
        Ok(Self { variant, params })
    }
}

impl<T: Float> Model<T> {
    pub fn cast<U: Float>(&self) -> Model<U> {
        Model { variant: self.variant, params: self.params.cast() }
    }

    /// Trainable parameters of the audio encoder e_a.
    pub fn encoder_parameter_count(&self) -> usize {
        self.params.trainable_count_with_prefix("enc.")
    }

    /// Trainable parameters of the projection head FNN_c-a.
    pub fn projection_parameter_count(&self) -> usize {
        self.params.trainable_count_with_prefix("proj.")
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    fn check_patches(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != [1, PATCH_FRAMES, MEL_BANDS] {
            return Err(Error::shape(format!("expected [N, 1, {PATCH_FRAMES}, {MEL_BANDS}] patches, got {shape:?}")));
        }
        Ok(())
    }

    /// e_a: five conv/BN/ReLU/dropout blocks, flatten, layer norm.
    pub fn encode(&mut self, g: &mut Graph<T>, patches: Var) -> Result<Var> {
        self.check_patches(g.tape.shape(patches))?;
        let mut h = patches;
        for i in 0..LAYERS {
            h = self.encode_layer(g, h, i)?;
        }
        self.encode_norm(g, h)
    }

    /// Encoder block `i`: conv, batch norm, relu, dropout.
    pub(crate) fn encode_layer(&mut self, g: &mut Graph<T>, h: Var, i: usize) -> Result<Var> {
        let w = g.param(&self.params, &format!("enc.conv{i}.weight"))?;
        let b = g.param(&self.params, &format!("enc.conv{i}.bias"))?;
        let h = g.tape.conv2d(h, w, b, STRIDE, PADDING)?;
        let h = self.batch_norm(g, h, &format!("enc.bn{i}"))?;
        let h = g.tape.relu(h)?;
        g.dropout(h, AUDIO_DROPOUT)
    }

    /// Flattening and layer norm after the last encoder block.
    pub(crate) fn encode_norm(&mut self, g: &mut Graph<T>, h: Var) -> Result<Var> {
        let n = g.tape.shape(h)[0];
        let flat = g.tape.reshape(h, vec![n, EMBED_DIM])?;
        let gamma = g.param(&self.params, "enc.ln.gamma")?;
        let beta = g.param(&self.params, "enc.ln.beta")?;
        g.tape.layer_norm(flat, gamma, beta)
    }

    /// d_a: five dropout/transposed-conv/BN blocks, ReLU between, sigmoid last.
    pub fn decode(&mut self, g: &mut Graph<T>, z_a: Var) -> Result<Var> {
        let logits = self.decode_logits(g, z_a)?;
        g.tape.sigmoid(logits)
    }

    /// d_a up to, not including, the final sigmoid.
    pub fn decode_logits(&mut self, g: &mut Graph<T>, z_a: Var) -> Result<Var> {
        let shape = g.tape.shape(z_a).to_vec();
        if shape.len() != 2 || shape[1] != EMBED_DIM {
            return Err(Error::shape(format!("expected [N, {EMBED_DIM}] embeddings, got {shape:?}")));
        }
        let mut h = g.tape.reshape(z_a, vec![shape[0], CHANNELS, BOTTLENECK, BOTTLENECK])?;
        for i in 0..LAYERS {
            h = g.dropout(h, AUDIO_DROPOUT)?;
            let w = g.param(&self.params, &format!("dec.convt{i}.weight"))?;
            let b = g.param(&self.params, &format!("dec.convt{i}.bias"))?;
            h = g.tape.conv_transpose2d(h, w, b, STRIDE, PADDING)?;
            h = self.batch_norm(g, h, &format!("dec.bn{i}"))?;
            if i < LAYERS - 1 {
                h = g.tape.relu(h)?;
            }
        }
        Ok(h)
    }

    fn batch_norm(&mut self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let gamma = g.param(&self.params, &format!("{prefix}.gamma"))?;
        let beta = g.param(&self.params, &format!("{prefix}.beta"))?;
        let running = self.params.get_mut(&format!("{prefix}.running"))?;
        g.tape.batch_norm(x, gamma, beta, running, g.mode)
    }

    /// FNN_c-a: affine map from z_a to the contrastive space.
    pub fn project(&self, g: &mut Graph<T>, z_a: Var) -> Result<Var> {
        let w = g.param(&self.params, "proj.weight")?;
        let b = g.param(&self.params, "proj.bias")?;
        g.tape.linear(z_a, w, Some(b))
    }

    /// φ_w from `[N, 10, F_w]` tag rows and their validity mask.
    pub fn attend(&self, g: &mut Graph<T>, tags: &Tensor<T>, mask: &[bool]) -> Result<Var> {
        let fw = self.variant.word_dim;
        let [n, slots, width] = *tags.shape() else {
            return Err(Error::shape(format!("expected [N, {MAX_TAGS}, {fw}] tags, got {:?}", tags.shape())));
        };
        if slots != MAX_TAGS || width != fw || mask.len() != n * slots {
            return Err(Error::shape(format!(
                "tags {:?} with {} mask bits do not match [N, {MAX_TAGS}, {fw}]",
                tags.shape(),
                mask.len()
            )));
        }
        let (tags, mask) = canonical_order(tags, mask);
        if let Some(i) = (0..n).find(|&i| !mask[i * slots..(i + 1) * slots].iter().any(|&m| m)) {
            return Err(Error::invalid(format!("example {i} has no valid tag")));
        }
        let z = g.tape.constant(tags)?;
        let z = g.dropout(z, TAG_DROPOUT)?;

        let (summed, width) = match self.variant.aggregation {
            Aggregation::Mean => {
                let weights = row_weights::<T>(&mask, slots, fw, true);
                let w = g.tape.constant(weights)?;
                let masked = g.tape.mul(z, w)?;
                (g.tape.sum(masked, 1)?, fw)
            }
            Aggregation::Attention => {
                let scale = 1.0 / (fw as f64).sqrt();
                let mut heads = Vec::with_capacity(self.variant.heads);
                for h in 0..self.variant.heads {
                    let mut proj = |name: &str| -> Result<Var> {
                        let w = g.param(&self.params, &format!("att.head{h}.{name}.weight"))?;
                        let b = g.param(&self.params, &format!("att.head{h}.{name}.bias"))?;
                        g.tape.linear(z, w, Some(b))
                    };
                    let (q, k, v) = (proj("q")?, proj("k")?, proj("v")?);
                    let kt = g.tape.transpose(k)?;
                    let scores = g.tape.matmul(q, kt)?;
                    let scores = g.tape.scale(scores, scale)?;
                    let attn = g.tape.masked_softmax(scores, &mask)?;
                    heads.push(g.tape.matmul(attn, v)?);
                }
                let cat = if heads.len() == 1 { heads[0] } else { g.tape.concat(&heads, 2)? };
                let wo = g.param(&self.params, "att.o.weight")?;
                let bo = g.param(&self.params, "att.o.bias")?;
                let o = g.tape.linear(cat, wo, Some(bo))?;
                let dc = self.variant.contrastive_dim();
                let w = g.tape.constant(row_weights::<T>(&mask, slots, dc, false))?;
                let masked = g.tape.mul(o, w)?;
                (g.tape.sum(masked, 1)?, dc)
            }
        };
        debug_assert_eq!(g.tape.shape(summed), [n, width]);
        let gamma = g.param(&self.params, "att.ln.gamma")?;
        let beta = g.param(&self.params, "att.ln.beta")?;
        g.tape.layer_norm(summed, gamma, beta)
    }

    /// Full pass for the joint objective.
    pub fn forward(&mut self, g: &mut Graph<T>, batch: &Batch<T>) -> Result<Outputs> {
        let x = g.tape.constant(batch.patches.clone())?;
        let z_a = self.encode(g, x)?;
        let reconstruction_logits = self.decode_logits(g, z_a)?;
        let reconstruction = g.tape.sigmoid(reconstruction_logits)?;
        let phi_a = self.project(g, z_a)?;
        let phi_w = self.attend(g, &batch.tags, &batch.mask)?;
        Ok(Outputs { z_a, reconstruction_logits, reconstruction, phi_a, phi_w })
    }

    /// Eval-mode z_a for `[N, 1, 96, 96]` patches.
    pub fn embed_audio(&mut self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::eval();
        let x = g.tape.constant(patches.clone())?;
        let z = self.encode(&mut g, x)?;
        Ok(g.tape.value(z).clone())
    }

    /// Eval-mode φ_a for `[N, 1, 96, 96]` patches.
    pub fn embed_audio_projected(&mut self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::eval();
        let x = g.tape.constant(patches.clone())?;
        let z = self.encode(&mut g, x)?;
        let p = self.project(&mut g, z)?;
        Ok(g.tape.value(p).clone())
    }

    /// Eval-mode φ_w.
    pub fn embed_tags(&self, tags: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
        let mut g = Graph::eval();
        let phi = self.attend(&mut g, tags, mask)?;
        Ok(g.tape.value(phi).clone())
    }

    /// Eval-mode reconstruction of `[N, 1, 96, 96]` patches.
    pub fn reconstruct(&mut self, patches: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::eval();
        let x = g.tape.constant(patches.clone())?;
        let z = self.encode(&mut g, x)?;
        let r = self.decode(&mut g, z)?;
        Ok(g.tape.value(r).clone())
    }
}

/// Sorts each example's valid rows by their bit patterns and moves padding
/// to the end, so the result depends only on the set of valid rows.
pub fn canonical_order<T: Float>(tags: &Tensor<T>, mask: &[bool]) -> (Tensor<T>, Vec<bool>) {
    let [n, slots, width] = *tags.shape() else { unreachable!("checked by caller") };
    let mut data = Vec::with_capacity(tags.numel());
    let mut out_mask = Vec::with_capacity(mask.len());
    for i in 0..n {
        let row = |s: usize| &tags.data()[(i * slots + s) * width..(i * slots + s + 1) * width];
        let key = |s: usize| row(s).iter().map(|v| v.as_f64().to_bits()).collect::<Vec<u64>>();
        let mut valid: Vec<usize> = (0..slots).filter(|&s| mask[i * slots + s]).collect();
        valid.sort_by_cached_key(|&s| key(s));
        for &s in &valid {
            data.extend_from_slice(row(s));
        }
        data.resize(data.len() + (slots - valid.len()) * width, T::zero());
        out_mask.extend((0..slots).map(|s| s < valid.len()));
    }
    (Tensor::new(tags.shape().to_vec(), data).expect("same shape"), out_mask)
}

/// `[N, slots, width]` weights: the mask, or the mask over the valid count.
fn row_weights<T: Float>(mask: &[bool], slots: usize, width: usize, mean: bool) -> Tensor<T> {
    let n = mask.len() / slots;
    let mut data = Vec::with_capacity(mask.len() * width);
    for i in 0..n {
        let m = &mask[i * slots..(i + 1) * slots];
        let count = m.iter().filter(|&&b| b).count() as f64;
        for &valid in m {
            let w = match (valid, mean) {
                (false, _) => 0.0,
                (true, true) => 1.0 / count,
                (true, false) => 1.0,
            };
            data.extend(std::iter::repeat_n(T::of(w), width));
        }
    }
    Tensor::new(vec![n, slots, width], data).expect("weights shape")
}
