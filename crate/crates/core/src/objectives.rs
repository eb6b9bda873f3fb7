//! Reconstruction (generalized KL) and cross-modal NT-Xent objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, Outputs};
use crate::tensor::{Float, Tape, Tensor, Var};

pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// λ_a, weight of the reconstruction term.
    pub gkl: f64,
    /// λ_ξ, weight of the contrastive term.
    pub ntxent: f64,
    /// τ.
    pub temperature: f64,
    pub gkl_reduction: Reduction,
}

/// How the reconstruction divergence is reduced over cells.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Summed over cells, averaged over the batch.
    Sum,
    /// Averaged over cells and batch.
    #[default]
    Mean,
}

impl Reduction {
    fn divisor(self, shape: &[usize]) -> f64 {
        match self {
            Reduction::Sum => shape.first().copied().unwrap_or(1).max(1) as f64,
            Reduction::Mean => shape.iter().product::<usize>().max(1) as f64,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { gkl: 5.0, ntxent: 10.0, temperature: 0.1, gkl_reduction: Reduction::Mean }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.gkl) || !ok(self.ntxent) || !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// `Σ x·ln(x/x̂) − x + x̂` over all cells, divided by the batch size or by
/// the cell count. Cells with `x = 0` contribute `x̂`.
pub fn gkl_loss<T: Float>(
    tape: &mut Tape<T>,
    target: &Tensor<T>,
    reconstruction: Var,
    reduction: Reduction,
) -> Result<Var> {
    if target.shape() != tape.shape(reconstruction) {
        return Err(Error::shape(format!(
            "gkl: target {:?} vs reconstruction {:?}",
            target.shape(),
            tape.shape(reconstruction)
        )));
    }
    if target.data().iter().any(|&v| v < T::zero()) {
        return Err(Error::invalid("gkl target has negative entries"));
    }
    if tape.value(reconstruction).data().iter().any(|&v| v <= T::zero()) {
        return Err(Error::invalid("gkl reconstruction must be strictly positive"));
    }
    // ln x where x > 0; the value is irrelevant elsewhere because it is multiplied by 0.
    let log_x = target.map(|v| if v > T::zero() { v.ln() } else { T::zero() });
    let x = tape.constant(target.clone())?;
    let log_x = tape.constant(log_x)?;
    let log_xh = tape.log(reconstruction)?;
    let ratio = tape.sub(log_x, log_xh)?;
    let weighted = tape.mul(x, ratio)?;
    let excess = tape.sub(reconstruction, x)?;
    let cells = tape.add(weighted, excess)?;
    let total = tape.sum_all(cells)?;
    tape.scale(total, 1.0 / reduction.divisor(target.shape()))
}

/// [`gkl_loss`] with `x̂ = σ(logits)`, taking `ln x̂` as `ln σ(logits)` so
/// the value stays finite when `σ` underflows to zero.
pub fn gkl_loss_logits<T: Float>(
    tape: &mut Tape<T>,
    target: &Tensor<T>,
    logits: Var,
    reduction: Reduction,
) -> Result<Var> {
    if target.shape() != tape.shape(logits) {
        return Err(Error::shape(format!("gkl: target {:?} vs logits {:?}", target.shape(), tape.shape(logits))));
    }
    if target.data().iter().any(|&v| v < T::zero()) {
        return Err(Error::invalid("gkl target has negative entries"));
    }
    let log_x = target.map(|v| if v > T::zero() { v.ln() } else { T::zero() });
    let x = tape.constant(target.clone())?;
    let log_x = tape.constant(log_x)?;
    let reconstruction = tape.sigmoid(logits)?;
    let log_xh = tape.log_sigmoid(logits)?;
    let ratio = tape.sub(log_x, log_xh)?;
    let weighted = tape.mul(x, ratio)?;
    let excess = tape.sub(reconstruction, x)?;
    let cells = tape.add(weighted, excess)?;
    let total = tape.sum_all(cells)?;
    tape.scale(total, 1.0 / reduction.divisor(target.shape()))
}

/// Symmetric cross-modal NT-Xent on `[N, D]` embeddings.
pub fn ntxent_loss<T: Float>(tape: &mut Tape<T>, phi_a: Var, phi_w: Var, temperature: f64) -> Result<Var> {
    let shape = tape.shape(phi_a).to_vec();
    if shape.len() != 2 || tape.shape(phi_w) != shape.as_slice() {
        return Err(Error::shape(format!("ntxent: {:?} vs {:?}", shape, tape.shape(phi_w))));
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::invalid("ntxent needs at least two pairs"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let a = tape.l2_normalize(phi_a, COSINE_EPS)?;
    let w = tape.l2_normalize(phi_w, COSINE_EPS)?;
    let wt = tape.transpose(w)?;
    let cos = tape.matmul(a, wt)?;
    let logits = tape.scale(cos, 1.0 / temperature)?;
    let eye = tape.constant(Tensor::from_fn(vec![n, n], |i| if i / n == i % n { T::one() } else { T::zero() }))?;
    let diag_sum = |axis: usize, tape: &mut Tape<T>| -> Result<Var> {
        let ls = tape.log_softmax(logits, axis)?;
        let d = tape.mul(ls, eye)?;
        tape.sum_all(d)
    };
    let rows = diag_sum(1, tape)?;
    let cols = diag_sum(0, tape)?;
    let both = tape.add(rows, cols)?;
    tape.scale(both, -1.0 / (2 * n) as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub gkl: Var,
    pub ntxent: Var,
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub gkl: f64,
    pub ntxent: f64,
}

impl LossVars {
    pub fn values<T: Float>(&self, tape: &Tape<T>) -> LossValues {
        LossValues {
            total: tape.value(self.total).item().as_f64(),
            gkl: tape.value(self.gkl).item().as_f64(),
            ntxent: tape.value(self.ntxent).item().as_f64(),
        }
    }
}

/// `λ_a·GKL + λ_ξ·NT-Xent` for a forward pass over `batch`.
pub fn total_loss<T: Float>(
    tape: &mut Tape<T>,
    batch: &Batch<T>,
    out: &Outputs,
    weights: &LossWeights,
) -> Result<LossVars> {
    weights.validate()?;
    let gkl = gkl_loss_logits(tape, &batch.patches, out.reconstruction_logits, weights.gkl_reduction)?;
    let ntxent = ntxent_loss(tape, out.phi_a, out.phi_w, weights.temperature)?;
    let a = tape.scale(gkl, weights.gkl)?;
    let b = tape.scale(ntxent, weights.ntxent)?;
    let total = tape.add(a, b)?;
    Ok(LossVars { total, gkl, ntxent })
}
