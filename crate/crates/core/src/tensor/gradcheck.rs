//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of the backward rules it verifies.

use rand::Rng as _;
use serde::Serialize;

use super::{Mode, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::{self, Purpose, Rng};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl CheckReport {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), checked: 0, max_rel_error: 0.0, worst_analytic: 0.0, worst_numeric: 0.0 }
    }

    pub fn record(&mut self, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if self.checked == 1 || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst_analytic = analytic;
            self.worst_numeric = numeric;
        }
    }
}

/// `(f(x + h) − f(x − h)) / 2h` for coordinate `index` of `x`.
pub fn central_difference(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &mut [f64],
    index: usize,
    step: f64,
) -> Result<f64> {
    let orig = x[index];
    x[index] = orig + step;
    let plus = f(x)?;
    x[index] = orig - step;
    let minus = f(x)?;
    x[index] = orig;
    Ok((plus - minus) / (2.0 * step))
}

type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One differentiable op exercised on small random inputs.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    build: Builder,
}

impl OpCase {
    pub fn new(
        name: &'static str,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self { name, inputs, build: Box::new(build) }
    }

    /// Scalar objective `Σ out ⊙ r` with a fixed random `r`, so every output
    /// element contributes a distinct weight.
    fn objective(&self, inputs: &[Tensor<f64>], want_grads: bool) -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let vars = inputs.iter().map(|t| tape.param(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = (self.build)(&mut tape, &vars)?;
        let mut r = rng::stream(0x5eed, Purpose::GradCheck, out.index() as u64);
        let weights = Tensor::from_fn(tape.shape(out).to_vec(), |_| r.gen_range(-1.0..1.0));
        let w = tape.constant(weights)?;
        let prod = tape.mul(out, w)?;
        let loss = tape.sum_all(prod)?;
        let value = tape.value(loss).item();
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        let g = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        Ok((value, g))
    }

    pub fn check(&self, step: f64) -> Result<CheckReport> {
        let (_, analytic) = self.objective(&self.inputs, true)?;
        let mut report = CheckReport::new(self.name);
        for (which, input) in self.inputs.iter().enumerate() {
            let mut flat = input.data().to_vec();
            for i in 0..flat.len() {
                let numeric = central_difference(
                    |x| {
                        let mut inputs = self.inputs.clone();
                        inputs[which] = Tensor::new(input.shape().to_vec(), x.to_vec())?;
                        Ok(self.objective(&inputs, false)?.0)
                    },
                    &mut flat,
                    i,
                    step,
                )?;
                report.record(analytic[which].data()[i], numeric);
            }
        }
        Ok(report)
    }
}

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(0.2..1.5))
}

/// Every differentiable tape op on random inputs of a few elements.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng::stream(seed, Purpose::GradCheck, 0);
    let r = &mut r;
    vec![
        OpCase::new("conv2d", vec![random(r, &[2, 2, 5, 5]), random(r, &[3, 2, 3, 3]), random(r, &[3])], |t, v| {
            t.conv2d(v[0], v[1], v[2], 2, 1)
        }),
        OpCase::new(
            "conv_transpose2d",
            vec![random(r, &[2, 2, 3, 3]), random(r, &[2, 3, 4, 4]), random(r, &[3])],
            |t, v| t.conv_transpose2d(v[0], v[1], v[2], 2, 1),
        ),
        OpCase::new("batch_norm_train", vec![random(r, &[3, 2, 2, 2]), random(r, &[2]), random(r, &[2])], |t, v| {
            let mut running = Tensor::from_vec(vec![0.0, 0.0, 1.0, 1.0]).reshape(vec![2, 2])?;
            t.batch_norm(v[0], v[1], v[2], &mut running, Mode::Train)
        }),
        OpCase::new("batch_norm_eval", vec![random(r, &[3, 2, 2]), random(r, &[2]), random(r, &[2])], |t, v| {
            let mut running = Tensor::from_vec(vec![0.1, -0.2, 0.5, 2.0]).reshape(vec![2, 2])?;
            t.batch_norm(v[0], v[1], v[2], &mut running, Mode::Eval)
        }),
        OpCase::new("layer_norm", vec![random(r, &[3, 5]), random(r, &[5]), random(r, &[5])], |t, v| {
            t.layer_norm(v[0], v[1], v[2])
        }),
        OpCase::new("linear", vec![random(r, &[2, 3, 4]), random(r, &[5, 4]), random(r, &[5])], |t, v| {
            t.linear(v[0], v[1], Some(v[2]))
        }),
        OpCase::new("matmul_batched", vec![random(r, &[2, 3, 4]), random(r, &[2, 4, 2])], |t, v| t.matmul(v[0], v[1])),
        OpCase::new("matmul_broadcast", vec![random(r, &[2, 3, 4]), random(r, &[4, 2])], |t, v| t.matmul(v[0], v[1])),
        OpCase::new("transpose", vec![random(r, &[2, 3, 4])], |t, v| t.transpose(v[0])),
        OpCase::new("relu", vec![random(r, &[10])], |t, v| t.relu(v[0])),
        OpCase::new("sigmoid", vec![random(r, &[10])], |t, v| t.sigmoid(v[0])),
        OpCase::new("log", vec![positive(r, &[6])], |t, v| t.log(v[0])),
        OpCase::new("log_sigmoid", vec![Tensor::from_fn(vec![8], |i| (i as f64 - 3.5) * 3.0 + r.gen_range(-0.5..0.5))], |t, v| {
            t.log_sigmoid(v[0])
        }),
        OpCase::new("exp", vec![random(r, &[6])], |t, v| t.exp(v[0])),
        OpCase::new("dropout", vec![random(r, &[12])], |t, v| {
            let mut d = rng::stream(3, Purpose::Dropout, 0);
            t.dropout(v[0], 0.3, Mode::Train, &mut d)
        }),
        OpCase::new("add_sub_mul", vec![random(r, &[2, 3]), random(r, &[2, 3])], |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(v[0], v[1])?;
            let m = t.mul(s, d)?;
            t.scale(m, -0.7)
        }),
        OpCase::new("sum_axis", vec![random(r, &[2, 3, 4])], |t, v| t.sum(v[0], 1)),
        OpCase::new("softmax", vec![random(r, &[3, 4])], |t, v| t.softmax(v[0], 0)),
        OpCase::new("log_softmax", vec![random(r, &[3, 4])], |t, v| t.log_softmax(v[0], 1)),
        OpCase::new("masked_softmax", vec![random(r, &[2, 3, 3])], |t, v| {
            t.masked_softmax(v[0], &[true, true, false, true, false, true])
        }),
        OpCase::new("concat", vec![random(r, &[2, 2]), random(r, &[2, 3])], |t, v| t.concat(&[v[0], v[1]], 1)),
        OpCase::new("l2_normalize", vec![random(r, &[3, 4])], |t, v| t.l2_normalize(v[0], 1e-8)),
        OpCase::new("reshape", vec![random(r, &[2, 6])], |t, v| {
            let x = t.reshape(v[0], vec![3, 4])?;
            t.sum(x, 0)
        }),
    ]
}

/// Runs [`op_cases`] and returns one report per op.
pub fn op_suite(seed: u64) -> Result<Vec<CheckReport>> {
    op_cases(seed).iter().map(|c| c.check(DEFAULT_STEP)).collect()
}
