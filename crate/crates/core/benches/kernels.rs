use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng as _;

use xaln::model::{Batch, Graph, Model, Variant};
use xaln::tags::MAX_TAGS;
use xaln::objectives::{total_loss, LossWeights};
use xaln::par;
use xaln::rng::{self, Purpose};
use xaln::tensor::{Mode, Tape, Tensor};

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn random(shape: Vec<usize>, seed: u64) -> Tensor<f32> {
    let mut r = rng::stream(seed, Purpose::Init, 99);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0f32..1.0))
}

fn conv_layer(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv_layer");
    group.sample_size(10);
    let x = random(vec![8, 1, 96, 96], 1);
    let w = random(vec![128, 1, 4, 4], 2);
    let b = random(vec![128], 3);
    for (name, parallel) in MODES {
        par::set_parallel(parallel);
        group.bench_function(BenchmarkId::new("forward_backward", name), |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone()).unwrap();
                let wv = tape.param(w.clone()).unwrap();
                let bv = tape.param(b.clone()).unwrap();
                let y = tape.conv2d(xv, wv, bv, 2, 1).unwrap();
                let l = tape.sum_all(y).unwrap();
                tape.backward(l).unwrap()
            })
        });
    }
    par::set_parallel(true);
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    let variant = Variant::attention(128, 1);
    let n = 4;
    let mut model = Model::<f32>::new(variant, 0).unwrap();
    let mut r = rng::stream(5, Purpose::Init, 98);
    let batch = Batch {
        patches: Tensor::from_fn(vec![n, 1, 96, 96], |_| r.gen_range(0.0f32..1.0)),
        tags: random(vec![n, MAX_TAGS, 128], 6),
        mask: (0..n * MAX_TAGS).map(|i| i % MAX_TAGS < 3).collect(),
    };
    let weights = LossWeights::default();
    for (name, parallel) in MODES {
        par::set_parallel(parallel);
        group.bench_function(BenchmarkId::new("batch4", name), |bench| {
            bench.iter(|| {
                let mut g = Graph::new(Mode::Train, rng::stream(0, Purpose::Dropout, 0));
                let out = model.forward(&mut g, &batch).unwrap();
                let loss = total_loss(&mut g.tape, &batch, &out, &weights).unwrap();
                g.gradients(loss.total).unwrap()
            })
        });
    }
    par::set_parallel(true);
    group.finish();
}

criterion_group!(benches, conv_layer, train_step);
criterion_main!(benches);
