use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use domaug_core::autodiff::{Conv2dAttrs, Tape};
use domaug_core::eval::{recall_at_k, EmbeddingMatrix, Provenance};
use domaug_core::losses::LossConfig;
use domaug_core::model::{EmbeddingModel, ModelConfig};
use domaug_core::tensor::Tensor;
use domaug_core::trainer::{adam_for, train_step_ideal};
use domaug_core::transforms::DomainSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let mut t = random(rng, &[n, d]);
    for row in t.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

fn conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&mut rng, &[32, 16, 16, 16]);
    let w = random(&mut rng, &[32, 16, 3, 3]);
    let b = random(&mut rng, &[32]);
    let attrs = Conv2dAttrs {
        stride: 2,
        padding: 1,
    };
    c.bench_function("conv2d forward+backward 32x16x16x16", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (vx, vw, vb) = (
                tape.leaf(x.clone(), true),
                tape.leaf(w.clone(), true),
                tape.leaf(b.clone(), true),
            );
            let y = tape.conv2d(vx, vw, vb, attrs).unwrap();
            let s = tape.reduce_sum(y).unwrap();
            tape.backward(s).unwrap();
            tape.grad(vw).unwrap()[0]
        })
    });
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = random(&mut rng, &[n, n]);
        let b = random(&mut rng, &[n, n]);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
                let y = tape.matmul(va, vb).unwrap();
                tape.value(y).data()[0]
            })
        });
    }
    group.finish();
}

fn recall(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("recall_at_k");
    for n in [500, 1600] {
        let values = unit_rows(&mut rng, n, 128);
        let labels = (0..n).map(|i| i % 16).collect();
        let provenance = Provenance::Domain {
            model: 0,
            rotation: 0,
            head: 0,
        };
        let emb = EmbeddingMatrix::new(values, labels, 128, provenance).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| recall_at_k(&emb, &[1, 2, 4, 8]).unwrap().at(1))
        });
    }
    group.finish();
}

fn ideal_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let config = ModelConfig::desk([1, 32, 32], 4, true);
    let mut model = EmbeddingModel::build(config, 0).unwrap();
    let mut state = adam_for(&model);
    let batch = random(&mut rng, &[32, 1, 32, 32]);
    let labels: Vec<usize> = (0..32).map(|i| i / 4).collect();
    let domains = DomainSet::all_rotations();
    let loss = LossConfig::default();
    let adam = Default::default();
    c.bench_function("ideal train step, 32 images 32x32, k=4", |bench| {
        bench.iter(|| {
            train_step_ideal(
                &mut model, &mut state, &batch, &labels, &domains, &loss, &adam,
            )
            .unwrap()
            .loss
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv2d, matmul, recall, ideal_step
}
criterion_main!(benches);
