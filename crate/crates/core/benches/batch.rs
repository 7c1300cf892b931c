use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use msfd::anchors::assign;
use msfd::config::CliConfig;
use msfd::data::{augment, generate_scene, mix_seed};
use msfd::eval::{evaluate, InferenceConfig};
use msfd::model::Detector;
use msfd::par::Execution;
use msfd::train::{sample_gradients, TrainState};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn batch_forward_backward(c: &mut Criterion) {
    let cfg = CliConfig::default();
    let model = cfg.model();
    let state = TrainState::fresh(&model, 0).unwrap();
    let anchors = model.anchors();
    let scenes: Vec<_> = (0..8).map(|i| generate_scene(mix_seed(1, i), &cfg.generator)).collect();
    let samples: Vec<_> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| augment(s, &cfg.augment, &mut ChaCha8Rng::seed_from_u64(i as u64)))
        .collect();

    let mut group = c.benchmark_group("batch_forward_backward");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                exec.map(&samples, |s| {
                    sample_gradients(&model, &cfg.loss, &state.params, &anchors, s).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn batch_assignment(c: &mut Criterion) {
    let cfg = CliConfig::default();
    let model = cfg.model();
    let anchors = model.anchors();
    let scenes: Vec<_> = (0..64).map(|i| generate_scene(mix_seed(2, i), &cfg.generator)).collect();

    let mut group = c.benchmark_group("batch_assignment");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.map(&scenes, |s| assign(&anchors, &s.gt_boxes, &model.assignment)))
        });
    }
    group.finish();
}

fn batch_inference(c: &mut Criterion) {
    let cfg = CliConfig::default();
    let detector = Detector::new(cfg.model(), 0).unwrap();
    let scenes: Vec<_> = (0..16).map(|i| generate_scene(mix_seed(3, i), &cfg.generator)).collect();
    let inference = InferenceConfig::default();

    let mut group = c.benchmark_group("batch_inference");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&detector, &scenes, &inference, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch_forward_backward, batch_assignment, batch_inference);
criterion_main!(benches);
