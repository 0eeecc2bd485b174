//! Sequential versus data-parallel execution of the hot paths.
//!
//! With the default `parallel` feature each workload runs twice: inside a
//! single-thread rayon pool and inside the global pool. Building with
//! `--no-default-features` benchmarks the plain sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use phoneloc::baselines::ParticleFilterConfig;
use phoneloc::geodesy::WorldCameraTransform;
use phoneloc::dataset::{split_dataset, Correspondence, FeatureMask};
use phoneloc::eval::{calibrate, pf_estimates, standard_suite, window_scenes};
use phoneloc::gan::{self, GanModel, Normalizer};
use phoneloc::nn::TrainConfig;
use phoneloc::sim::{generate_scenes, Scene};

struct Fixture {
    scenes: Vec<Scene>,
    transforms: Vec<WorldCameraTransform>,
    records: Vec<Correspondence>,
}

fn fixture() -> Fixture {
    let scenes = generate_scenes(&standard_suite(5, 2, 30.0)).expect("suite simulates");
    let transforms: Vec<_> = scenes.iter().map(|s| s.config.camera_transform()).collect();
    let records = window_scenes(&scenes, &transforms, 1.0).expect("windows");
    Fixture {
        scenes,
        transforms,
        records,
    }
}

/// Runs `f` once per execution mode under a group named `name`.
fn modes(c: &mut Criterion, name: &str, f: impl Fn() + Send + Sync) {
    let mut group = c.benchmark_group(name);
    group.sample_size(10);
    #[cfg(feature = "parallel")]
    {
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        group.bench_function(BenchmarkId::new("sequential", 1), |b| b.iter(|| single.install(&f)));
        let n = rayon::current_num_threads();
        group.bench_function(BenchmarkId::new("parallel", n), |b| b.iter(&f));
    }
    #[cfg(not(feature = "parallel"))]
    group.bench_function(BenchmarkId::new("sequential", 1), |b| b.iter(&f));
    group.finish();
}

fn benches(c: &mut Criterion) {
    let fx = fixture();

    modes(c, "calibrate_scenes", || {
        for s in &fx.scenes {
            calibrate(s).unwrap();
        }
    });

    modes(c, "window_scenes", || {
        window_scenes(&fx.scenes, &fx.transforms, 1.0).unwrap();
    });

    let pf = ParticleFilterConfig::default();
    modes(c, "particle_filter", || {
        pf_estimates(&fx.scenes, &fx.transforms, &fx.records, &pf).unwrap();
    });

    let (train, _) = split_dataset(&fx.records, 0);
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let mask = FeatureMask::FULL;
    let norm = Normalizer::fit(&train, &mask).unwrap();
    modes(c, "train_epoch", || {
        let mut model = GanModel::new(mask, norm.clone(), &cfg).unwrap();
        gan::train(&mut model, &train, &cfg).unwrap();
    });

    let model = GanModel::new(mask, norm.clone(), &cfg).unwrap();
    modes(c, "infer", || {
        model.infer_records(&train).unwrap();
    });
}

criterion_group!(parallel, benches);
criterion_main!(parallel);
