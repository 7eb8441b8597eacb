//! Rayon pool vs. a single worker on the same workloads. Building with
//! `--no-default-features` compiles the sequential path instead; this bench
//! compares both schedules inside one binary.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nocspose::pipeline::{estimate_scene, PipelineConfig, Scene, SynthConfig};
use nocspose::raster::render_camera;

fn workloads(c: &mut Criterion) {
    let cfg = PipelineConfig {
        synth: SynthConfig {
            frames: 8,
            ..Default::default()
        },
        ..Default::default()
    };
    let scene = Scene::synthesize(&cfg.synth, 1).unwrap();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let pools = [("pool", None), ("single", Some(&single))];

    let mut group = c.benchmark_group("render");
    for (name, pool) in pools {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            let run = || render_camera(&scene.mesh, &scene.bounds, &scene.frames[0].gt_pose, &scene.camera).unwrap();
            match pool {
                Some(p) => b.iter(|| p.install(run)),
                None => b.iter(run),
            }
        });
    }
    group.finish();

    let mut group = c.benchmark_group("estimate_scene");
    group.sample_size(10);
    for (name, pool) in pools {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            let run = || estimate_scene(&scene, &cfg);
            match pool {
                Some(p) => b.iter(|| p.install(run)),
                None => b.iter(run),
            }
        });
    }
    group.finish();
}

criterion_group!(benches, workloads);
criterion_main!(benches);
