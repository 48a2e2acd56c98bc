//! Sequential vs rayon execution on the data-parallel hot paths.
//! Build with `--no-default-features` to benchmark without rayon entirely.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dreamforge_core::curation::object_uncertainty;
use dreamforge_core::dataset::{read_dataset, rle_encode, BBox, BitGrid, ConfidenceMap, ObjectInstance, Vocabulary};
use dreamforge_core::exec::Execution;
use dreamforge_core::pipeline::config::TrainingConfig;
use dreamforge_core::pipeline::real::stub_real_dataset;
use dreamforge_core::pipeline::{run_synthesis, simulate_training, PipelineConfig, RunOptions};
use dreamforge_core::scene::Canvas;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];
const TRAIN: [&str; 6] = ["dog", "cat", "car", "person", "chair", "bottle"];

fn objects(n: usize) -> Vec<ObjectInstance> {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|i| {
            let (w, h) = (512, 512);
            let bbox = BBox::new(r.random_range(0..256), r.random_range(0..256), 200, 200).unwrap();
            let mut grid = BitGrid::zeros(w, h);
            for y in bbox.y..bbox.y + bbox.h {
                for x in bbox.x..bbox.x + bbox.w {
                    grid.set(x, y, (x - bbox.x) * (y - bbox.y) % 7 != 3);
                }
            }
            let values = (0..bbox.area()).map(|_| r.random::<f32>()).collect();
            ObjectInstance {
                object_id: i as u32,
                category_id: 0,
                bbox,
                mask: rle_encode(&grid).unwrap(),
                confidence: ConfidenceMap::new(bbox.w, bbox.h, values).unwrap(),
                clip_score: None,
                uncertainty: None,
            }
        })
        .collect()
}

fn grids(n: usize) -> Vec<BitGrid> {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    (0..n)
        .map(|_| BitGrid::new(256, 256, (0..256 * 256).map(|_| r.random_bool(0.3)).collect()).unwrap())
        .collect()
}

fn uncertainty(c: &mut Criterion) {
    let objs = objects(256);
    let mut g = c.benchmark_group("uncertainty_256_objects");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.map(black_box(&objs), |o| object_uncertainty(o).unwrap()))
        });
    }
    g.finish();
}

fn rle(c: &mut Criterion) {
    let gs = grids(128);
    let mut g = c.benchmark_group("rle_encode_128_grids");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.map(black_box(&gs), |grid| rle_encode(grid).unwrap()))
        });
    }
    g.finish();
}

fn training(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let mut config = PipelineConfig::new(3, dir.path(), &TRAIN);
    config.layouts.count = 40;
    run_synthesis(&config, &RunOptions::default()).unwrap();
    let (synth, vocab): (_, Vocabulary) = read_dataset(&dir.path().join("dataset")).unwrap();
    let real = stub_real_dataset(&vocab, 100, Canvas::default(), 9).unwrap();
    let tc = TrainingConfig {
        steps: 10,
        ..TrainingConfig::default()
    };
    let mut g = c.benchmark_group("training_10_steps");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| simulate_training(&real, &synth, &vocab, &tc, 3, exec).unwrap())
        });
    }
    g.finish();
}

fn synthesis(c: &mut Criterion) {
    let mut g = c.benchmark_group("synthesis_40_layouts");
    g.sample_size(10);
    for (name, exec) in MODES {
        let dir = tempfile::tempdir().unwrap();
        let mut config = PipelineConfig::new(3, dir.path(), &TRAIN);
        config.layouts.count = 40;
        config.execution = exec;
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_synthesis(&config, &RunOptions::default()).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, uncertainty, rle, training, synthesis);
criterion_main!(benches);
