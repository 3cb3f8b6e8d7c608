use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use lgportf::lgc::{estimate_local_params, plugin_bandwidth, BivariateSample, GridPoint2D};
use lgportf::local_cov::{percentile_grid, LocalCovEstimator};
use lgportf::parallel::Execution;
use lgportf::synth::{gaussian_pair, synth_panel, SynthConfig};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn local_covariance(c: &mut Criterion) {
    let panel = synth_panel(&SynthConfig::default()).rows(0, 240).unwrap();
    let grid = percentile_grid(&panel, 0.05).unwrap();
    let mut group = c.benchmark_group("local_covariance_6_assets_240_months");
    for (name, execution) in MODES {
        let est = LocalCovEstimator { execution, ..Default::default() };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| est.estimate(black_box(&panel), &grid, None).unwrap())
        });
    }
    group.finish();
}

fn monte_carlo_batch(c: &mut Criterion) {
    let samples: Vec<BivariateSample> = (0..32)
        .map(|seed| {
            let (x, y) = gaussian_pair(2000, 0.5, seed);
            BivariateSample::new(x, y).unwrap()
        })
        .collect();
    let mut group = c.benchmark_group("monte_carlo_32_fits_n2000");
    group.sample_size(20);
    for (name, execution) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                execution.map(&samples, |s| {
                    let bw = plugin_bandwidth(s, 1.1).unwrap();
                    estimate_local_params(s, GridPoint2D::new(-0.67, -0.67), bw, None)
                        .unwrap()
                        .0
                        .rho
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, local_covariance, monte_carlo_batch);
criterion_main!(benches);
