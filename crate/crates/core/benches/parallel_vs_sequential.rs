use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use merit_core::envs::{self, ExpertKind, FeatureKind, GridworldSpec};
use merit_core::online::{self, BaselineKind, MeritConfig, StepSchedule};
use merit_core::par::{self, Execution};
use merit_core::{ParamVector, SeededRng};

/// Independent online runs fanned out over seeds, the runner's unit of
/// parallel work.
fn seed_fanout(c: &mut Criterion) {
    let mut spec = GridworldSpec::open(5, 5, (4, 4));
    spec.feature_kind = FeatureKind::GoalDistanceRbf {
        centers: 9,
        bandwidth: 1.0,
    };
    let world = envs::build_gridworld(&spec).unwrap();
    let expert = envs::expert_policy(&world.mdp, &world.true_reward, ExpertKind::Soft).unwrap();
    let cfg = MeritConfig::new(
        1.0,
        ParamVector::zeros(world.model.dim()),
        StepSchedule::sqrt_decay(1.0, world.mdp.discount()).unwrap(),
    );
    let run = |seed: usize| {
        let stream = envs::expert_stream(&world.mdp, &expert, 40, SeededRng::new(seed as u64)).unwrap();
        let opts = online::RunOptions {
            true_reward: Some(&world.true_reward),
            ..Default::default()
        };
        let mut rng = SeededRng::new(seed as u64).derive(1);
        online::run_online(&world.model, &world.mdp, stream, 40, BaselineKind::Merit, &cfg, &opts, &mut rng)
            .unwrap()
            .j_true[39]
    };

    let mut group = c.benchmark_group("parallel_vs_sequential");
    group.sample_size(10);
    for seeds in [4usize, 16] {
        group.bench_with_input(BenchmarkId::new("sequential", seeds), &seeds, |b, &n| {
            b.iter(|| black_box(par::map_range_with(Execution::Sequential, n, run)))
        });
        group.bench_with_input(BenchmarkId::new("parallel", seeds), &seeds, |b, &n| {
            b.iter(|| black_box(par::map_range_with(Execution::Parallel, n, run)))
        });
    }
    group.finish();
}

criterion_group!(benches, seed_fanout);
criterion_main!(benches);
