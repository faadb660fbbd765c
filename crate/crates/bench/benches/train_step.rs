use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use prp_bench::{batch, model, store, DIM};
use prp_core::step::{batch_ranker_scores, forward_backward, plan_step, reference_forward_backward, StepOptions};
use prp_core::tensor::{adam_step, AdamConfig};

const BATCH: usize = 256;

fn bpr_options() -> StepOptions {
    StepOptions {
        use_ranker: false,
        use_lp: false,
        confidence_main: false,
        confidence_lp: false,
        ..StepOptions::default()
    }
}

fn steps(c: &mut Criterion) {
    let store = store(1);
    let base = model(&store, DIM, 2);
    let mut group = c.benchmark_group("train_step");
    group.sample_size(30);
    let cases = [("bpr", 2, bpr_options()), ("prp", 2, StepOptions::default()), ("prp", 5, StepOptions::default()), ("prp", 10, StepOptions::default())];
    for (name, k, opts) in cases {
        let b = batch(&store, BATCH, k, 3);
        let plan = plan_step(&base, &b, &opts, &mut ChaCha8Rng::seed_from_u64(4), &mut ChaCha8Rng::seed_from_u64(5))
            .expect("plan");
        let mut m = base.clone();
        let adam = AdamConfig::default();
        group.bench_function(BenchmarkId::new(name, k), |bench| {
            bench.iter(|| {
                m.params.zero_grad();
                let out = forward_backward(&mut m, &plan, &opts, None).expect("step");
                adam_step(&mut m.params, &adam).expect("adam");
                out.total_loss
            })
        });
    }
    group.finish();
}

fn routes(c: &mut Criterion) {
    let store = store(1);
    let base = model(&store, DIM, 2);
    let opts = StepOptions::default();
    let b = batch(&store, 64, 4, 3);
    let plan =
        plan_step(&base, &b, &opts, &mut ChaCha8Rng::seed_from_u64(4), &mut ChaCha8Rng::seed_from_u64(5)).expect("plan");
    let mut group = c.benchmark_group("step_route_k4_b64");
    let mut m = base.clone();
    group.bench_function("batched", |bench| {
        bench.iter(|| {
            m.params.zero_grad();
            forward_backward(&mut m, &plan, &opts, None).expect("step").total_loss
        })
    });
    group.bench_function("reference", |bench| {
        bench.iter(|| {
            m.params.zero_grad();
            reference_forward_backward(&mut m, &plan, &opts, None).expect("step").total_loss
        })
    });
    group.finish();

    c.bench_function("ranker_scores_b256_k4", |bench| {
        let b = batch(&store, BATCH, 4, 6);
        bench.iter(|| batch_ranker_scores(&base, &b))
    });
}

criterion_group!(benches, steps, routes);
criterion_main!(benches);
