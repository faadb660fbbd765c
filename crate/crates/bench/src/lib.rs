//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prp_core::data::{sample_batch, split, Batch, Interaction, InteractionStore, SplitRatios, SplitStore};
use prp_core::model::PrpModel;

pub const USERS: usize = 500;
pub const ITEMS: usize = 1000;
pub const PER_USER: usize = 40;
pub const DIM: usize = 64;

/// Uniform random interactions split 80/10/10.
pub fn store(seed: u64) -> SplitStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..USERS).flat_map(|u| {
        rand::seq::index::sample(&mut rng, ITEMS, PER_USER)
            .into_iter()
            .map(move |i| Interaction {
                user_raw: format!("u{u}"),
                item_raw: format!("i{i}"),
                timestamp: None,
            })
            .collect::<Vec<_>>()
    });
    let all = InteractionStore::from_interactions(rows).expect("non-empty");
    split(&all, SplitRatios::default(), seed).expect("valid ratios")
}

pub fn model(store: &SplitStore, dim: usize, seed: u64) -> PrpModel {
    let mut m = PrpModel::new(store.n_users(), store.n_items(), dim).expect("model");
    m.init_xavier(&mut ChaCha8Rng::seed_from_u64(seed)).expect("init");
    m
}

pub fn batch(store: &SplitStore, batch_size: usize, k: usize, seed: u64) -> Batch {
    sample_batch(store, batch_size, k, &mut ChaCha8Rng::seed_from_u64(seed)).expect("batch")
}

/// `k` scores sorted best first.
pub fn ordered_scores(k: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn gradient_pool(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}
