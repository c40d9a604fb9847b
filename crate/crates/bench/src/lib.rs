//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use ggt_core::graph::{generate_regular_graph, RelationalGraph, DEFAULT_MAX_TRIES};
use ggt_core::mapping::plan_for_model;
use ggt_core::net::{MaskedModel, ModelSpec};
use ggt_core::rng;
use rand::Rng as _;

pub fn desk_graph(seed: u64) -> RelationalGraph {
    generate_regular_graph(64, 3, seed, DEFAULT_MAX_TRIES).expect("64-node cubic graph")
}

/// Default architecture on 8x8 single-channel inputs, pruned by a 64-node
/// cubic graph.
pub fn desk_models(seed: u64) -> (MaskedModel, MaskedModel) {
    let spec = ModelSpec::desk_default([1, 8, 8], 4);
    let original = MaskedModel::new(spec.clone(), seed).expect("valid spec");
    let plan = plan_for_model(&spec, &desk_graph(seed), "bench").expect("plan");
    let pruned = original.pruned(Arc::new(plan)).expect("same spec");
    (original, pruned)
}

pub fn uniform(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    (0..len).map(|_| r.random_range(0.0..1.0)).collect()
}
