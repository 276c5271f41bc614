//! Shared fixtures for the benchmarks.

use w2w_core::model::ModelConfig;
use w2w_core::synth::{generate_scene, RenderedPair, WorldConfig};

/// The model size the training benchmarks use (8×8 BEV grid).
pub fn desk_config() -> ModelConfig {
    ModelConfig {
        bev_h: 8,
        bev_w: 8,
        depth_bins: 8,
        ..ModelConfig::default()
    }
}

pub fn pairs(n: usize) -> Vec<RenderedPair> {
    let cfg = WorldConfig::default();
    (0..n)
        .map(|i| RenderedPair::render(generate_scene(i, i as u64, 10, &cfg).expect("scene"), &cfg))
        .collect()
}
