//! Inputs shared by the benchmarks.

use chili_core::eval::fixture::{generate_fixture, FixtureSpec};
use chili_core::synth::{random_archive, random_image, random_unit_vector, TinyModelConfig};
use chili_core::{ProbeItem, Tensor, WeightArchive};

/// Encoder shapes from tiny to roughly a quarter of ViT-B/16.
pub fn model_sizes() -> Vec<(&'static str, TinyModelConfig)> {
    let cfg = |layers, heads, d_model, grid_side| TinyModelConfig {
        layers,
        heads,
        d_model,
        d_embed: 32,
        grid_side,
        patch_size: 4,
    };
    vec![
        ("L2-H2-d16-g4", cfg(2, 2, 16, 4)),
        ("L4-H4-d64-g8", cfg(4, 4, 64, 8)),
        ("L6-H8-d128-g14", cfg(6, 8, 128, 14)),
    ]
}

/// A seeded encoder together with one image and one unit concept for it.
pub struct Workload {
    pub archive: WeightArchive,
    pub image: Tensor,
    pub concept: Vec<f32>,
}

pub fn workload(cfg: &TinyModelConfig, seed: u64) -> Workload {
    Workload {
        archive: random_archive(seed, cfg),
        image: random_image(seed + 1, cfg.image_size()),
        concept: random_unit_vector(seed + 2, cfg.d_embed),
    }
}

/// Probe items of the default synthetic fixture on a `side × side` grid with
/// `probe_samples` images.
pub fn probe_set(side: usize, probe_samples: usize, seed: u64) -> Vec<ProbeItem> {
    let base = FixtureSpec::default();
    let lo = side / 4;
    let mut mask = chili_core::GridMap::zeros(side, side);
    for r in lo..side - lo {
        for c in lo..side - lo {
            mask.set(r, c, 1.0);
        }
    }
    let spec = FixtureSpec {
        grid: (side, side),
        planted_mask: mask,
        probe_samples,
        eval_samples: 2,
        ..base
    };
    generate_fixture(seed, &spec)
        .and_then(|f| f.probe_items())
        .expect("default fixture layout is valid")
}
