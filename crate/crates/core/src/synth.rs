//! Seeded random tiny encoders, images and concept vectors for tests,
//! benchmarks and the self-test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::io::archive::{Activation, BlockWeights, ModelSpec, WeightArchive};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TinyModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_embed: usize,
    pub grid_side: usize,
    pub patch_size: usize,
}

impl TinyModelConfig {
    /// Draws `L ∈ {1,2,3}`, `H ∈ {1,2,4}`, `d_model ∈ {8,16}`, `N ∈ {4,16}`.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0f1);
        Self {
            layers: [1, 2, 3][rng.gen_range(0..3)],
            heads: [1, 2, 4][rng.gen_range(0..3)],
            d_model: [8, 16][rng.gen_range(0..2)],
            d_embed: [4, 8][rng.gen_range(0..2)],
            grid_side: [2, 4][rng.gen_range(0..2)],
            patch_size: 2,
        }
    }

    pub fn image_size(&self) -> usize {
        self.grid_side * self.patch_size
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape, data).expect("finite by construction")
}

fn around_one(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    let data = (0..d).map(|_| 1.0 + rng.gen_range(-0.2f32..0.2)).collect();
    Tensor::new(vec![d], data).expect("finite by construction")
}

/// A random pre-LN encoder. Linear weights are uniform with variance
/// `1/fan_in`; LayerNorm gains sit near one.
pub fn random_archive(seed: u64, cfg: &TinyModelConfig) -> WeightArchive {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let d_mlp = 4 * d;
    let p = cfg.patch_size;
    let n1 = cfg.grid_side * cfg.grid_side + 1;
    let lin = |fan_in: usize| (3.0 / fan_in as f32).sqrt();

    let patch_embed = uniform(&mut rng, vec![d, 3 * p * p], lin(3 * p * p));
    let class_embedding = uniform(&mut rng, vec![d], 1.0);
    let positional_embedding = uniform(&mut rng, vec![n1, d], 0.5);
    let mut blocks = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        blocks.push(BlockWeights {
            ln1_gamma: around_one(&mut rng, d),
            ln1_beta: uniform(&mut rng, vec![d], 0.1),
            q_weight: uniform(&mut rng, vec![d, d], 2.0 * lin(d)),
            q_bias: uniform(&mut rng, vec![d], 0.1),
            k_weight: uniform(&mut rng, vec![d, d], 2.0 * lin(d)),
            k_bias: uniform(&mut rng, vec![d], 0.1),
            v_weight: uniform(&mut rng, vec![d, d], lin(d)),
            v_bias: uniform(&mut rng, vec![d], 0.1),
            out_weight: uniform(&mut rng, vec![d, d], lin(d)),
            out_bias: uniform(&mut rng, vec![d], 0.1),
            ln2_gamma: around_one(&mut rng, d),
            ln2_beta: uniform(&mut rng, vec![d], 0.1),
            fc_weight: uniform(&mut rng, vec![d_mlp, d], lin(d)),
            fc_bias: uniform(&mut rng, vec![d_mlp], 0.1),
            proj_weight: uniform(&mut rng, vec![d, d_mlp], lin(d_mlp)),
            proj_bias: uniform(&mut rng, vec![d], 0.1),
        });
    }
    WeightArchive {
        spec: ModelSpec {
            model_id: format!("tiny-{seed}"),
            layers: cfg.layers,
            heads: cfg.heads,
            patch_size: p,
            image_size: cfg.image_size(),
            d_model: d,
            d_embed: cfg.d_embed,
            d_mlp,
            logit_scale: 100.0,
            ln_eps: 1e-5,
            activation: Activation::Gelu,
        },
        patch_embed,
        class_embedding,
        positional_embedding,
        ln_pre: None,
        blocks,
        ln_post_gamma: around_one(&mut rng, d),
        ln_post_beta: uniform(&mut rng, vec![d], 0.1),
        proj: uniform(&mut rng, vec![d, cfg.d_embed], lin(d)),
    }
}

/// A `[3, size, size]` image with entries in the normalized-pixel range.
pub fn random_image(seed: u64, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    uniform(&mut rng, vec![3, size, size], 2.0)
}

pub fn random_unit_vector(seed: u64, d: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}
