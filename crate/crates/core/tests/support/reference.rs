//! A plain f64 forward pass written from the architecture description,
//! sharing no code with the recording encoder.

use chili_core::io::{Activation, WeightArchive};
use chili_core::Tensor;

pub struct Forward {
    /// Residual stream entering each block, `[tokens][d_model]`.
    pub layer_inputs: Vec<Vec<Vec<f64>>>,
    pub final_cls: Vec<f64>,
    pub embedding: Vec<f64>,
}

fn at(t: &Tensor, r: usize, c: usize) -> f64 {
    t.data()[r * t.shape()[1] + c] as f64
}

fn vec64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// `y = W x + b` for `W: [out, in]`.
fn linear(w: &Tensor, b: Option<&Tensor>, x: &[f64]) -> Vec<f64> {
    (0..w.shape()[0])
        .map(|o| {
            let mut s = b.map_or(0.0, |b| b.data()[o] as f64);
            for (i, xi) in x.iter().enumerate() {
                s += at(w, o, i) * xi;
            }
            s
        })
        .collect()
}

fn layer_norm(x: &[f64], g: &Tensor, b: &Tensor, eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let sd = (var + eps).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mu) / sd * g.data()[i] as f64 + b.data()[i] as f64)
        .collect()
}

fn act(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
        Activation::QuickGelu => x / (1.0 + (-1.702 * x).exp()),
    }
}

pub fn forward(w: &WeightArchive, image: &Tensor) -> Forward {
    let s = &w.spec;
    let (p, side, d) = (s.patch_size, s.image_size, s.d_model);
    let g = side / p;
    let px = image.data();
    let mut z: Vec<Vec<f64>> = vec![vec64(&w.class_embedding)];
    for gy in 0..g {
        for gx in 0..g {
            let mut patch = Vec::with_capacity(3 * p * p);
            for ch in 0..3 {
                for y in 0..p {
                    for x in 0..p {
                        patch.push(px[ch * side * side + (gy * p + y) * side + gx * p + x] as f64);
                    }
                }
            }
            z.push(linear(&w.patch_embed, None, &patch));
        }
    }
    for (t, row) in z.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += at(&w.positional_embedding, t, j);
        }
    }
    let eps = s.ln_eps as f64;
    if let Some((gamma, beta)) = &w.ln_pre {
        z = z.iter().map(|r| layer_norm(r, gamma, beta, eps)).collect();
    }
    let n = z.len();
    let dh = d / s.heads;
    let mut layer_inputs = Vec::new();
    for blk in &w.blocks {
        layer_inputs.push(z.clone());
        let u: Vec<Vec<f64>> = z.iter().map(|r| layer_norm(r, &blk.ln1_gamma, &blk.ln1_beta, eps)).collect();
        let q: Vec<Vec<f64>> = u.iter().map(|r| linear(&blk.q_weight, Some(&blk.q_bias), r)).collect();
        let k: Vec<Vec<f64>> = u.iter().map(|r| linear(&blk.k_weight, Some(&blk.k_bias), r)).collect();
        let v: Vec<Vec<f64>> = u.iter().map(|r| linear(&blk.v_weight, Some(&blk.v_bias), r)).collect();
        let mut concat = vec![vec![0.0; d]; n];
        for h in 0..s.heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let logits: Vec<f64> = (0..n)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let tot: f64 = e.iter().sum();
                for c in cols.clone() {
                    concat[i][c] = (0..n).map(|j| e[j] / tot * v[j][c]).sum();
                }
            }
        }
        for i in 0..n {
            let o = linear(&blk.out_weight, Some(&blk.out_bias), &concat[i]);
            for j in 0..d {
                z[i][j] += o[j];
            }
        }
        for row in z.iter_mut() {
            let y = layer_norm(row, &blk.ln2_gamma, &blk.ln2_beta, eps);
            let hidden: Vec<f64> = linear(&blk.fc_weight, Some(&blk.fc_bias), &y)
                .into_iter()
                .map(|x| act(s.activation, x))
                .collect();
            let out = linear(&blk.proj_weight, Some(&blk.proj_bias), &hidden);
            for j in 0..d {
                row[j] += out[j];
            }
        }
    }
    let final_cls = z[0].clone();
    let normed = layer_norm(&final_cls, &w.ln_post_gamma, &w.ln_post_beta, eps);
    let e = s.d_embed;
    let embedding = (0..e)
        .map(|j| (0..d).map(|i| normed[i] * at(&w.proj, i, j)).sum())
        .collect();
    Forward {
        layer_inputs,
        final_cls,
        embedding,
    }
}
