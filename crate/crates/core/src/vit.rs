//! Recording forward pass of a pre-LN ViT and the exact additive
//! decomposition of its image–text score.
//!
//! The class-token stream after the last block is
//!
//! ```text
//! Z^L_cls = Z^0_cls + Σ_l ( Σ_h Σ_i W_O^{l,h} α^{l,h}_{cls,i} v_i^{l,h} + b_O^l + MLP^l_cls )
//! ```
//!
//! The final LayerNorm is folded linearly into every term (one `σ` taken from
//! the whole stream, per-term mean removal, `β` kept apart) and the
//! projection `P` is applied to each term. The head/token terms become the
//! contribution vectors `m_{i,l,h}`; everything else lands in `ε`. Scoring a
//! unit concept vector then gives
//! `S = logit_scale · cos = Σ A_{i,l,h} + ε` exactly, up to rounding.

use std::hash::{DefaultHasher, Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::archive::{Activation, WeightArchive};
use crate::tensor::{
    add, add_row_bias, dot, gelu_scalar, layer_norm, layer_norm_rows, matmul_transposed, norm,
    quick_gelu_scalar, softmax_rows, GridMap, LnFold, Tensor,
};

/// What one block saw and produced at the class position.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    /// `Z^{l-1}`, `[N+1, d_model]`.
    pub input: Tensor,
    /// Class-query attention rows, `[H, N+1]`.
    pub cls_attention: Tensor,
    /// Value vectors for all tokens, heads concatenated: `[N+1, d_model]`.
    pub values: Tensor,
    /// MLP output at the class position.
    pub mlp_cls: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualRecord {
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    pub d_model: usize,
    pub initial_cls: Vec<f32>,
    pub blocks: Vec<LayerRecord>,
    /// `Z^L_cls` before the final LayerNorm.
    pub final_cls: Vec<f32>,
    pub final_mean: f64,
    pub final_sigma: f64,
    pub embedding: Vec<f32>,
}

/// The `ε` terms, each already normalized and projected.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsComponents {
    pub initial_cls: Vec<f32>,
    /// Attention output-projection bias, one per layer.
    pub attn_bias: Vec<Vec<f32>>,
    pub mlp: Vec<Vec<f32>>,
    pub ln_beta: Vec<f32>,
}

impl EpsComponents {
    fn iter(&self) -> impl Iterator<Item = &[f32]> {
        std::iter::once(self.initial_cls.as_slice())
            .chain(self.attn_bias.iter().map(Vec::as_slice))
            .chain(self.mlp.iter().map(Vec::as_slice))
            .chain(std::iter::once(self.ln_beta.as_slice()))
    }

    /// Sum of all `ε` vectors.
    pub fn total(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.initial_cls.len()];
        for v in self.iter() {
            for (a, &x) in acc.iter_mut().zip(v) {
                *a += x as f64;
            }
        }
        acc
    }
}

/// Post-projection contribution vectors for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionRecord {
    pub model_id: String,
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    pub d_embed: usize,
    pub grid: (usize, usize),
    /// `[L, H, N+1, d_embed]`.
    pub m: Tensor,
    pub eps: EpsComponents,
    /// `‖M_img‖₂` of the unnormalized image embedding.
    pub image_norm: f64,
}

impl ContributionRecord {
    pub fn contribution(&self, l: usize, h: usize, i: usize) -> &[f32] {
        let d = self.d_embed;
        let off = ((l * self.heads + h) * self.tokens + i) * d;
        &self.m.data()[off..off + d]
    }

    /// `Σ m + Σ ε`, which reconstructs the image embedding.
    pub fn reconstruct(&self) -> Vec<f64> {
        let mut acc = self.eps.total();
        for chunk in self.m.data().chunks(self.d_embed) {
            for (a, &x) in acc.iter_mut().zip(chunk) {
                *a += x as f64;
            }
        }
        acc
    }
}

/// Per-token, per-head score terms for one (image, concept) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredMaps {
    pub concept: String,
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    /// `A_{i,l,h}` flattened as `[L, H, N+1]`.
    pub a: Vec<f32>,
    pub eps: f64,
    /// `Σ A + ε`.
    pub s: f64,
}

impl ScoredMaps {
    /// Assembles scored maps, deriving `S` from the terms.
    pub fn new(
        concept: impl Into<String>,
        layers: usize,
        heads: usize,
        tokens: usize,
        a: Vec<f32>,
        eps: f64,
    ) -> Result<Self> {
        let concept = concept.into();
        if a.len() != layers * heads * tokens {
            return Err(Error::Shape(format!(
                "scored maps for `{concept}`: {} terms, expected {layers}×{heads}×{tokens}",
                a.len()
            )));
        }
        if a.iter().any(|v| !v.is_finite()) || !eps.is_finite() {
            return Err(Error::NonFinite(format!("scored maps for `{concept}`")));
        }
        let s = a.iter().map(|&v| v as f64).sum::<f64>() + eps;
        Ok(Self {
            concept,
            layers,
            heads,
            tokens,
            a,
            eps,
            s,
        })
    }

    /// Re-derives `S` and checks the stored one against it.
    pub fn validate(&self) -> Result<()> {
        let fresh = Self::new(
            self.concept.clone(),
            self.layers,
            self.heads,
            self.tokens,
            self.a.clone(),
            self.eps,
        )?;
        if (fresh.s - self.s).abs() > 1e-4 * self.s.abs().max(1.0) {
            return Err(Error::Invalid(format!(
                "scored maps for `{}`: S={} but ΣA+ε={}",
                self.concept, self.s, fresh.s
            )));
        }
        Ok(())
    }

    pub fn get(&self, l: usize, h: usize, i: usize) -> f32 {
        self.a[(l * self.heads + h) * self.tokens + i]
    }

    pub fn head_slice(&self, l: usize, h: usize) -> &[f32] {
        let off = (l * self.heads + h) * self.tokens;
        &self.a[off..off + self.tokens]
    }
}

/// Spatial maps `A_{l,h}` reshaped to the patch grid, with the class-token
/// terms split off.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMaps {
    pub concept: String,
    pub layers: usize,
    pub heads: usize,
    /// Indexed `l·H + h`.
    pub maps: Vec<GridMap>,
    /// `A_{0,l,h}`, indexed `l·H + h`.
    pub cls: Vec<f64>,
    pub eps: f64,
    pub s: f64,
}

impl HeadMaps {
    pub fn map(&self, l: usize, h: usize) -> &GridMap {
        &self.maps[l * self.heads + h]
    }

    pub fn grid(&self) -> (usize, usize) {
        self.maps[0].dims()
    }

    /// `A = Σ_{l,h} A_{l,h}`.
    pub fn summed(&self) -> GridMap {
        let (r, c) = self.grid();
        let mut acc = GridMap::zeros(r, c);
        for m in &self.maps {
            acc.accumulate(m).expect("maps share a grid");
        }
        acc
    }

    /// Fingerprint of the spatial values, used to tie derived splits back to
    /// their source.
    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.concept.hash(&mut h);
        (self.layers, self.heads, self.grid()).hash(&mut h);
        for m in &self.maps {
            for v in m.values() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

fn check_image(weights: &WeightArchive, image: &Tensor) -> Result<()> {
    let s = weights.spec.image_size;
    if image.shape() != [3, s, s] {
        return Err(Error::Shape(format!(
            "image tensor {:?}, model expects [3, {s}, {s}]",
            image.shape()
        )));
    }
    Ok(())
}

/// Flattens non-overlapping patches to `[N, 3·p·p]` in `(channel, y, x)`
/// order, patches row-major over the grid.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let [ch, h, w] = image.shape() else {
        return Err(Error::Shape(format!("image must be 3-D, got {:?}", image.shape())));
    };
    let (ch, h, w) = (*ch, *h, *w);
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("{h}×{w} image not divisible into {patch}-px patches")));
    }
    let (gr, gc) = (h / patch, w / patch);
    let px = image.data();
    let mut out = Vec::with_capacity(gr * gc * ch * patch * patch);
    for r in 0..gr {
        for c in 0..gc {
            for k in 0..ch {
                for y in 0..patch {
                    for x in 0..patch {
                        out.push(px[(k * h + r * patch + y) * w + c * patch + x]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![gr * gc, ch * patch * patch], out)
}

/// `Z^0`: class embedding and patch embeddings plus positions, then
/// `ln_pre` when the archive has one.
fn embed(weights: &WeightArchive, image: &Tensor) -> Result<Tensor> {
    let spec = &weights.spec;
    let patches = patchify(image, spec.patch_size)?;
    let tokens = matmul_transposed(&patches, &weights.patch_embed)?;
    let mut data = weights.class_embedding.data().to_vec();
    data.extend_from_slice(tokens.data());
    let z = add(
        &Tensor::new(vec![spec.spatial_tokens() + 1, spec.d_model], data)?,
        &weights.positional_embedding,
    )?;
    match &weights.ln_pre {
        Some((g, b)) => layer_norm_rows(&z, g.data(), b.data(), spec.ln_eps),
        None => Ok(z),
    }
}

fn activation(kind: Activation, t: &Tensor) -> Tensor {
    let f = match kind {
        Activation::Gelu => gelu_scalar,
        Activation::QuickGelu => quick_gelu_scalar,
    };
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("activation keeps values finite")
}

fn columns(t: &Tensor, start: usize, width: usize) -> Tensor {
    let rows = t.rows();
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(&t.row(r)[start..start + width]);
    }
    Tensor::new(vec![rows, width], out).expect("slice of a valid tensor")
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose of a valid tensor")
}

/// Forward pass that keeps everything the decomposition needs. Returns the
/// unnormalized image embedding `P · LN(Z^L)_cls`.
pub fn encode_image(weights: &WeightArchive, image: &Tensor) -> Result<(Vec<f32>, ResidualRecord)> {
    check_image(weights, image)?;
    let spec = &weights.spec;
    let (d, heads, dh) = (spec.d_model, spec.heads, spec.d_head());
    let n1 = spec.spatial_tokens() + 1;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut z = embed(weights, image)?;
    let initial_cls = z.row(0).to_vec();
    let mut blocks = Vec::with_capacity(spec.layers);

    for blk in &weights.blocks {
        let input = z.clone();
        let u = layer_norm_rows(&z, blk.ln1_gamma.data(), blk.ln1_beta.data(), spec.ln_eps)?;
        let mut q = matmul_transposed(&u, &blk.q_weight)?;
        add_row_bias(&mut q, blk.q_bias.data())?;
        let mut k = matmul_transposed(&u, &blk.k_weight)?;
        add_row_bias(&mut k, blk.k_bias.data())?;
        let mut v = matmul_transposed(&u, &blk.v_weight)?;
        add_row_bias(&mut v, blk.v_bias.data())?;

        let mut heads_out = vec![0.0f32; n1 * d];
        let mut cls_attention = Vec::with_capacity(heads * n1);
        for h in 0..heads {
            let qh = columns(&q, h * dh, dh);
            let kh = columns(&k, h * dh, dh);
            let vh = columns(&v, h * dh, dh);
            let logits = matmul_transposed(&qh, &kh)?;
            let scaled = Tensor::new(
                vec![n1, n1],
                logits.data().iter().map(|&x| (x as f64 * scale) as f32).collect(),
            )?;
            let attn = softmax_rows(&scaled)?;
            cls_attention.extend_from_slice(attn.row(0));
            let oh = matmul_transposed(&attn, &transpose(&vh))?;
            for t in 0..n1 {
                heads_out[t * d + h * dh..t * d + (h + 1) * dh].copy_from_slice(oh.row(t));
            }
        }
        let mut msa = matmul_transposed(&Tensor::new(vec![n1, d], heads_out)?, &blk.out_weight)?;
        add_row_bias(&mut msa, blk.out_bias.data())?;
        let y = add(&z, &msa)?;

        let y_hat = layer_norm_rows(&y, blk.ln2_gamma.data(), blk.ln2_beta.data(), spec.ln_eps)?;
        let mut hidden = matmul_transposed(&y_hat, &blk.fc_weight)?;
        add_row_bias(&mut hidden, blk.fc_bias.data())?;
        let mut mlp = matmul_transposed(&activation(spec.activation, &hidden), &blk.proj_weight)?;
        add_row_bias(&mut mlp, blk.proj_bias.data())?;
        z = add(&y, &mlp)?;

        blocks.push(LayerRecord {
            input,
            cls_attention: Tensor::new(vec![heads, n1], cls_attention)?,
            values: v,
            mlp_cls: mlp.row(0).to_vec(),
        });
    }

    let final_cls = z.row(0).to_vec();
    let xs: Vec<f64> = final_cls.iter().map(|&v| v as f64).collect();
    let final_mean = xs.iter().sum::<f64>() / d as f64;
    let fold = LnFold::from_stream(&final_cls, weights.ln_post_gamma.data(), spec.ln_eps)?;
    let normed = layer_norm(
        &final_cls,
        weights.ln_post_gamma.data(),
        weights.ln_post_beta.data(),
        spec.ln_eps,
    )?;
    let embedding = project(&normed.iter().map(|&v| v as f64).collect::<Vec<_>>(), &weights.proj);

    Ok((
        embedding.clone(),
        ResidualRecord {
            layers: spec.layers,
            heads,
            tokens: n1,
            d_model: d,
            initial_cls,
            blocks,
            final_cls,
            final_mean,
            final_sigma: fold.sigma,
            embedding,
        },
    ))
}

/// `x · P` for `P: [d_model, d_embed]`, returned in `f32`.
fn project(x: &[f64], proj: &Tensor) -> Vec<f32> {
    project64(x, proj).into_iter().map(|v| v as f32).collect()
}

fn project64(x: &[f64], proj: &Tensor) -> Vec<f64> {
    let e = proj.cols();
    let p = proj.data();
    let mut out = vec![0.0f64; e];
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        for (j, o) in out.iter_mut().enumerate() {
            *o += xk * p[k * e + j] as f64;
        }
    }
    out
}

/// Splits the recorded class embedding into `m_{i,l,h}` and `ε`.
pub fn decompose(weights: &WeightArchive, record: &ResidualRecord) -> Result<ContributionRecord> {
    let spec = &weights.spec;
    let n1 = spec.spatial_tokens() + 1;
    if record.layers != spec.layers
        || record.heads != spec.heads
        || record.tokens != n1
        || record.d_model != spec.d_model
        || record.blocks.len() != spec.layers
    {
        return Err(Error::Shape(format!(
            "record (L={}, H={}, tokens={}, d={}) does not match weights (L={}, H={}, tokens={n1}, d={})",
            record.layers, record.heads, record.tokens, record.d_model,
            spec.layers, spec.heads, spec.d_model
        )));
    }
    let (d, dh, e) = (spec.d_model, spec.d_head(), spec.d_embed);
    let fold = LnFold {
        gamma: weights.ln_post_gamma.data().to_vec(),
        sigma: record.final_sigma,
    };
    let to64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let fold_project = |part: &[f64]| project(&fold.apply(part), &weights.proj);

    let mut m = Vec::with_capacity(spec.layers * spec.heads * n1 * e);
    for (blk, rec) in weights.blocks.iter().zip(&record.blocks) {
        let w_out = blk.out_weight.data();
        for h in 0..spec.heads {
            let attn = rec.cls_attention.row(h);
            for (i, &alpha) in attn.iter().enumerate() {
                let v = &rec.values.row(i)[h * dh..(h + 1) * dh];
                // W_O^{l,h}(α v): the head's column block of the output projection.
                let mut u = vec![0.0f64; d];
                for (j, uj) in u.iter_mut().enumerate() {
                    let row = &w_out[j * d + h * dh..j * d + (h + 1) * dh];
                    *uj = alpha as f64 * dot(row, v);
                }
                let folded = fold.apply(&u);
                m.extend(project64(&folded, &weights.proj).into_iter().map(|x| x as f32));
            }
        }
    }

    let eps = EpsComponents {
        initial_cls: fold_project(&to64(&record.initial_cls)),
        attn_bias: weights
            .blocks
            .iter()
            .map(|b| fold_project(&to64(b.out_bias.data())))
            .collect(),
        mlp: record.blocks.iter().map(|r| fold_project(&to64(&r.mlp_cls))).collect(),
        ln_beta: project(&to64(weights.ln_post_beta.data()), &weights.proj),
    };

    Ok(ContributionRecord {
        model_id: spec.model_id.clone(),
        layers: spec.layers,
        heads: spec.heads,
        tokens: n1,
        d_embed: e,
        grid: spec.grid(),
        m: Tensor::new(vec![spec.layers, spec.heads, n1, e], m)?,
        eps,
        image_norm: norm(&record.embedding),
    })
}

/// Scores any direction without the unit-norm check. The terms are linear
/// in `direction`.
pub fn score_direction(
    contrib: &ContributionRecord,
    name: &str,
    direction: &[f32],
    logit_scale: f32,
) -> Result<ScoredMaps> {
    if direction.len() != contrib.d_embed {
        return Err(Error::Shape(format!(
            "concept `{name}` has width {}, embeddings are {}",
            direction.len(),
            contrib.d_embed
        )));
    }
    if contrib.image_norm == 0.0 {
        return Err(Error::Invalid("image embedding has zero norm".into()));
    }
    let k = logit_scale as f64 / contrib.image_norm;
    let a: Vec<f32> = contrib
        .m
        .data()
        .chunks(contrib.d_embed)
        .map(|mv| (k * dot(mv, direction)) as f32)
        .collect();
    let eps = contrib.eps.iter().map(|v| k * dot(v, direction)).sum::<f64>();
    ScoredMaps::new(name, contrib.layers, contrib.heads, contrib.tokens, a, eps)
}

/// `A_{i,l,h} = logit_scale·⟨m_{i,l,h}, t⟩ / ‖M_img‖` for a unit concept `t`.
pub fn score_concept(
    contrib: &ContributionRecord,
    name: &str,
    concept: &[f32],
    logit_scale: f32,
) -> Result<ScoredMaps> {
    let n = norm(concept);
    if (n - 1.0).abs() > 1e-5 {
        return Err(Error::Invalid(format!("concept `{name}` has norm {n}, expected 1")));
    }
    score_direction(contrib, name, concept, logit_scale)
}

/// Reshapes every `A_{l,h}` onto the patch grid. Cell `(r, c)` holds token
/// `1 + r·cols + c`; token 0 goes to `cls`.
pub fn spatial_maps(sm: &ScoredMaps, grid: (usize, usize)) -> Result<HeadMaps> {
    let (rows, cols) = grid;
    if rows * cols + 1 != sm.tokens {
        return Err(Error::Shape(format!(
            "grid {rows}×{cols} does not hold {} patch tokens",
            sm.tokens.saturating_sub(1)
        )));
    }
    let mut maps = Vec::with_capacity(sm.layers * sm.heads);
    let mut cls = Vec::with_capacity(sm.layers * sm.heads);
    for l in 0..sm.layers {
        for h in 0..sm.heads {
            let slice = sm.head_slice(l, h);
            cls.push(slice[0] as f64);
            maps.push(GridMap::new(
                rows,
                cols,
                slice[1..].iter().map(|&v| v as f64).collect(),
            )?);
        }
    }
    Ok(HeadMaps {
        concept: sm.concept.clone(),
        layers: sm.layers,
        heads: sm.heads,
        maps,
        cls,
        eps: sm.eps,
        s: sm.s,
    })
}

/// `logit_scale · cos(embedding, concept)`, computed directly.
pub fn direct_score(embedding: &[f32], concept: &[f32], logit_scale: f32) -> f64 {
    logit_scale as f64 * dot(embedding, concept) / (norm(embedding) * norm(concept))
}
