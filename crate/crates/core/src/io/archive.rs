//! Weight archives in the safetensors container layout: an 8-byte
//! little-endian header length, a JSON header mapping tensor names to
//! `{dtype, shape, data_offsets}`, then the raw little-endian payload.
//! Model hyperparameters travel in the header's `__metadata__` map.
//!
//! Canonical tensor names follow the CLIP visual tower:
//!
//! | name | shape |
//! |------|-------|
//! | `visual.conv1.weight` | `[d_model, 3, patch, patch]` |
//! | `visual.class_embedding` | `[d_model]` |
//! | `visual.positional_embedding` | `[N + 1, d_model]` |
//! | `visual.ln_pre.{weight,bias}` (optional) | `[d_model]` |
//! | `visual.transformer.resblocks.{l}.ln_1.{weight,bias}` | `[d_model]` |
//! | `….attn.in_proj_weight` / `….attn.in_proj_bias` | `[3·d_model, d_model]` / `[3·d_model]` |
//! | or `….attn.{q,k,v}_proj.{weight,bias}` | `[d_model, d_model]` / `[d_model]` |
//! | `….attn.out_proj.{weight,bias}` | `[d_model, d_model]` / `[d_model]` |
//! | `….ln_2.{weight,bias}` | `[d_model]` |
//! | `….mlp.c_fc.{weight,bias}` | `[d_mlp, d_model]` / `[d_mlp]` |
//! | `….mlp.c_proj.{weight,bias}` | `[d_model, d_mlp]` / `[d_model]` |
//! | `visual.ln_post.{weight,bias}` | `[d_model]` |
//! | `visual.proj` | `[d_model, d_embed]` |

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CONV1: &str = "visual.conv1.weight";
pub const CLASS_EMBEDDING: &str = "visual.class_embedding";
pub const POSITIONAL_EMBEDDING: &str = "visual.positional_embedding";
pub const LN_PRE: &str = "visual.ln_pre";
pub const LN_POST: &str = "visual.ln_post";
pub const PROJ: &str = "visual.proj";

pub fn block_prefix(layer: usize) -> String {
    format!("visual.transformer.resblocks.{layer}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    QuickGelu,
}

/// Hyperparameters of the visual encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: String,
    pub layers: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub d_model: usize,
    pub d_embed: usize,
    pub d_mlp: usize,
    pub logit_scale: f32,
    pub ln_eps: f32,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_side(), self.grid_side())
    }

    /// Number of patch tokens `N` (the class token is extra).
    pub fn spatial_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(format!("model spec: {msg}")));
        if self.layers == 0 || self.heads == 0 {
            return bad(format!("layers={} heads={}", self.layers, self.heads));
        }
        if self.d_model == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 || self.image_size == 0 {
            return bad(format!(
                "image_size {} not a multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.d_embed == 0 || self.d_mlp == 0 {
            return bad("zero embedding or MLP width".into());
        }
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return bad(format!("logit_scale {} must be > 0", self.logit_scale));
        }
        if !(self.ln_eps.is_finite() && self.ln_eps > 0.0) {
            return bad(format!("ln_eps {} must be > 0", self.ln_eps));
        }
        Ok(())
    }

    fn to_metadata(&self) -> HashMap<String, String> {
        let act = match self.activation {
            Activation::Gelu => "gelu",
            Activation::QuickGelu => "quick_gelu",
        };
        HashMap::from([
            ("model_id".to_string(), self.model_id.clone()),
            ("layers".to_string(), self.layers.to_string()),
            ("heads".to_string(), self.heads.to_string()),
            ("patch_size".to_string(), self.patch_size.to_string()),
            ("image_size".to_string(), self.image_size.to_string()),
            ("d_model".to_string(), self.d_model.to_string()),
            ("d_embed".to_string(), self.d_embed.to_string()),
            ("d_mlp".to_string(), self.d_mlp.to_string()),
            ("logit_scale".to_string(), self.logit_scale.to_string()),
            ("ln_eps".to_string(), self.ln_eps.to_string()),
            ("activation".to_string(), act.to_string()),
        ])
    }

    fn from_metadata(meta: &HashMap<String, String>) -> Result<Self> {
        fn req<T: std::str::FromStr>(meta: &HashMap<String, String>, key: &str) -> Result<T> {
            let raw = meta
                .get(key)
                .ok_or_else(|| Error::Invalid(format!("archive metadata lacks `{key}`")))?;
            raw.parse()
                .map_err(|_| Error::Invalid(format!("archive metadata `{key}`={raw:?} unparsable")))
        }
        fn opt<T: std::str::FromStr>(
            meta: &HashMap<String, String>,
            key: &str,
            default: T,
        ) -> Result<T> {
            if meta.contains_key(key) {
                req(meta, key)
            } else {
                Ok(default)
            }
        }
        let activation = match meta.get("activation").map(String::as_str) {
            None | Some("gelu") => Activation::Gelu,
            Some("quick_gelu") => Activation::QuickGelu,
            Some(other) => {
                return Err(Error::Invalid(format!("unknown activation {other:?}")));
            }
        };
        let d_model: usize = req(meta, "d_model")?;
        let spec = ModelSpec {
            model_id: meta.get("model_id").cloned().unwrap_or_default(),
            layers: req(meta, "layers")?,
            heads: req(meta, "heads")?,
            patch_size: req(meta, "patch_size")?,
            image_size: req(meta, "image_size")?,
            d_model,
            d_embed: req(meta, "d_embed")?,
            d_mlp: opt(meta, "d_mlp", 4 * d_model)?,
            logit_scale: opt(meta, "logit_scale", 100.0)?,
            ln_eps: opt(meta, "ln_eps", 1e-5)?,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Per-block parameters, PyTorch `Linear` layout (`out × in`).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub q_weight: Tensor,
    pub q_bias: Tensor,
    pub k_weight: Tensor,
    pub k_bias: Tensor,
    pub v_weight: Tensor,
    pub v_bias: Tensor,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightArchive {
    pub spec: ModelSpec,
    /// `[d_model, 3·patch·patch]`, the flattened patch convolution.
    pub patch_embed: Tensor,
    pub class_embedding: Tensor,
    pub positional_embedding: Tensor,
    pub ln_pre: Option<(Tensor, Tensor)>,
    pub blocks: Vec<BlockWeights>,
    pub ln_post_gamma: Tensor,
    pub ln_post_beta: Tensor,
    /// `[d_model, d_embed]`.
    pub proj: Tensor,
}

struct Named<'a> {
    tensors: HashMap<String, TensorView<'a>>,
}

impl Named<'_> {
    fn take(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let view = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        self.decode(name, view, shape)
    }

    fn has(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    fn decode(&self, name: &str, view: &TensorView<'_>, shape: &[usize]) -> Result<Tensor> {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Invalid(format!(
                "tensor `{name}` has dtype {:?}, only F32 is supported",
                view.dtype()
            )));
        }
        if view.shape() != shape {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: view.shape().to_vec(),
            });
        }
        let data: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor `{name}`")));
        }
        Tensor::new(shape.to_vec(), data)
    }
}

fn split_rows(t: &Tensor, parts: usize) -> Result<Vec<Tensor>> {
    let (rows, cols) = match t.shape() {
        [n] => (n / parts, 1),
        _ => (t.rows() / parts, t.cols()),
    };
    let mut out = Vec::with_capacity(parts);
    for p in 0..parts {
        let chunk = t.data()[p * rows * cols..(p + 1) * rows * cols].to_vec();
        let shape = if t.shape().len() == 1 {
            vec![rows]
        } else {
            vec![rows, cols]
        };
        out.push(Tensor::new(shape, chunk)?);
    }
    Ok(out)
}

impl WeightArchive {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, metadata) = SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::Invalid(format!("archive header: {e}")))?;
        let meta = metadata.metadata().clone().unwrap_or_default();
        let spec = ModelSpec::from_metadata(&meta)?;
        let st = SafeTensors::deserialize(bytes)
            .map_err(|e| Error::Invalid(format!("archive payload: {e}")))?;
        let named = Named {
            tensors: st.tensors().into_iter().collect(),
        };

        let d = spec.d_model;
        let p = spec.patch_size;
        let n1 = spec.spatial_tokens() + 1;

        let conv = named.take(CONV1, &[d, 3, p, p])?;
        let patch_embed = conv.reshape(vec![d, 3 * p * p])?;
        let class_embedding = named.take(CLASS_EMBEDDING, &[d])?;
        let positional_embedding = named.take(POSITIONAL_EMBEDDING, &[n1, d])?;
        let ln_pre = if named.has(&format!("{LN_PRE}.weight")) {
            Some((
                named.take(&format!("{LN_PRE}.weight"), &[d])?,
                named.take(&format!("{LN_PRE}.bias"), &[d])?,
            ))
        } else {
            None
        };

        let mut blocks = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            let pre = block_prefix(l);
            let fused = format!("{pre}.attn.in_proj_weight");
            let (qkv_w, qkv_b) = if named.has(&fused) {
                let w = named.take(&fused, &[3 * d, d])?;
                let b = named.take(&format!("{pre}.attn.in_proj_bias"), &[3 * d])?;
                (split_rows(&w, 3)?, split_rows(&b, 3)?)
            } else {
                let mut ws = Vec::new();
                let mut bs = Vec::new();
                for which in ["q", "k", "v"] {
                    ws.push(named.take(&format!("{pre}.attn.{which}_proj.weight"), &[d, d])?);
                    bs.push(named.take(&format!("{pre}.attn.{which}_proj.bias"), &[d])?);
                }
                (ws, bs)
            };
            let mut qkv_w = qkv_w.into_iter();
            let mut qkv_b = qkv_b.into_iter();
            blocks.push(BlockWeights {
                ln1_gamma: named.take(&format!("{pre}.ln_1.weight"), &[d])?,
                ln1_beta: named.take(&format!("{pre}.ln_1.bias"), &[d])?,
                q_weight: qkv_w.next().unwrap(),
                k_weight: qkv_w.next().unwrap(),
                v_weight: qkv_w.next().unwrap(),
                q_bias: qkv_b.next().unwrap(),
                k_bias: qkv_b.next().unwrap(),
                v_bias: qkv_b.next().unwrap(),
                out_weight: named.take(&format!("{pre}.attn.out_proj.weight"), &[d, d])?,
                out_bias: named.take(&format!("{pre}.attn.out_proj.bias"), &[d])?,
                ln2_gamma: named.take(&format!("{pre}.ln_2.weight"), &[d])?,
                ln2_beta: named.take(&format!("{pre}.ln_2.bias"), &[d])?,
                fc_weight: named.take(&format!("{pre}.mlp.c_fc.weight"), &[spec.d_mlp, d])?,
                fc_bias: named.take(&format!("{pre}.mlp.c_fc.bias"), &[spec.d_mlp])?,
                proj_weight: named.take(&format!("{pre}.mlp.c_proj.weight"), &[d, spec.d_mlp])?,
                proj_bias: named.take(&format!("{pre}.mlp.c_proj.bias"), &[d])?,
            });
        }

        Ok(Self {
            patch_embed,
            class_embedding,
            positional_embedding,
            ln_pre,
            blocks,
            ln_post_gamma: named.take(&format!("{LN_POST}.weight"), &[d])?,
            ln_post_beta: named.take(&format!("{LN_POST}.bias"), &[d])?,
            proj: named.take(PROJ, &[d, spec.d_embed])?,
            spec,
        })
    }

    /// Canonical `(name, tensor)` pairs. Q/K/V are written fused.
    pub fn named_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let d = self.spec.d_model;
        let p = self.spec.patch_size;
        let mut out = vec![
            (
                CONV1.to_string(),
                self.patch_embed.clone().reshape(vec![d, 3, p, p])?,
            ),
            (CLASS_EMBEDDING.to_string(), self.class_embedding.clone()),
            (POSITIONAL_EMBEDDING.to_string(), self.positional_embedding.clone()),
            (format!("{LN_POST}.weight"), self.ln_post_gamma.clone()),
            (format!("{LN_POST}.bias"), self.ln_post_beta.clone()),
            (PROJ.to_string(), self.proj.clone()),
        ];
        if let Some((g, b)) = &self.ln_pre {
            out.push((format!("{LN_PRE}.weight"), g.clone()));
            out.push((format!("{LN_PRE}.bias"), b.clone()));
        }
        for (l, blk) in self.blocks.iter().enumerate() {
            let pre = block_prefix(l);
            let mut w = Vec::with_capacity(3 * d * d);
            let mut b = Vec::with_capacity(3 * d);
            for (wt, bt) in [
                (&blk.q_weight, &blk.q_bias),
                (&blk.k_weight, &blk.k_bias),
                (&blk.v_weight, &blk.v_bias),
            ] {
                w.extend_from_slice(wt.data());
                b.extend_from_slice(bt.data());
            }
            out.push((format!("{pre}.attn.in_proj_weight"), Tensor::new(vec![3 * d, d], w)?));
            out.push((format!("{pre}.attn.in_proj_bias"), Tensor::new(vec![3 * d], b)?));
            for (suffix, t) in [
                ("ln_1.weight", &blk.ln1_gamma),
                ("ln_1.bias", &blk.ln1_beta),
                ("attn.out_proj.weight", &blk.out_weight),
                ("attn.out_proj.bias", &blk.out_bias),
                ("ln_2.weight", &blk.ln2_gamma),
                ("ln_2.bias", &blk.ln2_beta),
                ("mlp.c_fc.weight", &blk.fc_weight),
                ("mlp.c_fc.bias", &blk.fc_bias),
                ("mlp.c_proj.weight", &blk.proj_weight),
                ("mlp.c_proj.bias", &blk.proj_bias),
            ] {
                out.push((format!("{pre}.{suffix}"), t.clone()));
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        serialize_named(&self.named_tensors()?, self.spec.to_metadata())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }
}

/// Serializes named `f32` tensors plus header metadata.
pub fn serialize_named(
    tensors: &[(String, Tensor)],
    metadata: HashMap<String, String>,
) -> Result<Vec<u8>> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(n, t)| {
            (
                n.clone(),
                t.shape().to_vec(),
                t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            )
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(n, shape, data)| {
            TensorView::new(Dtype::F32, shape.clone(), data).map(|v| (n.clone(), v))
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Invalid(format!("archive tensor: {e}")))?;
    safetensors::tensor::serialize(views, Some(metadata))
        .map_err(|e| Error::Invalid(format!("archive serialization: {e}")))
}

pub fn load_weight_archive(path: impl AsRef<Path>) -> Result<WeightArchive> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    WeightArchive::from_bytes(&bytes)
}
