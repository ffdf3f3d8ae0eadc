//! ViT-B/16 forward pass with capture of every block output and the
//! head-averaged post-softmax attention of every layer.
//!
//! The recurrence per block is pre-norm: attention with a residual, then a
//! two-layer GELU MLP with a residual. The captured `z[l]` is the block
//! output after the MLP residual; `attn[l]` is the arithmetic mean over
//! heads of the post-softmax attention (row = query token, column = key
//! token).

use serde::{Deserialize, Serialize};

use crate::archive::NamedTensorMap;
use crate::error::{Error, Result};
use crate::image::{bilinear_resize, Rgb8Image};
use crate::rng::SplitMix64;
use crate::tensor::{
    self, gelu, layer_norm, linear, softmax_rows, unfold_patches, GeluKind, Tensor,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Input image side in pixels (square input).
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Per-channel normalization constants applied after scaling to `[0,1]`.
    pub norm_mean: Vec<f32>,
    pub norm_std: Vec<f32>,
    pub ln_eps: f32,
    pub gelu: GeluKindConfig,
}

/// Serde-friendly mirror of [`GeluKind`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeluKindConfig {
    #[default]
    Tanh,
    Exact,
}

impl From<GeluKindConfig> for GeluKind {
    fn from(value: GeluKindConfig) -> Self {
        match value {
            GeluKindConfig::Tanh => GeluKind::Tanh,
            GeluKindConfig::Exact => GeluKind::Exact,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_side: 224,
            patch_side: 16,
            channels: 3,
            embed_dim: 768,
            layers: 12,
            heads: 12,
            mlp_dim: 3072,
            norm_mean: vec![0.5; 3],
            norm_std: vec![0.5; 3],
            ln_eps: 1e-6,
            gelu: GeluKindConfig::Tanh,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and oracle comparisons.
    pub fn toy(image_side: usize, patch_side: usize, channels: usize, embed_dim: usize) -> Self {
        ModelConfig {
            image_side,
            patch_side,
            channels,
            embed_dim,
            layers: 2,
            heads: 1,
            mlp_dim: embed_dim * 2,
            norm_mean: vec![0.5; channels],
            norm_std: vec![0.5; channels],
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 || !self.image_side.is_multiple_of(self.patch_side) {
            return Err(Error::InvalidArgument(format!(
                "image side {} not divisible by patch side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "embed dim {} not divisible by head count {}",
                self.embed_dim, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::InvalidArgument("layer count must be >= 1".into()));
        }
        if self.norm_mean.len() != self.channels || self.norm_std.len() != self.channels {
            return Err(Error::InvalidArgument(format!(
                "normalization constants must have {} channels",
                self.channels
            )));
        }
        if self.norm_std.contains(&0.0) {
            return Err(Error::InvalidArgument("zero norm std".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    /// N, the patch count.
    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// N + 1, the token count including the class token.
    pub fn tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn patch_len(&self) -> usize {
        self.patch_side * self.patch_side * self.channels
    }
}

/// The canonical weight names and shapes for a configuration, excluding the
/// optional classifier head.
pub fn weight_manifest(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let mut out = vec![
        ("patch_embed.weight".to_string(), vec![d, cfg.patch_len()]),
        ("patch_embed.bias".to_string(), vec![d]),
        ("cls_token".to_string(), vec![d]),
        ("pos_embed".to_string(), vec![cfg.tokens(), d]),
    ];
    for l in 0..cfg.layers {
        for part in ["ln1", "ln2"] {
            out.push((format!("blocks.{l}.{part}.weight"), vec![d]));
            out.push((format!("blocks.{l}.{part}.bias"), vec![d]));
        }
        for part in ["q", "k", "v", "proj"] {
            out.push((format!("blocks.{l}.attn.{part}.weight"), vec![d, d]));
            out.push((format!("blocks.{l}.attn.{part}.bias"), vec![d]));
        }
        out.push((format!("blocks.{l}.mlp.fc1.weight"), vec![cfg.mlp_dim, d]));
        out.push((format!("blocks.{l}.mlp.fc1.bias"), vec![cfg.mlp_dim]));
        out.push((format!("blocks.{l}.mlp.fc2.weight"), vec![d, cfg.mlp_dim]));
        out.push((format!("blocks.{l}.mlp.fc2.bias"), vec![d]));
    }
    out.push(("norm.weight".to_string(), vec![d]));
    out.push(("norm.bias".to_string(), vec![d]));
    out
}

/// Check that a tensor map satisfies the manifest; the classifier head is
/// optional but must be shape-consistent when present.
pub fn validate_weights(weights: &NamedTensorMap, cfg: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    for (name, shape) in weight_manifest(cfg) {
        let tensor = weights
            .get(&name)
            .map_err(|_| Error::Format(format!("weight manifest violation: missing {name:?}")))?;
        if tensor.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "weight manifest violation: {name:?} has shape {:?}, expected {shape:?}",
                tensor.shape()
            )));
        }
    }
    if weights.contains("head.weight") {
        let w = weights.get("head.weight")?;
        if w.rank() != 2 || w.shape()[1] != cfg.embed_dim {
            return Err(Error::Format(format!(
                "head.weight has shape {:?}, expected [K, {}]",
                w.shape(),
                cfg.embed_dim
            )));
        }
        let b = weights.get("head.bias").map_err(|_| {
            Error::Format("head.weight present without head.bias".into())
        })?;
        if b.shape() != [w.shape()[0]] {
            return Err(Error::Format(format!(
                "head.bias has shape {:?}, expected [{}]",
                b.shape(),
                w.shape()[0]
            )));
        }
    }
    Ok(())
}

/// Per-layer block outputs and head-averaged attention for one image.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `z[0]` is the layer-0 embedding matrix, `z[l]` the block-`l` output;
    /// length `layers + 1`, each `[(N+1), D]`.
    pub z: Vec<Tensor>,
    /// Head-averaged post-softmax attention per block; length `layers`,
    /// each `[(N+1), (N+1)]`.
    pub attn: Vec<Tensor>,
    /// Classifier logits when head weights are present.
    pub logits: Option<Tensor>,
}

impl ForwardTrace {
    pub fn layers(&self) -> usize {
        self.attn.len()
    }

    pub fn tokens(&self) -> usize {
        self.z[0].shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.z[0].shape()[1]
    }

    /// Patch-token embeddings of one layer (class row dropped): `[N, D]`.
    pub fn patch_matrix(&self, layer: usize) -> Result<Tensor> {
        let z = self.z.get(layer).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "layer {layer} out of range 0..={}",
                self.z.len() - 1
            ))
        })?;
        let (tokens, d) = (z.shape()[0], z.shape()[1]);
        let data = z.data()[d..tokens * d].to_vec();
        Tensor::new(vec![tokens - 1, d], data)
    }

    /// Last layer's attention from the class token to each patch token
    /// (`N` values), the per-point weight plotted alongside 2-D embeddings.
    pub fn class_attention(&self) -> Vec<f32> {
        let a = self.attn.last().expect("trace has at least one layer");
        a.row(0)[1..].to_vec()
    }
}

/// Scale to `[0,1]`, bilinear-resize to the model's input size, then
/// normalize per channel.
pub fn preprocess(image: &Rgb8Image, cfg: &ModelConfig) -> Result<Tensor> {
    if image.width == 0 || image.height == 0 {
        return Err(Error::InvalidArgument("zero-sized image".into()));
    }
    let mut f01 = Vec::with_capacity(image.width * image.height * cfg.channels);
    match cfg.channels {
        3 => f01.extend(image.data.iter().map(|&v| v as f32 / 255.0)),
        1 => {
            for px in image.data.chunks_exact(3) {
                let gray = (px[0] as f32 + px[1] as f32 + px[2] as f32) / 3.0;
                f01.push(gray / 255.0);
            }
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "unsupported channel count {other} (1 or 3)"
            )))
        }
    }
    preprocess_f01(&f01, image.width, image.height, cfg)
}

/// Same as [`preprocess`] but starting from `[0,1]`-scaled float pixels.
pub fn preprocess_f01(src: &[f32], width: usize, height: usize, cfg: &ModelConfig) -> Result<Tensor> {
    cfg.validate()?;
    if width == 0 || height == 0 || src.len() != width * height * cfg.channels {
        return Err(Error::ShapeMismatch(format!(
            "pixel buffer {} does not match {width}x{height}x{}",
            src.len(),
            cfg.channels
        )));
    }
    let side = cfg.image_side;
    let resized = bilinear_resize(src, width, height, cfg.channels, side, side);
    let mut data = resized;
    for px in data.chunks_exact_mut(cfg.channels) {
        for (c, v) in px.iter_mut().enumerate() {
            *v = (*v - cfg.norm_mean[c]) / cfg.norm_std[c];
        }
    }
    Tensor::new(vec![side, side, cfg.channels], data)
}

/// The normalized-space value of a raw black pixel, per channel. This is
/// what "occlude to zero" means when the drop is applied after
/// preprocessing.
pub fn normalized_black(cfg: &ModelConfig) -> Vec<f32> {
    cfg.norm_mean
        .iter()
        .zip(&cfg.norm_std)
        .map(|(&m, &s)| -m / s)
        .collect()
}

/// Layer-0 embedding matrix: class token row plus projected patches, with
/// position encodings added.
pub fn embed_layer0(image: &Tensor, weights: &NamedTensorMap, cfg: &ModelConfig) -> Result<Tensor> {
    validate_weights(weights, cfg)?;
    if image.shape() != [cfg.image_side, cfg.image_side, cfg.channels] {
        return Err(Error::ShapeMismatch(format!(
            "image shape {:?} does not match config",
            image.shape()
        )));
    }
    let patches = unfold_patches(image, cfg.patch_side)?;
    let proj = linear(
        &patches,
        weights.get("patch_embed.weight")?,
        weights.get("patch_embed.bias")?,
    )?;
    let cls = weights.get("cls_token")?;
    let pos = weights.get("pos_embed")?;
    let d = cfg.embed_dim;
    let mut data = Vec::with_capacity(cfg.tokens() * d);
    for (c, p) in cls.data().iter().zip(pos.row(0)) {
        data.push(c + p);
    }
    for i in 0..cfg.n_patches() {
        for (v, p) in proj.row(i).iter().zip(pos.row(i + 1)) {
            data.push(v + p);
        }
    }
    Tensor::new(vec![cfg.tokens(), d], data)
}

/// Attention projection weights of one block.
pub struct AttentionWeights<'a> {
    pub query_w: &'a Tensor,
    pub query_b: &'a Tensor,
    pub key_w: &'a Tensor,
    pub key_b: &'a Tensor,
    pub value_w: &'a Tensor,
    pub value_b: &'a Tensor,
    pub proj_w: &'a Tensor,
    pub proj_b: &'a Tensor,
}

impl<'a> AttentionWeights<'a> {
    pub fn from_map(weights: &'a NamedTensorMap, layer: usize) -> Result<Self> {
        Ok(AttentionWeights {
            query_w: weights.get(&format!("blocks.{layer}.attn.q.weight"))?,
            query_b: weights.get(&format!("blocks.{layer}.attn.q.bias"))?,
            key_w: weights.get(&format!("blocks.{layer}.attn.k.weight"))?,
            key_b: weights.get(&format!("blocks.{layer}.attn.k.bias"))?,
            value_w: weights.get(&format!("blocks.{layer}.attn.v.weight"))?,
            value_b: weights.get(&format!("blocks.{layer}.attn.v.bias"))?,
            proj_w: weights.get(&format!("blocks.{layer}.attn.proj.weight"))?,
            proj_b: weights.get(&format!("blocks.{layer}.attn.proj.bias"))?,
        })
    }
}

/// Multi-head self-attention over an already-normalized input. Returns the
/// projected output (residual is added by the caller) and the head-averaged
/// post-softmax attention.
pub fn attention_block(
    x_normed: &Tensor,
    w: &AttentionWeights<'_>,
    heads: usize,
) -> Result<(Tensor, Tensor)> {
    let (tokens, d) = (x_normed.shape()[0], x_normed.shape()[1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "dim {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let q = linear(x_normed, w.query_w, w.query_b)?;
    let k = linear(x_normed, w.key_w, w.key_b)?;
    let v = linear(x_normed, w.value_w, w.value_b)?;

    let mut concat = vec![0.0f32; tokens * d];
    let mut attn_avg = vec![0.0f32; tokens * tokens];
    let inv_heads = 1.0 / heads as f32;
    let mut head_q = vec![0.0f32; tokens * dh];
    let mut head_k = vec![0.0f32; tokens * dh];
    let mut head_v = vec![0.0f32; tokens * dh];
    for h in 0..heads {
        let off = h * dh;
        for t in 0..tokens {
            head_q[t * dh..(t + 1) * dh].copy_from_slice(&q.row(t)[off..off + dh]);
            head_k[t * dh..(t + 1) * dh].copy_from_slice(&k.row(t)[off..off + dh]);
            head_v[t * dh..(t + 1) * dh].copy_from_slice(&v.row(t)[off..off + dh]);
        }
        let mut logits = vec![0.0f32; tokens * tokens];
        for i in 0..tokens {
            let qi = &head_q[i * dh..(i + 1) * dh];
            for j in 0..tokens {
                let kj = &head_k[j * dh..(j + 1) * dh];
                logits[i * tokens + j] = tensor::dot(qi, kj) * scale;
            }
        }
        let probs = softmax_rows(&Tensor::new(vec![tokens, tokens], logits)?)?;
        for (acc, &p) in attn_avg.iter_mut().zip(probs.data()) {
            *acc += p * inv_heads;
        }
        // probs . head_v, written into this head's slice of the concat.
        for i in 0..tokens {
            let prow = probs.row(i);
            let orow = &mut concat[i * d + off..i * d + off + dh];
            for (j, &p) in prow.iter().enumerate() {
                let vrow = &head_v[j * dh..(j + 1) * dh];
                for (o, &vv) in orow.iter_mut().zip(vrow) {
                    *o += p * vv;
                }
            }
        }
    }
    let concat = Tensor::new(vec![tokens, d], concat)?;
    let out = linear(&concat, w.proj_w, w.proj_b)?;
    let attn_avg = Tensor::new(vec![tokens, tokens], attn_avg)?;
    Ok((out, attn_avg))
}

fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "add: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Run the full forward pass, recording every block output and every
/// head-averaged attention matrix.
pub fn forward_trace(
    image: &Tensor,
    weights: &NamedTensorMap,
    cfg: &ModelConfig,
) -> Result<ForwardTrace> {
    let mut z = Vec::with_capacity(cfg.layers + 1);
    let mut attn = Vec::with_capacity(cfg.layers);
    z.push(embed_layer0(image, weights, cfg)?);
    for l in 0..cfg.layers {
        let prev = z.last().unwrap();
        let ln1_w = weights.get(&format!("blocks.{l}.ln1.weight"))?;
        let ln1_b = weights.get(&format!("blocks.{l}.ln1.bias"))?;
        let normed = layer_norm(prev, ln1_w, ln1_b, cfg.ln_eps)?;
        let (msa, attn_avg) = attention_block(&normed, &AttentionWeights::from_map(weights, l)?, cfg.heads)?;
        let mid = add(prev, &msa)?;

        let ln2_w = weights.get(&format!("blocks.{l}.ln2.weight"))?;
        let ln2_b = weights.get(&format!("blocks.{l}.ln2.bias"))?;
        let normed2 = layer_norm(&mid, ln2_w, ln2_b, cfg.ln_eps)?;
        let hidden = linear(
            &normed2,
            weights.get(&format!("blocks.{l}.mlp.fc1.weight"))?,
            weights.get(&format!("blocks.{l}.mlp.fc1.bias"))?,
        )?;
        let hidden = gelu(&hidden, cfg.gelu.into())?;
        let mlp = linear(
            &hidden,
            weights.get(&format!("blocks.{l}.mlp.fc2.weight"))?,
            weights.get(&format!("blocks.{l}.mlp.fc2.bias"))?,
        )?;
        z.push(add(&mid, &mlp)?);
        attn.push(attn_avg);
    }

    let logits = if weights.contains("head.weight") {
        let final_norm = layer_norm(
            z.last().unwrap(),
            weights.get("norm.weight")?,
            weights.get("norm.bias")?,
            cfg.ln_eps,
        )?;
        let cls = Tensor::new(vec![1, cfg.embed_dim], final_norm.row(0).to_vec())?;
        let out = linear(&cls, weights.get("head.weight")?, weights.get("head.bias")?)?;
        Some(Tensor::new(vec![out.shape()[1]], out.data().to_vec())?)
    } else {
        None
    };

    Ok(ForwardTrace { z, attn, logits })
}

/// Synthetic weights drawn from scaled uniform distributions; valid per the
/// manifest. Used by tests, benchmarks, and smoke runs without a
/// checkpoint.
pub fn random_weights(cfg: &ModelConfig, seed: u64) -> NamedTensorMap {
    let mut rng = SplitMix64::new(seed);
    let mut map = NamedTensorMap::new();
    for (name, shape) in weight_manifest(cfg) {
        let n: usize = shape.iter().product();
        let tensor = if name.ends_with("ln1.weight")
            || name.ends_with("ln2.weight")
            || name == "norm.weight"
        {
            let data = (0..n).map(|_| rng.uniform(0.7, 1.3) as f32).collect();
            Tensor::new(shape, data).unwrap()
        } else {
            // fan-in scaled uniform keeps 12 layers of activations tame
            let fan_in = *shape.last().unwrap() as f64;
            let bound = 1.0 / fan_in.sqrt();
            let data = (0..n).map(|_| rng.uniform(-bound, bound) as f32).collect();
            Tensor::new(shape, data).unwrap()
        };
        map.insert(name, tensor);
    }
    map
}

/// All-zero weights (useful for degenerate-case tests).
pub fn zero_weights(cfg: &ModelConfig) -> NamedTensorMap {
    let mut map = NamedTensorMap::new();
    for (name, shape) in weight_manifest(cfg) {
        map.insert(name, Tensor::zeros(shape));
    }
    map
}
