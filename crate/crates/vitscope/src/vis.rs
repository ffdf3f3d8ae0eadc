//! Neuron and embedding visualization.
//!
//! Layer 0 visualizes a neuron as the element-wise product of one filter
//! with one image patch (a "tile"). Deeper layers are weighted sums of
//! those tiles along attention: layer 1 takes one row of the first
//! head-averaged attention matrix (class key column dropped), and each
//! further layer multiplies by the next attention matrix. Because the
//! recursion is linear in the tiles, a visualization at any depth is fully
//! described by an N-vector of tile coefficients per token; rendering
//! places `coeff[k] * tile_k` at patch position `k`. This keeps deep-layer
//! visualization O(N) per token instead of O(N*H*W).
//!
//! Index conventions: patch and filter indices are 1-based (patch `1..=N`,
//! filter `1..=D`, matching the figure labels); token indices are 0-based
//! with token 0 the class token.

use crate::archive::NamedTensorMap;
use crate::error::{Error, Result};
use crate::image::Rgb8Image;
use crate::model::ForwardTrace;
use crate::tensor::{fold_patches, matmul, unfold_patches, Tensor};

/// How the D per-filter tiles combine into one embedding visualization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverlayMode {
    #[default]
    Mean,
    Sum,
    /// Per pixel, the value of largest magnitude across filters.
    MaxAbs,
}

/// The N layer-0 tiles of one filter over one preprocessed image; tiles
/// are recomputed on demand from the unfolded patches.
pub struct TileBasis {
    patches: Tensor,
    filter: Vec<f32>,
    pub filter_index: usize,
    patch_side: usize,
    channels: usize,
    image_side: usize,
}

impl TileBasis {
    /// `filter` is 1-based (`1..=D`).
    pub fn new(image: &Tensor, weights: &NamedTensorMap, filter: usize) -> Result<Self> {
        if image.rank() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "tile basis wants an [H,W,C] image, got {:?}",
                image.shape()
            )));
        }
        let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        if h != w {
            return Err(Error::ShapeMismatch(format!("non-square image {h}x{w}")));
        }
        let pw = weights.get("patch_embed.weight")?;
        let d = pw.shape()[0];
        if filter == 0 || filter > d {
            return Err(Error::InvalidArgument(format!(
                "filter index {filter} out of range 1..={d}"
            )));
        }
        let patch_len = pw.shape()[1];
        if patch_len % c != 0 {
            return Err(Error::ShapeMismatch(format!(
                "filter length {patch_len} not divisible by {c} channels"
            )));
        }
        let patch_side = ((patch_len / c) as f64).sqrt().round() as usize;
        if patch_side * patch_side * c != patch_len || patch_side == 0 || h % patch_side != 0 {
            return Err(Error::ShapeMismatch(format!(
                "filter length {patch_len} does not tile a {h}x{w}x{c} image"
            )));
        }
        Ok(TileBasis {
            patches: unfold_patches(image, patch_side)?,
            filter: pw.row(filter - 1).to_vec(),
            filter_index: filter,
            patch_side,
            channels: c,
            image_side: h,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn patch_side(&self) -> usize {
        self.patch_side
    }

    pub fn image_side(&self) -> usize {
        self.image_side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Tile of a 1-based patch index, flattened in patch-inner layout.
    pub fn tile_row(&self, patch: usize) -> Result<Vec<f32>> {
        if patch == 0 || patch > self.n_patches() {
            return Err(Error::InvalidArgument(format!(
                "patch index {patch} out of range 1..={}",
                self.n_patches()
            )));
        }
        Ok(self
            .patches
            .row(patch - 1)
            .iter()
            .zip(&self.filter)
            .map(|(p, f)| p * f)
            .collect())
    }

    /// Tile as a `[P,P,C]` tensor.
    pub fn tile(&self, patch: usize) -> Result<Tensor> {
        Tensor::new(
            vec![self.patch_side, self.patch_side, self.channels],
            self.tile_row(patch)?,
        )
    }
}

/// Element-wise product of filter `j` (1-based) with preprocessed patch
/// `i` (1-based): the layer-0 neuron visualization.
pub fn tile(
    image: &Tensor,
    weights: &NamedTensorMap,
    patch: usize,
    filter: usize,
) -> Result<Tensor> {
    TileBasis::new(image, weights, filter)?.tile(patch)
}

/// A rendered visualization: the real-valued field plus its 8-bit display.
#[derive(Debug, Clone)]
pub struct RenderedVis {
    /// Pre-display field, `[h, w, C]` (full image or a single tile).
    pub pixels: Tensor,
    pub display: Rgb8Image,
}

impl RenderedVis {
    pub fn from_pixels(pixels: Tensor) -> Result<Self> {
        let display = normalize_display(&pixels)?;
        Ok(RenderedVis { pixels, display })
    }
}

/// All neurons of one filter column arranged at their patch positions:
/// an `[H,W,C]` image equal to the filter tiled over the whole input.
pub fn layer0_filter_column(
    image: &Tensor,
    weights: &NamedTensorMap,
    filter: usize,
) -> Result<RenderedVis> {
    let basis = TileBasis::new(image, weights, filter)?;
    let n = basis.n_patches();
    let row_len = basis.patch_side * basis.patch_side * basis.channels;
    let mut rows = Vec::with_capacity(n * row_len);
    for k in 1..=n {
        rows.extend(basis.tile_row(k)?);
    }
    let tiles = Tensor::new(vec![n, row_len], rows)?;
    let pixels = fold_patches(&tiles, basis.image_side, basis.image_side, basis.channels)?;
    RenderedVis::from_pixels(pixels)
}

/// One patch embedding visualized by combining its D per-filter tiles.
pub fn layer0_embedding_overlay(
    image: &Tensor,
    weights: &NamedTensorMap,
    patch: usize,
    mode: OverlayMode,
) -> Result<RenderedVis> {
    let pw = weights.get("patch_embed.weight")?;
    let d = pw.shape()[0];
    let first = TileBasis::new(image, weights, 1)?;
    let mut acc = first.tile_row(patch)?;
    for j in 2..=d {
        let row = TileBasis::new(image, weights, j)?.tile_row(patch)?;
        match mode {
            OverlayMode::Mean | OverlayMode::Sum => {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            OverlayMode::MaxAbs => {
                for (a, v) in acc.iter_mut().zip(row) {
                    if v.abs() > a.abs() {
                        *a = v;
                    }
                }
            }
        }
    }
    if mode == OverlayMode::Mean {
        for a in &mut acc {
            *a /= d as f32;
        }
    }
    let pixels = Tensor::new(
        vec![first.patch_side, first.patch_side, first.channels],
        acc,
    )?;
    RenderedVis::from_pixels(pixels)
}

/// Tile-coefficient representation of every token's visualization at one
/// layer: row `i`, column `k` is the weight of tile `k+1` in token `i`'s
/// visualization. Row 0 is the class token. Coefficients do not depend on
/// the filter, so one field serves every filter of its layer.
#[derive(Debug, Clone)]
pub struct CoefficientField {
    pub layer: usize,
    /// `[(N+1), N]`.
    pub coeffs: Tensor,
}

impl CoefficientField {
    pub fn tokens(&self) -> usize {
        self.coeffs.shape()[0]
    }

    pub fn n_patches(&self) -> usize {
        self.coeffs.shape()[1]
    }

    /// Tokens whose coefficient row is entirely zero; they render to the
    /// constant mid-gray convention. Identity-like attention makes the
    /// class row degenerate this way.
    pub fn degenerate_tokens(&self) -> Vec<usize> {
        (0..self.tokens())
            .filter(|&i| self.coeffs.row(i).iter().all(|&v| v == 0.0))
            .collect()
    }

    pub fn row_sums(&self) -> Vec<f32> {
        (0..self.tokens())
            .map(|i| self.coeffs.row(i).iter().sum())
            .collect()
    }
}

fn check_stochastic(attn: &Tensor) -> Result<()> {
    for i in 0..attn.shape()[0] {
        let sum: f32 = attn.row(i).iter().sum();
        if (sum - 1.0).abs() > 1e-3 {
            return Err(Error::Internal(format!(
                "attention row {i} sums to {sum}, not stochastic"
            )));
        }
    }
    Ok(())
}

/// Layer-1 field: one row of the first attention matrix per token, with
/// the class key column dropped (the class embedding does not correspond
/// to a patch, so it contributes no tile).
pub fn coeff_layer1(trace: &ForwardTrace) -> Result<CoefficientField> {
    let attn0 = trace
        .attn
        .first()
        .ok_or_else(|| Error::InvalidArgument("trace has no attention layers".into()))?;
    let tokens = attn0.shape()[0];
    let n = tokens - 1;
    let mut data = Vec::with_capacity(tokens * n);
    for i in 0..tokens {
        data.extend_from_slice(&attn0.row(i)[1..]);
    }
    Ok(CoefficientField {
        layer: 1,
        coeffs: Tensor::new(vec![tokens, n], data)?,
    })
}

/// One propagation step: multiply by the next layer's head-averaged
/// attention. All N+1 tokens participate, including the class row.
pub fn coeff_propagate(prev: &CoefficientField, attn: &Tensor) -> Result<CoefficientField> {
    let tokens = prev.tokens();
    if attn.shape() != [tokens, tokens] {
        return Err(Error::ShapeMismatch(format!(
            "attention {:?} does not match field with {tokens} tokens",
            attn.shape()
        )));
    }
    check_stochastic(attn)?;
    Ok(CoefficientField {
        layer: prev.layer + 1,
        coeffs: matmul(attn, &prev.coeffs)?,
    })
}

/// Field for an arbitrary layer `1..=trace.layers()`, chaining
/// [`coeff_layer1`] and [`coeff_propagate`].
pub fn coeff_field(trace: &ForwardTrace, layer: usize) -> Result<CoefficientField> {
    if layer == 0 || layer > trace.layers() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range 1..={}",
            trace.layers()
        )));
    }
    let mut field = coeff_layer1(trace)?;
    for l in 1..layer {
        field = coeff_propagate(&field, &trace.attn[l])?;
    }
    Ok(field)
}

/// Render one token's visualization: `coeff[k] * tile_k` at patch position
/// `k` for every patch, then display normalization.
pub fn render(field: &CoefficientField, basis: &TileBasis, token: usize) -> Result<RenderedVis> {
    if token >= field.tokens() {
        return Err(Error::InvalidArgument(format!(
            "token {token} out of range 0..={}",
            field.tokens() - 1
        )));
    }
    if field.n_patches() != basis.n_patches() {
        return Err(Error::ShapeMismatch(format!(
            "field over {} patches, basis over {}",
            field.n_patches(),
            basis.n_patches()
        )));
    }
    let n = basis.n_patches();
    let row_len = basis.patch_side * basis.patch_side * basis.channels;
    let coeffs = field.coeffs.row(token);
    let mut rows = Vec::with_capacity(n * row_len);
    for k in 1..=n {
        let c = coeffs[k - 1];
        rows.extend(basis.tile_row(k)?.into_iter().map(|v| c * v));
    }
    let tiles = Tensor::new(vec![n, row_len], rows)?;
    let pixels = fold_patches(&tiles, basis.image_side, basis.image_side, basis.channels)?;
    RenderedVis::from_pixels(pixels)
}

/// Global min-max map to `[0,255]` with half-up rounding; constant input
/// maps to mid-gray 128. Single-channel fields replicate to gray RGB.
pub fn normalize_display(pixels: &Tensor) -> Result<Rgb8Image> {
    if pixels.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "display wants [H,W,C], got {:?}",
            pixels.shape()
        )));
    }
    let (h, w, c) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    if c != 1 && c != 3 {
        return Err(Error::InvalidArgument(format!(
            "display supports 1 or 3 channels, got {c}"
        )));
    }
    let data = pixels.data();
    let min = data.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let bytes: Vec<u8> = if max == min {
        vec![128u8; h * w * c]
    } else {
        let scale = 255.0 / (max - min);
        data.iter()
            .map(|&v| {
                let y = (v - min) * scale;
                (y + 0.5).floor().clamp(0.0, 255.0) as u8
            })
            .collect()
    };
    let rgb = if c == 3 {
        bytes
    } else {
        let mut out = Vec::with_capacity(h * w * 3);
        for b in bytes {
            out.extend_from_slice(&[b, b, b]);
        }
        out
    };
    Rgb8Image::new(w, h, rgb)
}

/// Canonical output name for one rendered visualization.
pub fn vis_filename(layer: usize, token: usize, filter: usize) -> String {
    format!("vis_L{layer}_T{token}_F{filter}.png")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_trace, random_weights, zero_weights, ModelConfig};
    use crate::rng::SplitMix64;

    fn toy_cfg() -> ModelConfig {
        ModelConfig::toy(4, 2, 1, 3)
    }

    fn toy_image(cfg: &ModelConfig) -> Tensor {
        let side = cfg.image_side;
        let data: Vec<f32> = (0..side * side * cfg.channels)
            .map(|i| ((i * 7 % 13) as f32 - 6.0) / 6.0)
            .collect();
        Tensor::new(vec![side, side, cfg.channels], data).unwrap()
    }

    fn set_value(t: &mut Tensor, idx: usize, v: f32) {
        t.data_mut()[idx] = v;
    }

    #[test]
    fn tile_identity_filter_copies_patch() {
        let cfg = toy_cfg();
        let mut weights = zero_weights(&cfg);
        weights.insert("patch_embed.weight", Tensor::filled(vec![3, 4], 1.0));
        let image = toy_image(&cfg);
        let t = tile(&image, &weights, 1, 2).unwrap();
        let patches = unfold_patches(&image, 2).unwrap();
        assert_eq!(t.data(), patches.row(0));
    }

    #[test]
    fn tile_zero_filter_is_zero() {
        let cfg = toy_cfg();
        let weights = zero_weights(&cfg);
        let t = tile(&toy_image(&cfg), &weights, 3, 1).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tile_hand_product() {
        // f=[[1,2],[3,4]], patch=[[5,6],[7,8]] -> [[5,12],[21,32]]
        let cfg = toy_cfg();
        let mut weights = zero_weights(&cfg);
        let mut pw = vec![0.0f32; 12];
        pw[0..4].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        weights.insert("patch_embed.weight", Tensor::new(vec![3, 4], pw).unwrap());
        let mut img = Tensor::zeros(vec![4, 4, 1]);
        set_value(&mut img, 0, 5.0);
        set_value(&mut img, 1, 6.0);
        set_value(&mut img, 4, 7.0);
        set_value(&mut img, 5, 8.0);
        let t = tile(&img, &weights, 1, 1).unwrap();
        assert_eq!(t.data(), &[5.0, 12.0, 21.0, 32.0]);
    }

    #[test]
    fn tile_rejects_out_of_range() {
        let cfg = toy_cfg();
        let weights = zero_weights(&cfg);
        let image = toy_image(&cfg);
        assert!(tile(&image, &weights, 0, 1).is_err());
        assert!(tile(&image, &weights, 5, 1).is_err());
        assert!(tile(&image, &weights, 1, 0).is_err());
        assert!(tile(&image, &weights, 1, 4).is_err());
    }

    #[test]
    fn filter_column_ones_reassembles_image() {
        let cfg = toy_cfg();
        let mut weights = zero_weights(&cfg);
        weights.insert("patch_embed.weight", Tensor::filled(vec![3, 4], 1.0));
        let image = toy_image(&cfg);
        let vis = layer0_filter_column(&image, &weights, 1).unwrap();
        assert_eq!(vis.pixels.data(), image.data());
    }

    #[test]
    fn filter_column_one_hot_selects_single_positions() {
        let cfg = toy_cfg();
        let mut weights = zero_weights(&cfg);
        let mut pw = vec![0.0f32; 12];
        pw[4] = 1.0; // filter 2 selects patch-inner position (0,0,ch0)
        weights.insert("patch_embed.weight", Tensor::new(vec![3, 4], pw).unwrap());
        let image = toy_image(&cfg);
        let vis = layer0_filter_column(&image, &weights, 2).unwrap();
        for gy in 0..2 {
            for gx in 0..2 {
                for py in 0..2 {
                    for px in 0..2 {
                        let got = vis.pixels.at3(gy * 2 + py, gx * 2 + px, 0);
                        if (py, px) == (0, 0) {
                            assert_eq!(got, image.at3(gy * 2, gx * 2, 0));
                        } else {
                            assert_eq!(got, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn filter_column_matches_naive_tiling() {
        let cfg = ModelConfig::toy(6, 2, 1, 5);
        let weights = random_weights(&cfg, 31);
        let image = toy_image(&cfg);
        let vis = layer0_filter_column(&image, &weights, 4).unwrap();
        // naive oracle: walk every pixel, find its in-patch offset, multiply
        let pw = weights.get("patch_embed.weight").unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let (py, px) = (y % 2, x % 2);
                let f = pw.at2(3, py * 2 + px);
                let want = f * image.at3(y, x, 0);
                assert_eq!(vis.pixels.at3(y, x, 0), want);
            }
        }
    }

    #[test]
    fn overlay_cancellation_gives_zero_field() {
        let cfg = ModelConfig::toy(4, 2, 1, 2);
        let mut weights = zero_weights(&cfg);
        let f: Vec<f32> = vec![1.0, -2.0, 3.0, -4.0];
        let mut pw = f.clone();
        pw.extend(f.iter().map(|v| -v));
        weights.insert("patch_embed.weight", Tensor::new(vec![2, 4], pw).unwrap());
        let vis =
            layer0_embedding_overlay(&toy_image(&cfg), &weights, 2, OverlayMode::Mean).unwrap();
        assert!(vis.pixels.data().iter().all(|&v| v == 0.0));
        // constant (zero) field displays as mid-gray
        assert!(vis.display.data.iter().all(|&b| b == 128));
    }

    #[test]
    fn overlay_single_filter_equals_tile() {
        let cfg = ModelConfig::toy(4, 2, 1, 1);
        let mut weights = zero_weights(&cfg);
        weights.insert(
            "patch_embed.weight",
            Tensor::new(vec![1, 4], vec![0.5, -1.0, 2.0, 0.25]).unwrap(),
        );
        let image = toy_image(&cfg);
        let vis = layer0_embedding_overlay(&image, &weights, 3, OverlayMode::Mean).unwrap();
        let t = tile(&image, &weights, 3, 1).unwrap();
        assert_eq!(vis.pixels.data(), t.data());
    }

    #[test]
    fn overlay_matches_stack_then_mean_oracle() {
        let cfg = ModelConfig::toy(4, 2, 1, 5);
        let weights = random_weights(&cfg, 8);
        let image = toy_image(&cfg);
        let vis = layer0_embedding_overlay(&image, &weights, 2, OverlayMode::Mean).unwrap();
        let mut want = vec![0.0f32; 4];
        for j in 1..=5 {
            let t = tile(&image, &weights, 2, j).unwrap();
            for (w, v) in want.iter_mut().zip(t.data()) {
                *w += v / 5.0;
            }
        }
        for (got, want) in vis.pixels.data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn overlay_factorizes_through_mean_filter() {
        // mean over tiles equals (mean of filters) applied to the patch
        let cfg = ModelConfig::toy(4, 2, 1, 6);
        let weights = random_weights(&cfg, 17);
        let image = toy_image(&cfg);
        let vis = layer0_embedding_overlay(&image, &weights, 1, OverlayMode::Mean).unwrap();
        let pw = weights.get("patch_embed.weight").unwrap();
        let patches = unfold_patches(&image, 2).unwrap();
        for t in 0..4 {
            let mean_f: f32 = (0..6).map(|j| pw.at2(j, t)).sum::<f32>() / 6.0;
            let want = mean_f * patches.row(0)[t];
            assert!((vis.pixels.data()[t] - want).abs() < 1e-6);
        }
    }

    fn uniform_attention_trace(cfg: &ModelConfig) -> ForwardTrace {
        // zero q/k weights make every attention row uniform
        let weights = zero_weights(cfg);
        let image = Tensor::zeros(vec![cfg.image_side, cfg.image_side, cfg.channels]);
        forward_trace(&image, &weights, cfg).unwrap()
    }

    #[test]
    fn layer1_uniform_attention() {
        let cfg = toy_cfg();
        let trace = uniform_attention_trace(&cfg);
        let field = coeff_layer1(&trace).unwrap();
        assert_eq!(field.coeffs.shape(), &[5, 4]);
        for &v in field.coeffs.data() {
            assert!((v - 0.2).abs() < 1e-6);
        }
        for s in field.row_sums() {
            assert!((s - 0.8).abs() < 1e-5); // N/(N+1)
        }
    }

    #[test]
    fn layer1_identity_attention_is_degenerate_for_class() {
        let cfg = toy_cfg();
        let mut trace = uniform_attention_trace(&cfg);
        trace.attn[0] = crate::tensor::identity(5);
        let field = coeff_layer1(&trace).unwrap();
        for i in 1..5 {
            for k in 0..4 {
                let want = if k + 1 == i { 1.0 } else { 0.0 };
                assert_eq!(field.coeffs.at2(i, k), want);
            }
        }
        assert!(field.coeffs.row(0).iter().all(|&v| v == 0.0));
        assert_eq!(field.degenerate_tokens(), vec![0]);
    }

    #[test]
    fn layer1_slices_attention_without_class_column() {
        let cfg = toy_cfg();
        let weights = random_weights(&cfg, 51);
        let trace = forward_trace(&toy_image(&cfg), &weights, &cfg).unwrap();
        let field = coeff_layer1(&trace).unwrap();
        for i in 0..5 {
            for k in 0..4 {
                assert_eq!(field.coeffs.at2(i, k), trace.attn[0].at2(i, k + 1));
            }
        }
    }

    #[test]
    fn propagate_identity_is_noop() {
        let cfg = toy_cfg();
        let trace = uniform_attention_trace(&cfg);
        let field = coeff_layer1(&trace).unwrap();
        let next = coeff_propagate(&field, &crate::tensor::identity(5)).unwrap();
        assert_eq!(next.layer, 2);
        assert_eq!(next.coeffs.data(), field.coeffs.data());
    }

    #[test]
    fn propagate_uniform_averages_rows() {
        let cfg = toy_cfg();
        let weights = random_weights(&cfg, 3);
        let trace = forward_trace(&toy_image(&cfg), &weights, &cfg).unwrap();
        let field = coeff_layer1(&trace).unwrap();
        let uniform = Tensor::filled(vec![5, 5], 0.2);
        let next = coeff_propagate(&field, &uniform).unwrap();
        for k in 0..4 {
            let mean: f32 = (0..5).map(|i| field.coeffs.at2(i, k)).sum::<f32>() / 5.0;
            for i in 0..5 {
                assert!((next.coeffs.at2(i, k) - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn propagate_rejects_non_stochastic() {
        let cfg = toy_cfg();
        let trace = uniform_attention_trace(&cfg);
        let field = coeff_layer1(&trace).unwrap();
        let bad = Tensor::filled(vec![5, 5], 0.3);
        assert!(coeff_propagate(&field, &bad).is_err());
    }

    #[test]
    fn propagate_rejects_shape_mismatch() {
        let cfg = toy_cfg();
        let trace = uniform_attention_trace(&cfg);
        let field = coeff_layer1(&trace).unwrap();
        let bad = Tensor::filled(vec![4, 4], 0.25);
        assert!(coeff_propagate(&field, &bad).is_err());
    }

    #[test]
    fn coefficient_row_sums_are_attention_averages_of_previous() {
        // exact conservation on random stochastic matrices: new row sums
        // are the attention-weighted averages of the old ones, so they
        // stay in (0, 1]
        let mut rng = SplitMix64::new(99);
        for _ in 0..20 {
            let tokens = 2 + rng.below(7);
            let n = tokens - 1;
            let mut coeffs = Vec::with_capacity(tokens * n);
            for _ in 0..tokens {
                let w = rng.dirichlet(n);
                let shrink = rng.uniform(0.2, 1.0);
                coeffs.extend(w.iter().map(|&v| (v * shrink) as f32));
            }
            let field = CoefficientField {
                layer: 1,
                coeffs: Tensor::new(vec![tokens, n], coeffs).unwrap(),
            };
            let mut attn = Vec::with_capacity(tokens * tokens);
            for _ in 0..tokens {
                attn.extend(rng.dirichlet(tokens).iter().map(|&v| v as f32));
            }
            let attn = Tensor::new(vec![tokens, tokens], attn).unwrap();
            let next = coeff_propagate(&field, &attn).unwrap();
            let prev_sums = field.row_sums();
            for (i, &got) in next.row_sums().iter().enumerate() {
                let want: f32 = (0..tokens).map(|k| attn.at2(i, k) * prev_sums[k]).sum();
                assert!((got - want).abs() < 1e-5);
                assert!(got > 0.0 && got <= 1.0 + 1e-5, "row sum {got}");
            }
        }
    }

    #[test]
    fn render_one_hot_row_places_single_tile() {
        let cfg = ModelConfig::toy(6, 2, 1, 3); // 9 patches
        let weights = random_weights(&cfg, 4);
        let image = toy_image(&cfg);
        let basis = TileBasis::new(&image, &weights, 2).unwrap();
        let mut coeffs = Tensor::zeros(vec![10, 9]);
        set_value(&mut coeffs, 4, 1.0); // token 0, tile 5
        let field = CoefficientField { layer: 1, coeffs };
        let vis = render(&field, &basis, 0).unwrap();
        let tile5 = basis.tile_row(5).unwrap();
        // patch 5 of a 3x3 grid sits at grid (1,1)
        for py in 0..2 {
            for px in 0..2 {
                let got = vis.pixels.at3(2 + py, 2 + px, 0);
                assert_eq!(got, tile5[py * 2 + px]);
            }
        }
        for y in 0..6 {
            for x in 0..6 {
                if !(2..4).contains(&y) || !(2..4).contains(&x) {
                    assert_eq!(vis.pixels.at3(y, x, 0), 0.0);
                }
            }
        }
    }

    #[test]
    fn render_zero_row_is_mid_gray() {
        let cfg = toy_cfg();
        let weights = random_weights(&cfg, 6);
        let image = toy_image(&cfg);
        let basis = TileBasis::new(&image, &weights, 1).unwrap();
        let field = CoefficientField {
            layer: 1,
            coeffs: Tensor::zeros(vec![5, 4]),
        };
        let vis = render(&field, &basis, 2).unwrap();
        assert!(vis.display.data.iter().all(|&b| b == 128));
    }

    #[test]
    fn render_matches_direct_sum_oracle_bit_for_bit() {
        let cfg = ModelConfig::toy(6, 2, 1, 4);
        let weights = random_weights(&cfg, 12);
        let image = toy_image(&cfg);
        let trace = forward_trace(&image, &weights, &cfg).unwrap();
        let field = coeff_layer1(&trace).unwrap();
        let basis = TileBasis::new(&image, &weights, 3).unwrap();
        for token in 0..field.tokens() {
            let vis = render(&field, &basis, token).unwrap();
            // direct sum over placed tiles
            let mut want = vec![0.0f32; 6 * 6];
            for k in 1..=9usize {
                let c = field.coeffs.at2(token, k - 1);
                let t = basis.tile_row(k).unwrap();
                let (gy, gx) = ((k - 1) / 3, (k - 1) % 3);
                for py in 0..2 {
                    for px in 0..2 {
                        want[(gy * 2 + py) * 6 + gx * 2 + px] = c * t[py * 2 + px];
                    }
                }
            }
            assert_eq!(vis.pixels.data(), want.as_slice());
        }
    }

    #[test]
    fn render_is_linear_in_coefficients() {
        let cfg = toy_cfg();
        let weights = random_weights(&cfg, 23);
        let image = toy_image(&cfg);
        let basis = TileBasis::new(&image, &weights, 1).unwrap();
        let mut rng = SplitMix64::new(5);
        let u: Vec<f32> = (0..4).map(|_| rng.uniform(0.0, 0.3) as f32).collect();
        let v: Vec<f32> = (0..4).map(|_| rng.uniform(0.0, 0.3) as f32).collect();
        let (alpha, beta) = (0.6f32, 0.4f32);
        let combo: Vec<f32> = u.iter().zip(&v).map(|(a, b)| alpha * a + beta * b).collect();
        let as_field = |row: &[f32]| CoefficientField {
            layer: 1,
            coeffs: Tensor::new(vec![5, 4], row.iter().cloned().cycle().take(20).collect())
                .unwrap(),
        };
        let ru = render(&as_field(&u), &basis, 1).unwrap();
        let rv = render(&as_field(&v), &basis, 1).unwrap();
        let rc = render(&as_field(&combo), &basis, 1).unwrap();
        for ((a, b), c) in ru
            .pixels
            .data()
            .iter()
            .zip(rv.pixels.data())
            .zip(rc.pixels.data())
        {
            assert!((alpha * a + beta * b - c).abs() < 1e-6);
        }
    }

    // The literal recursion computed in image space: layer 1 arranges
    // attention-scaled tiles; every later layer sums full images weighted
    // by attention, including the class row. O(N*H*W) per token per layer.
    fn naive_image_recursion(
        trace: &ForwardTrace,
        basis: &TileBasis,
        layer: usize,
    ) -> Vec<Vec<f32>> {
        let tokens = trace.tokens();
        let n = tokens - 1;
        let side = basis.image_side;
        let c = basis.channels;
        let grid = side / basis.patch_side;
        let mut current: Vec<Vec<f32>> = Vec::with_capacity(tokens);
        for i in 0..tokens {
            let mut img = vec![0.0f32; side * side * c];
            for k in 1..=n {
                let a = trace.attn[0].at2(i, k);
                let t = basis.tile_row(k).unwrap();
                let (gy, gx) = ((k - 1) / grid, (k - 1) % grid);
                for py in 0..basis.patch_side {
                    for px in 0..basis.patch_side {
                        for ch in 0..c {
                            let dst = ((gy * basis.patch_side + py) * side
                                + gx * basis.patch_side
                                + px)
                                * c
                                + ch;
                            img[dst] = a * t[(py * basis.patch_side + px) * c + ch];
                        }
                    }
                }
            }
            current.push(img);
        }
        for l in 1..layer {
            let mut next: Vec<Vec<f32>> = Vec::with_capacity(tokens);
            for i in 0..tokens {
                let mut img = vec![0.0f32; side * side * c];
                for k in 0..tokens {
                    let a = trace.attn[l].at2(i, k);
                    for (dst, src) in img.iter_mut().zip(&current[k]) {
                        *dst += a * src;
                    }
                }
                next.push(img);
            }
            current = next;
        }
        current
    }

    #[test]
    fn coefficient_rendering_equals_naive_recursion() {
        // toy config N=9, L=3: the compact field must reproduce the literal
        // image-space recursion at every layer, token, and filter
        let mut cfg = ModelConfig::toy(6, 2, 1, 4);
        cfg.layers = 3;
        let weights = random_weights(&cfg, 321);
        let image = toy_image(&cfg);
        let trace = forward_trace(&image, &weights, &cfg).unwrap();
        for filter in [1, 3] {
            let basis = TileBasis::new(&image, &weights, filter).unwrap();
            for layer in 1..=3usize {
                let field = coeff_field(&trace, layer).unwrap();
                let naive = naive_image_recursion(&trace, &basis, layer);
                for token in 0..trace.tokens() {
                    let vis = render(&field, &basis, token).unwrap();
                    for (got, want) in vis.pixels.data().iter().zip(&naive[token]) {
                        assert!(
                            (got - want).abs() < 1e-5,
                            "layer {layer} token {token} filter {filter}: {got} vs {want}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn normalize_display_affine_endpoints() {
        let t = Tensor::new(vec![1, 3, 1], vec![-1.0, 0.0, 1.0]).unwrap();
        let img = normalize_display(&t).unwrap();
        assert_eq!(img.pixel(0, 0)[0], 0);
        assert_eq!(img.pixel(1, 0)[0], 128); // half-up at 127.5
        assert_eq!(img.pixel(2, 0)[0], 255);
    }

    #[test]
    fn normalize_display_constant_is_mid_gray() {
        let t = Tensor::filled(vec![2, 2, 3], 7.3);
        let img = normalize_display(&t).unwrap();
        assert!(img.data.iter().all(|&b| b == 128));
    }

    #[test]
    fn normalize_display_full_range_unchanged() {
        let t = Tensor::new(vec![1, 2, 1], vec![0.0, 255.0]).unwrap();
        let img = normalize_display(&t).unwrap();
        assert_eq!(img.pixel(0, 0)[0], 0);
        assert_eq!(img.pixel(1, 0)[0], 255);
    }

    #[test]
    fn filename_contract() {
        assert_eq!(vis_filename(5, 62, 3), "vis_L5_T62_F3.png");
    }
}
