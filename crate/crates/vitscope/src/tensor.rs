//! Dense `f32` tensors in row-major layout and the handful of numeric
//! kernels the forward pass needs: matmul, row softmax, layer norm, GELU,
//! and patch unfold/fold.
//!
//! Values are immutable after construction and every public operation
//! either returns finite values or an error, so tensors can be shared
//! freely across threads.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor, validating that `data` matches `shape` and holds
    /// only finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} elements, data has {}",
                shape,
                expect,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Internal(format!(
                "non-finite value in tensor of shape {shape:?}"
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Rank-2 element access.
    pub fn at2(&self, i: usize, j: usize) -> f32 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Rank-2 row slice.
    pub fn row(&self, i: usize) -> &[f32] {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Rank-3 element access for `[H, W, C]` images.
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f32 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::ShapeMismatch(format!(
                "{what}: expected rank {rank}, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// Dot product of two equal-length slices. Eight independent accumulator
/// lanes keep the loop vectorizable; the lane sums are combined pairwise,
/// so the evaluation order is fixed and runs are bit-identical.
#[cfg(not(feature = "accum-f64"))]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let off = c * 8;
        for l in 0..8 {
            lanes[l] += a[off + l] * b[off + l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s01 = lanes[0] + lanes[1];
    let s23 = lanes[2] + lanes[3];
    let s45 = lanes[4] + lanes[5];
    let s67 = lanes[6] + lanes[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

#[cfg(feature = "accum-f64")]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += *x as f64 * *y as f64;
    }
    acc as f32
}

/// `c[i][j] = sum_t a[i][t] * b[t][j]` for rank-2 operands.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "matmul lhs")?;
    b.expect_rank(2, "matmul rhs")?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner extents differ: [{m},{k}] x [{k2},{n}]"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            let brow = &b.data[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Affine map `y = x W^T + bias` with `w` stored `[out, in]` (each row one
/// output neuron), the layout the weight archive uses.
pub fn linear(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    x.expect_rank(2, "linear input")?;
    w.expect_rank(2, "linear weight")?;
    bias.expect_rank(1, "linear bias")?;
    let (n, d_in) = (x.shape[0], x.shape[1]);
    let (d_out, d_in2) = (w.shape[0], w.shape[1]);
    if d_in != d_in2 || bias.shape[0] != d_out {
        return Err(Error::ShapeMismatch(format!(
            "linear: x [{n},{d_in}], w [{d_out},{d_in2}], bias [{}]",
            bias.shape[0]
        )));
    }
    let mut out = vec![0.0f32; n * d_out];
    for i in 0..n {
        let xrow = x.row(i);
        let orow = &mut out[i * d_out..(i + 1) * d_out];
        for (o, (wrow, &bv)) in orow
            .iter_mut()
            .zip(w.data.chunks_exact(d_in).zip(bias.data.iter()))
        {
            *o = dot(xrow, wrow) + bv;
        }
    }
    Tensor::new(vec![n, d_out], out)
}

/// Row-wise softmax with per-row max subtraction for overflow safety.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "softmax_rows")?;
    let (m, n) = (a.shape[0], a.shape[1]);
    if n == 0 {
        return Err(Error::ShapeMismatch("softmax_rows: zero-width rows".into()));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = a.row(i);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let orow = &mut out[i * n..(i + 1) * n];
        let mut total = 0.0f32;
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            total += e;
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Layer normalization over the last axis with the population (biased)
/// variance: `(x - mean) / sqrt(var + eps) * gamma + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    gamma.expect_rank(1, "layer_norm gamma")?;
    beta.expect_rank(1, "layer_norm beta")?;
    if x.rank() == 0 {
        return Err(Error::ShapeMismatch("layer_norm: rank-0 input".into()));
    }
    let d = *x.shape.last().unwrap();
    if gamma.shape[0] != d || beta.shape[0] != d {
        return Err(Error::ShapeMismatch(format!(
            "layer_norm: last extent {d} vs gamma [{}], beta [{}]",
            gamma.shape[0], beta.shape[0]
        )));
    }
    let mut out = vec![0.0f32; x.data.len()];
    for (orow, xrow) in out.chunks_exact_mut(d).zip(x.data.chunks_exact(d)) {
        let mut mean = 0.0f32;
        for &v in xrow {
            mean += v;
        }
        mean /= d as f32;
        let mut var = 0.0f32;
        for &v in xrow {
            let c = v - mean;
            var += c * c;
        }
        var /= d as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for (o, (&v, (&g, &b))) in orow
            .iter_mut()
            .zip(xrow.iter().zip(gamma.data.iter().zip(beta.data.iter())))
        {
            *o = (v - mean) * inv * g + b;
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// Which GELU the MLP blocks use. Common ViT-B/16 checkpoints were trained
/// with the tanh form, so that is the default; the erf form is selectable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GeluKind {
    #[default]
    Tanh,
    Exact,
}

/// Element-wise GELU.
pub fn gelu(x: &Tensor, kind: GeluKind) -> Result<Tensor> {
    let data = x.data.iter().map(|&v| gelu_scalar(v, kind)).collect();
    Tensor::new(x.shape.clone(), data)
}

pub fn gelu_scalar(x: f32, kind: GeluKind) -> f32 {
    match kind {
        GeluKind::Tanh => {
            let c = (2.0f32 / std::f32::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
        }
        GeluKind::Exact => {
            let phi = 0.5 * (1.0 + erf(x as f64 / std::f64::consts::SQRT_2));
            (x as f64 * phi) as f32
        }
    }
}

/// Abramowitz-Stegun 7.1.26 rational approximation, |error| < 1.5e-7,
/// more than enough for f32 activations.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Cut an `[H, W, C]` image into `N = (H/P)*(W/P)` patches, row-major patch
/// order, each row the patch flattened as (row, col, channel).
pub fn unfold_patches(image: &Tensor, patch_side: usize) -> Result<Tensor> {
    image.expect_rank(3, "unfold_patches")?;
    let (h, w, c) = (image.shape[0], image.shape[1], image.shape[2]);
    if patch_side == 0 || h % patch_side != 0 || w % patch_side != 0 {
        return Err(Error::ShapeMismatch(format!(
            "unfold_patches: {h}x{w} not divisible by patch side {patch_side}"
        )));
    }
    let (gh, gw) = (h / patch_side, w / patch_side);
    let n = gh * gw;
    let row_len = patch_side * patch_side * c;
    let mut out = vec![0.0f32; n * row_len];
    for gy in 0..gh {
        for gx in 0..gw {
            let patch = gy * gw + gx;
            let dst = &mut out[patch * row_len..(patch + 1) * row_len];
            for py in 0..patch_side {
                let src_off = ((gy * patch_side + py) * w + gx * patch_side) * c;
                let dst_off = py * patch_side * c;
                dst[dst_off..dst_off + patch_side * c]
                    .copy_from_slice(&image.data[src_off..src_off + patch_side * c]);
            }
        }
    }
    Tensor::new(vec![n, row_len], out)
}

/// Inverse of [`unfold_patches`].
pub fn fold_patches(patches: &Tensor, h: usize, w: usize, c: usize) -> Result<Tensor> {
    patches.expect_rank(2, "fold_patches")?;
    let n = patches.shape[0];
    let row_len = patches.shape[1];
    if !row_len.is_multiple_of(c) {
        return Err(Error::ShapeMismatch(format!(
            "fold_patches: row length {row_len} not divisible by channels {c}"
        )));
    }
    let pixels = row_len / c;
    let patch_side = (pixels as f64).sqrt().round() as usize;
    if patch_side * patch_side != pixels
        || patch_side == 0
        || !h.is_multiple_of(patch_side)
        || !w.is_multiple_of(patch_side)
        || n != (h / patch_side) * (w / patch_side)
    {
        return Err(Error::ShapeMismatch(format!(
            "fold_patches: {n} rows of {row_len} do not tile {h}x{w}x{c}"
        )));
    }
    let gw = w / patch_side;
    let mut out = vec![0.0f32; h * w * c];
    for patch in 0..n {
        let (gy, gx) = (patch / gw, patch % gw);
        let src = patches.row(patch);
        for py in 0..patch_side {
            let dst_off = ((gy * patch_side + py) * w + gx * patch_side) * c;
            let src_off = py * patch_side * c;
            out[dst_off..dst_off + patch_side * c]
                .copy_from_slice(&src[src_off..src_off + patch_side * c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Identity matrix.
pub fn identity(n: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        t.data[i * n + i] = 1.0;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn t2(rows: usize, cols: usize, v: &[f32]) -> Tensor {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    fn random_tensor(r: &mut SplitMix64, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| r.uniform(-2.0, 2.0) as f32).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn new_rejects_size_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![f32::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let mut r = SplitMix64::new(1);
        let b = random_tensor(&mut r, vec![3, 5]);
        let c = matmul(&identity(3), &b).unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] x [[5],[6]] = [[17],[39]]
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = t2(2, 1, &[5.0, 6.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_rejects_bad_rank() {
        let a = Tensor::zeros(vec![2, 3, 1]);
        let b = Tensor::zeros(vec![3, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_associative_within_tolerance() {
        let mut r = SplitMix64::new(2);
        for _ in 0..20 {
            let a = random_tensor(&mut r, vec![4, 6]);
            let b = random_tensor(&mut r, vec![6, 3]);
            let c = random_tensor(&mut r, vec![3, 5]);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (l, rr) in left.data().iter().zip(right.data()) {
                let scale = l.abs().max(rr.abs()).max(1.0);
                assert!(
                    (l - rr).abs() / scale < 1e-4,
                    "associativity violated: {l} vs {rr}"
                );
            }
        }
    }

    #[test]
    fn linear_matches_matmul_against_transpose() {
        let mut r = SplitMix64::new(3);
        let x = random_tensor(&mut r, vec![4, 6]);
        let w = random_tensor(&mut r, vec![5, 6]);
        let bias = random_tensor(&mut r, vec![5]);
        let y = linear(&x, &w, &bias).unwrap();
        // Oracle: transpose w by hand and add bias.
        let mut wt = vec![0.0f32; 6 * 5];
        for o in 0..5 {
            for i in 0..6 {
                wt[i * 5 + o] = w.at2(o, i);
            }
        }
        let wt = t2(6, 5, &wt);
        let prod = matmul(&x, &wt).unwrap();
        for i in 0..4 {
            for o in 0..5 {
                let want = prod.at2(i, o) + bias.data()[o];
                assert!((y.at2(i, o) - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let a = t2(1, 3, &[0.0, 0.0, 0.0]);
        let s = softmax_rows(&a).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_analytic_two_logits() {
        let a = t2(1, 2, &[0.0, (2.0f32).ln()]);
        let s = softmax_rows(&a).unwrap();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-6);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let a = t2(1, 2, &[1000.0, 1000.0]);
        let s = softmax_rows(&a).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-7);
        assert!((s.data()[1] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn softmax_rows_sum_to_one_property() {
        let mut r = SplitMix64::new(4);
        for _ in 0..50 {
            let rows = 1 + r.below(6);
            let cols = 1 + r.below(9);
            let a = random_tensor(&mut r, vec![rows, cols]);
            let s = softmax_rows(&a).unwrap();
            for i in 0..rows {
                let sum: f32 = s.row(i).iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
                assert!(s.row(i).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn layer_norm_constant_slice_is_zero() {
        let x = t2(2, 3, &[5.0; 6]);
        let gamma = Tensor::filled(vec![3], 1.0);
        let beta = Tensor::zeros(vec![3]);
        let y = layer_norm(&x, &gamma, &beta, 1e-6).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-3);
        }
    }

    #[test]
    fn layer_norm_hand_case() {
        // x=[1,3]: mean 2, population var 1 -> [-1, 1]; beta shifts affinely.
        let x = t2(1, 2, &[1.0, 3.0]);
        let gamma = Tensor::filled(vec![2], 1.0);
        let beta = Tensor::zeros(vec![2]);
        let y = layer_norm(&x, &gamma, &beta, 0.0).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-6);
        assert!((y.data()[1] - 1.0).abs() < 1e-6);
        let beta5 = Tensor::filled(vec![2], 5.0);
        let y5 = layer_norm(&x, &gamma, &beta5, 0.0).unwrap();
        assert!((y5.data()[0] - 4.0).abs() < 1e-6);
        assert!((y5.data()[1] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_rejects_extent_mismatch() {
        let x = t2(1, 3, &[1.0, 2.0, 3.0]);
        let gamma = Tensor::filled(vec![2], 1.0);
        let beta = Tensor::zeros(vec![2]);
        assert!(layer_norm(&x, &gamma, &beta, 1e-6).is_err());
    }

    #[test]
    fn layer_norm_standardizes_property() {
        let mut r = SplitMix64::new(5);
        for _ in 0..20 {
            let d = 8 + r.below(24);
            let x = random_tensor(&mut r, vec![3, d]);
            let gamma = Tensor::filled(vec![d], 1.0);
            let beta = Tensor::zeros(vec![d]);
            let y = layer_norm(&x, &gamma, &beta, 1e-6).unwrap();
            for i in 0..3 {
                let row = y.row(i);
                let mean: f32 = row.iter().sum::<f32>() / d as f32;
                let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
                assert!(mean.abs() < 1e-5, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-3, "var {var}");
            }
        }
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0, GeluKind::Tanh), 0.0);
        assert_eq!(gelu_scalar(0.0, GeluKind::Exact), 0.0);
        // Phi(1) = 0.8413447; exact GELU(1) = 1 * Phi(1).
        assert!((gelu_scalar(1.0, GeluKind::Exact) - 0.841345).abs() < 1e-4);
        assert!((gelu_scalar(1.0, GeluKind::Tanh) - 0.841192).abs() < 1e-4);
        assert!(gelu_scalar(-10.0, GeluKind::Tanh).abs() < 1e-4);
        assert!(gelu_scalar(-10.0, GeluKind::Exact).abs() < 1e-4);
    }

    #[test]
    fn unfold_quadrants() {
        // 4x4, one channel, constant per 2x2 quadrant.
        let mut img = Tensor::zeros(vec![4, 4, 1]);
        for y in 0..4 {
            for x in 0..4 {
                let q = (y / 2) * 2 + x / 2;
                img.data_mut()[y * 4 + x] = q as f32 + 1.0;
            }
        }
        let p = unfold_patches(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        for patch in 0..4 {
            for &v in p.row(patch) {
                assert_eq!(v, patch as f32 + 1.0);
            }
        }
    }

    #[test]
    fn unfold_vit_patch_count() {
        let img = Tensor::zeros(vec![224, 224, 3]);
        let p = unfold_patches(&img, 16).unwrap();
        assert_eq!(p.shape(), &[196, 16 * 16 * 3]);
    }

    #[test]
    fn unfold_rejects_nondivisible() {
        let img = Tensor::zeros(vec![5, 5, 1]);
        assert!(unfold_patches(&img, 2).is_err());
    }

    #[test]
    fn unfold_fold_roundtrip() {
        let mut r = SplitMix64::new(6);
        let img = random_tensor(&mut r, vec![8, 12, 3]);
        let p = unfold_patches(&img, 4).unwrap();
        let back = fold_patches(&p, 8, 12, 3).unwrap();
        assert_eq!(img, back);
    }
}
