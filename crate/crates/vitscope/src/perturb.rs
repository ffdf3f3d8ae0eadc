//! Occlusion and grid-shuffle protocols: random drop, salient drop,
//! non-salient drop (zero or Gaussian-noise fill), and cell shuffling.
//!
//! Drops operate on the preprocessed image tensor. "Zero" fill means the
//! normalized image of a raw black pixel by default (what the occlusion
//! figures show); a normalized-zero (mid-gray) fill is available by
//! passing zeros. Every operation is a pure function of its seed.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::PatchLabelMap;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// What fills a dropped patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FillMode {
    #[default]
    Zero,
    /// Per-pixel standard Gaussian noise in normalized pixel space.
    Noise,
}

/// A set of dropped patches (1-based indices) plus how to fill them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropMask {
    pub dropped: BTreeSet<usize>,
    pub fill_mode: FillMode,
    pub seed: u64,
}

/// Decorrelates the noise stream from the index-sampling stream.
const NOISE_STREAM: u64 = 0x5D1F_B2A4_9C83_E7D1;

impl DropMask {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mask serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("drop mask: {e}")))
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) || r.is_nan() {
        return Err(Error::InvalidArgument(format!("ratio {r} outside [0, 1]")));
    }
    Ok(())
}

/// Drop `floor(N * r)` patches sampled uniformly from all N patches.
pub fn random_drop(n_patches: usize, r: f64, seed: u64, fill_mode: FillMode) -> Result<DropMask> {
    check_ratio(r)?;
    let k = (n_patches as f64 * r).floor() as usize;
    let pool: Vec<usize> = (1..=n_patches).collect();
    let mut rng = SplitMix64::new(seed);
    let dropped = rng
        .sample_without_replacement(&pool, k)
        .into_iter()
        .collect();
    Ok(DropMask {
        dropped,
        fill_mode,
        seed,
    })
}

/// Drop `floor(r * |object patches|)` patches sampled uniformly from the
/// object-labeled set.
pub fn salient_drop(
    labels: &PatchLabelMap,
    r: f64,
    seed: u64,
    fill_mode: FillMode,
) -> Result<DropMask> {
    check_ratio(r)?;
    let pool = labels.object_patches();
    if pool.is_empty() {
        return Err(Error::InvalidArgument(
            "salient drop: no object-labeled patches".into(),
        ));
    }
    let k = (pool.len() as f64 * r).floor() as usize;
    let mut rng = SplitMix64::new(seed);
    let dropped = rng
        .sample_without_replacement(&pool, k)
        .into_iter()
        .collect();
    Ok(DropMask {
        dropped,
        fill_mode,
        seed,
    })
}

/// Drop `floor(r * |background patches|)` patches sampled uniformly from
/// the background-labeled set; object patches are never touched.
pub fn nonsalient_drop(
    labels: &PatchLabelMap,
    r: f64,
    seed: u64,
    fill_mode: FillMode,
) -> Result<DropMask> {
    check_ratio(r)?;
    let pool = labels.background_patches();
    if pool.is_empty() {
        return Err(Error::InvalidArgument(
            "non-salient drop: no background-labeled patches".into(),
        ));
    }
    let k = (pool.len() as f64 * r).floor() as usize;
    let mut rng = SplitMix64::new(seed);
    let dropped = rng
        .sample_without_replacement(&pool, k)
        .into_iter()
        .collect();
    Ok(DropMask {
        dropped,
        fill_mode,
        seed,
    })
}

/// Replace the pixels of every dropped patch. `zero_fill` gives the
/// per-channel value a "zeroed" pixel takes (e.g. the normalized image of
/// raw black); untouched patches are bit-identical to the input.
pub fn apply_mask(
    image: &Tensor,
    patch_side: usize,
    mask: &DropMask,
    zero_fill: &[f32],
) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "apply_mask wants [H,W,C], got {:?}",
            image.shape()
        )));
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if patch_side == 0 || h % patch_side != 0 || w % patch_side != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{h}x{w} not divisible by patch side {patch_side}"
        )));
    }
    if zero_fill.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "zero fill has {} channels, image has {c}",
            zero_fill.len()
        )));
    }
    let grid_w = w / patch_side;
    let n = (h / patch_side) * grid_w;
    if let Some(&bad) = mask.dropped.iter().find(|&&p| p == 0 || p > n) {
        return Err(Error::InvalidArgument(format!(
            "dropped patch {bad} out of range 1..={n}"
        )));
    }
    let mut out = image.clone();
    let mut noise = SplitMix64::new(mask.seed ^ NOISE_STREAM);
    // BTreeSet iteration is ascending, so the noise stream is reproducible.
    for &patch in &mask.dropped {
        let (gy, gx) = ((patch - 1) / grid_w, (patch - 1) % grid_w);
        for py in 0..patch_side {
            for px in 0..patch_side {
                let off = ((gy * patch_side + py) * w + gx * patch_side + px) * c;
                for ch in 0..c {
                    out.data_mut()[off + ch] = match mask.fill_mode {
                        FillMode::Zero => zero_fill[ch],
                        FillMode::Noise => noise.gaussian() as f32,
                    };
                }
            }
        }
    }
    Ok(out)
}

/// A grid shuffle: the image is cut into `grid x grid` equal cells and the
/// cells are permuted. `permutation[dst] = src`: output cell `dst` shows
/// input cell `src`. Cells are indexed row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShuffleSpec {
    pub grid: usize,
    pub permutation: Vec<usize>,
    pub seed: u64,
}

impl ShuffleSpec {
    /// Uniformly random permutation of `grid * grid` cells.
    pub fn random(grid: usize, seed: u64) -> Result<Self> {
        if grid == 0 {
            return Err(Error::InvalidArgument("grid must be >= 1".into()));
        }
        let mut permutation: Vec<usize> = (0..grid * grid).collect();
        let mut rng = SplitMix64::new(seed);
        rng.shuffle(&mut permutation);
        Ok(ShuffleSpec {
            grid,
            permutation,
            seed,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.grid * self.grid;
        if self.permutation.len() != cells {
            return Err(Error::InvalidArgument(format!(
                "permutation has {} entries for {cells} cells",
                self.permutation.len()
            )));
        }
        let mut seen = vec![false; cells];
        for &p in &self.permutation {
            if p >= cells || seen[p] {
                return Err(Error::InvalidArgument(
                    "permutation is not a bijection".into(),
                ));
            }
            seen[p] = true;
        }
        Ok(())
    }

    pub fn inverse(&self) -> ShuffleSpec {
        let mut inv = vec![0usize; self.permutation.len()];
        for (dst, &src) in self.permutation.iter().enumerate() {
            inv[src] = dst;
        }
        ShuffleSpec {
            grid: self.grid,
            permutation: inv,
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ShuffleSpec =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("shuffle spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Rearrange the `grid x grid` cells of an image by a fresh seeded random
/// permutation. Pixel content within each cell is untouched.
pub fn shuffle(image: &Tensor, grid: usize, seed: u64) -> Result<(Tensor, ShuffleSpec)> {
    let spec = ShuffleSpec::random(grid, seed)?;
    let shuffled = apply_shuffle(image, &spec)?;
    Ok((shuffled, spec))
}

/// Cell-permute an integer id grid (a segmentation mask) with the same
/// geometry rules as [`apply_shuffle`]. This is how ground truth follows
/// a shuffled image when the cells do not align with the patch grid.
pub fn apply_shuffle_ids(
    ids: &[u32],
    height: usize,
    width: usize,
    spec: &ShuffleSpec,
) -> Result<Vec<u32>> {
    spec.validate()?;
    if ids.len() != height * width {
        return Err(Error::ShapeMismatch(format!(
            "id grid {height}x{width} wants {} entries, got {}",
            height * width,
            ids.len()
        )));
    }
    let g = spec.grid;
    if !height.is_multiple_of(g) || !width.is_multiple_of(g) {
        return Err(Error::ShapeMismatch(format!(
            "{height}x{width} not divisible by grid {g}"
        )));
    }
    let (cell_h, cell_w) = (height / g, width / g);
    let mut out = vec![0u32; ids.len()];
    for dst in 0..g * g {
        let src = spec.permutation[dst];
        let (dy, dx) = (dst / g, dst % g);
        let (sy, sx) = (src / g, src % g);
        for row in 0..cell_h {
            let src_off = (sy * cell_h + row) * width + sx * cell_w;
            let dst_off = (dy * cell_h + row) * width + dx * cell_w;
            out[dst_off..dst_off + cell_w].copy_from_slice(&ids[src_off..src_off + cell_w]);
        }
    }
    Ok(out)
}

/// Apply an existing shuffle spec.
pub fn apply_shuffle(image: &Tensor, spec: &ShuffleSpec) -> Result<Tensor> {
    spec.validate()?;
    if image.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "shuffle wants [H,W,C], got {:?}",
            image.shape()
        )));
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let g = spec.grid;
    if h % g != 0 || w % g != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{h}x{w} not divisible by grid {g}"
        )));
    }
    let (cell_h, cell_w) = (h / g, w / g);
    let mut out = Tensor::zeros(vec![h, w, c]);
    for dst in 0..g * g {
        let src = spec.permutation[dst];
        let (dy, dx) = (dst / g, dst % g);
        let (sy, sx) = (src / g, src % g);
        for row in 0..cell_h {
            let src_off = ((sy * cell_h + row) * w + sx * cell_w) * c;
            let dst_off = ((dy * cell_h + row) * w + dx * cell_w) * c;
            let src_slice = image.data()[src_off..src_off + cell_w * c].to_vec();
            out.data_mut()[dst_off..dst_off + cell_w * c].copy_from_slice(&src_slice);
        }
    }
    Ok(out)
}
