//! Ground-truth patch labels from segmentation masks.
//!
//! A patch is assigned the object whose pixels cover the largest fraction
//! of it, provided that fraction reaches the overlap threshold (default
//! 40%); otherwise it is background. Ties go to the smaller object id.
//! Images qualify for the clustering study when at least `min_objects`
//! objects each own at least `min_patches` labeled patches.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{nearest_resize_ids, IdRaster};
use crate::perturb::{DropMask, ShuffleSpec};

/// Per-patch ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchLabel {
    Background,
    Object(u32),
    /// Occluded by a drop mask; excluded from object counts.
    Dropped,
}

/// Dense integer segmentation grid; id 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
}

impl SegMask {
    pub fn new(height: usize, width: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask {height}x{width} wants {} ids, got {}",
                height * width,
                ids.len()
            )));
        }
        Ok(SegMask { height, width, ids })
    }

    pub fn from_raster(raster: &IdRaster) -> Self {
        SegMask {
            height: raster.height,
            width: raster.width,
            ids: raster.ids.clone(),
        }
    }

    /// Nearest-neighbor resize (never interpolates ids).
    pub fn resized_to(&self, height: usize, width: usize) -> SegMask {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let raster = IdRaster {
            width: self.width,
            height: self.height,
            ids: self.ids.clone(),
        };
        SegMask::from_raster(&nearest_resize_ids(&raster, width, height))
    }

    /// Cell-permute the mask with a shuffle spec. Re-labeling the result
    /// is the general way to score shuffled images; it agrees with
    /// [`PatchLabelMap::remap_shuffled`] whenever the cells consist of
    /// whole patches, and also covers grids that cut through patches.
    pub fn shuffled(&self, spec: &crate::perturb::ShuffleSpec) -> Result<SegMask> {
        let ids = crate::perturb::apply_shuffle_ids(&self.ids, self.height, self.width, spec)?;
        Ok(SegMask {
            height: self.height,
            width: self.width,
            ids,
        })
    }

    /// Collapse instance ids that share a class name (per the sidecar
    /// id-to-name map) onto the smallest id with that name. Ids missing
    /// from the map are left untouched.
    pub fn collapse_classes(&self, names: &BTreeMap<u32, String>) -> SegMask {
        let mut canon: BTreeMap<&str, u32> = BTreeMap::new();
        for (&id, name) in names {
            canon.entry(name.as_str()).or_insert(id);
        }
        let ids = self
            .ids
            .iter()
            .map(|&id| match names.get(&id) {
                Some(name) => canon[name.as_str()],
                None => id,
            })
            .collect();
        SegMask {
            height: self.height,
            width: self.width,
            ids,
        }
    }
}

/// Per-patch labels plus the overlap fractions they were derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchLabelMap {
    /// Index `i` holds patch `i + 1` (patches are 1-based).
    pub labels: Vec<PatchLabel>,
    /// Per patch, each object id's pixel fraction (background not listed).
    pub fractions: Vec<BTreeMap<u32, f64>>,
}

impl PatchLabelMap {
    /// Build from bare labels (fractions empty); handy for tests and for
    /// synthetic layouts.
    pub fn from_labels(labels: Vec<PatchLabel>) -> Self {
        let fractions = vec![BTreeMap::new(); labels.len()];
        PatchLabelMap { labels, fractions }
    }

    pub fn n_patches(&self) -> usize {
        self.labels.len()
    }

    /// 1-based indices of object-labeled patches.
    pub fn object_patches(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, PatchLabel::Object(_)))
            .map(|(i, _)| i + 1)
            .collect()
    }

    /// 1-based indices of background-labeled patches.
    pub fn background_patches(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, PatchLabel::Background))
            .map(|(i, _)| i + 1)
            .collect()
    }

    /// Distinct object ids with at least one labeled patch.
    pub fn distinct_objects(&self) -> BTreeSet<u32> {
        self.labels
            .iter()
            .filter_map(|l| match l {
                PatchLabel::Object(id) => Some(*id),
                _ => None,
            })
            .collect()
    }

    /// True when at least `min_objects` distinct objects each have at
    /// least `min_patches` labeled patches.
    pub fn select_image(&self, min_objects: usize, min_patches: usize) -> bool {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for label in &self.labels {
            if let PatchLabel::Object(id) = label {
                *counts.entry(*id).or_insert(0) += 1;
            }
        }
        counts.values().filter(|&&c| c >= min_patches).count() >= min_objects
    }

    /// Relabel for a shuffled image. Requires the shuffle cells to consist
    /// of whole patches, i.e. `grid` divides the patches-per-side count.
    pub fn remap_shuffled(&self, spec: &ShuffleSpec, patches_per_side: usize) -> Result<Self> {
        spec.validate()?;
        if self.labels.len() != patches_per_side * patches_per_side {
            return Err(Error::ShapeMismatch(format!(
                "label map has {} patches, expected {}",
                self.labels.len(),
                patches_per_side * patches_per_side
            )));
        }
        if spec.grid == 0 || !patches_per_side.is_multiple_of(spec.grid) {
            return Err(Error::InvalidArgument(format!(
                "shuffle grid {} does not align with {patches_per_side} patches per side",
                spec.grid
            )));
        }
        let per_cell = patches_per_side / spec.grid;
        let mut labels = vec![PatchLabel::Background; self.labels.len()];
        let mut fractions = vec![BTreeMap::new(); self.labels.len()];
        for dst_cell in 0..spec.grid * spec.grid {
            let src_cell = spec.permutation[dst_cell];
            let (dcy, dcx) = (dst_cell / spec.grid, dst_cell % spec.grid);
            let (scy, scx) = (src_cell / spec.grid, src_cell % spec.grid);
            for oy in 0..per_cell {
                for ox in 0..per_cell {
                    let dst = (dcy * per_cell + oy) * patches_per_side + dcx * per_cell + ox;
                    let src = (scy * per_cell + oy) * patches_per_side + scx * per_cell + ox;
                    labels[dst] = self.labels[src];
                    fractions[dst] = self.fractions[src].clone();
                }
            }
        }
        Ok(PatchLabelMap { labels, fractions })
    }

    /// Relabel for an occluded image: dropped patches get the distinct
    /// `Dropped` category and lose their fractions.
    pub fn remap_dropped(&self, mask: &DropMask) -> Result<Self> {
        if let Some(&bad) = mask.dropped.iter().find(|&&p| p == 0 || p > self.labels.len()) {
            return Err(Error::InvalidArgument(format!(
                "dropped patch {bad} out of range 1..={}",
                self.labels.len()
            )));
        }
        let mut out = self.clone();
        for &p in &mask.dropped {
            out.labels[p - 1] = PatchLabel::Dropped;
            out.fractions[p - 1].clear();
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("label map serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("label map: {e}")))
    }
}

/// Assign each `P x P` patch the dominant object covering at least
/// `threshold` of its pixels; ties break to the smaller id.
pub fn label_patches(mask: &SegMask, patch_side: usize, threshold: f64) -> Result<PatchLabelMap> {
    if patch_side == 0 || !mask.height.is_multiple_of(patch_side) || !mask.width.is_multiple_of(patch_side) {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} not divisible by patch side {patch_side}",
            mask.height, mask.width
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    let (gh, gw) = (mask.height / patch_side, mask.width / patch_side);
    let pixels_per_patch = (patch_side * patch_side) as f64;
    let mut labels = Vec::with_capacity(gh * gw);
    let mut fractions = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
            for py in 0..patch_side {
                for px in 0..patch_side {
                    let id = mask.ids[(gy * patch_side + py) * mask.width + gx * patch_side + px];
                    if id != 0 {
                        *counts.entry(id).or_insert(0) += 1;
                    }
                }
            }
            let fracs: BTreeMap<u32, f64> = counts
                .iter()
                .map(|(&id, &c)| (id, c as f64 / pixels_per_patch))
                .collect();
            // ascending id iteration with strict > keeps ties on smaller id
            let mut best: Option<(u32, f64)> = None;
            for (&id, &frac) in &fracs {
                if best.is_none_or(|(_, bf)| frac > bf) {
                    best = Some((id, frac));
                }
            }
            let label = match best {
                Some((id, frac)) if frac >= threshold => PatchLabel::Object(id),
                _ => PatchLabel::Background,
            };
            labels.push(label);
            fractions.push(fracs);
        }
    }
    Ok(PatchLabelMap { labels, fractions })
}

/// Parse the sidecar id-to-name map (JSON object with numeric-string keys).
pub fn parse_sidecar(text: &str) -> Result<BTreeMap<u32, String>> {
    let raw: BTreeMap<String, String> =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("label sidecar: {e}")))?;
    let mut out = BTreeMap::new();
    for (key, name) in raw {
        let id: u32 = key
            .parse()
            .map_err(|_| Error::Format(format!("sidecar key {key:?} is not a class id")))?;
        out.insert(id, name);
    }
    Ok(out)
}
