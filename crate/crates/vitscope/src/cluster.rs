//! DBSCAN over patch embeddings and the clustering measures evaluated per
//! layer: purity, Silhouette, in-cluster cosine, in-object cosine, and the
//! unique label ratio. All metric arithmetic runs in f64.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{PatchLabel, PatchLabelMap};
use crate::model::ForwardTrace;
use crate::tensor::Tensor;

/// Patch-token embeddings of one layer (class token excluded).
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    /// `[n, D]`.
    pub vectors: Tensor,
    pub layer: usize,
    /// Free-form provenance (image id, perturbation), carried into reports.
    pub source: String,
}

impl EmbeddingSet {
    pub fn new(vectors: Tensor, layer: usize, source: impl Into<String>) -> Result<Self> {
        if vectors.rank() != 2 || vectors.shape()[0] == 0 {
            return Err(Error::ShapeMismatch(format!(
                "embedding set wants a non-empty [n, D] tensor, got {:?}",
                vectors.shape()
            )));
        }
        Ok(EmbeddingSet {
            vectors,
            layer,
            source: source.into(),
        })
    }

    pub fn from_trace(
        trace: &ForwardTrace,
        layer: usize,
        source: impl Into<String>,
    ) -> Result<Self> {
        EmbeddingSet::new(trace.patch_matrix(layer)?, layer, source)
    }

    pub fn len(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn row(&self, i: usize) -> &[f32] {
        self.vectors.row(i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    /// `1 - cos(u, v)`; a zero-norm vector is maximally distant (1.0)
    /// from everything except another zero vector (0.0).
    #[default]
    Cosine,
}

fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn cosine_sim(a: &[f32], b: &[f32]) -> Option<f64> {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot / (na.sqrt() * nb.sqrt()))
}

fn distance(metric: Metric, a: &[f32], b: &[f32]) -> f64 {
    match metric {
        Metric::Euclidean => euclidean(a, b),
        Metric::Cosine => match cosine_sim(a, b) {
            Some(c) => 1.0 - c,
            // two zero vectors coincide; one zero vector is maximally far
            None => {
                let both_zero =
                    a.iter().all(|&x| x == 0.0) && b.iter().all(|&x| x == 0.0);
                if both_zero {
                    0.0
                } else {
                    1.0
                }
            }
        },
    }
}

/// Cluster id per vector; -1 is noise. Ids are contiguous `0..n_clusters`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub ids: Vec<i64>,
    pub eps: f64,
    pub min_pts: usize,
    pub metric: Metric,
}

impl ClusterAssignment {
    pub fn n_clusters(&self) -> usize {
        self.ids.iter().copied().max().map_or(0, |m| (m + 1).max(0)) as usize
    }

    pub fn n_noise(&self) -> usize {
        self.ids.iter().filter(|&&id| id < 0).count()
    }

    /// Member indices per cluster, ids ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters()];
        for (i, &id) in self.ids.iter().enumerate() {
            if id >= 0 {
                out[id as usize].push(i);
            }
        }
        out
    }
}

/// Classic DBSCAN with inclusive eps boundary (the neighborhood contains
/// the point itself). Points are scanned in ascending index order and
/// cluster expansion uses a FIFO queue in discovery order, so a border
/// point reachable from several clusters deterministically joins the one
/// whose core was reached first.
pub fn dbscan(
    set: &EmbeddingSet,
    eps: f64,
    min_pts: usize,
    metric: Metric,
) -> Result<ClusterAssignment> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!("eps {eps} must be > 0")));
    }
    if min_pts == 0 {
        return Err(Error::InvalidArgument("min_pts must be >= 1".into()));
    }
    let n = set.len();
    let query = |i: usize| -> Vec<usize> {
        (0..n)
            .filter(|&j| distance(metric, set.row(i), set.row(j)) <= eps)
            .collect()
    };

    const UNASSIGNED: i64 = -2;
    let mut ids = vec![UNASSIGNED; n];
    let mut next_cluster: i64 = 0;
    for i in 0..n {
        if ids[i] != UNASSIGNED {
            continue;
        }
        let neighbors = query(i);
        if neighbors.len() < min_pts {
            ids[i] = -1;
            continue;
        }
        ids[i] = next_cluster;
        let mut queue: VecDeque<usize> = neighbors.into_iter().filter(|&j| j != i).collect();
        while let Some(j) = queue.pop_front() {
            if ids[j] == -1 {
                ids[j] = next_cluster; // noise becomes a border point
            }
            if ids[j] != UNASSIGNED {
                continue;
            }
            ids[j] = next_cluster;
            let reach = query(j);
            if reach.len() >= min_pts {
                queue.extend(reach);
            }
        }
        next_cluster += 1;
    }
    Ok(ClusterAssignment {
        ids,
        eps,
        min_pts,
        metric,
    })
}

/// Data-driven eps: the median k-th-nearest-neighbor distance scaled by
/// `factor`, floored at a tiny positive value so duplicate points still
/// cluster.
pub fn auto_eps(set: &EmbeddingSet, k: usize, factor: f64, metric: Metric) -> f64 {
    const FLOOR: f64 = 1e-12;
    let n = set.len();
    if n < 2 {
        return FLOOR;
    }
    let k_eff = k.clamp(1, n - 1);
    let mut kth: Vec<f64> = (0..n)
        .map(|i| {
            let mut dists: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| distance(metric, set.row(i), set.row(j)))
                .collect();
            dists.sort_by(|a, b| a.total_cmp(b));
            dists[k_eff - 1]
        })
        .collect();
    kth.sort_by(|a, b| a.total_cmp(b));
    let median = if n % 2 == 1 {
        kth[n / 2]
    } else {
        (kth[n / 2 - 1] + kth[n / 2]) / 2.0
    };
    (median * factor).max(FLOOR)
}

/// Which total the purity sum divides by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PurityDenominator {
    /// Clustered (non-noise) points only.
    #[default]
    Clustered,
    /// Every vector, noise contributing nothing to the numerator.
    AllPoints,
}

fn check_label_count(set_len: usize, labels: &[PatchLabel]) -> Result<()> {
    if labels.len() != set_len {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {set_len} vectors",
            labels.len()
        )));
    }
    Ok(())
}

/// Sum over clusters of the most frequent label's count, divided by the
/// chosen total.
pub fn purity(
    assignment: &ClusterAssignment,
    labels: &[PatchLabel],
    mode: PurityDenominator,
) -> Result<f64> {
    check_label_count(assignment.ids.len(), labels)?;
    let members = assignment.members();
    let clustered: usize = members.iter().map(|m| m.len()).sum();
    if clustered == 0 {
        return Err(Error::InvalidArgument(
            "purity undefined without clustered points".into(),
        ));
    }
    let mut dominant_total = 0usize;
    for cluster in &members {
        let mut counts: BTreeMap<PatchLabel, usize> = BTreeMap::new();
        for &i in cluster {
            *counts.entry(labels[i]).or_insert(0) += 1;
        }
        dominant_total += counts.values().copied().max().unwrap_or(0);
    }
    let denom = match mode {
        PurityDenominator::Clustered => clustered,
        PurityDenominator::AllPoints => assignment.ids.len(),
    };
    Ok(dominant_total as f64 / denom as f64)
}

/// Mean Silhouette value over clustered points, Euclidean distances per
/// the score's definition. Singleton clusters contribute 0; noise points
/// are excluded; fewer than two clusters has no defined score.
pub fn silhouette(set: &EmbeddingSet, assignment: &ClusterAssignment) -> Result<Option<f64>> {
    if assignment.ids.len() != set.len() {
        return Err(Error::ShapeMismatch(
            "assignment does not match embedding set".into(),
        ));
    }
    let members = assignment.members();
    if members.len() < 2 {
        return Ok(None);
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (c, cluster) in members.iter().enumerate() {
        for &i in cluster {
            count += 1;
            if cluster.len() == 1 {
                continue; // singleton contributes 0
            }
            let a = cluster
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| euclidean(set.row(i), set.row(j)))
                .sum::<f64>()
                / (cluster.len() - 1) as f64;
            let b = members
                .iter()
                .enumerate()
                .filter(|(m, other)| *m != c && !other.is_empty())
                .map(|(_, other)| {
                    other
                        .iter()
                        .map(|&j| euclidean(set.row(i), set.row(j)))
                        .sum::<f64>()
                        / other.len() as f64
                })
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                total += (b - a) / denom;
            }
        }
    }
    Ok(Some(total / count as f64))
}

/// Which denominator the unique-label ratio uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioMode {
    /// Distinct dominated labels over (object count + 1).
    #[default]
    ObjectsPlusBackground,
    /// Distinct dominated object labels over the object count.
    ObjectsOnly,
}

/// The label dominating each cluster (ties to the Ord-smaller label).
pub fn dominated_labels(
    assignment: &ClusterAssignment,
    labels: &[PatchLabel],
) -> Result<Vec<(usize, PatchLabel, usize, usize)>> {
    check_label_count(assignment.ids.len(), labels)?;
    let mut out = Vec::new();
    for (c, cluster) in assignment.members().iter().enumerate() {
        if cluster.is_empty() {
            continue;
        }
        let mut counts: BTreeMap<PatchLabel, usize> = BTreeMap::new();
        for &i in cluster {
            *counts.entry(labels[i]).or_insert(0) += 1;
        }
        let (&label, &count) = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .unwrap();
        out.push((c, label, count, cluster.len()));
    }
    Ok(out)
}

/// Distinct dominated labels over the label-universe size. Clusters
/// dominated by the occlusion category are not counted (they are neither
/// an object nor background).
pub fn unique_label_ratio(
    assignment: &ClusterAssignment,
    labels: &[PatchLabel],
    mode: RatioMode,
) -> Result<f64> {
    let dominated = dominated_labels(assignment, labels)?;
    let objects: BTreeSet<u32> = labels
        .iter()
        .filter_map(|l| match l {
            PatchLabel::Object(id) => Some(*id),
            _ => None,
        })
        .collect();
    let distinct: BTreeSet<PatchLabel> = dominated
        .iter()
        .map(|&(_, label, _, _)| label)
        .filter(|label| match mode {
            RatioMode::ObjectsPlusBackground => *label != PatchLabel::Dropped,
            RatioMode::ObjectsOnly => matches!(label, PatchLabel::Object(_)),
        })
        .collect();
    let denom = match mode {
        RatioMode::ObjectsPlusBackground => objects.len() + 1,
        RatioMode::ObjectsOnly => objects.len(),
    };
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(distinct.len() as f64 / denom as f64)
}

/// Mean pairwise cosine within groups, averaged with equal group weight.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CosineStat {
    pub mean: Option<f64>,
    /// Pairs skipped because a zero-norm vector has no cosine.
    pub skipped_pairs: usize,
}

fn group_cosine(set: &EmbeddingSet, groups: &[Vec<usize>]) -> CosineStat {
    let mut group_means = Vec::new();
    let mut skipped = 0usize;
    for group in groups {
        if group.len() < 2 {
            continue;
        }
        let mut total = 0.0f64;
        let mut pairs = 0usize;
        for (a, &i) in group.iter().enumerate() {
            for &j in &group[a + 1..] {
                match cosine_sim(set.row(i), set.row(j)) {
                    Some(c) => {
                        total += c;
                        pairs += 1;
                    }
                    None => skipped += 1,
                }
            }
        }
        if pairs > 0 {
            group_means.push(total / pairs as f64);
        }
    }
    CosineStat {
        mean: if group_means.is_empty() {
            None
        } else {
            Some(group_means.iter().sum::<f64>() / group_means.len() as f64)
        },
        skipped_pairs: skipped,
    }
}

/// Average cosine similarity within clusters (noise excluded).
pub fn mean_in_cluster_cosine(set: &EmbeddingSet, assignment: &ClusterAssignment) -> CosineStat {
    group_cosine(set, &assignment.members())
}

/// Average cosine similarity within each object's patches.
pub fn mean_in_object_cosine(set: &EmbeddingSet, labels: &[PatchLabel]) -> CosineStat {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, label) in labels.iter().enumerate().take(set.len()) {
        if let PatchLabel::Object(id) = label {
            groups.entry(*id).or_default().push(i);
        }
    }
    let groups: Vec<Vec<usize>> = groups.into_values().collect();
    group_cosine(set, &groups)
}

/// Settings for a per-layer sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSettings {
    /// Fixed eps; when absent each layer picks its own via [`auto_eps`].
    pub eps: Option<f64>,
    pub min_pts: usize,
    pub metric: Metric,
    pub purity_mode: PurityDenominator,
    pub ratio_mode: RatioMode,
    pub auto_eps_k: usize,
    pub auto_eps_factor: f64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            eps: None,
            min_pts: 3,
            metric: Metric::Cosine,
            purity_mode: PurityDenominator::Clustered,
            ratio_mode: RatioMode::ObjectsPlusBackground,
            auto_eps_k: 3,
            auto_eps_factor: 0.9,
        }
    }
}

/// Cluster assignment quality of one layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterReport {
    pub layer: usize,
    pub eps: f64,
    pub min_pts: usize,
    pub n_clusters: usize,
    pub n_noise: usize,
    pub purity: Option<f64>,
    pub silhouette: Option<f64>,
    pub in_cluster_cosine: Option<f64>,
    pub in_object_cosine: Option<f64>,
    pub unique_label_ratio: f64,
    pub skipped_pairs: usize,
    /// (cluster id, dominating label, its count, cluster size).
    pub dominated: Vec<(usize, PatchLabel, usize, usize)>,
}

/// Run DBSCAN plus all five measures over one embedding set.
pub fn cluster_report(
    set: &EmbeddingSet,
    labels: &[PatchLabel],
    settings: &SweepSettings,
) -> Result<ClusterReport> {
    check_label_count(set.len(), labels)?;
    let eps = settings.eps.unwrap_or_else(|| {
        auto_eps(
            set,
            settings.auto_eps_k,
            settings.auto_eps_factor,
            settings.metric,
        )
    });
    let assignment = dbscan(set, eps, settings.min_pts, settings.metric)?;
    let purity_value = purity(&assignment, labels, settings.purity_mode).ok();
    let silhouette_value = silhouette(set, &assignment)?;
    let in_cluster = mean_in_cluster_cosine(set, &assignment);
    let in_object = mean_in_object_cosine(set, labels);
    let ratio = unique_label_ratio(&assignment, labels, settings.ratio_mode)?;
    Ok(ClusterReport {
        layer: set.layer,
        eps,
        min_pts: settings.min_pts,
        n_clusters: assignment.n_clusters(),
        n_noise: assignment.n_noise(),
        purity: purity_value,
        silhouette: silhouette_value,
        in_cluster_cosine: in_cluster.mean,
        in_object_cosine: in_object.mean,
        unique_label_ratio: ratio,
        skipped_pairs: in_cluster.skipped_pairs + in_object.skipped_pairs,
        dominated: dominated_labels(&assignment, labels)?,
    })
}

/// One report per layer `0..trace.layers()`, block outputs with the class
/// token excluded. Layer 0 is the patch-embedding matrix itself.
pub fn layer_sweep(
    trace: &ForwardTrace,
    labels: &PatchLabelMap,
    settings: &SweepSettings,
    source: &str,
) -> Result<Vec<ClusterReport>> {
    if labels.n_patches() != trace.tokens() - 1 {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} patch tokens",
            labels.n_patches(),
            trace.tokens() - 1
        )));
    }
    let mut reports = Vec::with_capacity(trace.layers());
    for layer in 0..trace.layers() {
        let set = EmbeddingSet::from_trace(trace, layer, source)?;
        reports.push(cluster_report(&set, &labels.labels, settings)?);
    }
    Ok(reports)
}

/// Frozen column order for the measures CSV.
pub const REPORT_CSV_HEADER: &str =
    "layer,purity,silhouette,in_cluster_cos,in_object_cos,unique_label_ratio";

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn reports_to_csv(reports: &[ClusterReport]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.layer,
            opt_cell(r.purity),
            opt_cell(r.silhouette),
            opt_cell(r.in_cluster_cosine),
            opt_cell(r.in_object_cosine),
            r.unique_label_ratio
        ));
    }
    out
}
