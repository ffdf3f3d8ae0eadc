//! Exact (non-approximate) t-SNE to 2-D for the per-layer embedding
//! figures.
//!
//! Input similarities use per-point bandwidths binary-searched to the
//! target perplexity, then symmetrized. The embedding starts from a
//! 2-component PCA projection (power iteration, seeded start vectors)
//! scaled so the first coordinate has variance 1e-4, and descends the KL
//! objective with the reference recipe: learning rate 200 with adaptive
//! per-coordinate gains, momentum 0.5 switching to 0.8 at iteration 250,
//! and early exaggeration 12 for the first 250 iterations. The KL
//! divergence against the true (un-exaggerated) P is recorded every 50
//! iterations. All internal math is f64, so a run is deterministic given
//! its seed.

use crate::cluster::EmbeddingSet;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TsneParams {
    pub perplexity: f64,
    pub iterations: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Iteration at which exaggeration is removed.
    pub exaggeration_end: usize,
    /// Iteration at which momentum switches to its final value.
    pub momentum_switch: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Record KL(P||Q) every this many iterations (and at the last).
    pub record_every: usize,
}

impl Default for TsneParams {
    fn default() -> Self {
        TsneParams {
            perplexity: 15.0,
            iterations: 1000,
            seed: 0,
            // max(n / (4 * exaggeration), 50) rounded for the ~196-point
            // sets this runs on; 200 overshoots and oscillates there
            learning_rate: 50.0,
            early_exaggeration: 12.0,
            exaggeration_end: 250,
            momentum_switch: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            record_every: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TsneResult {
    /// `[n, 2]` embedding.
    pub coords: Tensor,
    /// `(iteration, KL(P||Q))` samples, true P throughout.
    pub kl_trajectory: Vec<(usize, f64)>,
}

const P_MIN: f64 = 1e-12;

/// Squared Euclidean distance matrix in f64.
fn squared_distances(set: &EmbeddingSet) -> Vec<f64> {
    let n = set.len();
    let mut d2 = vec![0.0f64; n * n];
    for i in 0..n {
        let a = set.vectors.row(i);
        for j in i + 1..n {
            let b = set.vectors.row(j);
            let mut acc = 0.0f64;
            for (&x, &y) in a.iter().zip(b) {
                let d = x as f64 - y as f64;
                acc += d * d;
            }
            d2[i * n + j] = acc;
            d2[j * n + i] = acc;
        }
    }
    d2
}

/// Conditional distributions with per-point precision binary-searched so
/// the Shannon entropy matches `ln(perplexity)`.
fn conditional_p(d2: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0f64; n * n];
    for i in 0..n {
        let mut beta = 1.0f64;
        let mut beta_lo = f64::NEG_INFINITY;
        let mut beta_hi = f64::INFINITY;
        let row = &d2[i * n..(i + 1) * n];
        let mut probs = vec![0.0f64; n];
        for _ in 0..64 {
            let mut sum = 0.0f64;
            let mut dot = 0.0f64;
            for (j, &d) in row.iter().enumerate() {
                if j == i {
                    probs[j] = 0.0;
                    continue;
                }
                let e = (-beta * d).exp();
                probs[j] = e;
                sum += e;
                dot += d * e;
            }
            if sum <= 0.0 {
                // beta ran away (all other points identical won't do this;
                // extreme distances can) - relax and retry
                beta /= 2.0;
                beta_hi = f64::INFINITY;
                continue;
            }
            // H = ln(sum) + beta * E[d]
            let entropy = sum.ln() + beta * dot / sum;
            let diff = entropy - target;
            if diff.abs() < 1e-7 {
                break;
            }
            if diff > 0.0 {
                beta_lo = beta;
                beta = if beta_hi.is_finite() {
                    (beta + beta_hi) / 2.0
                } else {
                    beta * 2.0
                };
            } else {
                beta_hi = beta;
                beta = if beta_lo.is_finite() {
                    (beta + beta_lo) / 2.0
                } else {
                    beta / 2.0
                };
            }
        }
        let sum: f64 = probs.iter().sum();
        if sum > 0.0 {
            for (j, &e) in probs.iter().enumerate() {
                p[i * n + j] = e / sum;
            }
        } else {
            // all other points at identical (infinite-precision) spots:
            // fall back to uniform
            for j in 0..n {
                if j != i {
                    p[i * n + j] = 1.0 / (n - 1) as f64;
                }
            }
        }
    }
    p
}

/// Symmetrized, normalized joint distribution.
fn joint_p(set: &EmbeddingSet, perplexity: f64) -> Vec<f64> {
    let n = set.len();
    let d2 = squared_distances(set);
    let cond = conditional_p(&d2, n, perplexity);
    let mut p = vec![0.0f64; n * n];
    let norm = 1.0 / (2.0 * n as f64);
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) * norm;
        }
    }
    p
}

/// Top-2 PCA scores via power iteration with deflation.
fn pca2_init(set: &EmbeddingSet, rng: &mut SplitMix64) -> Vec<f64> {
    let n = set.len();
    let d = set.vectors.shape()[1];
    // centered data in f64
    let mut x = vec![0.0f64; n * d];
    for i in 0..n {
        for (j, &v) in set.vectors.row(i).iter().enumerate() {
            x[i * d + j] = v as f64;
        }
    }
    for j in 0..d {
        let mean: f64 = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            x[i * d + j] -= mean;
        }
    }

    let mut scores = vec![0.0f64; n * 2];
    let mut deflated = x;
    for comp in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        for _ in 0..128 {
            // w = X^T (X v)
            let mut xv = vec![0.0f64; n];
            for i in 0..n {
                xv[i] = deflated[i * d..(i + 1) * d]
                    .iter()
                    .zip(&v)
                    .map(|(a, b)| a * b)
                    .sum();
            }
            let mut w = vec![0.0f64; d];
            for i in 0..n {
                for j in 0..d {
                    w[j] += deflated[i * d + j] * xv[i];
                }
            }
            let norm: f64 = w.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break; // degenerate direction; keep last v
            }
            for (vv, ww) in v.iter_mut().zip(&w) {
                *vv = ww / norm;
            }
        }
        for i in 0..n {
            let s: f64 = deflated[i * d..(i + 1) * d]
                .iter()
                .zip(&v)
                .map(|(a, b)| a * b)
                .sum();
            scores[i * 2 + comp] = s;
            // deflate: remove the component from the data
            for j in 0..d {
                deflated[i * d + j] -= s * v[j];
            }
        }
    }

    // scale so the first coordinate has variance 1e-4
    let mean0: f64 = (0..n).map(|i| scores[i * 2]).sum::<f64>() / n as f64;
    let var0: f64 = (0..n)
        .map(|i| (scores[i * 2] - mean0) * (scores[i * 2] - mean0))
        .sum::<f64>()
        / n as f64;
    if var0 > 1e-300 {
        let s = (1e-4 / var0).sqrt();
        for y in &mut scores {
            *y *= s;
        }
    } else {
        // PCA collapsed (e.g. all points identical): tiny Gaussian start
        for y in &mut scores {
            *y = rng.gaussian() * 1e-2;
        }
    }
    scores
}

fn kl_divergence(p: &[f64], y: &[f64], n: usize) -> f64 {
    let mut z = 0.0f64;
    let mut w = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[i * 2] - y[j * 2];
            let dy = y[i * 2 + 1] - y[j * 2 + 1];
            let wij = 1.0 / (1.0 + dx * dx + dy * dy);
            w[i * n + j] = wij;
            w[j * n + i] = wij;
            z += 2.0 * wij;
        }
    }
    let mut kl = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let pij = p[i * n + j].max(P_MIN);
            let qij = (w[i * n + j] / z).max(P_MIN);
            kl += pij * (pij / qij).ln();
        }
    }
    kl
}

/// Run exact t-SNE on an embedding set.
pub fn tsne(set: &EmbeddingSet, params: &TsneParams) -> Result<TsneResult> {
    let n = set.len();
    if params.perplexity >= n as f64 {
        return Err(Error::InvalidArgument(format!(
            "perplexity {} must be below the point count {n}",
            params.perplexity
        )));
    }
    if params.perplexity <= 0.0 {
        return Err(Error::InvalidArgument("perplexity must be positive".into()));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 points".into()));
    }

    let p_true = joint_p(set, params.perplexity);
    let mut rng = SplitMix64::new(params.seed);
    let mut y = pca2_init(set, &mut rng);
    let mut velocity = vec![0.0f64; n * 2];
    let mut gains = vec![1.0f64; n * 2];
    let mut grad = vec![0.0f64; n * 2];
    let mut kl_trajectory = Vec::new();

    for iter in 0..=params.iterations {
        if iter % params.record_every == 0 || iter == params.iterations {
            kl_trajectory.push((iter, kl_divergence(&p_true, &y, n)));
        }
        if iter == params.iterations {
            break;
        }
        let exaggeration = if iter < params.exaggeration_end {
            params.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < params.momentum_switch {
            params.initial_momentum
        } else {
            params.final_momentum
        };

        // Student-t weights and their normalizer
        let mut z = 0.0f64;
        let mut w = vec![0.0f64; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i * 2] - y[j * 2];
                let dy = y[i * 2 + 1] - y[j * 2 + 1];
                let wij = 1.0 / (1.0 + dx * dx + dy * dy);
                w[i * n + j] = wij;
                w[j * n + i] = wij;
                z += 2.0 * wij;
            }
        }

        grad.fill(0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let wij = w[i * n + j];
                let qij = (wij / z).max(P_MIN);
                let mult = (exaggeration * p_true[i * n + j] - qij) * wij;
                grad[i * 2] += 4.0 * mult * (y[i * 2] - y[j * 2]);
                grad[i * 2 + 1] += 4.0 * mult * (y[i * 2 + 1] - y[j * 2 + 1]);
            }
        }

        for k in 0..n * 2 {
            gains[k] = if grad[k].signum() != velocity[k].signum() {
                gains[k] + 0.2
            } else {
                gains[k] * 0.8
            };
            if gains[k] < 0.01 {
                gains[k] = 0.01;
            }
            velocity[k] = momentum * velocity[k] - params.learning_rate * gains[k] * grad[k];
            y[k] += velocity[k];
        }

        // re-center
        let mx: f64 = (0..n).map(|i| y[i * 2]).sum::<f64>() / n as f64;
        let my: f64 = (0..n).map(|i| y[i * 2 + 1]).sum::<f64>() / n as f64;
        for i in 0..n {
            y[i * 2] -= mx;
            y[i * 2 + 1] -= my;
        }
    }

    let coords: Vec<f32> = y.iter().map(|&v| v as f32).collect();
    Ok(TsneResult {
        coords: Tensor::new(vec![n, 2], coords)?,
        kl_trajectory,
    })
}

/// Coordinates CSV with labels and the class-token attention column.
pub fn tsne_csv(coords: &Tensor, labels: &[String], class_attention: &[f32]) -> String {
    let n = coords.shape()[0];
    let mut out = String::from("x,y,label,cls_attention\n");
    for i in 0..n {
        let label = labels.get(i).map(String::as_str).unwrap_or("");
        let attn = class_attention.get(i).copied().unwrap_or(0.0);
        out.push_str(&format!(
            "{},{},{},{}\n",
            coords.at2(i, 0),
            coords.at2(i, 1),
            label,
            attn
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_from(rows: Vec<Vec<f32>>) -> EmbeddingSet {
        let n = rows.len();
        let d = rows[0].len();
        let data: Vec<f32> = rows.into_iter().flatten().collect();
        EmbeddingSet::new(Tensor::new(vec![n, d], data).unwrap(), 0, "tsne-test").unwrap()
    }

    fn pairwise(coords: &Tensor) -> Vec<f64> {
        let n = coords.shape()[0];
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let dx = (coords.at2(i, 0) - coords.at2(j, 0)) as f64;
                let dy = (coords.at2(i, 1) - coords.at2(j, 1)) as f64;
                out.push((dx * dx + dy * dy).sqrt());
            }
        }
        out
    }

    #[test]
    fn rejects_perplexity_at_or_above_n() {
        let set = set_from(vec![vec![0.0], vec![1.0], vec![2.0]]);
        let params = TsneParams {
            perplexity: 3.0,
            ..TsneParams::default()
        };
        assert!(tsne(&set, &params).is_err());
    }

    #[test]
    fn triangle_embeds_equidistant() {
        // the 2-simplex is realizable in the plane, so equal input
        // distances must come out equal
        let set = set_from(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let params = TsneParams {
            perplexity: 2.0,
            iterations: 600,
            seed: 4,
            ..TsneParams::default()
        };
        let result = tsne(&set, &params).unwrap();
        let d = pairwise(&result.coords);
        let mean: f64 = d.iter().sum::<f64>() / d.len() as f64;
        for &x in &d {
            assert!(
                (x - mean).abs() / mean < 0.1,
                "distance {x} strays from mean {mean}"
            );
        }
    }

    #[test]
    fn tetrahedron_embeds_symmetrically() {
        // four equidistant points cannot stay equidistant in the plane;
        // the symmetry that must survive is that every point sees the
        // same sorted distance profile
        let set = set_from(vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ]);
        let params = TsneParams {
            perplexity: 3.0,
            iterations: 800,
            seed: 9,
            ..TsneParams::default()
        };
        let result = tsne(&set, &params).unwrap();
        let coords = &result.coords;
        let mut profiles: Vec<Vec<f64>> = Vec::new();
        for i in 0..4 {
            let mut row = Vec::new();
            for j in 0..4 {
                if i == j {
                    continue;
                }
                let dx = (coords.at2(i, 0) - coords.at2(j, 0)) as f64;
                let dy = (coords.at2(i, 1) - coords.at2(j, 1)) as f64;
                row.push((dx * dx + dy * dy).sqrt());
            }
            row.sort_by(|a, b| a.total_cmp(b));
            profiles.push(row);
        }
        for k in 0..3 {
            let mean: f64 = profiles.iter().map(|p| p[k]).sum::<f64>() / 4.0;
            for p in &profiles {
                assert!(
                    (p[k] - mean).abs() / mean < 0.1,
                    "profile slot {k}: {} vs mean {mean}",
                    p[k]
                );
            }
        }
    }

    #[test]
    fn identical_inputs_become_nearest_neighbors() {
        let mut rows = vec![vec![0.5f32, -0.25, 0.8]; 2]; // duplicates
        for i in 0..6 {
            rows.push(vec![
                10.0 + 3.0 * i as f32,
                -5.0 * i as f32,
                7.0 * ((i % 2) as f32 - 0.5),
            ]);
        }
        let set = set_from(rows);
        let params = TsneParams {
            perplexity: 3.0,
            iterations: 500,
            seed: 11,
            ..TsneParams::default()
        };
        let result = tsne(&set, &params).unwrap();
        let coords = &result.coords;
        let dist = |i: usize, j: usize| {
            let dx = (coords.at2(i, 0) - coords.at2(j, 0)) as f64;
            let dy = (coords.at2(i, 1) - coords.at2(j, 1)) as f64;
            (dx * dx + dy * dy).sqrt()
        };
        for (a, b) in [(0usize, 1usize), (1, 0)] {
            let to_twin = dist(a, b);
            for j in 2..8 {
                assert!(
                    to_twin < dist(a, j),
                    "point {a}: twin at {to_twin}, point {j} at {}",
                    dist(a, j)
                );
            }
        }
    }

    #[test]
    fn kl_decreases_from_exaggeration_end_to_final() {
        let mut rng = SplitMix64::new(17);
        let rows: Vec<Vec<f32>> = (0..30)
            .map(|_| (0..8).map(|_| rng.uniform(-1.0, 1.0) as f32).collect())
            .collect();
        let set = set_from(rows);
        let params = TsneParams {
            perplexity: 8.0,
            iterations: 1000,
            seed: 3,
            ..TsneParams::default()
        };
        let result = tsne(&set, &params).unwrap();
        let at = |it: usize| {
            result
                .kl_trajectory
                .iter()
                .find(|(i, _)| *i == it)
                .map(|(_, kl)| *kl)
                .unwrap()
        };
        assert!(at(1000) <= at(250) + 1e-9);
        // windows after exaggeration are non-increasing
        let after: Vec<f64> = result
            .kl_trajectory
            .iter()
            .filter(|(i, _)| *i >= 250)
            .map(|(_, kl)| *kl)
            .collect();
        for pair in after.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-6,
                "KL increased within a window: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = SplitMix64::new(8);
        let rows: Vec<Vec<f32>> = (0..12)
            .map(|_| (0..4).map(|_| rng.uniform(-1.0, 1.0) as f32).collect())
            .collect();
        let set = set_from(rows);
        let params = TsneParams {
            perplexity: 4.0,
            iterations: 120,
            seed: 5,
            ..TsneParams::default()
        };
        let a = tsne(&set, &params).unwrap();
        let b = tsne(&set, &params).unwrap();
        assert_eq!(a.coords.data(), b.coords.data());
        assert_eq!(a.kl_trajectory, b.kl_trajectory);
    }

    #[test]
    fn csv_has_expected_columns() {
        let coords = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let labels = vec!["object:1".to_string(), "background".to_string()];
        let csv = tsne_csv(&coords, &labels, &[0.25, 0.5]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "x,y,label,cls_attention");
        assert_eq!(lines.next().unwrap(), "0.5,-1,object:1,0.25");
    }
}
