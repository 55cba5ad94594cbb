//! Exact t-SNE into two dimensions.
//!
//! Straight O(N^2) implementation: per-point Gaussian bandwidths are found by
//! bisection on the conditional perplexity, affinities are symmetrised, and the
//! low-dimensional map is optimised by gradient descent with momentum, per
//! coordinate gains and early exaggeration. All per-row work is independent
//! and every reduction runs in fixed index order, so the output does not
//! depend on the number of rayon workers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::data::{format_real, read_table, Dataset};
use crate::error::{invalid, Error, Result};
use crate::rng;

const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    /// Iteration at which momentum switches from `initial_momentum` to
    /// `final_momentum`.
    pub momentum_switch: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Absolute tolerance on the achieved perplexity of each conditional row.
    pub perplexity_tolerance: f64,
    pub max_bisection_steps: usize,
    /// The KL divergence is recorded every this many iterations and once
    /// more for the final map.
    pub kl_every: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 100,
            momentum_switch: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            perplexity_tolerance: 1e-5,
            max_bisection_steps: 50,
            kl_every: 10,
            seed: 0,
        }
    }
}

/// A 2-D embedding with its optimisation trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub points: Array2<f64>,
    /// `(k, KL(P || Q))` for the map after `k` updates.
    pub kl_trace: Vec<(usize, f64)>,
    pub config: TsneConfig,
}

impl Embedding {
    /// Wrap externally computed 2-D coordinates (e.g. loaded from disk).
    pub fn from_points(points: Array2<f64>) -> Result<Self> {
        if points.ncols() != 2 || points.nrows() == 0 {
            return invalid(format!("embedding must be N x 2, got {:?}", points.dim()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding coordinate".into()));
        }
        Ok(Self {
            points,
            kl_trace: Vec::new(),
            config: TsneConfig::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Squared Euclidean distances between all rows.
pub fn pairwise_sq_distances(points: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite input to pairwise distances".into()));
    }
    let n = points.nrows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = points.row(i);
            (0..n)
                .map(|j| {
                    if i == j {
                        return 0.0;
                    }
                    xi.iter()
                        .zip(points.row(j).iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum()
                })
                .collect()
        })
        .collect();
    let mut out = Array2::zeros((n, n));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    // exact symmetry regardless of summation order inside each pair
    for i in 0..n {
        for j in 0..i {
            out[[i, j]] = out[[j, i]];
        }
    }
    Ok(out)
}

/// Row-stochastic conditional affinities `p_{j|i}` and the perplexity each
/// row achieved.
#[derive(Debug, Clone)]
pub struct ConditionalAffinities {
    pub probabilities: Array2<f64>,
    pub perplexities: Vec<f64>,
    pub precisions: Vec<f64>,
}

pub fn conditional_affinities(
    sq_distances: &Array2<f64>,
    perplexity: f64,
    tolerance: f64,
    max_steps: usize,
) -> Result<ConditionalAffinities> {
    let n = sq_distances.nrows();
    let rows: Vec<(Vec<f64>, f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| row_affinities(sq_distances, i, perplexity, tolerance, max_steps))
        .collect();
    let mut probabilities = Array2::zeros((n, n));
    let mut perplexities = Vec::with_capacity(n);
    let mut precisions = Vec::with_capacity(n);
    for (i, (p, perp, beta)) in rows.into_iter().enumerate() {
        for (j, v) in p.into_iter().enumerate() {
            probabilities[[i, j]] = v;
        }
        perplexities.push(perp);
        precisions.push(beta);
    }
    Ok(ConditionalAffinities {
        probabilities,
        perplexities,
        precisions,
    })
}

/// Bisection on the Gaussian precision `beta` of row `i`; perplexity is
/// decreasing in `beta`. Distances are shifted by the row minimum, which
/// leaves the normalised row unchanged and keeps `exp` in range.
fn row_affinities(
    d: &Array2<f64>,
    i: usize,
    perplexity: f64,
    tolerance: f64,
    max_steps: usize,
) -> (Vec<f64>, f64, f64) {
    let n = d.nrows();
    let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    let min_d = others.iter().map(|&j| d[[i, j]]).fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = others.iter().map(|&j| d[[i, j]] - min_d).collect();
    let mean_shift = shifted.iter().sum::<f64>() / shifted.len() as f64;

    let evaluate = |beta: f64| -> (Vec<f64>, f64) {
        let w: Vec<f64> = shifted.iter().map(|s| (-beta * s).exp()).collect();
        let z: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|v| v / z).collect();
        let entropy: f64 = p
            .iter()
            .filter(|v| **v > 0.0)
            .map(|v| -v * v.ln())
            .sum();
        (p, entropy.exp())
    };

    let mut beta = if mean_shift > 0.0 { 1.0 / mean_shift } else { 1.0 };
    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    let (mut p, mut perp) = evaluate(beta);
    for _ in 0..max_steps {
        let diff = perp - perplexity;
        if diff.abs() <= tolerance {
            break;
        }
        if diff > 0.0 {
            // too flat: sharpen
            lo = beta;
            beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = 0.5 * (beta + lo);
        }
        (p, perp) = evaluate(beta);
    }

    let mut full = vec![0.0; n];
    for (k, &j) in others.iter().enumerate() {
        full[j] = p[k];
    }
    (full, perp, beta)
}

/// Symmetrised joint affinities `p_ij = (p_{j|i} + p_{i|j}) / 2N`.
pub fn joint_affinities(conditional: &Array2<f64>) -> Array2<f64> {
    let n = conditional.nrows();
    let scale = 1.0 / (2.0 * n as f64);
    Array2::from_shape_fn((n, n), |(i, j)| {
        (conditional[[i, j]] + conditional[[j, i]]) * scale
    })
}

pub fn tsne_embed(data: &Dataset, config: &TsneConfig) -> Result<Embedding> {
    let n = data.len();
    if n < 4 {
        return invalid(format!("t-SNE needs at least 4 points, got {n}"));
    }
    let max_perplexity = (n as f64 - 1.0) / 3.0;
    if !(config.perplexity >= 3.0 && config.perplexity <= max_perplexity) {
        return invalid(format!(
            "perplexity {} outside [3, {max_perplexity:.3}] for N={n}",
            config.perplexity
        ));
    }
    if config.iterations == 0 || config.kl_every == 0 || !(config.learning_rate > 0.0) {
        return invalid("iterations and learning rate must be positive");
    }

    let distances = pairwise_sq_distances(data.features().view())?;
    if distances.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite pairwise distance".into()));
    }
    let conditional = conditional_affinities(
        &distances,
        config.perplexity,
        config.perplexity_tolerance,
        config.max_bisection_steps,
    )?;
    let p = joint_affinities(&conditional.probabilities);

    let mut rng = rng::seeded(config.seed);
    let init = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y = Array2::from_shape_fn((n, 2), |_| init.sample(&mut rng));
    let mut velocity = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut kl_trace = Vec::with_capacity(config.iterations);

    for iter in 0..config.iterations {
        let exaggeration = if iter < config.exaggeration_iterations {
            config.early_exaggeration
        } else {
            1.0
        };
        let momentum = if iter < config.momentum_switch {
            config.initial_momentum
        } else {
            config.final_momentum
        };
        let record = iter % config.kl_every == 0;
        let (grad, kl) = kl_gradient(&p, &y, exaggeration, record);
        if let Some(kl) = kl {
            kl_trace.push((iter, kl));
        }

        for i in 0..n {
            for c in 0..2 {
                let g = grad[[i, c]];
                let v = velocity[[i, c]];
                let gain = &mut gains[[i, c]];
                *gain = if (g > 0.0) != (v > 0.0) { *gain + 0.2 } else { *gain * 0.8 };
                if *gain < 0.01 {
                    *gain = 0.01;
                }
                velocity[[i, c]] = momentum * v - config.learning_rate * *gain * g;
                y[[i, c]] += velocity[[i, c]];
            }
        }
        recenter(&mut y);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("t-SNE diverged at iteration {iter}")));
        }
    }
    kl_trace.push((config.iterations, kl_divergence(&p, &y)));

    Ok(Embedding {
        points: y,
        kl_trace,
        config: *config,
    })
}

fn recenter(y: &mut Array2<f64>) {
    let n = y.nrows() as f64;
    for c in 0..2 {
        let mean = y.column(c).sum() / n;
        y.column_mut(c).mapv_inplace(|v| v - mean);
    }
}

fn coords(y: &Array2<f64>) -> &[f64] {
    y.as_slice().expect("embedding points are contiguous")
}

/// Unnormalised Student-t affinities `(1 + |y_i - y_j|^2)^-1` of row `i`,
/// zero on the diagonal.
fn student_t_row(y: &[f64], i: usize, out: &mut [f64]) {
    let (yi0, yi1) = (y[2 * i], y[2 * i + 1]);
    for (j, (q, yj)) in out.iter_mut().zip(y.chunks_exact(2)).enumerate() {
        let d0 = yi0 - yj[0];
        let d1 = yi1 - yj[1];
        *q = if i == j { 0.0 } else { 1.0 / (1.0 + d0 * d0 + d1 * d1) };
    }
}

fn normaliser(y: &[f64]) -> f64 {
    let n = y.len() / 2;
    let row_sums: Vec<f64> = (0..n)
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |num, i| {
                student_t_row(y, i, num);
                num.iter().sum()
            },
        )
        .collect();
    row_sums.iter().sum()
}

/// Gradient of `KL(exaggeration * P || Q)`, plus `KL(P || Q)` of the
/// current map when `with_kl` is set.
fn kl_gradient(p: &Array2<f64>, y: &Array2<f64>, exaggeration: f64, with_kl: bool) -> (Array2<f64>, Option<f64>) {
    let n = y.nrows();
    let flat = coords(y);
    let z = normaliser(flat);
    let rows: Vec<([f64; 2], f64)> = (0..n)
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |num, i| {
                student_t_row(flat, i, num);
                let pi = p.row(i);
                let pi = pi.as_slice().expect("affinities are contiguous");
                let (yi0, yi1) = (flat[2 * i], flat[2 * i + 1]);
                let mut g = [0.0; 2];
                let mut kl = 0.0;
                for (j, ((&pij, &qn), yj)) in pi.iter().zip(num.iter()).zip(flat.chunks_exact(2)).enumerate() {
                    if i == j {
                        continue;
                    }
                    let coeff = (exaggeration * pij - qn / z) * qn;
                    g[0] += coeff * (yi0 - yj[0]);
                    g[1] += coeff * (yi1 - yj[1]);
                    if with_kl && pij > 0.0 {
                        kl += kl_term(pij, qn / z);
                    }
                }
                ([4.0 * g[0], 4.0 * g[1]], kl)
            },
        )
        .collect();
    let mut out = Array2::zeros((n, 2));
    let mut kl = 0.0;
    for (i, (g, k)) in rows.into_iter().enumerate() {
        out[[i, 0]] = g[0];
        out[[i, 1]] = g[1];
        kl += k;
    }
    (out, with_kl.then_some(kl.max(0.0)))
}

fn kl_term(pij: f64, qij: f64) -> f64 {
    pij * (pij.max(PROBABILITY_FLOOR) / qij.max(PROBABILITY_FLOOR)).ln()
}

/// `KL(P || Q)` for the current map, with both sides floored at 1e-12
/// inside the logarithm.
pub fn kl_divergence(p: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let n = y.nrows();
    let flat = coords(y);
    let z = normaliser(flat);
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |num, i| {
                student_t_row(flat, i, num);
                (0..n)
                    .filter(|&j| j != i && p[[i, j]] > 0.0)
                    .map(|j| kl_term(p[[i, j]], num[j] / z))
                    .sum()
            },
        )
        .collect();
    rows.iter().sum::<f64>().max(0.0)
}

/// `x,y` per row, row order = sample id.
pub fn save_embedding(embedding: &Embedding, path: impl AsRef<Path>, comment: Option<&str>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    writeln!(out, "x,y")?;
    for row in embedding.points.rows() {
        writeln!(out, "{},{}", format_real(row[0]), format_real(row[1]))?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_embedding(path: impl AsRef<Path>) -> Result<Embedding> {
    let (_, rows) = read_table(BufReader::new(File::open(path)?), true)?;
    if rows[0].len() != 2 {
        return Err(Error::Format(format!("embedding file has {} columns, expected 2", rows[0].len())));
    }
    let points = Array2::from_shape_fn((rows.len(), 2), |(i, j)| rows[i][j]);
    Embedding::from_points(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_clustered;
    use ndarray::array;
    use rand_distr::StandardNormal;

    #[test]
    fn distances_small_cases() {
        let d = pairwise_sq_distances(array![[0.0], [3.0]].view()).unwrap();
        assert_eq!(d, array![[0.0, 9.0], [9.0, 0.0]]);
        let same = pairwise_sq_distances(array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]].view()).unwrap();
        assert!(same.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn distances_match_double_loop() {
        let mut rng = rng::seeded(2);
        let x = Array2::from_shape_fn((5, 3), |_| StandardNormal.sample(&mut rng));
        let d = pairwise_sq_distances(x.view()).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += (x[[i, k]] - x[[j, k]]).powi(2);
                }
                assert!((d[[i, j]] - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn distances_reject_nan() {
        assert!(pairwise_sq_distances(array![[f64::NAN], [1.0]].view()).is_err());
    }

    fn two_pairs() -> Dataset {
        Dataset::new(array![[0.0, 0.0], [0.01, 0.0], [100.0, 0.0], [100.01, 0.0]], None).unwrap()
    }

    #[test]
    fn perplexity_below_minimum_is_rejected() {
        let cfg = TsneConfig {
            perplexity: 1.0,
            ..TsneConfig::default()
        };
        assert!(matches!(tsne_embed(&two_pairs(), &cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn conditional_rows_hit_target_perplexity() {
        let centers = array![[0.0, 0.0, 0.0], [6.0, 0.0, 0.0]];
        let data = generate_clustered(80, 3, &centers, &[0.5, 0.5], 1.0, 4).unwrap();
        let d = pairwise_sq_distances(data.features().view()).unwrap();
        let c = conditional_affinities(&d, 10.0, 1e-5, 50).unwrap();
        for i in 0..80 {
            assert!((c.probabilities.row(i).sum() - 1.0).abs() < 1e-9);
            assert!((c.perplexities[i] - 10.0).abs() < 1e-4, "row {i}: {}", c.perplexities[i]);
            assert_eq!(c.probabilities[[i, i]], 0.0);
        }
        let p = joint_affinities(&c.probabilities);
        assert!((p.sum() - 1.0).abs() < 1e-9);
        for i in 0..80 {
            for j in 0..80 {
                assert_eq!(p[[i, j]], p[[j, i]]);
            }
        }
    }

    #[test]
    fn embedding_is_centered_and_deterministic() {
        let centers = array![[0.0, 0.0], [10.0, 10.0]];
        let data = generate_clustered(30, 2, &centers, &[0.5, 0.5], 1.0, 1).unwrap();
        let cfg = TsneConfig {
            perplexity: 5.0,
            iterations: 300,
            seed: 3,
            ..TsneConfig::default()
        };
        let a = tsne_embed(&data, &cfg).unwrap();
        let b = tsne_embed(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.points.ncols(), 2);
        for c in 0..2 {
            assert!(a.points.column(c).mean().unwrap().abs() <= 1e-9);
        }
        assert!(a.kl_trace.iter().all(|(_, kl)| kl.is_finite() && *kl >= 0.0));
    }

    #[test]
    fn embedding_round_trips_through_csv() {
        let e = Embedding::from_points(array![[0.5, -1.25], [1e-17, 3.0]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        save_embedding(&e, &path, Some("test")).unwrap();
        assert_eq!(load_embedding(&path).unwrap().points, e.points);
    }
}
