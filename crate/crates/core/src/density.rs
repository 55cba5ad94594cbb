//! Gaussian KDE on the 2-D embedding and the `H`/`L` split built from it.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::format_real;
use crate::embedding::Embedding;
use crate::error::{invalid, Error, Result};
use crate::models::GradientFamily;
use crate::sampling::Stratum;

/// Bandwidth used when a data-driven rule sees zero spread on an axis.
pub const FALLBACK_BANDWIDTH: f64 = 1e-3;

/// Largest `N` accepted by [`build_partition_oracle`].
pub const ORACLE_MAX_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthRule {
    Scott,
    Silverman,
    /// Isotropic kernel with this standard deviation.
    Fixed(f64),
}

/// Per-point densities and the 2x2 kernel covariance that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub densities: Vec<f64>,
    pub bandwidth: [[f64; 2]; 2],
    pub warnings: Vec<String>,
}

/// `density(i) = (1/N) sum_j K_B(x_i - x_j)`, self-term included.
pub fn kde_densities(embedding: &Embedding, rule: BandwidthRule) -> Result<DensityMap> {
    let points = &embedding.points;
    let n = points.nrows();
    if n < 2 {
        return invalid(format!("KDE needs at least 2 points, got {n}"));
    }
    let mut warnings = Vec::new();
    let bandwidth = match rule {
        BandwidthRule::Fixed(h) => {
            if !(h > 0.0) || !h.is_finite() {
                return invalid(format!("fixed bandwidth must be positive, got {h}"));
            }
            [[h * h, 0.0], [0.0, h * h]]
        }
        BandwidthRule::Scott | BandwidthRule::Silverman => {
            // d = 2
            let factor = match rule {
                BandwidthRule::Scott => (n as f64).powf(-1.0 / 6.0),
                // (N (d + 2) / 4)^(-1 / (d + 4)) with d = 2
                _ => (n as f64 * (2.0 + 2.0) / 4.0).powf(-1.0 / (2.0 + 4.0)),
            };
            let mut diag = [0.0; 2];
            for (axis, slot) in diag.iter_mut().enumerate() {
                let col = points.column(axis);
                let mean = col.sum() / n as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
                let h = var.sqrt() * factor;
                *slot = if h > 0.0 && h.is_finite() {
                    h * h
                } else {
                    let msg = format!(
                        "zero spread on axis {axis}; using fixed bandwidth {FALLBACK_BANDWIDTH}"
                    );
                    log::warn!("{msg}");
                    warnings.push(msg);
                    FALLBACK_BANDWIDTH * FALLBACK_BANDWIDTH
                };
            }
            [[diag[0], 0.0], [0.0, diag[1]]]
        }
    };

    let det = bandwidth[0][0] * bandwidth[1][1] - bandwidth[0][1] * bandwidth[1][0];
    let inv = [
        [bandwidth[1][1] / det, -bandwidth[0][1] / det],
        [-bandwidth[1][0] / det, bandwidth[0][0] / det],
    ];
    let norm = 1.0 / (2.0 * std::f64::consts::PI * det.sqrt() * n as f64);

    let densities: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (xi, yi) = (points[[i, 0]], points[[i, 1]]);
            let s: f64 = (0..n)
                .map(|j| {
                    let dx = xi - points[[j, 0]];
                    let dy = yi - points[[j, 1]];
                    let q = dx * (inv[0][0] * dx + inv[0][1] * dy) + dy * (inv[1][0] * dx + inv[1][1] * dy);
                    (-0.5 * q).exp()
                })
                .sum();
            s * norm
        })
        .collect();
    if densities.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(Error::Numeric("KDE produced a non-positive density".into()));
    }
    Ok(DensityMap {
        densities,
        bandwidth,
        warnings,
    })
}

/// Evaluate the same estimator at an arbitrary point.
pub fn kde_at(embedding: &Embedding, bandwidth: [[f64; 2]; 2], at: [f64; 2]) -> f64 {
    let points = &embedding.points;
    let n = points.nrows();
    let det = bandwidth[0][0] * bandwidth[1][1] - bandwidth[0][1] * bandwidth[1][0];
    let inv = [
        [bandwidth[1][1] / det, -bandwidth[0][1] / det],
        [-bandwidth[1][0] / det, bandwidth[0][0] / det],
    ];
    let norm = 1.0 / (2.0 * std::f64::consts::PI * det.sqrt() * n as f64);
    (0..n)
        .map(|j| {
            let dx = at[0] - points[[j, 0]];
            let dy = at[1] - points[[j, 1]];
            let q = dx * (inv[0][0] * dx + inv[0][1] * dy) + dy * (inv[1][0] * dx + inv[1][1] * dy);
            (-0.5 * q).exp()
        })
        .sum::<f64>()
        * norm
}

/// Disjoint split of `0..N` into the high-density stratum `H` and the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    h_indices: Vec<usize>,
    l_indices: Vec<usize>,
    gamma: f64,
}

impl Partition {
    /// Build from explicit strata. Both must be non-empty and together cover
    /// `0..N` exactly once; they are stored in ascending order.
    pub fn from_strata(mut h: Vec<usize>, mut l: Vec<usize>) -> Result<Self> {
        if h.is_empty() || l.is_empty() {
            return invalid(format!("both strata must be non-empty (|H|={}, |L|={})", h.len(), l.len()));
        }
        h.sort_unstable();
        l.sort_unstable();
        let n = h.len() + l.len();
        let mut seen = vec![false; n];
        for &i in h.iter().chain(&l) {
            if i >= n || seen[i] {
                return invalid(format!("strata do not partition 0..{n} (index {i})"));
            }
            seen[i] = true;
        }
        let gamma = h.len() as f64 / n as f64;
        Ok(Self {
            h_indices: h,
            l_indices: l,
            gamma,
        })
    }

    pub fn h(&self) -> &[usize] {
        &self.h_indices
    }

    pub fn l(&self) -> &[usize] {
        &self.l_indices
    }

    pub fn n1(&self) -> usize {
        self.h_indices.len()
    }

    pub fn n2(&self) -> usize {
        self.l_indices.len()
    }

    pub fn len(&self) -> usize {
        self.n1() + self.n2()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Stratum label per sample id.
    pub fn labels(&self) -> Vec<Stratum> {
        let mut out = vec![Stratum::L; self.len()];
        for &i in &self.h_indices {
            out[i] = Stratum::H;
        }
        out
    }
}

/// `H` = the `round(N * gamma)` largest densities (ties to the smaller index),
/// `L` = the rest.
pub fn build_partition(densities: &DensityMap, gamma: f64) -> Result<Partition> {
    let n = densities.densities.len();
    if !(gamma > 0.0 && gamma < 0.8) {
        return invalid(format!("gamma must lie in (0, 0.8), got {gamma}"));
    }
    let n1 = (n as f64 * gamma).round() as usize;
    if n1 < 1 || n1 > n.saturating_sub(1) {
        return invalid(format!("round(N * gamma) = {n1} must lie in [1, N-1] for N={n}"));
    }
    let d = &densities.densities;
    let order: Vec<usize> = (0..n)
        .sorted_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)))
        .collect();
    let partition = Partition::from_strata(order[..n1].to_vec(), order[n1..].to_vec())?;
    if partition.n1() > partition.n2() {
        log::warn!("|H| = {} exceeds |L| = {}", partition.n1(), partition.n2());
    }
    Ok(Partition { gamma, ..partition })
}

/// Which total the `H` stratum's gradients are asked to reproduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientReading {
    /// `sum_H grad_i = (1/N) sum_i grad_i`.
    Mean,
    /// `sum_H grad_i = sum_i grad_i`, equivalently `sum_L grad_i = 0`.
    Total,
}

impl GradientReading {
    pub fn target(self, grads: &GradientFamily) -> Vec<f64> {
        let n = grads.len() as f64;
        let total = grads.column_sums();
        match self {
            Self::Mean => total.iter().map(|v| v / n).collect(),
            Self::Total => total,
        }
    }
}

/// Result of the exhaustive representative-subset search. `l_indices` may be
/// empty when the best subset is the whole set.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetSearch {
    pub h_indices: Vec<usize>,
    pub l_indices: Vec<usize>,
    pub residual: f64,
}

impl SubsetSearch {
    pub fn to_partition(&self) -> Result<Partition> {
        Partition::from_strata(self.h_indices.clone(), self.l_indices.clone())
    }
}

/// Exhaustive search for the subset `H` of the given size whose gradient sum
/// is closest to `grads.reference`. Among subsets within `tolerance` of the
/// optimum the first in lexicographic order wins. Refuses `N > 20`.
pub fn build_partition_oracle(
    grads: &GradientFamily,
    subset_size: usize,
    tolerance: f64,
) -> Result<SubsetSearch> {
    let n = grads.len();
    if n > ORACLE_MAX_N {
        return Err(Error::Capability(format!(
            "exhaustive subset search refused for N={n} > {ORACLE_MAX_N}"
        )));
    }
    if subset_size == 0 || subset_size > n {
        return invalid(format!("subset size {subset_size} outside [1, {n}]"));
    }
    let p = grads.dim();
    let residual_of = |subset: &[usize]| -> f64 {
        (0..p)
            .map(|k| {
                let s: f64 = subset.iter().map(|&i| grads.per_sample[[i, k]]).sum();
                (s - grads.reference[k]).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    };
    let candidates: Vec<(Vec<usize>, f64)> = (0..n)
        .combinations(subset_size)
        .map(|c| {
            let r = residual_of(&c);
            (c, r)
        })
        .collect();
    let best = candidates.iter().map(|(_, r)| *r).fold(f64::INFINITY, f64::min);
    let (h, residual) = candidates
        .into_iter()
        .find(|(_, r)| *r <= best + tolerance)
        .expect("at least one subset");
    let l = (0..n).filter(|i| !h.contains(i)).collect();
    Ok(SubsetSearch {
        h_indices: h,
        l_indices: l,
        residual,
    })
}

/// `id,stratum,density` rows.
pub fn save_partition(
    partition: &Partition,
    densities: Option<&DensityMap>,
    path: impl AsRef<Path>,
    comment: Option<&str>,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    writeln!(out, "id,stratum,density")?;
    for (i, label) in partition.labels().iter().enumerate() {
        let d = densities.map_or(String::from("nan"), |m| format_real(m.densities[i]));
        writeln!(out, "{i},{label},{d}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_partition(path: impl AsRef<Path>) -> Result<(Partition, Vec<f64>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut h = Vec::new();
    let mut l = Vec::new();
    let mut densities = Vec::new();
    let mut header_seen = false;
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        let cells: Vec<&str> = t.split(',').map(str::trim).collect();
        if cells.len() != 3 {
            return Err(Error::Format(format!("line {line_no}: expected 3 columns")));
        }
        let id: usize = cells[0].parse().map_err(|_| Error::Parse {
            row: densities.len(),
            column: 0,
            message: format!("bad id {:?}", cells[0]),
        })?;
        match cells[1] {
            "H" => h.push(id),
            "L" => l.push(id),
            other => {
                return Err(Error::Parse {
                    row: densities.len(),
                    column: 1,
                    message: format!("bad stratum {other:?}"),
                })
            }
        }
        densities.push(cells[2].parse().unwrap_or(f64::NAN));
    }
    Ok((Partition::from_strata(h, l)?, densities))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::{array, Array2};
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn map(d: &[f64]) -> DensityMap {
        DensityMap {
            densities: d.to_vec(),
            bandwidth: [[1.0, 0.0], [0.0, 1.0]],
            warnings: vec![],
        }
    }

    #[test]
    fn coincident_points_unit_kernel() {
        let e = Embedding::from_points(array![[0.0, 0.0], [0.0, 0.0]]).unwrap();
        let m = kde_densities(&e, BandwidthRule::Fixed(1.0)).unwrap();
        let expected = 1.0 / (2.0 * std::f64::consts::PI);
        for d in &m.densities {
            assert!((d - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn densities_are_permutation_equivariant_and_translation_invariant() {
        let mut r = rng::seeded(5);
        let pts = Array2::from_shape_fn((40, 2), |_| StandardNormal.sample(&mut r));
        let base = kde_densities(&Embedding::from_points(pts.clone()).unwrap(), BandwidthRule::Scott).unwrap();

        let perm: Vec<usize> = (0..40).rev().collect();
        let permuted = pts.select(ndarray::Axis(0), &perm);
        let pd = kde_densities(&Embedding::from_points(permuted).unwrap(), BandwidthRule::Scott).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((pd.densities[k] - base.densities[i]).abs() <= 1e-12 * base.densities[i]);
        }

        let shifted = pts.mapv(|v| v + 3.0);
        let sd = kde_densities(&Embedding::from_points(shifted).unwrap(), BandwidthRule::Scott).unwrap();
        for i in 0..40 {
            assert!((sd.densities[i] - base.densities[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_spread_falls_back_with_warning() {
        let e = Embedding::from_points(array![[0.0, 1.0], [0.0, 2.0], [0.0, 3.0]]).unwrap();
        let m = kde_densities(&e, BandwidthRule::Scott).unwrap();
        assert_eq!(m.warnings.len(), 1);
        assert_eq!(m.bandwidth[0][0], FALLBACK_BANDWIDTH * FALLBACK_BANDWIDTH);
    }

    #[test]
    fn top_densities_form_h() {
        let p = build_partition(&map(&[5.0, 1.0, 4.0, 2.0]), 0.5).unwrap();
        assert_eq!(p.h(), &[0, 2]);
        assert_eq!(p.l(), &[1, 3]);
    }

    #[test]
    fn ties_break_by_index() {
        let p = build_partition(&map(&[1.0; 4]), 0.25).unwrap();
        assert_eq!(p.h(), &[0]);
        assert_eq!(p.l(), &[1, 2, 3]);
    }

    #[test]
    fn gamma_out_of_range() {
        let m = map(&[1.0, 2.0, 3.0, 4.0]);
        for g in [0.0, 0.8, 0.9, -0.1] {
            assert!(matches!(build_partition(&m, g), Err(Error::InvalidArgument(_))));
        }
        // round(4 * 0.1) = 0
        assert!(build_partition(&m, 0.1).is_err());
    }

    #[test]
    fn h_dominates_l_on_random_densities() {
        let mut r = rng::seeded(8);
        for _ in 0..50 {
            let n = r.random_range(2..60);
            let d: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
            let gamma = r.random_range(0.05..0.79);
            let Ok(p) = build_partition(&map(&d), gamma) else { continue };
            let min_h = p.h().iter().map(|&i| d[i]).fold(f64::INFINITY, f64::min);
            let max_l = p.l().iter().map(|&i| d[i]).fold(f64::NEG_INFINITY, f64::max);
            assert!(min_h >= max_l);
            assert_eq!(p.n1(), (n as f64 * gamma).round() as usize);
        }
    }

    #[test]
    fn oracle_finds_representative_subset() {
        let g = GradientFamily::new(array![[1.0], [1.0], [3.0], [-3.0]], vec![2.0], vec![0.0]).unwrap();
        let s = build_partition_oracle(&g, 2, 1e-12).unwrap();
        assert_eq!(s.h_indices, vec![0, 1]);
        assert_eq!(s.residual, 0.0);

        let total = GradientReading::Total.target(&g);
        let g_all = GradientFamily::new(g.per_sample.clone(), total, vec![0.0]).unwrap();
        let all = build_partition_oracle(&g_all, 4, 1e-12).unwrap();
        assert_eq!(all.h_indices, vec![0, 1, 2, 3]);
        assert!(all.l_indices.is_empty());
        assert_eq!(all.residual, 0.0);
    }

    #[test]
    fn oracle_refuses_large_n() {
        let g = GradientFamily::new(Array2::zeros((21, 1)), vec![0.0], vec![0.0]).unwrap();
        assert!(matches!(build_partition_oracle(&g, 3, 0.0), Err(Error::Capability(_))));
    }

    #[test]
    fn partition_file_round_trip() {
        let p = build_partition(&map(&[5.0, 1.0, 4.0, 2.0, 0.5]), 0.4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        save_partition(&p, Some(&map(&[5.0, 1.0, 4.0, 2.0, 0.5])), &path, Some("hdr")).unwrap();
        let (q, d) = load_partition(&path).unwrap();
        assert_eq!(q.h(), p.h());
        assert_eq!(q.l(), p.l());
        assert_eq!(d, vec![5.0, 1.0, 4.0, 2.0, 0.5]);
    }
}
