//! Expected squared gradient error of batch estimators: closed forms,
//! exhaustive enumeration, Monte-Carlo, plus convergence-rate helpers.

use std::io::Write;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::density::Partition;
use crate::error::{invalid, Error, Result};
use crate::models::{GradientFamily, ModelSpec};
use crate::rng;
use crate::sampling::{srs_batch, typicality_batch, BatchPlan};

/// Maximum number of batches [`enumerate_error`] will visit.
pub const ENUMERATION_BUDGET: u128 = 1_000_000;
pub const MIN_MONTE_CARLO_DRAWS: usize = 100;

/// How a batch of the gradient family is drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum Scheme {
    Srs { m: usize },
    Stratified { partition: Partition, plan: BatchPlan },
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Srs { .. } => "srs",
            Scheme::Stratified { .. } => "stratified",
        }
    }

    pub fn batch_size(&self) -> usize {
        match self {
            Scheme::Srs { m } => *m,
            Scheme::Stratified { plan, .. } => plan.m,
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        match self {
            Scheme::Srs { m } => {
                if *m == 0 || *m > n {
                    return invalid(format!("batch size {m} outside [1, {n}]"));
                }
            }
            Scheme::Stratified { partition, plan } => {
                if partition.len() != n {
                    return invalid(format!(
                        "partition covers {} samples, gradient family has {n}",
                        partition.len()
                    ));
                }
                BatchPlan::new(plan.n1, plan.n2, partition)?;
            }
        }
        Ok(())
    }

    /// Number of equally likely batches.
    pub fn support_size(&self, n: usize) -> u128 {
        match self {
            Scheme::Srs { m } => binomial(n, *m),
            Scheme::Stratified { partition, plan } => {
                binomial(partition.n1(), plan.n1).saturating_mul(binomial(partition.n2(), plan.n2))
            }
        }
    }

    /// Visit every possible batch once, in a fixed order. Every batch of
    /// either scheme is equally likely.
    pub fn for_each_batch(&self, n: usize, mut visit: impl FnMut(&[usize]) -> Result<()>) -> Result<()> {
        self.check(n)?;
        let size = self.support_size(n);
        if size > ENUMERATION_BUDGET {
            return Err(Error::Capability(format!(
                "{size} batches exceed the enumeration budget of {ENUMERATION_BUDGET}; use Monte-Carlo"
            )));
        }
        match self {
            Scheme::Srs { m } => {
                for batch in (0..n).combinations(*m) {
                    visit(&batch)?;
                }
            }
            Scheme::Stratified { partition, plan } => {
                let lows: Vec<Vec<usize>> = partition.l().iter().copied().combinations(plan.n2).collect();
                let mut batch = Vec::with_capacity(plan.m);
                for high in partition.h().iter().copied().combinations(plan.n1) {
                    for low in &lows {
                        batch.clear();
                        batch.extend_from_slice(&high);
                        batch.extend_from_slice(low);
                        visit(&batch)?;
                    }
                }
            }
        }
        Ok(())
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc.saturating_mul((n - i) as u128) / (i as u128 + 1))
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn sq_dist(a: impl IntoIterator<Item = f64>, b: &[f64]) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn row_mean(grads: &GradientFamily, rows: &[usize]) -> Vec<f64> {
    let mut mean = vec![0.0; grads.dim()];
    for &i in rows {
        for (acc, v) in mean.iter_mut().zip(grads.per_sample.row(i)) {
            *acc += v;
        }
    }
    let k = rows.len() as f64;
    mean.iter_mut().for_each(|v| *v /= k);
    mean
}

/// Sum of squared deviations of `rows` about `centre`.
fn dispersion(grads: &GradientFamily, rows: &[usize], centre: &[f64]) -> f64 {
    rows.iter()
        .map(|&i| sq_dist(grads.per_sample.row(i).iter().copied(), centre))
        .sum()
}

/// Squared error of the plain batch mean against the reference.
fn batch_sq_error(grads: &GradientFamily, batch: &[usize]) -> f64 {
    sq_dist(row_mean(grads, batch), &grads.reference)
}

/// `S^2 = sum_i |g_i - mean|^2 / (N - 1)`.
pub fn srs_dispersion(grads: &GradientFamily) -> Result<f64> {
    let n = grads.len();
    if n < 2 {
        return invalid("dispersion needs at least two samples");
    }
    let all: Vec<usize> = (0..n).collect();
    Ok(dispersion(grads, &all, &grads.mean()) / (n - 1) as f64)
}

/// `(1 - m/N) S^2 / m`, the SRS error about the per-sample mean.
pub fn srs_error_formula(grads: &GradientFamily, m: usize) -> Result<f64> {
    let n = grads.len();
    if m == 0 || m > n {
        return invalid(format!("batch size {m} outside [1, {n}]"));
    }
    let s2 = srs_dispersion(grads)?;
    Ok((1.0 - m as f64 / n as f64) * s2 / m as f64)
}

/// SRS error about `grads.reference`: the formula plus the squared
/// distance between the mean and the reference.
pub fn srs_error_about_reference(grads: &GradientFamily, m: usize) -> Result<f64> {
    Ok(srs_error_formula(grads, m)? + sq_dist(grads.mean(), &grads.reference))
}

fn check_stratified(grads: &GradientFamily, partition: &Partition, plan: &BatchPlan) -> Result<()> {
    Scheme::Stratified {
        partition: partition.clone(),
        plan: *plan,
    }
    .check(grads.len())?;
    if partition.n1() < 2 || partition.n2() < 2 {
        return invalid(format!(
            "stratum dispersions need N1, N2 >= 2, got N1 = {}, N2 = {}",
            partition.n1(),
            partition.n2()
        ));
    }
    Ok(())
}

/// The three ingredients of the stratified closed form as printed:
/// `(bias_sq, S_H^2 about the reference, S_L^2 as raw squared norms)`.
pub fn stratified_formula_terms(
    grads: &GradientFamily,
    partition: &Partition,
    plan: &BatchPlan,
) -> Result<(f64, f64, f64)> {
    check_stratified(grads, partition, plan)?;
    let bias_sq = (plan.beta - 1.0).powi(2) * sq_norm(&grads.reference);
    let s_h = dispersion(grads, partition.h(), &grads.reference) / (partition.n1() - 1) as f64;
    let zero = vec![0.0; grads.dim()];
    let s_l = dispersion(grads, partition.l(), &zero) / (partition.n2() - 1) as f64;
    Ok((bias_sq, s_h, s_l))
}

/// `|(beta-1) ref|^2 + (1-n1/N1) n1/m^2 S_H^2 + (1-n2/N2) n2/m^2 S_L^2`
/// with `S_H^2` about the reference and `S_L^2` the raw second moment.
/// Exact only when both strata sum to zero and the reference is zero.
pub fn typicality_error_formula_paper(
    grads: &GradientFamily,
    partition: &Partition,
    plan: &BatchPlan,
) -> Result<f64> {
    let (bias_sq, s_h, s_l) = stratified_formula_terms(grads, partition, plan)?;
    let m2 = (plan.m * plan.m) as f64;
    let f1 = plan.n1 as f64 / partition.n1() as f64;
    let f2 = plan.n2 as f64 / partition.n2() as f64;
    Ok(bias_sq + (1.0 - f1) * plan.n1 as f64 / m2 * s_h + (1.0 - f2) * plan.n2 as f64 / m2 * s_l)
}

/// Exact stratified error: squared bias of the batch mean plus the
/// within-stratum finite-population variance.
pub fn typicality_error_corrected(
    grads: &GradientFamily,
    partition: &Partition,
    plan: &BatchPlan,
) -> Result<f64> {
    check_stratified(grads, partition, plan)?;
    let m = plan.m as f64;
    let mut variance = 0.0;
    let mut expectation = vec![0.0; grads.dim()];
    for (rows, draws) in [(partition.h(), plan.n1), (partition.l(), plan.n2)] {
        let big = rows.len() as f64;
        let k = draws as f64;
        let mean = row_mean(grads, rows);
        let s2 = dispersion(grads, rows, &mean) / (big - 1.0);
        variance += k * (1.0 - k / big) * s2 / (m * m);
        for (e, v) in expectation.iter_mut().zip(&mean) {
            *e += k * v / m;
        }
    }
    Ok(sq_dist(expectation, &grads.reference) + variance)
}

/// Exact `E |(1/m) sum_B g_i - reference|^2` by visiting every batch.
pub fn enumerate_error(grads: &GradientFamily, scheme: &Scheme) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0u64;
    scheme.for_each_batch(grads.len(), |batch| {
        total += batch_sq_error(grads, batch);
        count += 1;
        Ok(())
    })?;
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub estimate: f64,
    pub standard_error: f64,
    pub draws: usize,
}

/// Sample mean and standard error of the squared batch error over `draws`
/// independent batches.
pub fn monte_carlo_error(grads: &GradientFamily, scheme: &Scheme, draws: usize, seed: u64) -> Result<MonteCarloEstimate> {
    if draws < MIN_MONTE_CARLO_DRAWS {
        return invalid(format!("need at least {MIN_MONTE_CARLO_DRAWS} draws, got {draws}"));
    }
    let n = grads.len();
    scheme.check(n)?;
    let mut r = rng::seeded(seed);
    // Welford keeps a constant sequence exact.
    let (mut mean, mut m2) = (0.0, 0.0);
    for k in 1..=draws {
        let batch = match scheme {
            Scheme::Srs { m } => srs_batch(n, *m, &mut r)?,
            Scheme::Stratified { partition, plan } => typicality_batch(partition, plan, &mut r)?,
        };
        let x = batch_sq_error(grads, &batch.indices);
        let delta = x - mean;
        mean += delta / k as f64;
        m2 += delta * (x - mean);
    }
    let variance = m2 / (draws - 1) as f64;
    Ok(MonteCarloEstimate {
        estimate: mean,
        standard_error: (variance / draws as f64).sqrt(),
        draws,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFactor {
    pub factor: f64,
    /// Sum of the sampling-noise and bias terms.
    pub noise: f64,
    /// Whether the noise terms stay below `mu / L`, i.e. the factor is
    /// below one.
    pub m_sufficient: bool,
}

/// Per-step contraction factor of the expected suboptimality under
/// stratified batches:
/// `1 - mu/L + (1-n1/N1) 2 n1 (b2+2)/m^2 + (1-n2/N2) n2 (b2+1)/(2 m^2) + (beta-1)^2`.
pub fn theorem1_rate_factor(spec: &ModelSpec, partition: &Partition, plan: &BatchPlan) -> Result<RateFactor> {
    let missing = |what: &str| Error::Capability(format!("model constants lack {what}"));
    let mu = spec.strong_convexity_mu.ok_or_else(|| missing("mu"))?;
    let l = spec.lipschitz_l.ok_or_else(|| missing("L"))?;
    let beta2 = spec.growth_bound_beta2.ok_or_else(|| missing("beta2"))?;
    rate_factor(mu / l, beta2, partition.n1(), partition.n2(), plan)
}

/// [`theorem1_rate_factor`] from raw constants.
pub fn rate_factor(mu_over_l: f64, beta2: f64, big_n1: usize, big_n2: usize, plan: &BatchPlan) -> Result<RateFactor> {
    if !(mu_over_l > 0.0 && mu_over_l <= 1.0) {
        return invalid(format!("mu/L must lie in (0, 1], got {mu_over_l}"));
    }
    if plan.n1 > big_n1 || plan.n2 > big_n2 {
        return invalid("plan draws exceed stratum sizes");
    }
    let m2 = (plan.m * plan.m) as f64;
    let (n1, n2) = (plan.n1 as f64, plan.n2 as f64);
    let noise = (1.0 - n1 / big_n1 as f64) * 2.0 * n1 * (beta2 + 2.0) / m2
        + (1.0 - n2 / big_n2 as f64) * n2 * (beta2 + 1.0) / (2.0 * m2)
        + (plan.beta - 1.0).powi(2);
    Ok(RateFactor {
        factor: 1.0 - mu_over_l + noise,
        noise,
        m_sufficient: noise < mu_over_l,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorMethod {
    Enumerated,
    ClosedForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Comparison {
    pub mse_srs: f64,
    pub mse_strat: f64,
    pub holds: bool,
    pub alpha: f64,
    pub method: ErrorMethod,
}

/// `alpha = strat / srs`, or 1 when the SRS error vanishes.
pub fn alpha_ratio(mse_strat: f64, mse_srs: f64) -> f64 {
    if mse_srs > 0.0 {
        mse_strat / mse_srs
    } else {
        1.0
    }
}

/// Compare SRS and stratified batches of the same size against the
/// reference. Uses enumeration when it fits the budget, otherwise the exact
/// closed forms.
pub fn theorem2_compare(grads: &GradientFamily, partition: &Partition, plan: &BatchPlan) -> Result<Theorem2Comparison> {
    let srs = Scheme::Srs { m: plan.m };
    let strat = Scheme::Stratified {
        partition: partition.clone(),
        plan: *plan,
    };
    let n = grads.len();
    let (mse_srs, mse_strat, method) =
        if srs.support_size(n) <= ENUMERATION_BUDGET && strat.support_size(n) <= ENUMERATION_BUDGET {
            (enumerate_error(grads, &srs)?, enumerate_error(grads, &strat)?, ErrorMethod::Enumerated)
        } else {
            (
                srs_error_about_reference(grads, plan.m)?,
                typicality_error_corrected(grads, partition, plan)?,
                ErrorMethod::ClosedForm,
            )
        };
    let alpha = alpha_ratio(mse_strat, mse_srs);
    Ok(Theorem2Comparison {
        mse_srs,
        mse_strat,
        holds: mse_srs == 0.0 || mse_strat <= mse_srs,
        alpha,
        method,
    })
}

/// `1 / (2 (cbrt(m/4 + sqrt(m^3/27)) + cbrt(m/4 - sqrt(m^3/27))))` with the
/// real cube root.
pub fn optimal_beta(m: usize) -> f64 {
    let m = m as f64;
    let root = (m.powi(3) / 27.0).sqrt();
    1.0 / (2.0 * ((m / 4.0 + root).cbrt() + (m / 4.0 - root).cbrt()))
}

/// One record of the error report, keyed by instance, scheme and plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub instance_id: String,
    pub scheme: String,
    pub m: usize,
    pub n1: usize,
    pub n2: usize,
    pub mse_srs_formula: f64,
    pub mse_strat_paper: f64,
    pub mse_strat_corrected: f64,
    pub mse_enumerated: Option<f64>,
    pub mse_monte_carlo: Option<MonteCarloEstimate>,
    pub alpha: Option<f64>,
    pub s_k_sq: f64,
    pub s_h_sq: f64,
    pub s_l_sq: f64,
    pub bias_sq: f64,
}

impl ErrorReport {
    /// Build the full report for a stratified plan. `monte_carlo` gives
    /// `(draws, seed)` when a sampled estimate is wanted as well.
    pub fn build(
        instance_id: impl Into<String>,
        grads: &GradientFamily,
        partition: &Partition,
        plan: &BatchPlan,
        monte_carlo: Option<(usize, u64)>,
    ) -> Result<Self> {
        let scheme = Scheme::Stratified {
            partition: partition.clone(),
            plan: *plan,
        };
        let (bias_sq, s_h_sq, s_l_sq) = stratified_formula_terms(grads, partition, plan)?;
        let corrected = typicality_error_corrected(grads, partition, plan)?;
        let mse_enumerated = match enumerate_error(grads, &scheme) {
            Ok(v) => Some(v),
            Err(Error::Capability(_)) => None,
            Err(e) => return Err(e),
        };
        let mse_monte_carlo = monte_carlo
            .map(|(draws, seed)| monte_carlo_error(grads, &scheme, draws, seed))
            .transpose()?;
        let srs_about_ref = srs_error_about_reference(grads, plan.m)?;
        Ok(Self {
            instance_id: instance_id.into(),
            scheme: scheme.name().to_string(),
            m: plan.m,
            n1: plan.n1,
            n2: plan.n2,
            mse_srs_formula: srs_error_formula(grads, plan.m)?,
            mse_strat_paper: typicality_error_formula_paper(grads, partition, plan)?,
            mse_strat_corrected: corrected,
            mse_enumerated,
            mse_monte_carlo,
            alpha: Some(alpha_ratio(corrected, srs_about_ref)),
            s_k_sq: srs_dispersion(grads)?,
            s_h_sq,
            s_l_sq,
            bias_sq,
        })
    }

    pub fn write_json_line(&self, mut out: impl Write) -> Result<()> {
        let line = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(out, "{line}")?;
        Ok(())
    }
}

/// Random instances for the formula checks.
pub mod fixtures {
    use ndarray::Array2;
    use rand::Rng as _;

    use super::*;
    use crate::rng::Rng;

    fn uniform_rows(r: &mut Rng, n: usize, d: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| scale * r.random_range(-1.0..1.0))
    }

    /// `N` in `[2, max_n]`, `d` in `[1, max_d]`, reference = mean.
    pub fn random_family(r: &mut Rng, max_n: usize, max_d: usize) -> GradientFamily {
        let n = r.random_range(2..=max_n);
        let d = r.random_range(1..=max_d);
        GradientFamily::with_mean_reference(uniform_rows(r, n, d, 3.0)).expect("finite rows")
    }

    /// Random strata with `N1, N2 >= 2` and a random valid plan.
    #[derive(Debug, Clone)]
    pub struct StratifiedInstance {
        pub grads: GradientFamily,
        pub partition: Partition,
        pub plan: BatchPlan,
    }

    fn random_plan(r: &mut Rng, partition: &Partition) -> BatchPlan {
        loop {
            let n1 = r.random_range(1..=partition.n1());
            let n2 = r.random_range(1..=partition.n2());
            if let Ok(plan) = BatchPlan::new(n1, n2, partition) {
                return plan;
            }
        }
    }

    /// Shuffled assignment of `0..N1+N2` to the two strata.
    fn random_partition(r: &mut Rng, big_n1: usize, big_n2: usize) -> Partition {
        let n = big_n1 + big_n2;
        let order = srs_batch(n, n, r).expect("full permutation").indices;
        Partition::from_strata(order[..big_n1].to_vec(), order[big_n1..].to_vec()).expect("exact cover")
    }

    /// Arbitrary gradients, arbitrary reference.
    pub fn random_stratified(r: &mut Rng, max_stratum: usize, max_d: usize) -> StratifiedInstance {
        let big_n1 = r.random_range(2..=max_stratum);
        let big_n2 = r.random_range(2..=max_stratum);
        let d = r.random_range(1..=max_d);
        let partition = random_partition(r, big_n1, big_n2);
        let plan = random_plan(r, &partition);
        let rows = uniform_rows(r, big_n1 + big_n2, d, 3.0);
        let reference = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
        StratifiedInstance {
            grads: GradientFamily::new(rows, reference, Vec::new()).expect("finite rows"),
            partition,
            plan,
        }
    }

    /// Both strata sum to zero exactly up to rounding; reference is zero.
    pub fn zero_sum_strata(r: &mut Rng, max_stratum: usize, max_d: usize) -> StratifiedInstance {
        let mut inst = random_stratified(r, max_stratum, max_d);
        let d = inst.grads.dim();
        for rows in [inst.partition.h().to_vec(), inst.partition.l().to_vec()] {
            let mean = row_mean(&inst.grads, &rows);
            for &i in &rows {
                for (k, m) in mean.iter().enumerate() {
                    inst.grads.per_sample[[i, k]] -= m;
                }
            }
        }
        inst.grads.reference = vec![0.0; d];
        inst
    }

    /// Low-noise `H` whose rows sum to the total gradient, and a zero-sum
    /// `L` of uniform noise with per-coordinate amplitude
    /// `noise_ratio * |reference|`; reference is the per-sample mean.
    /// Plans keep `n1/N1 >= n2/N2` and a bias small enough that
    /// `(beta - 1)^2 <= (1 - m/N) N2 / (m N)`.
    pub fn representative_h(r: &mut Rng, noise_ratio: f64) -> StratifiedInstance {
        let big_n1 = r.random_range(3..=6);
        let big_n2 = r.random_range(big_n1..=8);
        let n = big_n1 + big_n2;
        let d = r.random_range(1..=3);
        let partition = random_partition(r, big_n1, big_n2);
        let reference: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let amplitude = noise_ratio * sq_norm(&reference).sqrt();
        let mut rows = Array2::zeros((n, d));
        let scale_h = n as f64 / big_n1 as f64;
        for &i in partition.h() {
            for k in 0..d {
                rows[[i, k]] = scale_h * reference[k] + 0.1 * r.random_range(-1.0..1.0);
            }
        }
        for &i in partition.l() {
            for k in 0..d {
                rows[[i, k]] = amplitude * r.random_range(-1.0..1.0);
            }
        }
        let mut grads = GradientFamily::new(rows, reference, Vec::new()).expect("finite rows");
        for rows in [partition.h().to_vec(), partition.l().to_vec()] {
            let mean = row_mean(&grads, &rows);
            let target: Vec<f64> = if partition.h().contains(&rows[0]) {
                grads.reference.iter().map(|v| v * scale_h).collect()
            } else {
                vec![0.0; d]
            };
            for &i in &rows {
                for k in 0..d {
                    grads.per_sample[[i, k]] += target[k] - mean[k];
                }
            }
        }
        let plan = near_proportional_plan(r, &partition);
        StratifiedInstance { grads, partition, plan }
    }

    /// A random `m` with `n1 = round(m N1 / N)`, redrawn until the plan
    /// favours `H` and its bias is within `(1 - m/N) N2 / (m N)`.
    fn near_proportional_plan(r: &mut Rng, partition: &Partition) -> BatchPlan {
        let n = partition.len();
        let (big_n1, big_n2) = (partition.n1() as f64, partition.n2() as f64);
        loop {
            let m = r.random_range(2..n);
            let n1 = ((m * partition.n1()) as f64 / n as f64).round().max(1.0) as usize;
            if n1 >= m {
                continue;
            }
            let Ok(plan) = BatchPlan::new(n1, m - n1, partition) else {
                continue;
            };
            let (mf, nf) = (m as f64, n as f64);
            if (plan.n1 as f64 / big_n1) < (plan.n2 as f64 / big_n2) {
                continue;
            }
            if (plan.beta - 1.0).powi(2) <= (1.0 - mf / nf) * big_n2 / (mf * nf) {
                return plan;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn family(rows: Array2<f64>, reference: Vec<f64>) -> GradientFamily {
        GradientFamily::new(rows, reference, Vec::new()).unwrap()
    }

    fn two_by_two() -> Partition {
        Partition::from_strata(vec![0, 1], vec![2, 3]).unwrap()
    }

    fn stratified(partition: &Partition, n1: usize, n2: usize) -> (Scheme, BatchPlan) {
        let plan = BatchPlan::new(n1, n2, partition).unwrap();
        (
            Scheme::Stratified {
                partition: partition.clone(),
                plan,
            },
            plan,
        )
    }

    #[test]
    fn srs_formula_small_instance() {
        let g = GradientFamily::with_mean_reference(array![[1.0], [2.0], [3.0], [4.0]]).unwrap();
        let f = srs_error_formula(&g, 2).unwrap();
        let e = enumerate_error(&g, &Scheme::Srs { m: 2 }).unwrap();
        assert!((f - 5.0 / 12.0).abs() < 1e-15);
        assert!((e - 5.0 / 12.0).abs() < 1e-15);
        assert_eq!(srs_error_formula(&g, 4).unwrap(), 0.0);
        assert!(srs_error_formula(&g, 5).is_err());
    }

    #[test]
    fn identical_rows_have_no_srs_error() {
        let g = GradientFamily::with_mean_reference(array![[1.5, -2.0], [1.5, -2.0], [1.5, -2.0]]).unwrap();
        for m in 1..=3 {
            assert_eq!(srs_error_formula(&g, m).unwrap(), 0.0);
        }
    }

    #[test]
    fn zero_sum_strata_agree() {
        let g = family(array![[1.0], [-1.0], [2.0], [-2.0]], vec![0.0]);
        let p = two_by_two();
        let (scheme, plan) = stratified(&p, 1, 1);
        assert!((plan.beta - 1.0).abs() < 1e-15);
        let (_, s_h, s_l) = stratified_formula_terms(&g, &p, &plan).unwrap();
        assert_eq!((s_h, s_l), (2.0, 8.0));
        assert!((typicality_error_formula_paper(&g, &p, &plan).unwrap() - 1.25).abs() < 1e-15);
        assert!((typicality_error_corrected(&g, &p, &plan).unwrap() - 1.25).abs() < 1e-15);
        assert!((enumerate_error(&g, &scheme).unwrap() - 1.25).abs() < 1e-15);
    }

    #[test]
    fn shifted_strata_diverge_from_printed_form() {
        let g = family(array![[3.0], [5.0], [3.0], [-3.0]], vec![2.0]);
        let p = two_by_two();
        let (scheme, plan) = stratified(&p, 1, 1);
        assert!((typicality_error_formula_paper(&g, &p, &plan).unwrap() - 3.5).abs() < 1e-15);
        assert!((typicality_error_corrected(&g, &p, &plan).unwrap() - 2.5).abs() < 1e-15);
        assert!((enumerate_error(&g, &scheme).unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn all_zero_gradients() {
        let g = family(Array2::zeros((4, 2)), vec![0.0, 0.0]);
        let p = two_by_two();
        let (_, plan) = stratified(&p, 1, 1);
        assert_eq!(typicality_error_formula_paper(&g, &p, &plan).unwrap(), 0.0);
        assert_eq!(typicality_error_corrected(&g, &p, &plan).unwrap(), 0.0);
    }

    #[test]
    fn single_stratum_rejected() {
        let g = family(array![[1.0], [2.0], [3.0]], vec![0.0]);
        let p = Partition::from_strata(vec![0], vec![1, 2]).unwrap();
        let plan = BatchPlan::new(1, 1, &p).unwrap();
        assert!(typicality_error_formula_paper(&g, &p, &plan).is_err());
        assert!(typicality_error_corrected(&g, &p, &plan).is_err());
    }

    #[test]
    fn degenerate_enumerations() {
        let g = family(array![[1.0, 2.0], [3.0, -1.0]], vec![0.5, 0.5]);
        let e = enumerate_error(&g, &Scheme::Srs { m: 2 }).unwrap();
        assert!((e - (1.5f64.powi(2) + 0.0)).abs() < 1e-15);

        let g = family(array![[1.0], [2.0], [4.0], [8.0]], vec![1.0]);
        let (scheme, _) = stratified(&two_by_two(), 2, 2);
        let e = enumerate_error(&g, &scheme).unwrap();
        assert!((e - (15.0f64 / 4.0 - 1.0).powi(2)).abs() < 1e-15);
    }

    #[test]
    fn enumeration_budget() {
        let g = GradientFamily::with_mean_reference(Array2::zeros((40, 1))).unwrap();
        assert!(matches!(enumerate_error(&g, &Scheme::Srs { m: 20 }), Err(Error::Capability(_))));
    }

    #[test]
    fn monte_carlo_on_constant_rows() {
        let g = family(array![[1.0], [1.0], [1.0], [1.0]], vec![0.25]);
        let (scheme, _) = stratified(&two_by_two(), 1, 1);
        let mc = monte_carlo_error(&g, &scheme, 500, 3).unwrap();
        assert_eq!(mc.estimate, 0.5625);
        assert_eq!(mc.standard_error, 0.0);
        assert_eq!(mc, monte_carlo_error(&g, &scheme, 500, 3).unwrap());
        assert!(monte_carlo_error(&g, &scheme, 99, 3).is_err());
    }

    #[test]
    fn monte_carlo_tracks_enumeration() {
        let mut r = rng::seeded(77);
        let g = fixtures::random_family(&mut r, 10, 2);
        let g = GradientFamily::with_mean_reference(
            Array2::from_shape_fn((10, g.dim()), |(i, k)| g.per_sample[[i % g.len(), k]] + i as f64),
        )
        .unwrap();
        let scheme = Scheme::Srs { m: 3 };
        let exact = enumerate_error(&g, &scheme).unwrap();
        let mut inside = 0;
        for seed in 0..100 {
            let mc = monte_carlo_error(&g, &scheme, 2000, seed).unwrap();
            if (mc.estimate - exact).abs() <= 4.0 * mc.standard_error {
                inside += 1;
            }
        }
        assert!(inside >= 99, "{inside}/100 within 4 SE");
    }

    #[test]
    fn rate_factor_special_cases() {
        let p = Partition::from_strata((0..40).collect(), (40..100).collect()).unwrap();
        let full = BatchPlan {
            m: 100,
            n1: 40,
            n2: 60,
            beta: 1.0,
            pi: 1.0,
        };
        let f = rate_factor(0.1, 2.0, 40, 60, &full).unwrap();
        assert!((f.factor - 0.9).abs() < 1e-15);
        assert!(f.m_sufficient);
        assert_eq!(rate_factor(1.0, 2.0, 40, 60, &full).unwrap().factor, 0.0);

        let plan = BatchPlan::new(40, 10, &p).unwrap();
        assert_eq!(plan.beta, 2.0);
        let f = rate_factor(0.1, 2.0, 40, 60, &plan).unwrap();
        // 0.9 + 0 + (5/6)(10)(3)/(2*2500) + 1
        assert!((f.factor - 1.905).abs() < 1e-12);
        assert!(!f.m_sufficient);
    }

    #[test]
    fn rate_factor_needs_constants() {
        let p = two_by_two();
        let plan = BatchPlan::new(1, 1, &p).unwrap();
        let spec = ModelSpec::unknown(2);
        assert!(matches!(theorem1_rate_factor(&spec, &p, &plan), Err(Error::Capability(_))));
    }

    #[test]
    fn silent_low_stratum_helps() {
        // H rows average to the reference, L rows vanish.
        let g = family(array![[1.0], [3.0], [0.0], [0.0], [0.0], [0.0]], vec![2.0]);
        let p = Partition::from_strata(vec![0, 1], vec![2, 3, 4, 5]).unwrap();
        for (n1, n2) in [(1, 1), (2, 1), (2, 2)] {
            let plan = BatchPlan::new(n1, n2, &p).unwrap();
            let c = theorem2_compare(&g, &p, &plan).unwrap();
            assert!(c.holds && c.mse_strat <= c.mse_srs, "{n1},{n2}: {c:?}");
        }
    }

    #[test]
    fn proportional_allocation_with_matched_strata() {
        // Equal means and equal within-stratum spread: alpha = (N-1)/(N-2).
        let g = family(array![[1.0], [3.0], [1.0], [3.0]], vec![2.0]);
        let p = two_by_two();
        let plan = BatchPlan::new(1, 1, &p).unwrap();
        let c = theorem2_compare(&g, &p, &plan).unwrap();
        assert_eq!(c.method, ErrorMethod::Enumerated);
        assert!((c.alpha - 1.5).abs() < 1e-12);
    }

    #[test]
    fn alpha_convention_on_zero_error() {
        let g = family(Array2::from_elem((4, 1), 2.0), vec![2.0]);
        let p = two_by_two();
        let c = theorem2_compare(&g, &p, &BatchPlan::new(1, 1, &p).unwrap()).unwrap();
        assert_eq!((c.alpha, c.holds), (1.0, true));
    }

    #[test]
    fn optimal_beta_values() {
        assert!((optimal_beta(1) - 0.435_508_427_812_233_2).abs() < 1e-12);
        assert!((optimal_beta(2) - 0.756_835_144_426_404_2).abs() < 1e-12);
        for m in 1..=10_000 {
            let b = optimal_beta(m);
            assert!(b.is_finite() && b > 0.0, "m = {m}: {b}");
        }
    }

    #[test]
    fn report_round_trips_through_json() {
        let g = family(array![[3.0], [5.0], [3.0], [-3.0]], vec![2.0]);
        let p = two_by_two();
        let plan = BatchPlan::new(1, 1, &p).unwrap();
        let report = ErrorReport::build("divergence", &g, &p, &plan, Some((200, 1))).unwrap();
        assert_eq!(report.mse_enumerated, Some(2.5));
        let mut buf = Vec::new();
        report.write_json_line(&mut buf).unwrap();
        let back: ErrorReport = serde_json::from_slice(&buf).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(8, 2), 28);
        assert_eq!(binomial(12, 6), 924);
        assert_eq!(binomial(3, 5), 0);
    }
}
