//! Batch selection: simple random sampling and typicality (stratified)
//! sampling.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::density::Partition;
use crate::error::{invalid, Result};
use crate::rng::Rng;

/// Share of each typicality batch drawn from `H` by [`default_plan`].
pub const DEFAULT_H_SHARE: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stratum {
    H,
    L,
    None,
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stratum::H => "H",
            Stratum::L => "L",
            Stratum::None => "none",
        })
    }
}

/// Batch composition for typicality sampling, validated against a partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub m: usize,
    pub n1: usize,
    pub n2: usize,
    /// `n1 N / (m N1)`.
    pub beta: f64,
    /// `m / N`.
    pub pi: f64,
}

impl BatchPlan {
    pub fn new(n1: usize, n2: usize, partition: &Partition) -> Result<Self> {
        let m = n1 + n2;
        let (big_n1, big_n2) = (partition.n1(), partition.n2());
        let n = big_n1 + big_n2;
        if n1 == 0 || n2 == 0 {
            return invalid(format!("need 0 < n1 < m, got n1 = {n1}, n2 = {n2}"));
        }
        if n1 > big_n1 {
            return invalid(format!(
                "n1 = {n1} exceeds |H| = {big_n1}; use a larger gamma or a smaller batch"
            ));
        }
        if n2 > big_n2 {
            return invalid(format!(
                "n2 = {n2} exceeds |L| = {big_n2}; use a smaller gamma or a smaller batch"
            ));
        }
        let ratio_h = n1 as f64 / big_n1 as f64;
        let ratio_l = n2 as f64 / big_n2 as f64;
        // integer cross-multiplication avoids rounding at equality
        if n1 * big_n2 < n2 * big_n1 {
            return invalid(format!(
                "n1/N1 = {ratio_h:.6} < n2/N2 = {ratio_l:.6}: H must be sampled at least as densely as L"
            ));
        }
        Ok(Self {
            m,
            n1,
            n2,
            beta: (n1 * n) as f64 / (m * big_n1) as f64,
            pi: m as f64 / n as f64,
        })
    }

    /// Whether every batch is the whole training set.
    pub fn is_exhaustive(&self, partition: &Partition) -> bool {
        self.n1 == partition.n1() && self.n2 == partition.n2()
    }
}

/// `n1 = round(0.8 m)`, `n2 = m - n1`.
pub fn default_plan(m: usize, partition: &Partition) -> Result<BatchPlan> {
    if m < 5 {
        return invalid(format!("batch size {m} too small for an 80/20 split (need m >= 5)"));
    }
    let n1 = (DEFAULT_H_SHARE * m as f64).round() as usize;
    BatchPlan::new(n1, m - n1, partition)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub stratum_tags: Vec<Stratum>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Uniform `m`-subset of `0..n_total` without replacement (partial
/// Fisher-Yates).
pub fn srs_batch(n_total: usize, m: usize, rng: &mut Rng) -> Result<Batch> {
    if m == 0 || m > n_total {
        return invalid(format!("batch size {m} outside [1, {n_total}]"));
    }
    let indices = partial_shuffle(n_total, m, rng);
    Ok(Batch {
        stratum_tags: vec![Stratum::None; m],
        indices,
    })
}

fn partial_shuffle(n: usize, m: usize, rng: &mut Rng) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(m);
    pool
}

fn draw_from(population: &[usize], k: usize, rng: &mut Rng) -> Vec<usize> {
    partial_shuffle(population.len(), k, rng)
        .into_iter()
        .map(|i| population[i])
        .collect()
}

/// `n1` draws from `H` then `n2` from `L`, each by SRS.
pub fn typicality_batch(partition: &Partition, plan: &BatchPlan, rng: &mut Rng) -> Result<Batch> {
    let checked = BatchPlan::new(plan.n1, plan.n2, partition)?;
    let mut indices = draw_from(partition.h(), checked.n1, rng);
    indices.extend(draw_from(partition.l(), checked.n2, rng));
    let mut stratum_tags = vec![Stratum::H; checked.n1];
    stratum_tags.extend(std::iter::repeat_n(Stratum::L, checked.n2));
    Ok(Batch {
        indices,
        stratum_tags,
    })
}

/// Batch selection strategy for a training run.
#[derive(Debug, Clone, PartialEq)]
pub enum Sampler {
    Srs { n_total: usize, m: usize },
    Typicality { partition: Partition, plan: BatchPlan },
}

impl Sampler {
    pub fn typicality(partition: Partition, plan: BatchPlan) -> Result<Self> {
        BatchPlan::new(plan.n1, plan.n2, &partition)?;
        Ok(Self::Typicality { partition, plan })
    }

    pub fn batch_size(&self) -> usize {
        match self {
            Sampler::Srs { m, .. } => *m,
            Sampler::Typicality { plan, .. } => plan.m,
        }
    }

    pub fn population(&self) -> usize {
        match self {
            Sampler::Srs { n_total, .. } => *n_total,
            Sampler::Typicality { partition, .. } => partition.len(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Sampler::Srs { .. } => "srs",
            Sampler::Typicality { .. } => "typicality",
        }
    }

    pub fn draw(&self, rng: &mut Rng) -> Result<Batch> {
        match self {
            Sampler::Srs { n_total, m } => srs_batch(*n_total, *m, rng),
            Sampler::Typicality { partition, plan } => typicality_batch(partition, plan, rng),
        }
    }
}

/// Audit log of drawn batches: `iteration,ids` with ids separated by `;`.
pub fn write_batch_log<'a>(
    path: impl AsRef<Path>,
    batches: impl IntoIterator<Item = (usize, &'a Batch)>,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "iteration,sample_ids")?;
    for (k, b) in batches {
        let ids: Vec<String> = b.indices.iter().map(usize::to_string).collect();
        writeln!(out, "{k},{}", ids.join(";"))?;
    }
    out.flush()?;
    Ok(())
}
