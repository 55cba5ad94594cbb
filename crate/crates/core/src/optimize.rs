//! Minibatch training loops (SGD and Adam over either sampler) and the
//! one-step descent recursion check.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{srs_error_about_reference, typicality_error_corrected, Scheme};
use crate::data::{format_real, Dataset};
use crate::density::Partition;
use crate::error::{invalid, Error, Result};
use crate::models::{batch_gradient, full_gradient, full_loss, GradientFamily, Model};
use crate::rng;
use crate::sampling::{BatchPlan, Sampler};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta_m: f64,
        beta_v: f64,
        eps: f64,
    },
}

impl Optimizer {
    /// Adam with the usual moment decay rates and epsilon.
    pub fn adam(lr: f64) -> Self {
        Self::Adam {
            lr,
            beta_m: 0.9,
            beta_v: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Sgd { .. } => "sgd",
            Optimizer::Adam { .. } => "adam",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Optimizer::Sgd { lr } if !(lr >= 0.0 && lr.is_finite()) => invalid(format!("bad learning rate {lr}")),
            Optimizer::Adam { lr, beta_m, beta_v, eps } => {
                if !(lr >= 0.0 && lr.is_finite()) {
                    return invalid(format!("bad learning rate {lr}"));
                }
                if !(0.0..1.0).contains(&beta_m) || !(0.0..1.0).contains(&beta_v) {
                    return invalid(format!("Adam decay rates must lie in [0, 1), got {beta_m}, {beta_v}"));
                }
                if !(eps > 0.0) {
                    return invalid(format!("Adam epsilon must be positive, got {eps}"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub theta: Vec<f64>,
    pub iteration: usize,
    pub moments: Option<AdamMoments>,
}

impl TrainState {
    pub fn new(theta: Vec<f64>) -> Self {
        Self {
            theta,
            iteration: 0,
            moments: None,
        }
    }

    fn apply(&mut self, update: impl Fn(usize) -> f64) -> Result<()> {
        let next: Vec<f64> = self.theta.iter().enumerate().map(|(k, t)| t - update(k)).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite update at iteration {}", self.iteration)));
        }
        self.theta = next;
        self.iteration += 1;
        Ok(())
    }

    /// `theta <- theta - lr * mean_{i in batch} grad_i`.
    pub fn sgd_step(&mut self, model: &dyn Model, data: &Dataset, batch: &[usize], lr: f64) -> Result<()> {
        let g = batch_gradient(model, data, &self.theta, batch)?;
        self.apply(|k| lr * g[k])
    }

    /// Bias-corrected Adam update on the batch-mean gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn adam_step(
        &mut self,
        model: &dyn Model,
        data: &Dataset,
        batch: &[usize],
        lr: f64,
        beta_m: f64,
        beta_v: f64,
        eps: f64,
    ) -> Result<()> {
        let g = batch_gradient(model, data, &self.theta, batch)?;
        let p = self.theta.len();
        let mom = self.moments.get_or_insert_with(|| AdamMoments {
            first: vec![0.0; p],
            second: vec![0.0; p],
            t: 0,
        });
        mom.t += 1;
        for ((m1, m2), gk) in mom.first.iter_mut().zip(mom.second.iter_mut()).zip(&g) {
            *m1 = beta_m * *m1 + (1.0 - beta_m) * gk;
            *m2 = beta_v * *m2 + (1.0 - beta_v) * gk * gk;
        }
        let c1 = 1.0 - beta_m.powi(mom.t as i32);
        let c2 = 1.0 - beta_v.powi(mom.t as i32);
        let steps: Vec<f64> = (0..p)
            .map(|k| lr * (mom.first[k] / c1) / ((mom.second[k] / c2).sqrt() + eps))
            .collect();
        self.apply(|k| steps[k])
    }

    pub fn step(&mut self, model: &dyn Model, data: &Dataset, batch: &[usize], optimizer: &Optimizer) -> Result<()> {
        match *optimizer {
            Optimizer::Sgd { lr } => self.sgd_step(model, data, batch, lr),
            Optimizer::Adam { lr, beta_m, beta_v, eps } => self.adam_step(model, data, batch, lr, beta_m, beta_v, eps),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub optimizer: Optimizer,
    /// Starting point; the model's own initialisation when `None`.
    pub theta0: Option<Vec<f64>>,
    /// Strata used to report the error ratio alpha at each evaluation.
    pub alpha_probe: Option<(Partition, BatchPlan)>,
}

impl TrainConfig {
    pub fn new(iterations: usize, seed: u64, optimizer: Optimizer) -> Self {
        Self {
            iterations,
            seed,
            eval_every: 1,
            optimizer,
            theta0: None,
            alpha_probe: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub subopt: Option<f64>,
    pub alpha: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub sampler: String,
    pub optimizer: String,
    pub seed: u64,
    pub records: Vec<TrainRecord>,
    pub final_theta: Vec<f64>,
}

fn opt_real(v: Option<f64>) -> String {
    v.map(format_real).unwrap_or_default()
}

impl TrainTrace {
    pub const CSV_HEADER: &'static str = "iteration,train_loss,val_loss,subopt,sampler,optimizer,seed,alpha";

    /// Data rows only; wall time is left out so traces compare bitwise.
    pub fn write_csv_rows(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.iteration,
                format_real(r.train_loss),
                opt_real(r.val_loss),
                opt_real(r.subopt),
                self.sampler,
                self.optimizer,
                self.seed,
                opt_real(r.alpha)
            )?;
        }
        Ok(())
    }

    pub fn final_record(&self) -> &TrainRecord {
        self.records.last().expect("traces hold at least one record")
    }

    /// First evaluated iteration whose suboptimality is at most `threshold`.
    pub fn iterations_to_threshold(&self, threshold: f64) -> Option<usize> {
        iterations_to_threshold(self, threshold)
    }
}

pub fn iterations_to_threshold(trace: &TrainTrace, threshold: f64) -> Option<usize> {
    trace
        .records
        .iter()
        .find(|r| r.subopt.is_some_and(|s| s <= threshold))
        .map(|r| r.iteration)
}

/// Closed-form error ratio of stratified over SRS batches at `theta`, with
/// the full gradient as reference.
pub fn alpha_at(model: &dyn Model, data: &Dataset, theta: &[f64], partition: &Partition, plan: &BatchPlan) -> Result<f64> {
    let grads = GradientFamily::from_model(model, data, theta)?;
    let srs = srs_error_about_reference(&grads, plan.m)?;
    let strat = typicality_error_corrected(&grads, partition, plan)?;
    Ok(crate::analysis::alpha_ratio(strat, srs))
}

fn check_finite(value: f64, what: &str, iteration: usize) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric(format!("non-finite {what} at iteration {iteration}")))
    }
}

/// Run `cfg.iterations` steps, evaluating at iteration 0, every
/// `eval_every` steps and at the end. Batches come from stream 0 of
/// `cfg.seed`.
pub fn train(
    model: &dyn Model,
    data: &Dataset,
    validation: Option<&Dataset>,
    sampler: &Sampler,
    cfg: &TrainConfig,
) -> Result<TrainTrace> {
    if cfg.iterations == 0 {
        return invalid("training needs at least one iteration");
    }
    if cfg.eval_every == 0 {
        return invalid("eval_every must be positive");
    }
    if sampler.population() != data.len() {
        return invalid(format!(
            "sampler covers {} samples, dataset has {}",
            sampler.population(),
            data.len()
        ));
    }
    if sampler.batch_size() > data.len() {
        return invalid("batch larger than the dataset");
    }
    if let Some((partition, plan)) = &cfg.alpha_probe {
        if partition.len() != data.len() {
            return invalid("alpha probe partition does not cover the dataset");
        }
        BatchPlan::new(plan.n1, plan.n2, partition)?;
    }
    cfg.optimizer.validate()?;
    let theta0 = cfg.theta0.clone().unwrap_or_else(|| model.initial_theta(cfg.seed));
    if theta0.len() != model.parameter_dim() {
        return invalid(format!(
            "initial parameters have {} entries, model expects {}",
            theta0.len(),
            model.parameter_dim()
        ));
    }

    let started = Instant::now();
    let mut state = TrainState::new(theta0);
    let mut batches = rng::stream(cfg.seed, 0);
    let mut records = Vec::new();
    let evaluate = |state: &TrainState| -> Result<TrainRecord> {
        let k = state.iteration;
        let train_loss = check_finite(full_loss(model, data, &state.theta)?, "training loss", k)?;
        let val_loss = validation
            .map(|v| full_loss(model, v, &state.theta).and_then(|l| check_finite(l, "validation loss", k)))
            .transpose()?;
        let subopt = model.suboptimality(data, &state.theta).transpose()?;
        let alpha = match &cfg.alpha_probe {
            Some((partition, plan)) => Some(alpha_at(model, data, &state.theta, partition, plan)?),
            None => None,
        };
        Ok(TrainRecord {
            iteration: k,
            train_loss,
            val_loss,
            subopt,
            alpha,
            wall_seconds: started.elapsed().as_secs_f64(),
        })
    };

    records.push(evaluate(&state)?);
    while state.iteration < cfg.iterations {
        let batch = sampler.draw(&mut batches)?;
        state.step(model, data, &batch.indices, &cfg.optimizer)?;
        if state.iteration.is_multiple_of(cfg.eval_every) || state.iteration == cfg.iterations {
            records.push(evaluate(&state)?);
        }
    }
    Ok(TrainTrace {
        sampler: sampler.name().to_string(),
        optimizer: cfg.optimizer.name().to_string(),
        seed: cfg.seed,
        records,
        final_theta: state.theta,
    })
}

/// How expectations over batches are taken in [`lemma1_recursion_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expectation {
    Enumerate,
    MonteCarlo { batches: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecursionStep {
    pub iteration: usize,
    pub gap: f64,
    /// `E[J(theta - g_B / L)] - J*`.
    pub lhs: f64,
    /// `(1 - mu/L) gap + E|g_B - grad J|^2 / (2L)`.
    pub rhs: f64,
    /// Standard error of `lhs - rhs`; zero under enumeration.
    pub standard_error: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecursionReport {
    pub steps: Vec<RecursionStep>,
    pub all_hold: bool,
}

pub fn scheme_of(sampler: &Sampler) -> Scheme {
    match sampler {
        Sampler::Srs { m, .. } => Scheme::Srs { m: *m },
        Sampler::Typicality { partition, plan } => Scheme::Stratified {
            partition: partition.clone(),
            plan: *plan,
        },
    }
}

/// Check the one-step bound on the expected suboptimality after a
/// `1/L` step at `k_steps` points of a training path started at `theta0`.
/// The path itself advances with batches from stream 2 of `path_seed`.
pub fn lemma1_recursion_check(
    model: &dyn Model,
    data: &Dataset,
    sampler: &Sampler,
    theta0: Vec<f64>,
    k_steps: usize,
    expectation: Expectation,
    path_seed: u64,
) -> Result<RecursionReport> {
    let spec = model.spec();
    let missing = || Error::Capability(format!("{} model has no exact constants", model.kind()));
    let l = spec.lipschitz_l.ok_or_else(missing)?;
    let mu = spec.strong_convexity_mu.ok_or_else(missing)?;
    if spec.exact_optimum_value.is_none() {
        return Err(missing());
    }
    if sampler.population() != data.len() {
        return invalid("sampler does not cover the dataset");
    }
    let subopt = |theta: &[f64]| -> Result<f64> { model.suboptimality(data, theta).ok_or_else(missing)? };
    let scheme = scheme_of(sampler);
    let contraction = 1.0 - mu / l;

    let mut path = rng::stream(path_seed, 2);
    let mut theta = theta0;
    let mut steps = Vec::with_capacity(k_steps);
    for k in 0..k_steps {
        let gap = subopt(&theta)?;
        let full = full_gradient(model, data, &theta)?;
        // Per batch: lhs_b = J(theta - g_b/L) - J*, noise_b = |g_b - grad J|^2.
        let per_batch = |batch: &[usize]| -> Result<(f64, f64)> {
            let g = batch_gradient(model, data, &theta, batch)?;
            let next: Vec<f64> = theta.iter().zip(&g).map(|(t, gi)| t - gi / l).collect();
            let noise: f64 = g.iter().zip(&full).map(|(a, b)| (a - b).powi(2)).sum();
            Ok((subopt(&next)?, noise))
        };
        let step = match expectation {
            Expectation::Enumerate => {
                let (mut lhs, mut noise, mut count) = (0.0, 0.0, 0u64);
                scheme.for_each_batch(data.len(), |batch| {
                    let (a, b) = per_batch(batch)?;
                    lhs += a;
                    noise += b;
                    count += 1;
                    Ok(())
                })?;
                let lhs = lhs / count as f64;
                let rhs = contraction * gap + noise / count as f64 / (2.0 * l);
                RecursionStep {
                    iteration: k,
                    gap,
                    lhs,
                    rhs,
                    standard_error: 0.0,
                    holds: lhs <= rhs,
                }
            }
            Expectation::MonteCarlo { batches, seed } => {
                if batches < 2 {
                    return invalid("Monte-Carlo recursion check needs at least two batches");
                }
                let mut r = rng::stream(seed, 3 + k as u64);
                let (mut lhs, mut noise) = (0.0, 0.0);
                let mut diffs = Vec::with_capacity(batches);
                for _ in 0..batches {
                    let (a, b) = per_batch(&sampler.draw(&mut r)?.indices)?;
                    lhs += a;
                    noise += b;
                    diffs.push(a - (contraction * gap + b / (2.0 * l)));
                }
                let n = batches as f64;
                let mean = diffs.iter().sum::<f64>() / n;
                let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
                let se = (var / n).sqrt();
                RecursionStep {
                    iteration: k,
                    gap,
                    lhs: lhs / n,
                    rhs: contraction * gap + noise / n / (2.0 * l),
                    standard_error: se,
                    holds: mean <= 3.0 * se,
                }
            }
        };
        steps.push(step);
        let batch = sampler.draw(&mut path)?;
        let g = batch_gradient(model, data, &theta, &batch.indices)?;
        theta.iter_mut().zip(&g).for_each(|(t, gi)| *t -= gi / l);
    }
    let all_hold = steps.iter().all(|s| s.holds);
    Ok(RecursionReport { steps, all_hold })
}
