//! Per-sample differentiable models with hand-written gradients.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{format_real, Dataset};
use crate::error::{invalid, Error, Result};
use crate::rng;

/// Above this many samples full-batch sums switch to fixed-shape pairwise
/// summation.
pub const PAIRWISE_THRESHOLD: usize = 10_000;
const PAIRWISE_LEAF: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Quadratic,
    Logistic,
    Mlp,
    Conv,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Quadratic => "quadratic",
            ModelKind::Logistic => "logistic",
            ModelKind::Mlp => "mlp",
            ModelKind::Conv => "conv",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(Self::Quadratic),
            "logistic" => Ok(Self::Logistic),
            "mlp" => Ok(Self::Mlp),
            "conv" => Ok(Self::Conv),
            other => invalid(format!("unknown model kind {other:?}")),
        }
    }
}

/// Smoothness and convexity constants of a model on a dataset, where known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub parameter_dim: usize,
    pub lipschitz_l: Option<f64>,
    pub strong_convexity_mu: Option<f64>,
    pub noise_bound_beta1: Option<f64>,
    pub growth_bound_beta2: Option<f64>,
    pub exact_minimizer: Option<Vec<f64>>,
    pub exact_optimum_value: Option<f64>,
    /// Number of parameter points used to estimate `beta1`/`beta2`.
    pub probe_count: usize,
}

impl ModelSpec {
    pub fn unknown(parameter_dim: usize) -> Self {
        Self {
            parameter_dim,
            lipschitz_l: None,
            strong_convexity_mu: None,
            noise_bound_beta1: None,
            growth_bound_beta2: None,
            exact_minimizer: None,
            exact_optimum_value: None,
            probe_count: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let (Some(mu), Some(l)) = (self.strong_convexity_mu, self.lipschitz_l) {
            if !(mu > 0.0 && mu <= l * (1.0 + 1e-12)) {
                return invalid(format!("need 0 < mu <= L, got mu = {mu}, L = {l}"));
            }
        }
        if let Some(b2) = self.growth_bound_beta2 {
            if !(b2 >= 1.0) {
                return invalid(format!("beta2 must be >= 1, got {b2}"));
            }
        }
        if let Some(b1) = self.noise_bound_beta1 {
            if !(b1 >= 0.0) {
                return invalid(format!("beta1 must be >= 0, got {b1}"));
            }
        }
        Ok(())
    }

    pub fn condition_ratio(&self) -> Option<f64> {
        Some(self.strong_convexity_mu? / self.lipschitz_l?)
    }
}

/// A per-sample loss with its exact gradient.
pub trait Model: Send + Sync {
    fn kind(&self) -> ModelKind;

    fn parameter_dim(&self) -> usize;

    /// Loss of sample `index`; the gradient is written into `grad`
    /// (overwriting it).
    fn loss_grad(&self, data: &Dataset, theta: &[f64], index: usize, grad: &mut [f64]) -> Result<f64>;

    fn initial_theta(&self, _seed: u64) -> Vec<f64> {
        vec![0.0; self.parameter_dim()]
    }

    fn spec(&self) -> ModelSpec {
        ModelSpec::unknown(self.parameter_dim())
    }

    /// `J(theta) - J(theta*)` when the optimum is known.
    fn suboptimality(&self, data: &Dataset, theta: &[f64]) -> Option<Result<f64>> {
        let optimum = self.spec().exact_optimum_value?;
        Some(full_loss(self, data, theta).map(|j| j - optimum))
    }
}

fn check_call(model: &(impl Model + ?Sized), data: &Dataset, theta: &[f64], index: usize) -> Result<()> {
    if theta.len() != model.parameter_dim() {
        return invalid(format!(
            "theta has {} entries, {} model expects {}",
            theta.len(),
            model.kind(),
            model.parameter_dim()
        ));
    }
    if index >= data.len() {
        return invalid(format!("sample index {index} out of range for N={}", data.len()));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite parameter vector".into()));
    }
    Ok(())
}

fn finite_or(loss: f64, grad: &[f64], index: usize) -> Result<f64> {
    if loss.is_finite() && grad.iter().all(|g| g.is_finite()) {
        Ok(loss)
    } else {
        Err(Error::Numeric(format!("non-finite loss or gradient at sample {index}")))
    }
}

fn target_column(data: &Dataset, kind: ModelKind) -> Result<ndarray::ArrayView1<'_, f64>> {
    data.targets()
        .map(|t| t.column(0))
        .ok_or_else(|| Error::InvalidArgument(format!("{kind} model needs a target column")))
}

pub fn per_sample_loss_and_grad(
    model: &(impl Model + ?Sized),
    data: &Dataset,
    theta: &[f64],
    index: usize,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; model.parameter_dim()];
    let loss = model.loss_grad(data, theta, index, &mut grad)?;
    Ok((loss, grad))
}

/// Sum of losses and gradients over `range`, in fixed order.
fn sum_range(
    model: &(impl Model + ?Sized),
    data: &Dataset,
    theta: &[f64],
    range: std::ops::Range<usize>,
    pairwise: bool,
) -> Result<(f64, Vec<f64>)> {
    let p = model.parameter_dim();
    if pairwise && range.len() > PAIRWISE_LEAF {
        let mid = range.start + range.len() / 2;
        let (left, right) = rayon::join(
            || sum_range(model, data, theta, range.start..mid, true),
            || sum_range(model, data, theta, mid..range.end, true),
        );
        let (ll, mut lg) = left?;
        let (rl, rg) = right?;
        for (a, b) in lg.iter_mut().zip(&rg) {
            *a += b;
        }
        return Ok((ll + rl, lg));
    }
    let mut total = vec![0.0; p];
    let mut grad = vec![0.0; p];
    let mut loss = 0.0;
    for i in range {
        loss += model.loss_grad(data, theta, i, &mut grad)?;
        for (t, g) in total.iter_mut().zip(&grad) {
            *t += g;
        }
    }
    Ok((loss, total))
}

/// Mean loss and mean gradient over the whole dataset.
pub fn full_loss_and_gradient(
    model: &(impl Model + ?Sized),
    data: &Dataset,
    theta: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let n = data.len();
    let (loss, mut grad) = sum_range(model, data, theta, 0..n, n > PAIRWISE_THRESHOLD)?;
    let inv = 1.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((loss * inv, grad))
}

pub fn full_gradient(model: &(impl Model + ?Sized), data: &Dataset, theta: &[f64]) -> Result<Vec<f64>> {
    full_loss_and_gradient(model, data, theta).map(|(_, g)| g)
}

pub fn full_loss(model: &(impl Model + ?Sized), data: &Dataset, theta: &[f64]) -> Result<f64> {
    let n = data.len();
    let mut grad = vec![0.0; model.parameter_dim()];
    let mut loss = 0.0;
    for i in 0..n {
        loss += model.loss_grad(data, theta, i, &mut grad)?;
    }
    Ok(loss / n as f64)
}

/// Mean gradient over `indices`.
pub fn batch_gradient(
    model: &(impl Model + ?Sized),
    data: &Dataset,
    theta: &[f64],
    indices: &[usize],
) -> Result<Vec<f64>> {
    let p = model.parameter_dim();
    let mut total = vec![0.0; p];
    let mut grad = vec![0.0; p];
    for &i in indices {
        model.loss_grad(data, theta, i, &mut grad)?;
        for (t, g) in total.iter_mut().zip(&grad) {
            *t += g;
        }
    }
    let inv = 1.0 / indices.len().max(1) as f64;
    total.iter_mut().for_each(|t| *t *= inv);
    Ok(total)
}

/// Per-sample gradients at one parameter point plus the reference gradient
/// the batch estimators are compared against.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientFamily {
    pub per_sample: Array2<f64>,
    pub reference: Vec<f64>,
    pub theta: Vec<f64>,
}

impl GradientFamily {
    pub fn new(per_sample: Array2<f64>, reference: Vec<f64>, theta: Vec<f64>) -> Result<Self> {
        if per_sample.nrows() == 0 || per_sample.ncols() == 0 {
            return invalid("gradient family must have at least one sample and one dimension");
        }
        if reference.len() != per_sample.ncols() {
            return invalid(format!(
                "reference has {} entries, gradients have {}",
                reference.len(),
                per_sample.ncols()
            ));
        }
        if per_sample.iter().chain(&reference).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        Ok(Self {
            per_sample,
            reference,
            theta,
        })
    }

    /// Family whose reference is the per-sample mean.
    pub fn with_mean_reference(per_sample: Array2<f64>) -> Result<Self> {
        let n = per_sample.nrows().max(1) as f64;
        let reference: Vec<f64> = per_sample.columns().into_iter().map(|c| c.sum() / n).collect();
        Self::new(per_sample, reference, Vec::new())
    }

    /// Evaluate every per-sample gradient of `model` at `theta`; the
    /// reference is the full-batch mean gradient.
    pub fn from_model(model: &(impl Model + ?Sized), data: &Dataset, theta: &[f64]) -> Result<Self> {
        let p = model.parameter_dim();
        let mut rows = Array2::zeros((data.len(), p));
        let mut grad = vec![0.0; p];
        for i in 0..data.len() {
            model.loss_grad(data, theta, i, &mut grad)?;
            rows.row_mut(i).assign(&ndarray::ArrayView1::from(&grad[..]));
        }
        let mut g = Self::with_mean_reference(rows)?;
        g.theta = theta.to_vec();
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.per_sample.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.per_sample.ncols()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        self.per_sample.columns().into_iter().map(|c| c.sum()).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        self.column_sums().into_iter().map(|s| s / n).collect()
    }
}

fn dot(a: impl IntoIterator<Item = f64>, b: &[f64]) -> f64 {
    a.into_iter().zip(b).map(|(x, w)| x * w).sum()
}

/// Least squares: `l_i = (w . x_i - y_i)^2 / 2`, target column 0.
#[derive(Debug, Clone, Default)]
pub struct QuadraticModel {
    dims: usize,
    constants: Option<QuadraticConstants>,
}

#[derive(Debug, Clone)]
struct QuadraticConstants {
    spec: ModelSpec,
    /// `X^T X / N`, row-major.
    hessian: Vec<f64>,
}

impl QuadraticModel {
    pub fn new(dims: usize) -> Self {
        Self { dims, constants: None }
    }

    /// Model with constants and exact optimum computed on `data`.
    pub fn fitted(data: &Dataset) -> Result<Self> {
        let (spec, hessian) = quadratic_constants_with_hessian(data)?;
        Ok(Self {
            dims: data.dims(),
            constants: Some(QuadraticConstants { spec, hessian }),
        })
    }

    /// Constants of the fitted model. Panics if the model was not fitted.
    pub fn constants(&self) -> &ModelSpec {
        &self.constants.as_ref().expect("quadratic model not fitted").spec
    }
}

impl Model for QuadraticModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Quadratic
    }

    fn parameter_dim(&self) -> usize {
        self.dims
    }

    fn loss_grad(&self, data: &Dataset, theta: &[f64], index: usize, grad: &mut [f64]) -> Result<f64> {
        check_call(self, data, theta, index)?;
        let x = data.feature_row(index);
        let y = target_column(data, self.kind())?[index];
        let r = dot(x.iter().copied(), theta) - y;
        for (g, xi) in grad.iter_mut().zip(x.iter()) {
            *g = r * xi;
        }
        finite_or(0.5 * r * r, grad, index)
    }

    fn spec(&self) -> ModelSpec {
        self.constants
            .as_ref()
            .map_or_else(|| ModelSpec::unknown(self.dims), |c| c.spec.clone())
    }

    /// Exact quadratic form `(theta - theta*)^T H (theta - theta*) / 2`,
    /// free of the cancellation in `J(theta) - J*`.
    fn suboptimality(&self, _data: &Dataset, theta: &[f64]) -> Option<Result<f64>> {
        let c = self.constants.as_ref()?;
        let star = c.spec.exact_minimizer.as_ref()?;
        let p = self.dims;
        let d: Vec<f64> = theta.iter().zip(star).map(|(a, b)| a - b).collect();
        let mut q = 0.0;
        for i in 0..p {
            let hi = &c.hessian[i * p..(i + 1) * p];
            q += d[i] * dot(hi.iter().copied(), &d);
        }
        Some(Ok(0.5 * q))
    }
}

/// `L`, `mu`, `theta*` and `J(theta*)` for least squares on `data`, plus
/// empirical `beta1`/`beta2`.
pub fn quadratic_constants(data: &Dataset) -> Result<ModelSpec> {
    quadratic_constants_with_hessian(data).map(|(s, _)| s)
}

/// Growth bounds are estimated on points `theta* + r u` for these radii
/// (scaled by `max(1, |theta*|)`) and random unit directions `u`.
const PROBE_RADII: [f64; 4] = [0.01, 0.1, 1.0, 10.0];
const PROBE_DIRECTIONS: usize = 8;
const BETA_SAFETY: f64 = 1.1;

fn quadratic_constants_with_hessian(data: &Dataset) -> Result<(ModelSpec, Vec<f64>)> {
    let y = target_column(data, ModelKind::Quadratic)?;
    let n = data.len();
    let p = data.dims();
    let x = DMatrix::from_fn(n, p, |i, j| data.features()[[i, j]]);
    let xtx = x.transpose() * &x;
    let h = &xtx / n as f64;
    let eig = h.clone().symmetric_eigen();
    let l = eig.eigenvalues.max();
    let mu = eig.eigenvalues.min();
    if !(mu > l * 1e-12) || !(l > 0.0) {
        return Err(Error::Rank(format!(
            "X^T X / N is singular or indefinite (eigenvalues in [{mu:e}, {l:e}])"
        )));
    }
    let xty = x.transpose() * DVector::from_iterator(n, y.iter().copied());
    let chol = xtx
        .cholesky()
        .ok_or_else(|| Error::Rank("X^T X is not positive definite".into()))?;
    let star: Vec<f64> = chol.solve(&xty).iter().copied().collect();

    let model = QuadraticModel::new(p);
    let optimum = full_loss(&model, data, &star)?;
    let (beta1, beta2, probes) = estimate_growth_bounds(&model, data, &star)?;

    let spec = ModelSpec {
        parameter_dim: p,
        lipschitz_l: Some(l),
        strong_convexity_mu: Some(mu),
        noise_bound_beta1: Some(beta1),
        growth_bound_beta2: Some(beta2),
        exact_minimizer: Some(star),
        exact_optimum_value: Some(optimum),
        probe_count: probes,
    };
    spec.validate()?;
    Ok((spec, h.transpose().iter().copied().collect()))
}

/// `beta1 = max_i |grad J_i(theta*)|^2`; `beta2` is the smallest value
/// (at least 1) making `|grad J_i|^2 <= beta1 + beta2 |grad J|^2` hold on
/// every probe point, inflated by a safety factor.
fn estimate_growth_bounds(model: &QuadraticModel, data: &Dataset, star: &[f64]) -> Result<(f64, f64, usize)> {
    let max_sample_norm_sq = |theta: &[f64]| -> Result<f64> {
        let fam = GradientFamily::from_model(model, data, theta)?;
        Ok(fam
            .per_sample
            .rows()
            .into_iter()
            .map(|r| r.dot(&r))
            .fold(0.0, f64::max))
    };
    let beta1 = max_sample_norm_sq(star)?;
    let scale = star.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    let mut rng = rng::seeded(0x5eed);
    let mut beta2: f64 = 1.0;
    let mut probes = 1;
    for r in PROBE_RADII {
        for _ in 0..PROBE_DIRECTIONS {
            let mut u: Vec<f64> = (0..star.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            u.iter_mut().for_each(|v| *v *= r * scale / norm);
            let theta: Vec<f64> = star.iter().zip(&u).map(|(a, b)| a + b).collect();
            let full = full_gradient(model, data, &theta)?;
            let full_sq: f64 = full.iter().map(|v| v * v).sum();
            let excess = max_sample_norm_sq(&theta)? - beta1;
            if full_sq > 0.0 && excess > 0.0 {
                beta2 = beta2.max(excess / full_sq);
            }
            probes += 1;
        }
    }
    Ok((beta1, beta2 * BETA_SAFETY, probes))
}

/// Logistic regression with log-loss; targets `> 0.5` are the positive class.
#[derive(Debug, Clone)]
pub struct LogisticModel {
    dims: usize,
}

impl LogisticModel {
    pub fn new(dims: usize) -> Self {
        Self { dims }
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Model for LogisticModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Logistic
    }

    fn parameter_dim(&self) -> usize {
        self.dims
    }

    fn loss_grad(&self, data: &Dataset, theta: &[f64], index: usize, grad: &mut [f64]) -> Result<f64> {
        check_call(self, data, theta, index)?;
        let x = data.feature_row(index);
        let y = if target_column(data, self.kind())?[index] > 0.5 { 1.0 } else { -1.0 };
        let margin = y * dot(x.iter().copied(), theta);
        let coeff = -y * sigmoid(-margin);
        for (g, xi) in grad.iter_mut().zip(x.iter()) {
            *g = coeff * xi;
        }
        finite_or(softplus(-margin), grad, index)
    }
}

/// One tanh hidden layer, linear output over all target columns, squared
/// loss. Parameters are laid out `W1 (H x D), b1, W2 (T x H), b2`.
#[derive(Debug, Clone)]
pub struct MlpModel {
    inputs: usize,
    hidden: usize,
    outputs: usize,
}

pub const DEFAULT_HIDDEN_WIDTH: usize = 16;

impl MlpModel {
    pub fn new(inputs: usize, hidden: usize, outputs: usize) -> Self {
        Self { inputs, hidden, outputs }
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let w1 = self.hidden * self.inputs;
        let b1 = w1 + self.hidden;
        let w2 = b1 + self.outputs * self.hidden;
        (w1, b1, w2)
    }
}

impl Model for MlpModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Mlp
    }

    fn parameter_dim(&self) -> usize {
        self.hidden * self.inputs + self.hidden + self.outputs * self.hidden + self.outputs
    }

    fn initial_theta(&self, seed: u64) -> Vec<f64> {
        let mut rng = rng::seeded(seed);
        let (w1_end, b1_end, w2_end) = self.offsets();
        let s1 = Normal::new(0.0, (1.0 / self.inputs as f64).sqrt()).expect("valid");
        let s2 = Normal::new(0.0, (1.0 / self.hidden as f64).sqrt()).expect("valid");
        (0..self.parameter_dim())
            .map(|k| {
                if k < w1_end {
                    s1.sample(&mut rng)
                } else if k < b1_end {
                    0.0
                } else if k < w2_end {
                    s2.sample(&mut rng)
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn loss_grad(&self, data: &Dataset, theta: &[f64], index: usize, grad: &mut [f64]) -> Result<f64> {
        check_call(self, data, theta, index)?;
        if data.dims() != self.inputs || data.target_dims() != self.outputs {
            return invalid(format!(
                "mlp expects {} inputs and {} targets, dataset has {} and {}",
                self.inputs,
                self.outputs,
                data.dims(),
                data.target_dims()
            ));
        }
        let x = data.feature_row(index);
        let y = data.target_row(index).expect("checked target dims");
        let (d, h, t) = (self.inputs, self.hidden, self.outputs);
        let (w1_end, b1_end, w2_end) = self.offsets();
        let (w1, rest) = theta.split_at(w1_end);
        let (b1, rest) = rest.split_at(b1_end - w1_end);
        let (w2, b2) = rest.split_at(w2_end - b1_end);

        let a: Vec<f64> = (0..h)
            .map(|j| (dot(x.iter().copied(), &w1[j * d..(j + 1) * d]) + b1[j]).tanh())
            .collect();
        let r: Vec<f64> = (0..t)
            .map(|k| dot(a.iter().copied(), &w2[k * h..(k + 1) * h]) + b2[k] - y[k])
            .collect();
        let loss = 0.5 * r.iter().map(|v| v * v).sum::<f64>();

        let (gw1, grest) = grad.split_at_mut(w1_end);
        let (gb1, grest) = grest.split_at_mut(b1_end - w1_end);
        let (gw2, gb2) = grest.split_at_mut(w2_end - b1_end);
        for k in 0..t {
            gb2[k] = r[k];
            for j in 0..h {
                gw2[k * h + j] = r[k] * a[j];
            }
        }
        for j in 0..h {
            let back: f64 = (0..t).map(|k| r[k] * w2[k * h + j]).sum();
            let delta = back * (1.0 - a[j] * a[j]);
            gb1[j] = delta;
            for (i, xi) in x.iter().enumerate() {
                gw1[j * d + i] = delta * xi;
            }
        }
        finite_or(loss, grad, index)
    }
}

/// Single-channel 1-D convolution (width 3, zero padded, same length)
/// followed by a dense readout to the targets, squared loss. Parameters are
/// `kernel (3), W (T x D), b (T)`; the kernel starts at `[1, -2, 1]`.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    length: usize,
    outputs: usize,
}

pub const CONV_INITIAL_KERNEL: [f64; 3] = [1.0, -2.0, 1.0];

impl ConvEncoder {
    pub fn new(length: usize, outputs: usize) -> Self {
        Self { length, outputs }
    }

    fn convolve(&self, x: &[f64], kernel: &[f64]) -> Vec<f64> {
        let n = self.length;
        (0..n)
            .map(|t| {
                let left = if t > 0 { x[t - 1] } else { 0.0 };
                let right = if t + 1 < n { x[t + 1] } else { 0.0 };
                kernel[0] * left + kernel[1] * x[t] + kernel[2] * right
            })
            .collect()
    }
}

impl Model for ConvEncoder {
    fn kind(&self) -> ModelKind {
        ModelKind::Conv
    }

    fn parameter_dim(&self) -> usize {
        3 + self.outputs * self.length + self.outputs
    }

    fn initial_theta(&self, seed: u64) -> Vec<f64> {
        let mut rng = rng::seeded(seed);
        let mut theta = CONV_INITIAL_KERNEL.to_vec();
        let scale = 0.1 / (self.length as f64).sqrt();
        theta.extend((0..self.outputs * self.length).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)));
        theta.extend(std::iter::repeat_n(0.0, self.outputs));
        theta
    }

    fn loss_grad(&self, data: &Dataset, theta: &[f64], index: usize, grad: &mut [f64]) -> Result<f64> {
        check_call(self, data, theta, index)?;
        if data.dims() != self.length || data.target_dims() != self.outputs {
            return invalid(format!(
                "conv encoder expects curves of length {} and {} targets",
                self.length, self.outputs
            ));
        }
        let x: Vec<f64> = data.feature_row(index).to_vec();
        let y = data.target_row(index).expect("checked target dims");
        let (n, t) = (self.length, self.outputs);
        let kernel = &theta[..3];
        let w = &theta[3..3 + t * n];
        let b = &theta[3 + t * n..];

        let z = self.convolve(&x, kernel);
        let r: Vec<f64> = (0..t)
            .map(|k| dot(z.iter().copied(), &w[k * n..(k + 1) * n]) + b[k] - y[k])
            .collect();
        let loss = 0.5 * r.iter().map(|v| v * v).sum::<f64>();

        let (gk, grest) = grad.split_at_mut(3);
        let (gw, gb) = grest.split_at_mut(t * n);
        let mut dz = vec![0.0; n];
        for k in 0..t {
            gb[k] = r[k];
            for s in 0..n {
                gw[k * n + s] = r[k] * z[s];
                dz[s] += r[k] * w[k * n + s];
            }
        }
        gk.iter_mut().for_each(|g| *g = 0.0);
        for s in 0..n {
            if s > 0 {
                gk[0] += dz[s] * x[s - 1];
            }
            gk[1] += dz[s] * x[s];
            if s + 1 < n {
                gk[2] += dz[s] * x[s + 1];
            }
        }
        finite_or(loss, grad, index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub probes: usize,
    pub max_relative_error: f64,
}

/// Compare analytic gradients with central differences (step `h`) at
/// `probes` random `(theta, sample)` pairs. Parameters are the model's
/// initialisation plus standard-normal noise. The relative error of a probe
/// is `|a - n| / (|a| + |n|)`.
pub fn finite_difference_check(
    model: &dyn Model,
    data: &Dataset,
    probes: usize,
    h: f64,
    seed: u64,
) -> Result<GradientCheck> {
    let mut r = rng::seeded(seed);
    let p = model.parameter_dim();
    let mut scratch = vec![0.0; p];
    let mut worst: f64 = 0.0;
    for probe in 0..probes {
        let mut theta = model.initial_theta(seed.wrapping_add(probe as u64));
        for t in theta.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut r);
            *t += z;
        }
        let index = r.random_range(0..data.len());
        let (_, analytic) = per_sample_loss_and_grad(model, data, &theta, index)?;
        let mut diff = 0.0;
        let mut scale = 0.0;
        for k in 0..p {
            let mut shifted = theta.clone();
            shifted[k] = theta[k] + h;
            let fp = model.loss_grad(data, &shifted, index, &mut scratch)?;
            shifted[k] = theta[k] - h;
            let fm = model.loss_grad(data, &shifted, index, &mut scratch)?;
            let numeric = (fp - fm) / (2.0 * h);
            diff += (analytic[k] - numeric).powi(2);
            scale += analytic[k].powi(2) + numeric.powi(2);
        }
        let denom = scale.sqrt().max(1e-8);
        worst = worst.max(diff.sqrt() / denom);
    }
    Ok(GradientCheck {
        probes,
        max_relative_error: worst,
    })
}

/// `# model=<kind> dims=<P>` header, then `index,value` rows.
pub fn save_parameters(kind: ModelKind, theta: &[f64], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "# model={kind} dims={}", theta.len())?;
    writeln!(out, "index,value")?;
    for (i, v) in theta.iter().enumerate() {
        writeln!(out, "{i},{}", format_real(*v))?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_parameters(path: impl AsRef<Path>) -> Result<(ModelKind, Vec<f64>)> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    let mut kind = None;
    let mut dims = None;
    for token in header.trim_start_matches('#').split_whitespace() {
        match token.split_once('=') {
            Some(("model", v)) => kind = Some(v.parse::<ModelKind>()?),
            Some(("dims", v)) => dims = v.parse::<usize>().ok(),
            _ => {}
        }
    }
    let (kind, dims) = kind
        .zip(dims)
        .ok_or_else(|| Error::Format("parameter file header must name model and dims".into()))?;
    let mut theta = Vec::with_capacity(dims);
    for (row, line) in lines.skip(1).enumerate() {
        let line = line?;
        let Some((_, v)) = line.split_once(',') else {
            return Err(Error::Format(format!("row {row}: expected index,value")));
        };
        theta.push(v.trim().parse().map_err(|_| Error::Parse {
            row,
            column: 1,
            message: format!("bad value {v:?}"),
        })?);
    }
    if theta.len() != dims {
        return Err(Error::Format(format!("header says {dims} values, found {}", theta.len())));
    }
    Ok((kind, theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_hand_values() {
        let data = Dataset::new(array![[1.0, 0.0]], Some(array![[0.0]])).unwrap();
        let (loss, grad) = per_sample_loss_and_grad(&QuadraticModel::new(2), &data, &[2.0, 5.0], 0).unwrap();
        assert_eq!(loss, 2.0);
        assert_eq!(grad, vec![2.0, 0.0]);
    }

    #[test]
    fn logistic_at_origin() {
        let data = Dataset::new(array![[1.0, -2.0], [0.5, 3.0]], Some(array![[1.0], [0.0]])).unwrap();
        let model = LogisticModel::new(2);
        let (l0, g0) = per_sample_loss_and_grad(&model, &data, &[0.0, 0.0], 0).unwrap();
        assert!((l0 - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g0, vec![-0.5, 1.0]);
        let (_, g1) = per_sample_loss_and_grad(&model, &data, &[0.0, 0.0], 1).unwrap();
        assert_eq!(g1, vec![0.25, 1.5]);
    }

    #[test]
    fn every_model_matches_finite_differences() {
        let mut r = rng::seeded(4);
        let x = Array2::from_shape_fn((6, 3), |_| StandardNormal.sample(&mut r));
        let y = Array2::from_shape_fn((6, 2), |_| StandardNormal.sample(&mut r));
        let dense = Dataset::new(x.clone(), Some(y)).unwrap();
        let labels = Array2::from_shape_fn((6, 1), |(i, _)| (i % 2) as f64);
        let binary = Dataset::new(x, Some(labels)).unwrap();
        let curves = crate::data::generate_pwl_curves(6, 12, 2, 3).unwrap();
        let t = curves.target_dims();
        let cases: [(&dyn Model, &Dataset); 4] = [
            (&QuadraticModel::new(3), &dense),
            (&LogisticModel::new(3), &binary),
            (&MlpModel::new(3, 5, 2), &dense),
            (&ConvEncoder::new(12, t), &curves),
        ];
        for (model, data) in cases {
            let check = finite_difference_check(model, data, 20, 1e-5, 9).unwrap();
            assert!(check.max_relative_error <= 1e-5, "{}: {check:?}", model.kind());
        }
    }

    #[test]
    fn conv_starts_at_second_difference_kernel() {
        let model = ConvEncoder::new(8, 2);
        let theta = model.initial_theta(1);
        assert_eq!(&theta[..3], &CONV_INITIAL_KERNEL);
        assert_eq!(theta.len(), model.parameter_dim());
    }

    #[test]
    fn full_gradient_single_sample_and_duplication() {
        let data = Dataset::new(array![[1.0, 2.0]], Some(array![[0.5]])).unwrap();
        let model = QuadraticModel::new(2);
        let theta = [0.3, -0.7];
        let (_, g) = per_sample_loss_and_grad(&model, &data, &theta, 0).unwrap();
        assert_eq!(full_gradient(&model, &data, &theta).unwrap(), g);

        let two = Dataset::new(array![[1.0, 2.0], [3.0, -1.0]], Some(array![[0.5], [2.0]])).unwrap();
        let four = two.subset(&[0, 1, 0, 1]).unwrap();
        let a = full_gradient(&model, &two, &theta).unwrap();
        let b = full_gradient(&model, &four, &theta).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn full_gradient_matches_normal_equations() {
        let mut r = rng::seeded(12);
        let (n, p) = (30, 4);
        let x = Array2::from_shape_fn((n, p), |_| StandardNormal.sample(&mut r));
        let y = Array2::from_shape_fn((n, 1), |_| StandardNormal.sample(&mut r));
        let data = Dataset::new(x.clone(), Some(y.clone())).unwrap();
        let w = array![0.1, -0.2, 0.3, 0.4];
        let residual = x.dot(&w) - y.column(0);
        let expected = x.t().dot(&residual) / n as f64;
        let got = full_gradient(&QuadraticModel::new(p), &data, w.as_slice().unwrap()).unwrap();
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn pairwise_summation_is_deterministic_and_accurate() {
        let n = PAIRWISE_THRESHOLD + 500;
        let x = Array2::from_shape_fn((n, 2), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let y = Array2::from_shape_fn((n, 1), |(i, _)| (i % 5) as f64);
        let data = Dataset::new(x, Some(y)).unwrap();
        let model = QuadraticModel::new(2);
        let a = full_gradient(&model, &data, &[0.2, 0.1]).unwrap();
        let b = full_gradient(&model, &data, &[0.2, 0.1]).unwrap();
        assert_eq!(a, b);
        let naive = batch_gradient(&model, &data, &[0.2, 0.1], &(0..n).collect::<Vec<_>>()).unwrap();
        for (p, q) in a.iter().zip(&naive) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_design_constants() {
        let data = Dataset::new(array![[1.0, 0.0], [0.0, 1.0]], Some(array![[1.0], [1.0]])).unwrap();
        let spec = quadratic_constants(&data).unwrap();
        assert!((spec.lipschitz_l.unwrap() - 0.5).abs() < 1e-12);
        assert!((spec.strong_convexity_mu.unwrap() - 0.5).abs() < 1e-12);
        let star = spec.exact_minimizer.unwrap();
        assert!((star[0] - 1.0).abs() < 1e-12 && (star[1] - 1.0).abs() < 1e-12);
        assert!(spec.exact_optimum_value.unwrap().abs() < 1e-24);
    }

    #[test]
    fn singular_design_is_a_rank_error() {
        let data = Dataset::new(array![[1.0, 2.0], [2.0, 4.0]], Some(array![[1.0], [1.0]])).unwrap();
        assert!(matches!(quadratic_constants(&data), Err(Error::Rank(_))));
    }

    #[test]
    fn optimum_has_zero_gradient() {
        let mut r = rng::seeded(31);
        let x = Array2::from_shape_fn((40, 3), |_| StandardNormal.sample(&mut r));
        let y = Array2::from_shape_fn((40, 1), |_| StandardNormal.sample(&mut r));
        let data = Dataset::new(x, Some(y)).unwrap();
        let model = QuadraticModel::fitted(&data).unwrap();
        let star = model.constants().exact_minimizer.clone().unwrap();
        let g = full_gradient(&model, &data, &star).unwrap();
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-9);
        assert!(model.suboptimality(&data, &star).unwrap().unwrap().abs() < 1e-15);
    }

    #[test]
    fn parameters_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("theta.csv");
        let theta = vec![0.1, -2.5e-9, 3.0];
        save_parameters(ModelKind::Mlp, &theta, &path).unwrap();
        assert_eq!(load_parameters(&path).unwrap(), (ModelKind::Mlp, theta));
    }

    #[test]
    fn non_finite_parameters_are_rejected() {
        let data = Dataset::new(array![[1.0]], Some(array![[1.0]])).unwrap();
        let mut g = [0.0];
        assert!(matches!(
            QuadraticModel::new(1).loss_grad(&data, &[f64::NAN], 0, &mut g),
            Err(Error::Numeric(_))
        ));
    }
}
