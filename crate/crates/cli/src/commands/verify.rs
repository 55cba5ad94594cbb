use std::fmt::Write as _;
use std::path::PathBuf;

use ndarray::{array, Array2};
use typsgd_core::analysis::{
    enumerate_error, fixtures, monte_carlo_error, optimal_beta, rate_factor, srs_error_formula, theorem1_rate_factor,
    theorem2_compare, typicality_error_corrected, typicality_error_formula_paper,
};
use typsgd_core::data::{generate_clustered, generate_pwl_curves, ClusteredRegression};
use typsgd_core::models::{finite_difference_check, ConvEncoder, LogisticModel, MlpModel, QuadraticModel};
use typsgd_core::optimize::{lemma1_recursion_check, train, Expectation};
use typsgd_core::{rng, BatchPlan, Dataset, GradientFamily, Model, Optimizer, Partition, Sampler, Scheme, TrainConfig};

use crate::config::RunConfig;
use crate::error::CliResult;
use crate::output::{OutputSet, VERIFY_CSV, VERIFY_TEXT};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    /// Counts towards the exit status.
    Asserted,
    /// Informational.
    Reported,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckItem {
    pub name: &'static str,
    pub kind: CheckKind,
    pub passed: bool,
    pub value: String,
    pub detail: String,
}

impl CheckItem {
    fn asserted(name: &'static str, passed: bool, value: String, detail: impl Into<String>) -> Self {
        Self {
            name,
            kind: CheckKind::Asserted,
            passed,
            value,
            detail: detail.into(),
        }
    }

    fn reported(name: &'static str, value: String, detail: impl Into<String>) -> Self {
        Self {
            name,
            kind: CheckKind::Reported,
            passed: true,
            value,
            detail: detail.into(),
        }
    }

    fn status(&self) -> &'static str {
        match (self.kind, self.passed) {
            (CheckKind::Reported, _) => "info",
            (CheckKind::Asserted, true) => "pass",
            (CheckKind::Asserted, false) => "FAIL",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub seed: u64,
    pub items: Vec<CheckItem>,
}

impl VerifyReport {
    /// Logical AND of the asserted checks.
    pub fn passed(&self) -> bool {
        self.items
            .iter()
            .filter(|i| i.kind == CheckKind::Asserted)
            .all(|i| i.passed)
    }

    pub fn item(&self, name: &str) -> Option<&CheckItem> {
        self.items.iter().find(|i| i.name == name)
    }

    pub fn csv(&self, header: &str) -> String {
        let mut s = format!("# {header}\nitem,kind,status,value,detail\n");
        for i in &self.items {
            let kind = match i.kind {
                CheckKind::Asserted => "ASSERTED",
                CheckKind::Reported => "REPORTED",
            };
            let _ = writeln!(
                s,
                "{},{kind},{},{},{}",
                i.name,
                i.status(),
                i.value.replace(',', ";"),
                i.detail.replace(',', ";")
            );
        }
        s
    }

    pub fn text(&self, header: &str) -> String {
        let mut s = format!("# {header}\n");
        for i in &self.items {
            let kind = match i.kind {
                CheckKind::Asserted => "ASSERTED",
                CheckKind::Reported => "REPORTED",
            };
            let _ = writeln!(s, "[{kind}] {:<4} {:<32} {}  ({})", i.status(), i.name, i.value, i.detail);
        }
        let asserted = self.items.iter().filter(|i| i.kind == CheckKind::Asserted).count();
        let failed = self.items.iter().filter(|i| i.kind == CheckKind::Asserted && !i.passed).count();
        let _ = writeln!(s, "{} asserted, {failed} failed: {}", asserted, if failed == 0 { "OK" } else { "FAILED" });
        s
    }
}

const EXACT: f64 = 1e-9;

fn sci(v: f64) -> String {
    format!("{v:.6e}")
}

fn failed(name: &'static str, err: impl std::fmt::Display) -> CheckItem {
    CheckItem::asserted(name, false, "error".into(), err.to_string())
}

fn guarded(name: &'static str, f: impl FnOnce() -> typsgd_core::Result<Vec<CheckItem>>) -> Vec<CheckItem> {
    f().unwrap_or_else(|e| vec![failed(name, e)])
}

fn srs_formula(cfg: &RunConfig, seed: u64) -> typsgd_core::Result<Vec<CheckItem>> {
    let mut r = rng::stream(seed, 10);
    let fault = if cfg.verify.inject_fault { 1e-3 } else { 0.0 };
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for _ in 0..cfg.verify.instances {
        let g = fixtures::random_family(&mut r, 12, 3);
        for m in 1..=g.len() {
            let f = srs_error_formula(&g, m)? + fault;
            let e = enumerate_error(&g, &Scheme::Srs { m })?;
            worst = worst.max((f - e).abs());
            cases += 1;
        }
    }
    Ok(vec![CheckItem::asserted(
        "srs_formula_vs_enumeration",
        worst <= EXACT,
        sci(worst),
        format!("max abs error over {} families and {cases} batch sizes", cfg.verify.instances),
    )])
}

fn stratified_formulas(cfg: &RunConfig, seed: u64) -> typsgd_core::Result<Vec<CheckItem>> {
    let mut r = rng::stream(seed, 11);
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.verify.instances {
        let inst = fixtures::random_stratified(&mut r, 6, 3);
        let c = typicality_error_corrected(&inst.grads, &inst.partition, &inst.plan)?;
        let scheme = Scheme::Stratified {
            partition: inst.partition.clone(),
            plan: inst.plan,
        };
        worst = worst.max((c - enumerate_error(&inst.grads, &scheme)?).abs());
    }
    let corrected = CheckItem::asserted(
        "corrected_identity_vs_enumeration",
        worst <= EXACT,
        sci(worst),
        format!("max abs error over {} random strata and plans", cfg.verify.instances),
    );

    let zero_sum_count = cfg.verify.instances.div_ceil(2);
    let mut worst: f64 = 0.0;
    for _ in 0..zero_sum_count {
        let inst = fixtures::zero_sum_strata(&mut r, 6, 3);
        let p = typicality_error_formula_paper(&inst.grads, &inst.partition, &inst.plan)?;
        let scheme = Scheme::Stratified {
            partition: inst.partition.clone(),
            plan: inst.plan,
        };
        worst = worst.max((p - enumerate_error(&inst.grads, &scheme)?).abs());
    }
    let zero_sum = CheckItem::asserted(
        "printed_formula_zero_sum_strata",
        worst <= EXACT,
        sci(worst),
        format!("max abs error over {zero_sum_count} instances with zero stratum sums"),
    );

    let grads = GradientFamily::new(array![[3.0], [5.0], [3.0], [-3.0]], vec![2.0], vec![])?;
    let partition = Partition::from_strata(vec![0, 1], vec![2, 3])?;
    let plan = BatchPlan::new(1, 1, &partition)?;
    let p = typicality_error_formula_paper(&grads, &partition, &plan)?;
    let c = typicality_error_corrected(&grads, &partition, &plan)?;
    let e = enumerate_error(&grads, &Scheme::Stratified { partition, plan })?;
    let divergence = CheckItem::asserted(
        "printed_formula_divergence_case",
        (p - 3.5).abs() <= EXACT && (c - 2.5).abs() <= EXACT && (e - 2.5).abs() <= EXACT,
        format!("printed={p} corrected={c} enumerated={e}"),
        "H {3 5} L {3 -3} reference 2; expected 3.5 / 2.5 / 2.5",
    );

    let inst = fixtures::random_stratified(&mut r, 6, 3);
    let scheme = Scheme::Stratified {
        partition: inst.partition.clone(),
        plan: inst.plan,
    };
    let exact = enumerate_error(&inst.grads, &scheme)?;
    let mc = monte_carlo_error(&inst.grads, &scheme, 20_000, seed)?;
    let z = (mc.estimate - exact).abs() / mc.standard_error.max(1e-300);
    let monte_carlo = CheckItem::asserted(
        "monte_carlo_vs_enumeration",
        z <= 4.0 || (mc.estimate - exact).abs() <= EXACT,
        format!("z={z:.3}"),
        format!("estimate {} vs exact {} over {} draws", sci(mc.estimate), sci(exact), mc.draws),
    );
    Ok(vec![corrected, zero_sum, divergence, monte_carlo])
}

fn small_regression(count: usize, seed: u64) -> typsgd_core::Result<Dataset> {
    ClusteredRegression {
        count,
        centers: array![[0.0, 0.0]],
        weights: vec![1.0],
        sigmas: vec![1.5],
        label_noise: vec![1.0],
        true_weights: vec![1.0, -1.0, 0.5],
        decorrelate_noise: false,
    }
    .generate(seed)
}

fn recursion(seed: u64) -> typsgd_core::Result<Vec<CheckItem>> {
    let data = small_regression(8, seed)?;
    let model = QuadraticModel::fitted(&data)?;
    let partition = Partition::from_strata(vec![0, 1, 2], vec![3, 4, 5, 6, 7])?;
    let plan = BatchPlan::new(1, 1, &partition)?;
    let samplers = [Sampler::Srs { n_total: 8, m: 2 }, Sampler::typicality(partition, plan)?];
    let mut steps = 0;
    let mut all_hold = true;
    let mut tightest = f64::INFINITY;
    for sampler in &samplers {
        let report = lemma1_recursion_check(&model, &data, sampler, vec![4.0, -4.0, 4.0], 30, Expectation::Enumerate, seed)?;
        all_hold &= report.all_hold;
        steps += report.steps.len();
        for s in &report.steps {
            tightest = tightest.min(s.rhs - s.lhs);
        }
    }
    Ok(vec![CheckItem::asserted(
        "one_step_recursion_bound",
        all_hold,
        format!("min slack {}", sci(tightest)),
        format!("N=8 m=2 eta=1/L; {steps} enumerated steps for srs and typicality"),
    )])
}

fn contraction(seed: u64) -> typsgd_core::Result<Vec<CheckItem>> {
    let data = small_regression(40, seed)?;
    let model = QuadraticModel::fitted(&data)?;
    let spec = model.constants().clone();
    let mu_l = spec.condition_ratio().expect("quadratic constants");
    let l = spec.lipschitz_l.expect("quadratic constants");
    let partition = Partition::from_strata((0..12).collect(), (12..40).collect())?;
    let plan = BatchPlan::new(12, 28, &partition)?;
    let factor = theorem1_rate_factor(&spec, &partition, &plan)?;
    let sampler = Sampler::typicality(partition, plan)?;
    let mut cfg = TrainConfig::new(200, seed, Optimizer::Sgd { lr: 1.0 / l });
    cfg.theta0 = Some(vec![5.0, 5.0, -5.0]);
    let trace = train(&model, &data, None, &sampler, &cfg)?;
    let subopt: Vec<f64> = trace.records.iter().map(|r| r.subopt.expect("known optimum")).collect();
    let worst = subopt
        .windows(2)
        .map(|w| w[1] - (1.0 - mu_l) * w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(vec![
        CheckItem::asserted(
            "full_strata_contraction",
            worst <= EXACT && (factor.factor - (1.0 - mu_l)).abs() <= 1e-12,
            sci(worst),
            format!(
                "max of J_(k+1) - (1 - mu/L) J_k over 200 steps; rate factor {} vs 1 - mu/L = {}",
                sci(factor.factor),
                sci(1.0 - mu_l)
            ),
        ),
        rate_example()?,
    ])
}

fn rate_example() -> typsgd_core::Result<CheckItem> {
    let partition = Partition::from_strata((0..40).collect(), (40..100).collect())?;
    let plan = BatchPlan::new(40, 10, &partition)?;
    let f = rate_factor(0.1, 2.0, 40, 60, &plan)?;
    Ok(CheckItem::asserted(
        "rate_factor_worked_example",
        (f.factor - 1.905).abs() <= 1e-12 && !f.m_sufficient,
        format!("factor={} m_sufficient={}", f.factor, f.m_sufficient),
        "mu/L=0.1 beta2=2 N1=40 N2=60 n1=40 n2=10; expected 1.905 and false",
    ))
}

struct ComparisonRun {
    held: usize,
    total: usize,
    alphas: Vec<f64>,
}

fn comparison_run(seed: u64, stream: u64, noise_ratio: f64, total: usize) -> typsgd_core::Result<ComparisonRun> {
    let mut r = rng::stream(seed, stream);
    let mut held = 0;
    let mut alphas = Vec::with_capacity(total);
    for _ in 0..total {
        let inst = fixtures::representative_h(&mut r, noise_ratio);
        let cmp = theorem2_compare(&inst.grads, &inst.partition, &inst.plan)?;
        held += usize::from(cmp.holds);
        alphas.push(cmp.alpha);
    }
    alphas.sort_by(f64::total_cmp);
    Ok(ComparisonRun { held, total, alphas })
}

fn representative_h_checks(seed: u64) -> typsgd_core::Result<Vec<CheckItem>> {
    let base = comparison_run(seed, 12, 1.0, 100)?;
    let heavy = comparison_run(seed, 13, 4.0, 100)?;
    let a = &base.alphas;
    let q = |p: f64| a[((a.len() - 1) as f64 * p).round() as usize];
    let share = base.held as f64 / base.total as f64;
    Ok(vec![
        CheckItem::asserted(
            "stratified_beats_srs_representative_h",
            share >= 0.95,
            format!("{}/{}", base.held, base.total),
            "L noise amplitude = |reference|; enumerated stratified error <= SRS error; need >= 95%",
        ),
        CheckItem::reported(
            "alpha_distribution_representative_h",
            format!("min={:.4} q25={:.4} median={:.4} q75={:.4} max={:.4}", q(0.0), q(0.25), q(0.5), q(0.75), q(1.0)),
            "stratified / SRS expected squared error",
        ),
        CheckItem::reported(
            "stratified_beats_srs_heavy_l_noise",
            format!("{}/{}", heavy.held, heavy.total),
            "same fixture with L noise amplitude = 4 |reference|",
        ),
    ])
}

fn reported_constants() -> typsgd_core::Result<Vec<CheckItem>> {
    let grads = GradientFamily::new(array![[1.0], [3.0], [1.0], [3.0]], vec![2.0], vec![])?;
    let partition = Partition::from_strata(vec![0, 1], vec![2, 3])?;
    let plan = BatchPlan::new(1, 1, &partition)?;
    let cmp = theorem2_compare(&grads, &partition, &plan)?;
    Ok(vec![
        CheckItem::reported(
            "alpha_matched_strata_proportional",
            format!("{}", cmp.alpha),
            "H {1 3} L {1 3} reference 2 with n1=n2=1; equals (N-1)/(N-2)",
        ),
        CheckItem::reported(
            "optimal_beta",
            format!("m=1:{:.15} m=2:{:.15} m=50:{:.15}", optimal_beta(1), optimal_beta(2), optimal_beta(50)),
            "real root of the cubic in beta",
        ),
    ])
}

fn gradient_checks(seed: u64) -> typsgd_core::Result<Vec<CheckItem>> {
    let regression = small_regression(12, seed)?;
    let centers = Array2::from_shape_vec((2, 3), vec![-1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).expect("shape");
    let binary = generate_clustered(12, 3, &centers, &[0.5, 0.5], 1.0, seed)?;
    let curves = generate_pwl_curves(6, 12, 2, seed)?;
    let cases: [(&dyn Model, &Dataset); 4] = [
        (&QuadraticModel::new(3), &regression),
        (&LogisticModel::new(3), &binary),
        (&MlpModel::new(3, 5, 2), &regression),
        (&ConvEncoder::new(12, curves.target_dims()), &curves),
    ];
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (model, data) in cases {
        let check = finite_difference_check(model, data, 20, 1e-5, seed)?;
        worst = worst.max(check.max_relative_error);
        parts.push(format!("{}={}", model.kind(), sci(check.max_relative_error)));
    }
    Ok(vec![CheckItem::asserted(
        "finite_difference_gradients",
        worst <= 1e-5,
        sci(worst),
        format!("20 probes per model: {}", parts.join(" ")),
    )])
}

/// The full oracle suite, without writing anything.
pub fn run_checks(cfg: &RunConfig) -> VerifyReport {
    let seed = cfg.verify_seed();
    let mut items = Vec::new();
    items.extend(guarded("srs_formula_vs_enumeration", || srs_formula(cfg, seed)));
    items.extend(guarded("stratified_formulas", || stratified_formulas(cfg, seed)));
    items.extend(guarded("one_step_recursion_bound", || recursion(seed)));
    items.extend(guarded("full_strata_contraction", || contraction(seed)));
    items.extend(guarded("stratified_beats_srs_representative_h", || representative_h_checks(seed)));
    items.extend(guarded("reported_constants", reported_constants));
    items.extend(guarded("finite_difference_gradients", || gradient_checks(seed)));
    VerifyReport { seed, items }
}

/// Run the suite and write `verify_report.csv` and `verify_report.txt`.
/// Check failures are findings, so they come back in the report rather
/// than as an error.
pub fn cmd_verify(cfg: &RunConfig) -> CliResult<(VerifyReport, Vec<PathBuf>)> {
    cfg.validate()?;
    let report = run_checks(cfg);
    let header = cfg.header(report.seed);
    let mut out = OutputSet::open(cfg)?;
    out.write(VERIFY_CSV, &report.csv(&header))?;
    let text = report.text(&header);
    out.write(VERIFY_TEXT, &text)?;
    print!("{text}");
    Ok((report, out.commit()))
}
