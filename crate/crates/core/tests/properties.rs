use ndarray::Array2;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

use typsgd_core::analysis::{
    enumerate_error, fixtures, srs_error_formula, typicality_error_corrected, typicality_error_formula_paper,
};
use typsgd_core::data::{generate_pwl_curves, load_saved_csv, rebuild_pwl_curve, save_csv};
use typsgd_core::density::{build_partition, kde_at, kde_densities};
use typsgd_core::embedding::tsne_embed;
use typsgd_core::models::{full_gradient, quadratic_constants, QuadraticModel};
use typsgd_core::rng;
use typsgd_core::sampling::typicality_batch;
use typsgd_core::{BandwidthRule, BatchPlan, Dataset, DensityMap, Embedding, GradientFamily, Model, Partition, Scheme, TsneConfig};

fn normal(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn srs_formula_equals_enumeration(seed in any::<u64>(), m_frac in 0.0f64..1.0) {
        let mut r = rng::seeded(seed);
        let g = fixtures::random_family(&mut r, 12, 3);
        let m = 1 + (m_frac * g.len() as f64) as usize;
        let m = m.min(g.len());
        let f = srs_error_formula(&g, m).unwrap();
        let e = enumerate_error(&g, &Scheme::Srs { m }).unwrap();
        prop_assert!(close(f, e, 1e-9), "formula {f} vs enumeration {e}");
    }

    #[test]
    fn corrected_identity_equals_enumeration(seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let inst = fixtures::random_stratified(&mut r, 6, 3);
        let scheme = Scheme::Stratified { partition: inst.partition.clone(), plan: inst.plan };
        let c = typicality_error_corrected(&inst.grads, &inst.partition, &inst.plan).unwrap();
        let e = enumerate_error(&inst.grads, &scheme).unwrap();
        prop_assert!(close(c, e, 1e-9), "corrected {c} vs enumeration {e}");
    }

    #[test]
    fn printed_form_is_exact_for_zero_sum_strata(seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let inst = fixtures::zero_sum_strata(&mut r, 6, 3);
        let scheme = Scheme::Stratified { partition: inst.partition.clone(), plan: inst.plan };
        let p = typicality_error_formula_paper(&inst.grads, &inst.partition, &inst.plan).unwrap();
        let c = typicality_error_corrected(&inst.grads, &inst.partition, &inst.plan).unwrap();
        let e = enumerate_error(&inst.grads, &scheme).unwrap();
        prop_assert!(close(p, e, 1e-9) && close(c, e, 1e-9), "{p} {c} {e}");
    }

    #[test]
    fn full_srs_batch_error_is_mean_offset(seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let mut g = fixtures::random_family(&mut r, 10, 3);
        g.reference.iter_mut().for_each(|v| *v += 0.5);
        let n = g.len();
        let offset: f64 = g.mean().iter().zip(&g.reference).map(|(a, b)| (a - b).powi(2)).sum();
        let e = enumerate_error(&g, &Scheme::Srs { m: n }).unwrap();
        prop_assert!(close(e, offset, 1e-12), "{e} vs {offset}");
    }

    #[test]
    fn partitions_split_by_density(densities in prop::collection::vec(0.001f64..10.0, 4..60), gamma in 0.05f64..0.79) {
        let n = densities.len();
        let n1 = (n as f64 * gamma).round() as usize;
        prop_assume!(n1 >= 1 && n1 < n);
        let map = DensityMap { densities: densities.clone(), bandwidth: [[1.0, 0.0], [0.0, 1.0]], warnings: vec![] };
        let p = build_partition(&map, gamma).unwrap();
        prop_assert_eq!(p.n1(), n1);
        prop_assert_eq!(p.n1() + p.n2(), n);
        let mut all: Vec<usize> = p.h().iter().chain(p.l()).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let min_h = p.h().iter().map(|&i| densities[i]).fold(f64::INFINITY, f64::min);
        let max_l = p.l().iter().map(|&i| densities[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_h >= max_l);
    }

    #[test]
    fn kde_ignores_translation(seed in any::<u64>(), dx in -50.0f64..50.0, dy in -50.0f64..50.0) {
        let mut r = rng::seeded(seed);
        let pts = Array2::from_shape_fn((40, 2), |_| normal(&mut r));
        let mut moved = pts.clone();
        moved.column_mut(0).mapv_inplace(|v| v + dx);
        moved.column_mut(1).mapv_inplace(|v| v + dy);
        let a = kde_densities(&Embedding::from_points(pts).unwrap(), BandwidthRule::Scott).unwrap();
        let b = kde_densities(&Embedding::from_points(moved).unwrap(), BandwidthRule::Scott).unwrap();
        for (x, y) in a.densities.iter().zip(&b.densities) {
            prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn typicality_batches_have_exact_composition(seed in any::<u64>(), big_n1 in 2usize..20, big_n2 in 2usize..30) {
        let p = Partition::from_strata((0..big_n1).collect(), (big_n1..big_n1 + big_n2).collect()).unwrap();
        let n2 = 1 + (seed as usize) % big_n2;
        let n1 = (n2 * big_n1).div_ceil(big_n2).min(big_n1);
        let plan = BatchPlan::new(n1, n2, &p).unwrap();
        let mut r = rng::seeded(seed);
        for _ in 0..20 {
            let b = typicality_batch(&p, &plan, &mut r).unwrap();
            let mut ids = b.indices.clone();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), plan.m);
            prop_assert_eq!(b.indices.iter().filter(|&&i| i < big_n1).count(), n1);
        }
    }

    #[test]
    fn pwl_curves_rebuild_exactly(seed in any::<u64>(), segments in 1usize..6, extra in 0usize..40) {
        let len = segments + 1 + extra;
        let d = generate_pwl_curves(5, len, segments, seed).unwrap();
        let t = d.targets().unwrap();
        for i in 0..d.len() {
            let rebuilt = rebuild_pwl_curve(t.row(i), segments, len);
            for (a, b) in rebuilt.iter().zip(d.feature_row(i)) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn csv_round_trip(seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let x = Array2::from_shape_fn((7, 3), |_| 1e3 * normal(&mut r));
        let y = Array2::from_shape_fn((7, 1), |_| normal(&mut r));
        let d = Dataset::new(x, Some(y)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_csv(&d, &path, Some("round trip")).unwrap();
        let back = load_saved_csv(&path).unwrap();
        for (a, b) in back.features().iter().zip(d.features()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        prop_assert_eq!(back.targets(), d.targets());
    }
}

fn random_regression(n: usize, p: usize, seed: u64) -> Dataset {
    let mut r = rng::seeded(seed);
    let x = Array2::from_shape_fn((n, p), |(_, j)| (1.0 + j as f64) * normal(&mut r));
    let y = Array2::from_shape_fn((n, 1), |_| normal(&mut r));
    Dataset::new(x, Some(y)).unwrap()
}

fn random_point(r: &mut rng::Rng, p: usize) -> Vec<f64> {
    (0..p).map(|_| 3.0 * normal(r)).collect()
}

#[test]
fn quadratic_constants_bound_curvature() {
    let data = random_regression(50, 3, 7);
    let spec = quadratic_constants(&data).unwrap();
    let (l, mu) = (spec.lipschitz_l.unwrap(), spec.strong_convexity_mu.unwrap());
    let model = QuadraticModel::new(3);
    let mut r = rng::seeded(1);
    let loss = |t: &[f64]| typsgd_core::models::full_loss(&model, &data, t).unwrap();
    for _ in 0..100 {
        let (a, b) = (random_point(&mut r, 3), random_point(&mut r, 3));
        let ga = full_gradient(&model, &data, &a).unwrap();
        let gb = full_gradient(&model, &data, &b).unwrap();
        let grad_gap: f64 = ga.iter().zip(&gb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let d: Vec<f64> = b.iter().zip(&a).map(|(x, y)| x - y).collect();
        let dist_sq: f64 = d.iter().map(|v| v * v).sum();
        assert!(grad_gap <= l * dist_sq.sqrt() * (1.0 + 1e-12));
        let linear: f64 = ga.iter().zip(&d).map(|(g, v)| g * v).sum();
        assert!(loss(&b) >= loss(&a) + linear + 0.5 * mu * dist_sq - 1e-9 * (1.0 + loss(&b).abs()));
    }
}

#[test]
fn growth_bounds_hold_at_probe_points() {
    let data = random_regression(40, 2, 9);
    let spec = quadratic_constants(&data).unwrap();
    let (b1, b2) = (spec.noise_bound_beta1.unwrap(), spec.growth_bound_beta2.unwrap());
    let star = spec.exact_minimizer.clone().unwrap();
    let model = QuadraticModel::new(2);
    let scale = star.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    let mut r = rng::seeded(2);
    for radius in [0.01, 0.1, 1.0, 10.0] {
        for _ in 0..8 {
            let u: Vec<f64> = (0..2).map(|_| normal(&mut r)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            let theta: Vec<f64> = star.iter().zip(&u).map(|(s, v)| s + radius * scale * v / norm).collect();
            let fam = GradientFamily::from_model(&model, &data, &theta).unwrap();
            let full_sq: f64 = fam.reference.iter().map(|v| v * v).sum();
            let worst = fam.per_sample.rows().into_iter().map(|row| row.dot(&row)).fold(0.0, f64::max);
            assert!(worst <= b1 + b2 * full_sq, "radius {radius}: {worst} > {b1} + {b2} * {full_sq}");
        }
    }
}

#[test]
fn quadratic_model_reports_its_constants() {
    let data = random_regression(30, 2, 3);
    let fitted = QuadraticModel::fitted(&data).unwrap();
    assert_eq!(fitted.spec(), quadratic_constants(&data).unwrap());
}

#[test]
fn separated_clusters_stay_linearly_separable() {
    let centers = Array2::from_shape_vec((2, 5), vec![-10.0, 0.0, 0.0, 0.0, 0.0, 10.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let data = typsgd_core::data::generate_clustered(60, 5, &centers, &[0.5, 0.5], 1.0, 4).unwrap();
    let labels: Vec<bool> = (0..60).map(|i| data.feature_row(i)[0] > 0.0).collect();
    let cfg = TsneConfig { perplexity: 10.0, learning_rate: 50.0, seed: 4, ..TsneConfig::default() };
    let emb = tsne_embed(&data, &cfg).unwrap();
    let separable = (0..360).any(|deg| {
        let a = (deg as f64).to_radians();
        let proj: Vec<f64> = emb.points.rows().into_iter().map(|p| p[0] * a.cos() + p[1] * a.sin()).collect();
        let max_a = proj.iter().zip(&labels).filter(|(_, &l)| l).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
        let min_b = proj.iter().zip(&labels).filter(|(_, &l)| !l).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
        max_a < min_b
    });
    assert!(separable);

    let last = cfg.iterations.saturating_sub(100);
    let tail: Vec<f64> = emb.kl_trace.iter().filter(|(k, _)| *k >= last).map(|(_, v)| *v).collect();
    assert!(tail.len() >= 2);
    for w in tail.windows(2) {
        assert!(w[1] <= w[0] + 1e-3, "KL rose from {} to {}", w[0], w[1]);
    }
}

#[test]
fn kde_integrates_to_one() {
    let mut r = rng::seeded(11);
    let pts = Array2::from_shape_fn((30, 2), |_| normal(&mut r));
    let emb = Embedding::from_points(pts).unwrap();
    let bw = kde_densities(&emb, BandwidthRule::Scott).unwrap().bandwidth;
    let (lo, hi, steps) = (-12.0, 12.0, 400);
    let h = (hi - lo) / steps as f64;
    let mut total = 0.0;
    for i in 0..steps {
        for j in 0..steps {
            let at = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
            total += kde_at(&emb, bw, at) * h * h;
        }
    }
    assert!((total - 1.0).abs() < 1e-3, "integral {total}");
}
