//! Inputs shared by the benchmarks.

use ndarray::Array2;
use typsgd_core::data::ClusteredRegression;
use typsgd_core::{Dataset, GradientFamily, Partition};

/// The two-cluster regression benchmark at `count` samples.
pub fn regression(count: usize) -> Dataset {
    ClusteredRegression::two_cluster_benchmark(count)
        .generate(7)
        .expect("benchmark parameters are valid")
}

/// A gradient family of `n` rows in `d` dimensions.
pub fn family(n: usize, d: usize) -> GradientFamily {
    let rows = Array2::from_shape_fn((n, d), |(i, k)| ((7 * i + 3 * k + 1) as f64).sin());
    GradientFamily::with_mean_reference(rows).expect("finite rows")
}

/// First `n1` indices in H, the rest in L.
pub fn split(n: usize, n1: usize) -> Partition {
    Partition::from_strata((0..n1).collect(), (n1..n).collect()).expect("valid split")
}
