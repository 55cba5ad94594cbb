//! Datasets: synthetic generators and CSV ingestion.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::rng;

/// An immutable training set: `N x D` features, optional `N x T` targets and
/// stable sample ids `0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    targets: Option<Array2<f64>>,
    ids: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, targets: Option<Array2<f64>>) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 || d == 0 {
            return invalid(format!("dataset must be non-empty, got {n}x{d}"));
        }
        if let Some((row, col)) = first_non_finite(&features) {
            return Err(Error::Numeric(format!("non-finite feature at row {row}, column {col}")));
        }
        if let Some(t) = &targets {
            if t.nrows() != n {
                return invalid(format!("targets have {} rows, features have {n}", t.nrows()));
            }
            if let Some((row, col)) = first_non_finite(t) {
                return Err(Error::Numeric(format!("non-finite target at row {row}, column {col}")));
            }
        }
        Ok(Self {
            features,
            targets,
            ids: (0..n).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        self.features.ncols()
    }

    pub fn target_dims(&self) -> usize {
        self.targets.as_ref().map_or(0, |t| t.ncols())
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn targets(&self) -> Option<&Array2<f64>> {
        self.targets.as_ref()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn feature_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn target_row(&self, i: usize) -> Option<ArrayView1<'_, f64>> {
        self.targets.as_ref().map(|t| t.row(i))
    }

    /// Rows `indices` in the given order, renumbered `0..k`.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return invalid(format!("subset index {bad} out of range for N={}", self.len()));
        }
        let features = self.features.select(Axis(0), indices);
        let targets = self.targets.as_ref().map(|t| t.select(Axis(0), indices));
        Self::new(features, targets)
    }

    /// Seed-determined holdout split. Returns `(train, validation)`; the
    /// validation part has `round(N * fraction)` rows.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Self, Option<Self>)> {
        if !(0.0..1.0).contains(&fraction) {
            return invalid(format!("holdout fraction must be in [0, 1), got {fraction}"));
        }
        let n = self.len();
        let n_val = (n as f64 * fraction).round() as usize;
        if n_val == 0 {
            return Ok((self.clone(), None));
        }
        if n_val >= n {
            return invalid("holdout leaves no training rows");
        }
        let mut rng = rng::seeded(seed);
        let mut val = index::sample(&mut rng, n, n_val).into_vec();
        val.sort_unstable();
        let mut is_val = vec![false; n];
        for &i in &val {
            is_val[i] = true;
        }
        let train: Vec<usize> = (0..n).filter(|&i| !is_val[i]).collect();
        Ok((self.subset(&train)?, Some(self.subset(&val)?)))
    }
}

fn first_non_finite(m: &Array2<f64>) -> Option<(usize, usize)> {
    m.indexed_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(idx, _)| idx)
}

/// Parameter ranges for [`generate_pwl_curves`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PwlRanges {
    pub bias: (f64, f64),
    pub slope: (f64, f64),
}

impl Default for PwlRanges {
    fn default() -> Self {
        Self {
            bias: (-1.0, 1.0),
            slope: (-1.0, 1.0),
        }
    }
}

pub fn generate_pwl_curves(
    count: usize,
    curve_length: usize,
    segment_count: usize,
    seed: u64,
) -> Result<Dataset> {
    generate_pwl_curves_with(count, curve_length, segment_count, PwlRanges::default(), seed)
}

/// One-dimensional piecewise-linear curves sampled at `curve_length` points.
///
/// Targets per row are `[bias, slope_1..slope_S, breakpoint_1..breakpoint_{S-1}]`;
/// a breakpoint `b` means the slope changes after point `b`. [`rebuild_pwl_curve`]
/// reproduces the row exactly from its targets.
pub fn generate_pwl_curves_with(
    count: usize,
    curve_length: usize,
    segment_count: usize,
    ranges: PwlRanges,
    seed: u64,
) -> Result<Dataset> {
    if count == 0 || curve_length == 0 || segment_count == 0 {
        return invalid("count, curve_length and segment_count must all be positive");
    }
    // S-1 breakpoints need S-1 distinct interior points 1..=T-2.
    if segment_count > 1 && curve_length < segment_count + 1 {
        return invalid(format!(
            "{segment_count} segments need curve_length >= {}, got {curve_length}",
            segment_count + 1
        ));
    }
    for (name, (lo, hi)) in [("bias", ranges.bias), ("slope", ranges.slope)] {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return invalid(format!("{name} range [{lo}, {hi}] is not a finite interval"));
        }
    }

    let mut rng = rng::seeded(seed);
    let target_dims = 2 * segment_count;
    let mut features = Array2::zeros((count, curve_length));
    let mut targets = Array2::zeros((count, target_dims));

    for row in 0..count {
        let bias = uniform(&mut rng, ranges.bias);
        let slopes: Vec<f64> = (0..segment_count).map(|_| uniform(&mut rng, ranges.slope)).collect();
        let mut breaks: Vec<usize> = if segment_count > 1 {
            index::sample(&mut rng, curve_length - 2, segment_count - 1)
                .into_iter()
                .map(|b| b + 1)
                .collect()
        } else {
            Vec::new()
        };
        breaks.sort_unstable();

        let mut t = targets.row_mut(row);
        t[0] = bias;
        for (k, s) in slopes.iter().enumerate() {
            t[1 + k] = *s;
        }
        for (k, b) in breaks.iter().enumerate() {
            t[1 + segment_count + k] = *b as f64;
        }
        let curve = rebuild_pwl_curve(t.view(), segment_count, curve_length);
        features.row_mut(row).assign(&curve);
    }
    Dataset::new(features, Some(targets))
}

/// Inverse of the PWL target encoding.
pub fn rebuild_pwl_curve(
    targets: ArrayView1<'_, f64>,
    segment_count: usize,
    curve_length: usize,
) -> Array1<f64> {
    let bias = targets[0];
    let slopes = targets.slice(ndarray::s![1..1 + segment_count]);
    let breaks: Vec<usize> = targets
        .slice(ndarray::s![1 + segment_count..])
        .iter()
        .map(|&b| b as usize)
        .collect();
    let mut curve = Array1::zeros(curve_length);
    let mut value = bias;
    let mut segment = 0;
    for t in 0..curve_length {
        curve[t] = value;
        // difference t -> t+1 belongs to the segment after every breakpoint <= t
        while segment < breaks.len() && breaks[segment] <= t {
            segment += 1;
        }
        value += slopes[segment];
    }
    curve
}

fn uniform(rng: &mut rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Gaussian mixture samples; targets hold the generating component index.
pub fn generate_clustered(
    count: usize,
    dims: usize,
    centers: &Array2<f64>,
    weights: &[f64],
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    let sigmas = vec![noise_sigma; centers.nrows()];
    generate_clustered_with_sigmas(count, dims, centers, weights, &sigmas, seed)
}

/// Like [`generate_clustered`] with a separate isotropic spread per component.
pub fn generate_clustered_with_sigmas(
    count: usize,
    dims: usize,
    centers: &Array2<f64>,
    weights: &[f64],
    sigmas: &[f64],
    seed: u64,
) -> Result<Dataset> {
    if count == 0 || dims == 0 {
        return invalid("count and dims must be positive");
    }
    let k = centers.nrows();
    if k == 0 || centers.ncols() != dims {
        return invalid(format!(
            "centers must be K x {dims} with K >= 1, got {}x{}",
            k,
            centers.ncols()
        ));
    }
    if weights.len() != k || sigmas.len() != k {
        return invalid(format!(
            "{k} centers but {} weights and {} sigmas",
            weights.len(),
            sigmas.len()
        ));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return invalid("weights must be nonnegative and sum to 1");
    }
    if sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
        return invalid("noise sigma must be finite and nonnegative");
    }

    let mut rng = rng::seeded(seed);
    let mut features = Array2::zeros((count, dims));
    let mut targets = Array2::zeros((count, 1));
    for row in 0..count {
        let u: f64 = rng.random();
        let component = pick_component(weights, u);
        targets[[row, 0]] = component as f64;
        for j in 0..dims {
            let z: f64 = StandardNormal.sample(&mut rng);
            features[[row, j]] = centers[[component, j]] + sigmas[component] * z;
        }
    }
    Dataset::new(features, Some(targets))
}

fn pick_component(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the last cumulative weight
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Linear-regression problem on top of a Gaussian mixture.
///
/// Each component has its own spread and label-noise level, so a component
/// can be made into a diffuse, noisy minority. Features are the mixture
/// sample with a trailing constant `1.0` column (intercept); targets are
/// `[y, component]` with `y = w . x + noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredRegression {
    pub count: usize,
    pub centers: Array2<f64>,
    pub weights: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub label_noise: Vec<f64>,
    /// Length `dims + 1`; the last entry multiplies the intercept column.
    pub true_weights: Vec<f64>,
    /// Project each component's label noise onto the orthogonal complement
    /// of that component's design columns. The noise then has exactly zero
    /// least-squares gradient at `true_weights`, so with noise-free other
    /// components `true_weights` is the exact least-squares optimum.
    pub decorrelate_noise: bool,
}

impl ClusteredRegression {
    /// The two-component benchmark: a dense, cleanly labelled majority and a
    /// broad background minority (same centre, twelve times the spread)
    /// with heavy label noise.
    pub fn two_cluster_benchmark(count: usize) -> Self {
        Self {
            count,
            centers: ndarray::array![[0.0, 0.0], [0.0, 0.0]],
            weights: vec![0.9, 0.1],
            sigmas: vec![1.0, 12.0],
            label_noise: vec![0.0, 10.0],
            true_weights: vec![1.0, -1.0, 0.5],
            decorrelate_noise: true,
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        let dims = self.centers.ncols();
        if self.true_weights.len() != dims + 1 {
            return invalid(format!(
                "true_weights must have dims + 1 = {} entries",
                dims + 1
            ));
        }
        if self.label_noise.len() != self.centers.nrows()
            || self.label_noise.iter().any(|s| !(*s >= 0.0))
        {
            return invalid("label_noise needs one nonnegative entry per component");
        }
        let mixture = generate_clustered_with_sigmas(
            self.count,
            dims,
            &self.centers,
            &self.weights,
            &self.sigmas,
            seed,
        )?;
        let component = mixture.targets().expect("mixture has targets").column(0).to_owned();
        let mut rng = rng::stream(seed, 1);
        let n = self.count;
        let mut features = Array2::ones((n, dims + 1));
        features
            .slice_mut(ndarray::s![.., ..dims])
            .assign(mixture.features());
        let mut noise: Vec<f64> = (0..n)
            .map(|i| {
                let z: f64 = StandardNormal.sample(&mut rng);
                self.label_noise[component[i] as usize] * z
            })
            .collect();
        if self.decorrelate_noise {
            for c in 0..self.centers.nrows() {
                let members: Vec<usize> = (0..n).filter(|&i| component[i] as usize == c).collect();
                if self.label_noise[c] > 0.0 {
                    decorrelate(&features, &members, &mut noise)?;
                }
            }
        }
        let mut targets = Array2::zeros((n, 2));
        for i in 0..n {
            let clean: f64 = features
                .row(i)
                .iter()
                .zip(&self.true_weights)
                .map(|(x, w)| x * w)
                .sum();
            targets[[i, 0]] = clean + noise[i];
            targets[[i, 1]] = component[i];
        }
        Dataset::new(features, Some(targets))
    }
}

/// Remove from `noise[rows]` its least-squares fit on `features[rows]`.
fn decorrelate(features: &Array2<f64>, rows: &[usize], noise: &mut [f64]) -> Result<()> {
    let p = features.ncols();
    if rows.len() <= p {
        return invalid(format!(
            "a noisy component needs more than {p} samples to decorrelate its noise, got {}",
            rows.len()
        ));
    }
    let x = DMatrix::from_fn(rows.len(), p, |r, c| features[[rows[r], c]]);
    let e = DVector::from_iterator(rows.len(), rows.iter().map(|&i| noise[i]));
    let coef = (x.transpose() * &x)
        .cholesky()
        .ok_or_else(|| Error::Rank("component design is rank deficient".into()))?
        .solve(&(x.transpose() * &e));
    let fitted = &x * coef;
    for (r, &i) in rows.iter().enumerate() {
        noise[i] -= fitted[r];
    }
    Ok(())
}

/// Read a comma-separated numeric file. Blank lines and lines starting with
/// `#` are skipped; rows are numbered from 0 after the optional header.
pub fn load_csv(path: impl AsRef<Path>, has_header: bool, target_columns: &[usize]) -> Result<Dataset> {
    let file = File::open(path)?;
    read_csv(BufReader::new(file), has_header, target_columns)
}

pub fn read_csv<R: BufRead>(reader: R, has_header: bool, target_columns: &[usize]) -> Result<Dataset> {
    let (_, rows) = read_table(reader, has_header)?;
    from_rows(&rows, target_columns)
}

fn from_rows(rows: &[Vec<f64>], target_columns: &[usize]) -> Result<Dataset> {
    let width = rows[0].len();
    if let Some(&bad) = target_columns.iter().find(|&&c| c >= width) {
        return invalid(format!("target column {bad} out of range for {width} columns"));
    }
    let feature_cols: Vec<usize> = (0..width).filter(|c| !target_columns.contains(c)).collect();
    let mut target_cols: Vec<usize> = target_columns.to_vec();
    target_cols.sort_unstable();
    target_cols.dedup();

    let n = rows.len();
    let features = Array2::from_shape_fn((n, feature_cols.len()), |(i, j)| rows[i][feature_cols[j]]);
    let targets = (!target_cols.is_empty())
        .then(|| Array2::from_shape_fn((n, target_cols.len()), |(i, j)| rows[i][target_cols[j]]));
    Dataset::new(features, targets)
}

/// Header names (if any) and numeric rows.
pub type Table = (Option<Vec<String>>, Vec<Vec<f64>>);

/// Header names (if any) and numeric rows of a CSV table.
pub fn read_table<R: BufRead>(reader: R, has_header: bool) -> Result<Table> {
    let mut header = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if has_header && header.is_none() {
            header = Some(trimmed.split(',').map(|s| s.trim().to_string()).collect());
            continue;
        }
        let row_idx = rows.len();
        let row = trimmed
            .split(',')
            .enumerate()
            .map(|(column, cell)| {
                cell.trim().parse::<f64>().map_err(|e| Error::Parse {
                    row: row_idx,
                    column,
                    message: format!("{:?}: {e}", cell.trim()),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Format(format!(
                    "row {row_idx} has {} columns, expected {}",
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format("no data rows".into()));
    }
    Ok((header, rows))
}

/// Write features then targets with a `f0..,t0..` header. `comment` lines
/// are emitted first, each prefixed with `# `.
pub fn write_csv<W: Write>(data: &Dataset, mut out: W, comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    let mut names: Vec<String> = (0..data.dims()).map(|j| format!("f{j}")).collect();
    names.extend((0..data.target_dims()).map(|j| format!("t{j}")));
    writeln!(out, "{}", names.join(","))?;
    for i in 0..data.len() {
        let mut cells: Vec<String> = data.feature_row(i).iter().map(|v| format_real(*v)).collect();
        if let Some(t) = data.target_row(i) {
            cells.extend(t.iter().map(|v| format_real(*v)));
        }
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

pub fn save_csv(data: &Dataset, path: impl AsRef<Path>, comment: Option<&str>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_csv(data, &mut out, comment)?;
    out.flush()?;
    Ok(())
}

/// Load a file written by [`save_csv`], using header names (`t*`) to find
/// the target columns.
pub fn load_saved_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = File::open(path)?;
    let (header, rows) = read_table(BufReader::new(file), true)?;
    let header = header.ok_or_else(|| Error::Format("missing header".into()))?;
    let targets: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, name)| name.starts_with('t'))
        .map(|(i, _)| i)
        .collect();
    let width = rows[0].len();
    if header.len() != width {
        return Err(Error::Format(format!("header has {} names for {width} columns", header.len())));
    }
    from_rows(&rows, &targets)
}

/// Shortest round-trip scientific notation.
pub fn format_real(v: f64) -> String {
    format!("{v:e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn consecutive_diffs(row: ArrayView1<'_, f64>) -> Vec<f64> {
        row.windows(2).into_iter().map(|w| w[1] - w[0]).collect()
    }

    #[test]
    fn single_segment_curve_is_affine() {
        let d = generate_pwl_curves(1, 4, 1, 11).unwrap();
        let diffs = consecutive_diffs(d.feature_row(0));
        assert_eq!(diffs.len(), 3);
        for w in diffs.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-15);
        }
    }

    #[test]
    fn pwl_is_deterministic() {
        let a = generate_pwl_curves(3, 64, 4, 7).unwrap();
        let b = generate_pwl_curves(3, 64, 4, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_pwl_curves(3, 64, 4, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn pwl_rows_have_at_most_segment_count_slopes() {
        let d = generate_pwl_curves(100, 32, 3, 1).unwrap();
        for i in 0..d.len() {
            let mut distinct: Vec<f64> = Vec::new();
            for diff in consecutive_diffs(d.feature_row(i)) {
                if !distinct.iter().any(|s| (s - diff).abs() <= 1e-9) {
                    distinct.push(diff);
                }
            }
            assert!(distinct.len() <= 3, "row {i} has {} slopes", distinct.len());
        }
    }

    #[test]
    fn pwl_reconstructs_from_targets() {
        let d = generate_pwl_curves(50, 40, 5, 3).unwrap();
        let t = d.targets().unwrap();
        for i in 0..d.len() {
            let curve = rebuild_pwl_curve(t.row(i), 5, 40);
            let err = (&curve - &d.feature_row(i)).mapv(f64::abs).fold(0.0, |a: f64, b| a.max(*b));
            assert!(err <= 1e-9);
        }
    }

    #[test]
    fn pwl_rejects_bad_sizes() {
        assert!(matches!(generate_pwl_curves(0, 4, 1, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(generate_pwl_curves(1, 0, 1, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(generate_pwl_curves(1, 4, 4, 0), Err(Error::InvalidArgument(_))));
        assert!(generate_pwl_curves(1, 5, 4, 0).is_ok());
    }

    #[test]
    fn degenerate_mixture_is_constant() {
        let d = generate_clustered(10, 2, &array![[0.0, 0.0]], &[1.0], 0.0, 5).unwrap();
        assert!(d.features().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mixture_weights_are_respected() {
        let centers = array![[-5.0, 0.0], [5.0, 0.0]];
        let d = generate_clustered(1000, 2, &centers, &[0.9, 0.1], 0.5, 3).unwrap();
        let zero = d.targets().unwrap().column(0).iter().filter(|c| **c == 0.0).count();
        let frac = zero as f64 / 1000.0;
        assert!((0.87..=0.93).contains(&frac), "fraction {frac}");
        let again = generate_clustered(1000, 2, &centers, &[0.9, 0.1], 0.5, 3).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn mixture_rejects_mismatched_shapes() {
        let centers = array![[0.0, 0.0], [1.0, 1.0]];
        assert!(generate_clustered(5, 2, &centers, &[1.0], 0.1, 0).is_err());
        assert!(generate_clustered(5, 3, &centers, &[0.5, 0.5], 0.1, 0).is_err());
        assert!(generate_clustered(5, 2, &centers, &[0.5, 0.4], 0.1, 0).is_err());
    }

    #[test]
    fn csv_without_targets() {
        let d = read_csv("1,2\n3,4\n".as_bytes(), false, &[]).unwrap();
        assert_eq!(d.features(), &array![[1.0, 2.0], [3.0, 4.0]]);
        assert!(d.targets().is_none());
    }

    #[test]
    fn csv_with_header_and_targets() {
        let d = read_csv("a,b\n1,2\n3,4\n".as_bytes(), true, &[1]).unwrap();
        assert_eq!(d.features(), &array![[1.0], [3.0]]);
        assert_eq!(d.targets().unwrap(), &array![[2.0], [4.0]]);
    }

    #[test]
    fn csv_parse_error_names_location() {
        match read_csv("1,x\n".as_bytes(), false, &[]) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (0, 1)),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_ragged_rows_are_format_errors() {
        assert!(matches!(read_csv("1,2\n3\n".as_bytes(), false, &[]), Err(Error::Format(_))));
    }

    #[test]
    fn holdout_split_sizes() {
        let d = generate_pwl_curves(20, 8, 2, 0).unwrap();
        let (train, val) = d.split_holdout(0.1, 4).unwrap();
        assert_eq!(train.len(), 18);
        assert_eq!(val.unwrap().len(), 2);
        let (all, none) = d.split_holdout(0.0, 4).unwrap();
        assert_eq!(all.len(), 20);
        assert!(none.is_none());
    }

    #[test]
    fn regression_benchmark_shape() {
        let d = ClusteredRegression::two_cluster_benchmark(200).generate(1).unwrap();
        assert_eq!(d.dims(), 3);
        assert!(d.features().column(2).iter().all(|v| *v == 1.0));
        assert_eq!(d.target_dims(), 2);
    }

    #[test]
    fn decorrelated_noise_leaves_true_weights_optimal() {
        let bench = ClusteredRegression::two_cluster_benchmark(300);
        let d = bench.generate(5).unwrap();
        let y = d.targets().unwrap().column(0);
        let mut grad = [0.0; 3];
        for i in 0..d.len() {
            let x = d.feature_row(i);
            let r: f64 = x.iter().zip(&bench.true_weights).map(|(a, w)| a * w).sum::<f64>() - y[i];
            for k in 0..3 {
                grad[k] += r * x[k];
            }
        }
        assert!(grad.iter().all(|g| g.abs() < 1e-9), "{grad:?}");
    }
}
