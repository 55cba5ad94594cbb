use std::path::PathBuf;

use ndarray::Array2;
use typsgd_core::data::{
    generate_clustered_with_sigmas, generate_pwl_curves, load_csv, write_csv, ClusteredRegression,
};
use typsgd_core::Dataset;

use crate::config::{DataConfig, Generator, RunConfig};
use crate::error::{usage, CliError, CliResult};
use crate::output::{OutputSet, DATASET_FILE, VALIDATION_FILE};

#[derive(Debug, Clone, PartialEq)]
pub struct GenSummary {
    pub rows: usize,
    pub dims: usize,
    pub validation_rows: usize,
    pub generator: Generator,
    pub seed: u64,
    pub files: Vec<PathBuf>,
}

fn centers(data: &DataConfig) -> CliResult<Array2<f64>> {
    let k = data.centers.len();
    let d = data.centers.first().map_or(0, Vec::len);
    if k == 0 || d == 0 || data.centers.iter().any(|c| c.len() != d) {
        return usage("data.centers must be a non-empty list of equal-length rows");
    }
    Ok(Array2::from_shape_fn((k, d), |(i, j)| data.centers[i][j]))
}

pub(crate) fn generate(cfg: &RunConfig) -> CliResult<Dataset> {
    let data = &cfg.data;
    let seed = cfg.data_seed();
    let ds = match data.generator {
        Generator::Pwl => generate_pwl_curves(data.count, data.curve_length, data.segments, seed)?,
        Generator::Clustered => {
            let c = centers(data)?;
            generate_clustered_with_sigmas(data.count, c.ncols(), &c, &data.weights, &data.sigmas, seed)?
        }
        Generator::Regression => ClusteredRegression {
            count: data.count,
            centers: centers(data)?,
            weights: data.weights.clone(),
            sigmas: data.sigmas.clone(),
            label_noise: data.label_noise.clone(),
            true_weights: data.true_weights.clone(),
            decorrelate_noise: data.decorrelate_noise,
        }
        .generate(seed)?,
        Generator::Csv => {
            let path = data.path.as_ref().expect("validated");
            if !path.is_file() {
                return Err(CliError::io(
                    path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "input dataset not found"),
                ));
            }
            load_csv(path, data.has_header, &data.target_columns)?
        }
    };
    Ok(ds)
}

fn render(cfg: &RunConfig, ds: &Dataset) -> CliResult<String> {
    let mut buf = Vec::new();
    write_csv(ds, &mut buf, Some(&cfg.header(cfg.data_seed())))?;
    Ok(String::from_utf8(buf).expect("CSV output is UTF-8"))
}

/// Generate (or import) the dataset into `dataset.csv`, moving a holdout
/// fraction to `validation.csv`.
pub fn cmd_gen(cfg: &RunConfig) -> CliResult<GenSummary> {
    cfg.validate()?;
    let full = generate(cfg)?;
    let (train, val) = full.split_holdout(cfg.data.holdout, cfg.data_seed())?;
    let mut out = OutputSet::open(cfg)?;
    out.write(DATASET_FILE, &render(cfg, &train)?)?;
    if let Some(v) = &val {
        out.write(VALIDATION_FILE, &render(cfg, v)?)?;
    }
    let summary = GenSummary {
        rows: train.len(),
        dims: train.dims(),
        validation_rows: val.as_ref().map_or(0, Dataset::len),
        generator: cfg.data.generator,
        seed: cfg.data_seed(),
        files: out.commit(),
    };
    println!(
        "gen: N={} D={} generator={} seed={} validation={}",
        summary.rows, summary.dims, summary.generator, summary.seed, summary.validation_rows
    );
    Ok(summary)
}
