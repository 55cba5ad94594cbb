use std::path::PathBuf;

use rayon::prelude::*;
use typsgd_core::density::load_partition;
use typsgd_core::models::{ConvEncoder, LogisticModel, MlpModel, QuadraticModel};
use typsgd_core::optimize::train;
use typsgd_core::sampling::default_plan;
use typsgd_core::{BatchPlan, Dataset, Model, ModelKind, Optimizer, Partition, Sampler, TrainConfig, TrainTrace};

use super::load_data;
use super::report::{print_summary, write_report, Report};
use crate::config::{Eta, N1Policy, N1Rule, OptimizerKind, RunConfig, SamplerKind};
use crate::error::{usage, CliError, CliResult};
use crate::output::{require_file, OutputSet, PARTITION_FILE, TRACE_DIR};

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: Report,
    pub traces: Vec<TrainTrace>,
    pub plan: Option<BatchPlan>,
    pub files: Vec<PathBuf>,
}

pub(crate) fn build_model(cfg: &RunConfig, data: &Dataset) -> CliResult<Box<dyn Model>> {
    let d = data.dims();
    let t = data.target_dims();
    Ok(match cfg.train.model {
        ModelKind::Quadratic => Box::new(QuadraticModel::fitted(data)?),
        ModelKind::Logistic => Box::new(LogisticModel::new(d)),
        ModelKind::Mlp => Box::new(MlpModel::new(d, cfg.train.hidden, t.max(1))),
        ModelKind::Conv => Box::new(ConvEncoder::new(d, t.max(1))),
    })
}

pub(crate) fn batch_plan(cfg: &RunConfig, partition: &Partition) -> CliResult<BatchPlan> {
    let m = cfg.train.m;
    let plan = match cfg.train.n1 {
        N1Policy::Count(n1) => {
            if n1 >= m {
                return usage(format!("train.n1 = {n1} must be below train.m = {m}"));
            }
            BatchPlan::new(n1, m - n1, partition)?
        }
        N1Policy::Rule(N1Rule::Default) => default_plan(m, partition)?,
        N1Policy::Rule(N1Rule::Proportional) => {
            if m < 2 {
                return usage("proportional allocation needs m >= 2");
            }
            let n1 = ((m * partition.n1()) as f64 / partition.len() as f64).round() as usize;
            let n1 = n1.clamp(1, m - 1);
            BatchPlan::new(n1, m - n1, partition)?
        }
    };
    Ok(plan)
}

fn optimizer(cfg: &RunConfig, kind: OptimizerKind, model: &dyn Model) -> CliResult<Optimizer> {
    Ok(match kind {
        OptimizerKind::Adam => Optimizer::adam(cfg.train.adam_lr),
        OptimizerKind::Sgd => match cfg.train.eta {
            Eta::Value(lr) => Optimizer::Sgd { lr },
            Eta::Rule(_) => match model.spec().lipschitz_l {
                Some(l) => Optimizer::Sgd { lr: 1.0 / l },
                None => {
                    return usage(format!(
                        "eta = \"1/L\" needs a known smoothness constant; the {} model has none, set train.eta to a number",
                        model.kind()
                    ))
                }
            },
        },
    })
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    sampler: SamplerKind,
    optimizer: OptimizerKind,
    seed: u64,
}

impl Cell {
    fn file_name(&self) -> String {
        let s = match self.sampler {
            SamplerKind::Srs => "srs",
            SamplerKind::Typicality => "typicality",
        };
        let o = match self.optimizer {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        };
        format!("{s}_{o}_seed{}.csv", self.seed)
    }
}

/// Every sampler/optimizer pair for every seed, run concurrently on
/// `run.workers` threads. Writes one trace per run, then the comparison
/// tables and loss plot.
pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let (data, validation) = load_data(cfg)?;
    let model = build_model(cfg, &data)?;
    if cfg.train.m > data.len() {
        return usage(format!("train.m = {} exceeds N = {}", cfg.train.m, data.len()));
    }

    let needs_partition = cfg.train.samplers.contains(&SamplerKind::Typicality) || cfg.train.alpha;
    let partition_path = cfg.run.out.join(PARTITION_FILE);
    let strata = if needs_partition {
        if cfg.train.samplers.contains(&SamplerKind::Typicality) {
            require_file(&partition_path, "partition (run `partition` first)")?;
        }
        if partition_path.is_file() {
            let (p, _) = load_partition(&partition_path)?;
            if p.len() != data.len() {
                return usage(format!(
                    "partition covers {} samples, dataset has {}; rerun `partition`",
                    p.len(),
                    data.len()
                ));
            }
            let plan = batch_plan(cfg, &p)?;
            Some((p, plan))
        } else {
            None
        }
    } else {
        None
    };

    let mut cells = Vec::new();
    for &optimizer in &cfg.train.optimizers {
        for &sampler in &cfg.train.samplers {
            for &seed in &cfg.run.seeds {
                cells.push(Cell { sampler, optimizer, seed });
            }
        }
    }

    let mut out = OutputSet::open(cfg)?;
    let paths = cells
        .iter()
        .map(|c| out.reserve(PathBuf::from(TRACE_DIR).join(c.file_name())))
        .collect::<CliResult<Vec<_>>>()?;

    let run_one = |cell: &Cell, path: &PathBuf| -> CliResult<TrainTrace> {
        let sampler = match cell.sampler {
            SamplerKind::Srs => Sampler::Srs {
                n_total: data.len(),
                m: cfg.train.m,
            },
            SamplerKind::Typicality => {
                let (p, plan) = strata.clone().expect("partition loaded for typicality runs");
                Sampler::typicality(p, plan)?
            }
        };
        let mut tc = TrainConfig::new(cfg.train.iterations, cell.seed, optimizer(cfg, cell.optimizer, model.as_ref())?);
        tc.eval_every = cfg.train.eval_every;
        if cfg.train.alpha {
            tc.alpha_probe = strata.clone();
        }
        let trace = train(model.as_ref(), &data, validation.as_ref(), &sampler, &tc)?;
        let mut buf = format!("# {}\n{}\n", cfg.header(cell.seed), TrainTrace::CSV_HEADER).into_bytes();
        trace.write_csv_rows(&mut buf)?;
        crate::output::write_file(path, std::str::from_utf8(&buf).expect("UTF-8"))?;
        Ok(trace)
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.workers)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", cfg.run.workers)))?;
    let results: Vec<CliResult<TrainTrace>> = pool.install(|| {
        cells
            .par_iter()
            .zip(paths.par_iter())
            .map(|(cell, path)| {
                run_one(cell, path).map_err(|e| {
                    e.context(format!(
                        "run sampler={:?} optimizer={:?} seed={}",
                        cell.sampler, cell.optimizer, cell.seed
                    ))
                })
            })
            .collect()
    });
    let traces = results.into_iter().collect::<CliResult<Vec<_>>>()?;

    let report = write_report(cfg, &traces, &mut out)?;
    println!(
        "train: {} runs, model={}, m={}{}",
        traces.len(),
        cfg.train.model,
        cfg.train.m,
        strata
            .as_ref()
            .map(|(p, plan)| format!(", N1={} n1={} n2={} beta={:.4}", p.n1(), plan.n1, plan.n2, plan.beta))
            .unwrap_or_default()
    );
    print_summary(&report);
    Ok(TrainOutcome {
        report,
        traces,
        plan: strata.map(|(_, plan)| plan),
        files: out.commit(),
    })
}
