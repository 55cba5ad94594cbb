use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use typsgd_core::data::format_real;
use typsgd_core::optimize::TrainRecord;
use typsgd_core::TrainTrace;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::{OutputSet, COMPARISON_FILE, LOSS_PLOT, PAIRED_FILE, SUMMARY_FILE, TRACE_DIR};
use crate::plot;

/// One training run.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub seed: u64,
    pub sampler: String,
    pub optimizer: String,
    /// `None` when the run never reached the threshold.
    pub iterations_to_threshold: Option<usize>,
    pub budget: usize,
    pub final_train_loss: f64,
    pub final_subopt: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub final_alpha: Option<f64>,
}

impl ComparisonRow {
    /// Iterations to threshold with unfinished runs counted as `budget + 1`.
    pub fn censored_iterations(&self) -> usize {
        self.iterations_to_threshold.unwrap_or(self.budget + 1)
    }
}

/// Medians over seeds for one sampler/optimizer cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub sampler: String,
    pub optimizer: String,
    pub runs: usize,
    pub reached: usize,
    pub median_iterations: f64,
    pub median_final_train_loss: f64,
    pub median_final_subopt: Option<f64>,
    pub median_final_alpha: Option<f64>,
}

/// SRS against typicality sampling for one optimizer and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedRow {
    pub optimizer: String,
    pub seed: u64,
    pub srs_iterations: usize,
    pub typicality_iterations: usize,
}

impl PairedRow {
    pub fn winner(&self) -> &'static str {
        match self.typicality_iterations.cmp(&self.srs_iterations) {
            std::cmp::Ordering::Less => "typicality",
            std::cmp::Ordering::Greater => "srs",
            std::cmp::Ordering::Equal => "tie",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub threshold: f64,
    pub comparison: Vec<ComparisonRow>,
    pub summary: Vec<SummaryRow>,
    pub paired: Vec<PairedRow>,
}

/// Suboptimality when the model knows its optimum, training loss otherwise.
fn metric(r: &TrainRecord) -> f64 {
    r.subopt.unwrap_or(r.train_loss)
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn median_of(rows: &[&ComparisonRow], f: impl Fn(&ComparisonRow) -> Option<f64>) -> Option<f64> {
    let mut v: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
    median(&mut v)
}

fn cells(rows: &[ComparisonRow]) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for r in rows {
        let key = (r.sampler.clone(), r.optimizer.clone());
        if !out.contains(&key) {
            out.push(key);
        }
    }
    out
}

impl Report {
    pub fn from_traces(traces: &[TrainTrace], threshold: f64) -> Self {
        let comparison: Vec<ComparisonRow> = traces
            .iter()
            .map(|t| {
                let last = t.final_record();
                ComparisonRow {
                    seed: t.seed,
                    sampler: t.sampler.clone(),
                    optimizer: t.optimizer.clone(),
                    iterations_to_threshold: t.records.iter().find(|r| metric(r) <= threshold).map(|r| r.iteration),
                    budget: last.iteration,
                    final_train_loss: last.train_loss,
                    final_subopt: last.subopt,
                    final_val_loss: last.val_loss,
                    final_alpha: last.alpha,
                }
            })
            .collect();

        let summary = cells(&comparison)
            .into_iter()
            .map(|(sampler, optimizer)| {
                let rows: Vec<&ComparisonRow> = comparison
                    .iter()
                    .filter(|r| r.sampler == sampler && r.optimizer == optimizer)
                    .collect();
                SummaryRow {
                    runs: rows.len(),
                    reached: rows.iter().filter(|r| r.iterations_to_threshold.is_some()).count(),
                    median_iterations: median_of(&rows, |r| Some(r.censored_iterations() as f64)).expect("non-empty"),
                    median_final_train_loss: median_of(&rows, |r| Some(r.final_train_loss)).expect("non-empty"),
                    median_final_subopt: median_of(&rows, |r| r.final_subopt),
                    median_final_alpha: median_of(&rows, |r| r.final_alpha),
                    sampler,
                    optimizer,
                }
            })
            .collect();

        let mut paired = Vec::new();
        for srs in comparison.iter().filter(|r| r.sampler == "srs") {
            if let Some(typ) = comparison
                .iter()
                .find(|r| r.sampler == "typicality" && r.optimizer == srs.optimizer && r.seed == srs.seed)
            {
                paired.push(PairedRow {
                    optimizer: srs.optimizer.clone(),
                    seed: srs.seed,
                    srs_iterations: srs.censored_iterations(),
                    typicality_iterations: typ.censored_iterations(),
                });
            }
        }

        Self {
            threshold,
            comparison,
            summary,
            paired,
        }
    }

    pub fn cell(&self, sampler: &str, optimizer: &str) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|s| s.sampler == sampler && s.optimizer == optimizer)
    }

    pub fn comparison_csv(&self, header: &str) -> String {
        let mut s = format!("# {header}\n# threshold={}\n", format_real(self.threshold));
        s.push_str("seed,sampler,optimizer,iterations_to_threshold,budget,final_train_loss,final_subopt,final_val_loss,final_alpha\n");
        for r in &self.comparison {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.seed,
                r.sampler,
                r.optimizer,
                r.iterations_to_threshold.map(|k| k.to_string()).unwrap_or_default(),
                r.budget,
                format_real(r.final_train_loss),
                opt(r.final_subopt),
                opt(r.final_val_loss),
                opt(r.final_alpha)
            );
        }
        s
    }

    pub fn summary_csv(&self, header: &str) -> String {
        let mut s = format!("# {header}\n# threshold={}; unfinished runs count as budget + 1\n", format_real(self.threshold));
        s.push_str("sampler,optimizer,runs,reached,median_iterations,median_final_train_loss,median_final_subopt,median_final_alpha\n");
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.sampler,
                r.optimizer,
                r.runs,
                r.reached,
                format_real(r.median_iterations),
                format_real(r.median_final_train_loss),
                opt(r.median_final_subopt),
                opt(r.median_final_alpha)
            );
        }
        s
    }

    pub fn paired_csv(&self, header: &str) -> String {
        let mut s = format!("# {header}\n");
        s.push_str("optimizer,seed,srs_iterations,typicality_iterations,winner\n");
        for r in &self.paired {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.optimizer,
                r.seed,
                r.srs_iterations,
                r.typicality_iterations,
                r.winner()
            );
        }
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(format_real).unwrap_or_default()
}

/// Median metric per evaluation point for each sampler/optimizer cell.
pub fn loss_curves_svg(traces: &[TrainTrace]) -> String {
    let mut keys: Vec<(String, String)> = Vec::new();
    for t in traces {
        let key = (t.sampler.clone(), t.optimizer.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let uses_subopt = traces.iter().all(|t| t.records.iter().all(|r| r.subopt.is_some()));
    let series: Vec<(String, Vec<(f64, f64)>)> = keys
        .iter()
        .map(|(sampler, optimizer)| {
            let runs: Vec<&TrainTrace> = traces
                .iter()
                .filter(|t| &t.sampler == sampler && &t.optimizer == optimizer)
                .collect();
            let len = runs.iter().map(|t| t.records.len()).min().unwrap_or(0);
            let pts = (0..len)
                .map(|k| {
                    let mut v: Vec<f64> = runs.iter().map(|t| metric(&t.records[k])).collect();
                    (runs[0].records[k].iteration as f64, median(&mut v).expect("runs exist"))
                })
                .collect();
            (format!("{sampler}+{optimizer}"), pts)
        })
        .collect();
    let label = if uses_subopt { "median suboptimality" } else { "median training loss" };
    plot::line_chart("Training curves", "iteration", label, &series, true)
}

fn parse_opt(cell: &str, path: &Path, line: usize) -> CliResult<Option<f64>> {
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse::<f64>().map(Some).map_err(|_| bad_trace(path, line, format!("not a number: {cell:?}")))
}

fn bad_trace(path: &Path, line: usize, msg: String) -> CliError {
    CliError::Core(typsgd_core::Error::Format(format!("{}:{}: {msg}", path.display(), line + 1)))
}

/// Read a trace file written by `train`. The final parameters are not
/// stored, so `final_theta` comes back empty.
pub fn read_trace(path: &Path) -> CliResult<TrainTrace> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut records = Vec::new();
    let mut ident: Option<(String, String, u64)> = None;
    let mut header_seen = false;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            if line.trim() != TrainTrace::CSV_HEADER {
                return Err(bad_trace(path, i, format!("unexpected header {line:?}")));
            }
            header_seen = true;
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 8 {
            return Err(bad_trace(path, i, format!("expected 8 columns, got {}", cells.len())));
        }
        let iteration = cells[0]
            .parse()
            .map_err(|_| bad_trace(path, i, format!("bad iteration {:?}", cells[0])))?;
        let train_loss = parse_opt(cells[1], path, i)?.ok_or_else(|| bad_trace(path, i, "missing train_loss".into()))?;
        let seed = cells[6]
            .parse()
            .map_err(|_| bad_trace(path, i, format!("bad seed {:?}", cells[6])))?;
        ident.get_or_insert_with(|| (cells[4].to_string(), cells[5].to_string(), seed));
        records.push(TrainRecord {
            iteration,
            train_loss,
            val_loss: parse_opt(cells[2], path, i)?,
            subopt: parse_opt(cells[3], path, i)?,
            alpha: parse_opt(cells[7], path, i)?,
            wall_seconds: 0.0,
        });
    }
    let (sampler, optimizer, seed) = ident.ok_or_else(|| bad_trace(path, 0, "no records".into()))?;
    Ok(TrainTrace {
        sampler,
        optimizer,
        seed,
        records,
        final_theta: Vec::new(),
    })
}

pub(crate) fn write_report(cfg: &RunConfig, traces: &[TrainTrace], out: &mut OutputSet) -> CliResult<Report> {
    let report = Report::from_traces(traces, cfg.train.threshold);
    let header = cfg.header(cfg.base_seed());
    out.write(COMPARISON_FILE, &report.comparison_csv(&header))?;
    out.write(SUMMARY_FILE, &report.summary_csv(&header))?;
    out.write(PAIRED_FILE, &report.paired_csv(&header))?;
    out.write(LOSS_PLOT, &loss_curves_svg(traces))?;
    Ok(report)
}

pub(crate) fn print_summary(report: &Report) {
    for s in &report.summary {
        println!(
            "  {:<10} {:<5} runs={} reached={} median_iterations={} median_final_loss={:.6e}",
            s.sampler, s.optimizer, s.runs, s.reached, s.median_iterations, s.median_final_train_loss
        );
    }
}

/// Rebuild the comparison tables and loss plot from `traces/*.csv`.
pub fn cmd_report(cfg: &RunConfig) -> CliResult<(Report, Vec<PathBuf>)> {
    cfg.validate()?;
    let dir = cfg.run.out.join(TRACE_DIR);
    let entries = fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::io(
            &dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no trace files (run `train` first)"),
        ));
    }
    let traces = paths.iter().map(|p| read_trace(p)).collect::<CliResult<Vec<_>>>()?;
    let mut out = OutputSet::open(cfg)?;
    let report = write_report(cfg, &traces, &mut out)?;
    println!("report: {} traces", traces.len());
    print_summary(&report);
    Ok((report, out.commit()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(sampler: &str, seed: u64, metric: &[f64]) -> TrainTrace {
        TrainTrace {
            sampler: sampler.into(),
            optimizer: "sgd".into(),
            seed,
            records: metric
                .iter()
                .enumerate()
                .map(|(k, &v)| TrainRecord {
                    iteration: k,
                    train_loss: v + 1.0,
                    val_loss: None,
                    subopt: Some(v),
                    alpha: Some(0.5),
                    wall_seconds: 0.0,
                })
                .collect(),
            final_theta: vec![],
        }
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn censored_runs_count_as_budget_plus_one() {
        let traces = [
            trace("srs", 0, &[1.0, 0.5, 0.2]),
            trace("typicality", 0, &[1.0, 0.05, 0.01]),
            trace("srs", 1, &[1.0, 0.09, 0.01]),
            trace("typicality", 1, &[1.0, 0.2, 0.08]),
        ];
        let r = Report::from_traces(&traces, 0.1);
        assert_eq!(r.comparison[0].censored_iterations(), 3);
        assert_eq!(r.cell("srs", "sgd").unwrap().median_iterations, 2.0);
        assert_eq!(r.cell("typicality", "sgd").unwrap().median_iterations, 1.5);
        assert_eq!(r.paired.iter().map(PairedRow::winner).collect::<Vec<_>>(), ["typicality", "srs"]);
    }

    #[test]
    fn traces_round_trip_through_files() {
        let t = trace("typicality", 7, &[1.0, 0.25]);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("t.csv");
        let mut buf = format!("# header\n{}\n", TrainTrace::CSV_HEADER).into_bytes();
        t.write_csv_rows(&mut buf).unwrap();
        fs::write(&path, buf).unwrap();
        assert_eq!(read_trace(&path).unwrap(), t);
    }
}
