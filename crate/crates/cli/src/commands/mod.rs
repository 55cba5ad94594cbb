mod embed;
mod gen;
mod partition;
mod report;
mod train;
mod verify;

use std::path::Path;

use typsgd_core::data::load_saved_csv;
use typsgd_core::Dataset;

pub use embed::{cmd_embed, EmbedSummary};
pub use gen::{cmd_gen, GenSummary};
pub use partition::{cmd_partition, PartitionSummary};
pub use report::{cmd_report, read_trace, ComparisonRow, PairedRow, Report, SummaryRow};
pub use train::{cmd_train, TrainOutcome};
pub use verify::{cmd_verify, run_checks, CheckItem, CheckKind, VerifyReport};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::{require_file, DATASET_FILE, VALIDATION_FILE};

/// Training rows from `dataset.csv`, plus `validation.csv` when present.
pub(crate) fn load_data(cfg: &RunConfig) -> CliResult<(Dataset, Option<Dataset>)> {
    let path = cfg.run.out.join(DATASET_FILE);
    require_file(&path, "dataset (run `gen` first)")?;
    let train = load(&path)?;
    let val_path = cfg.run.out.join(VALIDATION_FILE);
    let val = if val_path.is_file() { Some(load(&val_path)?) } else { None };
    Ok((train, val))
}

fn load(path: &Path) -> CliResult<Dataset> {
    load_saved_csv(path).map_err(|e| CliError::from(e).context(format!("reading {}", path.display())))
}
