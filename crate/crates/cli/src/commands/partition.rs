use std::path::PathBuf;

use typsgd_core::density::{build_partition, kde_densities, save_partition};
use typsgd_core::{Partition, Stratum};

use super::embed::{embed_into, points};
use super::load_data;
use crate::config::RunConfig;
use crate::error::CliResult;
use crate::output::{OutputSet, PARTITION_FILE, PARTITION_PLOT};
use crate::plot;

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSummary {
    pub partition: Partition,
    pub densities: Vec<f64>,
    pub warnings: Vec<String>,
    pub files: Vec<PathBuf>,
}

/// t-SNE, KDE on the map, then the top `round(gamma N)` densities form H.
/// Writes `embedding.csv`, `partition.csv` and `partition.svg`.
pub fn cmd_partition(cfg: &RunConfig) -> CliResult<PartitionSummary> {
    cfg.validate()?;
    let (data, _) = load_data(cfg)?;
    let mut out = OutputSet::open(cfg)?;
    let emb = embed_into(cfg, &data, &mut out)?;
    let map = kde_densities(&emb, cfg.partition.bandwidth)?;
    let partition = build_partition(&map, cfg.partition.gamma)?;
    let path = out.reserve(PARTITION_FILE)?;
    save_partition(&partition, Some(&map), &path, Some(&cfg.header(cfg.embedding_seed())))?;
    let groups: Vec<usize> = partition
        .labels()
        .iter()
        .map(|s| usize::from(*s != Stratum::H))
        .collect();
    let title = format!("Strata at gamma = {}", cfg.partition.gamma);
    out.write(PARTITION_PLOT, &plot::scatter(&title, &points(&emb), &groups, &["H", "L"]))?;
    for w in &map.warnings {
        log::warn!("{w}");
    }
    println!(
        "partition: N={} N1={} N2={} gamma={}",
        partition.len(),
        partition.n1(),
        partition.n2(),
        cfg.partition.gamma
    );
    Ok(PartitionSummary {
        partition,
        densities: map.densities,
        warnings: map.warnings,
        files: out.commit(),
    })
}
