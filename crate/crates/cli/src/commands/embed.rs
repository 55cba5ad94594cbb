use std::path::PathBuf;

use typsgd_core::embedding::{save_embedding, tsne_embed};
use typsgd_core::{Dataset, Embedding};

use super::load_data;
use crate::config::RunConfig;
use crate::error::CliResult;
use crate::output::{OutputSet, EMBEDDING_FILE, EMBEDDING_PLOT};
use crate::plot;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedSummary {
    pub rows: usize,
    pub final_kl: f64,
    pub files: Vec<PathBuf>,
}

pub(crate) fn points(emb: &Embedding) -> Vec<(f64, f64)> {
    emb.points.rows().into_iter().map(|r| (r[0], r[1])).collect()
}

pub(crate) fn embed_into(cfg: &RunConfig, data: &Dataset, out: &mut OutputSet) -> CliResult<Embedding> {
    let emb = tsne_embed(data, &cfg.tsne())?;
    let path = out.reserve(EMBEDDING_FILE)?;
    save_embedding(&emb, &path, Some(&cfg.header(cfg.embedding_seed())))?;
    Ok(emb)
}

/// t-SNE map of `dataset.csv` into `embedding.csv` and a scatter plot.
pub fn cmd_embed(cfg: &RunConfig) -> CliResult<EmbedSummary> {
    cfg.validate()?;
    let (data, _) = load_data(cfg)?;
    let mut out = OutputSet::open(cfg)?;
    let emb = embed_into(cfg, &data, &mut out)?;
    let svg = plot::scatter("t-SNE embedding", &points(&emb), &vec![0; emb.len()], &[]);
    out.write(EMBEDDING_PLOT, &svg)?;
    let final_kl = emb.kl_trace.last().map_or(f64::NAN, |(_, kl)| *kl);
    println!("embed: N={} final KL={final_kl:.6}", emb.len());
    Ok(EmbedSummary {
        rows: emb.len(),
        final_kl,
        files: out.commit(),
    })
}
