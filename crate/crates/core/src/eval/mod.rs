//! Retrieval metrics, TREC file I/O, an exhaustive search oracle and the
//! training energy estimate.

mod emissions;
mod metrics;
mod trec;

pub use emissions::{estimate_energy_emissions, EnergyEstimate, HardwareProfile};
pub use metrics::{
    mrr_at_k, recall_at_k, Metric, MetricReport, Qrels, RunEntry, RunFile, SUPPORTED_METRICS,
};
pub use trec::{format_qrels, format_run, parse_qrels, parse_run, read_qrels, read_run, write_run};

use crate::error::{Error, Result};
use crate::index::{Corpus, PassageId};
use crate::scoring::{maxsim_score, TermEmbeddingMatrix};

/// Exact MaxSim against every passage, best `k` by descending score with
/// ascending id on ties.
pub fn brute_force_search(
    query: &TermEmbeddingMatrix,
    corpus: &Corpus,
    k: usize,
) -> Result<Vec<(PassageId, f64)>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    let mut ranked = corpus
        .iter()
        .map(|(&pid, passage)| Ok((pid, maxsim_score(query, passage)?)))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}
