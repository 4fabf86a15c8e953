use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{CompressedIndex, PassageId};
use crate::error::{Error, Result};
use crate::scoring::{cosine_unchecked, maxsim_score, TermEmbeddingMatrix};

pub const DEFAULT_CANDIDATE_K: usize = 1000;

/// Contribution of a query term that fetched no embedding of a candidate
/// passage. Cosine never falls below -1, so the approximate score stays a
/// lower bound of the exact MaxSim.
pub const MISSING_TERM_SCORE: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchParams {
    pub n_probe: usize,
    pub candidate_k: usize,
    pub final_k: usize,
}

impl Default for SearchParams {
    fn default() -> Self {
        SearchParams {
            n_probe: 4,
            candidate_k: DEFAULT_CANDIDATE_K,
            final_k: 10,
        }
    }
}

impl SearchParams {
    pub fn validate(&self, index: &CompressedIndex) -> Result<()> {
        let c = index.centroids().count();
        if self.n_probe == 0 || self.n_probe > c {
            return Err(Error::InvalidConfig(format!(
                "n_probe must be in 1..={c}, got {}",
                self.n_probe
            )));
        }
        if self.final_k == 0 || self.final_k > self.candidate_k {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= final_k <= candidate_k, got final_k={} candidate_k={}",
                self.final_k, self.candidate_k
            )));
        }
        Ok(())
    }
}

/// Descending score, ascending id on ties.
pub(crate) fn sort_ranked(ranked: &mut [(PassageId, f64)]) {
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

fn check_query(query: &TermEmbeddingMatrix, index: &CompressedIndex) -> Result<()> {
    if query.dim() != index.dim() {
        return Err(Error::dim(index.dim(), query.dim()));
    }
    Ok(())
}

/// First-stage scores from the embeddings under each term's probed centroids.
///
/// Per passage and query term the best cosine over fetched embeddings is
/// kept; terms that fetched nothing for the passage add
/// [`MISSING_TERM_SCORE`]. Returns the top `candidate_k` passages.
pub fn approximate_candidates(
    query: &TermEmbeddingMatrix,
    index: &CompressedIndex,
    params: &SearchParams,
) -> Result<Vec<(PassageId, f64)>> {
    check_query(query, index)?;
    params.validate(index)?;
    let dim = index.dim();
    let terms = query.rows();
    let mut best: HashMap<usize, Vec<f64>> = HashMap::new();
    let mut code = vec![0u8; dim];
    let mut v = vec![0.0; dim];
    for (t, q) in query.iter_rows().enumerate() {
        for c in index.centroids().nearest_k(q, params.n_probe) {
            for &emb in &index.inverted_lists()[c] {
                let emb = emb as usize;
                index.decompress_embedding(emb, &mut code, &mut v);
                let s = cosine_unchecked(q, &v);
                let slot = index.passage_slot_of(emb);
                let row = best
                    .entry(slot)
                    .or_insert_with(|| vec![f64::NEG_INFINITY; terms]);
                if s > row[t] {
                    row[t] = s;
                }
            }
        }
    }
    let mut ranked: Vec<(PassageId, f64)> = best
        .into_iter()
        .map(|(slot, row)| {
            let score = row
                .iter()
                .map(|&s| if s == f64::NEG_INFINITY { MISSING_TERM_SCORE } else { s })
                .sum();
            (index.passage_ids()[slot], score)
        })
        .collect();
    sort_ranked(&mut ranked);
    ranked.truncate(params.candidate_k);
    Ok(ranked)
}

/// Exact MaxSim over every decompressed embedding of each candidate.
pub fn exact_rerank(
    query: &TermEmbeddingMatrix,
    candidates: &[PassageId],
    index: &CompressedIndex,
) -> Result<Vec<(PassageId, f64)>> {
    check_query(query, index)?;
    let mut ranked = candidates
        .iter()
        .map(|&pid| {
            let passage = index.decompress_passage(pid)?;
            Ok((pid, maxsim_score(query, &passage)?))
        })
        .collect::<Result<Vec<_>>>()?;
    sort_ranked(&mut ranked);
    Ok(ranked)
}

/// Approximate candidate generation followed by exact re-ranking.
pub fn search(
    query: &TermEmbeddingMatrix,
    index: &CompressedIndex,
    params: &SearchParams,
) -> Result<Vec<(PassageId, f64)>> {
    let candidates = approximate_candidates(query, index, params)?;
    let ids: Vec<PassageId> = candidates.into_iter().map(|(pid, _)| pid).collect();
    let mut ranked = exact_rerank(query, &ids, index)?;
    ranked.truncate(params.final_k);
    Ok(ranked)
}
