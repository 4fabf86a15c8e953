//! Centroid + residual compressed inverted-file index over term embeddings.
//!
//! Build: k-means centroids on a passage sample, a 2-bit residual codec fit
//! on the sample's residuals, then every embedding is stored as
//! `(nearest centroid id, residual bucket codes)` and filed under its
//! centroid's inverted list.
//!
//! Search: each query term probes its `n_probe` nearest centroids, the
//! fetched embeddings are decompressed and a per-passage approximate MaxSim
//! is accumulated; the best `candidate_k` passages are re-scored with exact
//! MaxSim over all of their decompressed embeddings.

mod bitpack;
mod codec;
mod kmeans;
mod search;
mod storage;

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bitpack::PackedCodes;
pub use codec::{fit_codec, ResidualCodec, BUCKETS, RESIDUAL_BITS};
pub use kmeans::{
    centroid_count, select_centroids, CentroidSelection, CentroidTable, CONVERGENCE_TOLERANCE,
    MAX_LLOYD_ITERATIONS,
};
pub use search::{
    approximate_candidates, exact_rerank, search, SearchParams, DEFAULT_CANDIDATE_K,
    MISSING_TERM_SCORE,
};
pub use storage::{
    read_codes_file, write_codes_file, CODES_HEADER_BYTES, INDEX_FILES, INDEX_VERSION,
};

use crate::error::{Error, Result};
use crate::scoring::TermEmbeddingMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PassageId(pub u32);

impl fmt::Display for PassageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Passage id → term embeddings. Ordered so every traversal is deterministic.
pub type Corpus = BTreeMap<PassageId, TermEmbeddingMatrix>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexConfig {
    pub seed: u64,
    /// Passages drawn for centroid and codec fitting.
    pub sample_passages: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            seed: 0,
            sample_passages: 256,
        }
    }
}

/// Nearest centroid (lowest id on ties) and residual bucket codes.
pub fn compress(
    embedding: &[f64],
    centroids: &CentroidTable,
    codec: &ResidualCodec,
) -> Result<(usize, Vec<u8>)> {
    if embedding.len() != centroids.dim() {
        return Err(Error::dim(centroids.dim(), embedding.len()));
    }
    let id = centroids.nearest(embedding);
    let residual: Vec<f64> = embedding
        .iter()
        .zip(centroids.row(id))
        .map(|(&x, &c)| x - c as f64)
        .collect();
    Ok((id, codec.encode(&residual)?))
}

/// `centroid[id] + representatives[code]`.
pub fn decompress(
    centroid_id: usize,
    code: &[u8],
    centroids: &CentroidTable,
    codec: &ResidualCodec,
) -> Result<Vec<f64>> {
    if centroid_id >= centroids.count() {
        return Err(Error::OutOfRange {
            index: centroid_id,
            len: centroids.count(),
        });
    }
    if code.len() != codec.dim() {
        return Err(Error::dim(codec.dim(), code.len()));
    }
    if let Some(&bad) = code.iter().find(|&&b| b as usize >= BUCKETS) {
        return Err(Error::OutOfRange {
            index: bad as usize,
            len: BUCKETS,
        });
    }
    let mut out = vec![0.0; code.len()];
    decompress_into(centroid_id, code, centroids, codec, &mut out);
    Ok(out)
}

fn decompress_into(
    centroid_id: usize,
    code: &[u8],
    centroids: &CentroidTable,
    codec: &ResidualCodec,
    out: &mut [f64],
) {
    codec.decode_into(code, out);
    for (o, &c) in out.iter_mut().zip(centroids.row(centroid_id)) {
        *o += c as f64;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedIndex {
    centroids: CentroidTable,
    codec: ResidualCodec,
    codes: PackedCodes,
    inverted_lists: Vec<Vec<u32>>,
    emb_to_passage: Vec<(u32, u32)>,
    passage_ids: Vec<PassageId>,
    passage_offsets: Vec<usize>,
    seed: u64,
}

impl CompressedIndex {
    pub(crate) fn from_parts(
        centroids: CentroidTable,
        codec: ResidualCodec,
        codes: PackedCodes,
        inverted_lists: Vec<Vec<u32>>,
        passages: Vec<(PassageId, usize)>,
        seed: u64,
    ) -> Result<Self> {
        if codec.dim() != centroids.dim() || codes.dim() != centroids.dim() {
            return Err(Error::Format("index parts disagree on dimension".into()));
        }
        if codes.id_bits() != centroids.id_bits() {
            return Err(Error::Format("centroid id width disagrees with |C|".into()));
        }
        let mut passage_ids = Vec::with_capacity(passages.len());
        let mut passage_offsets = vec![0usize];
        let mut emb_to_passage = Vec::with_capacity(codes.len());
        for (slot, &(pid, count)) in passages.iter().enumerate() {
            if passage_ids.last().is_some_and(|&last| last >= pid) {
                return Err(Error::Format("passage ids are not strictly increasing".into()));
            }
            passage_ids.push(pid);
            passage_offsets.push(passage_offsets[slot] + count);
            emb_to_passage.extend((0..count as u32).map(|pos| (slot as u32, pos)));
        }
        if emb_to_passage.len() != codes.len() {
            return Err(Error::Format(format!(
                "passage map covers {} embeddings, codes hold {}",
                emb_to_passage.len(),
                codes.len()
            )));
        }
        if inverted_lists.len() != centroids.count() {
            return Err(Error::Format("one inverted list per centroid required".into()));
        }
        // inverted lists must be exactly the inverse of the codes' centroid ids
        let mut seen = vec![false; codes.len()];
        for (c, list) in inverted_lists.iter().enumerate() {
            for &e in list {
                let e = e as usize;
                if e >= codes.len() || seen[e] || codes.centroid_id(e) != c {
                    return Err(Error::Format(format!(
                        "inverted list {c} holds inconsistent embedding {e}"
                    )));
                }
                seen[e] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Format("embedding missing from inverted lists".into()));
        }
        Ok(CompressedIndex {
            centroids,
            codec,
            codes,
            inverted_lists,
            emb_to_passage,
            passage_ids,
            passage_offsets,
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.centroids.dim()
    }

    pub fn centroids(&self) -> &CentroidTable {
        &self.centroids
    }

    pub fn codec(&self) -> &ResidualCodec {
        &self.codec
    }

    pub fn codes(&self) -> &PackedCodes {
        &self.codes
    }

    pub fn inverted_lists(&self) -> &[Vec<u32>] {
        &self.inverted_lists
    }

    pub fn num_embeddings(&self) -> usize {
        self.codes.len()
    }

    pub fn num_passages(&self) -> usize {
        self.passage_ids.len()
    }

    pub fn passage_ids(&self) -> &[PassageId] {
        &self.passage_ids
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Stored bits per embedding: `2 · d_out + ⌈log2 |C|⌉`.
    pub fn bits_per_embedding(&self) -> usize {
        self.codes.record_bits()
    }

    /// `(passage id, position)` of an embedding.
    pub fn embedding_location(&self, emb: usize) -> Option<(PassageId, usize)> {
        self.emb_to_passage
            .get(emb)
            .map(|&(slot, pos)| (self.passage_ids[slot as usize], pos as usize))
    }

    pub(crate) fn passage_slot_of(&self, emb: usize) -> usize {
        self.emb_to_passage[emb].0 as usize
    }

    pub(crate) fn slot(&self, pid: PassageId) -> Option<usize> {
        self.passage_ids.binary_search(&pid).ok()
    }

    pub(crate) fn decompress_embedding(&self, emb: usize, code: &mut [u8], out: &mut [f64]) {
        let id = self.codes.read_into(emb, code);
        decompress_into(id, code, &self.centroids, &self.codec, out);
    }

    pub(crate) fn decompress_slot(&self, slot: usize) -> TermEmbeddingMatrix {
        let (start, end) = (self.passage_offsets[slot], self.passage_offsets[slot + 1]);
        let dim = self.dim();
        let mut values = vec![0.0; (end - start) * dim];
        let mut code = vec![0u8; dim];
        for (row, emb) in (start..end).enumerate() {
            self.decompress_embedding(emb, &mut code, &mut values[row * dim..(row + 1) * dim]);
        }
        let arr = ndarray::Array2::from_shape_vec((end - start, dim), values).expect("shape");
        TermEmbeddingMatrix::new(arr).expect("decompressed values are finite")
    }

    pub fn decompress_passage(&self, pid: PassageId) -> Result<TermEmbeddingMatrix> {
        let slot = self
            .slot(pid)
            .ok_or_else(|| Error::UnknownId(pid.to_string()))?;
        Ok(self.decompress_slot(slot))
    }

    /// Every passage reconstructed from its codes.
    pub fn decompressed_corpus(&self) -> Corpus {
        (0..self.num_passages())
            .map(|slot| (self.passage_ids[slot], self.decompress_slot(slot)))
            .collect()
    }
}

/// Compresses every passage of `corpus` into a [`CompressedIndex`].
pub fn build_index(corpus: &Corpus, config: &IndexConfig) -> Result<CompressedIndex> {
    let first = corpus
        .values()
        .next()
        .ok_or_else(|| Error::EmptyInput("corpus has no passages".into()))?;
    let dim = first.dim();
    for (pid, m) in corpus {
        if m.dim() != dim {
            return Err(Error::dim(dim, m.dim()));
        }
        if m.rows() == 0 {
            return Err(Error::EmptyInput(format!("passage {pid} has no embeddings")));
        }
    }
    if config.sample_passages == 0 {
        return Err(Error::InvalidConfig("sample_passages must be >= 1".into()));
    }

    let passages: Vec<(&PassageId, &TermEmbeddingMatrix)> = corpus.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sample_slots: Vec<usize> = if passages.len() <= config.sample_passages {
        (0..passages.len()).collect()
    } else {
        rand::seq::index::sample(&mut rng, passages.len(), config.sample_passages).into_vec()
    };
    sample_slots.sort_unstable();
    let sample: Vec<TermEmbeddingMatrix> =
        sample_slots.iter().map(|&s| passages[s].1.clone()).collect();

    let total: usize = corpus.values().map(|m| m.rows()).sum();
    let selection = select_centroids(&sample, total, config.seed)?;
    let centroids = selection.table;

    let residuals: Vec<Vec<f64>> = sample
        .iter()
        .flat_map(|m| m.iter_rows())
        .map(|v| {
            let c = centroids.row(centroids.nearest(v));
            v.iter().zip(c).map(|(&x, &c)| x - c as f64).collect()
        })
        .collect();
    let residual_refs: Vec<&[f64]> = residuals.iter().map(|r| r.as_slice()).collect();
    let codec = fit_codec(&residual_refs, dim)?;

    let compressed: Vec<Vec<(usize, Vec<u8>)>> = passages
        .par_iter()
        .map(|(_, m)| {
            m.iter_rows()
                .map(|v| compress(v, &centroids, &codec))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut codes = PackedCodes::new(centroids.id_bits(), dim);
    let mut inverted_lists = vec![Vec::new(); centroids.count()];
    for (id, code) in compressed.iter().flatten() {
        inverted_lists[*id].push(codes.len() as u32);
        codes.push(*id, code)?;
    }
    let passage_counts = passages.iter().map(|(pid, m)| (**pid, m.rows())).collect();
    CompressedIndex::from_parts(
        centroids,
        codec,
        codes,
        inverted_lists,
        passage_counts,
        config.seed,
    )
}
