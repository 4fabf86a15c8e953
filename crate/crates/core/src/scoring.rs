//! Sequence preparation and late-interaction similarity.
//!
//! Queries are laid out as `[CLS] [Q] q1 .. qi [M] .. [M]` with exactly `n`
//! positions; passages as `[CLS] [P] p1 .. pj` with at most `m` positions.
//! Every position of both sides produces a term embedding and every query
//! row contributes to the MaxSim sum, mask positions included.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const CLS_TOKEN: TokenId = 0;
pub const QUERY_TOKEN: TokenId = 1;
pub const PASSAGE_TOKEN: TokenId = 2;
pub const MASK_TOKEN: TokenId = 3;
/// First id available to ordinary text tokens.
pub const FIRST_TEXT_TOKEN: TokenId = 4;

pub const DEFAULT_QUERY_LEN: usize = 32;
pub const DEFAULT_PASSAGE_LEN: usize = 256;
pub const DEFAULT_OUTPUT_DIM: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LanguageId(pub String);

impl LanguageId {
    pub fn new(code: impl Into<String>) -> Self {
        LanguageId(code.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LanguageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LanguageId {
    fn from(s: &str) -> Self {
        LanguageId(s.to_owned())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SequenceKind {
    Query,
    Passage,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreparedSequence {
    pub token_ids: Vec<TokenId>,
    pub kind: SequenceKind,
    pub language: LanguageId,
}

impl PreparedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Builds a fixed-length query: `[CLS] [Q]`, the text truncated to `n - 2`
/// tokens, then `[M]` up to exactly `n` positions.
pub fn prepare_query(tokens: &[TokenId], n: usize, lang: LanguageId) -> Result<PreparedSequence> {
    if n < 3 {
        return Err(Error::InvalidConfig(format!(
            "query length n must be >= 3, got {n}"
        )));
    }
    let mut ids = Vec::with_capacity(n);
    ids.push(CLS_TOKEN);
    ids.push(QUERY_TOKEN);
    ids.extend(tokens.iter().copied().take(n - 2));
    ids.resize(n, MASK_TOKEN);
    Ok(PreparedSequence {
        token_ids: ids,
        kind: SequenceKind::Query,
        language: lang,
    })
}

/// Builds a passage: `[CLS] [P]` followed by at most `m - 2` text tokens.
pub fn prepare_passage(
    tokens: &[TokenId],
    m: usize,
    lang: LanguageId,
) -> Result<PreparedSequence> {
    if m < 3 {
        return Err(Error::InvalidConfig(format!(
            "passage length m must be >= 3, got {m}"
        )));
    }
    let keep = tokens.len().min(m - 2);
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(CLS_TOKEN);
    ids.push(PASSAGE_TOKEN);
    ids.extend_from_slice(&tokens[..keep]);
    Ok(PreparedSequence {
        token_ids: ids,
        kind: SequenceKind::Passage,
        language: lang,
    })
}

/// A bag of contextualized term vectors, one row per sequence position.
#[derive(Clone, Debug, PartialEq)]
pub struct TermEmbeddingMatrix {
    values: Array2<f64>,
}

impl TermEmbeddingMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::InvalidConfig("embedding dim must be >= 1".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("term embedding matrix".into()));
        }
        let values = if values.is_standard_layout() {
            values
        } else {
            values.as_standard_layout().into_owned()
        };
        Ok(TermEmbeddingMatrix { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::dim(dim, bad.len()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((rows.len(), dim), flat)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Self::new(values)
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let start = i * self.dim();
        &self.values.as_slice().expect("standard layout")[start..start + self.dim()]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values
            .as_slice()
            .expect("standard layout")
            .chunks_exact(self.dim())
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Cosine similarity. A zero-norm argument yields 0.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim(u.len(), v.len()));
    }
    Ok(cosine_unchecked(u, v))
}

#[inline]
pub(crate) fn cosine_unchecked(u: &[f64], v: &[f64]) -> f64 {
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return 0.0;
    }
    (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0)
}

fn check_pair(hq: &TermEmbeddingMatrix, hp: &TermEmbeddingMatrix) -> Result<()> {
    if hq.dim() != hp.dim() {
        return Err(Error::dim(hq.dim(), hp.dim()));
    }
    if hp.rows() == 0 {
        return Err(Error::EmptyInput("passage embedding matrix has no rows".into()));
    }
    Ok(())
}

/// Sum over query rows of the best cosine against any passage row.
pub fn maxsim_score(hq: &TermEmbeddingMatrix, hp: &TermEmbeddingMatrix) -> Result<f64> {
    check_pair(hq, hp)?;
    Ok(maxsim_unchecked(hq, hp))
}

pub(crate) fn maxsim_unchecked(hq: &TermEmbeddingMatrix, hp: &TermEmbeddingMatrix) -> f64 {
    hq.iter_rows()
        .map(|q| {
            hp.iter_rows()
                .map(|p| cosine_unchecked(q, p))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Max,
    Cls,
}

pub fn pool(h: &TermEmbeddingMatrix, pooling: Pooling) -> Array1<f64> {
    let values = h.values();
    match pooling {
        Pooling::Mean => values.mean_axis(Axis(0)).expect("nonempty"),
        Pooling::Max => values.fold_axis(Axis(0), f64::NEG_INFINITY, |acc, &v| acc.max(v)),
        Pooling::Cls => values.row(0).to_owned(),
    }
}

/// Single-vector variant: cosine of the pooled query and passage vectors.
pub fn pooled_score(
    hq: &TermEmbeddingMatrix,
    hp: &TermEmbeddingMatrix,
    pooling: Pooling,
) -> Result<f64> {
    check_pair(hq, hp)?;
    if hq.rows() == 0 {
        return Err(Error::EmptyInput("query embedding matrix has no rows".into()));
    }
    let q = pool(hq, pooling);
    let p = pool(hp, pooling);
    Ok(cosine_unchecked(as_slice(q.view()), as_slice(p.view())))
}

fn as_slice<'a>(v: ArrayView1<'a, f64>) -> &'a [f64] {
    v.to_slice().expect("contiguous pooled vector")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMode {
    MaxSim,
    Pooled,
}

/// `pooling` is ignored in MaxSim mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub mode: SimilarityMode,
    pub pooling: Pooling,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            mode: SimilarityMode::MaxSim,
            pooling: Pooling::Mean,
        }
    }
}

impl SimilarityConfig {
    pub fn score(&self, hq: &TermEmbeddingMatrix, hp: &TermEmbeddingMatrix) -> Result<f64> {
        match self.mode {
            SimilarityMode::MaxSim => maxsim_score(hq, hp),
            SimilarityMode::Pooled => pooled_score(hq, hp, self.pooling),
        }
    }
}

/// Gradient of `cos(u, v)` with respect to `u`, added into `out` scaled by `weight`.
fn accumulate_cosine_grad(u: &[f64], v: &[f64], weight: f64, out: &mut [f64]) {
    let nu2 = dot(u, u);
    let nv2 = dot(v, v);
    if nu2 == 0.0 || nv2 == 0.0 {
        return;
    }
    let nu = nu2.sqrt();
    let nv = nv2.sqrt();
    let c = dot(u, v) / (nu * nv);
    let a = weight / (nu * nv);
    let b = weight * c / nu2;
    for ((o, &ui), &vi) in out.iter_mut().zip(u).zip(v) {
        *o += a * vi - b * ui;
    }
}

/// MaxSim score together with the gradient with respect to both matrices,
/// scaled by `weight` and accumulated into `grad_q` / `grad_p`.
///
/// The max is differentiated through its argmax (lowest passage row on ties).
pub(crate) fn maxsim_backward(
    hq: &TermEmbeddingMatrix,
    hp: &TermEmbeddingMatrix,
    weight: f64,
    grad_q: &mut Array2<f64>,
    grad_p: &mut Array2<f64>,
) -> f64 {
    let dim = hq.dim();
    let gq = grad_q.as_slice_mut().expect("standard layout");
    let gp = grad_p.as_slice_mut().expect("standard layout");
    let mut total = 0.0;
    for (i, q) in hq.iter_rows().enumerate() {
        let mut best = f64::NEG_INFINITY;
        let mut best_j = 0;
        for (j, p) in hp.iter_rows().enumerate() {
            let c = cosine_unchecked(q, p);
            if c > best {
                best = c;
                best_j = j;
            }
        }
        total += best;
        let p = hp.row(best_j);
        accumulate_cosine_grad(q, p, weight, &mut gq[i * dim..(i + 1) * dim]);
        accumulate_cosine_grad(p, q, weight, &mut gp[best_j * dim..(best_j + 1) * dim]);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> TermEmbeddingMatrix {
        TermEmbeddingMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
            .unwrap()
    }

    fn en() -> LanguageId {
        LanguageId::from("en")
    }

    #[test]
    fn query_is_padded_with_masks() {
        let q = prepare_query(&[10, 11], 6, en()).unwrap();
        assert_eq!(
            q.token_ids,
            vec![CLS_TOKEN, QUERY_TOKEN, 10, 11, MASK_TOKEN, MASK_TOKEN]
        );
        assert_eq!(q.kind, SequenceKind::Query);

        let empty = prepare_query(&[], 4, en()).unwrap();
        assert_eq!(
            empty.token_ids,
            vec![CLS_TOKEN, QUERY_TOKEN, MASK_TOKEN, MASK_TOKEN]
        );
    }

    #[test]
    fn long_query_is_truncated_without_masks() {
        let tokens: Vec<TokenId> = (100..140).collect();
        let q = prepare_query(&tokens, 32, en()).unwrap();
        assert_eq!(q.len(), 32);
        assert_eq!(&q.token_ids[2..], &tokens[..30]);
        assert!(!q.token_ids.contains(&MASK_TOKEN));
    }

    #[test]
    fn passage_truncation() {
        let p = prepare_passage(&[7, 8, 9], 256, en()).unwrap();
        assert_eq!(p.len(), 5);
        let tokens: Vec<TokenId> = (10..310).collect();
        let p = prepare_passage(&tokens, 256, en()).unwrap();
        assert_eq!(p.len(), 256);
        assert_eq!(&p.token_ids[2..], &tokens[..254]);
        let p = prepare_passage(&[], 8, en()).unwrap();
        assert_eq!(p.token_ids, vec![CLS_TOKEN, PASSAGE_TOKEN]);
    }

    #[test]
    fn short_lengths_are_rejected() {
        assert!(matches!(
            prepare_query(&[], 2, en()),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            prepare_passage(&[], 2, en()),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine(&[1.0], &[1.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn maxsim_examples() {
        assert_eq!(maxsim_score(&m(&[&[1.0, 0.0]]), &m(&[&[1.0, 0.0]])).unwrap(), 1.0);
        let s = maxsim_score(&m(&[&[1.0, 0.0], &[0.0, 1.0]]), &m(&[&[1.0, 0.0]])).unwrap();
        assert_eq!(s, 1.0);
        let s = maxsim_score(
            &m(&[&[1.0, 0.0], &[0.6, 0.8]]),
            &m(&[&[0.0, 1.0], &[1.0, 0.0]]),
        )
        .unwrap();
        assert!((s - 1.8).abs() < 1e-12);
    }

    #[test]
    fn maxsim_errors() {
        let q = m(&[&[1.0, 0.0]]);
        let p3 = m(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(
            maxsim_score(&q, &p3),
            Err(Error::DimensionMismatch { .. })
        ));
        let empty = TermEmbeddingMatrix::new(Array2::zeros((0, 2))).unwrap();
        assert!(matches!(maxsim_score(&q, &empty), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn pooled_examples() {
        let h = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let s = pooled_score(&h, &h, Pooling::Mean).unwrap();
        assert!((s - 1.0).abs() < 1e-12);

        let q = m(&[&[1.0, 0.0], &[9.0, 9.0]]);
        let p = m(&[&[1.0, 0.0], &[-5.0, 2.0]]);
        assert_eq!(pooled_score(&q, &p, Pooling::Cls).unwrap(), 1.0);

        let p = m(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let s = pooled_score(&h, &p, Pooling::Mean).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn max_pooling_is_elementwise() {
        let h = m(&[&[1.0, -2.0], &[-3.0, 4.0]]);
        assert_eq!(pool(&h, Pooling::Max).to_vec(), vec![1.0, 4.0]);
    }

    #[test]
    fn similarity_config_ignores_pooling_for_maxsim() {
        let q = m(&[&[1.0, 0.0], &[0.6, 0.8]]);
        let p = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        for pooling in [Pooling::Mean, Pooling::Max, Pooling::Cls] {
            let cfg = SimilarityConfig {
                mode: SimilarityMode::MaxSim,
                pooling,
            };
            assert_eq!(cfg.score(&q, &p).unwrap(), maxsim_score(&q, &p).unwrap());
        }
    }

    #[test]
    fn non_finite_rows_rejected() {
        assert!(matches!(
            TermEmbeddingMatrix::from_rows(&[vec![f64::NAN, 0.0]]),
            Err(Error::NonFinite(_))
        ));
    }

    fn matrix_strategy(max_rows: usize, dim: usize) -> impl Strategy<Value = TermEmbeddingMatrix> {
        prop::collection::vec(
            prop::collection::vec(-1.0f64..1.0, dim).prop_filter("nonzero row", |r| {
                r.iter().map(|x| x * x).sum::<f64>() > 1e-6
            }),
            1..max_rows,
        )
        .prop_map(|rows| TermEmbeddingMatrix::from_rows(&rows).unwrap())
    }

    proptest! {
        #[test]
        fn self_match_scores_row_count(h in matrix_strategy(8, 4)) {
            let s = maxsim_score(&h, &h).unwrap();
            prop_assert!((s - h.rows() as f64).abs() < 1e-9);
        }

        #[test]
        fn appending_passage_rows_never_decreases(
            q in matrix_strategy(6, 3),
            p in matrix_strategy(6, 3),
            extra in prop::collection::vec(-1.0f64..1.0, 3),
        ) {
            let before = maxsim_score(&q, &p).unwrap();
            let mut rows: Vec<Vec<f64>> = p.iter_rows().map(|r| r.to_vec()).collect();
            rows.push(extra);
            let grown = TermEmbeddingMatrix::from_rows(&rows).unwrap();
            prop_assert!(maxsim_score(&q, &grown).unwrap() >= before);
        }

        #[test]
        fn permutation_and_scale_invariance(
            q in matrix_strategy(6, 3),
            p in matrix_strategy(6, 3),
            scale in 0.01f64..100.0,
        ) {
            let base = maxsim_score(&q, &p).unwrap();
            let mut prow: Vec<Vec<f64>> = p.iter_rows().map(|r| r.to_vec()).collect();
            prow.reverse();
            prow[0].iter_mut().for_each(|x| *x *= scale);
            let mut qrow: Vec<Vec<f64>> = q.iter_rows().map(|r| r.to_vec()).collect();
            qrow.rotate_left(1);
            qrow[0].iter_mut().for_each(|x| *x *= scale);
            let q2 = TermEmbeddingMatrix::from_rows(&qrow).unwrap();
            let p2 = TermEmbeddingMatrix::from_rows(&prow).unwrap();
            prop_assert!((maxsim_score(&q2, &p2).unwrap() - base).abs() < 1e-9);
        }

        #[test]
        fn score_ranges(q in matrix_strategy(6, 3), p in matrix_strategy(6, 3)) {
            let s = maxsim_score(&q, &p).unwrap();
            prop_assert!(s.abs() <= q.rows() as f64 + 1e-12);
            for pooling in [Pooling::Mean, Pooling::Max, Pooling::Cls] {
                let s = pooled_score(&q, &p, pooling).unwrap();
                prop_assert!((-1.0..=1.0).contains(&s));
            }
        }

        #[test]
        fn query_length_is_always_n(
            tokens in prop::collection::vec(4u32..100, 0..64),
            n in 3usize..40,
        ) {
            prop_assert_eq!(prepare_query(&tokens, n, en()).unwrap().len(), n);
        }
    }
}
