//! Contrastive ranking objective: pairwise softmax cross-entropy plus the
//! in-batch sampled softmax cross-entropy, averaged over the batch.

use ndarray::Array2;

use super::forward::{backward, forward};
use super::params::{ModularEncoderParams, Weights};
use crate::error::{Error, Result};
use crate::scoring::{maxsim_backward, maxsim_score, PreparedSequence, TermEmbeddingMatrix};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTriple {
    pub query: PreparedSequence,
    pub positive: PreparedSequence,
    pub hard_negative: PreparedSequence,
}

impl TrainingTriple {
    pub fn new(
        query: PreparedSequence,
        positive: PreparedSequence,
        hard_negative: PreparedSequence,
    ) -> Result<Self> {
        if positive.language != query.language || hard_negative.language != query.language {
            return Err(Error::MixedLanguage(format!(
                "triple mixes {}, {} and {}",
                query.language, positive.language, hard_negative.language
            )));
        }
        Ok(TrainingTriple {
            query,
            positive,
            hard_negative,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    triples: Vec<TrainingTriple>,
}

impl Batch {
    pub fn new(triples: Vec<TrainingTriple>) -> Result<Self> {
        if triples.is_empty() {
            return Err(Error::EmptyInput("batch needs at least one triple".into()));
        }
        Ok(Batch { triples })
    }

    pub fn triples(&self) -> &[TrainingTriple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn is_monolingual(&self) -> bool {
        let lang = &self.triples[0].query.language;
        self.triples.iter().all(|t| {
            &t.query.language == lang
                && &t.positive.language == lang
                && &t.hard_negative.language == lang
        })
    }
}

/// The `2(N-1)` passages paired with every other query of the batch:
/// `p⁺_j, p⁻_j` for each `j != i`, in batch order.
pub fn build_inbatch_negatives(batch: &Batch, i: usize) -> Result<Vec<&PreparedSequence>> {
    if i >= batch.len() {
        return Err(Error::OutOfRange {
            index: i,
            len: batch.len(),
        });
    }
    Ok(batch
        .triples
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .flat_map(|(_, t)| [&t.positive, &t.hard_negative])
        .collect())
}

fn check_finite(scores: &[f64]) -> Result<()> {
    match scores.iter().find(|s| !s.is_finite()) {
        Some(s) => Err(Error::NonFinite(format!("score {s}"))),
        None => Ok(()),
    }
}

/// `-log softmax(scores)[0]`, shifted by the max for overflow safety.
fn neg_log_softmax_first(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    (max - scores[0]) + sum.ln()
}

/// Softmax of `scores` minus the one-hot of index 0: the gradient of
/// [`neg_log_softmax_first`].
fn neg_log_softmax_first_grad(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let mut g: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    g[0] -= 1.0;
    g
}

pub fn pairwise_loss(s_pos: f64, s_neg: f64) -> Result<f64> {
    check_finite(&[s_pos, s_neg])?;
    Ok(neg_log_softmax_first(&[s_pos, s_neg]))
}

pub fn inbatch_loss(s_pos: f64, s_neg: f64, s_ib: &[f64]) -> Result<f64> {
    let mut scores = Vec::with_capacity(2 + s_ib.len());
    scores.extend([s_pos, s_neg]);
    scores.extend_from_slice(s_ib);
    check_finite(&scores)?;
    Ok(neg_log_softmax_first(&scores))
}

/// Pre-computed term embeddings of one training triple.
#[derive(Clone, Debug)]
pub struct EmbeddedTriple {
    pub query: TermEmbeddingMatrix,
    pub positive: TermEmbeddingMatrix,
    pub hard_negative: TermEmbeddingMatrix,
}

/// Gradients of the batch loss with respect to every embedding matrix.
pub(crate) struct EmbeddingGrads {
    pub query: Vec<Array2<f64>>,
    pub positive: Vec<Array2<f64>>,
    pub hard_negative: Vec<Array2<f64>>,
}

/// Batch objective on already-encoded triples (the encoder is bypassed).
pub fn total_loss_embedded(triples: &[EmbeddedTriple]) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::EmptyInput("batch needs at least one triple".into()));
    }
    let n = triples.len();
    let mut total = 0.0;
    for (i, t) in triples.iter().enumerate() {
        let s_pos = maxsim_score(&t.query, &t.positive)?;
        let s_neg = maxsim_score(&t.query, &t.hard_negative)?;
        let mut s_ib = Vec::with_capacity(2 * (n - 1));
        for (j, other) in triples.iter().enumerate() {
            if j != i {
                s_ib.push(maxsim_score(&t.query, &other.positive)?);
                s_ib.push(maxsim_score(&t.query, &other.hard_negative)?);
            }
        }
        total += pairwise_loss(s_pos, s_neg)? + inbatch_loss(s_pos, s_neg, &s_ib)?;
    }
    Ok(total / n as f64)
}

/// Loss and its gradient with respect to each embedding matrix.
pub(crate) fn total_loss_embedded_grad(triples: &[EmbeddedTriple]) -> Result<(f64, EmbeddingGrads)> {
    let loss = total_loss_embedded(triples)?;
    let n = triples.len();
    let zeros = |m: &TermEmbeddingMatrix| Array2::<f64>::zeros((m.rows(), m.dim()));
    let mut grads = EmbeddingGrads {
        query: triples.iter().map(|t| zeros(&t.query)).collect(),
        positive: triples.iter().map(|t| zeros(&t.positive)).collect(),
        hard_negative: triples.iter().map(|t| zeros(&t.hard_negative)).collect(),
    };
    let inv_n = 1.0 / n as f64;

    for i in 0..n {
        let q = &triples[i].query;
        // passages in order: p⁺_i, p⁻_i, then (p⁺_j, p⁻_j) for j != i
        let mut order: Vec<(usize, bool)> = vec![(i, true), (i, false)];
        for j in (0..n).filter(|&j| j != i) {
            order.push((j, true));
            order.push((j, false));
        }
        let scores: Vec<f64> = order
            .iter()
            .map(|&(j, pos)| {
                let p = if pos {
                    &triples[j].positive
                } else {
                    &triples[j].hard_negative
                };
                maxsim_score(q, p)
            })
            .collect::<Result<_>>()?;
        let g_pair = neg_log_softmax_first_grad(&scores[..2]);
        let g_ib = neg_log_softmax_first_grad(&scores);
        for (slot, &(j, pos)) in order.iter().enumerate() {
            let mut weight = g_ib[slot];
            if slot < 2 {
                weight += g_pair[slot];
            }
            weight *= inv_n;
            if weight == 0.0 {
                continue;
            }
            let (p, gp) = if pos {
                (&triples[j].positive, &mut grads.positive[j])
            } else {
                (&triples[j].hard_negative, &mut grads.hard_negative[j])
            };
            maxsim_backward(q, p, weight, &mut grads.query[i], gp);
        }
    }
    Ok((loss, grads))
}

fn encode_batch(
    batch: &Batch,
    params: &ModularEncoderParams,
) -> Result<(Vec<EmbeddedTriple>, Vec<[super::forward::ForwardCache; 3]>)> {
    let out = &params.weights.output;
    let mut embedded = Vec::with_capacity(batch.len());
    let mut caches = Vec::with_capacity(batch.len());
    for t in batch.triples() {
        let cq = forward(params, &t.query.token_ids, &t.query.language)?;
        let cp = forward(params, &t.positive.token_ids, &t.positive.language)?;
        let cn = forward(params, &t.hard_negative.token_ids, &t.hard_negative.language)?;
        embedded.push(EmbeddedTriple {
            query: TermEmbeddingMatrix::new(cq.hidden.dot(out))?,
            positive: TermEmbeddingMatrix::new(cp.hidden.dot(out))?,
            hard_negative: TermEmbeddingMatrix::new(cn.hidden.dot(out))?,
        });
        caches.push([cq, cp, cn]);
    }
    Ok((embedded, caches))
}

/// Mean over the batch of pairwise + in-batch loss, scored with MaxSim on
/// encoder outputs.
pub fn total_loss(batch: &Batch, params: &ModularEncoderParams) -> Result<f64> {
    let (embedded, _) = encode_batch(batch, params)?;
    total_loss_embedded(&embedded)
}

/// Loss together with its gradient for every parameter of the model.
pub fn total_loss_and_grad(batch: &Batch, params: &ModularEncoderParams) -> Result<(f64, Weights)> {
    let (embedded, caches) = encode_batch(batch, params)?;
    let (loss, eg) = total_loss_embedded_grad(&embedded)?;
    let mut grads = Weights::zeros_like(&params.weights);
    let out = &params.weights.output;
    for (i, (t, cache)) in batch.triples().iter().zip(&caches).enumerate() {
        let parts = [
            (&t.query, &cache[0], &eg.query[i]),
            (&t.positive, &cache[1], &eg.positive[i]),
            (&t.hard_negative, &cache[2], &eg.hard_negative[i]),
        ];
        for (seq, c, d_emb) in parts {
            grads.output += &c.hidden.t().dot(d_emb);
            let d_hidden = d_emb.dot(&out.t());
            backward(params, c, &seq.language, d_hidden, &mut grads)?;
        }
    }
    Ok((loss, grads))
}
