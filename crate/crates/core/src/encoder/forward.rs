//! Forward and backward passes of the toy modular encoder.
//!
//! Per layer, with `h` the `k × d` hidden state:
//!
//! ```text
//! z  = tanh(h·mix + 1·(mean_rows(h)·context) + bias)      shared
//! s  = tanh(z·down + down_bias)                           language adapter
//! h' = h + z + s·up + up_bias                             residual add
//! ```
//!
//! The input is `embedding[token] + positions[pos]` and the term vectors are
//! `h_L · output`.

use ndarray::{Array1, Array2, Axis};

use super::params::{AdapterBlock, ModularEncoderParams, Weights};
use crate::error::{Error, Result};
use crate::scoring::{LanguageId, PreparedSequence, TermEmbeddingMatrix, TokenId};

pub(crate) struct LayerCache {
    input: Array2<f64>,
    context: Array1<f64>,
    z: Array2<f64>,
    s: Array2<f64>,
}

pub(crate) struct ForwardCache {
    tokens: Vec<usize>,
    layers: Vec<LayerCache>,
    pub(crate) hidden: Array2<f64>,
}

pub(crate) fn adapters_for<'a>(
    weights: &'a Weights,
    lang: &LanguageId,
) -> Result<&'a [AdapterBlock]> {
    weights
        .adapters
        .get(lang)
        .map(|v| v.as_slice())
        .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
}

fn check_tokens(params: &ModularEncoderParams, ids: &[TokenId]) -> Result<Vec<usize>> {
    let cfg = params.config();
    if ids.len() > cfg.max_positions {
        return Err(Error::InvalidConfig(format!(
            "sequence of {} positions exceeds max_positions {}",
            ids.len(),
            cfg.max_positions
        )));
    }
    ids.iter()
        .map(|&t| {
            let t = t as usize;
            if t >= cfg.vocab_size {
                Err(Error::OutOfRange {
                    index: t,
                    len: cfg.vocab_size,
                })
            } else {
                Ok(t)
            }
        })
        .collect()
}

/// Hidden states through every layer, routing through `route`'s adapters.
pub(crate) fn forward(
    params: &ModularEncoderParams,
    ids: &[TokenId],
    route: &LanguageId,
) -> Result<ForwardCache> {
    let w = &params.weights;
    let adapters = adapters_for(w, route)?;
    let tokens = check_tokens(params, ids)?;
    let k = tokens.len();
    let d = params.config().hidden_dim;

    let mut h = Array2::<f64>::zeros((k, d));
    for (i, &t) in tokens.iter().enumerate() {
        let mut row = h.row_mut(i);
        row += &w.embedding.row(t);
        row += &w.positions.row(i);
    }

    let mut layers = Vec::with_capacity(w.layers.len());
    for (layer, adapter) in w.layers.iter().zip(adapters) {
        let context = if k > 0 {
            h.mean_axis(Axis(0)).expect("nonempty")
        } else {
            Array1::zeros(d)
        };
        let shift = context.dot(&layer.context) + &layer.bias;
        let mut z = h.dot(&layer.mix);
        z += &shift;
        z.mapv_inplace(f64::tanh);

        let mut s = z.dot(&adapter.down);
        s += &adapter.down_bias;
        s.mapv_inplace(f64::tanh);

        let mut next = &h + &z;
        next += &s.dot(&adapter.up);
        next += &adapter.up_bias;

        layers.push(LayerCache {
            input: h,
            context,
            z,
            s,
        });
        h = next;
    }
    Ok(ForwardCache {
        tokens,
        layers,
        hidden: h,
    })
}

/// Back-propagates `d_hidden` (gradient w.r.t. the final hidden state) into
/// `grads`, using the adapters of `route`.
pub(crate) fn backward(
    params: &ModularEncoderParams,
    cache: &ForwardCache,
    route: &LanguageId,
    d_hidden: Array2<f64>,
    grads: &mut Weights,
) -> Result<()> {
    let w = &params.weights;
    let adapters = adapters_for(w, route)?;
    let k = cache.tokens.len();
    if k == 0 {
        return Ok(());
    }
    let g_adapters = grads
        .adapters
        .get_mut(route)
        .ok_or_else(|| Error::UnknownLanguage(route.to_string()))?;

    let mut dh = d_hidden;
    for (idx, lc) in cache.layers.iter().enumerate().rev() {
        let layer = &w.layers[idx];
        let adapter = &adapters[idx];
        let ga = &mut g_adapters[idx];

        // adapter branch
        ga.up += &lc.s.t().dot(&dh);
        ga.up_bias += &dh.sum_axis(Axis(0));
        let mut dv = dh.dot(&adapter.up.t());
        dv.zip_mut_with(&lc.s, |g, &s| *g *= 1.0 - s * s);
        ga.down += &lc.z.t().dot(&dv);
        ga.down_bias += &dv.sum_axis(Axis(0));

        // shared branch
        let mut du = &dh + &dv.dot(&adapter.down.t());
        du.zip_mut_with(&lc.z, |g, &z| *g *= 1.0 - z * z);
        let gl = &mut grads.layers[idx];
        gl.mix += &lc.input.t().dot(&du);
        let du_sum = du.sum_axis(Axis(0));
        gl.bias += &du_sum;
        let ctx_col = lc.context.view().insert_axis(Axis(1));
        gl.context += &ctx_col.dot(&du_sum.view().insert_axis(Axis(0)));
        let d_context = du_sum.dot(&layer.context.t()) / k as f64;

        let mut d_input = dh;
        d_input += &du.dot(&layer.mix.t());
        d_input += &d_context;
        dh = d_input;
    }

    for (i, &t) in cache.tokens.iter().enumerate() {
        let row = dh.row(i);
        let mut e = grads.embedding.row_mut(t);
        e += &row;
        let mut p = grads.positions.row_mut(i);
        p += &row;
    }
    Ok(())
}

/// Term embeddings for `seq`, routed through the adapters of `seq.language`.
pub fn encode(seq: &PreparedSequence, params: &ModularEncoderParams) -> Result<TermEmbeddingMatrix> {
    encode_with_route(seq, params, &seq.language)
}

/// Like [`encode`] but forces the adapter route, regardless of the
/// sequence's own language. Used to measure cross-route behavior.
pub fn encode_with_route(
    seq: &PreparedSequence,
    params: &ModularEncoderParams,
    route: &LanguageId,
) -> Result<TermEmbeddingMatrix> {
    let cache = forward(params, &seq.token_ids, route)?;
    TermEmbeddingMatrix::new(cache.hidden.dot(&params.weights.output))
}
