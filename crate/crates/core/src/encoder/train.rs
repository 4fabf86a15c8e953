//! SGD updates for the three trainable stages.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::forward::{backward, forward};
use super::loss::{total_loss_and_grad, Batch};
use super::params::{init_adapters, ModularEncoderParams, Stage, Weights};
use crate::error::{Error, Result};
use crate::scoring::{LanguageId, PreparedSequence, TokenId, MASK_TOKEN};

/// Positions `>= 2` are text; `[CLS]` and the marker token are never masked.
const FIRST_MASKABLE: usize = 2;

/// Replaces a random subset of text positions with `[M]`. Returns the
/// corrupted ids and the `(position, original id)` targets.
pub fn mask_tokens<R: Rng>(
    ids: &[TokenId],
    mask_rate: f64,
    rng: &mut R,
) -> (Vec<TokenId>, Vec<(usize, TokenId)>) {
    let mut corrupted = ids.to_vec();
    let mut targets = Vec::new();
    if mask_rate <= 0.0 {
        return (corrupted, targets);
    }
    for (pos, id) in corrupted.iter_mut().enumerate().skip(FIRST_MASKABLE) {
        if rng.gen::<f64>() < mask_rate {
            targets.push((pos, *id));
            *id = MASK_TOKEN;
        }
    }
    (corrupted, targets)
}

/// Masked-token cross-entropy (mean over masked positions) with a weight-tied
/// head `logits = embedding · h + mlm_bias`, and its gradient.
pub fn mlm_loss_and_grad(
    params: &ModularEncoderParams,
    corrupted: &[TokenId],
    targets: &[(usize, TokenId)],
    lang: &LanguageId,
) -> Result<(f64, Weights)> {
    let mut grads = Weights::zeros_like(&params.weights);
    if targets.is_empty() {
        return Ok((0.0, grads));
    }
    let cache = forward(params, corrupted, lang)?;
    let emb = &params.weights.embedding;
    let inv = 1.0 / targets.len() as f64;
    let mut loss = 0.0;
    let mut d_hidden = Array2::<f64>::zeros(cache.hidden.raw_dim());
    for &(pos, target) in targets {
        let h = cache.hidden.row(pos);
        let logits = emb.dot(&h) + &params.weights.mlm_bias;
        let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps = logits.mapv(|l| (l - max).exp());
        let sum = exps.sum();
        loss += (max + sum.ln() - logits[target as usize]) * inv;
        let mut d_logits = exps / sum;
        d_logits[target as usize] -= 1.0;
        d_logits *= inv;
        grads.mlm_bias += &d_logits;
        let mut dh = d_hidden.row_mut(pos);
        dh += &d_logits.dot(emb);
        let d_col = d_logits.view().insert_axis(Axis(1));
        let h_row = h.insert_axis(Axis(0));
        grads.embedding += &d_col.dot(&h_row);
    }
    backward(params, &cache, lang, d_hidden, &mut grads)?;
    Ok((loss, grads))
}

/// One masked-language-modelling step on a monolingual sample.
///
/// In the pretrain stage this updates the shared layers, the embedding table
/// and the sample language's adapters. In the extend stage only the adapters
/// of a language registered after pretraining move.
pub fn mlm_step<R: Rng>(
    params: &mut ModularEncoderParams,
    sample: &PreparedSequence,
    mask_rate: f64,
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    match params.stage {
        Stage::Pretrain => {}
        Stage::Extend => {
            if !params.extension_languages.contains(&sample.language) {
                return Err(Error::Stage(format!(
                    "language `{}` is not being extended; only newly added languages train in the extend stage",
                    sample.language
                )));
            }
        }
        other => {
            return Err(Error::Stage(format!(
                "masked-language steps need the pretrain or extend stage, model is in {other}"
            )))
        }
    }
    if !(0.0..=1.0).contains(&mask_rate) {
        return Err(Error::InvalidConfig(format!("mask rate {mask_rate} not in [0, 1]")));
    }
    if !params.has_language(&sample.language) {
        return Err(Error::UnknownLanguage(sample.language.to_string()));
    }
    let (corrupted, targets) = mask_tokens(&sample.token_ids, mask_rate, rng);
    let (loss, grads) = mlm_loss_and_grad(params, &corrupted, &targets, &sample.language)?;
    if targets.is_empty() {
        return Ok(0.0);
    }
    let groups = params.trainable_groups(Some(&sample.language));
    params.apply_sgd(&grads, &groups, lr);
    params.check_finite()?;
    Ok(loss)
}

/// One step on the contrastive objective. Only the shared layers and the
/// output projection are updated; adapters and embeddings stay frozen.
pub fn finetune_step(params: &mut ModularEncoderParams, batch: &Batch, lr: f64) -> Result<f64> {
    if params.stage != Stage::Finetune {
        return Err(Error::Stage(format!(
            "fine-tuning needs the finetune stage, model is in {}",
            params.stage
        )));
    }
    if !batch.is_monolingual() {
        return Err(Error::MixedLanguage(
            "fine-tuning batches must use a single language".into(),
        ));
    }
    let (loss, grads) = total_loss_and_grad(batch, params)?;
    let groups = params.trainable_groups(None);
    params.apply_sgd(&grads, &groups, lr);
    params.check_finite()?;
    Ok(loss)
}

/// Registers fresh adapters for `lang`. Outside the pretrain stage the
/// language is marked as an extension, the only kind trainable in `Extend`.
pub fn add_language(params: &mut ModularEncoderParams, lang: LanguageId, seed: u64) -> Result<()> {
    if params.has_language(&lang) {
        return Err(Error::DuplicateLanguage(lang.to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = init_adapters(&params.config, &mut rng);
    if params.stage != Stage::Pretrain {
        params.extension_languages.insert(lang.clone());
    }
    params.weights.adapters.insert(lang, blocks);
    Ok(())
}
