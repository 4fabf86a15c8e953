//! Toy modular encoder: shared layers with per-language bottleneck adapters
//! at every layer, a linear output projection, the contrastive training
//! objective and the staged freezing protocol.
//!
//! Stages and what they may update:
//!
//! | stage    | embedding | shared | output | adapters              |
//! |----------|-----------|--------|--------|-----------------------|
//! | pretrain | yes       | yes    | no     | sample language       |
//! | finetune | no        | yes    | yes    | no                    |
//! | zeroshot | no        | no     | no     | no                    |
//! | extend   | no        | no     | no     | newly added languages |

mod checkpoint;
mod forward;
mod loss;
mod params;
mod train;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{encode, encode_with_route};
pub use loss::{
    build_inbatch_negatives, inbatch_loss, pairwise_loss, total_loss, total_loss_and_grad,
    total_loss_embedded, Batch, EmbeddedTriple, TrainingTriple,
};
pub use params::{
    AdapterBlock, EncoderConfig, ModularEncoderParams, ParamGroup, SharedLayer, Stage, Weights,
    INIT_SCALE,
};
pub use train::{add_language, finetune_step, mask_tokens, mlm_loss_and_grad, mlm_step};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::scoring::{prepare_passage, prepare_query, LanguageId, TokenId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 64,
            hidden_dim: 8,
            bottleneck_dim: 3,
            num_layers: 2,
            output_dim: 5,
            max_positions: 16,
        }
    }

    fn lang(s: &str) -> LanguageId {
        LanguageId::from(s)
    }

    fn model() -> ModularEncoderParams {
        ModularEncoderParams::new(small_config(), &[lang("a"), lang("b")], 7).unwrap()
    }

    fn random_tokens(rng: &mut ChaCha8Rng, len: usize) -> Vec<TokenId> {
        (0..len).map(|_| rng.gen_range(4..64)).collect()
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, language: &str) -> Batch {
        let triples = (0..n)
            .map(|_| {
                let ql = rng.gen_range(1..4);
                let pl = rng.gen_range(1..8);
                let nl = rng.gen_range(1..8);
                TrainingTriple::new(
                    prepare_query(&random_tokens(rng, ql), 6, lang(language)).unwrap(),
                    prepare_passage(&random_tokens(rng, pl), 10, lang(language)).unwrap(),
                    prepare_passage(&random_tokens(rng, nl), 10, lang(language)).unwrap(),
                )
                .unwrap()
            })
            .collect();
        Batch::new(triples).unwrap()
    }

    #[test]
    fn encode_shape_and_determinism() {
        let params = model();
        let seq = prepare_passage(&[5, 6, 7, 8], 10, lang("a")).unwrap();
        let h1 = encode(&seq, &params).unwrap();
        let h2 = encode(&seq, &params).unwrap();
        assert_eq!(h1.rows(), 6);
        assert_eq!(h1.dim(), 5);
        let bits = |h: &crate::scoring::TermEmbeddingMatrix| {
            h.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&h1), bits(&h2));
    }

    #[test]
    fn routing_isolation() {
        let params = model();
        let mut other = params.clone();
        for block in other.weights_mut().adapters.get_mut(&lang("b")).unwrap() {
            block.up.mapv_inplace(|v| v * 3.0 + 0.1);
        }
        let seq = prepare_query(&[9, 10], 6, lang("a")).unwrap();
        assert_eq!(encode(&seq, &params).unwrap(), encode(&seq, &other).unwrap());
        let seq_b = prepare_query(&[9, 10], 6, lang("b")).unwrap();
        assert_ne!(encode(&seq_b, &params).unwrap(), encode(&seq_b, &other).unwrap());
    }

    #[test]
    fn unknown_language_and_bad_tokens() {
        let params = model();
        let seq = prepare_query(&[9], 6, lang("zz")).unwrap();
        assert!(matches!(encode(&seq, &params), Err(Error::UnknownLanguage(_))));
        let seq = prepare_query(&[64], 6, lang("a")).unwrap();
        assert!(matches!(encode(&seq, &params), Err(Error::OutOfRange { .. })));
    }

    /// Central differences over every coordinate of every group.
    fn check_gradients(
        params: &ModularEncoderParams,
        analytic: &Weights,
        loss: impl Fn(&ModularEncoderParams) -> f64,
        tol: f64,
    ) {
        let eps = 1e-6;
        for group in params.weights().groups() {
            let grads: Vec<f64> = analytic.group_slices(&group).concat();
            let mut probe = params.clone();
            for (idx, &a) in grads.iter().enumerate() {
                let set = |p: &mut ModularEncoderParams, delta: f64| {
                    let mut k = idx;
                    for s in p.weights_mut().group_slices_mut(&group) {
                        if k < s.len() {
                            s[k] += delta;
                            return;
                        }
                        k -= s.len();
                    }
                };
                set(&mut probe, eps);
                let up = loss(&probe);
                set(&mut probe, -2.0 * eps);
                let down = loss(&probe);
                set(&mut probe, eps);
                let numeric = (up - down) / (2.0 * eps);
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-6));
                assert!(
                    err <= tol || (a - numeric).abs() < 1e-9,
                    "{group:?}[{idx}]: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = model();
        let batch = random_batch(&mut rng, 3, "a");
        let (loss, grads) = total_loss_and_grad(&batch, &params).unwrap();
        assert!((loss - total_loss(&batch, &params).unwrap()).abs() < 1e-12);
        check_gradients(&params, &grads, |p| total_loss(&batch, p).unwrap(), 1e-4);
    }

    #[test]
    fn mlm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = model();
        let sample = prepare_passage(&random_tokens(&mut rng, 7), 16, lang("b")).unwrap();
        let (corrupted, targets) = mask_tokens(&sample.token_ids, 0.5, &mut rng);
        assert!(!targets.is_empty());
        let (_, grads) = mlm_loss_and_grad(&params, &corrupted, &targets, &lang("b")).unwrap();
        check_gradients(
            &params,
            &grads,
            |p| mlm_loss_and_grad(p, &corrupted, &targets, &lang("b")).unwrap().0,
            1e-4,
        );
    }

    #[test]
    fn zero_mask_rate_is_a_no_op() {
        let mut params = model();
        let before = params.clone();
        let sample = prepare_passage(&[5, 6, 7], 16, lang("a")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loss = mlm_step(&mut params, &sample, 0.0, 0.5, &mut rng).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(params, before);
    }

    #[test]
    fn mlm_step_leaves_other_language_untouched() {
        let mut params = model();
        let b_before = params.group_bytes(&ParamGroup::Adapter(lang("b")));
        let a_before = params.group_bytes(&ParamGroup::Adapter(lang("a")));
        let out_before = params.group_bytes(&ParamGroup::Output);
        let sample = prepare_passage(&[5, 6, 7, 8, 9, 10], 16, lang("a")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        mlm_step(&mut params, &sample, 1.0, 0.5, &mut rng).unwrap();
        assert_eq!(params.group_bytes(&ParamGroup::Adapter(lang("b"))), b_before);
        assert_eq!(params.group_bytes(&ParamGroup::Output), out_before);
        assert_ne!(params.group_bytes(&ParamGroup::Adapter(lang("a"))), a_before);
    }

    #[test]
    fn mlm_training_lowers_loss() {
        // two languages over disjoint token ranges with a fixed bigram structure
        let mut params = model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let make = |rng: &mut ChaCha8Rng, base: u32| {
            let start = rng.gen_range(0..10u32);
            let toks: Vec<u32> = (0..8).map(|k| base + (start + k) % 10).collect();
            toks
        };
        let mut losses = Vec::new();
        for step in 0..200 {
            let (base, l) = if step % 2 == 0 { (4, "a") } else { (30, "b") };
            let sample = prepare_passage(&make(&mut rng, base), 16, lang(l)).unwrap();
            losses.push(mlm_step(&mut params, &sample, 0.3, 0.5, &mut rng).unwrap());
        }
        let first: f64 = losses[..20].iter().sum::<f64>() / 20.0;
        let last: f64 = losses[180..].iter().sum::<f64>() / 20.0;
        assert!(last < first, "first {first} last {last}");
        assert!(losses[199] < losses[0]);
    }

    #[test]
    fn finetune_freezes_adapters_and_embeddings() {
        let mut params = model();
        params.set_stage(Stage::Finetune).unwrap();
        let frozen = [
            ParamGroup::Embedding,
            ParamGroup::Adapter(lang("a")),
            ParamGroup::Adapter(lang("b")),
        ];
        let before: Vec<_> = frozen.iter().map(|g| params.group_bytes(g)).collect();
        let shared_before = params.group_bytes(&ParamGroup::Shared);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let batch = random_batch(&mut rng, 3, "a");
            finetune_step(&mut params, &batch, 0.1).unwrap();
        }
        let after: Vec<_> = frozen.iter().map(|g| params.group_bytes(g)).collect();
        assert_eq!(before, after);
        assert_ne!(params.group_bytes(&ParamGroup::Shared), shared_before);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut params = model();
        params.set_stage(Stage::Finetune).unwrap();
        let before = params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = random_batch(&mut rng, 2, "a");
        let loss = finetune_step(&mut params, &batch, 0.0).unwrap();
        assert!(loss > 0.0);
        assert_eq!(params.to_bytes(), before.to_bytes());
    }

    #[test]
    fn finetune_lowers_loss() {
        let mut params = model();
        params.set_stage(Stage::Finetune).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // positives repeat the query tokens, negatives do not
        let batches: Vec<Batch> = (0..4)
            .map(|_| {
                let triples = (0..4)
                    .map(|_| {
                        let q = random_tokens(&mut rng, 2);
                        let mut p = random_tokens(&mut rng, 3);
                        p.extend(&q);
                        let n = random_tokens(&mut rng, 5);
                        TrainingTriple::new(
                            prepare_query(&q, 6, lang("a")).unwrap(),
                            prepare_passage(&p, 10, lang("a")).unwrap(),
                            prepare_passage(&n, 10, lang("a")).unwrap(),
                        )
                        .unwrap()
                    })
                    .collect();
                Batch::new(triples).unwrap()
            })
            .collect();
        let initial: f64 = batches.iter().map(|b| total_loss(b, &params).unwrap()).sum();
        for step in 0..200 {
            finetune_step(&mut params, &batches[step % batches.len()], 0.002).unwrap();
        }
        let fin: f64 = batches.iter().map(|b| total_loss(b, &params).unwrap()).sum();
        assert!(fin < initial, "initial {initial} final {fin}");
    }

    #[test]
    fn stage_errors() {
        let mut params = model();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = random_batch(&mut rng, 2, "a");
        assert!(matches!(
            finetune_step(&mut params, &batch, 0.1),
            Err(Error::Stage(_))
        ));
        params.set_stage(Stage::Finetune).unwrap();
        let sample = prepare_passage(&[5, 6], 16, lang("a")).unwrap();
        assert!(matches!(
            mlm_step(&mut params, &sample, 0.5, 0.1, &mut rng),
            Err(Error::Stage(_))
        ));
        assert!(params.set_stage(Stage::Pretrain).is_err());

        let mixed = Batch::new(vec![
            random_batch(&mut rng, 1, "a").triples()[0].clone(),
            random_batch(&mut rng, 1, "b").triples()[0].clone(),
        ])
        .unwrap();
        assert!(matches!(
            finetune_step(&mut params, &mixed, 0.1),
            Err(Error::MixedLanguage(_))
        ));
    }

    #[test]
    fn add_language_isolation() {
        let mut params = model();
        params.set_stage(Stage::Finetune).unwrap();
        let seq = prepare_query(&[9, 10, 11], 6, lang("a")).unwrap();
        let before = encode(&seq, &params).unwrap();
        add_language(&mut params, lang("c"), 42).unwrap();
        assert_eq!(encode(&seq, &params).unwrap(), before);
        assert!(matches!(
            add_language(&mut params, lang("c"), 1),
            Err(Error::DuplicateLanguage(_))
        ));

        params.set_stage(Stage::Extend).unwrap();
        let watched = [
            ParamGroup::Embedding,
            ParamGroup::Shared,
            ParamGroup::Output,
            ParamGroup::Adapter(lang("a")),
            ParamGroup::Adapter(lang("b")),
        ];
        let snapshot: Vec<_> = watched.iter().map(|g| params.group_bytes(g)).collect();
        let c_before = params.group_bytes(&ParamGroup::Adapter(lang("c")));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let sample = prepare_passage(&random_tokens(&mut rng, 6), 16, lang("c")).unwrap();
            mlm_step(&mut params, &sample, 0.3, 0.2, &mut rng).unwrap();
        }
        let after: Vec<_> = watched.iter().map(|g| params.group_bytes(g)).collect();
        assert_eq!(snapshot, after);
        assert_ne!(params.group_bytes(&ParamGroup::Adapter(lang("c"))), c_before);

        // old languages cannot be trained in the extend stage
        let sample = prepare_passage(&[5, 6, 7], 16, lang("a")).unwrap();
        assert!(matches!(
            mlm_step(&mut params, &sample, 1.0, 0.2, &mut rng),
            Err(Error::Stage(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut params = model();
        params.set_stage(Stage::Finetune).unwrap();
        add_language(&mut params, lang("new"), 3).unwrap();
        let bytes = params.to_bytes();
        let back = ModularEncoderParams::from_bytes(&bytes).unwrap();
        assert_eq!(back, params);
        assert_eq!(back.to_bytes(), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            ModularEncoderParams::from_bytes(&bad),
            Err(Error::Format(_))
        ));
        assert!(ModularEncoderParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
