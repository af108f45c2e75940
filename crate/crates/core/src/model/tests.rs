use std::collections::BTreeSet;

use rand::Rng;

use super::*;
use crate::util::derive_rng;

fn small_cfg() -> ModelConfig {
    ModelConfig::new(2, 16, 4, 23, 24, 11)
}

fn sample_batch(cfg: &ModelConfig, seed: u64, n: usize) -> Vec<TrainExample> {
    let mut rng = derive_rng(seed, "batch");
    (0..n)
        .map(|_| {
            let len = rng.gen_range(4..10usize);
            let tokens: Vec<TokenId> =
                (0..len).map(|_| rng.gen_range(0..cfg.vocab_size as u32)).collect();
            let answer_start = rng.gen_range(1..len);
            TrainExample::new(tokens, answer_start)
        })
        .collect()
}

#[test]
fn init_is_deterministic() {
    let cfg = small_cfg();
    let a = MicroTransformer::init(&cfg).unwrap();
    let b = MicroTransformer::init(&cfg).unwrap();
    assert_eq!(a.checksum(), b.checksum());

    let mut cfg2 = cfg.clone();
    cfg2.seed = 12;
    let c = MicroTransformer::init(&cfg2).unwrap();
    assert_ne!(a.checksum(), c.checksum());
}

#[test]
fn invalid_config_is_rejected() {
    let mut cfg = small_cfg();
    cfg.num_heads = 3; // does not divide 16
    assert!(matches!(MicroTransformer::init(&cfg), Err(crate::error::Error::Config(_))));
}

#[test]
fn low_rank_adapters_start_inert() {
    let mut cfg = small_cfg();
    cfg.adapter_mode = AdapterMode::LowRank;
    cfg.adapter_rank = 4;
    let model = MicroTransformer::init(&cfg).unwrap();
    let tokens = [1u32, 5, 9, 2];
    let base_logits = model.forward(&tokens).unwrap();

    // B is zero-initialized, so scrambling A must not change the output
    let mut scrambled = model.clone();
    for layer in 1..=cfg.num_layers {
        for target in AdapterTarget::ALL {
            let id = ParameterUnitId::new(layer, UnitKind::AdapterB(target));
            assert_eq!(scrambled.unit(id).unwrap().frobenius_norm(), 0.0);
            let a_id = ParameterUnitId::new(layer, UnitKind::AdapterA(target));
            scrambled.unit_mut(a_id).unwrap().fill(7.5);
        }
    }
    assert_eq!(scrambled.forward(&tokens).unwrap(), base_logits);
}

#[test]
fn forward_rejects_bad_inputs() {
    let cfg = small_cfg();
    let model = MicroTransformer::init(&cfg).unwrap();
    assert!(model.forward(&[cfg.vocab_size as u32]).is_err());
    let too_long = vec![0u32; cfg.max_seq_len + 1];
    assert!(model.forward(&too_long).is_err());
}

#[test]
fn recorded_counts_respect_token_count() {
    let cfg = small_cfg();
    let model = MicroTransformer::init(&cfg).unwrap();
    let tokens = [3u32, 7, 1, 0, 9, 9, 2];
    let mut rec = ActivationRecord::new(cfg.num_layers, cfg.ffn_dim);
    model.forward_recorded(&tokens, &mut rec).unwrap();
    for l in 0..cfg.num_layers {
        let layer = rec.layer(l);
        assert_eq!(layer.token_count, tokens.len() as u64);
        assert!(layer.positive_counts.iter().all(|&c| c <= layer.token_count));
    }
}

#[test]
fn record_merge_matches_concatenation() {
    let cfg = small_cfg();
    let model = MicroTransformer::init(&cfg).unwrap();
    let a: Vec<TokenId> = vec![1, 2, 3, 4];
    let b: Vec<TokenId> = vec![9, 8, 7];
    let mut ra = ActivationRecord::new(cfg.num_layers, cfg.ffn_dim);
    let mut rb = ActivationRecord::new(cfg.num_layers, cfg.ffn_dim);
    model.forward_recorded(&a, &mut ra).unwrap();
    model.forward_recorded(&b, &mut rb).unwrap();
    ra.merge(&rb);

    let mut rc = ActivationRecord::new(cfg.num_layers, cfg.ffn_dim);
    model.forward_recorded(&a, &mut rc).unwrap();
    model.forward_recorded(&b, &mut rc).unwrap();
    assert_eq!(ra, rc);
}

#[test]
fn uniform_logits_loss_is_ln_vocab() {
    // a model with zeroed head emits identical logits for every token
    let cfg = small_cfg();
    let mut model = MicroTransformer::init(&cfg).unwrap();
    model.head.fill(0.0);
    let ex = TrainExample::new(vec![1, 2, 3], 2);
    let loss = model.loss(&[ex]).unwrap();
    assert!((loss - (cfg.vocab_size as f64).ln()).abs() < 1e-12);
}

#[test]
fn duplicated_batch_gives_identical_loss_and_grads() {
    let cfg = small_cfg();
    let model = MicroTransformer::init(&cfg).unwrap();
    let batch = sample_batch(&cfg, 3, 5);
    let (loss1, grads1) = model.loss_and_grads(&batch).unwrap();

    let mut doubled = batch.clone();
    doubled.extend(batch.iter().cloned());
    let (loss2, grads2) = model.loss_and_grads(&doubled).unwrap();
    assert_eq!(loss1.to_bits(), loss2.to_bits());
    for (id, g1) in &grads1 {
        let g2 = &grads2[id];
        assert_eq!(g1.data(), g2.data(), "gradient mismatch for {id}");
    }
}

#[test]
fn empty_batch_is_input_error() {
    let cfg = small_cfg();
    let model = MicroTransformer::init(&cfg).unwrap();
    assert!(matches!(model.loss_and_grads(&[]), Err(crate::error::Error::Input(_))));
}

fn grad_check(cfg: &ModelConfig, samples: usize, seed: u64) {
    let model = MicroTransformer::init(cfg).unwrap();
    let batch = sample_batch(cfg, seed, 3);
    let (_, grads) = model.loss_and_grads(&batch).unwrap();

    let mut rng = derive_rng(seed, "grad-check");
    let ids = model.unit_ids();
    let step = 1e-4;
    for _ in 0..samples {
        let id = ids[rng.gen_range(0..ids.len())];
        let unit = model.unit(id).unwrap();
        let r = rng.gen_range(0..unit.rows());
        let c = rng.gen_range(0..unit.cols());
        let analytic = grads[&id].get(r, c);

        let mut plus = model.clone();
        let w = plus.unit(id).unwrap().get(r, c);
        plus.unit_mut(id).unwrap().set(r, c, w + step);
        let lp = plus.loss(&batch).unwrap();
        let mut minus = model.clone();
        minus.unit_mut(id).unwrap().set(r, c, w - step);
        let lm = minus.loss(&batch).unwrap();
        let numeric = (lp - lm) / (2.0 * step);

        let rel = (analytic - numeric).abs() / analytic.abs().max(1e-12);
        assert!(
            rel < 1e-4,
            "gradient mismatch at {id}[{r},{c}]: analytic {analytic}, numeric {numeric}, rel {rel}"
        );
    }
}

#[test]
fn gradients_match_finite_differences_full_mode() {
    grad_check(&small_cfg(), 60, 21);
}

#[test]
fn gradients_match_finite_differences_low_rank() {
    let mut cfg = small_cfg();
    cfg.adapter_mode = AdapterMode::LowRank;
    cfg.adapter_rank = 3;
    // adapter B gradients are exercised at B = 0; nudge B off zero too
    let model = MicroTransformer::init(&cfg).unwrap();
    drop(model);
    grad_check(&cfg, 40, 22);
}

#[test]
fn embedding_and_head_gradients_match_finite_differences() {
    let cfg = small_cfg();
    let model = MicroTransformer::init(&cfg).unwrap();
    let batch = sample_batch(&cfg, 5, 2);
    let (_, full) = model.loss_and_grads_full(&batch).unwrap();
    let step = 1e-4;

    // one embedding row that actually occurs in the batch, one head column
    let tok = batch[0].tokens[0] as usize;
    for (name, r, c, analytic) in [
        ("embedding", tok, 3, full.embedding.get(tok, 3)),
        ("head", 2, 7, full.head.get(2, 7)),
        ("positional", 1, 4, full.positional.get(1, 4)),
    ] {
        let poke = |m: &mut MicroTransformer, delta: f64| match name {
            "embedding" => {
                let w = m.embedding.get(r, c);
                m.embedding.set(r, c, w + delta);
            }
            "head" => {
                let w = m.head.get(r, c);
                m.head.set(r, c, w + delta);
            }
            _ => {
                let w = m.positional.get(r, c);
                m.positional.set(r, c, w + delta);
            }
        };
        let mut plus = model.clone();
        poke(&mut plus, step);
        let mut minus = model.clone();
        poke(&mut minus, -step);
        let numeric = (plus.loss(&batch).unwrap() - minus.loss(&batch).unwrap()) / (2.0 * step);
        let rel = (analytic - numeric).abs() / analytic.abs().max(1e-12);
        assert!(rel < 1e-4, "{name}[{r},{c}]: analytic {analytic} numeric {numeric}");
    }
}

#[test]
fn masked_update_touches_only_the_mask() {
    let cfg = small_cfg();
    let mut model = MicroTransformer::init(&cfg).unwrap();
    let batch = sample_batch(&cfg, 9, 4);
    let (_, grads) = model.loss_and_grads(&batch).unwrap();

    let before: Vec<(ParameterUnitId, String)> =
        model.unit_ids().iter().map(|&id| (id, model.unit_checksum(id).unwrap())).collect();

    // empty mask: nothing moves
    let initial = model.checksum();
    model.masked_update(&grads, &BTreeSet::new(), 0.1).unwrap();
    assert_eq!(model.checksum(), initial);

    // zero learning rate: nothing moves
    let all: BTreeSet<_> = model.unit_ids().into_iter().collect();
    model.masked_update(&grads, &all, 0.0).unwrap();
    assert_eq!(model.checksum(), initial);

    // single-unit mask: exactly that unit changes
    let target = ParameterUnitId::new(2, UnitKind::VUp);
    let mask: BTreeSet<_> = [target].into_iter().collect();
    model.masked_update(&grads, &mask, 0.1).unwrap();
    for (id, checksum) in &before {
        let now = model.unit_checksum(*id).unwrap();
        if *id == target {
            assert_ne!(now, *checksum, "masked unit should change");
        } else {
            assert_eq!(now, *checksum, "unmasked unit {id} changed");
        }
    }
    assert_eq!(model.frozen_checksum(), MicroTransformer::init(&cfg).unwrap().frozen_checksum());
}

#[test]
fn decode_is_deterministic_and_bounded() {
    let cfg = small_cfg();
    let model = MicroTransformer::init(&cfg).unwrap();
    let prompt = [4u32, 2, 17];
    let eos = 0u32;
    let a = model.decode_greedy(&prompt, 8, eos).unwrap();
    let b = model.decode_greedy(&prompt, 8, eos).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 8);
    assert!(model.decode_greedy(&prompt, 0, eos).unwrap().is_empty());
    assert!(model.decode_greedy(&prompt, cfg.max_seq_len, eos).is_err());
}

#[test]
fn checkpoint_roundtrip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let cfg = small_cfg();
    let model = MicroTransformer::init(&cfg).unwrap();
    model.save(&path).unwrap();

    let loaded = MicroTransformer::load(&path).unwrap();
    assert_eq!(loaded.checksum(), model.checksum());

    // truncation produces a load error, not a partial model
    let bytes = std::fs::read(&path).unwrap();
    let cut = path.with_file_name("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(
        MicroTransformer::load(&cut),
        Err(crate::error::Error::CheckpointTruncated(_))
    ));

    // version mismatch is its own error
    let mut forged = bytes.clone();
    forged[4] = 99;
    let versioned = path.with_file_name("versioned.ckpt");
    std::fs::write(&versioned, &forged).unwrap();
    assert!(matches!(
        MicroTransformer::load(&versioned),
        Err(crate::error::Error::CheckpointVersion { found: 99, .. })
    ));

    // a checkpoint from a different config fails the expected-config check
    let mut other_cfg = cfg.clone();
    other_cfg.model_dim = 32;
    other_cfg.ffn_dim = 128;
    assert!(matches!(
        MicroTransformer::load_expected(&path, &other_cfg),
        Err(crate::error::Error::CheckpointShape(_))
    ));

    // non-checkpoint bytes are a format error
    let junk = path.with_file_name("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint at all").unwrap();
    assert!(matches!(MicroTransformer::load(&junk), Err(crate::error::Error::Format(_))));
}

#[test]
fn low_rank_masked_update_is_adapter_granular() {
    let mut cfg = small_cfg();
    cfg.adapter_mode = AdapterMode::LowRank;
    cfg.adapter_rank = 3;
    let mut model = MicroTransformer::init(&cfg).unwrap();
    let frozen_before = model.frozen_checksum();
    let batch = sample_batch(&cfg, 13, 4);
    let (_, grads) = model.loss_and_grads(&batch).unwrap();
    assert_eq!(grads.len(), cfg.num_layers * 8);

    let target = ParameterUnitId::new(1, UnitKind::AdapterB(AdapterTarget::Query));
    let mask: BTreeSet<_> = [target].into_iter().collect();
    model.masked_update(&grads, &mask, 0.5).unwrap();
    // base matrices (frozen in low-rank mode) must be untouched
    assert_eq!(model.frozen_checksum(), frozen_before);
}
