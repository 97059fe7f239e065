mod common;

use common::*;
use kvlab_core::model::{sample_tap_layers, train_target, TargetConfig, TargetModel, TargetTrainConfig};
use kvlab_core::nn::causal_mask;
use kvlab_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn logits_match_loop_reference() {
    for (seed, qk_norm) in [(0u64, false), (1, true), (2, false)] {
        let m = random_target(TargetConfig { qk_norm, ..tiny_target() }, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = random_tokens(&mut rng, 9, m.config.vocab_size);
        let got = m.logits(&tokens).unwrap();
        let want = naive_target(&m, &tokens);
        for p in 0..tokens.len() {
            assert!(max_diff(got.row(p), &want.logits[p]) < 1e-10, "seed {seed} pos {p}");
        }
        let mut cache = m.new_cache();
        m.prefill(&mut cache, &tokens).unwrap();
        for l in 0..m.config.n_layers {
            for p in 0..tokens.len() {
                assert!(max_diff(cache.key_row(l, p), &want.keys[l][p]) < 1e-10);
                assert!(max_diff(cache.value_row(l, p), &want.values[l][p]) < 1e-10);
                assert!(max_diff(cache.hidden_row(l, p), &want.hidden[l][p]) < 1e-10);
            }
        }
    }
}

#[test]
fn single_token_is_position_independent_of_cache() {
    let m = random_target(tiny_target(), 3);
    let a = m.logits(&[4]).unwrap();
    let mut cache = m.new_cache();
    let b = m.forward_step(4, &mut cache).unwrap();
    assert_eq!(a.row(0), b.logits.as_slice());
    assert_eq!(cache.len(), 1);
}

#[test]
fn rollback_is_safe() {
    let m = random_target(tiny_target(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tokens = random_tokens(&mut rng, 12, m.config.vocab_size);
    let mut cache = m.new_cache();
    m.prefill(&mut cache, &tokens[..8]).unwrap();
    let snapshot = cache.clone();
    let fresh = m.prefill(&mut cache.clone(), &tokens[8..]).unwrap();
    m.prefill(&mut cache, &[1, 2, 3]).unwrap();
    cache.rollback(8).unwrap();
    assert_eq!(cache, snapshot);
    let again = m.prefill(&mut cache, &tokens[8..]).unwrap();
    assert_eq!(again.logits, fresh.logits);
    assert!(matches!(cache.rollback(99), Err(Error::Contract(_))));
}

#[test]
fn greedy_decode_follows_argmax() {
    let m = random_target(tiny_target(), 6);
    let prompt = [1, 7, 3];
    let out = m.greedy_decode(&prompt, 6).unwrap();
    let mut seq = prompt.to_vec();
    for &tok in &out {
        let nt = naive_target(&m, &seq);
        assert_eq!(tok, argmax(nt.logits.last().unwrap()));
        seq.push(tok);
    }
    assert!(m.greedy_decode(&prompt, 0).unwrap().is_empty());
    assert!(matches!(m.greedy_decode(&[], 3), Err(Error::Input(_))));
    assert!(matches!(m.greedy_decode(&prompt, 200), Err(Error::Capacity(_))));
}

#[test]
fn extend_rejects_bad_inputs() {
    let m = random_target(tiny_target(), 7);
    let cache = m.new_cache();
    assert!(matches!(m.extend(&cache, &[1, 2], &[0], &[true]), Err(Error::Dimension { .. })));
    assert!(matches!(m.extend(&cache, &[99], &[0], &[true]), Err(Error::Input(_))));
    assert!(matches!(m.extend(&cache, &[1], &[500], &[true]), Err(Error::Capacity(_))));
}

#[test]
fn target_training_reduces_loss() {
    let cfg = TargetConfig { max_seq_len: 16, ..tiny_target() };
    let mut m = TargetModel::<f64>::init(cfg, 0).unwrap();
    let corpus: Vec<Vec<usize>> = (0..4).map(|s| (0..12).map(|i| (i * (s + 1)) % 13).collect()).collect();
    let losses = train_target(
        &mut m,
        &corpus,
        &TargetTrainConfig {
            steps: 60,
            lr: 1e-2,
            batch: 2,
            ..TargetTrainConfig::default()
        },
    )
    .unwrap();
    assert!(losses[59] < 0.5 * losses[0], "{} -> {}", losses[0], losses[59]);
    assert!(matches!(train_target(&mut m, &[], &TargetTrainConfig::default()), Err(Error::Input(_))));
}

#[test]
fn generic_scalar_f32_tracks_f64() {
    let m64 = random_target(tiny_target(), 8);
    let w32 = m64.weights.try_map(|t| Ok(t.cast::<f32>())).unwrap();
    let m32 = TargetModel::<f32> {
        config: m64.config.clone(),
        weights: w32,
    };
    let tokens = [3, 1, 4, 1, 5, 9, 2, 6];
    let a = m64.logits(&tokens).unwrap();
    let b = m32.logits(&tokens).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - *y as f64).abs() < 1e-3 * (1.0 + x.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn incremental_matches_full(seed in 0u64..10_000, n in 1usize..14, split in 0usize..14) {
        let m = random_target(tiny_target(), seed % 7);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = random_tokens(&mut rng, n, m.config.vocab_size);
        let full = m.logits(&tokens).unwrap();
        let split = split.min(n);
        let mut cache = m.new_cache();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        if split > 0 {
            let out = m.prefill(&mut cache, &tokens[..split]).unwrap();
            rows.extend((0..split).map(|r| out.logits.row(r).to_vec()));
        }
        for &t in &tokens[split..] {
            rows.push(m.forward_step(t, &mut cache).unwrap().logits);
        }
        for p in 0..n {
            prop_assert!(max_diff(&rows[p], full.row(p)) < 1e-9);
        }
    }

    #[test]
    fn masked_batch_equals_sequential(seed in 0u64..10_000, past in 0usize..6) {
        // a batch whose mask only exposes the cache and the row itself
        let m = random_target(tiny_target(), seed % 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prefix = random_tokens(&mut rng, past, m.config.vocab_size);
        let extra = random_tokens(&mut rng, 3, m.config.vocab_size);
        let mut cache = m.new_cache();
        if past > 0 {
            m.prefill(&mut cache, &prefix).unwrap();
        }
        let total = past + 3;
        let mut mask = vec![false; 3 * total];
        for r in 0..3 {
            mask[r * total..r * total + past].fill(true);
            mask[r * total + past + r] = true;
        }
        let positions = vec![past; 3];
        let out = m.extend(&cache, &extra, &positions, &mask).unwrap();
        for r in 0..3 {
            let mut seq = prefix.clone();
            seq.push(extra[r]);
            let want = naive_target(&m, &seq);
            prop_assert!(max_diff(out.logits.row(r), want.logits.last().unwrap()) < 1e-9);
        }
        let causal = m.extend(&cache, &extra, &[past, past + 1, past + 2], &causal_mask(past, 3)).unwrap();
        let mut seq = prefix.clone();
        seq.extend(&extra);
        let want = naive_target(&m, &seq);
        for r in 0..3 {
            prop_assert!(max_diff(causal.logits.row(r), &want.logits[past + r]) < 1e-9);
        }
    }

    #[test]
    fn tap_layers_are_spread(l in 1usize..40, s in 1usize..40) {
        prop_assume!(s <= l);
        let taps = sample_tap_layers(l, s).unwrap();
        prop_assert_eq!(taps.len(), s);
        prop_assert!(taps.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(taps.iter().all(|&t| t < l));
        if s >= 2 {
            prop_assert_eq!(taps[0], 0);
            prop_assert_eq!(taps[s - 1], l - 1);
        }
    }
}
