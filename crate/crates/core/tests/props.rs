//! Randomized invariant checks over the public API: the audio codec, the
//! world generator's token bookkeeping, attention weight geometry, the text
//! metrics against brute-force oracles, batch sampling contracts, the tensor
//! codec, gradient reversal, and config overrides.

use std::collections::{BTreeSet, HashMap};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use skipmib_core::config::{apply_overrides, RunConfig};
use skipmib_core::datagen::{
    generate_datasets, oracle_decode_audio, synth_audio, DatasetSpec, TriModalSample, World,
};
use skipmib_core::eval::{token_accuracy, token_error_rate, unigram_precision};
use skipmib_core::io::{decode_tensor, encode_tensor};
use skipmib_core::mib::memory_attend;
use skipmib_core::params::{ParamStore, Session};
use skipmib_core::tape::Tape;
use skipmib_core::tensor::Tensor;
use skipmib_core::training::{sample_batch, Strategy};

/// Textbook recursive edit distance, memoized; deliberately independent of
/// the two-row implementation under test.
fn edit_distance_slow(a: &[u32], b: &[u32], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let key = (a.len(), b.len());
    if let Some(&d) = memo.get(&key) {
        return d;
    }
    let sub = edit_distance_slow(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
    let del = edit_distance_slow(&a[1..], b, memo) + 1;
    let ins = edit_distance_slow(a, &b[1..], memo) + 1;
    let d = sub.min(del).min(ins);
    memo.insert(key, d);
    d
}

fn clipped_precision_slow(hyp: &[u32], reference: &[u32]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let mut ref_counts: HashMap<u32, usize> = HashMap::new();
    for &t in reference {
        *ref_counts.entry(t).or_default() += 1;
    }
    let mut hyp_counts: HashMap<u32, usize> = HashMap::new();
    for &t in hyp {
        *hyp_counts.entry(t).or_default() += 1;
    }
    let clipped: usize = hyp_counts
        .iter()
        .map(|(t, &c)| c.min(ref_counts.get(t).copied().unwrap_or(0)))
        .sum();
    clipped as f64 / hyp.len() as f64
}

fn check_sample_shapes(s: &TriModalSample, world: &World, from_a: bool) {
    assert_eq!(s.text.len(), 3, "every caption has three tokens");
    assert_eq!(s.image.is_some(), from_a);
    assert_eq!(s.audio.is_some(), !from_a);
    let legal = if from_a { &world.a_tokens } else { &world.b_tokens };
    for (pos, &t) in s.text.iter().enumerate() {
        assert!(legal.contains(&t), "token {t} outside the corpus vocabulary");
        let (part, _) = world.vocab.split(t).expect("token inside vocabulary");
        assert_eq!(part, pos, "caption order is color, shape, position");
    }
    if let Some(audio) = &s.audio {
        let decoded = oracle_decode_audio(audio, world.spec.frames_per_token).unwrap();
        assert_eq!(decoded, s.text, "audio must decode back to its caption");
    }
}

proptest! {
    #[test]
    fn audio_codec_round_trips(
        bands in 3usize..32,
        frames_per_token in 1usize..12,
        seq in prop::collection::vec(0u32..3, 1..6),
    ) {
        let tokens: Vec<u32> = seq.iter().map(|&t| t % bands as u32).collect();
        let audio = synth_audio(&tokens, frames_per_token, bands).unwrap();
        prop_assert_eq!(audio.dims(), &[tokens.len() * frames_per_token, bands]);
        let decoded = oracle_decode_audio(&audio, frames_per_token).unwrap();
        prop_assert_eq!(decoded, tokens);
    }

    #[test]
    fn attention_weights_are_simplex_rows_and_outputs_stay_bounded(
        n_heads in 1usize..5,
        dz_per_head in 1usize..6,
        dk_per_head in 1usize..6,
        n_k in 1usize..12,
        seed in 0u64..1000,
    ) {
        let d_z = n_heads * dz_per_head;
        let d_k = n_heads * dk_per_head;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store: ParamStore<f64> = ParamStore::new();
        let mut sess = Session::new(&store);
        let q_t = Tensor::<f64>::rand_uniform(&[d_z], -3.0, 3.0, &mut rng);
        let k_t = Tensor::<f64>::rand_uniform(&[n_k, d_z], -3.0, 3.0, &mut rng);
        // V entries in (-1, 1), as tanh(M) guarantees in the real model.
        let v_t = Tensor::<f64>::rand_uniform(&[n_k, d_k], -4.0, 4.0, &mut rng).map(f64::tanh);
        let q = sess.tape.constant(q_t);
        let k = sess.tape.constant(k_t);
        let v = sess.tape.constant(v_t);
        let rep = memory_attend(&mut sess, q, k, v, n_heads).unwrap();

        prop_assert_eq!(rep.weights.dims(), &[n_heads, n_k]);
        for h in 0..n_heads {
            let row = rep.weights.row(h);
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9, "head {} weights sum to {}", h, sum);
            prop_assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
        let u = sess.tape.value(rep.u);
        prop_assert_eq!(u.len(), d_k);
        prop_assert!(u.data().iter().all(|&x| x.abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn token_error_rate_matches_recursive_edit_distance(
        hyp in prop::collection::vec(0u32..5, 0..8),
        reference in prop::collection::vec(0u32..5, 1..8),
    ) {
        let got = token_error_rate(&hyp, &reference).unwrap();
        let want = edit_distance_slow(&hyp, &reference, &mut HashMap::new()) as f64
            / reference.len() as f64;
        prop_assert!((got - want).abs() < 1e-12);
        prop_assert_eq!(got == 0.0, hyp == reference);
    }

    #[test]
    fn unigram_precision_matches_counting_oracle(
        hyp in prop::collection::vec(0u32..5, 0..8),
        reference in prop::collection::vec(0u32..5, 0..8),
    ) {
        let got = unigram_precision(&hyp, &reference);
        prop_assert!((got - clipped_precision_slow(&hyp, &reference)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn token_accuracy_counts_aligned_positions(
        hyp in prop::collection::vec(0u32..5, 0..8),
        reference in prop::collection::vec(0u32..5, 1..8),
    ) {
        let got = token_accuracy(&hyp, &reference).unwrap();
        let matches = hyp.iter().zip(&reference).filter(|(h, r)| h == r).count();
        prop_assert!((got - matches as f64 / reference.len() as f64).abs() < 1e-12);
        if hyp == reference {
            prop_assert!((got - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_sampling_honors_the_strategy_contract(
        n_a in 1usize..20,
        n_b in 1usize..20,
        half in 1usize..8,
        step in 0u64..10,
        seed in 0u64..1000,
    ) {
        let bs = 2 * half;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mixed = sample_batch(&mut rng, n_a, n_b, Strategy::Mixing, bs, step).unwrap();
        prop_assert_eq!(mixed.a.len(), bs / 2);
        prop_assert_eq!(mixed.b.len(), bs / 2);
        prop_assert!(mixed.a.iter().all(|&i| i < n_a));
        prop_assert!(mixed.b.iter().all(|&i| i < n_b));

        let alt = sample_batch(&mut rng, n_a, n_b, Strategy::Alternate, bs, step).unwrap();
        if step % 2 == 0 {
            prop_assert_eq!(alt.a.len(), bs);
            prop_assert!(alt.b.is_empty());
            prop_assert!(alt.a.iter().all(|&i| i < n_a));
        } else {
            prop_assert!(alt.a.is_empty());
            prop_assert_eq!(alt.b.len(), bs);
            prop_assert!(alt.b.iter().all(|&i| i < n_b));
        }
    }

    #[test]
    fn tensor_codec_round_trips(
        dims in prop::collection::vec(1usize..5, 1..4),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t32 = Tensor::<f32>::rand_uniform(&dims, -1e6, 1e6, &mut rng);
        let back32: Tensor<f32> = decode_tensor(&encode_tensor(&t32)).unwrap();
        prop_assert!(back32.bit_eq(&t32));

        let t64 = Tensor::<f64>::rand_uniform(&dims, -1e6, 1e6, &mut rng);
        let back64: Tensor<f64> = decode_tensor(&encode_tensor(&t64)).unwrap();
        prop_assert!(back64.bit_eq(&t64));

        // The two dtypes must not be interchangeable.
        prop_assert!(decode_tensor::<f64>(&encode_tensor(&t32)).is_err());
    }

    #[test]
    fn gradient_reversal_is_identity_forward_and_negated_scaled_backward(
        xs in prop::collection::vec(-2.0f64..2.0, 1..6),
        ws in prop::collection::vec(-2.0f64..2.0, 1..6),
        lambda in -2.0f64..2.0,
    ) {
        let n = xs.len().min(ws.len());
        let x_t = Tensor::from_vec(&[n], xs[..n].to_vec());
        let w_t = Tensor::from_vec(&[n], ws[..n].to_vec());
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(x_t.clone());
        let y = tape.grad_reverse(x, lambda);
        prop_assert!(tape.value(y).bit_eq(&x_t), "forward must be the identity");
        let loss = tape.weighted_sum(y, &w_t);
        tape.backward(loss);
        for (g, w) in tape.grad(x).data().iter().zip(w_t.data()) {
            prop_assert!((g - (-lambda) * w).abs() < 1e-12);
        }
    }

    #[test]
    fn overrides_set_exactly_the_named_field(
        n_k in 1usize..64,
        lr in 1e-6f64..1.0,
    ) {
        let base = RunConfig::desk();
        let cfg = apply_overrides(
            &base,
            &[format!("model.n_k={n_k}"), format!("train.lr={lr}")],
        )
        .unwrap();
        prop_assert_eq!(cfg.model.n_k, n_k);
        prop_assert_eq!(cfg.train.lr, lr);
        // Untouched fields survive byte-for-byte.
        let mut expect = base.clone();
        expect.model.n_k = n_k;
        expect.train.lr = lr;
        prop_assert_eq!(cfg, expect);
    }
}

proptest! {
    // World generation renders images and audio, so keep the case count low.
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn shared_token_budget_is_exact_and_corpora_cover_the_vocabulary(
        vocab_size in 6usize..30,
        tenths in 1usize..=10,
        seed in 0u64..1000,
    ) {
        let overlap = tenths as f64 / 10.0;
        let spec = DatasetSpec {
            n_a: 4,
            n_b: 4,
            n_eval_a: 2,
            n_eval_b: 2,
            vocab_size,
            overlap_fraction: overlap,
            image_h: 8,
            image_w: 8,
            bands: vocab_size,
            frames_per_token: 2,
            seed,
        };
        spec.validate().unwrap();
        let world = generate_datasets(&spec).unwrap();

        let shared: BTreeSet<u32> =
            world.a_tokens.intersection(&world.b_tokens).copied().collect();
        let budget = (overlap * vocab_size as f64).round() as usize;
        prop_assert_eq!(shared.len(), budget, "shared token count must hit the budget");

        let union: BTreeSet<u32> =
            world.a_tokens.union(&world.b_tokens).copied().collect();
        let everything: BTreeSet<u32> = (0..vocab_size as u32).collect();
        prop_assert_eq!(union, everything, "the corpora must cover the vocabulary");
        prop_assert!(!world.a_tokens.is_empty() && !world.b_tokens.is_empty());

        prop_assert_eq!(world.a.len(), 4);
        prop_assert_eq!(world.b.len(), 4);
        prop_assert_eq!(world.eval_a.len(), 2);
        prop_assert_eq!(world.eval_b.len(), 2);
        for s in world.a.iter().chain(&world.eval_a) {
            check_sample_shapes(s, &world, true);
        }
        for s in world.b.iter().chain(&world.eval_b) {
            check_sample_shapes(s, &world, false);
        }
    }
}
