//! Randomized invariant checks over the data pipeline, objectives,
//! schedules, and numeric kernels.

use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mlmlab::data::{
    epoch_order, generate_synthetic, pairing_from_seed, ByteTokenizer, CorpusShard, SyntheticSpec,
};
use mlmlab::objectives::{apply_mlm_masking, clm_shift, MaskScope, MlmSpec, IGNORE_MARKER};
use mlmlab::tensor::optim::LrSchedule;
use mlmlab::tensor::tape::Tape;
use mlmlab::trainer::{detect_stages, entries_from_losses, StageParams, TrainConfig};
use mlmlab::{MaskPlane, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tokenizer_round_trips_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..1024)) {
        let tok = ByteTokenizer;
        let ids = tok.encode(&bytes);
        prop_assert!(ids.iter().all(|&t| t < 256));
        prop_assert_eq!(tok.decode(&ids).unwrap(), bytes);
    }

    #[test]
    fn shard_codec_round_trips_byte_identically(
        vocab in 1u32..512,
        raw_tokens in proptest::collection::vec(any::<u32>(), 0..400),
        cuts in proptest::collection::vec(any::<bool>(), 0..400),
    ) {
        let tokens: Vec<u32> = raw_tokens.iter().map(|&t| t % vocab).collect();
        let boundaries: Vec<u64> = cuts
            .iter()
            .take(tokens.len())
            .enumerate()
            .filter(|&(_, &c)| c)
            .map(|(i, _)| i as u64 + 1)
            .collect();
        let shard = CorpusShard::new(vocab, tokens, boundaries).unwrap();
        let bytes = shard.to_bytes();
        let back = CorpusShard::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.vocab_size(), shard.vocab_size());
        prop_assert_eq!(back.tokens(), shard.tokens());
        prop_assert_eq!(back.boundaries(), shard.boundaries());
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation(
        n in 1usize..600,
        seed in any::<u64>(),
        epoch in 0u64..50,
    ) {
        let order = epoch_order(n, seed, epoch);
        prop_assert_eq!(order.len(), n);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(epoch_order(n, seed, epoch), order);
    }

    #[test]
    fn masking_preserves_unselected_positions_and_original_targets(
        rows in 1usize..5,
        seq in 1usize..24,
        data_count in 2u32..40,
        seed in any::<u64>(),
        odd_only in any::<bool>(),
    ) {
        let mut spec = MlmSpec::standard(data_count, data_count + 1);
        if odd_only {
            spec.scope = MaskScope::OddOnly;
        }
        // Odd-only scope needs an odd position to exist.
        let seq = if odd_only && seq < 2 { 2 } else { seq };
        let tokens: Vec<u32> = (0..rows * seq).map(|i| (i as u32 * 7 + seed as u32) % data_count).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = apply_mlm_masking(&tokens, rows, &spec, &mut rng).unwrap();
        prop_assert_eq!(batch.inputs.len(), tokens.len());
        prop_assert_eq!(batch.targets.len(), tokens.len());

        let mut n_selected = 0usize;
        for i in 0..tokens.len() {
            if batch.targets[i] == IGNORE_MARKER {
                prop_assert_eq!(batch.inputs[i], tokens[i], "unselected position {} changed", i);
            } else {
                n_selected += 1;
                prop_assert_eq!(batch.targets[i], tokens[i], "target {} is not the original", i);
                let input = batch.inputs[i];
                prop_assert!(
                    input == spec.mask_token_id || input < spec.data_token_count(),
                    "corrupted input {} at {} is out of range", input, i
                );
                if odd_only {
                    prop_assert_eq!((i % seq) % 2, 1, "even position {} selected under odd-only scope", i);
                }
            }
        }
        prop_assert!(n_selected >= 1, "force-selection guarantees at least one prediction");

        let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
        let again = apply_mlm_masking(&tokens, rows, &spec, &mut rng2).unwrap();
        prop_assert_eq!(again.inputs, batch.inputs);
        prop_assert_eq!(again.targets, batch.targets);
    }

    #[test]
    fn clm_shift_predicts_every_next_token(
        rows in 1usize..5,
        seq in 2usize..24,
        vocab in 2u32..40,
    ) {
        let tokens: Vec<u32> = (0..rows * seq).map(|i| i as u32 % vocab).collect();
        let batch = clm_shift(&tokens, rows).unwrap();
        prop_assert_eq!(batch.seq, seq - 1);
        for r in 0..rows {
            for i in 0..seq - 1 {
                prop_assert_eq!(batch.inputs[r * (seq - 1) + i], tokens[r * seq + i]);
                prop_assert_eq!(batch.targets[r * (seq - 1) + i], tokens[r * seq + i + 1]);
            }
        }
    }

    #[test]
    fn lr_schedule_ramps_peaks_and_decays(
        peak in 1e-6f64..1.0,
        warmup in 0u64..200,
        extra in 1u64..2000,
        end_frac in 0.0f64..1.0,
    ) {
        let total = warmup + extra;
        let schedule = LrSchedule {
            peak_lr: peak,
            warmup_steps: warmup,
            total_steps: total,
            end_lr: peak * end_frac,
            power: 1.0,
        };
        schedule.validate().unwrap();
        if warmup > 0 {
            prop_assert_eq!(schedule.lr_at(0), 0.0);
        }
        prop_assert_eq!(schedule.lr_at(warmup), peak);
        prop_assert!((schedule.lr_at(total) - schedule.end_lr).abs() < 1e-15);
        let mut last = 0.0f64;
        for step in 0..=warmup {
            let lr = schedule.lr_at(step);
            prop_assert!(lr >= last - 1e-15, "warmup not monotone at {}", step);
            last = lr;
        }
        for step in warmup..=total {
            let lr = schedule.lr_at(step);
            prop_assert!(lr <= last + 1e-15, "decay not monotone at {}", step);
            prop_assert!(lr >= 0.0 && lr.is_finite());
            last = lr;
        }
    }

    #[test]
    fn synthetic_sequences_always_follow_the_pairing(
        n_keys in 1u32..32,
        n_sequences in 1usize..16,
        half_len in 1usize..8,
        seed in any::<u64>(),
        pairing_seed in any::<u64>(),
    ) {
        let spec = SyntheticSpec {
            n_keys,
            pairing: pairing_from_seed(n_keys, pairing_seed),
            seq_len: 2 * half_len,
            n_sequences,
            seed,
        };
        let shard = generate_synthetic(&spec).unwrap();
        prop_assert_eq!(shard.vocab_size(), 2 * n_keys + 3);
        prop_assert_eq!(shard.tokens().len(), n_sequences * spec.seq_len);
        prop_assert_eq!(shard.n_documents(), n_sequences);
        for pair in shard.tokens().chunks(2) {
            let (key, value) = (pair[0], pair[1]);
            prop_assert!(key < n_keys);
            prop_assert_eq!(value, spec.value_for(key));
        }
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_with_exact_zeros(
        n in 1usize..8,
        raw_scores in proptest::collection::vec(-50.0f64..50.0, 64),
        raw_mask in proptest::collection::vec(any::<bool>(), 64),
    ) {
        let mut allowed = vec![false; n * n];
        for q in 0..n {
            for k in 0..n {
                allowed[q * n + k] = raw_mask[q * 8 + k];
            }
            allowed[q * n + q] = true; // every row keeps its diagonal
        }
        let mask = Arc::new(MaskPlane::new(n, allowed.clone()).unwrap());
        let scores: Vec<f64> = (0..n * n).map(|i| raw_scores[i % 64]).collect();

        let mut tape = Tape::<f64>::new();
        let node = tape.leaf(&Tensor::new(vec![n, n], scores).unwrap());
        let soft = tape.softmax_masked(node, &mask).unwrap();
        let values = tape.values(soft);
        for q in 0..n {
            let row = &values[q * n..(q + 1) * n];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6, "row {} sums to {}", q, sum);
            for k in 0..n {
                if !allowed[q * n + k] {
                    prop_assert_eq!(row[k], 0.0, "masked entry ({}, {}) leaked", q, k);
                } else {
                    prop_assert!(row[k] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn stage_boundaries_are_ordered_and_in_range_for_any_decay(
        n in 120usize..1500,
        scale in 0.1f64..10.0,
        rate in 0.0005f64..0.01,
    ) {
        let losses: Vec<f64> = (0..n).map(|t| scale * (-(t as f64) * rate).exp()).collect();
        let entries = entries_from_losses(&losses);
        let report = detect_stages(&entries, &StageParams::default()).unwrap();
        prop_assert!(report.starting_end <= report.plateau_end);
        prop_assert!(report.plateau_end <= report.diving_end);
        prop_assert!(report.diving_end <= (n - 1) as u64);
        prop_assert_eq!(report.plateau_length, report.plateau_end - report.starting_end);
    }
}

proptest! {
    // Config round-trips exercise text parsing; keep the case count lighter.
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn run_config_text_round_trips_losslessly(
        preset_i in 0usize..4,
        pe_i in 0usize..3,
        objective_i in 0usize..2,
        batch in 1usize..64,
        extra in 1u64..5000,
        warmup in 0u64..500,
        peak_lr in 1e-6f64..1.0,
        weight_decay in 0.0f64..0.3,
        seed in any::<u64>(),
        shard_name in "[a-zA-Z0-9_/.=-]{1,40}",
    ) {
        use mlmlab::model::{PositionEncodingKind, Preset};
        use mlmlab::objectives::ObjectiveKind;
        let presets = [Preset::Bert, Preset::DecbertSame, Preset::DecbertDiff, Preset::GptDecoder];
        let pes = [
            PositionEncodingKind::Absent,
            PositionEncodingKind::Learnable,
            PositionEncodingKind::Sinusoidal,
        ];
        let objectives = [ObjectiveKind::Mlm, ObjectiveKind::Clm];

        let mut cfg = TrainConfig::default().with_preset(presets[preset_i]).unwrap();
        cfg.model.pe_kind = pes[pe_i];
        cfg.objective = objectives[objective_i];
        cfg.batch_size = batch;
        cfg.total_steps = warmup + extra;
        cfg.warmup_steps = warmup;
        cfg.eval_interval = 0;
        cfg.peak_lr = peak_lr;
        cfg.weight_decay = weight_decay;
        cfg.seed = seed;
        cfg.train_shard = shard_name;
        let text = cfg.to_text();
        let parsed = TrainConfig::from_text(&text).unwrap();
        prop_assert_eq!(&parsed, &cfg);
        prop_assert_eq!(parsed.to_text(), text);
    }
}
