use proptest::prelude::*;

use phrasebreak::corpus::{prepare_utterance, read_jsonl, write_jsonl, Utterance, Word};
use phrasebreak::encoders::{EncoderKind, Tokenizers};
use phrasebreak::evalstats::{evaluate, ks_statistic, sweep_threshold, wasserstein1};
use phrasebreak::nn::{grad_check, layer_norm, layer_norm_backward, linear, linear_backward, Tensor};
use phrasebreak::synthgen::{gen_corpus, gen_speakers};

fn word() -> impl Strategy<Value = Word> {
    (
        "[a-z]{1,6}",
        prop::collection::vec(prop::sample::select(vec!["AA", "B", "K", "IY", "S", "T"]), 1..4),
        prop::option::weighted(0.3, prop::sample::select(vec![",", ".", "?", ",,", "!?"])),
    )
        .prop_map(|(w, p, punct)| Word::new(&w, &p, punct))
}

prop_compose! {
    fn utterance()(words in prop::collection::vec(word(), 1..12), speaker in 0u32..50, seed in 0u64..1000)
        (pauses in prop::collection::vec(0.0f64..400.0, words.len() - 1), words in Just(words),
         speaker in Just(speaker), seed in Just(seed)) -> Utterance {
        let n = pauses.len();
        prepare_utterance(
            &Utterance {
                utterance_id: format!("{speaker}_{seed}"),
                speaker_id: speaker,
                words,
                boundary_pause_ms: pauses,
                rp_label: vec![false; n],
                total_duration_s: 1.0 + seed as f64 / 7.0,
            },
            50.0,
        )
    }
}

proptest! {
    #[test]
    fn jsonl_round_trip(utts in prop::collection::vec(utterance(), 0..6)) {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &utts).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        prop_assert_eq!(back, utts);
    }

    #[test]
    fn preparation_is_idempotent_and_labels_follow_the_rule(u in utterance(), thr in 0.0f64..300.0) {
        let once = prepare_utterance(&u, thr);
        prop_assert_eq!(&prepare_utterance(&once, thr), &once);
        prop_assert!(once.words.last().unwrap().trailing_punct.is_none());
        for (i, &rp) in once.rp_label.iter().enumerate() {
            let punct = once.words[i].trailing_punct.as_deref();
            prop_assert!(punct.is_none_or(|p| p.chars().count() == 1));
            prop_assert_eq!(rp, once.boundary_pause_ms[i] > thr && punct.is_none());
        }
        prop_assert!(once.validate().is_ok());
    }

    #[test]
    fn linear_and_layer_norm_gradients(
        rows in 1usize..4,
        // a two-wide layer norm outputs ±1 and has a near-zero Jacobian, where
        // relative error is meaningless
        cols in 3usize..6,
        vals in prop::collection::vec(-2.0f64..2.0, 64),
    ) {
        let take = |n: usize, off: usize| -> Vec<f64> { (0..n).map(|i| vals[(i + off) % vals.len()]).collect() };
        let x = take(rows * cols, 0);
        let w = take(cols * 3, 7);
        let b = take(3, 21);
        let r = take(rows * 3, 33);
        let t = |s: &[usize], v: &[f64]| Tensor::from_vec(s, v.to_vec()).unwrap();
        let f = |x: &[f64]| -> f64 {
            let y = linear(&t(&[rows, cols], x), &t(&[cols, 3], &w), &t(&[3], &b)).unwrap();
            y.data().iter().zip(&r).map(|(a, c)| a * c).sum()
        };
        let (mut dw, mut db) = (Tensor::zeros(&[cols, 3]), Tensor::zeros(&[3]));
        let dx = linear_backward(&t(&[rows, cols], &x), &t(&[cols, 3], &w), &t(&[rows, 3], &r), &mut dw, &mut db);
        prop_assert!(grad_check(&x, dx.data(), 1e-5, f) < 1e-6);

        // layer norm over the same inputs; skip nearly constant rows where the
        // normalized output is ill-conditioned
        let spread = x.chunks(cols).map(|row| {
            let m = row.iter().sum::<f64>() / cols as f64;
            row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / cols as f64
        });
        prop_assume!(spread.fold(f64::INFINITY, f64::min) > 1e-2);
        let g = take(cols, 40);
        let beta = take(cols, 50);
        let r2 = take(rows * cols, 3);
        let f = |x: &[f64]| -> f64 {
            let (y, _) = layer_norm(&t(&[rows, cols], x), &t(&[cols], &g), &t(&[cols], &beta), 1e-5).unwrap();
            y.data().iter().zip(&r2).map(|(a, c)| a * c).sum()
        };
        let (_, cache) = layer_norm(&t(&[rows, cols], &x), &t(&[cols], &g), &t(&[cols], &beta), 1e-5).unwrap();
        let (mut dg, mut dbeta) = (Tensor::zeros(&[cols]), Tensor::zeros(&[cols]));
        let dx = layer_norm_backward(&cache, &t(&[cols], &g), &t(&[rows, cols], &r2), &mut dg, &mut dbeta);
        prop_assert!(grad_check(&x, dx.data(), 1e-5, f) < 1e-6);
    }

    #[test]
    fn distribution_distances(a in prop::collection::vec(-5.0f64..5.0, 1..20), b in prop::collection::vec(-5.0f64..5.0, 1..20)) {
        let w = wasserstein1(&a, &b).unwrap();
        prop_assert!(w >= 0.0);
        prop_assert!((w - wasserstein1(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert!(wasserstein1(&a, &a).unwrap().abs() < 1e-12);
        let k = ks_statistic(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&k));
        prop_assert!((k - ks_statistic(&b, &a).unwrap()).abs() < 1e-12);
        // shifting both samples changes nothing
        let sa: Vec<f64> = a.iter().map(|v| v + 3.5).collect();
        let sb: Vec<f64> = b.iter().map(|v| v + 3.5).collect();
        prop_assert!((wasserstein1(&sa, &sb).unwrap() - w).abs() < 1e-9);
    }

    #[test]
    fn sweep_dominates_every_grid_threshold(
        cells in prop::collection::vec((0.0f64..1.0, any::<bool>(), prop::bool::weighted(0.8)), 1..60),
    ) {
        let probs: Vec<f64> = cells.iter().map(|c| c.0).collect();
        let labels: Vec<bool> = cells.iter().map(|c| c.1).collect();
        let mask: Vec<bool> = cells.iter().map(|c| c.2).collect();
        let best = sweep_threshold(&probs, &mask, &labels, 0.05);
        for k in 0..=20 {
            prop_assert!(evaluate(&probs, &mask, &labels, k as f64 / 20.0).f_half <= best.f_half + 1e-12);
        }
    }

    #[test]
    fn every_tokenization_scores_each_word_once(seed in 0u64..500) {
        let styles = gen_speakers(2, 5, seed).unwrap();
        let utts: Vec<Utterance> =
            gen_corpus(&styles, 4, seed).unwrap().iter().map(|u| prepare_utterance(u, 50.0)).collect();
        let tok = Tokenizers::train(&utts, 40, 8);
        for u in &utts {
            for kind in [EncoderKind::Subword, EncoderKind::Phoneme, EncoderKind::PhonemeMp, EncoderKind::PhonemePl] {
                let ex = tok.example(kind, u).unwrap();
                prop_assert_eq!(ex.num_words(), u.words.len());
                prop_assert_eq!(ex.labels.iter().filter(|&&l| l).count(), u.rp_count());
            }
        }
    }
}
