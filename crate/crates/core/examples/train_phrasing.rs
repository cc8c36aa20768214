//! Train a speaker-agnostic baseline and a speaker-conditioned model on the
//! same synthetic corpus and compare them on held-out utterances of the
//! training speakers.

use std::collections::BTreeSet;

use phrasebreak::corpus::{prepare_utterance, split_corpus};
use phrasebreak::encoders::{EncoderKind, Tokenizers};
use phrasebreak::model::{
    evaluate_at, predict_rps, train_two_stage, PhrasingConfig, PhrasingModel, Sample, SpeakerMode, StageConfig,
    TrainConfig,
};
use phrasebreak::synthgen::{gen_corpus, gen_speakers};

fn main() -> phrasebreak::Result<()> {
    let styles = gen_speakers(10, 5, 1)?;
    let utts: Vec<_> = gen_corpus(&styles, 120, 1)?.iter().map(|u| prepare_utterance(u, 50.0)).collect();
    let splits = split_corpus(&utts, &BTreeSet::new(), (8, 1, 1), 0, 1)?;
    let tok = Tokenizers::train(&splits[0].utterances, 300, 50);
    let enc = tok.encoder_config(EncoderKind::Subword, 16, 1, 16);
    let samples = |i: usize| -> phrasebreak::Result<Vec<Sample>> {
        splits[i].utterances.iter().map(|u| Sample::from_utterance(&tok, &enc, u)).collect()
    };
    let (train, val, test) = (samples(0)?, samples(1)?, samples(2)?);

    let tc = TrainConfig {
        stage1: StageConfig { epochs: 8, peak_lr: 3e-3 },
        stage2: StageConfig { epochs: 1, peak_lr: 3e-4 },
        eval_every: 50,
        ..TrainConfig::default()
    };
    for mode in [SpeakerMode::None, SpeakerMode::Trainable] {
        let mut cfg = PhrasingConfig::new(enc.clone(), mode, styles.len());
        cfg.speaker_dim = 16;
        let mut model = PhrasingModel::<f32>::new(cfg, 0)?;
        let out = train_two_stage(&mut model, &train, &val, &tc)?;
        let best = out.best.model()?;
        let r = evaluate_at(&best, &test, out.best.threshold)?;
        println!("{:<9} {} steps, test {r}", mode.as_str(), out.steps);

        // the same sentence read by two different speakers
        let words = &splits[2].utterances[0].words;
        for spk in [0, 5] {
            println!("  speaker {spk}: {}", predict_rps(&best, &tok, out.best.threshold, words, spk)?);
        }
    }
    Ok(())
}
