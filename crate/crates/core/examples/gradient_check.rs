//! Finite-difference check of the whole phrasing model in f64: every
//! trainable tensor, one utterance, dropout active with a fixed mask stream.

use phrasebreak::corpus::prepare_utterance;
use phrasebreak::encoders::{EncoderKind, Tokenizers};
use phrasebreak::model::{PhrasingConfig, PhrasingModel, Sample, SpeakerMode};
use phrasebreak::nn::grad_check_richardson;
use phrasebreak::rng::Stream;
use phrasebreak::synthgen::{gen_corpus, gen_speakers};

fn main() -> phrasebreak::Result<()> {
    let styles = gen_speakers(3, 5, 4)?;
    let utts: Vec<_> = gen_corpus(&styles, 4, 4)?.iter().map(|u| prepare_utterance(u, 50.0)).collect();
    let tok = Tokenizers::train(&utts, 30, 6);
    let utt = utts.iter().min_by_key(|u| u.words.len()).unwrap();

    for kind in [EncoderKind::Subword, EncoderKind::PhonemeMp] {
        for mode in [SpeakerMode::None, SpeakerMode::Frozen, SpeakerMode::Trainable] {
            let enc = tok.encoder_config(kind, 4, 1, 4);
            let sample = Sample::from_utterance(&tok, &enc, utt)?;
            let mut cfg = PhrasingConfig::new(enc, mode, 3);
            cfg.speaker_dim = 3;
            let model = PhrasingModel::<f32>::new(cfg, 4)?.cast::<f64>();
            let norm = sample.example.num_words();
            let stream = Stream::new(9);

            let mut grads = model.store.grad_buffer();
            model.loss_and_backward(&sample, None, norm, stream, &mut grads)?;
            let mut worst = (0.0, String::new());
            for (id, p) in model.store.iter().filter(|(_, p)| p.trainable) {
                let mut probe = model.clone();
                let err = grad_check_richardson(p.value.data(), grads.get(id).data(), 1e-4, |x| {
                    probe.store.value_mut(id).data_mut().copy_from_slice(x);
                    let mut g = probe.store.grad_buffer();
                    probe.loss_and_backward(&sample, None, norm, stream, &mut g).unwrap()
                });
                if err > worst.0 {
                    worst = (err, p.name.clone());
                }
            }
            println!("{:<10} {:<9} max relative error {:.2e} ({})", kind.as_str(), mode.as_str(), worst.0, worst.1);
        }
    }
    Ok(())
}
