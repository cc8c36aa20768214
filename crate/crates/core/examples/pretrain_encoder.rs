//! Pretrain the three phoneme-level encoders on a synthetic corpus and watch
//! each objective's loss on a fixed probe batch.

use phrasebreak::corpus::prepare_utterance;
use phrasebreak::encoders::{pretrain, EncoderKind, PretrainConfig, Tokenizers};
use phrasebreak::synthgen::{gen_corpus, gen_speakers};

fn main() -> phrasebreak::Result<()> {
    let styles = gen_speakers(5, 5, 8)?;
    let utts: Vec<_> = gen_corpus(&styles, 60, 8)?.iter().map(|u| prepare_utterance(u, 50.0)).collect();
    let tok = Tokenizers::train(&utts, 300, 50);

    for kind in [EncoderKind::Phoneme, EncoderKind::PhonemeMp, EncoderKind::PhonemePl] {
        let cfg = tok.encoder_config(kind, 16, 1, 16);
        let examples = utts.iter().map(|u| tok.example(kind, u)).collect::<phrasebreak::Result<Vec<_>>>()?;
        let pc = PretrainConfig::new(kind, 150, 0);
        let run = pretrain(&cfg, &examples, &pc)?;
        println!("{} ({} steps, peak lr {})", kind.as_str(), pc.steps, pc.peak_lr);
        for ((obj, before), (_, after)) in run.initial.iter().zip(&run.last) {
            println!("  {:<8} {before:.3} -> {after:.3}", obj.as_str());
        }
        let every = run.log.len() / 5;
        for r in run.log.iter().step_by(every.max(1)) {
            println!("  step {:>4}  lr {:.2e}  loss {:.3}", r.step, r.lr, r.total);
        }
    }
    Ok(())
}
