//! One utterance under each tokenization. `|` ends a word (the position the
//! classifier scores), `*` marks a labelled respiratory pause.

use phrasebreak::corpus::prepare_utterance;
use phrasebreak::encoders::{EncoderKind, Tokenizers};
use phrasebreak::synthgen::{gen_corpus, gen_speakers};
use phrasebreak::tokenize::{TokenizedExample, Vocab};

fn show(ex: &TokenizedExample, vocab: &Vocab) -> String {
    let mut out = Vec::new();
    for k in 0..ex.len() {
        let mut t = vocab.token(ex.token_ids[k]).unwrap_or("?").to_string();
        if ex.word_final_mask[k] {
            t.push('|');
        }
        if ex.labels[k] {
            t.push('*');
        }
        out.push(t);
    }
    out.join(" ")
}

fn main() -> phrasebreak::Result<()> {
    let styles = gen_speakers(4, 5, 2)?;
    let utts: Vec<_> = gen_corpus(&styles, 40, 2)?.iter().map(|u| prepare_utterance(u, 50.0)).collect();
    let tok = Tokenizers::train(&utts, 200, 40);
    let u = utts.iter().find(|u| u.words.len() < 12 && u.rp_count() > 0).unwrap_or(&utts[0]);

    let text: Vec<String> = u
        .words
        .iter()
        .zip(u.rp_label.iter().chain([&false]))
        .map(|(w, &rp)| format!("{}{}{}", w.surface, w.trailing_punct.as_deref().unwrap_or(""), if rp { " /" } else { "" }))
        .collect();
    println!("words     {}", text.join(" "));

    println!("subword   {}", show(&tok.example(EncoderKind::Subword, u)?, &tok.subword.vocab));
    let ph = tok.example(EncoderKind::Phoneme, u)?;
    println!("phoneme   {}", show(&ph, &tok.phoneme.vocab));

    // sup-phonemes are merged phoneme spans, repeated over the phonemes they cover
    let mp = tok.example(EncoderKind::PhonemeMp, u)?;
    let sup = mp.sup_ids.as_ref().expect("mp examples carry sup ids");
    let sup_tokens: Vec<&str> = sup.iter().map(|&i| tok.sup.vocab.token(i).unwrap_or("?")).collect();
    println!("sup       {}", sup_tokens.join(" "));

    let pl = tok.example(EncoderKind::PhonemePl, u)?;
    let targets = pl.grapheme_targets.as_ref().expect("pl examples carry grapheme targets");
    let g: Vec<&str> = targets.iter().map(|&i| tok.phoneme.graphemes.token(i).unwrap_or("?")).collect();
    println!("p2g       {}", g.join(" "));

    println!("vocab sizes: subword {}, phoneme {}, sup {}", tok.subword.vocab.len(), tok.phoneme.vocab.len(), tok.sup.vocab.len());
    Ok(())
}
