//! Generate a small synthetic multi-speaker corpus, print what each speaker
//! looks like and write the JSONL records.
//!
//! cargo run --example synth_corpus -- [out.jsonl]

use std::fs::File;
use std::io::BufWriter;

use phrasebreak::corpus::{prepare_utterance, write_jsonl, DEFAULT_RP_THRESHOLD_MS};
use phrasebreak::evalstats::rp_stats;
use phrasebreak::synthgen::{gen_corpus, gen_speakers};

fn main() -> phrasebreak::Result<()> {
    let styles = gen_speakers(6, 5, 11)?;
    let utts: Vec<_> =
        gen_corpus(&styles, 50, 11)?.iter().map(|u| prepare_utterance(u, DEFAULT_RP_THRESHOLD_MS)).collect();

    println!("{}", utts[0].words.iter().map(|w| w.surface.as_str()).collect::<Vec<_>>().join(" "));
    println!("pauses {:?}", utts[0].boundary_pause_ms);

    println!("speaker  rp_bias  RPs/s  mean RP length");
    let stats = rp_stats(&utts);
    for s in &styles {
        let st = &stats[&s.speaker_id];
        let t = st.mean_t_rp_s.map_or("-".to_string(), |t| format!("{:.0} ms", 1000.0 * t));
        println!("{:>7}  {:>7.2}  {:>5.3}  {t}", s.speaker_id, s.rp_bias, st.f_rp_hz);
    }

    if let Some(path) = std::env::args().nth(1) {
        write_jsonl(BufWriter::new(File::create(&path)?), &utts)?;
        println!("wrote {} utterances to {path}", utts.len());
    }
    Ok(())
}
