//! Few-shot speaker adaptation: a model trained with a frozen table of
//! averaged utterance embeddings meets unseen speakers, whose table rows are
//! averaged from n of their utterance embeddings.

use std::collections::{BTreeMap, BTreeSet};

use phrasebreak::cli::fewshot_experiment;
use phrasebreak::corpus::{prepare_utterance, split_corpus, SplitName, Utterance};
use phrasebreak::encoders::{EncoderKind, Tokenizers};
use phrasebreak::model::{train_two_stage, PhrasingConfig, PhrasingModel, Sample, SpeakerMode, StageConfig, TrainConfig};
use phrasebreak::speaker::{average_embeddings, EmbeddingTable, Provenance};
use phrasebreak::synthgen::{gen_corpus, gen_speakers, oracle_psvm_embed, SpeakerStyle};

const DIM: usize = 16;

fn embed(styles: &[SpeakerStyle], u: &Utterance) -> phrasebreak::Result<Vec<f64>> {
    let idx = u.utterance_id.rsplit('_').next().and_then(|s| s.parse().ok()).unwrap_or(0);
    oracle_psvm_embed(&styles[u.speaker_id as usize], idx, DIM, 1.0, 7)
}

fn by_speaker(styles: &[SpeakerStyle], utts: &[Utterance]) -> phrasebreak::Result<BTreeMap<u32, Vec<Vec<f64>>>> {
    let mut m: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
    for u in utts {
        m.entry(u.speaker_id).or_default().push(embed(styles, u)?);
    }
    Ok(m)
}

fn main() -> phrasebreak::Result<()> {
    // too few seen speakers and the model memorizes the table instead of
    // learning what the embedding space means
    let styles = gen_speakers(50, 5, 3)?;
    let mut utts = gen_corpus(&styles[..40], 80, 3)?;
    utts.extend(gen_corpus(&styles[40..], 120, 3)?);
    let utts: Vec<_> = utts.iter().map(|u| prepare_utterance(u, 50.0)).collect();
    let unseen: BTreeSet<u32> = (40..50).collect();
    let splits = split_corpus(&utts, &unseen, (8, 1, 1), 40, 1)?;
    let get = |n: SplitName| splits.iter().find(|s| s.name == n).map(|s| s.utterances.as_slice()).unwrap_or(&[]);

    let tok = Tokenizers::train(get(SplitName::Training), 300, 50);
    let enc = tok.encoder_config(EncoderKind::Subword, DIM, 1, DIM);
    let samples = |u: &[Utterance]| -> phrasebreak::Result<Vec<Sample>> {
        u.iter().map(|u| Sample::from_utterance(&tok, &enc, u)).collect()
    };

    // seen speakers get the average of all their training embeddings
    let mut table = EmbeddingTable::new(DIM, Provenance::OraclePsvm);
    for (spk, e) in by_speaker(&styles, get(SplitName::Training))? {
        table.insert(spk, average_embeddings(&e)?.iter().map(|&x| x as f32).collect())?;
    }
    let mut cfg = PhrasingConfig::new(enc.clone(), SpeakerMode::Frozen, 40);
    cfg.speaker_dim = DIM;
    let mut model = PhrasingModel::<f32>::new(cfg, 0)?;
    model.set_speaker_table(&table)?;
    let tc = TrainConfig {
        stage1: StageConfig { epochs: 8, peak_lr: 3e-3 },
        stage2: StageConfig { epochs: 1, peak_lr: 3e-4 },
        eval_every: 50,
        ..TrainConfig::default()
    };
    let out = train_two_stage(&mut model, &samples(get(SplitName::Training))?, &samples(get(SplitName::ValidationSeen))?, &tc)?;

    let pool = by_speaker(&styles, get(SplitName::ValidationUnseen))?;
    let rows = fewshot_experiment(
        &out.best,
        &tok,
        get(SplitName::TestUnseen),
        &pool,
        Provenance::OraclePsvm,
        &[1, 5, 10, 20, 40],
        None,
        0,
    )?;
    println!("   n  precision  recall    F0.5");
    for r in rows {
        println!("{:>4}  {:>9.4}  {:>6.4}  {:.4}", r.size, r.precision, r.recall, r.f_half);
    }
    Ok(())
}
