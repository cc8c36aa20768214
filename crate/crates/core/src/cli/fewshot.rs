use std::collections::BTreeMap;

use serde::Serialize;

use crate::corpus::Utterance;
use crate::encoders::Tokenizers;
use crate::error::{Error, Result};
use crate::model::{evaluate_at, Checkpoint, Sample, SpeakerMode};
use crate::rng::Stream;
use crate::speaker::{attach_unseen, few_shot_embed, Adapter, EmbeddingTable, Provenance};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FewShotRow {
    pub size: usize,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_half: f64,
}

/// For each sample size: average a seeded subset of each unseen speaker's
/// utterance embeddings, map them through the adapter for trainable-mode
/// models, attach the table and score `test` at the checkpoint threshold.
#[allow(clippy::too_many_arguments)]
pub fn fewshot_experiment(
    ckpt: &Checkpoint,
    tokenizers: &Tokenizers,
    test: &[Utterance],
    embeddings: &BTreeMap<u32, Vec<Vec<f64>>>,
    provenance: Provenance,
    sizes: &[usize],
    adapter: Option<&Adapter>,
    seed: u64,
) -> Result<Vec<FewShotRow>> {
    match (ckpt.config.speaker_mode, adapter) {
        (SpeakerMode::None, _) => {
            return Err(Error::Contract("few-shot evaluation needs a speaker-conditioned model".into()))
        }
        (SpeakerMode::Trainable, None) => {
            return Err(Error::Contract("trainable-mode model requires an embedding adapter".into()))
        }
        _ => {}
    }
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::InvalidArgument("sample sizes must be positive".into()));
    }
    if test.is_empty() {
        return Err(Error::Data("no test utterances".into()));
    }
    for u in test {
        if !embeddings.contains_key(&u.speaker_id) {
            return Err(Error::Data(format!("no embeddings for test speaker {}", u.speaker_id)));
        }
    }
    let enc = &ckpt.config.encoder;
    let samples: Vec<Sample> = test.iter().map(|u| Sample::from_utterance(tokenizers, enc, u)).collect::<Result<_>>()?;
    let root = Stream::new(seed).tag("fewshot");
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let dim = embeddings.values().next().map_or(0, |v| v[0].len());
        let mut raw = EmbeddingTable::new(dim, provenance);
        for (&spk, embs) in embeddings {
            let e = few_shot_embed(embs, n, root.index(u64::from(spk)).index(n as u64))?;
            raw.insert(spk, e.into_iter().map(|x| x as f32).collect())?;
        }
        let table = match adapter {
            Some(a) if ckpt.config.speaker_mode == SpeakerMode::Trainable => a.adapt_table(&raw)?,
            _ => raw,
        };
        let attached = attach_unseen(ckpt, &table)?;
        let r = evaluate_at(&attached.model()?, &samples, attached.threshold)?;
        log::info!("few-shot n={n}: {r}");
        rows.push(FewShotRow { size: n, threshold: r.threshold, precision: r.precision, recall: r.recall, f_half: r.f_half });
    }
    Ok(rows)
}
