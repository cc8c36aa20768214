use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::fewshot::fewshot_experiment;
use super::manifest::RunRecorder;
use super::*;
use crate::corpus::{
    is_alignment_record, normalize_punctuation, parse_alignment_line, parse_textgrid, prepare_utterance,
    split_corpus, tiers_to_utterance, write_jsonl, SplitName, Utterance, Word,
};
use crate::encoders::{pretrain, EncoderConfig, EncoderKind, Objective, PretrainConfig, Tokenizers};
use crate::evalstats::{
    build_characteristic_tables, chi_squared, kmeans, ks_statistic, mean_std, parse_annotations, rp_stats,
    sweep_threshold, wasserstein1, write_report_jsonl, write_rp_csv, EvalReport,
};
use crate::model::{
    collect_scores, evaluate_at, predict_rps, train_two_stage, Checkpoint, PhrasingConfig, PhrasingModel, Sample,
    SpeakerMode, StageConfig, TrainConfig,
};
use crate::nn::checkpoint::{read_file, write_file};
use crate::nn::Tensor;
use crate::rng::Stream;
use crate::speaker::{
    average_embeddings, table_of, train_adapter, Adapter, AdapterConfig, EmbeddingTable, Provenance,
    UtteranceEmbeddings,
};
use crate::synthgen::{gen_corpus, gen_speakers, oracle_psvm_embed, oracle_psvm_mean, spell};
use crate::tokenize::{read_lexicon, write_lexicon};

pub const TOKENIZER_DIR: &str = "tokenizers";
pub const LEXICON_FILE: &str = "lexicon.tsv";
pub const ENCODER_FILE: &str = "encoder.pbrk";
pub const ENCODER_SIDECAR: &str = "encoder.toml";
pub const SEEN_TABLE_FILE: &str = "seen_speakers.tsv";

pub(crate) fn run(cmd: Command, argv: &[String]) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(&a, argv),
        Command::Prepare(a) => prepare(&a, argv),
        Command::Pretrain(a) => pretrain_cmd(&a, argv),
        Command::Train(a) => train(&a, argv),
        Command::Eval(a) => eval(&a, argv),
        Command::Adapt(a) => adapt(&a, argv),
        Command::Fewshot(a) => fewshot(&a, argv),
        Command::Predict(a) => predict(&a, argv),
        Command::Stats(a) => stats(&a, argv),
    }
}

// ---------------------------------------------------------------------------
// Helpers

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))
}

fn write_json_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?)?;
    Ok(())
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Checkpoint { path: path.to_path_buf(), msg: e.to_string() })
}

/// Corpus or alignment JSONL, detected per line.
fn read_any_jsonl(path: &Path) -> Result<Vec<Utterance>> {
    use std::io::BufRead;
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |e: serde_json::Error| Error::Parse { line: i + 1, msg: e.to_string() };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(bad)?;
        let utt = if is_alignment_record(&value) {
            parse_alignment_line(&line, i + 1)?
        } else {
            let u: Utterance = serde_json::from_value(value).map_err(bad)?;
            u.validate()?;
            u
        };
        out.push(utt);
    }
    Ok(out)
}

/// Speaker id from a file stem such as `12_0003` or `s12_0003`.
fn speaker_from_stem(stem: &str) -> Option<u32> {
    let head = stem.split('_').next()?;
    head.strip_prefix('s').unwrap_or(head).parse().ok()
}

fn textgrid_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            textgrid_files(&p, out)?;
        } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("textgrid")) {
            out.push(p);
        }
    }
    Ok(())
}

fn read_textgrids(dir: &Path, word_tier: &str, phone_tier: &str) -> Result<Vec<Utterance>> {
    let mut files = Vec::new();
    textgrid_files(dir, &mut files)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no .TextGrid files under {}", dir.display())));
    }
    files
        .iter()
        .map(|f| {
            let stem = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let speaker = speaker_from_stem(&stem).ok_or_else(|| {
                Error::Data(format!("{}: file name must start with a speaker id, e.g. 12_0001", f.display()))
            })?;
            let text = fs::read_to_string(f)?;
            tiers_to_utterance(&parse_textgrid(&text, word_tier, phone_tier)?, &stem, speaker)
        })
        .collect()
}

fn split_path(dir: &Path, name: SplitName) -> PathBuf {
    dir.join(format!("{}.jsonl", name.as_str()))
}

fn load_split(dir: &Path, name: SplitName) -> Result<Vec<Utterance>> {
    read_any_jsonl(&split_path(dir, name))
}

fn parse_split(s: &str) -> Result<SplitName> {
    SplitName::parse(s).ok_or_else(|| {
        let names: Vec<&str> = SplitName::ALL.iter().map(|n| n.as_str()).collect();
        Error::InvalidArgument(format!("unknown split {s:?}; expected one of {}", names.join(", ")))
    })
}

fn parse_ratio(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split(':')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidArgument(format!("ratio {s:?}: {e}")))?;
    match parts[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::InvalidArgument(format!("ratio {s:?} must look like 8:1:1"))),
    }
}

fn samples(tok: &Tokenizers, cfg: &EncoderConfig, utts: &[Utterance]) -> Result<Vec<Sample>> {
    utts.iter().map(|u| Sample::from_utterance(tok, cfg, u)).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to)?;
    let mut entries: Vec<PathBuf> = fs::read_dir(from)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_file() {
            fs::copy(&p, to.join(p.file_name().unwrap()))?;
        }
    }
    Ok(())
}

fn load_checkpoint(dir: &Path) -> Result<(Checkpoint, Tokenizers)> {
    let ckpt = Checkpoint::load(dir)?;
    let tok = Tokenizers::load(&dir.join(TOKENIZER_DIR))?;
    Ok((ckpt, tok))
}

// ---------------------------------------------------------------------------
// synth

fn synth(a: &SynthArgs, argv: &[String]) -> Result<()> {
    let rec = RunRecorder::start(argv, a, Some(a.seed), vec![])?;
    if !(a.noise >= 0.0) {
        return Err(Error::InvalidArgument("--noise must be nonnegative".into()));
    }
    let styles = gen_speakers(a.speakers, a.dim_f, a.seed)?;
    let utts = gen_corpus(&styles, a.utts, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let mut w = create(&a.out.join("corpus.jsonl"))?;
    write_jsonl(&mut w, &utts)?;
    w.flush()?;
    fs::write(a.out.join("speakers.json"), serde_json::to_string_pretty(&styles)? + "\n")?;

    // gen_corpus emits speakers in order with consecutive indices
    let mut per_utt = UtteranceEmbeddings { provenance: Some(Provenance::OraclePsvm), rows: Vec::new() };
    for (i, u) in utts.iter().enumerate() {
        let style = &styles[u.speaker_id as usize];
        per_utt.rows.push((u.speaker_id, oracle_psvm_embed(style, i % a.utts, a.embed_dim, a.noise, a.seed)?));
    }
    let mut w = create(&a.out.join("utterance_embeddings.tsv"))?;
    per_utt.write(&mut w)?;
    w.flush()?;
    let mut table = EmbeddingTable::new(a.embed_dim, Provenance::OraclePsvm);
    for s in &styles {
        table.insert(s.speaker_id, to_f32(&oracle_psvm_mean(s, a.embed_dim, a.seed)?))?;
    }
    let mut w = create(&a.out.join("speaker_embeddings.tsv"))?;
    table.write_tsv(&mut w)?;
    w.flush()?;
    rec.finish(&a.out)?;
    println!("wrote {} utterances from {} speakers to {}", utts.len(), styles.len(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// prepare

#[derive(Serialize)]
struct SplitSummary {
    split: &'static str,
    utterances: usize,
    speakers: usize,
    boundaries: usize,
    rps: usize,
}

fn prepare(a: &PrepareArgs, argv: &[String]) -> Result<()> {
    let mut inputs = vec![a.corpus.clone()];
    inputs.extend(a.embeddings.clone());
    let rec = RunRecorder::start(argv, a, Some(a.seed), inputs)?;
    let raw = match a.format.as_str() {
        "jsonl" => read_any_jsonl(&a.corpus)?,
        "textgrid" => read_textgrids(&a.corpus, &a.word_tier, &a.phone_tier)?,
        f => return Err(Error::InvalidArgument(format!("unknown corpus format {f:?}; expected jsonl or textgrid"))),
    };
    if raw.is_empty() {
        return Err(Error::Data("corpus is empty".into()));
    }
    let mut ids = BTreeSet::new();
    for u in &raw {
        if !ids.insert(u.utterance_id.as_str()) {
            return Err(Error::Data(format!("duplicate utterance id {}", u.utterance_id)));
        }
    }
    let emb = a
        .embeddings
        .as_ref()
        .map(|p| -> Result<(UtteranceEmbeddings, BTreeMap<String, Vec<f64>>)> {
            let e = UtteranceEmbeddings::read(open(p)?)?;
            if e.rows.len() != raw.len() {
                return Err(Error::Data(format!(
                    "{} has {} rows but the corpus has {} utterances",
                    p.display(),
                    e.rows.len(),
                    raw.len()
                )));
            }
            let mut by_id = BTreeMap::new();
            for (i, (u, (spk, v))) in raw.iter().zip(&e.rows).enumerate() {
                if *spk != u.speaker_id {
                    return Err(Error::Data(format!(
                        "embedding row {} is for speaker {spk} but utterance {} is speaker {}",
                        i + 1,
                        u.utterance_id,
                        u.speaker_id
                    )));
                }
                by_id.insert(u.utterance_id.clone(), v.clone());
            }
            Ok((e, by_id))
        })
        .transpose()?;

    let prepared: Vec<Utterance> = raw.iter().map(|u| prepare_utterance(u, a.rp_threshold_ms)).collect();
    let unseen: BTreeSet<u32> = a.unseen.iter().copied().collect();
    let splits = split_corpus(&prepared, &unseen, parse_ratio(&a.ratio)?, a.holdout, a.seed)?;
    let training = &splits[0].utterances;
    if training.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    fs::create_dir_all(&a.out)?;
    let tok = Tokenizers::train(training, a.subword_merges, a.sup_merges);
    tok.save(&a.out.join(TOKENIZER_DIR))?;

    let mut lexicon: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for w in prepared.iter().flat_map(|u| &u.words) {
        lexicon.entry(w.surface.clone()).or_insert_with(|| w.phonemes.clone());
    }
    let entries: Vec<(String, Vec<String>)> = lexicon.into_iter().collect();
    let mut w = create(&a.out.join(LEXICON_FILE))?;
    write_lexicon(&mut w, &entries)?;
    w.flush()?;

    let mut summary = Vec::new();
    for s in &splits {
        let mut w = create(&split_path(&a.out, s.name))?;
        write_jsonl(&mut w, &s.utterances)?;
        w.flush()?;
        if let Some((e, by_id)) = &emb {
            let rows = s.utterances.iter().map(|u| (u.speaker_id, by_id[&u.utterance_id].clone())).collect();
            let part = UtteranceEmbeddings { provenance: e.provenance, rows };
            let mut w = create(&a.out.join(format!("{}.emb.tsv", s.name.as_str())))?;
            part.write(&mut w)?;
            w.flush()?;
        }
        summary.push(SplitSummary {
            split: s.name.as_str(),
            utterances: s.utterances.len(),
            speakers: s.utterances.iter().map(|u| u.speaker_id).collect::<BTreeSet<_>>().len(),
            boundaries: s.utterances.iter().map(Utterance::num_boundaries).sum(),
            rps: s.utterances.iter().map(Utterance::rp_count).sum(),
        });
    }
    if let Some((e, by_id)) = &emb {
        let mut per: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
        for u in training {
            per.entry(u.speaker_id).or_default().push(by_id[&u.utterance_id].clone());
        }
        let dim = e.rows[0].1.len();
        let mut table = EmbeddingTable::new(dim, e.provenance.unwrap_or(Provenance::External));
        for (spk, vs) in &per {
            table.insert(*spk, to_f32(&average_embeddings(vs)?))?;
        }
        let mut w = create(&a.out.join(SEEN_TABLE_FILE))?;
        table.write_tsv(&mut w)?;
        w.flush()?;
    }
    write_json_lines(&a.out.join("splits.jsonl"), &summary)?;
    rec.finish(&a.out)?;
    for s in &summary {
        println!("{:<18} {:>6} utterances {:>4} speakers {:>6} RPs", s.split, s.utterances, s.speakers, s.rps);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain

#[derive(Serialize, Deserialize)]
struct EncoderSidecar {
    objectives: Vec<Objective>,
    steps: usize,
    seed: u64,
    initial_loss: BTreeMap<String, f64>,
    final_loss: BTreeMap<String, f64>,
    config: EncoderConfig,
}

fn pretrain_cmd(a: &PretrainArgs, argv: &[String]) -> Result<()> {
    let rec = RunRecorder::start(argv, a, Some(a.seed), vec![a.corpus.clone()])?;
    let kind = EncoderKind::parse(&a.encoder)?;
    let tok = Tokenizers::load(&a.corpus.join(TOKENIZER_DIR))?;
    let cfg = tok.encoder_config(kind, a.embed_dim, a.layers, a.d_enc);
    cfg.validate()?;
    let train = load_split(&a.corpus, SplitName::Training)?;
    let examples = train.iter().map(|u| tok.example(kind, u)).collect::<Result<Vec<_>>>()?;
    let mut pc = PretrainConfig::new(kind, a.steps, a.seed);
    if !a.objectives.is_empty() {
        pc.objectives = a.objectives.iter().map(|o| Objective::parse(o.trim())).collect::<Result<_>>()?;
    }
    pc.peak_lr = a.lr;
    pc.batch_size = a.batch_size;
    pc.mask_rate = a.mask_rate;
    let p = pretrain(&cfg, &examples, &pc)?;
    fs::create_dir_all(&a.out)?;
    let tensors = p.encoder_tensors();
    let refs: Vec<(&str, &Tensor<f32>)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_file(&a.out.join(ENCODER_FILE), &refs)?;
    let named = |v: &[(Objective, f64)]| v.iter().map(|(o, l)| (o.as_str().to_string(), *l)).collect();
    write_toml(
        &a.out.join(ENCODER_SIDECAR),
        &EncoderSidecar {
            objectives: pc.objectives.clone(),
            steps: a.steps,
            seed: a.seed,
            initial_loss: named(&p.initial),
            final_loss: named(&p.last),
            config: cfg,
        },
    )?;
    write_json_lines(&a.out.join("pretrain_log.jsonl"), &p.log)?;
    rec.finish(&a.out)?;
    for ((o, before), (_, after)) in p.initial.iter().zip(&p.last) {
        println!("{:<8} probe loss {before:.4} -> {after:.4}", o.as_str());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train

fn train(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let mut inputs = vec![a.corpus.clone()];
    inputs.extend(a.encoder_ckpt.clone());
    inputs.extend(a.embeddings.clone());
    let rec = RunRecorder::start(argv, a, Some(a.seed), inputs)?;
    let tok = Tokenizers::load(&a.corpus.join(TOKENIZER_DIR))?;
    let pretrained = a
        .encoder_ckpt
        .as_ref()
        .map(|dir| -> Result<(EncoderConfig, Vec<(String, Tensor<f32>)>)> {
            let side: EncoderSidecar = read_toml(&dir.join(ENCODER_SIDECAR))?;
            Ok((side.config, read_file(&dir.join(ENCODER_FILE))?))
        })
        .transpose()?;
    let enc = match &pretrained {
        Some((cfg, _)) => {
            let fresh = tok.encoder_config(cfg.kind, cfg.embed_dim, cfg.num_layers, cfg.d_enc);
            if fresh.token_vocab != cfg.token_vocab || fresh.sup_vocab != cfg.sup_vocab {
                return Err(Error::Contract("pretrained encoder was built with different tokenizers".into()));
            }
            cfg.clone()
        }
        None => tok.encoder_config(EncoderKind::parse(&a.encoder)?, a.embed_dim, a.layers, a.d_enc),
    };
    let train_utts = load_split(&a.corpus, SplitName::Training)?;
    let val_utts = load_split(&a.corpus, SplitName::ValidationSeen)?;
    let mode = SpeakerMode::parse(&a.speaker_mode)?;
    let num_speakers = train_utts.iter().map(|u| u.speaker_id as usize + 1).max().unwrap_or(1);
    let mut cfg = PhrasingConfig::new(enc.clone(), mode, num_speakers);
    cfg.speaker_dim = a.speaker_dim;
    cfg.dropout = a.dropout;
    let mut model = PhrasingModel::<f32>::new(cfg, a.seed)?;
    if let Some((_, tensors)) = &pretrained {
        model.load_encoder(tensors)?;
    }
    if mode == SpeakerMode::Frozen {
        let path = a.embeddings.clone().unwrap_or_else(|| a.corpus.join(SEEN_TABLE_FILE));
        let table = EmbeddingTable::read_path(&path, Provenance::External)?;
        if table.dim != a.speaker_dim {
            return Err(Error::Shape(format!("{} has dimension {}, --speaker-dim is {}", path.display(), table.dim, a.speaker_dim)));
        }
        if let Some(u) = train_utts.iter().find(|u| table.get(u.speaker_id).is_none()) {
            return Err(Error::Data(format!("{} has no row for training speaker {}", path.display(), u.speaker_id)));
        }
        model.set_speaker_table(&table)?;
    }
    let tc = TrainConfig {
        stage1: StageConfig { epochs: a.stage1_epochs, peak_lr: a.stage1_lr },
        stage2: StageConfig { epochs: a.stage2_epochs, peak_lr: a.stage2_lr },
        encoder_clip: a.encoder_clip,
        batch_size: a.batch_size,
        eval_every: a.eval_every,
        threshold_step: a.threshold_step,
        seed: a.seed,
    };
    let out = train_two_stage(&mut model, &samples(&tok, &enc, &train_utts)?, &samples(&tok, &enc, &val_utts)?, &tc)?;
    out.best.save(&a.out)?;
    copy_dir(&a.corpus.join(TOKENIZER_DIR), &a.out.join(TOKENIZER_DIR))?;
    if a.corpus.join(LEXICON_FILE).exists() {
        fs::copy(a.corpus.join(LEXICON_FILE), a.out.join(LEXICON_FILE))?;
    }
    write_json_lines(&a.out.join("train_log.jsonl"), &out.log)?;
    rec.finish(&a.out)?;
    println!(
        "best validation F0.5 {:.4} at step {} of {} (threshold {:.2})",
        out.best.f_half, out.best.step, out.steps, out.best.threshold
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn attach_from_args(ckpt: Checkpoint, embeddings: Option<&PathBuf>, adapter: Option<&PathBuf>) -> Result<Checkpoint> {
    let Some(path) = embeddings else {
        if adapter.is_some() {
            return Err(Error::InvalidArgument("--adapter needs --embeddings".into()));
        }
        return Ok(ckpt);
    };
    let mut table = EmbeddingTable::read_path(path, Provenance::External)?;
    if let Some(dir) = adapter {
        table = Adapter::load(dir)?.adapt_table(&table)?;
    }
    crate::speaker::attach_unseen(&ckpt, &table)
}

fn report_table(rows: &[(String, EvalReport)]) -> String {
    let mut s = format!(
        "{:<22} {:>9} {:>7} {:>7} {:>7} {:>9} {:>9} {:>9}\n",
        "split", "threshold", "tp", "fp", "fn", "precision", "recall", "f0.5"
    );
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{:<22} {:>9.2} {:>7} {:>7} {:>7} {:>9.4} {:>9.4} {:>9.4}",
            name, r.threshold, r.tp, r.fp, r.fn_, r.precision, r.recall, r.f_half
        );
    }
    s
}

fn eval(a: &EvalArgs, argv: &[String]) -> Result<()> {
    let mut inputs = vec![a.ckpt.clone(), a.corpus.clone()];
    inputs.extend(a.embeddings.clone());
    inputs.extend(a.adapter.clone());
    let rec = RunRecorder::start(argv, a, None, inputs)?;
    let split = parse_split(&a.split)?;
    let (ckpt, tok) = load_checkpoint(&a.ckpt)?;
    let ckpt = attach_from_args(ckpt, a.embeddings.as_ref(), a.adapter.as_ref())?;
    let threshold = a.threshold.unwrap_or(ckpt.threshold);
    let model = ckpt.model()?;
    let utts = load_split(&a.corpus, split)?;
    if utts.is_empty() {
        return Err(Error::Data(format!("split {} is empty", split.as_str())));
    }
    let ss = samples(&tok, &ckpt.config.encoder, &utts)?;
    let mut rows = vec![(split.as_str().to_string(), evaluate_at(&model, &ss, threshold)?)];
    if a.sweep {
        let (p, y) = collect_scores(&model, &ss, None)?;
        rows.push((format!("{}/sweep", split.as_str()), sweep_threshold(&p, &vec![true; p.len()], &y, 0.01)));
    }
    fs::create_dir_all(&a.out)?;
    let mut w = create(&a.out.join("report.jsonl"))?;
    for (name, r) in &rows {
        write_report_jsonl(&mut w, name, r)?;
    }
    w.flush()?;
    let text = report_table(&rows);
    fs::write(a.out.join("report.txt"), &text)?;
    rec.finish(&a.out)?;
    print!("{text}");
    Ok(())
}

// ---------------------------------------------------------------------------
// adapt

#[derive(Serialize)]
struct AdaptSummary {
    pairs: usize,
    initial_mse: f64,
    final_mse: f64,
}

#[derive(Serialize)]
struct LossLine {
    step: usize,
    loss: f64,
}

fn adapt(a: &AdaptArgs, argv: &[String]) -> Result<()> {
    let rec = RunRecorder::start(argv, a, Some(a.seed), vec![a.ckpt.clone(), a.embeddings.clone()])?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    if ckpt.config.speaker_mode != SpeakerMode::Trainable {
        return Err(Error::Contract(format!(
            "the adapter maps into a learned table; checkpoint is in {} mode",
            ckpt.config.speaker_mode.as_str()
        )));
    }
    let learned = table_of(&ckpt)?;
    let raw = EmbeddingTable::read_path(&a.embeddings, Provenance::External)?;
    if !raw.provenance.is_raw() {
        return Err(Error::Contract(format!("adapter input must be raw embeddings, got {}", raw.provenance.as_str())));
    }
    let pairs: Vec<(Vec<f32>, Vec<f32>)> = raw
        .entries
        .iter()
        .filter_map(|(id, e)| learned.get(*id).map(|t| (e.clone(), t.to_vec())))
        .collect();
    if pairs.len() < 2 {
        return Err(Error::Data(format!("only {} speakers are in both tables", pairs.len())));
    }
    let cfg = AdapterConfig { steps: a.steps, lr: a.lr, batch_size: a.batch_size, hidden: a.hidden, seed: a.seed };
    let initial = Adapter::new(raw.dim, a.hidden, Stream::new(a.seed).tag("adapter").tag("init"))?.mse(&pairs)?;
    let run = train_adapter(&pairs, &cfg)?;
    let final_mse = run.adapter.mse(&pairs)?;
    run.adapter.save(&a.out)?;
    let losses: Vec<LossLine> = run.losses.iter().enumerate().map(|(i, &loss)| LossLine { step: i + 1, loss }).collect();
    write_json_lines(&a.out.join("adapter_log.jsonl"), &losses)?;
    write_json_lines(&a.out.join("adapter_summary.jsonl"), &[AdaptSummary { pairs: pairs.len(), initial_mse: initial, final_mse }])?;
    rec.finish(&a.out)?;
    println!("adapter MSE over {} pairs: {initial:.6} -> {final_mse:.6}", pairs.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// fewshot

fn fewshot(a: &FewshotArgs, argv: &[String]) -> Result<()> {
    let emb_path = a.embeddings.clone().unwrap_or_else(|| a.corpus.join("validation_unseen.emb.tsv"));
    let mut inputs = vec![a.ckpt.clone(), a.corpus.clone(), emb_path.clone()];
    inputs.extend(a.adapter.clone());
    let rec = RunRecorder::start(argv, a, Some(a.seed), inputs)?;
    let (ckpt, tok) = load_checkpoint(&a.ckpt)?;
    let adapter = a.adapter.as_ref().map(|d| Adapter::load(d)).transpose()?;
    let embs = UtteranceEmbeddings::read(open(&emb_path)?)?;
    let test = load_split(&a.corpus, SplitName::TestUnseen)?;
    let rows = fewshot_experiment(
        &ckpt,
        &tok,
        &test,
        &embs.by_speaker(),
        embs.provenance.unwrap_or(Provenance::External),
        &a.sizes,
        adapter.as_ref(),
        a.seed,
    )?;
    fs::create_dir_all(&a.out)?;
    write_json_lines(&a.out.join("fewshot.jsonl"), &rows)?;
    let mut text = format!("{:>5} {:>9} {:>9} {:>9} {:>9}\n", "size", "threshold", "precision", "recall", "f0.5");
    for r in &rows {
        let _ = writeln!(text, "{:>5} {:>9.2} {:>9.4} {:>9.4} {:>9.4}", r.size, r.threshold, r.precision, r.recall, r.f_half);
    }
    fs::write(a.out.join("fewshot.txt"), &text)?;
    rec.finish(&a.out)?;
    print!("{text}");
    Ok(())
}

// ---------------------------------------------------------------------------
// predict

fn is_mark(c: char) -> bool {
    c.is_ascii_punctuation() && c != '\'' && c != '-'
}

/// Splits raw text into words with attached trailing punctuation.
pub(crate) fn text_words(line: &str, lexicon: &BTreeMap<String, Vec<String>>) -> Vec<Word> {
    let mut words: Vec<Word> = Vec::new();
    for raw in line.split_whitespace() {
        let core = raw.trim_matches(is_mark).to_lowercase();
        let trailing = &raw[raw.trim_end_matches(is_mark).len()..];
        if core.is_empty() {
            if let Some(prev) = words.last_mut() {
                prev.trailing_punct.get_or_insert_with(String::new).push_str(raw);
            }
            continue;
        }
        let mut phonemes = lexicon.get(&core).cloned().unwrap_or_else(|| spell(&core));
        if phonemes.is_empty() {
            phonemes = vec![core.to_uppercase()];
        }
        words.push(Word { surface: core, phonemes, trailing_punct: (!trailing.is_empty()).then(|| trailing.to_string()) });
    }
    words
}

fn predict(a: &PredictArgs, argv: &[String]) -> Result<()> {
    let rec = RunRecorder::start(argv, a, None, vec![a.ckpt.clone(), a.text.clone()])?;
    let (ckpt, tok) = load_checkpoint(&a.ckpt)?;
    let threshold = a.threshold.unwrap_or(ckpt.threshold);
    let model = ckpt.model()?;
    let lex_path = a.ckpt.join(LEXICON_FILE);
    let lexicon: BTreeMap<String, Vec<String>> =
        if lex_path.exists() { read_lexicon(open(&lex_path)?)?.into_iter().collect() } else { BTreeMap::new() };
    let text = fs::read_to_string(&a.text).map_err(|e| Error::Data(format!("cannot read {}: {e}", a.text.display())))?;
    let mut out = String::new();
    for line in text.lines() {
        let words = text_words(line, &lexicon);
        if words.is_empty() {
            out.push('\n');
            continue;
        }
        let mut ann = predict_rps(&model, &tok, threshold, &normalize_punctuation(&words), a.speaker)?;
        ann.words = words;
        let _ = writeln!(out, "{ann}");
    }
    match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("predictions.txt"), &out)?;
            rec.finish(dir)?;
        }
        None => print!("{out}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// stats

#[derive(Serialize)]
struct DistSummary {
    split: String,
    speakers: usize,
    f_rp_mean: f64,
    f_rp_std: f64,
    t_rp_mean: f64,
    t_rp_std: f64,
}

#[derive(Serialize)]
struct DistComparison {
    a: String,
    b: String,
    f_rp_w1: f64,
    f_rp_ks: f64,
    t_rp_w1: Option<f64>,
    t_rp_ks: Option<f64>,
}

#[derive(Serialize)]
struct ChiLine<'a> {
    characteristic: &'a str,
    rows: &'a [String],
    cols: &'a [String],
    counts: &'a [Vec<u64>],
    chi2: f64,
    df: usize,
    p: f64,
    cramers_v: f64,
    sparse: bool,
}

fn stats(a: &StatsArgs, argv: &[String]) -> Result<()> {
    let mut inputs = vec![a.corpus.clone()];
    inputs.extend(a.embeddings.clone());
    inputs.extend(a.annotations.clone());
    let rec = RunRecorder::start(argv, a, Some(a.seed), inputs)?;
    let groups: Vec<(String, Vec<Utterance>)> = if a.corpus.is_dir() {
        SplitName::ALL
            .iter()
            .filter(|n| split_path(&a.corpus, **n).exists())
            .map(|&n| Ok((n.as_str().to_string(), load_split(&a.corpus, n)?)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|(_, u)| !u.is_empty())
            .collect()
    } else {
        vec![("corpus".to_string(), read_any_jsonl(&a.corpus)?)]
    };
    if groups.is_empty() {
        return Err(Error::Data(format!("no utterances found in {}", a.corpus.display())));
    }
    fs::create_dir_all(&a.out)?;
    let all: Vec<Utterance> = groups.iter().flat_map(|(_, u)| u.iter().cloned()).collect();
    let mut w = create(&a.out.join("rp_stats.csv"))?;
    write_rp_csv(&mut w, &rp_stats(&all))?;
    w.flush()?;

    let mut text = String::new();
    let mut dists: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut summary = Vec::new();
    for (name, utts) in &groups {
        let st = rp_stats(utts);
        let f: Vec<f64> = st.values().map(|s| s.f_rp_hz).collect();
        let t: Vec<f64> = st.values().filter_map(|s| s.mean_t_rp_s).collect();
        let (fm, fs_) = mean_std(&f);
        let (tm, ts) = mean_std(&t);
        let _ = writeln!(text, "{name:<18} speakers {:>4}  f_rp {fm:.4} ± {fs_:.4} Hz  T_rp {tm:.4} ± {ts:.4} s", f.len());
        summary.push(DistSummary {
            split: name.clone(),
            speakers: f.len(),
            f_rp_mean: fm,
            f_rp_std: fs_,
            t_rp_mean: tm,
            t_rp_std: ts,
        });
        dists.push((name.clone(), f, t));
    }
    let mut comparisons = Vec::new();
    for i in 0..dists.len() {
        for j in i + 1..dists.len() {
            let (na, fa, ta) = &dists[i];
            let (nb, fb, tb) = &dists[j];
            let both = !ta.is_empty() && !tb.is_empty();
            let c = DistComparison {
                a: na.clone(),
                b: nb.clone(),
                f_rp_w1: wasserstein1(fa, fb)?,
                f_rp_ks: ks_statistic(fa, fb)?,
                t_rp_w1: if both { Some(wasserstein1(ta, tb)?) } else { None },
                t_rp_ks: if both { Some(ks_statistic(ta, tb)?) } else { None },
            };
            let _ = writeln!(
                text,
                "{na} vs {nb}: f_rp W1 {:.4} KS {:.4}; T_rp W1 {} KS {}",
                c.f_rp_w1,
                c.f_rp_ks,
                c.t_rp_w1.map_or("-".into(), |v| format!("{v:.4}")),
                c.t_rp_ks.map_or("-".into(), |v| format!("{v:.4}")),
            );
            comparisons.push(c);
        }
    }
    write_json_lines(&a.out.join("summary.jsonl"), &summary)?;
    write_json_lines(&a.out.join("distances.jsonl"), &comparisons)?;

    if let Some(path) = &a.embeddings {
        let table = EmbeddingTable::read_path(path, Provenance::External)?;
        let ids: Vec<u32> = table.entries.keys().copied().collect();
        let vectors: Vec<Vec<f64>> = table.entries.values().map(|v| v.iter().map(|&x| f64::from(x)).collect()).collect();
        let km = kmeans(&vectors, a.k, Stream::new(a.seed).tag("stats/kmeans"), a.max_iters)?;
        let assignments: BTreeMap<u32, usize> = ids.iter().copied().zip(km.assignments.iter().copied()).collect();
        let mut w = create(&a.out.join("clusters.tsv"))?;
        writeln!(w, "speaker_id\tcluster")?;
        for (s, c) in &assignments {
            writeln!(w, "{s}\t{c}")?;
        }
        w.flush()?;
        let _ = writeln!(text, "k-means k={} inertia {:.4}", a.k, km.inertia);
        if let Some(ann) = &a.annotations {
            let tables = build_characteristic_tables(&assignments, &parse_annotations(open(ann)?)?);
            let mut w = create(&a.out.join("chi2.jsonl"))?;
            for (name, t) in &tables.tables {
                let c = chi_squared(t)?;
                let line = ChiLine {
                    characteristic: name,
                    rows: &t.row_labels,
                    cols: &t.col_labels,
                    counts: &t.counts,
                    chi2: c.chi2,
                    df: c.df,
                    p: c.p,
                    cramers_v: c.cramers_v,
                    sparse: c.sparse,
                };
                serde_json::to_writer(&mut w, &line)?;
                w.write_all(b"\n")?;
                let _ = writeln!(
                    text,
                    "{name:<24} chi2 {:>8.4} df {:>2} p {:.4} V {:.4}{}",
                    c.chi2,
                    c.df,
                    c.p,
                    c.cramers_v,
                    if c.sparse { " (sparse)" } else { "" }
                );
            }
            w.flush()?;
            for name in &tables.skipped {
                let _ = writeln!(text, "{name:<24} skipped (degenerate table)");
            }
        }
    } else if a.annotations.is_some() {
        return Err(Error::InvalidArgument("--annotations needs --embeddings to cluster".into()));
    }
    fs::write(a.out.join("summary.txt"), &text)?;
    rec.finish(&a.out)?;
    print!("{text}");
    Ok(())
}
