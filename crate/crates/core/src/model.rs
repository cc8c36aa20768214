//! Speaker-conditioned phrasing model.
//!
//! ```text
//! h  = encoder(tokens)                       [T, d_enc]
//! h' = h + GELU(e_spk W_s + b_s)             (broadcast over T; skipped for the baseline)
//! y  = sigmoid(linear(drop(LN(BiLSTM(drop(LN(BiLSTM(drop(h')))))))))
//! ```
//!
//! The decoder BiLSTMs use hidden size `d_enc / 2` so their output width is
//! `d_enc`. Training runs in two stages: encoder frozen, then encoder unfrozen
//! at a lower peak rate with its gradients clipped.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Utterance, Word};
use crate::encoders::{encode, encode_backward, EncoderCache, EncoderConfig, EncoderParams, Tokenizers, ENCODER_PREFIX};
use crate::error::{Error, Result};
use crate::evalstats::{sweep_threshold, EvalReport};
use crate::nn::checkpoint::{load_into_store, read_file, store_tensors, write_file};
use crate::nn::lstm::BiLstmCache;
use crate::nn::{
    bilstm, bilstm_backward, clip_global_norm, dropout, dropout_backward, layer_norm, layer_norm_backward, linear,
    linear_backward, masked_bce_logits, sigmoid, warmup_linear_lr, xavier_init, Activation, AdamW, BiLstmParams,
    Grads, LayerNormCache, ParamId, ParameterStore, Scalar, Tensor,
};
use crate::rng::Stream;
use crate::speaker::{EmbeddingTable, Provenance};
use crate::tokenize::TokenizedExample;

pub const LN_EPS: f64 = 1e-5;
pub const RP_MARK: &str = "/";
pub const SPEAKER_TABLE: &str = "spk/table";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeakerMode {
    /// Speaker-agnostic baseline without any speaker parameters.
    None,
    /// Externally supplied table, never updated.
    Frozen,
    /// Xavier-initialized table learned with the model.
    Trainable,
}

impl SpeakerMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "frozen" => Ok(Self::Frozen),
            "trainable" => Ok(Self::Trainable),
            _ => Err(Error::Config(format!("unknown speaker mode {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Frozen => "frozen",
            Self::Trainable => "trainable",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhrasingConfig {
    pub encoder: EncoderConfig,
    pub speaker_dim: usize,
    pub speaker_mode: SpeakerMode,
    pub dropout: f64,
    pub num_speakers: usize,
}

impl PhrasingConfig {
    pub fn new(encoder: EncoderConfig, speaker_mode: SpeakerMode, num_speakers: usize) -> Self {
        PhrasingConfig { encoder, speaker_dim: 192, speaker_mode, dropout: 0.5, num_speakers }
    }

    pub fn decoder_hidden(&self) -> usize {
        self.encoder.d_enc / 2
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.speaker_mode != SpeakerMode::None && (self.speaker_dim == 0 || self.num_speakers == 0) {
            return Err(Error::Config("speaker-conditioned model needs speaker_dim > 0 and num_speakers > 0".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpeakerParams {
    pub table: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderParams {
    pub lstm1: BiLstmParams,
    pub ln1: (ParamId, ParamId),
    pub lstm2: BiLstmParams,
    pub ln2: (ParamId, ParamId),
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct InjectCache<F> {
    e: Tensor<F>,
    u: Tensor<F>,
    s: Tensor<F>,
}

/// `h'_t = h_t + GELU(e W_s + b_s)` for every row `t`.
pub fn inject_speaker<F: Scalar>(
    hidden: &Tensor<F>,
    embedding: &[F],
    w_s: &Tensor<F>,
    b_s: &Tensor<F>,
) -> Result<(Tensor<F>, InjectCache<F>)> {
    let e = Tensor::from_vec(&[1, embedding.len()], embedding.to_vec())?;
    let u = linear(&e, w_s, b_s)?;
    if hidden.shape().len() != 2 || hidden.cols() != u.cols() {
        return Err(Error::shape("speaker projection vs hidden", u.shape(), hidden.shape()));
    }
    let s = Activation::Gelu.forward(&u);
    let mut out = hidden.clone();
    for t in 0..out.rows() {
        for (o, &v) in out.row_mut(t).iter_mut().zip(s.data()) {
            *o += v;
        }
    }
    Ok((out, InjectCache { e, u, s }))
}

/// Returns the gradient with respect to the speaker embedding; the hidden
/// gradient passes through unchanged.
pub fn inject_speaker_backward<F: Scalar>(
    cache: &InjectCache<F>,
    w_s: &Tensor<F>,
    dy: &Tensor<F>,
    dw: &mut Tensor<F>,
    db: &mut Tensor<F>,
) -> Vec<F> {
    let mut ds = Tensor::zeros(&[1, dy.cols()]);
    for t in 0..dy.rows() {
        for (a, &v) in ds.data_mut().iter_mut().zip(dy.row(t)) {
            *a += v;
        }
    }
    let du = Activation::Gelu.backward(&cache.u, &cache.s, &ds);
    linear_backward(&cache.e, w_s, &du, dw, db).into_data()
}

/// Word-final positions eligible for an RP: not the last word and not
/// followed by punctuation.
pub fn candidate_mask(ex: &TokenizedExample) -> Vec<bool> {
    let last = ex.num_words().saturating_sub(1);
    (0..ex.len())
        .map(|t| {
            ex.word_final_mask[t] && ex.word_index[t] < last && !ex.punct_mask.get(t + 1).copied().unwrap_or(false)
        })
        .collect()
}

/// A labelled training or evaluation item.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub example: TokenizedExample,
    pub speaker: u32,
    pub candidates: Vec<bool>,
}

impl Sample {
    pub fn new(example: TokenizedExample, speaker: u32) -> Self {
        let candidates = candidate_mask(&example);
        Sample { example, speaker, candidates }
    }

    pub fn from_utterance(tok: &Tokenizers, cfg: &EncoderConfig, utt: &Utterance) -> Result<Self> {
        Ok(Self::new(tok.example(cfg.kind, utt)?, utt.speaker_id))
    }
}

pub struct ForwardCache<F> {
    enc: Option<EncoderCache<F>>,
    inject: Option<(u32, InjectCache<F>)>,
    drops: [Option<Vec<F>>; 3],
    l1: BiLstmCache<F>,
    n1: LayerNormCache<F>,
    l2: BiLstmCache<F>,
    n2: LayerNormCache<F>,
    x3: Tensor<F>,
}

#[derive(Clone, Debug)]
pub struct PhrasingModel<F> {
    pub config: PhrasingConfig,
    pub store: ParameterStore<F>,
    pub encoder: EncoderParams,
    pub speaker: Option<SpeakerParams>,
    pub decoder: DecoderParams,
    /// Origin of the speaker table currently installed.
    pub speaker_provenance: Option<Provenance>,
}

impl<F: Scalar> PhrasingModel<F> {
    pub fn new(config: PhrasingConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let root = Stream::new(seed).tag("model");
        let mut store = ParameterStore::new();
        let encoder = EncoderParams::register(&mut store, &config.encoder, root.tag("encoder"))?;
        let d = config.encoder.d_enc;
        let speaker = match config.speaker_mode {
            SpeakerMode::None => None,
            mode => {
                let s = root.tag("speaker");
                Some(SpeakerParams {
                    table: store.insert(
                        SPEAKER_TABLE,
                        xavier_init(&[config.num_speakers, config.speaker_dim], s.tag("table")),
                        mode == SpeakerMode::Trainable,
                    )?,
                    proj_w: store.insert("spk/proj/w", xavier_init(&[config.speaker_dim, d], s.tag("proj")), true)?,
                    proj_b: store.insert("spk/proj/b", Tensor::zeros(&[d]), true)?,
                })
            }
        };
        let dec = root.tag("decoder");
        let h = config.decoder_hidden();
        let mut ln = |name: &str| -> Result<(ParamId, ParamId)> {
            let g = store.insert(&format!("dec/{name}/gamma"), Tensor::from_vec(&[d], vec![F::one(); d])?, true)?;
            let b = store.insert(&format!("dec/{name}/beta"), Tensor::zeros(&[d]), true)?;
            Ok((g, b))
        };
        let ln1 = ln("ln1")?;
        let ln2 = ln("ln2")?;
        let lstm1 = BiLstmParams::register(&mut store, "dec/lstm1", d, h, dec.tag("lstm1"))?;
        let lstm2 = BiLstmParams::register(&mut store, "dec/lstm2", d, h, dec.tag("lstm2"))?;
        let out_w = store.insert("dec/out/w", xavier_init(&[d, 1], dec.tag("out")), true)?;
        let out_b = store.insert("dec/out/b", Tensor::zeros(&[1]), true)?;
        let speaker_provenance = speaker.map(|_| Provenance::Xavier);
        Ok(PhrasingModel {
            config,
            store,
            encoder,
            speaker,
            decoder: DecoderParams { lstm1, ln1, lstm2, ln2, out_w, out_b },
            speaker_provenance,
        })
    }

    /// Copies pretrained encoder tensors (names under `enc/`) into the model.
    pub fn load_encoder(&mut self, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
        for id in self.store.ids_with_prefix(ENCODER_PREFIX) {
            let name = self.store.get(id).name.clone();
            let t = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Contract(format!("pretrained encoder lacks {name}")))?;
            self.store.set_value(id, t.1.cast())?;
        }
        Ok(())
    }

    /// Installs a speaker table. Rows are indexed by speaker id; the table
    /// grows to cover the largest id and rows without an entry are zero.
    pub fn set_speaker_table(&mut self, table: &EmbeddingTable) -> Result<()> {
        let sp = self.speaker.ok_or_else(|| Error::Contract("baseline model has no speaker table".into()))?;
        if table.dim != self.config.speaker_dim {
            return Err(Error::shape("speaker table", &[table.dim], &[self.config.speaker_dim]));
        }
        let rows = table.entries.keys().next_back().map_or(0, |&m| m as usize + 1).max(self.config.num_speakers);
        let mut t = Tensor::zeros(&[rows, table.dim]);
        for (&id, v) in &table.entries {
            for (o, &x) in t.row_mut(id as usize).iter_mut().zip(v) {
                *o = F::lit(f64::from(x));
            }
        }
        self.store.reshape_value(sp.table, t);
        self.config.num_speakers = rows;
        self.speaker_provenance = Some(table.provenance);
        Ok(())
    }

    pub fn speaker_embedding(&self, speaker: u32) -> Result<Option<&[F]>> {
        match self.speaker {
            None => Ok(None),
            Some(sp) => {
                let t = self.store.value(sp.table);
                let s = speaker as usize;
                if s >= t.rows() {
                    return Err(Error::OutOfRange { index: s, len: t.rows() });
                }
                Ok(Some(t.row(s)))
            }
        }
    }

    pub fn cast<G: Scalar>(&self) -> PhrasingModel<G> {
        PhrasingModel {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            speaker: self.speaker,
            decoder: self.decoder,
            speaker_provenance: self.speaker_provenance,
        }
    }

    pub fn encode(&self, ex: &TokenizedExample) -> Result<(Tensor<F>, EncoderCache<F>)> {
        encode(&self.config.encoder, &self.store, &self.encoder, &ex.token_ids, ex.sup_ids.as_deref())
    }

    /// Logits for every token. `encoded` supplies precomputed encoder output
    /// (no encoder gradient is then available).
    pub fn forward_logits(
        &self,
        ex: &TokenizedExample,
        encoded: Option<&Tensor<F>>,
        speaker: u32,
        training: bool,
        stream: Stream,
    ) -> Result<(Vec<F>, ForwardCache<F>)> {
        let (h, enc) = match encoded {
            Some(h) => (h.clone(), None),
            None => {
                let (h, c) = self.encode(ex)?;
                (h, Some(c))
            }
        };
        let (h, inject) = match (self.speaker, self.speaker_embedding(speaker)?) {
            (Some(sp), Some(e)) => {
                let (h2, c) = inject_speaker(&h, e, self.store.value(sp.proj_w), self.store.value(sp.proj_b))?;
                (h2, Some((speaker, c)))
            }
            _ => (h, None),
        };
        let p = &self.decoder;
        let rate = self.config.dropout;
        let (x1, d0) = dropout(&h, rate, training, stream.tag("drop0"))?;
        let (y1, l1) = bilstm(&x1, &self.store, &p.lstm1)?;
        let (m1, n1) = layer_norm(&y1, self.store.value(p.ln1.0), self.store.value(p.ln1.1), LN_EPS)?;
        let (x2, d1) = dropout(&m1, rate, training, stream.tag("drop1"))?;
        let (y2, l2) = bilstm(&x2, &self.store, &p.lstm2)?;
        let (m2, n2) = layer_norm(&y2, self.store.value(p.ln2.0), self.store.value(p.ln2.1), LN_EPS)?;
        let (x3, d2) = dropout(&m2, rate, training, stream.tag("drop2"))?;
        let z = linear(&x3, self.store.value(p.out_w), self.store.value(p.out_b))?;
        Ok((z.into_data(), ForwardCache { enc, inject, drops: [d0, d1, d2], l1, n1, l2, n2, x3 }))
    }

    /// RP probability per token.
    pub fn forward(&self, ex: &TokenizedExample, speaker: u32, training: bool, stream: Stream) -> Result<Vec<F>> {
        let (z, _) = self.forward_logits(ex, None, speaker, training, stream)?;
        Ok(z.into_iter().map(sigmoid).collect())
    }

    /// Accumulates parameter gradients for `d loss / d logits` into `grads`.
    /// Encoder gradients are produced only when the cache holds an encoder pass.
    pub fn backward(&self, cache: &ForwardCache<F>, dlogits: &[F], grads: &mut Grads<F>) {
        let p = &self.decoder;
        let s = &self.store;
        let dz = Tensor::from_vec(&[dlogits.len(), 1], dlogits.to_vec()).expect("one logit per token");
        let mut dw = std::mem::replace(grads.get_mut(p.out_w), Tensor::zeros(&[0]));
        let dx3 = linear_backward(&cache.x3, s.value(p.out_w), &dz, &mut dw, grads.get_mut(p.out_b));
        *grads.get_mut(p.out_w) = dw;
        let dm2 = dropout_backward(cache.drops[2].as_deref(), &dx3);
        let mut dg = std::mem::replace(grads.get_mut(p.ln2.0), Tensor::zeros(&[0]));
        let dy2 = layer_norm_backward(&cache.n2, s.value(p.ln2.0), &dm2, &mut dg, grads.get_mut(p.ln2.1));
        *grads.get_mut(p.ln2.0) = dg;
        let dx2 = bilstm_backward(&cache.l2, s, &p.lstm2, &dy2, grads);
        let dm1 = dropout_backward(cache.drops[1].as_deref(), &dx2);
        let mut dg = std::mem::replace(grads.get_mut(p.ln1.0), Tensor::zeros(&[0]));
        let dy1 = layer_norm_backward(&cache.n1, s.value(p.ln1.0), &dm1, &mut dg, grads.get_mut(p.ln1.1));
        *grads.get_mut(p.ln1.0) = dg;
        let dx1 = bilstm_backward(&cache.l1, s, &p.lstm1, &dy1, grads);
        let dh = dropout_backward(cache.drops[0].as_deref(), &dx1);
        if let (Some(sp), Some((speaker, ic))) = (self.speaker, &cache.inject) {
            let mut dw = std::mem::replace(grads.get_mut(sp.proj_w), Tensor::zeros(&[0]));
            let de = inject_speaker_backward(ic, s.value(sp.proj_w), &dh, &mut dw, grads.get_mut(sp.proj_b));
            *grads.get_mut(sp.proj_w) = dw;
            if s.get(sp.table).trainable {
                for (g, v) in grads.get_mut(sp.table).row_mut(*speaker as usize).iter_mut().zip(de) {
                    *g += v;
                }
            }
        }
        if let Some(ec) = &cache.enc {
            encode_backward(ec, s, &self.encoder, &dh, grads);
        }
    }

    /// Masked BCE over word-final tokens with an explicit normalizer,
    /// accumulating gradients into `grads`.
    pub fn loss_and_backward(
        &self,
        sample: &Sample,
        encoded: Option<&Tensor<F>>,
        norm: usize,
        stream: Stream,
        grads: &mut Grads<F>,
    ) -> Result<F> {
        let ex = &sample.example;
        let (z, cache) = self.forward_logits(ex, encoded, sample.speaker, true, stream)?;
        let (loss, dz) = masked_bce_logits(&z, &ex.labels, &ex.word_final_mask, norm);
        self.backward(&cache, &dz, grads);
        Ok(loss)
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub epochs: usize,
    pub peak_lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    /// Global-norm bound on encoder gradients in stage 2.
    pub encoder_clip: f64,
    pub batch_size: usize,
    pub eval_every: usize,
    pub threshold_step: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1: StageConfig { epochs: 10, peak_lr: 5e-4 },
            stage2: StageConfig { epochs: 10, peak_lr: 5e-6 },
            encoder_clip: 1.0,
            batch_size: 32,
            eval_every: 1000,
            threshold_step: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalPoint {
    pub step: usize,
    pub stage: usize,
    /// Mean training loss since the previous evaluation.
    pub train_loss: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: PhrasingConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub threshold: f64,
    pub f_half: f64,
    pub step: usize,
    pub speaker_provenance: Option<Provenance>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    threshold: f64,
    f_half: f64,
    step: usize,
    config_digest: String,
    speaker_provenance: Option<Provenance>,
    config: PhrasingConfig,
}

pub const CHECKPOINT_FILE: &str = "model.pbrk";
pub const SIDECAR_FILE: &str = "model.toml";

impl Checkpoint {
    pub fn from_model(model: &PhrasingModel<f32>, threshold: f64, f_half: f64, step: usize) -> Self {
        Checkpoint {
            config: model.config.clone(),
            tensors: store_tensors(&model.store),
            threshold,
            f_half,
            step,
            speaker_provenance: model.speaker_provenance,
        }
    }

    pub fn model(&self) -> Result<PhrasingModel<f32>> {
        let mut m = PhrasingModel::new(self.config.clone(), 0)?;
        if let Some(sp) = m.speaker {
            let t = self
                .tensors
                .iter()
                .find(|(n, _)| n == SPEAKER_TABLE)
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks {SPEAKER_TABLE}")))?;
            m.store.reshape_value(sp.table, t.1.clone());
        }
        load_into_store(&mut m.store, &self.tensors)?;
        m.speaker_provenance = self.speaker_provenance;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Contract(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        fs::create_dir_all(dir)?;
        let refs: Vec<(&str, &Tensor<f32>)> = self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        write_file(&dir.join(CHECKPOINT_FILE), &refs)?;
        let side = Sidecar {
            threshold: self.threshold,
            f_half: self.f_half,
            step: self.step,
            config_digest: self.config.digest(),
            speaker_provenance: self.speaker_provenance,
            config: self.config.clone(),
        };
        let text = toml::to_string(&side).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(dir.join(SIDECAR_FILE), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let side_path = dir.join(SIDECAR_FILE);
        let text = fs::read_to_string(&side_path)
            .map_err(|e| Error::Checkpoint { path: side_path.clone(), msg: e.to_string() })?;
        let side: Sidecar = toml::from_str(&text)
            .map_err(|e| Error::Checkpoint { path: side_path.clone(), msg: e.to_string() })?;
        if side.config.digest() != side.config_digest {
            return Err(Error::Checkpoint {
                path: side_path.clone(),
                msg: "config digest does not match the stored config".into(),
            });
        }
        Ok(Checkpoint {
            tensors: read_file(&dir.join(CHECKPOINT_FILE))?,
            config: side.config,
            threshold: side.threshold,
            f_half: side.f_half,
            step: side.step,
            speaker_provenance: side.speaker_provenance,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub log: Vec<EvalPoint>,
    pub steps: usize,
}

/// Candidate-position probabilities and labels for a split, flattened.
pub fn collect_scores(
    model: &PhrasingModel<f32>,
    samples: &[Sample],
    encoded: Option<&[Tensor<f32>]>,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let (z, _) = model.forward_logits(&s.example, encoded.map(|e| &e[i]), s.speaker, false, Stream::new(0))?;
        for t in 0..z.len() {
            if s.candidates[t] {
                probs.push(f64::from(sigmoid(z[t])));
                labels.push(s.example.labels[t]);
            }
        }
    }
    Ok((probs, labels))
}

/// Threshold sweep over a split's candidate positions.
pub fn validate(model: &PhrasingModel<f32>, samples: &[Sample], step: f64) -> Result<EvalReport> {
    let (p, y) = collect_scores(model, samples, None)?;
    Ok(sweep_threshold(&p, &vec![true; p.len()], &y, step))
}

/// Evaluation at a fixed threshold over a split's candidate positions.
pub fn evaluate_at(model: &PhrasingModel<f32>, samples: &[Sample], threshold: f64) -> Result<EvalReport> {
    let (p, y) = collect_scores(model, samples, None)?;
    Ok(crate::evalstats::evaluate(&p, &vec![true; p.len()], &y, threshold))
}

/// Two-stage training with periodic validation; keeps the parameters with
/// the best validation F0.5 (earliest step on ties).
pub fn train_two_stage(
    model: &mut PhrasingModel<f32>,
    train: &[Sample],
    val: &[Sample],
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("training and validation splits must be non-empty".into()));
    }
    if tc.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let enc_ids = model.store.ids_with_prefix(ENCODER_PREFIX);
    let root = Stream::new(tc.seed).tag("train");
    let adam = AdamW::default();
    let mut best: Option<Checkpoint> = None;
    let mut log = Vec::new();
    let mut global = 0usize;
    let mut window = (0.0f64, 0usize);
    let steps_per_epoch = train.len().div_ceil(tc.batch_size);
    let mut grads = model.store.grad_buffer();

    for (stage, sc) in [(1usize, tc.stage1), (2, tc.stage2)] {
        let total = sc.epochs * steps_per_epoch;
        if total == 0 {
            continue;
        }
        let frozen_encoder = stage == 1;
        model.store.set_trainable(&enc_ids, !frozen_encoder);
        model.store.reset_moments();
        // The encoder is fixed for the whole stage, so its outputs are too.
        let cached = |samples: &[Sample]| -> Result<Vec<Tensor<f32>>> {
            samples.iter().map(|s| model.encode(&s.example).map(|(h, _)| h)).collect()
        };
        let (train_enc, val_enc) =
            if frozen_encoder { (Some(cached(train)?), Some(cached(val)?)) } else { (None, None) };
        let mut local = 0usize;
        for epoch in 0..sc.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut root.tag("order").index(stage as u64).index(epoch as u64).rng());
            for batch in order.chunks(tc.batch_size) {
                local += 1;
                global += 1;
                grads.zero();
                let norm: usize = batch.iter().map(|&i| train[i].example.num_words()).sum();
                let mut loss = 0.0f64;
                for (k, &i) in batch.iter().enumerate() {
                    let enc = train_enc.as_ref().map(|e| &e[i]);
                    let stream = root.tag("dropout").index(global as u64).index(k as u64);
                    loss += f64::from(model.loss_and_backward(&train[i], enc, norm, stream, &mut grads)?);
                }
                if !loss.is_finite() {
                    return Err(Error::NonFinite { step: global });
                }
                window.0 += loss;
                window.1 += 1;
                model.store.zero_grads();
                model.store.accumulate(&grads);
                if !frozen_encoder {
                    clip_global_norm(&mut model.store, &enc_ids, tc.encoder_clip);
                }
                adam.step(&mut model.store, warmup_linear_lr(local, total, sc.peak_lr), local)?;
                let last = local == total;
                if global % tc.eval_every.max(1) == 0 || last {
                    let (p, y) = collect_scores(model, val, val_enc.as_deref())?;
                    let report = sweep_threshold(&p, &vec![true; p.len()], &y, tc.threshold_step);
                    log::info!("stage {stage} step {global}: {report}");
                    log.push(EvalPoint { step: global, stage, train_loss: window.0 / window.1.max(1) as f64, report });
                    window = (0.0, 0);
                    if best.as_ref().is_none_or(|b| report.f_half > b.f_half) {
                        best = Some(Checkpoint::from_model(model, report.threshold, report.f_half, global));
                    }
                }
            }
        }
    }
    model.store.set_trainable(&enc_ids, true);
    let best = best.ok_or_else(|| Error::Config("no training steps were configured".into()))?;
    Ok(TrainOutcome { best, log, steps: global })
}

// ---------------------------------------------------------------------------
// Prediction

#[derive(Clone, Debug, PartialEq)]
pub struct Annotated {
    pub words: Vec<Word>,
    /// One entry per word: an RP mark follows the word.
    pub marks: Vec<bool>,
    pub probs: Vec<Option<f64>>,
}

impl fmt::Display for Annotated {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts: Vec<String> = Vec::new();
        for (w, &m) in self.words.iter().zip(&self.marks) {
            parts.push(format!("{}{}", w.surface, w.trailing_punct.as_deref().unwrap_or("")));
            if m {
                parts.push(RP_MARK.to_string());
            }
        }
        f.write_str(&parts.join(" "))
    }
}

/// Marks words whose final-token probability exceeds `threshold`, skipping
/// the last word and punctuated words.
pub fn predict_rps(
    model: &PhrasingModel<f32>,
    tokenizers: &Tokenizers,
    threshold: f64,
    words: &[Word],
    speaker: u32,
) -> Result<Annotated> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside [0, 1]")));
    }
    let ex = tokenizers.tokenize(model.config.encoder.kind, words);
    let cand = candidate_mask(&ex);
    let probs = model.forward(&ex, speaker, false, Stream::new(0))?;
    let mut marks = vec![false; words.len()];
    let mut word_probs = vec![None; words.len()];
    for t in 0..ex.len() {
        if cand[t] {
            let p = f64::from(probs[t]);
            word_probs[ex.word_index[t]] = Some(p);
            marks[ex.word_index[t]] = p > threshold;
        }
    }
    Ok(Annotated { words: words.to_vec(), marks, probs: word_probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderKind;
    use crate::nn::grad_check;

    fn enc_cfg(kind: EncoderKind) -> EncoderConfig {
        EncoderConfig {
            kind,
            token_vocab: 12,
            sup_vocab: 7,
            grapheme_vocab: 6,
            embed_dim: 4,
            num_layers: 1,
            d_enc: 4,
            max_len: 32,
        }
    }

    fn config(mode: SpeakerMode) -> PhrasingConfig {
        let mut c = PhrasingConfig::new(enc_cfg(EncoderKind::Subword), mode, 3);
        c.speaker_dim = 3;
        c.dropout = 0.3;
        c
    }

    fn example() -> TokenizedExample {
        let mut ex = TokenizedExample {
            token_ids: vec![4, 5, 6, 7, 8, 9],
            word_final_mask: vec![false, true, true, false, false, true],
            labels: vec![false; 6],
            word_index: vec![0, 0, 1, 1, 2, 2],
            punct_mask: vec![false, false, false, true, false, false],
            sup_ids: None,
            grapheme_targets: None,
        };
        ex.labels[1] = true;
        ex
    }

    #[test]
    fn candidates_skip_punctuation_and_last_word() {
        assert_eq!(candidate_mask(&example()), [false, true, false, false, false, false]);
    }

    #[test]
    fn zero_projection_matches_baseline() {
        let mut m = PhrasingModel::<f64>::new(config(SpeakerMode::Frozen), 3).unwrap();
        let sp = m.speaker.unwrap();
        m.store.value_mut(sp.proj_w).fill(0.0);
        let base = PhrasingModel::<f64>::new(config(SpeakerMode::None), 3).unwrap();
        let ex = example();
        let a = m.forward(&ex, 2, false, Stream::new(0)).unwrap();
        let b = base.forward(&ex, 0, false, Stream::new(0)).unwrap();
        assert_eq!(a, b);
        // the baseline ignores the speaker argument entirely
        assert_eq!(base.forward(&ex, 999, false, Stream::new(0)).unwrap(), b);
        assert!(a.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn inject_identity_and_speaker_difference() {
        let h = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let zero_w = Tensor::<f64>::zeros(&[3, 2]);
        let zero_b = Tensor::<f64>::zeros(&[2]);
        let (out, _) = inject_speaker(&h, &[0.3, -1.0, 2.0], &zero_w, &zero_b).unwrap();
        assert_eq!(out, h);
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let (a, _) = inject_speaker(&h, &[1.0, 0.0, 0.0], &w, &zero_b).unwrap();
        let (b, _) = inject_speaker(&h, &[0.0, 1.0, 0.0], &w, &zero_b).unwrap();
        assert_ne!(a, b);
        assert_eq!(a.shape(), h.shape());
        // GELU(1) added to the first column of every row
        let g1 = 0.5 * (1.0 + libm::erf(1.0 / 2f64.sqrt()));
        assert!((a.row(1)[0] - (3.0 + g1)).abs() < 1e-12);
        assert!(inject_speaker(&h, &[1.0, 0.0], &w, &zero_b).is_err());
    }

    #[test]
    fn unknown_speaker_is_a_lookup_error() {
        let m = PhrasingModel::<f32>::new(config(SpeakerMode::Trainable), 1).unwrap();
        assert!(matches!(m.forward(&example(), 3, false, Stream::new(0)), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn inference_is_deterministic_and_dropout_is_not_inert() {
        let m = PhrasingModel::<f32>::new(config(SpeakerMode::Trainable), 1).unwrap();
        let ex = example();
        let a = m.forward(&ex, 1, false, Stream::new(1)).unwrap();
        assert_eq!(a, m.forward(&ex, 1, false, Stream::new(2)).unwrap());
        assert_ne!(a, m.forward(&ex, 1, true, Stream::new(2)).unwrap());
    }

    #[test]
    fn end_to_end_gradient_check() {
        for mode in [SpeakerMode::None, SpeakerMode::Trainable] {
            let mut m = PhrasingModel::<f64>::new(config(mode), 11).unwrap();
            // non-trivial projection bias and LN gains
            for p in m.store.iter_mut() {
                if p.name.ends_with("/b") || p.name.contains("/ln") {
                    let n = p.value.len();
                    for (k, v) in p.value.data_mut().iter_mut().enumerate() {
                        *v += 0.1 * ((k as f64 * 1.7).sin() + n as f64 * 0.01);
                    }
                }
            }
            let sample = Sample::new(example(), 2);
            let stream = Stream::new(5);
            let mut grads = m.store.grad_buffer();
            m.loss_and_backward(&sample, None, 3, stream, &mut grads).unwrap();
            let ids: Vec<ParamId> = m.store.iter().map(|(id, _)| id).collect();
            for id in ids {
                let x0 = m.store.value(id).data().to_vec();
                let analytic = grads.get(id).data().to_vec();
                let name = m.store.get(id).name.clone();
                let err = grad_check(&x0, &analytic, 1e-6, |x| {
                    let mut probe = m.clone();
                    probe.store.value_mut(id).data_mut().copy_from_slice(x);
                    let mut g = probe.store.grad_buffer();
                    probe.loss_and_backward(&sample, None, 3, stream, &mut g).unwrap()
                });
                assert!(err < 1e-3, "{mode:?} {name}: {err}");
            }
        }
    }

    fn tiny_corpus() -> (Tokenizers, Vec<Sample>) {
        let styles = crate::synthgen::gen_speakers(3, 5, 4).unwrap();
        let utts = crate::synthgen::gen_corpus(&styles, 6, 4).unwrap();
        let tok = Tokenizers::train(&utts, 30, 5);
        let mut cfg = tok.encoder_config(EncoderKind::Subword, 4, 1, 4);
        cfg.max_len = 512;
        let samples = utts.iter().map(|u| Sample::from_utterance(&tok, &cfg, u).unwrap()).collect();
        (tok, samples)
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            stage1: StageConfig { epochs: 1, peak_lr: 1e-2 },
            stage2: StageConfig { epochs: 1, peak_lr: 1e-3 },
            batch_size: 4,
            eval_every: 1_000_000,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn frozen_table_survives_training_and_eval_happens() {
        let (tok, samples) = tiny_corpus();
        let mut c = PhrasingConfig::new(tok.encoder_config(EncoderKind::Subword, 4, 1, 4), SpeakerMode::Frozen, 3);
        c.speaker_dim = 3;
        let mut m = PhrasingModel::<f32>::new(c, 2).unwrap();
        let table = m.store.value(m.speaker.unwrap().table).clone();
        let enc_before = m.store.value(m.encoder.tok).clone();
        let out = train_two_stage(&mut m, &samples[..12], &samples[12..], &tiny_train_config()).unwrap();
        assert_eq!(m.store.value(m.speaker.unwrap().table), &table);
        assert_ne!(m.store.value(m.encoder.tok), &enc_before, "stage 2 updates the encoder");
        // one final evaluation per stage even though eval_every is never reached
        assert_eq!(out.log.len(), 2);
        assert!((0.0..=1.0).contains(&out.best.threshold));
        let best_f = out.log.iter().map(|e| e.report.f_half).fold(f64::MIN, f64::max);
        assert_eq!(out.best.f_half, best_f);
        let first_best = out.log.iter().find(|e| e.report.f_half == best_f).unwrap();
        assert_eq!(out.best.step, first_best.step);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let (tok, samples) = tiny_corpus();
        let mut c = PhrasingConfig::new(tok.encoder_config(EncoderKind::Subword, 4, 1, 4), SpeakerMode::Trainable, 3);
        c.speaker_dim = 3;
        let m = PhrasingModel::<f32>::new(c, 2).unwrap();
        let ck = Checkpoint::from_model(&m, 0.37, 0.5, 10);
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);
        let m2 = back.model().unwrap();
        for s in &samples {
            let a = m.forward(&s.example, s.speaker, false, Stream::new(0)).unwrap();
            let b = m2.forward(&s.example, s.speaker, false, Stream::new(0)).unwrap();
            assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
        let mut bad = ck.clone();
        bad.threshold = 1.5;
        assert!(bad.save(dir.path()).is_err());
    }

    #[test]
    fn prediction_thresholds() {
        let (tok, _) = tiny_corpus();
        let mut c = PhrasingConfig::new(tok.encoder_config(EncoderKind::Subword, 4, 1, 4), SpeakerMode::None, 1);
        c.speaker_dim = 3;
        let m = PhrasingModel::<f32>::new(c, 2).unwrap();
        let words = vec![
            Word::new("ba", &["B", "AA"], None),
            Word::new("ko", &["K", "OW"], Some(",")),
            Word::new("da", &["D", "AA"], None),
            Word::new("mi", &["M", "IY"], None),
        ];
        let none = predict_rps(&m, &tok, 1.0, &words, 0).unwrap();
        assert!(none.marks.iter().all(|&x| !x));
        let all = predict_rps(&m, &tok, 0.0, &words, 0).unwrap();
        assert_eq!(all.marks, [true, false, true, false]);
        assert_eq!(all.to_string(), "ba / ko, da / mi");
        assert_eq!(all.words, words);
    }

    #[test]
    fn loss_only_touches_word_finals() {
        // changing a label at a non-final position leaves loss and gradients unchanged
        let m = PhrasingModel::<f64>::new(config(SpeakerMode::None), 4).unwrap();
        let s = Sample::new(example(), 0);
        let mut t = s.clone();
        t.example.labels[0] = true;
        t.example.labels[3] = true;
        let (mut g1, mut g2) = (m.store.grad_buffer(), m.store.grad_buffer());
        let a = m.loss_and_backward(&s, None, 3, Stream::new(1), &mut g1).unwrap();
        let b = m.loss_and_backward(&t, None, 3, Stream::new(1), &mut g2).unwrap();
        assert_eq!(a, b);
        assert_eq!(g1.get(m.decoder.out_w), g2.get(m.decoder.out_w));
    }
}
