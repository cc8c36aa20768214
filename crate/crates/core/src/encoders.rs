//! Small pretrainable sequence encoders.
//!
//! An encoder embeds tokens (plus learned positions, plus sup-phoneme groups
//! for [`EncoderKind::PhonemeMp`]) and runs a stack of BiLSTM layers whose
//! output width is `d_enc`. Pretraining heads are plain linear projections to
//! the relevant vocabulary.

use std::fs;
use std::io::BufReader;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Utterance, Word};
use crate::error::{Error, Result};
use crate::nn::lstm::BiLstmCache;
use crate::nn::{
    bilstm, bilstm_backward, embedding_backward, embedding_lookup, linear, linear_backward, softmax_cross_entropy,
    warmup_linear_lr, xavier_init, AdamW, BiLstmParams, ParamId, ParameterStore, Scalar, Tensor,
};
use crate::rng::Stream;
use crate::tokenize::{
    derive_supphonemes, make_labels, MergeTable, PhonemeTokenizer, SubwordTokenizer, SupPhonemeTokenizer,
    TokenizedExample, Vocab, MASK, SPECIALS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Subword,
    Phoneme,
    PhonemeMp,
    PhonemePl,
}

impl EncoderKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "subword" => Ok(Self::Subword),
            "phoneme" => Ok(Self::Phoneme),
            "phoneme_mp" => Ok(Self::PhonemeMp),
            "phoneme_pl" => Ok(Self::PhonemePl),
            _ => Err(Error::Config(format!("unknown encoder kind {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Subword => "subword",
            Self::Phoneme => "phoneme",
            Self::PhonemeMp => "phoneme_mp",
            Self::PhonemePl => "phoneme_pl",
        }
    }

    pub fn allowed_objectives(self) -> &'static [Objective] {
        match self {
            Self::Subword | Self::Phoneme => &[Objective::Mlm],
            Self::PhonemeMp => &[Objective::Mlm, Objective::SupMlm],
            Self::PhonemePl => &[Objective::Mlm, Objective::P2g],
        }
    }

    pub fn default_objectives(self) -> Vec<Objective> {
        self.allowed_objectives().to_vec()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Masked prediction of the input tokens.
    Mlm,
    /// Masked prediction of sup-phoneme groups.
    SupMlm,
    /// Source-word prediction at every phoneme.
    P2g,
}

impl Objective {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlm" => Ok(Self::Mlm),
            "sup_mlm" => Ok(Self::SupMlm),
            "p2g" => Ok(Self::P2g),
            _ => Err(Error::Config(format!("unknown objective {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mlm => "mlm",
            Self::SupMlm => "sup_mlm",
            Self::P2g => "p2g",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub token_vocab: usize,
    pub sup_vocab: usize,
    pub grapheme_vocab: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub d_enc: usize,
    pub max_len: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_enc == 0 || self.d_enc % 2 != 0 {
            return Err(Error::Config(format!("d_enc must be even and positive, got {}", self.d_enc)));
        }
        if self.num_layers == 0 || self.embed_dim == 0 || self.max_len == 0 {
            return Err(Error::Config("num_layers, embed_dim and max_len must be positive".into()));
        }
        if self.token_vocab <= SPECIALS.len() {
            return Err(Error::Config("token vocabulary holds no real tokens".into()));
        }
        if self.kind == EncoderKind::PhonemeMp && self.sup_vocab <= SPECIALS.len() {
            return Err(Error::Config("phoneme_mp needs a sup-phoneme vocabulary".into()));
        }
        if self.kind == EncoderKind::PhonemePl && self.grapheme_vocab <= SPECIALS.len() {
            return Err(Error::Config("phoneme_pl needs a grapheme vocabulary".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub tok: ParamId,
    pub pos: ParamId,
    pub sup: Option<ParamId>,
    pub layers: Vec<BiLstmParams>,
}

pub const ENCODER_PREFIX: &str = "enc/";

impl EncoderParams {
    pub fn register<F: Scalar>(store: &mut ParameterStore<F>, cfg: &EncoderConfig, stream: Stream) -> Result<Self> {
        cfg.validate()?;
        let s = stream.tag("encoder");
        let e = cfg.embed_dim;
        let tok = store.insert("enc/tok_emb", xavier_init(&[cfg.token_vocab, e], s.tag("tok")), true)?;
        let pos = store.insert("enc/pos_emb", xavier_init(&[cfg.max_len, e], s.tag("pos")), true)?;
        let sup = if cfg.kind == EncoderKind::PhonemeMp {
            Some(store.insert("enc/sup_emb", xavier_init(&[cfg.sup_vocab, e], s.tag("sup")), true)?)
        } else {
            None
        };
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for k in 0..cfg.num_layers {
            let input = if k == 0 { e } else { cfg.d_enc };
            layers.push(BiLstmParams::register(
                store,
                &format!("enc/lstm{k}"),
                input,
                cfg.d_enc / 2,
                s.tag("lstm").index(k as u64),
            )?);
        }
        Ok(EncoderParams { tok, pos, sup, layers })
    }
}

#[derive(Clone, Debug)]
pub struct EncoderCache<F> {
    ids: Vec<usize>,
    sup: Option<Vec<usize>>,
    layers: Vec<BiLstmCache<F>>,
}

pub fn encode<F: Scalar>(
    cfg: &EncoderConfig,
    store: &ParameterStore<F>,
    p: &EncoderParams,
    token_ids: &[usize],
    sup_ids: Option<&[usize]>,
) -> Result<(Tensor<F>, EncoderCache<F>)> {
    let t_len = token_ids.len();
    if t_len > cfg.max_len {
        return Err(Error::InvalidArgument(format!("sequence length {t_len} exceeds max_len {}", cfg.max_len)));
    }
    let mut x = embedding_lookup(store.value(p.tok), token_ids)?;
    let positions: Vec<usize> = (0..t_len).collect();
    x.add_assign(&embedding_lookup(store.value(p.pos), &positions)?);
    let sup = match (p.sup, sup_ids) {
        (Some(table), Some(ids)) => {
            if ids.len() != t_len {
                return Err(Error::shape("sup ids vs tokens", &[ids.len()], &[t_len]));
            }
            x.add_assign(&embedding_lookup(store.value(table), ids)?);
            Some(ids.to_vec())
        }
        (Some(_), None) => return Err(Error::InvalidArgument("phoneme_mp encoder needs sup-phoneme ids".into())),
        (None, _) => None,
    };
    let mut caches = Vec::with_capacity(p.layers.len());
    for layer in &p.layers {
        let (y, c) = bilstm(&x, store, layer)?;
        caches.push(c);
        x = y;
    }
    Ok((x, EncoderCache { ids: token_ids.to_vec(), sup, layers: caches }))
}

pub fn encode_backward<F: Scalar>(
    cache: &EncoderCache<F>,
    store: &ParameterStore<F>,
    p: &EncoderParams,
    dy: &Tensor<F>,
    grads: &mut crate::nn::Grads<F>,
) {
    let mut d = dy.clone();
    for (layer, c) in p.layers.iter().zip(&cache.layers).rev() {
        d = bilstm_backward(c, store, layer, &d, grads);
    }
    embedding_backward(&cache.ids, &d, grads.get_mut(p.tok));
    let positions: Vec<usize> = (0..cache.ids.len()).collect();
    embedding_backward(&positions, &d, grads.get_mut(p.pos));
    if let (Some(table), Some(ids)) = (p.sup, &cache.sup) {
        embedding_backward(ids, &d, grads.get_mut(table));
    }
}

// ---------------------------------------------------------------------------
// Masking

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedTokens {
    pub corrupted: Vec<usize>,
    pub targets: Vec<usize>,
    pub positions: Vec<usize>,
}

/// Selects each position with probability `mask_rate`; a selected token
/// becomes `[MASK]` (80%), a random non-special token (10%) or stays (10%).
pub fn mask_tokens(token_ids: &[usize], mask_rate: f64, vocab_size: usize, stream: Stream) -> MaskedTokens {
    let mut rng = stream.rng();
    let mut corrupted = token_ids.to_vec();
    let mut positions = Vec::new();
    for (t, c) in corrupted.iter_mut().enumerate() {
        // one draw per position keeps selection independent of the vocabulary
        let u: f64 = rng.random();
        let v: f64 = rng.random();
        let r = rng.random_range(SPECIALS.len()..vocab_size.max(SPECIALS.len() + 1));
        if u >= mask_rate {
            continue;
        }
        positions.push(t);
        if v < 0.8 {
            *c = MASK;
        } else if v < 0.9 {
            *c = r;
        }
    }
    MaskedTokens { corrupted, targets: token_ids.to_vec(), positions }
}

// ---------------------------------------------------------------------------
// Tokenizer bundle

/// All tokenizers trained on one corpus.
#[derive(Clone, Debug)]
pub struct Tokenizers {
    pub subword: SubwordTokenizer,
    pub phoneme: PhonemeTokenizer,
    pub sup: SupPhonemeTokenizer,
}

impl Tokenizers {
    pub fn train(utterances: &[Utterance], subword_merges: usize, sup_merges: usize) -> Self {
        Tokenizers {
            subword: SubwordTokenizer::train(utterances, subword_merges),
            phoneme: PhonemeTokenizer::build(utterances),
            sup: SupPhonemeTokenizer::train(utterances, sup_merges),
        }
    }

    /// Tokenizes unlabelled words for the given encoder family.
    pub fn tokenize(&self, kind: EncoderKind, words: &[Word]) -> TokenizedExample {
        match kind {
            EncoderKind::Subword => self.subword.tokenize(words),
            EncoderKind::Phoneme | EncoderKind::PhonemePl => self.phoneme.tokenize(words),
            EncoderKind::PhonemeMp => derive_supphonemes(&self.phoneme.tokenize(words), &self.phoneme.vocab, &self.sup),
        }
    }

    /// Tokenizes and labels an utterance for the given encoder family.
    pub fn example(&self, kind: EncoderKind, utt: &Utterance) -> Result<TokenizedExample> {
        make_labels(&self.tokenize(kind, &utt.words), &utt.rp_label)
    }

    pub fn encoder_config(&self, kind: EncoderKind, embed_dim: usize, num_layers: usize, d_enc: usize) -> EncoderConfig {
        EncoderConfig {
            kind,
            token_vocab: match kind {
                EncoderKind::Subword => self.subword.vocab.len(),
                _ => self.phoneme.vocab.len(),
            },
            sup_vocab: self.sup.vocab.len(),
            grapheme_vocab: self.phoneme.graphemes.len(),
            embed_dim,
            num_layers,
            d_enc,
            max_len: 512,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.subword.vocab.write(fs::File::create(dir.join("subword.vocab"))?)?;
        self.subword.merges.write(fs::File::create(dir.join("subword.merges"))?)?;
        self.phoneme.vocab.write(fs::File::create(dir.join("phoneme.vocab"))?)?;
        self.phoneme.graphemes.write(fs::File::create(dir.join("grapheme.vocab"))?)?;
        self.sup.vocab.write(fs::File::create(dir.join("sup.vocab"))?)?;
        self.sup.merges.write(fs::File::create(dir.join("sup.merges"))?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let open = |name: &str| -> Result<BufReader<fs::File>> { Ok(BufReader::new(fs::File::open(dir.join(name))?)) };
        Ok(Tokenizers {
            subword: SubwordTokenizer {
                vocab: Vocab::read(open("subword.vocab")?)?,
                merges: MergeTable::read(open("subword.merges")?)?,
            },
            phoneme: PhonemeTokenizer::new(Vocab::read(open("phoneme.vocab")?)?, Vocab::read(open("grapheme.vocab")?)?),
            sup: SupPhonemeTokenizer {
                vocab: Vocab::read(open("sup.vocab")?)?,
                merges: MergeTable::read(open("sup.merges")?)?,
            },
        })
    }
}

// ---------------------------------------------------------------------------
// Pretraining

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub objectives: Vec<Objective>,
    pub steps: usize,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub mask_rate: f64,
    /// Examples in the fixed batch used for the initial/final loss probe.
    pub probe_examples: usize,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn new(kind: EncoderKind, steps: usize, seed: u64) -> Self {
        PretrainConfig {
            objectives: kind.default_objectives(),
            steps,
            peak_lr: 5e-3,
            batch_size: 8,
            mask_rate: 0.15,
            probe_examples: 64,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub mlm: Option<(ParamId, ParamId)>,
    pub sup: Option<(ParamId, ParamId)>,
    pub p2g: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub per_objective: Vec<(Objective, f64)>,
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub config: EncoderConfig,
    pub store: ParameterStore<f32>,
    pub params: EncoderParams,
    pub heads: Heads,
    pub log: Vec<LossRecord>,
    /// Per-objective loss on the fixed probe batch before training.
    pub initial: Vec<(Objective, f64)>,
    /// The same probe after training.
    pub last: Vec<(Objective, f64)>,
}

impl Pretrained {
    /// Encoder tensors only, ready for the checkpoint container.
    pub fn encoder_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with(ENCODER_PREFIX))
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect()
    }
}

fn check_objectives(kind: EncoderKind, objectives: &[Objective]) -> Result<()> {
    if objectives.is_empty() {
        return Err(Error::Config("no pretraining objective selected".into()));
    }
    for o in objectives {
        if !kind.allowed_objectives().contains(o) {
            return Err(Error::Config(format!("objective {} is not available for a {} encoder", o.as_str(), kind.as_str())));
        }
    }
    Ok(())
}

fn register_head(
    store: &mut ParameterStore<f32>,
    name: &str,
    d: usize,
    v: usize,
    stream: Stream,
) -> Result<(ParamId, ParamId)> {
    Ok((
        store.insert(&format!("head/{name}/w"), xavier_init(&[d, v], stream.tag(name)), true)?,
        store.insert(&format!("head/{name}/b"), Tensor::zeros(&[v]), true)?,
    ))
}

fn objective_losses(
    cfg: &EncoderConfig,
    store: &ParameterStore<f32>,
    p: &EncoderParams,
    heads: &Heads,
    objectives: &[Objective],
    ex: &TokenizedExample,
    masked: &MaskedTokens,
    grad_scale: Option<f32>,
    grads: &mut crate::nn::Grads<f32>,
) -> Result<Vec<(Objective, f64)>> {
    // sup ids are masked at the same positions as the tokens
    let sup_in: Option<Vec<usize>> = ex.sup_ids.as_ref().map(|s| {
        let mut s = s.clone();
        for &t in &masked.positions {
            s[t] = MASK;
        }
        s
    });
    let (h, cache) = encode(cfg, store, p, &masked.corrupted, sup_in.as_deref())?;
    let mut dh = Tensor::zeros(h.shape());
    let mut out = Vec::new();
    let all: Vec<usize> = (0..ex.len()).collect();
    for &o in objectives {
        let (head, targets, positions): (_, &[usize], &[usize]) = match o {
            Objective::Mlm => (heads.mlm, &masked.targets, &masked.positions),
            Objective::SupMlm => (
                heads.sup,
                ex.sup_ids.as_deref().ok_or(Error::Data("example lacks sup-phoneme ids".into()))?,
                &masked.positions,
            ),
            Objective::P2g => (
                heads.p2g,
                ex.grapheme_targets.as_deref().ok_or(Error::Data("example lacks grapheme targets".into()))?,
                &all,
            ),
        };
        let (w, b) = head.expect("head registered for every active objective");
        let logits = linear(&h, store.value(w), store.value(b))?;
        let (loss, mut dlogits) = softmax_cross_entropy(&logits, targets, positions)?;
        out.push((o, f64::from(loss)));
        if let Some(scale) = grad_scale {
            dlogits.scale(scale);
            let mut dw = std::mem::replace(grads.get_mut(w), Tensor::zeros(&[0]));
            let mut db = std::mem::replace(grads.get_mut(b), Tensor::zeros(&[0]));
            dh.add_assign(&linear_backward(&h, store.value(w), &dlogits, &mut dw, &mut db));
            *grads.get_mut(w) = dw;
            *grads.get_mut(b) = db;
        }
    }
    if grad_scale.is_some() {
        encode_backward(&cache, store, p, &dh, grads);
    }
    Ok(out)
}

/// Pretrains an encoder with the equally weighted sum of the selected
/// objectives, AdamW and the warmup-linear schedule.
pub fn pretrain(cfg: &EncoderConfig, examples: &[TokenizedExample], pc: &PretrainConfig) -> Result<Pretrained> {
    check_objectives(cfg.kind, &pc.objectives)?;
    if examples.is_empty() {
        return Err(Error::Data("no pretraining examples".into()));
    }
    let root = Stream::new(pc.seed).tag("pretrain");
    let mut store = ParameterStore::<f32>::new();
    let params = EncoderParams::register(&mut store, cfg, root.tag("init"))?;
    let has = |o| pc.objectives.contains(&o);
    let heads = Heads {
        mlm: has(Objective::Mlm).then(|| register_head(&mut store, "mlm", cfg.d_enc, cfg.token_vocab, root.tag("head"))).transpose()?,
        sup: has(Objective::SupMlm).then(|| register_head(&mut store, "sup", cfg.d_enc, cfg.sup_vocab, root.tag("head"))).transpose()?,
        p2g: has(Objective::P2g).then(|| register_head(&mut store, "p2g", cfg.d_enc, cfg.grapheme_vocab, root.tag("head"))).transpose()?,
    };

    let probe: Vec<(usize, MaskedTokens)> = (0..pc.probe_examples.min(examples.len()))
        .map(|i| (i, mask_tokens(&examples[i].token_ids, pc.mask_rate, cfg.token_vocab, root.tag("probe").index(i as u64))))
        .collect();
    let mut scratch = store.grad_buffer();
    let probe_loss = |store: &ParameterStore<f32>, scratch: &mut crate::nn::Grads<f32>| -> Result<Vec<(Objective, f64)>> {
        let mut acc: Vec<(Objective, f64)> = pc.objectives.iter().map(|&o| (o, 0.0)).collect();
        for (i, m) in &probe {
            let l = objective_losses(cfg, store, &params, &heads, &pc.objectives, &examples[*i], m, None, scratch)?;
            for (a, (_, v)) in acc.iter_mut().zip(l) {
                a.1 += v / probe.len() as f64;
            }
        }
        Ok(acc)
    };
    let initial = probe_loss(&store, &mut scratch)?;

    let opt = AdamW::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut epoch = 0u64;
    let mut log = Vec::with_capacity(pc.steps);
    let batch = pc.batch_size.max(1);
    for step in 1..=pc.steps {
        store.zero_grads();
        let mut totals: Vec<(Objective, f64)> = pc.objectives.iter().map(|&o| (o, 0.0)).collect();
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut root.tag("order").index(epoch).rng());
                epoch += 1;
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let m = mask_tokens(&examples[i].token_ids, pc.mask_rate, cfg.token_vocab, root.tag("mask").index(step as u64).index(i as u64));
            scratch.zero();
            let l = objective_losses(cfg, &store, &params, &heads, &pc.objectives, &examples[i], &m, Some(1.0 / batch as f32), &mut scratch)?;
            store.accumulate(&scratch);
            for (a, (_, v)) in totals.iter_mut().zip(l) {
                a.1 += v / batch as f64;
            }
        }
        let total: f64 = totals.iter().map(|t| t.1).sum();
        if !total.is_finite() {
            return Err(Error::NonFinite { step });
        }
        let lr = warmup_linear_lr(step, pc.steps, pc.peak_lr);
        opt.step(&mut store, lr, step)?;
        log.push(LossRecord { step, lr, total, per_objective: totals });
    }
    let last = probe_loss(&store, &mut scratch)?;
    Ok(Pretrained { config: cfg.clone(), store, params, heads, log, initial, last })
}
