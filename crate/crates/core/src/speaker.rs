//! Speaker embedding tables, averaging, the embedding adapter, and attaching
//! tables for speakers unseen during training.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, SpeakerMode, SPEAKER_TABLE};
use crate::nn::checkpoint::{load_into_store, read_file, store_tensors, write_file};
use crate::nn::{linear, linear_backward, xavier_init, Activation, AdamW, ParamId, ParameterStore, Tensor};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Learned with the phrasing model from a Xavier initialization.
    Xavier,
    /// Produced by the synthetic generator's embedding oracle.
    OraclePsvm,
    /// Supplied by an outside speaker-verification model.
    External,
    /// Output of the embedding adapter.
    Adapted,
}

impl Provenance {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "xavier" => Ok(Self::Xavier),
            "oracle_psvm" => Ok(Self::OraclePsvm),
            "external" => Ok(Self::External),
            "adapted" => Ok(Self::Adapted),
            _ => Err(Error::Config(format!("unknown provenance {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Xavier => "xavier",
            Self::OraclePsvm => "oracle_psvm",
            Self::External => "external",
            Self::Adapted => "adapted",
        }
    }

    /// Straight from a speaker-verification style model.
    pub fn is_raw(self) -> bool {
        matches!(self, Self::OraclePsvm | Self::External)
    }
}

const PROVENANCE_LINE: &str = "#provenance";

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub entries: BTreeMap<u32, Vec<f32>>,
    pub provenance: Provenance,
}

impl EmbeddingTable {
    pub fn new(dim: usize, provenance: Provenance) -> Self {
        EmbeddingTable { dim, entries: BTreeMap::new(), provenance }
    }

    pub fn insert(&mut self, speaker: u32, v: Vec<f32>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::shape("embedding", &[v.len()], &[self.dim]));
        }
        if self.entries.insert(speaker, v).is_some() {
            return Err(Error::Data(format!("duplicate speaker id {speaker}")));
        }
        Ok(())
    }

    pub fn get(&self, speaker: u32) -> Option<&[f32]> {
        self.entries.get(&speaker).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `speaker_id<TAB>v0<TAB>v1...` with a leading provenance comment.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{PROVENANCE_LINE}\t{}", self.provenance.as_str())?;
        for (id, v) in &self.entries {
            write!(w, "{id}")?;
            for x in v {
                write!(w, "\t{x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// One line per speaker. Provenance comes from the comment line when
    /// present, else `fallback`.
    pub fn read_tsv<R: BufRead>(r: R, fallback: Provenance) -> Result<Self> {
        let (rows, prov) = read_rows(r)?;
        let dim = rows.first().map_or(0, |(_, v)| v.len());
        let mut t = EmbeddingTable::new(dim, prov.unwrap_or(fallback));
        for (id, v) in rows {
            t.insert(id, v)?;
        }
        Ok(t)
    }

    pub fn write_pbrk(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, Tensor<f32>)> = self
            .entries
            .iter()
            .map(|(id, v)| Ok((format!("spk/{id}"), Tensor::from_vec(&[self.dim], v.clone())?)))
            .collect::<Result<_>>()?;
        let refs: Vec<(&str, &Tensor<f32>)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        write_file(path, &refs)
    }

    /// Reads `spk/<id>` tensors; the container carries no provenance.
    pub fn read_pbrk(path: &Path, provenance: Provenance) -> Result<Self> {
        let tensors = read_file(path)?;
        let dim = tensors.first().map_or(0, |(_, t)| t.len());
        let mut t = EmbeddingTable::new(dim, provenance);
        for (name, v) in tensors {
            let id = name
                .strip_prefix("spk/")
                .and_then(|s| s.parse::<u32>().ok())
                .ok_or_else(|| Error::Data(format!("unexpected tensor {name:?} in embedding file")))?;
            t.insert(id, v.into_data())?;
        }
        Ok(t)
    }

    /// Loads TSV or PBRK by extension (`.pbrk` is binary).
    pub fn read_path(path: &Path, fallback: Provenance) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "pbrk") {
            Self::read_pbrk(path, fallback)
        } else {
            Self::read_tsv(std::io::BufReader::new(std::fs::File::open(path)?), fallback)
        }
    }
}

type Rows = (Vec<(u32, Vec<f32>)>, Option<Provenance>);

fn read_rows<R: BufRead>(r: R) -> Result<Rows> {
    let mut rows = Vec::new();
    let mut prov = None;
    let mut dim = None;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(PROVENANCE_LINE) {
            prov = Some(Provenance::parse(rest.trim())?);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let bad = |msg: String| Error::Parse { line: i + 1, msg };
        let id = fields.next().unwrap_or("").trim().parse::<u32>().map_err(|e| bad(format!("speaker id: {e}")))?;
        let v: Vec<f32> = fields
            .map(|f| f.trim().parse::<f32>().map_err(|e| bad(format!("value {f:?}: {e}"))))
            .collect::<Result<_>>()?;
        if v.is_empty() || *dim.get_or_insert(v.len()) != v.len() {
            return Err(bad(format!("expected {} values, got {}", dim.unwrap_or(0), v.len())));
        }
        rows.push((id, v));
    }
    Ok((rows, prov))
}

/// Per-utterance TSV: several lines may share a speaker id.
pub fn read_utterance_tsv<R: BufRead>(r: R) -> Result<BTreeMap<u32, Vec<Vec<f64>>>> {
    let mut out: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
    for (id, v) in read_rows(r)?.0 {
        out.entry(id).or_default().push(v.into_iter().map(f64::from).collect());
    }
    Ok(out)
}

pub fn write_utterance_tsv<W: Write>(mut w: W, rows: &BTreeMap<u32, Vec<Vec<f64>>>) -> Result<()> {
    for (id, vs) in rows {
        for v in vs {
            write!(w, "{id}")?;
            for x in v {
                write!(w, "\t{}", *x as f32)?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Utterance-level embeddings in file order, one row per utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceEmbeddings {
    pub provenance: Option<Provenance>,
    pub rows: Vec<(u32, Vec<f64>)>,
}

impl UtteranceEmbeddings {
    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let (rows, provenance) = read_rows(r)?;
        Ok(UtteranceEmbeddings {
            provenance,
            rows: rows.into_iter().map(|(id, v)| (id, v.into_iter().map(f64::from).collect())).collect(),
        })
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        if let Some(p) = self.provenance {
            writeln!(w, "{PROVENANCE_LINE}\t{}", p.as_str())?;
        }
        for (id, v) in &self.rows {
            write!(w, "{id}")?;
            for x in v {
                write!(w, "\t{}", *x as f32)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn by_speaker(&self) -> BTreeMap<u32, Vec<Vec<f64>>> {
        let mut out: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
        for (id, v) in &self.rows {
            out.entry(*id).or_default().push(v.clone());
        }
        out
    }
}

/// Elementwise mean of utterance-level embeddings.
pub fn average_embeddings(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = embeddings.first().ok_or_else(|| Error::InvalidArgument("no embeddings to average".into()))?;
    let dim = first.len();
    let mut sum = vec![0.0; dim];
    for e in embeddings {
        if e.len() != dim {
            return Err(Error::shape("embedding", &[e.len()], &[dim]));
        }
        for (s, x) in sum.iter_mut().zip(e) {
            *s += x;
        }
    }
    let n = embeddings.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Averages a seeded subset of `min(n, available)` embeddings drawn without
/// replacement (kept in their original order).
pub fn few_shot_embed(embeddings: &[Vec<f64>], n: usize, stream: Stream) -> Result<Vec<f64>> {
    if embeddings.is_empty() || n == 0 {
        return Err(Error::InvalidArgument("few-shot averaging needs at least one utterance".into()));
    }
    let m = n.min(embeddings.len());
    let mut idx = rand::seq::index::sample(&mut stream.rng(), embeddings.len(), m).into_vec();
    idx.sort_unstable();
    let subset: Vec<Vec<f64>> = idx.into_iter().map(|i| embeddings[i].clone()).collect();
    average_embeddings(&subset)
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine operands", &[u.len()], &[v.len()]));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// Adapter: f(e) = W2 ReLU(W1 e + b1) + b2

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig { steps: 20_000, lr: 1e-5, batch_size: 32, hidden: 1024, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Adapter {
    pub dim: usize,
    pub store: ParameterStore<f32>,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

struct AdapterPass {
    x: Tensor<f32>,
    pre: Tensor<f32>,
    act: Tensor<f32>,
    out: Tensor<f32>,
}

impl Adapter {
    /// Xavier weights, zero biases.
    pub fn new(dim: usize, hidden: usize, stream: Stream) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::Config("adapter dimensions must be positive".into()));
        }
        let mut store = ParameterStore::new();
        let w1 = store.insert("adapter/w1", xavier_init(&[dim, hidden], stream.tag("w1")), true)?;
        let b1 = store.insert("adapter/b1", Tensor::zeros(&[hidden]), true)?;
        let w2 = store.insert("adapter/w2", xavier_init(&[hidden, dim], stream.tag("w2")), true)?;
        let b2 = store.insert("adapter/b2", Tensor::zeros(&[dim]), true)?;
        Ok(Adapter { dim, store, w1, b1, w2, b2 })
    }

    fn pass(&self, x: Tensor<f32>) -> Result<AdapterPass> {
        let s = &self.store;
        let pre = linear(&x, s.value(self.w1), s.value(self.b1))?;
        let act = Activation::Relu.forward(&pre);
        let out = linear(&act, s.value(self.w2), s.value(self.b2))?;
        Ok(AdapterPass { x, pre, act, out })
    }

    pub fn adapt(&self, e: &[f32]) -> Result<Vec<f32>> {
        if e.len() != self.dim {
            return Err(Error::shape("adapter input", &[e.len()], &[self.dim]));
        }
        Ok(self.pass(Tensor::from_vec(&[1, self.dim], e.to_vec())?)?.out.into_data())
    }

    /// Maps every entry of a raw table; the result has `adapted` provenance.
    pub fn adapt_table(&self, table: &EmbeddingTable) -> Result<EmbeddingTable> {
        let mut out = EmbeddingTable::new(table.dim, Provenance::Adapted);
        for (&id, v) in &table.entries {
            out.insert(id, self.adapt(v)?)?;
        }
        Ok(out)
    }

    /// Mean squared error over all pairs and dimensions.
    pub fn mse(&self, pairs: &[(Vec<f32>, Vec<f32>)]) -> Result<f64> {
        let mut total = 0.0;
        for (e, target) in pairs {
            let y = self.adapt(e)?;
            total += y.iter().zip(target).map(|(a, b)| f64::from(a - b).powi(2)).sum::<f64>();
        }
        Ok(total / (pairs.len() * self.dim) as f64)
    }
}

pub const ADAPTER_FILE: &str = "adapter.pbrk";
pub const ADAPTER_SIDECAR: &str = "adapter.toml";

#[derive(Serialize, Deserialize)]
struct AdapterSidecar {
    dim: usize,
    hidden: usize,
}

impl Adapter {
    pub fn hidden(&self) -> usize {
        self.store.value(self.b1).len()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let tensors = store_tensors(&self.store);
        let refs: Vec<(&str, &Tensor<f32>)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        write_file(&dir.join(ADAPTER_FILE), &refs)?;
        let side = AdapterSidecar { dim: self.dim, hidden: self.hidden() };
        std::fs::write(dir.join(ADAPTER_SIDECAR), toml::to_string(&side).map_err(|e| Error::Config(e.to_string()))?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let side_path = dir.join(ADAPTER_SIDECAR);
        let side: AdapterSidecar = toml::from_str(&std::fs::read_to_string(&side_path)?)
            .map_err(|e| Error::Checkpoint { path: side_path, msg: e.to_string() })?;
        let mut ad = Adapter::new(side.dim, side.hidden, Stream::new(0))?;
        load_into_store(&mut ad.store, &read_file(&dir.join(ADAPTER_FILE))?)?;
        Ok(ad)
    }
}

#[derive(Clone, Debug)]
pub struct AdapterRun {
    pub adapter: Adapter,
    /// Mini-batch loss per step.
    pub losses: Vec<f64>,
}

/// Fits `f(e_m) ~ e'_m` by mini-batch MSE with AdamW at a constant rate.
pub fn train_adapter(pairs: &[(Vec<f32>, Vec<f32>)], cfg: &AdapterConfig) -> Result<AdapterRun> {
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument("adapter training needs at least two pairs".into()));
    }
    let dim = pairs[0].0.len();
    if pairs.iter().any(|(a, b)| a.len() != dim || b.len() != dim) {
        return Err(Error::Shape("adapter pairs must share one dimension".into()));
    }
    let root = Stream::new(cfg.seed).tag("adapter");
    let mut ad = Adapter::new(dim, cfg.hidden, root.tag("init"))?;
    let adam = AdamW::default();
    let batch = cfg.batch_size.clamp(1, pairs.len());
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        if order.len() < batch {
            let mut fresh: Vec<usize> = (0..pairs.len()).collect();
            fresh.shuffle(&mut root.tag("order").index(epoch).rng());
            epoch += 1;
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..batch).collect();
        let x: Vec<f32> = idx.iter().flat_map(|&i| pairs[i].0.iter().copied()).collect();
        let p = ad.pass(Tensor::from_vec(&[batch, dim], x)?)?;
        let n = (batch * dim) as f32;
        let mut dy = Tensor::zeros(&[batch, dim]);
        let mut loss = 0.0f64;
        for (r, &i) in idx.iter().enumerate() {
            for ((d, &y), &t) in dy.row_mut(r).iter_mut().zip(p.out.row(r)).zip(&pairs[i].1) {
                let diff = y - t;
                loss += f64::from(diff * diff);
                *d = 2.0 * diff / n;
            }
        }
        loss /= f64::from(n);
        if !loss.is_finite() {
            return Err(Error::NonFinite { step });
        }
        losses.push(loss);
        ad.store.zero_grads();
        let mut grads = ad.store.grad_buffer();
        let mut dw2 = std::mem::replace(grads.get_mut(ad.w2), Tensor::zeros(&[0]));
        let dact = linear_backward(&p.act, ad.store.value(ad.w2), &dy, &mut dw2, grads.get_mut(ad.b2));
        *grads.get_mut(ad.w2) = dw2;
        let dpre = Activation::Relu.backward(&p.pre, &p.act, &dact);
        let mut dw1 = std::mem::replace(grads.get_mut(ad.w1), Tensor::zeros(&[0]));
        linear_backward(&p.x, ad.store.value(ad.w1), &dpre, &mut dw1, grads.get_mut(ad.b1));
        *grads.get_mut(ad.w1) = dw1;
        ad.store.accumulate(&grads);
        adam.step(&mut ad.store, cfg.lr, step)?;
    }
    Ok(AdapterRun { adapter: ad, losses })
}

/// Swaps in a table for new speakers, keeping every other parameter and the
/// stored threshold. Frozen-mode models take raw tables; trainable-mode
/// models take adapter output.
pub fn attach_unseen(ckpt: &Checkpoint, table: &EmbeddingTable) -> Result<Checkpoint> {
    match ckpt.config.speaker_mode {
        SpeakerMode::None => return Err(Error::Contract("speaker-agnostic model has no speaker table".into())),
        SpeakerMode::Frozen if !table.provenance.is_raw() => {
            return Err(Error::Contract(format!(
                "frozen-mode model expects a raw embedding table, got {}",
                table.provenance.as_str()
            )))
        }
        SpeakerMode::Trainable if table.provenance != Provenance::Adapted => {
            return Err(Error::Contract(format!(
                "trainable-mode model needs adapter output, got a {} table",
                table.provenance.as_str()
            )))
        }
        _ => {}
    }
    if table.dim != ckpt.config.speaker_dim {
        return Err(Error::shape("unseen table", &[table.dim], &[ckpt.config.speaker_dim]));
    }
    if table.is_empty() {
        return Err(Error::InvalidArgument("unseen table is empty".into()));
    }
    let rows = *table.entries.keys().next_back().unwrap() as usize + 1;
    let mut t = Tensor::zeros(&[rows, table.dim]);
    for (&id, v) in &table.entries {
        t.row_mut(id as usize).copy_from_slice(v);
    }
    let mut out = ckpt.clone();
    let slot = out
        .tensors
        .iter_mut()
        .find(|(n, _)| n == SPEAKER_TABLE)
        .ok_or_else(|| Error::Contract(format!("checkpoint lacks {SPEAKER_TABLE}")))?;
    slot.1 = t;
    out.config.num_speakers = rows;
    out.speaker_provenance = Some(table.provenance);
    Ok(out)
}

/// Current speaker table of a model as an [`EmbeddingTable`].
pub fn table_of(ckpt: &Checkpoint) -> Result<EmbeddingTable> {
    let t = ckpt
        .tensors
        .iter()
        .find(|(n, _)| n == SPEAKER_TABLE)
        .ok_or_else(|| Error::Contract(format!("checkpoint lacks {SPEAKER_TABLE}")))?;
    let mut out = EmbeddingTable::new(t.1.cols(), ckpt.speaker_provenance.unwrap_or(Provenance::Xavier));
    for r in 0..t.1.rows() {
        out.insert(r as u32, t.1.row(r).to_vec())?;
    }
    Ok(out)
}
