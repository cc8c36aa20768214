//! Synthetic multi-speaker corpus with known per-speaker RP styles.
//!
//! Every utterance is built from a fixed pseudo-lexicon. Each word transition
//! gets a small feature vector (position, neighbouring word lengths, clause
//! depth, preceding punctuation) and a speaker places an RP at a
//! punctuation-free transition with probability
//! `sigmoid(rp_bias + feature_weights . features)`. All features are
//! recoverable from the text alone, so a model that knows the speaker can in
//! principle learn the style.
//!
//! Speaker styles are drawn as
//!
//! * `rp_bias ~ U[-3, -1]`
//! * `feature_weights[k] ~ U[-1, 1]`
//! * `duration_log_mean ~ U[ln 0.1, ln 0.3]`
//! * `duration_log_std ~ U[0.2, 0.5]`

use std::sync::OnceLock;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::{LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Utterance, Word};
use crate::error::{Error, Result};
use crate::nn::sigmoid;
use crate::rng::Stream;

/// Number of hand-built boundary features; extra dimensions are cosine
/// position harmonics.
pub const BASE_FEATURES: usize = 5;
pub const MIN_WORDS: usize = 5;
pub const MAX_WORDS: usize = 60;
pub const PIP_MS: f64 = 200.0;
pub const RP_FLOOR_MS: f64 = 60.0;
pub const PHONEME_SECONDS: f64 = 0.07;
/// Probability that a clause boundary is written with punctuation.
pub const CLAUSE_PUNCT_PROB: f64 = 0.6;
/// Probability that any boundary carries two consecutive marks.
pub const DOUBLE_PUNCT_PROB: f64 = 0.02;
pub const MAX_DEPTH: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerStyle {
    pub speaker_id: u32,
    pub rp_bias: f64,
    pub feature_weights: Vec<f64>,
    pub duration_log_mean: f64,
    pub duration_log_std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryFeatures {
    pub position_frac: f64,
    pub left_word_len: usize,
    pub right_word_len: usize,
    pub clause_depth: usize,
    pub follows_punctuation: bool,
}

impl BoundaryFeatures {
    pub fn vector(&self, dim_f: usize) -> Vec<f64> {
        let base = [
            2.0 * self.position_frac - 1.0,
            (self.left_word_len as f64 - 5.0) / 2.0,
            (self.right_word_len as f64 - 5.0) / 2.0,
            self.clause_depth as f64 - 1.0,
            if self.follows_punctuation { 1.0 } else { -1.0 },
        ];
        (0..dim_f)
            .map(|k| {
                if k < BASE_FEATURES {
                    base[k]
                } else {
                    (std::f64::consts::PI * (k - BASE_FEATURES + 1) as f64 * self.position_frac).cos()
                }
            })
            .collect()
    }
}

pub fn gen_speakers(count: usize, dim_f: usize, seed: u64) -> Result<Vec<SpeakerStyle>> {
    if count == 0 {
        return Err(Error::InvalidArgument("speaker count must be at least 1".into()));
    }
    if dim_f == 0 {
        return Err(Error::InvalidArgument("feature dimension must be at least 1".into()));
    }
    let root = Stream::new(seed).tag("synth/speakers");
    Ok((0..count)
        .map(|i| {
            let mut rng = root.index(i as u64).rng();
            SpeakerStyle {
                speaker_id: i as u32,
                rp_bias: rng.random_range(-3.0..=-1.0),
                feature_weights: (0..dim_f).map(|_| rng.random_range(-1.0..=1.0)).collect(),
                duration_log_mean: rng.random_range(0.1f64.ln()..=0.3f64.ln()),
                duration_log_std: rng.random_range(0.2..=0.5),
            }
        })
        .collect())
}

pub fn rp_probability(style: &SpeakerStyle, features: &BoundaryFeatures) -> f64 {
    let f = features.vector(style.feature_weights.len());
    let z = style.rp_bias + style.feature_weights.iter().zip(&f).map(|(w, x)| w * x).sum::<f64>();
    sigmoid(z)
}

// ---------------------------------------------------------------------------
// Pseudo-lexicon

const CONSONANTS: &[u8] = b"bdfgklmnprstvwz";
const VOWELS: &[u8] = b"aeiou";
const LEXICON_SIZE: usize = 300;
const LEXICON_SEED: u64 = 0x1e81_c0de;

pub struct Lexicon {
    pub words: Vec<String>,
    pub is_opener: Vec<bool>,
    sampler: WeightedIndex<f64>,
}

impl Lexicon {
    fn build() -> Self {
        let mut rng = Stream::new(LEXICON_SEED).tag("synth/lexicon").rng();
        let mut words: Vec<String> = Vec::with_capacity(LEXICON_SIZE);
        while words.len() < LEXICON_SIZE {
            let len = rng.random_range(2..=8);
            let mut consonant = rng.random_bool(0.5);
            let w: String = (0..len)
                .map(|_| {
                    let set = if consonant { CONSONANTS } else { VOWELS };
                    consonant = !consonant;
                    set[rng.random_range(0..set.len())] as char
                })
                .collect();
            if !words.contains(&w) {
                words.push(w);
            }
        }
        let is_opener = (0..LEXICON_SIZE).map(|r| r % 20 == 2).collect();
        let sampler = WeightedIndex::new((0..LEXICON_SIZE).map(|r| 1.0 / (r as f64 + 2.0).powf(0.9))).unwrap();
        Lexicon { words, is_opener, sampler }
    }

    pub fn get() -> &'static Lexicon {
        static LEX: OnceLock<Lexicon> = OnceLock::new();
        LEX.get_or_init(Lexicon::build)
    }
}

/// Letter-to-phoneme table of the pseudo-lexicon.
pub fn letter_phoneme(c: char) -> Option<&'static str> {
    Some(match c {
        'a' => "AA",
        'e' => "EH",
        'i' => "IY",
        'o' => "OW",
        'u' => "UW",
        'b' => "B",
        'd' => "D",
        'f' => "F",
        'g' => "G",
        'k' => "K",
        'l' => "L",
        'm' => "M",
        'n' => "N",
        'p' => "P",
        'r' => "R",
        's' => "S",
        't' => "T",
        'v' => "V",
        'w' => "W",
        'z' => "Z",
        _ => return None,
    })
}

pub fn spell(word: &str) -> Vec<String> {
    word.chars().filter_map(letter_phoneme).map(String::from).collect()
}

// ---------------------------------------------------------------------------
// Utterance structure

/// The style-independent part of an utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub words: Vec<usize>,
    pub punct: Vec<Option<String>>,
    pub features: Vec<BoundaryFeatures>,
}

pub fn sample_skeleton<R: Rng>(rng: &mut R) -> Skeleton {
    let lex = Lexicon::get();
    let n = rng.random_range(MIN_WORDS..=MAX_WORDS);
    let words: Vec<usize> = (0..n).map(|_| lex.sampler.sample(rng)).collect();
    let mut punct: Vec<Option<String>> = vec![None; n];
    for i in 0..n - 1 {
        if lex.is_opener[words[i + 1]] && rng.random_bool(CLAUSE_PUNCT_PROB) {
            punct[i] = Some(if rng.random_bool(0.75) { "," } else { "." }.to_string());
        }
        if rng.random_bool(DOUBLE_PUNCT_PROB) {
            let first = punct[i].take().unwrap_or_else(|| ",".to_string());
            let second = if first == "," { "." } else { "," };
            punct[i] = Some(format!("{first}{second}"));
        }
    }
    punct[n - 1] = Some(".".to_string());

    let mut features = Vec::with_capacity(n - 1);
    let mut depth = usize::from(lex.is_opener[words[0]]);
    for i in 0..n - 1 {
        features.push(BoundaryFeatures {
            position_frac: (i + 1) as f64 / n as f64,
            left_word_len: lex.words[words[i]].len(),
            right_word_len: lex.words[words[i + 1]].len(),
            clause_depth: depth.min(MAX_DEPTH),
            follows_punctuation: i > 0 && punct[i - 1].is_some(),
        });
        if punct[i].as_deref().is_some_and(|p| p.starts_with('.')) {
            depth = 0;
        }
        if lex.is_opener[words[i + 1]] {
            depth += 1;
        }
    }
    Skeleton { words, punct, features }
}

fn utterance_stream(seed: u64, speaker: u32, utt: usize) -> Stream {
    Stream::new(seed).tag("synth/utterance").index(u64::from(speaker)).index(utt as u64)
}

/// Generates one utterance. The skeleton stream depends only on
/// `(seed, speaker, index)`, and each boundary consumes exactly one uniform
/// draw for the RP decision, so changing the style never shifts any other
/// random choice.
pub fn gen_utterance(style: &SpeakerStyle, utt_index: usize, seed: u64) -> Utterance {
    let lex = Lexicon::get();
    let stream = utterance_stream(seed, style.speaker_id, utt_index);
    let sk = sample_skeleton(&mut stream.tag("structure").rng());
    let mut decide = stream.tag("rp").rng();
    let mut dur_rng = stream.tag("duration").rng();
    let dur = LogNormal::new(style.duration_log_mean, style.duration_log_std.max(0.0)).unwrap();

    let n = sk.words.len();
    let mut pauses = Vec::with_capacity(n - 1);
    let mut labels = Vec::with_capacity(n - 1);
    for (i, f) in sk.features.iter().enumerate() {
        let u: f64 = decide.random();
        let d_ms = (1000.0 * dur.sample(&mut dur_rng)).max(RP_FLOOR_MS);
        if sk.punct[i].is_some() {
            pauses.push(PIP_MS);
            labels.push(false);
        } else if u < rp_probability(style, f) {
            pauses.push(d_ms);
            labels.push(true);
        } else {
            pauses.push(0.0);
            labels.push(false);
        }
    }
    let words: Vec<Word> = sk
        .words
        .iter()
        .zip(&sk.punct)
        .map(|(&w, p)| {
            let surface = lex.words[w].clone();
            Word { phonemes: spell(&surface), surface, trailing_punct: p.clone() }
        })
        .collect();
    let speech: f64 = words.iter().map(|w| w.phonemes.len() as f64 * PHONEME_SECONDS).sum();
    let silence: f64 = pauses.iter().sum::<f64>() / 1000.0;
    Utterance {
        utterance_id: format!("s{}_{:04}", style.speaker_id, utt_index),
        speaker_id: style.speaker_id,
        words,
        boundary_pause_ms: pauses,
        rp_label: labels,
        total_duration_s: speech + silence,
    }
}

pub fn gen_corpus(styles: &[SpeakerStyle], utts_per_speaker: usize, seed: u64) -> Result<Vec<Utterance>> {
    if styles.is_empty() {
        return Err(Error::InvalidArgument("no speaker styles".into()));
    }
    if utts_per_speaker == 0 {
        return Err(Error::InvalidArgument("utts_per_speaker must be at least 1".into()));
    }
    let dim = styles[0].feature_weights.len();
    if styles.iter().any(|s| s.feature_weights.len() != dim) {
        return Err(Error::InvalidArgument("speaker styles disagree on feature dimension".into()));
    }
    Ok(styles
        .iter()
        .flat_map(|s| (0..utts_per_speaker).map(move |u| gen_utterance(s, u, seed)))
        .collect())
}

// ---------------------------------------------------------------------------
// Oracle speaker embeddings

fn style_vector(style: &SpeakerStyle) -> Vec<f64> {
    let mut z = Vec::with_capacity(style.feature_weights.len() + 2);
    z.push(style.rp_bias);
    z.extend_from_slice(&style.feature_weights);
    z.push(style.duration_log_mean);
    z
}

fn projection(dim: usize, inputs: usize, seed: u64) -> Vec<f64> {
    let mut rng = Stream::new(seed).tag("synth/psvm/projection").index(dim as u64).index(inputs as u64).rng();
    let normal = Normal::new(0.0, 1.0 / (inputs as f64).sqrt()).unwrap();
    (0..dim * inputs).map(|_| normal.sample(&mut rng)).collect()
}

/// Noise-free speaker centre of the oracle embedding.
pub fn oracle_psvm_mean(style: &SpeakerStyle, dim: usize, seed: u64) -> Result<Vec<f64>> {
    let z = style_vector(style);
    if dim < z.len() {
        return Err(Error::InvalidArgument(format!("embedding dim {dim} is below the style size {}", z.len())));
    }
    let p = projection(dim, z.len(), seed);
    Ok(p.chunks(z.len()).map(|row| row.iter().zip(&z).map(|(a, b)| a * b).sum()).collect())
}

/// Utterance-level oracle embedding: a fixed seeded linear image of the
/// style plus per-utterance Gaussian noise.
pub fn oracle_psvm_embed(
    style: &SpeakerStyle,
    utterance_index: usize,
    dim: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(noise_std >= 0.0) {
        return Err(Error::InvalidArgument("noise_std must be nonnegative".into()));
    }
    let mut e = oracle_psvm_mean(style, dim, seed)?;
    if noise_std > 0.0 {
        let mut rng = Stream::new(seed)
            .tag("synth/psvm/noise")
            .index(u64::from(style.speaker_id))
            .index(utterance_index as u64)
            .rng();
        let normal = Normal::new(0.0, noise_std).unwrap();
        for v in &mut e {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(e)
}
