//! Utterance records, alignment ingestion, punctuation normalization, RP
//! labeling and train/validation/test splitting.
//!
//! The canonical interchange is one JSON object per line:
//!
//! ```text
//! {"id": "s3_0007", "speaker": 3, "words": [{"w": "ka", "p": ["K", "AA"], "punct": null}, ...],
//!  "pause_ms": [0.0, 212.5, ...], "rp": [0, 1, ...], "dur_s": 4.2}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

pub const DEFAULT_RP_THRESHOLD_MS: f64 = 50.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Word {
    #[serde(rename = "w")]
    pub surface: String,
    #[serde(rename = "p")]
    pub phonemes: Vec<String>,
    /// One or more punctuation marks; normalization keeps only the first.
    #[serde(rename = "punct")]
    pub trailing_punct: Option<String>,
}

impl Word {
    pub fn new(surface: &str, phonemes: &[&str], punct: Option<&str>) -> Self {
        Word {
            surface: surface.to_lowercase(),
            phonemes: phonemes.iter().map(|p| p.to_string()).collect(),
            trailing_punct: punct.map(str::to_string),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    #[serde(rename = "id")]
    pub utterance_id: String,
    #[serde(rename = "speaker")]
    pub speaker_id: u32,
    pub words: Vec<Word>,
    #[serde(rename = "pause_ms")]
    pub boundary_pause_ms: Vec<f64>,
    #[serde(rename = "rp", with = "bits")]
    pub rp_label: Vec<bool>,
    #[serde(rename = "dur_s")]
    pub total_duration_s: f64,
}

mod bits {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[bool], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|&b| u8::from(b)).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        raw.into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!("rp flag must be 0 or 1, got {other}"))),
            })
            .collect()
    }
}

impl Utterance {
    pub fn num_boundaries(&self) -> usize {
        self.words.len().saturating_sub(1)
    }

    pub fn rp_count(&self) -> usize {
        self.rp_label.iter().filter(|&&b| b).count()
    }

    /// Checks the structural invariants of a record.
    pub fn validate(&self) -> Result<()> {
        let id = &self.utterance_id;
        if self.words.is_empty() {
            return Err(Error::Data(format!("{id}: no words")));
        }
        let nb = self.num_boundaries();
        if self.boundary_pause_ms.len() != nb || self.rp_label.len() != nb {
            return Err(Error::Data(format!(
                "{id}: {} words but {} pauses and {} labels",
                self.words.len(),
                self.boundary_pause_ms.len(),
                self.rp_label.len()
            )));
        }
        for (i, w) in self.words.iter().enumerate() {
            if w.surface.is_empty() || w.phonemes.is_empty() {
                return Err(Error::Data(format!("{id}: word {i} has empty surface or phonemes")));
            }
        }
        if self.boundary_pause_ms.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Data(format!("{id}: negative or non-finite pause")));
        }
        for (i, &rp) in self.rp_label.iter().enumerate() {
            if rp && self.words[i].trailing_punct.is_some() {
                return Err(Error::Data(format!("{id}: RP label at punctuated boundary {i}")));
            }
        }
        if !(self.total_duration_s > 0.0) {
            return Err(Error::Data(format!("{id}: duration must be positive")));
        }
        Ok(())
    }
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let utt: Utterance =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        utt.validate()?;
        out.push(utt);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut writer: W, utts: &[Utterance]) -> Result<()> {
    for u in utts {
        serde_json::to_writer(&mut writer, u)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Alignment JSONL

#[derive(Deserialize)]
struct AlignedWord {
    word: String,
    start: f64,
    end: f64,
    #[serde(default)]
    punct: Option<String>,
    phonemes: Vec<String>,
}

#[derive(Deserialize)]
struct AlignedRecord {
    utterance_id: String,
    speaker_id: u32,
    words: Vec<AlignedWord>,
}

/// Returns true when a JSON object looks like aligner output rather than a
/// corpus record.
pub fn is_alignment_record(value: &serde_json::Value) -> bool {
    value.get("utterance_id").is_some()
}

/// Parses aligner output with per-word `start`/`end` seconds.
///
/// Labels are left unset; run [`normalize_punctuation`] and [`label_rps`].
pub fn parse_alignment_jsonl<R: BufRead>(reader: R) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_alignment_line(&line, i + 1)?);
    }
    Ok(out)
}

pub(crate) fn parse_alignment_line(line: &str, lineno: usize) -> Result<Utterance> {
    let rec: AlignedRecord =
        serde_json::from_str(line).map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
    let spans: Vec<(f64, f64)> = rec.words.iter().map(|w| (w.start, w.end)).collect();
    let words = rec
        .words
        .into_iter()
        .map(|w| Word { surface: w.word.to_lowercase(), phonemes: w.phonemes, trailing_punct: w.punct })
        .collect();
    from_timed_words(rec.utterance_id, rec.speaker_id, words, &spans)
}

fn from_timed_words(id: String, speaker: u32, words: Vec<Word>, spans: &[(f64, f64)]) -> Result<Utterance> {
    if words.is_empty() {
        return Err(Error::Data(format!("{id}: no words")));
    }
    for (k, &(s, e)) in spans.iter().enumerate() {
        if !(s.is_finite() && e.is_finite()) || e < s {
            return Err(Error::Data(format!("{id}: word {k} ends before it starts")));
        }
        if k > 0 && s < spans[k - 1].0 {
            return Err(Error::Data(format!("{id}: word {k} starts before word {}", k - 1)));
        }
    }
    let pauses: Vec<f64> = spans.windows(2).map(|w| (1000.0 * (w[1].0 - w[0].1)).max(0.0)).collect();
    let n = pauses.len();
    let utt = Utterance {
        utterance_id: id,
        speaker_id: speaker,
        words,
        boundary_pause_ms: pauses,
        rp_label: vec![false; n],
        total_duration_s: spans[spans.len() - 1].1 - spans[0].0,
    };
    utt.validate()?;
    Ok(utt)
}

// ---------------------------------------------------------------------------
// TextGrid

#[derive(Clone, Debug, PartialEq)]
pub struct Interval {
    pub label: String,
    pub xmin: f64,
    pub xmax: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedTiers {
    pub words: Vec<Interval>,
    pub phones: Vec<Interval>,
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Str(String),
    Num(f64),
    Flag(String),
}

// Long and short TextGrid forms flatten to the same value stream once keys,
// `=` signs and bracketed indices are skipped.
fn lex_textgrid(text: &str) -> Result<Vec<(Tok, usize)>> {
    let mut out = Vec::new();
    let mut chars = text.chars().peekable();
    let mut line = 1;
    while let Some(&c) = chars.peek() {
        match c {
            '\n' => {
                line += 1;
                chars.next();
            }
            '"' => {
                chars.next();
                let start = line;
                let mut s = String::new();
                loop {
                    match chars.next() {
                        Some('"') if chars.peek() == Some(&'"') => {
                            chars.next();
                            s.push('"');
                        }
                        Some('"') => break,
                        Some(ch) => {
                            if ch == '\n' {
                                line += 1;
                            }
                            s.push(ch);
                        }
                        None => return Err(Error::Parse { line: start, msg: "unterminated string".into() }),
                    }
                }
                out.push((Tok::Str(s), start));
            }
            '[' => {
                for ch in chars.by_ref() {
                    if ch == ']' {
                        break;
                    }
                }
            }
            '<' => {
                let mut s = String::new();
                for ch in chars.by_ref() {
                    s.push(ch);
                    if ch == '>' {
                        break;
                    }
                }
                out.push((Tok::Flag(s), line));
            }
            '!' => {
                // comment to end of line
                while chars.peek().is_some_and(|&ch| ch != '\n') {
                    chars.next();
                }
            }
            c if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' => {
                let mut s = String::new();
                while let Some(&ch) = chars.peek() {
                    if ch.is_whitespace() {
                        break;
                    }
                    s.push(ch);
                    chars.next();
                }
                let v = s.parse::<f64>().map_err(|_| Error::Parse { line, msg: format!("bad number {s:?}") })?;
                out.push((Tok::Num(v), line));
            }
            c if c.is_alphabetic() || c == '_' => {
                while chars.peek().is_some_and(|ch| ch.is_alphanumeric() || *ch == '_') {
                    chars.next();
                }
            }
            _ => {
                chars.next();
            }
        }
    }
    Ok(out)
}

struct TokStream {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

impl TokStream {
    fn line(&self) -> usize {
        self.toks.get(self.pos).or(self.toks.last()).map_or(0, |t| t.1)
    }

    fn next(&mut self) -> Result<Tok> {
        let line = self.line();
        let t = self.toks.get(self.pos).cloned().ok_or(Error::Parse { line, msg: "unexpected end".into() })?;
        self.pos += 1;
        Ok(t.0)
    }

    fn string(&mut self) -> Result<String> {
        let line = self.line();
        match self.next()? {
            Tok::Str(s) => Ok(s),
            other => Err(Error::Parse { line, msg: format!("expected string, got {other:?}") }),
        }
    }

    fn number(&mut self) -> Result<f64> {
        let line = self.line();
        match self.next()? {
            Tok::Num(v) => Ok(v),
            other => Err(Error::Parse { line, msg: format!("expected number, got {other:?}") }),
        }
    }

    fn count(&mut self) -> Result<usize> {
        let line = self.line();
        let v = self.number()?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Parse { line, msg: format!("expected a count, got {v}") });
        }
        Ok(v as usize)
    }
}

/// Parses a Praat TextGrid (long or short text form) and returns the
/// intervals of the two named tiers. Empty and silence intervals are kept.
pub fn parse_textgrid(text: &str, word_tier: &str, phone_tier: &str) -> Result<AlignedTiers> {
    let mut ts = TokStream { toks: lex_textgrid(text)?, pos: 0 };
    if ts.string()? != "ooTextFile" || ts.string()? != "TextGrid" {
        return Err(Error::Parse { line: 1, msg: "not a TextGrid header".into() });
    }
    ts.number()?;
    ts.number()?;
    match ts.next()? {
        Tok::Flag(f) if f == "<exists>" => {}
        _ => return missing(&[], word_tier),
    }
    let ntiers = ts.count()?;
    let mut tiers: BTreeMap<String, Vec<Interval>> = BTreeMap::new();
    let mut names = Vec::new();
    for _ in 0..ntiers {
        let class = ts.string()?;
        let name = ts.string()?;
        ts.number()?;
        ts.number()?;
        let n = ts.count()?;
        match class.as_str() {
            "IntervalTier" => {
                let mut v = Vec::with_capacity(n);
                for _ in 0..n {
                    let line = ts.line();
                    let xmin = ts.number()?;
                    let xmax = ts.number()?;
                    let label = ts.string()?;
                    if xmax < xmin {
                        return Err(Error::Data(format!("tier {name}, line {line}: xmax {xmax} < xmin {xmin}")));
                    }
                    v.push(Interval { label, xmin, xmax });
                }
                tiers.insert(name.clone(), v);
            }
            "TextTier" => {
                for _ in 0..n {
                    ts.number()?;
                    ts.string()?;
                }
            }
            other => return Err(Error::Parse { line: ts.line(), msg: format!("unknown tier class {other}") }),
        }
        names.push(name);
    }
    let words = tiers.get(word_tier).cloned().map_or_else(|| missing(&names, word_tier), Ok)?;
    let phones = tiers.get(phone_tier).cloned().map_or_else(|| missing(&names, phone_tier), Ok)?;
    Ok(AlignedTiers { words, phones })
}

fn missing<T>(available: &[String], wanted: &str) -> Result<T> {
    Err(Error::Data(format!("no tier named {wanted:?}; available tiers: [{}]", available.join(", "))))
}

fn is_silence(label: &str) -> bool {
    matches!(label.trim(), "" | "sil" | "sp" | "spn" | "<eps>" | "<sil>")
}

fn is_punct_char(c: char) -> bool {
    c.is_ascii_punctuation() && c != '\'' && c != '-'
}

/// Converts aligned tiers to an utterance.
///
/// Punctuation-only word intervals attach to the previous word; one at the
/// start of the utterance is dropped. Phones are assigned to the word whose
/// span contains their midpoint.
pub fn tiers_to_utterance(tiers: &AlignedTiers, utterance_id: &str, speaker_id: u32) -> Result<Utterance> {
    let mut words: Vec<Word> = Vec::new();
    let mut spans: Vec<(f64, f64)> = Vec::new();
    for iv in &tiers.words {
        if is_silence(&iv.label) {
            continue;
        }
        let label = iv.label.trim().to_lowercase();
        let core = label.trim_matches(is_punct_char);
        let trailing = &label[label.trim_end_matches(is_punct_char).len()..];
        if core.is_empty() {
            if let Some(prev) = words.last_mut() {
                prev.trailing_punct.get_or_insert_with(String::new).push_str(&label);
            }
            continue;
        }
        let phonemes: Vec<String> = tiers
            .phones
            .iter()
            .filter(|p| !is_silence(&p.label))
            .filter(|p| {
                let mid = 0.5 * (p.xmin + p.xmax);
                mid >= iv.xmin && mid <= iv.xmax
            })
            .map(|p| p.label.trim().to_string())
            .collect();
        if phonemes.is_empty() {
            return Err(Error::Data(format!("{utterance_id}: word {core:?} has no phones")));
        }
        words.push(Word {
            surface: core.to_string(),
            phonemes,
            trailing_punct: (!trailing.is_empty()).then(|| trailing.to_string()),
        });
        spans.push((iv.xmin, iv.xmax));
    }
    from_timed_words(utterance_id.to_string(), speaker_id, words, &spans)
}

// ---------------------------------------------------------------------------
// Normalization and labeling

/// Keeps only the first mark of consecutive punctuation and removes
/// punctuation at the end of the utterance.
///
/// Words carry only trailing punctuation, so utterance-initial marks are
/// dropped at ingestion time.
pub fn normalize_punctuation(words: &[Word]) -> Vec<Word> {
    let mut out: Vec<Word> = words.to_vec();
    for w in &mut out {
        w.trailing_punct = w
            .trailing_punct
            .as_deref()
            .and_then(|p| p.chars().find(|c| !c.is_whitespace()))
            .map(String::from);
    }
    if let Some(last) = out.last_mut() {
        last.trailing_punct = None;
    }
    out
}

/// An RP is a pause strictly longer than the threshold at a boundary whose
/// left word carries no punctuation.
pub fn label_rps(utt: &Utterance, rp_threshold_ms: f64) -> Utterance {
    let mut u = utt.clone();
    u.rp_label = u
        .boundary_pause_ms
        .iter()
        .enumerate()
        .map(|(i, &p)| p > rp_threshold_ms && u.words[i].trailing_punct.is_none())
        .collect();
    u
}

/// Normalizes punctuation and recomputes RP labels.
pub fn prepare_utterance(utt: &Utterance, rp_threshold_ms: f64) -> Utterance {
    let mut u = utt.clone();
    u.words = normalize_punctuation(&u.words);
    label_rps(&u, rp_threshold_ms)
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SplitName {
    Training,
    ValidationSeen,
    TestSeen,
    ValidationUnseen,
    TestUnseen,
}

impl SplitName {
    pub const ALL: [SplitName; 5] = [
        SplitName::Training,
        SplitName::ValidationSeen,
        SplitName::TestSeen,
        SplitName::ValidationUnseen,
        SplitName::TestUnseen,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Training => "training",
            SplitName::ValidationSeen => "validation_seen",
            SplitName::TestSeen => "test_seen",
            SplitName::ValidationUnseen => "validation_unseen",
            SplitName::TestUnseen => "test_unseen",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub name: SplitName,
    pub utterances: Vec<Utterance>,
}

/// Splits the seen pool by `ratio` at utterance level after a seeded shuffle
/// and sends the first `unseen_holdout_per_speaker` shuffled utterances of
/// each unseen speaker to validation, the rest to test.
pub fn split_corpus(
    utterances: &[Utterance],
    unseen_speakers: &BTreeSet<u32>,
    ratio: (usize, usize, usize),
    unseen_holdout_per_speaker: usize,
    seed: u64,
) -> Result<Vec<CorpusSplit>> {
    let total = ratio.0 + ratio.1 + ratio.2;
    if total == 0 {
        return Err(Error::InvalidArgument("split ratio sums to zero".into()));
    }
    let stream = Stream::new(seed).tag("corpus/split");
    let mut seen: Vec<&Utterance> = utterances.iter().filter(|u| !unseen_speakers.contains(&u.speaker_id)).collect();
    seen.shuffle(&mut stream.tag("seen").rng());
    let n = seen.len();
    let n_val = n * ratio.1 / total;
    let n_test = n * ratio.2 / total;
    let n_train = n - n_val - n_test;
    let take = |s: &[&Utterance]| s.iter().map(|u| (*u).clone()).collect::<Vec<_>>();

    let mut val_unseen = Vec::new();
    let mut test_unseen = Vec::new();
    for &spk in unseen_speakers {
        let mut mine: Vec<&Utterance> = utterances.iter().filter(|u| u.speaker_id == spk).collect();
        if mine.is_empty() {
            return Err(Error::Data(format!("unseen speaker {spk} has no utterances")));
        }
        mine.shuffle(&mut stream.tag("unseen").index(u64::from(spk)).rng());
        let k = unseen_holdout_per_speaker.min(mine.len());
        val_unseen.extend(take(&mine[..k]));
        test_unseen.extend(take(&mine[k..]));
    }
    Ok(vec![
        CorpusSplit { name: SplitName::Training, utterances: take(&seen[..n_train]) },
        CorpusSplit { name: SplitName::ValidationSeen, utterances: take(&seen[n_train..n_train + n_val]) },
        CorpusSplit { name: SplitName::TestSeen, utterances: take(&seen[n_train + n_val..]) },
        CorpusSplit { name: SplitName::ValidationUnseen, utterances: val_unseen },
        CorpusSplit { name: SplitName::TestUnseen, utterances: test_unseen },
    ])
}
