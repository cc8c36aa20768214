//! Subword (BPE), phoneme and sup-phoneme tokenization.
//!
//! Every tokenizer marks the last token of each word in `word_final_mask`;
//! labels, losses and metrics live only at those positions, so all
//! tokenizations of one utterance expose the same word-level label space.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::corpus::{Utterance, Word};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASK: usize = 2;
pub const CLS: usize = 3;
pub const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[MASK]", "[CLS]"];

/// Marks the first token of every word except the first.
pub const SPACE_MARK: char = 'Ġ';
/// Marks a phoneme that continues the current word.
pub const CONTINUATION: &str = "##";
/// Punctuation marks emitted as standalone tokens after their word.
pub const PUNCT_TOKENS: [&str; 6] = [",", ".", "?", "!", ";", ":"];

fn add_punct(v: &mut Vocab) {
    for p in PUNCT_TOKENS {
        v.add(p);
    }
}

fn punct_pieces(w: &Word) -> Vec<String> {
    w.trailing_punct.as_deref().map(chars).unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    id_of: HashMap<String, usize>,
    token_of: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// A vocabulary holding only the four specials.
    pub fn new() -> Self {
        let mut v = Vocab { id_of: HashMap::new(), token_of: Vec::new() };
        for s in SPECIALS {
            v.add(s);
        }
        v
    }

    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab::new();
        for t in tokens {
            v.add(t.as_ref());
        }
        v
    }

    /// Adds a token if absent and returns its id.
    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.id_of.get(token) {
            return id;
        }
        let id = self.token_of.len();
        self.id_of.insert(token.to_string(), id);
        self.token_of.push(token.to_string());
        id
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.token_of.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.token_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_of.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.token_of
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.token_of {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
        for (i, s) in SPECIALS.iter().enumerate() {
            if lines.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Parse { line: i + 1, msg: format!("expected special token {s}") });
            }
        }
        let mut v = Vocab::new();
        for (i, t) in lines.iter().enumerate().skip(SPECIALS.len()) {
            if v.id(t).is_some() {
                return Err(Error::Parse { line: i + 1, msg: format!("duplicate token {t:?}") });
            }
            v.add(t);
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    rank: HashMap<(String, String), usize>,
}

impl MergeTable {
    pub fn from_pairs(pairs: Vec<(String, String)>) -> Result<Self> {
        let mut rank = HashMap::new();
        for (i, p) in pairs.iter().enumerate() {
            if rank.insert(p.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate merge {} {}", p.0, p.1)));
            }
        }
        Ok(MergeTable { merges: pairs, rank })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    /// Applies merges in priority order to one word's symbols.
    pub fn apply(&self, symbols: &[String]) -> Vec<String> {
        self.apply_grouped(symbols).into_iter().map(|(s, _)| s).collect()
    }

    /// Like [`MergeTable::apply`], also returning how many input symbols
    /// each output symbol covers.
    pub fn apply_grouped(&self, symbols: &[String]) -> Vec<(String, usize)> {
        let mut syms: Vec<(String, usize)> = symbols.iter().map(|s| (s.clone(), 1)).collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.rank.get(&(w[0].0.clone(), w[1].0.clone())).map(|&r| (r, w[0].0.clone(), w[1].0.clone())))
                .min();
            let Some((_, l, r)) = best else { break };
            syms = merge_pair(&syms, &l, &r);
        }
        syms
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (l, r) in &self.merges {
            writeln!(w, "{l} {r}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => pairs.push((l.to_string(), r.to_string())),
                _ => return Err(Error::Parse { line: i + 1, msg: "expected \"left right\"".into() }),
            }
        }
        Self::from_pairs(pairs)
    }
}

fn merge_pair(syms: &[(String, usize)], l: &str, r: &str) -> Vec<(String, usize)> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i].0 == l && syms[i + 1].0 == r {
            out.push((format!("{l}{r}"), syms[i].1 + syms[i + 1].1));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns BPE merges over word-internal symbol sequences: each step merges
/// the most frequent adjacent pair, ties going to the lexicographically
/// smallest `(left, right)`. Merged symbols are plain concatenations.
pub fn train_bpe(sequences: &[Vec<String>], num_merges: usize) -> MergeTable {
    let mut words: BTreeMap<Vec<(String, usize)>, usize> = BTreeMap::new();
    for s in sequences {
        *words.entry(s.iter().map(|x| (x.clone(), 1)).collect()).or_default() += 1;
    }
    let mut pairs = Vec::new();
    for _ in 0..num_merges {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (w, &c) in &words {
            for p in w.windows(2) {
                *counts.entry((p[0].0.as_str(), p[1].0.as_str())).or_default() += c;
            }
        }
        // BTreeMap iterates in lexicographic order, so the first maximum wins ties.
        let mut best: Option<((&str, &str), usize)> = None;
        for (&p, &c) in &counts {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((p, c));
            }
        }
        let Some(((l, r), _)) = best else { break };
        let (l, r) = (l.to_string(), r.to_string());
        let mut next = BTreeMap::new();
        for (w, c) in words {
            *next.entry(merge_pair(&w, &l, &r)).or_default() += c;
        }
        words = next;
        pairs.push((l, r));
    }
    MergeTable::from_pairs(pairs).expect("training never repeats a merge")
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenizedExample {
    pub token_ids: Vec<usize>,
    pub word_final_mask: Vec<bool>,
    pub labels: Vec<bool>,
    pub word_index: Vec<usize>,
    /// Punctuation tokens; never word-final and never labelled.
    pub punct_mask: Vec<bool>,
    pub sup_ids: Option<Vec<usize>>,
    pub grapheme_targets: Option<Vec<usize>>,
}

impl TokenizedExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn num_words(&self) -> usize {
        self.word_final_mask.iter().filter(|&&m| m).count()
    }

    /// Token position of each word's last token, in word order.
    pub fn word_final_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&t| self.word_final_mask[t]).collect()
    }

    /// Each span holds a word's own tokens followed by its punctuation tokens.
    fn from_spans(spans: Vec<(Vec<usize>, Vec<usize>)>) -> Self {
        let mut ex = TokenizedExample::default();
        for (w, (ids, punct)) in spans.into_iter().enumerate() {
            let n = ids.len();
            for (k, id) in ids.into_iter().enumerate() {
                ex.token_ids.push(id);
                ex.word_final_mask.push(k + 1 == n);
                ex.punct_mask.push(false);
                ex.word_index.push(w);
            }
            for id in punct {
                ex.token_ids.push(id);
                ex.word_final_mask.push(false);
                ex.punct_mask.push(true);
                ex.word_index.push(w);
            }
        }
        ex.labels = vec![false; ex.token_ids.len()];
        ex
    }
}

fn chars(s: &str) -> Vec<String> {
    s.chars().map(String::from).collect()
}

#[derive(Clone, Debug)]
pub struct SubwordTokenizer {
    pub merges: MergeTable,
    pub vocab: Vocab,
}

impl SubwordTokenizer {
    /// Trains merges on word surfaces and builds the vocabulary from the
    /// merge closure, with and without the space marker.
    pub fn train(utterances: &[Utterance], num_merges: usize) -> Self {
        let seqs: Vec<Vec<String>> = utterances.iter().flat_map(|u| u.words.iter().map(|w| chars(&w.surface))).collect();
        let merges = train_bpe(&seqs, num_merges);
        let mut alphabet: Vec<String> = seqs.iter().flatten().cloned().collect();
        alphabet.sort();
        alphabet.dedup();
        let vocab = Self::closure_vocab(&alphabet, &merges);
        SubwordTokenizer { merges, vocab }
    }

    pub fn closure_vocab(alphabet: &[String], merges: &MergeTable) -> Vocab {
        let mut v = Vocab::new();
        let base = alphabet.iter().cloned().chain(merges.merges().iter().map(|(l, r)| format!("{l}{r}")));
        for t in base {
            v.add(&t);
            v.add(&format!("{SPACE_MARK}{t}"));
        }
        add_punct(&mut v);
        v
    }

    pub fn tokenize(&self, words: &[Word]) -> TokenizedExample {
        let spans = words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let pieces = self.merges.apply(&chars(&w.surface));
                let ids = pieces
                    .iter()
                    .enumerate()
                    .map(|(k, p)| {
                        if i > 0 && k == 0 {
                            self.vocab.id_or_unk(&format!("{SPACE_MARK}{p}"))
                        } else {
                            self.vocab.id_or_unk(p)
                        }
                    })
                    .collect();
                let punct = punct_pieces(w).iter().map(|p| self.vocab.id_or_unk(p)).collect();
                (ids, punct)
            })
            .collect();
        TokenizedExample::from_spans(spans)
    }

    /// Rebuilds word surfaces from token ids.
    pub fn detokenize(&self, ids: &[usize]) -> Vec<String> {
        let mut words: Vec<String> = Vec::new();
        for &id in ids {
            let tok = self.vocab.token(id).unwrap_or(SPECIALS[UNK]);
            if PUNCT_TOKENS.contains(&tok) {
                continue;
            }
            match tok.strip_prefix(SPACE_MARK) {
                Some(rest) => words.push(rest.to_string()),
                None => match words.last_mut() {
                    Some(w) => w.push_str(tok),
                    None => words.push(tok.to_string()),
                },
            }
        }
        words
    }
}

#[derive(Debug)]
pub struct PhonemeTokenizer {
    pub vocab: Vocab,
    /// Word-surface vocabulary used as phoneme-to-grapheme targets.
    pub graphemes: Vocab,
    unknown: AtomicUsize,
}

impl Clone for PhonemeTokenizer {
    fn clone(&self) -> Self {
        PhonemeTokenizer {
            vocab: self.vocab.clone(),
            graphemes: self.graphemes.clone(),
            unknown: AtomicUsize::new(self.unknown_count()),
        }
    }
}

impl PhonemeTokenizer {
    pub fn new(vocab: Vocab, graphemes: Vocab) -> Self {
        PhonemeTokenizer { vocab, graphemes, unknown: AtomicUsize::new(0) }
    }

    pub fn build(utterances: &[Utterance]) -> Self {
        let mut phones: Vec<&str> =
            utterances.iter().flat_map(|u| u.words.iter().flat_map(|w| w.phonemes.iter().map(String::as_str))).collect();
        phones.sort_unstable();
        phones.dedup();
        let mut surfaces: Vec<&str> = utterances.iter().flat_map(|u| u.words.iter().map(|w| w.surface.as_str())).collect();
        surfaces.sort_unstable();
        surfaces.dedup();
        let mut graphemes = Vocab::from_tokens(surfaces);
        add_punct(&mut graphemes);
        Self::new(Self::vocab_for(&phones), graphemes)
    }

    pub fn vocab_for(phonemes: &[&str]) -> Vocab {
        let mut v = Vocab::new();
        for p in phonemes {
            v.add(p);
            v.add(&format!("{CONTINUATION}{p}"));
        }
        add_punct(&mut v);
        v
    }

    /// Phonemes missing from the vocabulary seen so far.
    pub fn unknown_count(&self) -> usize {
        self.unknown.load(Ordering::Relaxed)
    }

    pub fn tokenize(&self, words: &[Word]) -> TokenizedExample {
        let mut targets = Vec::new();
        let spans = words
            .iter()
            .map(|w| {
                let g = self.graphemes.id_or_unk(&w.surface);
                let ids = w
                    .phonemes
                    .iter()
                    .enumerate()
                    .map(|(k, p)| {
                        targets.push(g);
                        let tok = if k == 0 { p.clone() } else { format!("{CONTINUATION}{p}") };
                        self.vocab.id(&tok).unwrap_or_else(|| {
                            let n = self.unknown.fetch_add(1, Ordering::Relaxed) + 1;
                            log::warn!("phoneme {p:?} not in vocabulary ({n} unknown so far)");
                            UNK
                        })
                    })
                    .collect();
                let punct = punct_pieces(w)
                    .iter()
                    .map(|p| {
                        targets.push(self.graphemes.id_or_unk(p));
                        self.vocab.id_or_unk(p)
                    })
                    .collect();
                (ids, punct)
            })
            .collect();
        let mut ex = TokenizedExample::from_spans(spans);
        ex.grapheme_targets = Some(targets);
        ex
    }
}

#[derive(Clone, Debug)]
pub struct SupPhonemeTokenizer {
    pub merges: MergeTable,
    pub vocab: Vocab,
}

impl SupPhonemeTokenizer {
    /// Learns word-internal merges over phoneme sequences.
    pub fn train(utterances: &[Utterance], num_merges: usize) -> Self {
        let seqs: Vec<Vec<String>> = utterances.iter().flat_map(|u| u.words.iter().map(|w| w.phonemes.clone())).collect();
        let merges = train_bpe(&seqs, num_merges);
        let mut v = Vocab::new();
        let mut alphabet: Vec<&String> = seqs.iter().flatten().collect();
        alphabet.sort();
        alphabet.dedup();
        for a in alphabet {
            v.add(a);
        }
        for (l, r) in merges.merges() {
            v.add(&format!("{l}{r}"));
        }
        add_punct(&mut v);
        SupPhonemeTokenizer { merges, vocab: v }
    }
}

fn phoneme_of(vocab: &Vocab, id: usize) -> String {
    let t = vocab.token(id).unwrap_or(SPECIALS[UNK]);
    t.strip_prefix(CONTINUATION).unwrap_or(t).to_string()
}

/// Groups each word's phonemes with the sup-phoneme merges and repeats each
/// group's id over its member positions.
pub fn derive_supphonemes(
    example: &TokenizedExample,
    phoneme_vocab: &Vocab,
    sup: &SupPhonemeTokenizer,
) -> TokenizedExample {
    let mut out = example.clone();
    let mut sup_ids = Vec::with_capacity(example.len());
    let mut t = 0;
    while t < example.len() {
        let w = example.word_index[t];
        let mut phones = Vec::new();
        while t < example.len() && example.word_index[t] == w && !example.punct_mask[t] {
            phones.push(phoneme_of(phoneme_vocab, example.token_ids[t]));
            t += 1;
        }
        for (g, members) in sup.merges.apply_grouped(&phones) {
            sup_ids.extend(std::iter::repeat_n(sup.vocab.id_or_unk(&g), members));
        }
        while t < example.len() && example.word_index[t] == w && example.punct_mask[t] {
            sup_ids.push(sup.vocab.id_or_unk(&phoneme_of(phoneme_vocab, example.token_ids[t])));
            t += 1;
        }
    }
    debug_assert_eq!(sup_ids.len(), example.len());
    out.sup_ids = Some(sup_ids);
    out
}

/// Places each boundary label on the final token of the word to its left.
pub fn make_labels(example: &TokenizedExample, rp_label: &[bool]) -> Result<TokenizedExample> {
    let finals = example.word_final_positions();
    if finals.len() != rp_label.len() + 1 {
        return Err(Error::Data(format!("{} words but {} boundary labels", finals.len(), rp_label.len())));
    }
    let mut out = example.clone();
    out.labels = vec![false; example.len()];
    for (i, &rp) in rp_label.iter().enumerate() {
        out.labels[finals[i]] = rp;
    }
    Ok(out)
}

pub fn write_lexicon<W: Write>(mut w: W, entries: &[(String, Vec<String>)]) -> Result<()> {
    for (word, phones) in entries {
        writeln!(w, "{word}\t{}", phones.join(" "))?;
    }
    Ok(())
}

pub fn read_lexicon<R: BufRead>(r: R) -> Result<Vec<(String, Vec<String>)>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (word, phones) =
            line.split_once('\t').ok_or(Error::Parse { line: i + 1, msg: "expected word<TAB>phonemes".into() })?;
        let phones: Vec<String> = phones.split_whitespace().map(String::from).collect();
        if word.is_empty() || phones.is_empty() {
            return Err(Error::Parse { line: i + 1, msg: "empty word or spelling".into() });
        }
        out.push((word.to_string(), phones));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn syms(s: &str) -> Vec<String> {
        s.split(' ').map(String::from).collect()
    }

    fn word(surface: &str, phones: &str) -> Word {
        Word { surface: surface.into(), phonemes: syms(phones), trailing_punct: None }
    }

    #[test]
    fn bpe_picks_most_frequent_pair() {
        let t = train_bpe(&[syms("A B C"), syms("A B D")], 1);
        assert_eq!(t.merges(), &[("A".to_string(), "B".to_string())]);
        assert!(train_bpe(&[syms("A B C")], 0).is_empty());
    }

    #[test]
    fn bpe_tie_break_is_lexicographic() {
        // (C,D) and (A,B) both occur once; (A,B) sorts first
        let t = train_bpe(&[syms("C D"), syms("A B")], 2);
        assert_eq!(t.merges()[0], ("A".to_string(), "B".to_string()));
        assert_eq!(t.merges()[1], ("C".to_string(), "D".to_string()));
    }

    #[test]
    fn bpe_stops_when_no_pairs_remain() {
        let t = train_bpe(&[syms("A B")], 5);
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn apply_replays_training() {
        let data = vec![syms("a b a b c"), syms("a b c"), syms("b c")];
        let t = train_bpe(&data, 3);
        assert_eq!(t.apply(&syms("a b c")), vec!["abc".to_string()]);
    }

    #[test]
    fn phoneme_tokens_use_continuation_prefix() {
        let words = [word("cat", "K AE T"), word("a", "AH")];
        let vocab = PhonemeTokenizer::vocab_for(&["K", "AE", "T", "AH"]);
        let tok = PhonemeTokenizer::new(vocab, Vocab::from_tokens(["cat", "a"]));
        let ex = tok.tokenize(&words);
        let names: Vec<&str> = ex.token_ids.iter().map(|&i| tok.vocab.token(i).unwrap()).collect();
        assert_eq!(names, ["K", "##AE", "##T", "AH"]);
        assert_eq!(ex.word_final_mask, [false, false, true, true]);
        let g = ex.grapheme_targets.unwrap();
        assert_eq!(g[0], g[2]);
        assert_ne!(g[2], g[3]);
        assert_eq!(tok.unknown_count(), 0);
        tok.tokenize(&[word("x", "QQ")]);
        assert_eq!(tok.unknown_count(), 1);
    }

    #[test]
    fn subword_mask_and_space_marker() {
        let u = Utterance {
            utterance_id: "x".into(),
            speaker_id: 0,
            words: vec![word("abab", "A"), word("ab", "A")],
            boundary_pause_ms: vec![0.0],
            rp_label: vec![false],
            total_duration_s: 1.0,
        };
        let tok = SubwordTokenizer::train(&[u.clone()], 1);
        let ex = tok.tokenize(&u.words);
        let names: Vec<&str> = ex.token_ids.iter().map(|&i| tok.vocab.token(i).unwrap()).collect();
        assert_eq!(names, ["ab", "ab", "Ġab"]);
        assert_eq!(ex.word_final_mask, [false, true, true]);
        assert_eq!(tok.detokenize(&ex.token_ids), ["abab", "ab"]);
    }

    #[test]
    fn sup_groups_repeat_over_members() {
        let u = Utterance {
            utterance_id: "x".into(),
            speaker_id: 0,
            words: vec![word("cat", "K AE T"), word("cat", "K AE T")],
            boundary_pause_ms: vec![0.0],
            rp_label: vec![false],
            total_duration_s: 1.0,
        };
        let ph = PhonemeTokenizer::build(&[u.clone()]);
        let ex = ph.tokenize(&u.words);
        let full = SupPhonemeTokenizer::train(&[u.clone()], 2);
        let s = derive_supphonemes(&ex, &ph.vocab, &full).sup_ids.unwrap();
        assert_eq!(s.len(), 6);
        assert!(s[..3].iter().all(|&x| x == s[0]));
        assert_eq!(full.vocab.token(s[0]), Some("KAET"));
        let none = SupPhonemeTokenizer::train(&[u], 0);
        let s = derive_supphonemes(&ex, &ph.vocab, &none).sup_ids.unwrap();
        let names: Vec<&str> = s.iter().map(|&i| none.vocab.token(i).unwrap()).collect();
        assert_eq!(names, ["K", "AE", "T", "K", "AE", "T"]);
    }

    #[test]
    fn labels_land_on_word_finals() {
        let vocab = PhonemeTokenizer::vocab_for(&["A", "B"]);
        let tok = PhonemeTokenizer::new(vocab, Vocab::new());
        let ex = tok.tokenize(&[word("x", "A B"), word("y", "A"), word("z", "B A")]);
        let l = make_labels(&ex, &[true, false]).unwrap();
        assert_eq!(l.labels, [false, true, false, false, false]);
        assert!(make_labels(&ex, &[true]).is_err());
    }

    #[test]
    fn punctuation_is_a_separate_unmasked_token() {
        let mut a = word("cat", "K AE T");
        a.trailing_punct = Some(",".into());
        let words = [a, word("a", "AH")];
        let u = Utterance {
            utterance_id: "x".into(),
            speaker_id: 0,
            words: words.to_vec(),
            boundary_pause_ms: vec![0.0],
            rp_label: vec![true],
            total_duration_s: 1.0,
        };
        let sw = SubwordTokenizer::train(&[u.clone()], 0);
        let ex = make_labels(&sw.tokenize(&words), &u.rp_label).unwrap();
        let names: Vec<&str> = ex.token_ids.iter().map(|&i| sw.vocab.token(i).unwrap()).collect();
        assert_eq!(names, ["c", "a", "t", ",", "Ġa"]);
        assert_eq!(ex.word_final_mask, [false, false, true, false, true]);
        assert_eq!(ex.labels, [false, false, true, false, false]);
        assert_eq!(sw.detokenize(&ex.token_ids), ["cat", "a"]);

        let ph = PhonemeTokenizer::build(&[u.clone()]);
        let pe = ph.tokenize(&words);
        assert_eq!(pe.punct_mask, [false, false, false, true, false]);
        let sup = SupPhonemeTokenizer::train(&[u], 5);
        let s = derive_supphonemes(&pe, &ph.vocab, &sup).sup_ids.unwrap();
        let names: Vec<&str> = s.iter().map(|&i| sup.vocab.token(i).unwrap()).collect();
        assert_eq!(names, ["KAET", "KAET", "KAET", ",", "AH"]);
        assert_eq!(ph.unknown_count(), 0);
    }

    #[test]
    fn vocab_requires_specials_and_round_trips() {
        let v = Vocab::from_tokens(["a", "b"]);
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        assert_eq!(Vocab::read(buf.as_slice()).unwrap(), v);
        assert!(Vocab::read("a\nb\n".as_bytes()).is_err());
        assert_eq!(v.id("[MASK]"), Some(MASK));
    }

    #[test]
    fn merge_file_rejects_duplicates() {
        assert!(MergeTable::read("a b\na b\n".as_bytes()).is_err());
        assert_eq!(MergeTable::read("a b\nab c\n".as_bytes()).unwrap().len(), 2);
    }
}
