//! Subword vocabulary (BPE-style merge training, `##` continuation pieces),
//! greedy longest-match encoding with `[CLS]`/`[SEP]` packing, and masked
//! language model input corruption.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Dataset;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
pub const NUM_SPECIALS: usize = SPECIAL_TOKENS.len();

pub const CONTINUATION: &str = "##";

/// Words longer than this (in characters) encode as a single `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

pub const DEFAULT_VOCAB_SIZE: usize = 8000;
pub const DEFAULT_MAX_LEN: usize = 64;
pub const DEFAULT_MASK_RATE: f64 = 0.15;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error(
        "vocabulary capacity {max_size} is below the {required} tokens needed for specials and the corpus alphabet"
    )]
    Capacity { max_size: usize, required: usize },
    #[error("max_len must be at least 4, got {0}")]
    MaxLen(usize),
    #[error("token id {id} is outside the vocabulary (size {size})")]
    Range { id: u32, size: usize },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("vocabulary file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
}

/// Bijective token ↔ id map. Ids 0–4 are the special tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    id_of: HashMap<String, u32>,
}

impl Vocab {
    /// A vocabulary holding only the special tokens.
    pub fn specials_only() -> Self {
        Self::from_tokens(SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect()).expect("special tokens are unique")
    }

    /// Builds a vocabulary from an id-ordered token list. The list must start
    /// with the special tokens and contain no duplicates.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != SPECIAL_TOKENS {
            return Err(format!("ids 0..{NUM_SPECIALS} must be {SPECIAL_TOKENS:?}"));
        }
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(format!("token {i} is empty or contains whitespace"));
            }
            if id_of.insert(t.clone(), i as u32).is_some() {
                return Err(format!("duplicate token {t:?}"));
            }
        }
        Ok(Self { tokens, id_of })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    /// Id of a non-special piece, used by segmentation.
    fn piece(&self, piece: &str) -> Option<u32> {
        self.id(piece).filter(|&id| !Self::is_special(id))
    }

    /// One token per line; the line number (from 0) is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        let path = path.as_ref();
        let io_err = |source| TokenizerError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = io::BufWriter::new(fs::File::create(path).map_err(io_err)?);
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(io_err)?;
        }
        f.flush().map_err(io_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        let path = path.as_ref();
        let io_err = |source| TokenizerError::Io {
            path: path.to_path_buf(),
            source,
        };
        let reader = BufReader::new(fs::File::open(path).map_err(io_err)?);
        let mut tokens = Vec::new();
        for line in reader.lines() {
            let line = line.map_err(io_err)?;
            tokens.push(line.strip_suffix('\r').unwrap_or(&line).to_string());
        }
        Self::from_tokens(tokens).map_err(|reason| TokenizerError::Format {
            path: path.to_path_buf(),
            reason,
        })
    }
}

/// Every character of the corpus as both a word-initial piece `c` and a
/// continuation piece `##c`, sorted.
pub fn corpus_alphabet<S: AsRef<str>>(corpus: &[S]) -> BTreeSet<String> {
    let mut alphabet = BTreeSet::new();
    for text in corpus {
        for c in text.as_ref().chars().filter(|c| !c.is_whitespace()) {
            alphabet.insert(c.to_string());
            alphabet.insert(format!("{CONTINUATION}{c}"));
        }
    }
    alphabet
}

fn merge_symbols(left: &str, right: &str) -> String {
    let mut s = String::with_capacity(left.len() + right.len());
    s.push_str(left);
    s.push_str(right.strip_prefix(CONTINUATION).unwrap_or(right));
    s
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    merged: String,
    parts: (String, String),
    pair: (u32, u32),
}

// Max-heap order: higher count first, then lexicographically smaller merged
// token, then the lexicographically smaller (left, right) pair.
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| Reverse(&self.merged).cmp(&Reverse(&other.merged)))
            .then_with(|| Reverse(&self.parts).cmp(&Reverse(&other.parts)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct MergeTrainer {
    symbols: Vec<String>,
    symbol_of: HashMap<String, u32>,
    words: Vec<(Vec<u32>, u64)>,
    pair_counts: HashMap<(u32, u32), u64>,
    pair_words: HashMap<(u32, u32), BTreeSet<usize>>,
    heap: BinaryHeap<Candidate>,
}

impl MergeTrainer {
    fn new<S: AsRef<str>>(corpus: &[S], alphabet: &BTreeSet<String>) -> Self {
        let mut symbols = Vec::new();
        let mut symbol_of = HashMap::new();
        for a in alphabet {
            symbol_of.insert(a.clone(), symbols.len() as u32);
            symbols.push(a.clone());
        }
        let mut word_counts: HashMap<&str, u64> = HashMap::new();
        for text in corpus {
            for w in text.as_ref().split_whitespace() {
                *word_counts.entry(w).or_default() += 1;
            }
        }
        let mut sorted: Vec<(&str, u64)> = word_counts.into_iter().collect();
        sorted.sort_unstable();
        let words = sorted
            .into_iter()
            .map(|(w, n)| {
                let syms = w
                    .chars()
                    .enumerate()
                    .map(|(i, c)| {
                        let s = if i == 0 {
                            c.to_string()
                        } else {
                            format!("{CONTINUATION}{c}")
                        };
                        symbol_of[&s]
                    })
                    .collect();
                (syms, n)
            })
            .collect();
        let mut trainer = Self {
            symbols,
            symbol_of,
            words,
            pair_counts: HashMap::new(),
            pair_words: HashMap::new(),
            heap: BinaryHeap::new(),
        };
        for wi in 0..trainer.words.len() {
            trainer.add_word_pairs(wi, None);
        }
        let pairs: Vec<(u32, u32)> = trainer.pair_counts.keys().copied().collect();
        for p in pairs {
            trainer.push_candidate(p);
        }
        trainer
    }

    fn add_word_pairs(&mut self, wi: usize, mut changed: Option<&mut HashSet<(u32, u32)>>) {
        let (syms, n) = &self.words[wi];
        for w in syms.windows(2) {
            let p = (w[0], w[1]);
            *self.pair_counts.entry(p).or_default() += n;
            self.pair_words.entry(p).or_default().insert(wi);
            if let Some(c) = changed.as_deref_mut() {
                c.insert(p);
            }
        }
    }

    fn remove_word_pairs(&mut self, wi: usize, changed: &mut HashSet<(u32, u32)>) {
        let (syms, n) = &self.words[wi];
        for w in syms.windows(2) {
            let p = (w[0], w[1]);
            let c = self.pair_counts.get_mut(&p).expect("pair counted");
            *c -= n;
            changed.insert(p);
        }
    }

    fn push_candidate(&mut self, pair: (u32, u32)) {
        let count = self.pair_counts.get(&pair).copied().unwrap_or(0);
        if count > 0 {
            let (l, r) = (&self.symbols[pair.0 as usize], &self.symbols[pair.1 as usize]);
            self.heap.push(Candidate {
                count,
                merged: merge_symbols(l, r),
                parts: (l.clone(), r.clone()),
                pair,
            });
        }
    }

    /// Pops the most frequent live pair.
    fn best(&mut self) -> Option<Candidate> {
        while let Some(c) = self.heap.pop() {
            if self.pair_counts.get(&c.pair).copied() == Some(c.count) {
                return Some(c);
            }
        }
        None
    }

    /// Applies a merge everywhere and returns the new symbol id.
    fn apply(&mut self, cand: &Candidate) -> u32 {
        let new_sym = match self.symbol_of.get(&cand.merged) {
            Some(&id) => id,
            None => {
                let id = self.symbols.len() as u32;
                self.symbols.push(cand.merged.clone());
                self.symbol_of.insert(cand.merged.clone(), id);
                id
            }
        };
        let (a, b) = cand.pair;
        let affected: Vec<usize> = self
            .pair_words
            .remove(&cand.pair)
            .unwrap_or_default()
            .into_iter()
            .collect();
        let mut changed = HashSet::new();
        for wi in affected {
            let syms = &self.words[wi].0;
            if !syms.windows(2).any(|w| w[0] == a && w[1] == b) {
                continue;
            }
            self.remove_word_pairs(wi, &mut changed);
            let syms = &self.words[wi].0;
            let mut merged = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    merged.push(new_sym);
                    i += 2;
                } else {
                    merged.push(syms[i]);
                    i += 1;
                }
            }
            self.words[wi].0 = merged;
            self.add_word_pairs(wi, Some(&mut changed));
        }
        let mut changed: Vec<_> = changed.into_iter().collect();
        changed.sort_unstable();
        for p in changed {
            self.push_candidate(p);
        }
        new_sym
    }
}

/// Trains a subword vocabulary on whitespace-tokenized (normalized) text.
///
/// Layout: the five specials, then the corpus alphabet (each character as `c`
/// and `##c`, sorted), then merged tokens in merge order. Merges repeatedly
/// join the most frequent adjacent symbol pair; ties go to the
/// lexicographically smallest merged token. Training stops when the
/// vocabulary holds `max_size` tokens or no pair occurs `min_freq` times.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize, min_freq: u64) -> Result<Vocab, TokenizerError> {
    let alphabet = corpus_alphabet(corpus);
    let required = NUM_SPECIALS + alphabet.len();
    if max_size < required {
        return Err(TokenizerError::Capacity { max_size, required });
    }
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut present: HashSet<String> = tokens.iter().cloned().collect();
    for a in &alphabet {
        if present.insert(a.clone()) {
            tokens.push(a.clone());
        }
    }
    let mut trainer = MergeTrainer::new(corpus, &alphabet);
    while tokens.len() < max_size {
        let Some(best) = trainer.best() else { break };
        if best.count < min_freq.max(1) {
            break;
        }
        trainer.apply(&best);
        if present.insert(best.merged.clone()) {
            tokens.push(best.merged);
        }
    }
    Ok(Vocab::from_tokens(tokens).expect("trainer emits unique tokens"))
}

/// Greedy longest-match segmentation of one word. A word with an
/// unmatchable residue becomes a single `[UNK]`.
pub fn segment_word(vocab: &Vocab, word: &str) -> Vec<u32> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        return vec![UNK];
    }
    let mut out = Vec::new();
    let mut start = 0;
    let mut buf = String::new();
    while start < chars.len() {
        let mut found = None;
        for end in (start + 1..=chars.len()).rev() {
            buf.clear();
            if start > 0 {
                buf.push_str(CONTINUATION);
            }
            buf.extend(&chars[start..end]);
            if let Some(id) = vocab.piece(&buf) {
                found = Some((id, end));
                break;
            }
        }
        match found {
            Some((id, end)) => {
                out.push(id);
                start = end;
            }
            None => return vec![UNK],
        }
    }
    out
}

pub fn tokenize(vocab: &Vocab, text: &str) -> Vec<u32> {
    text.split_whitespace().flat_map(|w| segment_word(vocab, w)).collect()
}

/// A packed, padded model input.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    /// 1 for real tokens (specials included), 0 for padding.
    pub attention_mask: Vec<u8>,
    /// Positions of `[CLS]` and `[SEP]`.
    pub special_positions: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Position one past the last real token.
    pub fn effective_len(&self) -> usize {
        self.attention_mask.iter().rposition(|&m| m == 1).map_or(0, |p| p + 1)
    }

    /// Drops trailing positions beyond `len`.
    pub fn truncated(&self, len: usize) -> TokenSequence {
        let len = len.min(self.len());
        TokenSequence {
            ids: self.ids[..len].to_vec(),
            segment_ids: self.segment_ids[..len].to_vec(),
            attention_mask: self.attention_mask[..len].to_vec(),
            special_positions: self.special_positions.iter().copied().filter(|&p| p < len).collect(),
        }
    }
}

/// Packs `[CLS] text [SEP]` (segment 0) and, when `pair` is given,
/// `pair [SEP]` (segment 1), truncating the longer segment first (the pair
/// on ties) and right-padding to `max_len`.
pub fn encode(vocab: &Vocab, text: &str, pair: Option<&str>, max_len: usize) -> Result<TokenSequence, TokenizerError> {
    if max_len < 4 {
        return Err(TokenizerError::MaxLen(max_len));
    }
    let mut first = tokenize(vocab, text);
    let mut second = pair.map(|p| tokenize(vocab, p));
    let specials = 2 + usize::from(second.is_some());
    loop {
        let total = first.len() + second.as_ref().map_or(0, Vec::len) + specials;
        if total <= max_len {
            break;
        }
        match second.as_mut() {
            Some(s) if s.len() >= first.len() => {
                s.pop();
            }
            _ => {
                first.pop();
            }
        }
    }

    let mut seq = TokenSequence {
        ids: Vec::with_capacity(max_len),
        segment_ids: Vec::with_capacity(max_len),
        attention_mask: Vec::with_capacity(max_len),
        special_positions: Vec::new(),
    };
    let push = |seq: &mut TokenSequence, id: u32, segment: u8| {
        if id == CLS || id == SEP {
            seq.special_positions.push(seq.ids.len());
        }
        seq.ids.push(id);
        seq.segment_ids.push(segment);
        seq.attention_mask.push(1);
    };
    push(&mut seq, CLS, 0);
    for &id in &first {
        push(&mut seq, id, 0);
    }
    push(&mut seq, SEP, 0);
    if let Some(second) = &second {
        for &id in second {
            push(&mut seq, id, 1);
        }
        push(&mut seq, SEP, 1);
    }
    while seq.ids.len() < max_len {
        seq.ids.push(PAD);
        seq.segment_ids.push(0);
        seq.attention_mask.push(0);
    }
    Ok(seq)
}

/// How dataset examples are turned into model inputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeOptions {
    pub max_len: usize,
    /// Pack the (normalized) topic as the second segment when present.
    pub use_topic: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            max_len: DEFAULT_MAX_LEN,
            use_topic: true,
        }
    }
}

pub fn encode_dataset(vocab: &Vocab, ds: &Dataset, opts: &EncodeOptions) -> Result<Vec<TokenSequence>, TokenizerError> {
    ds.examples
        .iter()
        .map(|ex| {
            let topic = if opts.use_topic {
                ex.topic.as_deref().map(crate::corpus::normalize_tweet)
            } else {
                None
            };
            encode(vocab, &ex.norm_text, topic.as_deref(), opts.max_len)
        })
        .collect()
}

/// Inverse of [`encode`] for in-vocabulary text: drops specials, glues `##`
/// pieces onto the preceding piece and space-joins words.
pub fn decode(vocab: &Vocab, ids: &[u32]) -> Result<String, TokenizerError> {
    let mut words: Vec<String> = Vec::new();
    for &id in ids {
        let token = vocab.token(id).ok_or(TokenizerError::Range { id, size: vocab.len() })?;
        if Vocab::is_special(id) {
            continue;
        }
        match token.strip_prefix(CONTINUATION) {
            Some(rest) if !words.is_empty() => words.last_mut().unwrap().push_str(rest),
            Some(rest) => words.push(rest.to_string()),
            None => words.push(token.to_string()),
        }
    }
    Ok(words.join(" "))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskOptions {
    /// Probability that an eligible position is selected for prediction.
    pub rate: f64,
    /// Replace selected inputs 80% `[MASK]` / 10% random / 10% unchanged
    /// instead of always `[MASK]`.
    pub mixed_replacement: bool,
    /// Needed for random replacement only.
    pub vocab_size: usize,
}

impl Default for MaskOptions {
    fn default() -> Self {
        Self {
            rate: DEFAULT_MASK_RATE,
            mixed_replacement: false,
            vocab_size: 0,
        }
    }
}

/// Corrupted inputs plus, per position, the original id where a prediction
/// is required.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskedBatch {
    pub inputs: Vec<TokenSequence>,
    pub labels: Vec<Vec<Option<u32>>>,
}

impl MaskedBatch {
    pub fn num_masked(&self) -> usize {
        self.labels.iter().flatten().filter(|l| l.is_some()).count()
    }
}

/// Selects each non-special, non-padding position independently with
/// probability `rate`, replaces it by `[MASK]` and records the original id.
pub fn apply_mlm_mask(batch: &[TokenSequence], rate: f64, seed: u64) -> MaskedBatch {
    apply_mlm_mask_with(
        batch,
        &MaskOptions {
            rate,
            ..MaskOptions::default()
        },
        seed,
    )
}

pub fn apply_mlm_mask_with(batch: &[TokenSequence], opts: &MaskOptions, seed: u64) -> MaskedBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for seq in batch {
        let mut seq = seq.clone();
        let mut seq_labels = vec![None; seq.len()];
        for (pos, label) in seq_labels.iter_mut().enumerate() {
            let id = seq.ids[pos];
            if seq.attention_mask[pos] == 0 || Vocab::is_special(id) || seq.special_positions.contains(&pos) {
                continue;
            }
            if rng.random::<f64>() >= opts.rate {
                continue;
            }
            *label = Some(id);
            seq.ids[pos] = if opts.mixed_replacement && opts.vocab_size > NUM_SPECIALS {
                let r: f64 = rng.random();
                if r < 0.8 {
                    MASK
                } else if r < 0.9 {
                    rng.random_range(NUM_SPECIALS as u32..opts.vocab_size as u32)
                } else {
                    id
                }
            } else {
                MASK
            };
        }
        inputs.push(seq);
        labels.push(seq_labels);
    }
    MaskedBatch { inputs, labels }
}
