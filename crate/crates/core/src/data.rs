//! Corpus ingestion, byte tokenization, full-length indexing and
//! truncation-based batching.
//!
//! The corpus is cut once into non-overlapping windows of the full sequence
//! length. A training step that wants a shorter length draws full windows as
//! usual and keeps only their first `seqlen` tokens; the tail is discarded.
//! Which windows a step draws depends only on the shuffle seed and how many
//! windows were drawn before it, never on the truncation length.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Byte-level vocabulary size.
pub const BYTE_VOCAB: usize = 256;
/// Reserved padding id; never produced by [`tokenize_bytes`].
pub const PAD_ID: u32 = 256;

/// Row-major `rows × cols` matrix of token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMatrix {
    rows: usize,
    cols: usize,
    ids: Vec<u32>,
}

impl TokenMatrix {
    pub fn new(rows: usize, cols: usize, ids: Vec<u32>) -> Result<Self> {
        if rows * cols != ids.len() {
            return Err(Error::Shape {
                op: "token matrix",
                lhs: vec![rows, cols],
                rhs: vec![ids.len()],
            });
        }
        Ok(Self { rows, cols, ids })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }

    /// First `len` columns of every row.
    pub fn truncate(&self, len: usize) -> TokenMatrix {
        let len = len.min(self.cols);
        let ids = (0..self.rows)
            .flat_map(|r| self.row(r)[..len].iter().copied())
            .collect();
        TokenMatrix {
            rows: self.rows,
            cols: len,
            ids,
        }
    }

    /// Columns `1..cols` of every row, flattened: the next-token targets.
    pub fn shifted_targets(&self) -> Vec<usize> {
        (0..self.rows)
            .flat_map(|r| self.row(r)[1..].iter().map(|&t| t as usize))
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.ids.len()
    }
}

pub fn tokenize_bytes(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| u32::from(b)).collect()
}

/// Inverse of [`tokenize_bytes`]; ids outside the byte range are dropped.
pub fn detokenize(tokens: &[u32]) -> Vec<u8> {
    tokens
        .iter()
        .filter_map(|&t| u8::try_from(t).ok())
        .collect()
}

/// Reads and concatenates corpus files as raw bytes, in the given order.
pub fn load_corpus<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for p in paths {
        let bytes = std::fs::read(p.as_ref()).map_err(|e| {
            Error::Data(format!("cannot read corpus file {}: {e}", p.as_ref().display()))
        })?;
        out.extend_from_slice(&bytes);
    }
    Ok(out)
}

/// Token stream pre-cut into full-length windows.
#[derive(Debug, Clone)]
pub struct CorpusIndex {
    tokens: Vec<u32>,
    seqlen: usize,
    n_windows: usize,
    n_train: usize,
    shuffle_seed: u64,
}

/// Cuts `tokens` into `⌊N / seqlen_e⌋` windows and reserves the last
/// `val_fraction` of them (rounded, at least one) for validation.
pub fn build_index(
    tokens: Vec<u32>,
    seqlen_e: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<CorpusIndex> {
    if seqlen_e < 2 {
        return Err(Error::Data(format!("sequence length {seqlen_e} is below 2")));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Data(format!(
            "val_fraction {val_fraction} must lie in (0, 1)"
        )));
    }
    let min = 2 * seqlen_e;
    if tokens.len() < min {
        return Err(Error::Data(format!(
            "corpus too small: {} tokens, need at least {min} (2 x sequence length {seqlen_e})",
            tokens.len()
        )));
    }
    let n_windows = tokens.len() / seqlen_e;
    let n_val = ((n_windows as f64 * val_fraction).round() as usize).clamp(1, n_windows - 1);
    Ok(CorpusIndex {
        tokens,
        seqlen: seqlen_e,
        n_windows,
        n_train: n_windows - n_val,
        shuffle_seed: seed,
    })
}

impl CorpusIndex {
    pub fn seqlen(&self) -> usize {
        self.seqlen
    }

    pub fn n_windows(&self) -> usize {
        self.n_windows
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn n_val(&self) -> usize {
        self.n_windows - self.n_train
    }

    pub fn shuffle_seed(&self) -> u64 {
        self.shuffle_seed
    }

    /// Full-length window `w` (train windows first, then validation).
    pub fn window(&self, w: usize) -> &[u32] {
        &self.tokens[w * self.seqlen..(w + 1) * self.seqlen]
    }

    pub fn max_token(&self) -> Option<u32> {
        self.tokens.iter().copied().max()
    }

    /// Order in which training windows are visited during `epoch`.
    pub fn epoch_order(&self, epoch: u64) -> Vec<u32> {
        let mut order: Vec<u32> = (0..self.n_train as u32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.shuffle_seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub tokens: TokenMatrix,
    pub step: u64,
    pub seqlen: usize,
}

/// Shuffled-without-replacement window sampler. The only state is the count
/// of windows drawn so far, so any batch can be recomputed from
/// `(seed, cursor)` alone.
#[derive(Debug, Clone, Default)]
pub struct BatchSampler {
    cursor: u64,
    cached: Option<(u64, Vec<u32>)>,
}

impl BatchSampler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn at(cursor: u64) -> Self {
        Self {
            cursor,
            cached: None,
        }
    }

    pub fn cursor(&self) -> u64 {
        self.cursor
    }

    fn window_at(&mut self, index: &CorpusIndex, position: u64) -> usize {
        let n = index.n_train as u64;
        let epoch = position / n;
        if self.cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.cached = Some((epoch, index.epoch_order(epoch)));
        }
        let order = &self.cached.as_ref().expect("cached above").1;
        order[(position % n) as usize] as usize
    }

    /// Draws `batch_size` windows and keeps their first `seqlen` tokens.
    pub fn next_batch(
        &mut self,
        index: &CorpusIndex,
        batch_size: usize,
        seqlen: usize,
        step: u64,
    ) -> Result<Batch> {
        if seqlen < 2 || seqlen > index.seqlen {
            return Err(Error::contract(format!(
                "batch length {seqlen} outside [2, {}]",
                index.seqlen
            )));
        }
        if batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        let mut ids = Vec::with_capacity(batch_size * seqlen);
        for i in 0..batch_size as u64 {
            let w = self.window_at(index, self.cursor + i);
            ids.extend_from_slice(&index.window(w)[..seqlen]);
        }
        self.cursor += batch_size as u64;
        Ok(Batch {
            tokens: TokenMatrix::new(batch_size, seqlen, ids)?,
            step,
            seqlen,
        })
    }
}

/// Every validation window exactly once, in corpus order, at full length.
pub fn validation_batches(index: &CorpusIndex, batch_size: usize) -> Result<Vec<Batch>> {
    if index.n_val() == 0 {
        return Err(Error::Data("index has no validation windows".into()));
    }
    if batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let windows: Vec<usize> = (index.n_train..index.n_windows).collect();
    windows
        .chunks(batch_size)
        .enumerate()
        .map(|(i, chunk)| {
            let ids = chunk
                .iter()
                .flat_map(|&w| index.window(w).iter().copied())
                .collect();
            Ok(Batch {
                tokens: TokenMatrix::new(chunk.len(), index.seqlen, ids)?,
                step: i as u64,
                seqlen: index.seqlen,
            })
        })
        .collect()
}

/// Deterministic English-like text for experiments that need a corpus of a
/// given size without external data.
///
/// Paragraphs revolve around a few recurring named entities and topic nouns,
/// so longer contexts carry information that short ones do not. Sentences
/// follow a handful of templates with subject-verb agreement over a
/// Zipf-distributed vocabulary.
pub fn synthetic_corpus(seed: u64, n_bytes: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lex = Lexicon::generate(&mut rng);
    let mut out = String::with_capacity(n_bytes + 512);
    while out.len() < n_bytes {
        lex.paragraph(&mut rng, &mut out);
        out.push('\n');
    }
    let mut bytes = out.into_bytes();
    bytes.truncate(n_bytes);
    bytes
}

struct Lexicon {
    names: Vec<String>,
    nouns: Vec<String>,
    verbs: Vec<String>,
    adjectives: Vec<String>,
    adverbs: Vec<String>,
}

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "br", "cl", "dr",
    "gr", "pl", "st", "tr", "sh", "th",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ou", "io"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "l", "t", "nd", "st", "m"];
const PREPOSITIONS: &[&str] = &["of", "in", "on", "with", "near", "under", "from", "beyond"];
const CONNECTIVES: &[&str] = &["and", "but", "so", "while", "because"];

impl Lexicon {
    fn generate(rng: &mut ChaCha8Rng) -> Self {
        let mut seen = std::collections::HashSet::new();
        let mut word = |rng: &mut ChaCha8Rng, syllables: usize| loop {
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
                w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
            }
            w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
            if seen.insert(w.clone()) {
                return w;
            }
        };
        let mut list = |rng: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize| {
            (0..n)
                .map(|_| {
                    let s = rng.random_range(lo..=hi);
                    word(rng, s)
                })
                .collect::<Vec<_>>()
        };
        let names = list(rng, 300, 2, 3)
            .into_iter()
            .map(|w| {
                let mut c = w.chars();
                let first = c.next().unwrap().to_ascii_uppercase();
                std::iter::once(first).chain(c).collect()
            })
            .collect();
        Self {
            names,
            nouns: list(rng, 1200, 1, 3),
            verbs: list(rng, 500, 1, 2),
            adjectives: list(rng, 400, 1, 3),
            adverbs: list(rng, 120, 2, 3)
                .into_iter()
                .map(|w| w + "ly")
                .collect(),
        }
    }

    fn paragraph(&self, rng: &mut ChaCha8Rng, out: &mut String) {
        let cast: Vec<&str> = (0..3)
            .map(|_| self.names[zipf(rng, self.names.len())].as_str())
            .collect();
        let topics: Vec<&str> = (0..4)
            .map(|_| self.nouns[zipf(rng, self.nouns.len())].as_str())
            .collect();
        let sentences = rng.random_range(3..9);
        for s in 0..sentences {
            if s > 0 {
                out.push(' ');
            }
            self.sentence(rng, &cast, &topics, out);
        }
    }

    fn noun_phrase(&self, rng: &mut ChaCha8Rng, topics: &[&str], plural: bool) -> String {
        let noun = if rng.random_bool(0.45) {
            topics[rng.random_range(0..topics.len())]
        } else {
            self.nouns[zipf(rng, self.nouns.len())].as_str()
        };
        let mut np = String::new();
        np.push_str(if plural {
            ["the", "some", "many", "these"][rng.random_range(0..4)]
        } else {
            ["the", "a", "this", "every"][rng.random_range(0..4)]
        });
        if rng.random_bool(0.35) {
            np.push(' ');
            np.push_str(&self.adjectives[zipf(rng, self.adjectives.len())]);
        }
        np.push(' ');
        np.push_str(noun);
        if plural {
            np.push('s');
        }
        np
    }

    fn clause(&self, rng: &mut ChaCha8Rng, cast: &[&str], topics: &[&str]) -> String {
        let plural = rng.random_bool(0.3);
        let subject = if !plural && rng.random_bool(0.4) {
            cast[rng.random_range(0..cast.len())].to_string()
        } else {
            self.noun_phrase(rng, topics, plural)
        };
        let verb = &self.verbs[zipf(rng, self.verbs.len())];
        let mut c = subject;
        if rng.random_bool(0.2) {
            c.push(' ');
            c.push_str(&self.adverbs[zipf(rng, self.adverbs.len())]);
        }
        c.push(' ');
        c.push_str(verb);
        if !plural {
            c.push('s');
        }
        c.push(' ');
        if rng.random_bool(0.3) {
            c.push_str(cast[rng.random_range(0..cast.len())]);
        } else {
            let obj_plural = rng.random_bool(0.3);
            c.push_str(&self.noun_phrase(rng, topics, obj_plural));
        }
        if rng.random_bool(0.4) {
            c.push(' ');
            c.push_str(PREPOSITIONS[rng.random_range(0..PREPOSITIONS.len())]);
            c.push(' ');
            c.push_str(&self.noun_phrase(rng, topics, false));
        }
        c
    }

    fn sentence(&self, rng: &mut ChaCha8Rng, cast: &[&str], topics: &[&str], out: &mut String) {
        let mut s = self.clause(rng, cast, topics);
        if rng.random_bool(0.3) {
            s.push_str(", ");
            s.push_str(CONNECTIVES[rng.random_range(0..CONNECTIVES.len())]);
            s.push(' ');
            s.push_str(&self.clause(rng, cast, topics));
        }
        if rng.random_bool(0.05) {
            s.push_str(&format!(" in {}", rng.random_range(1200..2100)));
        }
        let mut chars = s.chars();
        if let Some(first) = chars.next() {
            out.push(first.to_ascii_uppercase());
            out.push_str(chars.as_str());
        }
        out.push(if rng.random_bool(0.9) { '.' } else { '?' });
    }
}

/// Index in `0..n` drawn with probability proportional to `1 / (i + 1)`.
fn zipf(rng: &mut ChaCha8Rng, n: usize) -> usize {
    // Inverse-CDF of the continuous approximation: P(X < x) ~ ln(1+x)/ln(1+n).
    let u: f64 = rng.random();
    let x = ((1.0 + n as f64).powf(u) - 1.0).floor() as usize;
    x.min(n - 1)
}
