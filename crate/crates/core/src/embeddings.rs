//! Vocabulary, word vectors and idf-weighted memory encoding.
//!
//! Tokens are ranked by frequency (rank 1 = most frequent). Term frequency
//! is derived from rank with Zipf's law, `tf = scale / rank`, and feeds
//! `idf = 1 / (1 + ln(1 + tf))`. Special tokens are appended after the
//! ranked tokens and have no rank; they and out-of-vocabulary tokens get
//! idf 1.0.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, PrivacyLabel, Setting};
use crate::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const CTX_P: &str = "<ctx_p>";
pub const CTX_NP: &str = "<ctx_np>";
pub const SETTING_PUBLIC: &str = "<setting_public>";
pub const SETTING_PRIVATE: &str = "<setting_private>";
pub const SEP: &str = "<sep>";

pub const SPECIALS: [&str; 9] = [
    PAD,
    UNK,
    BOS,
    EOS,
    CTX_P,
    CTX_NP,
    SETTING_PUBLIC,
    SETTING_PRIVATE,
    SEP,
];

/// Default Zipf scale for `zipf_tf`.
pub const DEFAULT_TF_SCALE: f64 = 1e6;

/// Range of the uniform initializer used for special-token rows.
const SPECIAL_INIT: f64 = 0.08;

pub fn setting_marker(s: Setting) -> &'static str {
    match s {
        Setting::Public => SETTING_PUBLIC,
        Setting::Private => SETTING_PRIVATE,
    }
}

pub fn label_marker(l: PrivacyLabel) -> &'static str {
    match l {
        PrivacyLabel::P => CTX_P,
        PrivacyLabel::NP => CTX_NP,
    }
}

/// Rank-ordered token index. Ids are 0-based positions; the rank of a ranked
/// token is its id + 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    ranked: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from tokens in rank order and appends the special
    /// tokens. Duplicates and special tokens in the input are format errors.
    pub fn from_ranked<I, S>(ranked: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = Vec::new();
        let mut index = HashMap::new();
        for t in ranked {
            let t = t.into();
            if SPECIALS.contains(&t.as_str()) {
                return Err(Error::Format(format!("ranked token list contains special token {t}")));
            }
            if index.insert(t.clone(), tokens.len()).is_some() {
                return Err(Error::Format(format!("duplicate token {t:?}")));
            }
            tokens.push(t);
        }
        let ranked = tokens.len();
        for s in SPECIALS {
            index.insert(s.to_string(), tokens.len());
            tokens.push(s.to_string());
        }
        Ok(Self {
            tokens,
            index,
            ranked,
        })
    }

    /// Ranks every corpus token by descending frequency, ties broken
    /// lexicographically.
    pub fn from_corpus(c: &Corpus) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for u in c.utterances() {
            for t in &u.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIALS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_ranked(ranked.into_iter().map(|(t, _)| t)).expect("counted tokens are unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of ranked (non-special) tokens.
    pub fn ranked_len(&self) -> usize {
        self.ranked
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or the UNK id.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or_else(|| self.unk())
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Frequency rank of a ranked token; `None` for specials and OOV.
    pub fn rank(&self, token: &str) -> Option<usize> {
        self.get(token).filter(|&i| i < self.ranked).map(|i| i + 1)
    }

    fn special(&self, s: &str) -> usize {
        self.index[s]
    }

    pub fn pad(&self) -> usize {
        self.special(PAD)
    }

    pub fn unk(&self) -> usize {
        self.special(UNK)
    }

    pub fn bos(&self) -> usize {
        self.special(BOS)
    }

    pub fn eos(&self) -> usize {
        self.special(EOS)
    }

    /// Hex SHA-256 over the token list; checkpoints record it so a model is
    /// never paired with a different vocabulary.
    pub fn hash(&self) -> String {
        tokens_hash(&self.tokens)
    }

    /// Inverse of [`Vocabulary::tokens`]: the full list including the
    /// trailing specials, as stored in checkpoints.
    pub fn from_full_list(tokens: Vec<String>) -> Result<Self> {
        let n = tokens.len();
        if n < SPECIALS.len() || tokens[n - SPECIALS.len()..].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Format("token list does not end with the special tokens".into()));
        }
        Self::from_ranked(tokens.into_iter().take(n - SPECIALS.len()))
    }
}

/// Hex SHA-256 over newline-terminated tokens.
pub fn tokens_hash<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.as_ref().as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Dense `rows x dim` matrix of token or feature embeddings, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::Shape(format!(
                "embedding table {rows}x{dim} needs {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("embedding values must be finite".into()));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    /// Uniform(-scale, scale) entries from a seeded generator.
    pub fn uniform(rows: usize, dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * dim).map(|_| rng.gen_range(-scale..=scale)).collect();
        Self { rows, dim, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Reads `token v1 .. vd` lines in rank order. Only the first `vocab_limit`
/// lines are kept; special-token rows are appended with small seeded random
/// vectors.
pub fn load_vectors<R: BufRead>(
    input: R,
    vocab_limit: usize,
    seed: u64,
) -> Result<(Vocabulary, EmbeddingTable)> {
    let mut tokens = Vec::new();
    let mut data = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in input.lines().enumerate() {
        if tokens.len() == vocab_limit {
            break;
        }
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().expect("nonblank line has a field");
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Format(format!("line {}: bad value {f:?}", i + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None if values.is_empty() => {
                return Err(Error::Format(format!("line {}: token without values", i + 1)))
            }
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Format(format!(
                    "line {}: expected {d} values, got {}",
                    i + 1,
                    values.len()
                )))
            }
            Some(_) => {}
        }
        tokens.push(token.to_string());
        data.extend(values);
    }
    let dim = dim.ok_or_else(|| Error::Format("vector stream is empty".into()))?;
    let vocab = Vocabulary::from_ranked(tokens)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.extend((0..SPECIALS.len() * dim).map(|_| rng.gen_range(-SPECIAL_INIT..=SPECIAL_INIT)));
    let table = EmbeddingTable::new(vocab.len(), dim, data)?;
    Ok((vocab, table))
}

/// Writes the ranked tokens and their rows in `load_vectors` format.
/// Values use the shortest representation that parses back exactly.
pub fn write_vectors<W: Write>(mut out: W, vocab: &Vocabulary, table: &EmbeddingTable) -> Result<()> {
    for id in 0..vocab.ranked_len() {
        write!(out, "{}", vocab.token(id))?;
        for v in table.row(id) {
            write!(out, " {v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Zipf term frequency of the token at `rank`.
pub fn zipf_tf(rank: usize, scale: f64) -> Result<f64> {
    if rank == 0 {
        return Err(Error::Argument("rank must be at least 1".into()));
    }
    Ok(scale / rank as f64)
}

pub fn idf_from_tf(tf: f64) -> f64 {
    1.0 / (1.0 + (1.0 + tf).ln())
}

/// `1 / (1 + ln(1 + tf))` with `tf = zipf_tf(rank, DEFAULT_TF_SCALE)`.
pub fn idf(rank: usize) -> Result<f64> {
    idf_with_scale(rank, DEFAULT_TF_SCALE)
}

pub fn idf_with_scale(rank: usize, scale: f64) -> Result<f64> {
    Ok(idf_from_tf(zipf_tf(rank, scale)?))
}

/// idf of a token under `vocab`; unranked and unknown tokens count as
/// `tf = 0` and get 1.0.
pub fn token_idf(vocab: &Vocabulary, token: &str, scale: f64) -> f64 {
    match vocab.rank(token) {
        Some(r) => idf_from_tf(scale / r as f64),
        None => 1.0,
    }
}

/// Row ids and idf weights for a memory entry. Unknown tokens map to UNK.
pub fn memory_weights<S: AsRef<str>>(
    tokens: &[S],
    vocab: &Vocabulary,
    scale: f64,
) -> (Vec<usize>, Vec<f64>) {
    tokens
        .iter()
        .map(|t| {
            let t = t.as_ref();
            (vocab.id(t), token_idf(vocab, t, scale))
        })
        .unzip()
}

/// `f(m) = sum_j idf_j * e_j` over the entry's tokens.
pub fn encode_memory<S: AsRef<str>>(
    tokens: &[S],
    vocab: &Vocabulary,
    table: &EmbeddingTable,
) -> Vec<f64> {
    let (ids, weights) = memory_weights(tokens, vocab, DEFAULT_TF_SCALE);
    let mut out = vec![0.0; table.dim()];
    for (id, w) in ids.into_iter().zip(weights) {
        for (o, e) in out.iter_mut().zip(table.row(id)) {
            *o += w * e;
        }
    }
    out
}

/// Unweighted sum of the embeddings of `tokens`; unknown tokens are skipped.
pub fn embed_sum<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, table: &EmbeddingTable) -> Vec<f64> {
    let mut out = vec![0.0; table.dim()];
    for t in tokens {
        if let Some(id) = vocab.get(t.as_ref()) {
            for (o, e) in out.iter_mut().zip(table.row(id)) {
                *o += e;
            }
        }
    }
    out
}
