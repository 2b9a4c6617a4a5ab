//! Tokenization and lexical-richness metrics (TTR, MSTTR, lexical
//! sophistication).
//!
//! Punctuation tokens count as both tokens and types. Callers that want
//! word-only statistics should filter the token stream first.

use std::collections::HashSet;
use std::fmt;
use std::io::BufRead;

use serde::Serialize;

use crate::corpus::Corpus;
use crate::{Error, Result};

/// Default segment length for MSTTR.
pub const DEFAULT_SEGMENT_LENGTH: usize = 100;

const BUILTIN_WORDLIST: &str = include_str!("../fixtures/common_words.txt");

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric()
}

/// Lowercases `text`, splits on whitespace and peels leading/trailing
/// punctuation runs off each chunk into their own tokens.
///
/// A chunk made only of punctuation stays a single token, so `".."` is one
/// token rather than two.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let chars: Vec<char> = chunk.to_lowercase().chars().collect();
        let lead = chars.iter().take_while(|c| is_punct(**c)).count();
        if lead == chars.len() {
            out.push(chars.iter().collect());
            continue;
        }
        let trail = chars.iter().rev().take_while(|c| is_punct(**c)).count();
        let end = chars.len() - trail;
        if lead > 0 {
            out.push(chars[..lead].iter().collect());
        }
        out.push(chars[lead..end].iter().collect());
        if trail > 0 {
            out.push(chars[end..].iter().collect());
        }
    }
    out
}

/// Type-token ratio: distinct tokens over total tokens, 0 for empty input.
pub fn ttr<S: AsRef<str>>(tokens: &[S]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let types: HashSet<&str> = tokens.iter().map(AsRef::as_ref).collect();
    types.len() as f64 / tokens.len() as f64
}

/// Mean segmental TTR over consecutive, non-overlapping segments of
/// `segment_length` tokens. The trailing partial segment is discarded.
pub fn msttr<S: AsRef<str>>(tokens: &[S], segment_length: usize) -> Result<f64> {
    if segment_length == 0 {
        return Err(Error::Argument("segment length must be at least 1".into()));
    }
    let segments: Vec<f64> = tokens.chunks_exact(segment_length).map(ttr).collect();
    if segments.is_empty() {
        return Ok(0.0);
    }
    Ok(segments.iter().sum::<f64>() / segments.len() as f64)
}

/// A set of common tokens; types outside it count as sophisticated.
#[derive(Debug, Clone)]
pub struct Wordlist {
    words: HashSet<String>,
}

impl Wordlist {
    /// One token per line; blank lines are skipped, entries are lowercased.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut words = HashSet::new();
        for line in reader.lines() {
            let line = line?;
            let word = line.trim();
            if !word.is_empty() {
                words.insert(word.to_lowercase());
            }
        }
        Self::from_words(words)
    }

    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let words: HashSet<String> = words.into_iter().map(Into::into).collect();
        if words.is_empty() {
            return Err(Error::Format("wordlist is empty".into()));
        }
        Ok(Self { words })
    }

    /// The bundled list of the 2,000 most frequent English tokens.
    pub fn builtin() -> Self {
        Self::from_reader(BUILTIN_WORDLIST.as_bytes()).expect("bundled wordlist is valid")
    }

    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(token)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Share of distinct types that are not in the common wordlist.
pub fn lexical_sophistication<S: AsRef<str>>(tokens: &[S], wordlist: &Wordlist) -> f64 {
    let types: HashSet<&str> = tokens.iter().map(AsRef::as_ref).collect();
    if types.is_empty() {
        return 0.0;
    }
    let rare = types.iter().filter(|t| !wordlist.contains(t)).count();
    rare as f64 / types.len() as f64
}

/// Lexical-richness summary of a token stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LexicalReport {
    pub tokens: usize,
    pub types: usize,
    pub ttr: f64,
    pub msttr: f64,
    pub ls: f64,
    pub segment_length: usize,
}

impl LexicalReport {
    pub fn from_tokens<S: AsRef<str>>(
        tokens: &[S],
        segment_length: usize,
        wordlist: &Wordlist,
    ) -> Result<Self> {
        let types: HashSet<&str> = tokens.iter().map(AsRef::as_ref).collect();
        Ok(Self {
            tokens: tokens.len(),
            types: types.len(),
            ttr: ttr(tokens),
            msttr: msttr(tokens, segment_length)?,
            ls: lexical_sophistication(tokens, wordlist),
            segment_length,
        })
    }

    /// Row labels and rendered values, in display order.
    pub fn rows(&self) -> Vec<(&'static str, String)> {
        vec![
            ("Tokens", self.tokens.to_string()),
            ("Types", self.types.to_string()),
            ("LS", format!("{:.2}", self.ls)),
            ("TTR", format!("{:.2}", self.ttr)),
            ("MSTR", format!("{:.2}", self.msttr)),
        ]
    }
}

impl fmt::Display for LexicalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (label, value) in self.rows() {
            writeln!(f, "{label:<8}{value}")?;
        }
        Ok(())
    }
}

/// Concatenates every utterance's tokens in corpus order and reports on the
/// result.
pub fn lexical_report(
    corpus: &Corpus,
    segment_length: usize,
    wordlist: &Wordlist,
) -> Result<LexicalReport> {
    let tokens: Vec<&str> = corpus
        .utterances()
        .flat_map(|u| u.tokens.iter().map(String::as_str))
        .collect();
    LexicalReport::from_tokens(&tokens, segment_length, wordlist)
}
