use std::collections::HashMap;
use std::fmt;

use serde::Serialize;

use super::{Corpus, MeaningRepresentation};
use crate::textstats::tokenize;

/// A mean with the observed minimum and maximum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanRange {
    pub mean: f64,
    pub min: usize,
    pub max: usize,
}

impl fmt::Display for MeanRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ({}-{})", self.mean, self.min, self.max)
    }
}

/// Corpus-level descriptive statistics. MR-dependent fields are `None` when
/// no utterance carries an MR; sentence fields are `None` for an empty
/// corpus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DescriptiveStats {
    pub instances: usize,
    pub dialogs: usize,
    pub mrs: usize,
    pub refs_per_mr: Option<MeanRange>,
    pub words_per_mr: Option<f64>,
    pub slots_per_mr: Option<f64>,
    pub sentences_per_ref: Option<MeanRange>,
    pub words_per_sentence: Option<f64>,
}

/// Splits on runs of `.`, `!`, `?` and keeps spans that contain a token.
/// Text without any such span is a single sentence.
pub(crate) fn sentences(text: &str) -> Vec<Vec<String>> {
    let spans: Vec<Vec<String>> = text
        .split(['.', '!', '?'])
        .map(tokenize)
        .filter(|t| !t.is_empty())
        .collect();
    if spans.is_empty() {
        vec![tokenize(text)]
    } else {
        spans
    }
}

pub fn descriptive_stats(c: &Corpus) -> DescriptiveStats {
    let mut refs: HashMap<&MeaningRepresentation, usize> = HashMap::new();
    let mut mr_words = 0usize;
    let mut with_mr = 0usize;
    let mut instances = 0usize;
    let (mut sent_total, mut sent_min, mut sent_max) = (0usize, usize::MAX, 0usize);
    let mut sentence_tokens = 0usize;

    for u in c.utterances() {
        instances += 1;
        if let Some(mr) = &u.mr {
            *refs.entry(mr).or_default() += 1;
            mr_words += u.tokens.len();
            with_mr += 1;
        }
        let sents = sentences(&u.text);
        sent_total += sents.len();
        sent_min = sent_min.min(sents.len());
        sent_max = sent_max.max(sents.len());
        sentence_tokens += sents.iter().map(Vec::len).sum::<usize>();
    }

    let mrs = refs.len();
    let (refs_per_mr, words_per_mr, slots_per_mr) = if mrs == 0 {
        (None, None, None)
    } else {
        let slot_sum: usize = refs.keys().map(|m| m.slots.len()).sum();
        (
            Some(MeanRange {
                mean: with_mr as f64 / mrs as f64,
                min: *refs.values().min().unwrap(),
                max: *refs.values().max().unwrap(),
            }),
            Some(mr_words as f64 / with_mr as f64),
            Some(slot_sum as f64 / mrs as f64),
        )
    };
    let sentences_per_ref = (instances > 0).then(|| MeanRange {
        mean: sent_total as f64 / instances as f64,
        min: sent_min,
        max: sent_max,
    });
    let words_per_sentence = (sent_total > 0).then(|| sentence_tokens as f64 / sent_total as f64);

    DescriptiveStats {
        instances,
        dialogs: c.len(),
        mrs,
        refs_per_mr,
        words_per_mr,
        slots_per_mr,
        sentences_per_ref,
        words_per_sentence,
    }
}

impl DescriptiveStats {
    /// Row labels and rendered values, in display order. Absent values
    /// render as `-`.
    pub fn rows(&self) -> Vec<(&'static str, String)> {
        fn opt<T: fmt::Display>(v: Option<T>) -> String {
            v.map_or_else(|| "-".to_string(), |v| v.to_string())
        }
        let two = |v: Option<f64>| v.map(|x| format!("{x:.2}"));
        vec![
            ("Number of instances", self.instances.to_string()),
            ("Number of dialogs", self.dialogs.to_string()),
            ("Number of MRs", self.mrs.to_string()),
            ("Refs/MR", opt(self.refs_per_mr)),
            ("Words/MR", opt(two(self.words_per_mr))),
            ("Slots/MR", opt(two(self.slots_per_mr))),
            ("Sentences/Refs", opt(self.sentences_per_ref)),
            ("Words/Sentence", opt(two(self.words_per_sentence))),
        ]
    }
}

impl fmt::Display for DescriptiveStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (label, value) in self.rows() {
            writeln!(f, "{label:<21}{value}")?;
        }
        Ok(())
    }
}
