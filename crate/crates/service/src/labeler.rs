//! Assigns P/NP labels to free text typed during a session.
//!
//! Live utterances arrive unlabeled, but context filtering needs labels. A
//! multinomial naive Bayes model with add-one smoothing is fitted on the
//! labeled utterances of a corpus; by default the synthetic health-center
//! corpus.

use std::collections::HashMap;

use migdial_core::corpus::{generate_synthetic_corpus, Corpus, GeneratorConfig, PrivacyLabel};
use migdial_core::textstats::tokenize;

use crate::ServiceError;

#[derive(Debug, Clone)]
pub struct PrivacyLabeler {
    log_prior: [f64; 2],
    counts: [HashMap<String, f64>; 2],
    totals: [f64; 2],
    vocab: usize,
}

fn slot(l: PrivacyLabel) -> usize {
    match l {
        PrivacyLabel::P => 0,
        PrivacyLabel::NP => 1,
    }
}

impl PrivacyLabeler {
    pub fn fit(corpus: &Corpus) -> Result<Self, ServiceError> {
        let mut docs = [0.0f64; 2];
        let mut counts: [HashMap<String, f64>; 2] = Default::default();
        let mut totals = [0.0; 2];
        for u in corpus.utterances() {
            let Some(l) = u.label else { continue };
            let k = slot(l);
            docs[k] += 1.0;
            for t in &u.tokens {
                *counts[k].entry(t.clone()).or_default() += 1.0;
                totals[k] += 1.0;
            }
        }
        if docs.iter().any(|&d| d == 0.0) {
            return Err(ServiceError::Internal("labeler needs both P and NP examples".into()));
        }
        let n = docs[0] + docs[1];
        let vocab = counts[0].keys().chain(counts[1].keys()).collect::<std::collections::HashSet<_>>().len();
        Ok(Self { log_prior: [(docs[0] / n).ln(), (docs[1] / n).ln()], counts, totals, vocab })
    }

    pub fn health_center() -> Result<Self, ServiceError> {
        let corpus = generate_synthetic_corpus(&GeneratorConfig::new(200, 0))
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        Self::fit(&corpus)
    }

    /// Log-odds of P over NP.
    pub fn log_odds(&self, text: &str) -> f64 {
        let mut s = [self.log_prior[0], self.log_prior[1]];
        for t in tokenize(text) {
            for (k, sk) in s.iter_mut().enumerate() {
                let c = self.counts[k].get(&t).copied().unwrap_or(0.0);
                *sk += ((c + 1.0) / (self.totals[k] + self.vocab as f64 + 1.0)).ln();
            }
        }
        s[0] - s[1]
    }

    /// Ties go to P, the safer label: it is withheld from public scenes.
    pub fn label(&self, text: &str) -> PrivacyLabel {
        if self.log_odds(text) >= 0.0 {
            PrivacyLabel::P
        } else {
            PrivacyLabel::NP
        }
    }
}
