//! Next-utterance models.
//!
//! - [`Seq2Seq`]: LSTM encoder/decoder; the migration context is serialized
//!   with marker tokens and prepended to the history.
//! - [`ProfileMemory`]: the same encoder/decoder whose decoder inputs are
//!   rewritten by attention over idf-weighted context memories.
//! - [`Starspace`]: n-gram embedding retrieval ranked by cosine similarity.
//!
//! [`train`] builds any of them from a corpus; [`TrainedModel`] is the
//! common handle used by evaluation, the CLI and the service.

mod memory;
mod seq2seq;
mod starspace;
mod train;
mod trained;

use serde::Serialize;

use crate::corpus::{MigrationContext, PrivacyLabel};
use crate::dataset::ModelInput;
use crate::embeddings::{label_marker, setting_marker, SEP};
use crate::{Error, Result};

pub use memory::{Attention, ProfileMemory};
pub use seq2seq::Seq2Seq;
pub use starspace::{ngram_features, Starspace};
pub use train::{train, EpochStats, TrainConfig, TrainOutput};
pub use trained::{Model, TrainedModel};

/// Default cap on generated reply length.
pub const DEFAULT_MAX_LEN: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[serde(rename = "seq2seq")]
    Seq2Seq,
    ProfileMemory,
    Starspace,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Seq2Seq, ModelKind::ProfileMemory, ModelKind::Starspace];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "seq2seq" => Ok(Self::Seq2Seq),
            "profile_memory" | "pmn" => Ok(Self::ProfileMemory),
            "starspace" => Ok(Self::Starspace),
            other => Err(Error::Argument(format!(
                "unknown model kind {other:?} (expected seq2seq, profile_memory or starspace)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Seq2Seq => "seq2seq",
            ModelKind::ProfileMemory => "profile_memory",
            ModelKind::Starspace => "starspace",
        }
    }

    /// Row label used in evaluation tables.
    pub fn display_name(self) -> &'static str {
        match self {
            ModelKind::Seq2Seq => "Sequence-to-Sequence",
            ModelKind::ProfileMemory => "GPMV",
            ModelKind::Starspace => "Starspace",
        }
    }

    pub fn is_generative(self) -> bool {
        self != ModelKind::Starspace
    }
}

/// `[setting marker] ++ for each entry: [label marker] ++ tokens ++ [<sep>]
/// ++ input`.
pub fn prepend_context<S: AsRef<str>>(ctx: &MigrationContext, input: &[S]) -> Vec<String> {
    prepend_context_traced(ctx, input)
        .into_iter()
        .map(|t| t.token)
        .collect()
}

/// Where a conditioning token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Origin {
    Marker,
    Context { label: PrivacyLabel },
    History { label: Option<PrivacyLabel> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TracedToken {
    pub token: String,
    pub origin: Origin,
}

impl TracedToken {
    fn new(token: impl Into<String>, origin: Origin) -> Self {
        Self {
            token: token.into(),
            origin,
        }
    }

    /// True for tokens copied from, or marking, a P-labeled utterance.
    pub fn is_personal(&self) -> bool {
        match self.origin {
            Origin::Marker => self.token == crate::embeddings::CTX_P,
            Origin::Context { label } => label == PrivacyLabel::P,
            Origin::History { label } => label == Some(PrivacyLabel::P),
        }
    }
}

fn prepend_context_traced<S: AsRef<str>>(ctx: &MigrationContext, input: &[S]) -> Vec<TracedToken> {
    let mut out = vec![TracedToken::new(setting_marker(ctx.target_setting), Origin::Marker)];
    for m in &ctx.entries {
        let label = m.label.expect("context entries are labeled");
        out.push(TracedToken::new(label_marker(label), Origin::Marker));
        for t in &m.tokens {
            out.push(TracedToken::new(t.clone(), Origin::Context { label }));
        }
        out.push(TracedToken::new(SEP, Origin::Marker));
    }
    out.extend(
        input
            .iter()
            .map(|t| TracedToken::new(t.as_ref(), Origin::History { label: None })),
    );
    out
}

fn history_traced(input: &ModelInput) -> Vec<TracedToken> {
    input
        .history
        .iter()
        .flat_map(|u| {
            u.tokens
                .iter()
                .map(move |t| TracedToken::new(t.clone(), Origin::History { label: u.label }))
        })
        .collect()
}

/// The token sequence fed to a token-sequence model: the history, with the
/// serialized context prepended when present.
pub(crate) fn sequence_trace(input: &ModelInput) -> Vec<TracedToken> {
    let history = history_traced(input);
    match &input.context {
        None => history,
        Some(ctx) => {
            let mut out = prepend_context_traced::<&str>(ctx, &[]);
            out.extend(history);
            out
        }
    }
}

/// Encoder input of the sequence-to-sequence model.
pub fn model_tokens(input: &ModelInput) -> Vec<String> {
    sequence_trace(input).into_iter().map(|t| t.token).collect()
}

/// Every token a model of `kind` conditions on for `input`, with origins.
/// For the memory network this is the encoder input followed by the memory
/// entries.
pub fn conditioning_trace(kind: ModelKind, input: &ModelInput) -> Vec<TracedToken> {
    match kind {
        ModelKind::Seq2Seq | ModelKind::Starspace => sequence_trace(input),
        ModelKind::ProfileMemory => {
            let mut out = Vec::new();
            if let Some(ctx) = &input.context {
                out.push(TracedToken::new(setting_marker(ctx.target_setting), Origin::Marker));
            }
            out.extend(history_traced(input));
            if let Some(ctx) = &input.context {
                for m in &ctx.entries {
                    let label = m.label.expect("context entries are labeled");
                    out.extend(m.tokens.iter().map(|t| TracedToken::new(t.clone(), Origin::Context { label })));
                }
            }
            out
        }
    }
}

/// Argmax with ties going to the lowest index.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}
