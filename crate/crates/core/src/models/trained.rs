use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde_json::{json, Value};

use super::{conditioning_trace, ModelKind, ProfileMemory, Seq2Seq, Starspace, TracedToken, TrainConfig};
use crate::autodiff::{read_checkpoint, write_checkpoint, Checkpoint, ParameterSet};
use crate::dataset::{ExampleConfig, ModelInput};
use crate::embeddings::Vocabulary;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Seq2Seq(Seq2Seq),
    ProfileMemory(ProfileMemory),
    Starspace(Starspace),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Seq2Seq(_) => ModelKind::Seq2Seq,
            Model::ProfileMemory(_) => ModelKind::ProfileMemory,
            Model::Starspace(_) => ModelKind::Starspace,
        }
    }

    pub fn params(&self) -> &ParameterSet {
        match self {
            Model::Seq2Seq(m) => m.params(),
            Model::ProfileMemory(m) => m.params(),
            Model::Starspace(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        match self {
            Model::Seq2Seq(m) => m.params_mut(),
            Model::ProfileMemory(m) => m.params_mut(),
            Model::Starspace(m) => m.params_mut(),
        }
    }

    /// Token (or feature) dictionary.
    pub fn vocab(&self) -> &Vocabulary {
        match self {
            Model::Seq2Seq(m) => m.vocab(),
            Model::ProfileMemory(m) => m.vocab(),
            Model::Starspace(m) => m.features(),
        }
    }
}

/// A trained model with the configuration it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub model: Model,
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }

    pub fn params(&self) -> &ParameterSet {
        self.model.params()
    }

    /// How examples must be built for this model.
    pub fn example_config(&self) -> ExampleConfig {
        self.config.example_config()
    }

    /// Higher is better. Generative models score by (length-normalized)
    /// log-likelihood, Starspace by cosine similarity.
    pub fn score_candidates(&self, input: &ModelInput, candidates: &[Vec<String>]) -> Result<Vec<f64>> {
        let norm = self.config.length_normalize;
        match &self.model {
            Model::Seq2Seq(m) => m.score_candidates(input, candidates, norm),
            Model::ProfileMemory(m) => m.score_candidates(input, candidates, norm),
            Model::Starspace(m) => Ok(m.score_candidates(input, candidates)),
        }
    }

    /// Greedy reply for generative models; the top stored response for
    /// Starspace.
    pub fn generate(&self, input: &ModelInput, max_len: usize) -> Result<Vec<String>> {
        match &self.model {
            Model::Seq2Seq(m) => m.generate(input, max_len),
            Model::ProfileMemory(m) => m.generate(input, max_len),
            Model::Starspace(m) => m.generate(input),
        }
    }

    /// Summed NLL of `gold` plus EOS.
    pub fn nll(&self, input: &ModelInput, gold: &[String]) -> Result<f64> {
        match &self.model {
            Model::Seq2Seq(m) => m.loss(input, gold),
            Model::ProfileMemory(m) => m.loss(input, gold),
            Model::Starspace(_) => Err(Error::Unsupported("perplexity is undefined for retrieval models".into())),
        }
    }

    /// Every token the model conditions on for `input`.
    pub fn conditioning_trace(&self, input: &ModelInput) -> Vec<TracedToken> {
        let mut trace = conditioning_trace(self.kind(), input);
        if let Model::Starspace(m) = &self.model {
            if !m.query_markers {
                trace.retain(|t| !crate::embeddings::SPECIALS.contains(&t.token.as_str()));
            }
        }
        trace
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let extras = match &self.model {
            Model::Starspace(m) => json!({ "responses": m.responses() }),
            _ => Value::Null,
        };
        Ok(Checkpoint {
            kind: self.kind().as_str().to_string(),
            config: serde_json::to_value(&self.config).map_err(|e| Error::Format(e.to_string()))?,
            vocab: self.model.vocab().tokens().to_vec(),
            extras,
            params: self.params().clone(),
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let kind = ModelKind::parse(&ck.kind).map_err(|_| Error::Format(format!("unknown model kind {:?}", ck.kind)))?;
        let config: TrainConfig =
            serde_json::from_value(ck.config).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        if config.model != kind {
            return Err(Error::Format("checkpoint kind disagrees with its config".into()));
        }
        let vocab = Vocabulary::from_full_list(ck.vocab)?;
        let model = match kind {
            ModelKind::Seq2Seq => Model::Seq2Seq(Seq2Seq::from_parts(ck.params, vocab)?),
            ModelKind::ProfileMemory => Model::ProfileMemory(ProfileMemory::from_parts(ck.params, vocab)?),
            ModelKind::Starspace => {
                let mut m = Starspace::from_parts(ck.params, vocab, config.ngram_order)?;
                m.margin = config.margin;
                m.negatives = config.negatives;
                m.query_markers = config.query_markers;
                let responses: Vec<Vec<String>> = serde_json::from_value(ck.extras["responses"].clone())
                    .map_err(|e| Error::Format(format!("checkpoint responses: {e}")))?;
                m.set_responses(responses);
                Model::Starspace(m)
            }
        };
        Ok(Self { config, model })
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        write_checkpoint(out, &self.to_checkpoint()?)
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self> {
        Self::from_checkpoint(read_checkpoint(input)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}
