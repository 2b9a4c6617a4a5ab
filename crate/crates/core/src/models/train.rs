use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, ModelKind, ProfileMemory, Seq2Seq, Starspace, TrainedModel};
use crate::autodiff::{Algorithm, Gradients, OptimizerState, ParameterSet, DEFAULT_CLIP};
use crate::corpus::{Corpus, Speaker};
use crate::dataset::{build_examples, DialogExample, ExampleConfig, DEFAULT_HISTORY_WINDOW};
use crate::embeddings::{EmbeddingTable, Vocabulary};
use crate::{Error, Result};

/// Training hyperparameters. Serialized into checkpoints; the flat
/// `key=value` form is handled by [`TrainConfig::set`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub hidden_size: usize,
    pub embed_dim: usize,
    pub use_context: bool,
    pub history_window: usize,
    pub margin: f64,
    pub negatives: usize,
    pub ngram_order: usize,
    pub optimizer: Algorithm,
    pub clip: Option<f64>,
    pub init_scale: f64,
    pub trainable_embeddings: bool,
    pub length_normalize: bool,
    pub query_markers: bool,
    /// Train only on golds with one of these MR acts.
    pub acts: Option<Vec<String>>,
    /// Train only on golds from this speaker.
    pub speaker: Option<Speaker>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Seq2Seq,
            epochs: 10,
            lr: 1e-3,
            seed: 0,
            hidden_size: 64,
            embed_dim: 64,
            use_context: false,
            history_window: DEFAULT_HISTORY_WINDOW,
            margin: 0.2,
            negatives: 10,
            ngram_order: 1,
            optimizer: Algorithm::Adam,
            clip: Some(DEFAULT_CLIP),
            init_scale: 0.08,
            trainable_embeddings: true,
            length_normalize: true,
            query_markers: true,
            acts: None,
            speaker: None,
        }
    }
}

impl TrainConfig {
    /// Keys accepted by [`TrainConfig::set`], with a one-line description.
    pub const KEYS: [(&'static str, &'static str); 19] = [
        ("model", "seq2seq | profile_memory | starspace"),
        ("epochs", "passes over the training examples"),
        ("lr", "learning rate"),
        ("seed", "initialization and shuffling seed"),
        ("hidden_size", "LSTM hidden size K"),
        ("embed_dim", "token or feature embedding width d"),
        ("use_context", "condition on the migration context (true/false)"),
        ("history_window", "prior utterances visible to the model"),
        ("margin", "Starspace hinge margin"),
        ("negatives", "Starspace negatives per positive"),
        ("ngram_order", "Starspace feature n-gram order"),
        ("optimizer", "adam | sgd"),
        ("clip", "gradient-norm clip, or none"),
        ("init_scale", "uniform initialization half-width"),
        ("trainable_embeddings", "update pretrained embeddings (true/false)"),
        ("length_normalize", "length-normalize candidate log-likelihoods"),
        ("query_markers", "Starspace queries include context markers"),
        ("acts", "comma-separated MR acts to train on, or all"),
        ("speaker", "agent | user | any"),
    ];

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
            }
        }
        let v = value.trim();
        match key {
            "model" => self.model = ModelKind::parse(v).map_err(|e| Error::Config(e.to_string()))?,
            "epochs" => self.epochs = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "hidden_size" => self.hidden_size = num(key, v)?,
            "embed_dim" => self.embed_dim = num(key, v)?,
            "use_context" => self.use_context = flag(key, v)?,
            "history_window" => self.history_window = num(key, v)?,
            "margin" => self.margin = num(key, v)?,
            "negatives" => self.negatives = num(key, v)?,
            "ngram_order" => self.ngram_order = num(key, v)?,
            "optimizer" => self.optimizer = Algorithm::parse(v)?,
            "clip" => self.clip = if v == "none" { None } else { Some(num(key, v)?) },
            "init_scale" => self.init_scale = num(key, v)?,
            "trainable_embeddings" => self.trainable_embeddings = flag(key, v)?,
            "length_normalize" => self.length_normalize = flag(key, v)?,
            "query_markers" => self.query_markers = flag(key, v)?,
            "acts" => {
                self.acts = if v == "all" || v.is_empty() {
                    None
                } else {
                    Some(v.split(',').map(|a| a.trim().to_string()).collect())
                }
            }
            "speaker" => {
                self.speaker = match v {
                    "any" => None,
                    s => Some(
                        Speaker::parse(s)
                            .ok_or_else(|| Error::Config(format!("speaker: expected agent, user or any, got {s:?}")))?,
                    ),
                }
            }
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.hidden_size == 0 || self.embed_dim == 0 {
            return bad("hidden_size and embed_dim must be positive");
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return bad("margin must be positive");
        }
        if self.negatives == 0 {
            return bad("negatives must be at least 1");
        }
        if self.ngram_order == 0 {
            return bad("ngram_order must be at least 1");
        }
        if self.clip.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return bad("clip must be positive");
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return bad("init_scale must be non-negative");
        }
        Ok(())
    }

    pub fn example_config(&self) -> ExampleConfig {
        ExampleConfig {
            history_window: self.history_window,
            use_context: self.use_context,
            acts: self.acts.clone(),
            speaker: self.speaker,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub examples: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: TrainedModel,
    pub history: Vec<EpochStats>,
}

/// Trains a model of `cfg.model` on every example of `corpus`, one
/// optimizer step per example in a seeded shuffled order.
pub fn train(
    corpus: &Corpus,
    cfg: &TrainConfig,
    pretrained: Option<(&Vocabulary, &EmbeddingTable)>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Argument("training corpus is empty".into()));
    }
    let examples = build_examples(corpus, &cfg.example_config());
    if examples.is_empty() {
        return Err(Error::Argument("no training examples after filtering".into()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);

    let (model, history) = match cfg.model {
        ModelKind::Seq2Seq | ModelKind::ProfileMemory => {
            let (vocab, table) = match pretrained {
                Some((v, t)) => (v.clone(), Some(t)),
                None => (Vocabulary::from_corpus(corpus), None),
            };
            let (d, k, s) = (cfg.embed_dim, cfg.hidden_size, cfg.init_scale);
            let mut model = if cfg.model == ModelKind::Seq2Seq {
                Model::Seq2Seq(Seq2Seq::new(vocab, d, k, s, table, &mut init_rng)?)
            } else {
                Model::ProfileMemory(ProfileMemory::new(vocab, d, k, s, table, &mut init_rng)?)
            };
            if table.is_some() && !cfg.trainable_embeddings {
                let ps = model.params_mut();
                let emb = ps.id("emb")?;
                ps.set_frozen(emb, true);
            }
            let history = run_epochs(&mut model, cfg, examples.len(), &mut order_rng, |m, i| {
                let ex = &examples[i];
                match m {
                    Model::Seq2Seq(s) => s.loss_and_grads(&ex.input, &ex.gold.tokens),
                    Model::ProfileMemory(p) => p.loss_and_grads(&ex.input, &ex.gold.tokens),
                    Model::Starspace(_) => unreachable!(),
                }
            })?;
            (model, history)
        }
        ModelKind::Starspace => train_starspace(cfg, &examples, &mut init_rng, &mut order_rng)?,
    };
    Ok(TrainOutput {
        model: TrainedModel {
            config: cfg.clone(),
            model,
        },
        history,
    })
}

fn run_epochs<F>(
    model: &mut Model,
    cfg: &TrainConfig,
    n: usize,
    rng: &mut ChaCha8Rng,
    mut step: F,
) -> Result<Vec<EpochStats>>
where
    F: FnMut(&Model, usize) -> Result<(f64, Gradients)>,
{
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr, model.params()).with_clip(cfg.clip);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for &i in &order {
            let (loss, grads) = step(model, i)?;
            apply(model.params_mut(), &mut opt, &grads);
            total += loss;
        }
        history.push(EpochStats {
            epoch,
            mean_loss: total / n as f64,
            examples: n,
        });
    }
    Ok(history)
}

fn apply(params: &mut ParameterSet, opt: &mut OptimizerState, grads: &Gradients) {
    params.accumulate(grads);
    opt.step(params);
}

fn train_starspace(
    cfg: &TrainConfig,
    examples: &[DialogExample],
    init_rng: &mut ChaCha8Rng,
    order_rng: &mut ChaCha8Rng,
) -> Result<(Model, Vec<EpochStats>)> {
    // distinct replies, in first-seen order
    let mut reply_index: HashMap<&[String], usize> = HashMap::new();
    let mut replies: Vec<Vec<String>> = Vec::new();
    let gold_ids: Vec<usize> = examples
        .iter()
        .map(|e| {
            *reply_index.entry(e.gold.tokens.as_slice()).or_insert_with(|| {
                replies.push(e.gold.tokens.clone());
                replies.len() - 1
            })
        })
        .collect();
    if replies.len() < 2 {
        return Err(Error::Config("Starspace training needs at least two distinct replies".into()));
    }

    let mut probe = Starspace::new(Vocabulary::from_ranked(Vec::<String>::new())?, 1, 0.0, cfg.ngram_order, init_rng)?;
    probe.query_markers = cfg.query_markers;
    let queries: Vec<Vec<String>> = examples.iter().map(|e| probe.query_tokens(&e.input)).collect();
    let features = Starspace::feature_vocabulary(
        queries.iter().chain(replies.iter()).map(Vec::as_slice),
        cfg.ngram_order,
    );
    let mut model = Starspace::new(features, cfg.embed_dim, cfg.init_scale, cfg.ngram_order, init_rng)?;
    model.margin = cfg.margin;
    model.negatives = cfg.negatives;
    model.query_markers = cfg.query_markers;
    model.set_responses(replies.clone());

    let mut wrapped = Model::Starspace(model);
    let mut neg_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    neg_rng.set_stream(2);
    let history = run_epochs(&mut wrapped, cfg, examples.len(), order_rng, |m, i| {
            let Model::Starspace(s) = m else { unreachable!() };
            let negs: Vec<&[String]> = (0..cfg.negatives)
                .map(|_| loop {
                    let j = gold_ids[neg_rng.gen_range(0..gold_ids.len())];
                    if j != gold_ids[i] {
                        break replies[j].as_slice();
                    }
                })
                .collect();
            s.loss_and_grads(&queries[i], &examples[i].gold.tokens, &negs)
    })?;
    Ok((wrapped, history))
}
