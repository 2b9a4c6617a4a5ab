use std::collections::HashMap;

use rand::Rng;

use super::{argmax, sequence_trace};
use crate::autodiff::{Gradients, ParamId, ParameterSet, Tape, Tensor, Var};
use crate::dataset::ModelInput;
use crate::embeddings::{Vocabulary, SPECIALS};
use crate::{Error, Result};

/// Every contiguous k-gram for k = 1..=`order`; k-grams join with `_`.
pub fn ngram_features<S: AsRef<str>>(tokens: &[S], order: usize) -> Vec<String> {
    let mut out = Vec::new();
    for k in 1..=order {
        for w in tokens.windows(k) {
            out.push(w.iter().map(AsRef::as_ref).collect::<Vec<_>>().join("_"));
        }
    }
    out
}

/// Supervised-embedding retrieval. Queries and candidates are bags of
/// n-gram features; similarity is the cosine of the summed feature
/// embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Starspace {
    params: ParameterSet,
    features: Vocabulary,
    emb: ParamId,
    pub order: usize,
    pub margin: f64,
    pub negatives: usize,
    /// Whether context markers count as query features.
    pub query_markers: bool,
    /// Candidate replies used by [`Starspace::generate`].
    responses: Vec<Vec<String>>,
}

impl Starspace {
    /// Feature dictionary from the training texts, most frequent first.
    pub fn feature_vocabulary<'a, I>(texts: I, order: usize) -> Vocabulary
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for f in ngram_features(t, order) {
                *counts.entry(f).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(f, _)| !SPECIALS.contains(&f.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Vocabulary::from_ranked(ranked.into_iter().map(|(f, _)| f)).expect("counted features are unique")
    }

    pub fn new<R: Rng>(features: Vocabulary, dim: usize, scale: f64, order: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 || order == 0 {
            return Err(Error::Config("embed_dim and ngram_order must be positive".into()));
        }
        let mut params = ParameterSet::new();
        let emb = params.add("emb", Tensor::uniform(vec![features.len(), dim], scale, rng))?;
        Ok(Self {
            params,
            features,
            emb,
            order,
            margin: 0.2,
            negatives: 10,
            query_markers: true,
            responses: Vec::new(),
        })
    }

    pub fn from_parts(params: ParameterSet, features: Vocabulary, order: usize) -> Result<Self> {
        let emb = params.id("emb")?;
        if params.value(emb).dims2().0 != features.len() {
            return Err(Error::Shape("feature embedding rows do not match the dictionary".into()));
        }
        Ok(Self {
            params,
            features,
            emb,
            order,
            margin: 0.2,
            negatives: 10,
            query_markers: true,
            responses: Vec::new(),
        })
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn features(&self) -> &Vocabulary {
        &self.features
    }

    pub fn emb(&self) -> ParamId {
        self.emb
    }

    pub fn responses(&self) -> &[Vec<String>] {
        &self.responses
    }

    pub fn set_responses(&mut self, responses: Vec<Vec<String>>) {
        self.responses = responses;
    }

    /// Dictionary ids of a token sequence's features. Unknown unigrams map
    /// to `<unk>`; unknown longer n-grams are dropped.
    pub fn feature_ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        let mut ids: Vec<usize> = tokens.iter().map(|t| self.features.id(t.as_ref())).collect();
        for f in ngram_features(tokens, self.order).into_iter().skip(tokens.len()) {
            if let Some(i) = self.features.get(&f) {
                ids.push(i);
            }
        }
        ids
    }

    /// Query-side tokens for an input.
    pub fn query_tokens(&self, input: &ModelInput) -> Vec<String> {
        let trace = sequence_trace(input);
        trace
            .into_iter()
            .filter(|t| self.query_markers || !SPECIALS.contains(&t.token.as_str()))
            .map(|t| t.token)
            .collect()
    }

    fn bag(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        tape.weighted_rows(self.emb, ids, &vec![1.0; ids.len()])
    }

    fn bag_value(&self, ids: &[usize]) -> Vec<f64> {
        let t = self.params.value(self.emb);
        let mut out = vec![0.0; t.dims2().1];
        for &i in ids {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        out
    }

    /// Cosine of the summed feature embeddings; 0 for an empty side.
    pub fn sim<S: AsRef<str>, T: AsRef<str>>(&self, query: &[S], candidate: &[T]) -> f64 {
        cosine(&self.bag_value(&self.feature_ids(query)), &self.bag_value(&self.feature_ids(candidate)))
    }

    /// `Σ_neg max(0, μ − sim(q, pos) + sim(q, neg))` and its gradients.
    pub fn loss_and_grads<S: AsRef<str>>(
        &self,
        query: &[S],
        positive: &[S],
        negatives: &[&[S]],
    ) -> Result<(f64, Gradients)> {
        if negatives.is_empty() {
            return Err(Error::Argument("at least one negative is required".into()));
        }
        let mut tape = Tape::new(&self.params);
        let q = self.bag(&mut tape, &self.feature_ids(query))?;
        let p = self.bag(&mut tape, &self.feature_ids(positive))?;
        let sp = tape.cosine(q, p)?;
        let mut terms = Vec::with_capacity(negatives.len());
        for n in negatives {
            let nv = self.bag(&mut tape, &self.feature_ids(n))?;
            let sn = tape.cosine(q, nv)?;
            let d = tape.sub(sn, sp)?;
            let d = tape.add_scalar(d, self.margin);
            terms.push(tape.relu(d));
        }
        let all = tape.concat(&terms);
        let loss = tape.sum(all);
        Ok((tape.scalar(loss), tape.backward(loss)?))
    }

    pub fn score_candidates(&self, input: &ModelInput, candidates: &[Vec<String>]) -> Vec<f64> {
        let q = self.bag_value(&self.feature_ids(&self.query_tokens(input)));
        candidates
            .iter()
            .map(|c| cosine(&q, &self.bag_value(&self.feature_ids(c))))
            .collect()
    }

    /// The best-ranked stored response.
    pub fn generate(&self, input: &ModelInput) -> Result<Vec<String>> {
        let scores = self.score_candidates(input, &self.responses);
        argmax(&scores)
            .map(|i| self.responses[i].clone())
            .ok_or_else(|| Error::State("the model has no stored responses".into()))
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}
