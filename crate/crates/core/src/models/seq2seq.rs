use rand::Rng;

use super::{argmax, model_tokens};
use crate::autodiff::{Gradients, ParamId, ParameterSet, Tape, Tensor, Var};
use crate::dataset::ModelInput;
use crate::embeddings::{EmbeddingTable, Vocabulary, SPECIALS};
use crate::{Error, Result};

/// LSTM encoder/decoder over a shared token embedding.
///
/// Parameters: `emb` (|V| x d), `enc.w`/`enc.b`, `dec.w`/`dec.b` (LSTM,
/// input d, hidden K) and `out.w`/`out.b` (K -> |V| logits).
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq {
    pub(crate) params: ParameterSet,
    pub(crate) vocab: Vocabulary,
    pub(crate) emb: ParamId,
    enc_w: ParamId,
    enc_b: ParamId,
    pub(crate) dec_w: ParamId,
    pub(crate) dec_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Decoder input at one step, given the previous token id and the decoder
/// state before the step.
pub(crate) type StepInput<'a> = dyn Fn(&mut Tape, usize, Var) -> Result<Var> + 'a;

impl Seq2Seq {
    /// Fresh model with uniform(±`scale`) weights. With `pretrained`, the
    /// embedding rows are copied from the table (its width sets d).
    pub fn new<R: Rng>(
        vocab: Vocabulary,
        embed_dim: usize,
        hidden: usize,
        scale: f64,
        pretrained: Option<&EmbeddingTable>,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden == 0 || embed_dim == 0 {
            return Err(Error::Config("hidden_size and embed_dim must be positive".into()));
        }
        let v = vocab.len();
        let emb = match pretrained {
            Some(t) => {
                if t.rows() != v {
                    return Err(Error::Shape(format!(
                        "embedding table has {} rows for a vocabulary of {v}",
                        t.rows()
                    )));
                }
                Tensor::new(vec![v, t.dim()], t.data().to_vec())?
            }
            None => Tensor::uniform(vec![v, embed_dim], scale, rng),
        };
        let d = emb.shape()[1];
        let mut params = ParameterSet::new();
        let emb = params.add("emb", emb)?;
        let enc_w = params.add("enc.w", Tensor::uniform(vec![4 * hidden, d + hidden], scale, rng))?;
        let enc_b = params.add("enc.b", Tensor::uniform(vec![4 * hidden], scale, rng))?;
        let dec_w = params.add("dec.w", Tensor::uniform(vec![4 * hidden, d + hidden], scale, rng))?;
        let dec_b = params.add("dec.b", Tensor::uniform(vec![4 * hidden], scale, rng))?;
        let out_w = params.add("out.w", Tensor::uniform(vec![v, hidden], scale, rng))?;
        let out_b = params.add("out.b", Tensor::uniform(vec![v], scale, rng))?;
        Ok(Self {
            params,
            vocab,
            emb,
            enc_w,
            enc_b,
            dec_w,
            dec_b,
            out_w,
            out_b,
        })
    }

    /// Rebinds a model to parameters read from a checkpoint.
    pub fn from_parts(params: ParameterSet, vocab: Vocabulary) -> Result<Self> {
        let m = Self {
            emb: params.id("emb")?,
            enc_w: params.id("enc.w")?,
            enc_b: params.id("enc.b")?,
            dec_w: params.id("dec.w")?,
            dec_b: params.id("dec.b")?,
            out_w: params.id("out.w")?,
            out_b: params.id("out.b")?,
            params,
            vocab,
        };
        let (rows, _) = m.params.value(m.emb).dims2();
        let (out_rows, _) = m.params.value(m.out_w).dims2();
        if rows != m.vocab.len() || out_rows != m.vocab.len() {
            return Err(Error::Shape(format!(
                "parameters cover {rows} tokens, vocabulary has {}",
                m.vocab.len()
            )));
        }
        Ok(m)
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn hidden_size(&self) -> usize {
        self.params.value(self.dec_b).len() / 4
    }

    pub fn embed_dim(&self) -> usize {
        self.params.value(self.emb).dims2().1
    }

    /// Runs the encoder over `tokens` (BOS alone when empty) and returns its
    /// final `(h, c)`.
    pub(crate) fn encode(&self, tape: &mut Tape, tokens: &[String]) -> Result<(Var, Var)> {
        let k = self.hidden_size();
        let mut h = tape.input(vec![0.0; k]);
        let mut c = tape.input(vec![0.0; k]);
        let ids = if tokens.is_empty() {
            vec![self.vocab.bos()]
        } else {
            self.vocab.ids(tokens)
        };
        for id in ids {
            let x = tape.lookup(self.emb, id)?;
            (h, c) = tape.lstm_step(x, h, c, self.enc_w, self.enc_b)?;
        }
        Ok((h, c))
    }

    pub(crate) fn embed_input(&self, tape: &mut Tape, prev: usize, _h: Var) -> Result<Var> {
        tape.lookup(self.emb, prev)
    }

    pub(crate) fn logits(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        tape.linear(self.out_w, h, Some(self.out_b))
    }

    /// Teacher-forced decoder loss: inputs `[BOS] ++ gold`, targets
    /// `gold ++ [EOS]`, per-token NLL summed.
    pub(crate) fn decode_loss(
        &self,
        tape: &mut Tape,
        (mut h, mut c): (Var, Var),
        gold: &[usize],
        step_input: &StepInput,
    ) -> Result<Var> {
        let mut prev = self.vocab.bos();
        let mut total: Option<Var> = None;
        for &target in gold.iter().chain(std::iter::once(&self.vocab.eos())) {
            let x = step_input(tape, prev, h)?;
            (h, c) = tape.lstm_step(x, h, c, self.dec_w, self.dec_b)?;
            let z = self.logits(tape, h)?;
            let l = tape.softmax_xent(z, target)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
            prev = target;
        }
        Ok(total.expect("at least the EOS step"))
    }

    pub(crate) fn greedy(
        &self,
        tape: &mut Tape,
        (mut h, mut c): (Var, Var),
        max_len: usize,
        step_input: &StepInput,
    ) -> Result<Vec<String>> {
        if max_len == 0 {
            return Err(Error::Argument("max_len must be at least 1".into()));
        }
        let eos = self.vocab.eos();
        let first_special = self.vocab.len() - SPECIALS.len();
        let mut prev = self.vocab.bos();
        let mut out = Vec::new();
        while out.len() < max_len {
            let x = step_input(tape, prev, h)?;
            (h, c) = tape.lstm_step(x, h, c, self.dec_w, self.dec_b)?;
            let z = self.logits(tape, h)?;
            // specials are never emitted; EOS only ends a nonempty reply
            let mut scores = tape.value(z).to_vec();
            for (i, s) in scores.iter_mut().enumerate().skip(first_special) {
                if i != eos || out.is_empty() {
                    *s = f64::NEG_INFINITY;
                }
            }
            let next = argmax(&scores).expect("vocabulary is nonempty");
            if next == eos {
                break;
            }
            out.push(self.vocab.token(next).to_string());
            prev = next;
        }
        Ok(out)
    }

    fn forward(&self, tape: &mut Tape, input: &ModelInput, gold: &[String]) -> Result<Var> {
        let enc = self.encode(tape, &model_tokens(input))?;
        let gold = self.vocab.ids(gold);
        self.decode_loss(tape, enc, &gold, &|t, p, h| self.embed_input(t, p, h))
    }

    /// Summed NLL of `gold` followed by EOS.
    pub fn loss(&self, input: &ModelInput, gold: &[String]) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let l = self.forward(&mut tape, input, gold)?;
        Ok(tape.scalar(l))
    }

    pub fn loss_and_grads(&self, input: &ModelInput, gold: &[String]) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new(&self.params);
        let l = self.forward(&mut tape, input, gold)?;
        Ok((tape.scalar(l), tape.backward(l)?))
    }

    pub fn generate(&self, input: &ModelInput, max_len: usize) -> Result<Vec<String>> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode(&mut tape, &model_tokens(input))?;
        self.greedy(&mut tape, enc, max_len, &|t, p, h| self.embed_input(t, p, h))
    }

    /// Log-likelihood of each candidate, the encoder run once. With
    /// `normalize` the score is `-loss / |candidate|`.
    pub fn score_candidates(&self, input: &ModelInput, candidates: &[Vec<String>], normalize: bool) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let enc = self.encode(&mut tape, &model_tokens(input))?;
        candidates
            .iter()
            .map(|cand| {
                let ids = self.vocab.ids(cand);
                let l = self.decode_loss(&mut tape, enc, &ids, &|t, p, h| self.embed_input(t, p, h))?;
                Ok(candidate_score(tape.scalar(l), cand.len(), normalize))
            })
            .collect()
    }
}

pub(crate) fn candidate_score(loss: f64, len: usize, normalize: bool) -> f64 {
    if normalize {
        -loss / len.max(1) as f64
    } else {
        -loss
    }
}
