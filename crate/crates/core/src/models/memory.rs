use std::cell::RefCell;

use rand::Rng;

use super::seq2seq::{candidate_score, Seq2Seq};
use super::model_tokens;
use crate::autodiff::{Gradients, ParamId, ParameterSet, Tape, Tensor, Var};
use crate::corpus::MigrationContext;
use crate::dataset::ModelInput;
use crate::embeddings::{memory_weights, EmbeddingTable, Vocabulary, DEFAULT_TF_SCALE};
use crate::{Error, Result};

/// Nodes of one attention read.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    /// Weights over memory rows.
    pub a: Var,
    /// Weighted memory summary `aᵀF`.
    pub x: Var,
    /// Decoder input `tanh(W_x [x_prev; x])`.
    pub x_hat: Var,
}

/// Sequence-to-sequence model whose decoder reads idf-weighted context
/// memories through attention.
///
/// Extra parameters live in the base model's set: `pmn.w_a` (K x K),
/// `pmn.w_x` (d x 2K) and `pmn.in_proj` (K x d). Memory rows are
/// `in_proj · Σ idf_j e_j`. With no context entries the model is exactly
/// the base model.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileMemory {
    base: Seq2Seq,
    w_a: ParamId,
    w_x: ParamId,
    in_proj: ParamId,
    tf_scale: f64,
}

impl ProfileMemory {
    pub fn new<R: Rng>(
        vocab: Vocabulary,
        embed_dim: usize,
        hidden: usize,
        scale: f64,
        pretrained: Option<&EmbeddingTable>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut base = Seq2Seq::new(vocab, embed_dim, hidden, scale, pretrained, rng)?;
        let d = base.embed_dim();
        let ps = base.params_mut();
        let w_a = ps.add("pmn.w_a", Tensor::uniform(vec![hidden, hidden], scale, rng))?;
        let w_x = ps.add("pmn.w_x", Tensor::uniform(vec![d, 2 * hidden], scale, rng))?;
        let in_proj = ps.add("pmn.in_proj", Tensor::uniform(vec![hidden, d], scale, rng))?;
        Ok(Self {
            base,
            w_a,
            w_x,
            in_proj,
            tf_scale: DEFAULT_TF_SCALE,
        })
    }

    pub fn from_parts(params: ParameterSet, vocab: Vocabulary) -> Result<Self> {
        let w_a = params.id("pmn.w_a")?;
        let w_x = params.id("pmn.w_x")?;
        let in_proj = params.id("pmn.in_proj")?;
        Ok(Self {
            base: Seq2Seq::from_parts(params, vocab)?,
            w_a,
            w_x,
            in_proj,
            tf_scale: DEFAULT_TF_SCALE,
        })
    }

    /// The underlying encoder/decoder; it shares every parameter.
    pub fn base(&self) -> &Seq2Seq {
        &self.base
    }

    pub fn params(&self) -> &ParameterSet {
        self.base.params()
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        self.base.params_mut()
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.base.vocab()
    }

    pub fn w_a(&self) -> ParamId {
        self.w_a
    }

    pub fn w_x(&self) -> ParamId {
        self.w_x
    }

    pub fn in_proj(&self) -> ParamId {
        self.in_proj
    }

    /// Stacks the projected memory of every context entry into F (M x K).
    pub fn memories(&self, tape: &mut Tape, ctx: &MigrationContext) -> Result<Var> {
        let rows = ctx
            .entries
            .iter()
            .map(|m| {
                let (ids, w) = memory_weights(&m.tokens, self.vocab(), self.tf_scale);
                let e = tape.weighted_rows(self.base.emb, &ids, &w)?;
                tape.linear(self.in_proj, e, None)
            })
            .collect::<Result<Vec<Var>>>()?;
        tape.stack(&rows)
    }

    /// `a = softmax(F W_a h)`, `x = aᵀF`, `x̂ = tanh(W_x [x_prev; x])`.
    /// F with no rows is a state error: callers fall back to the base model.
    pub fn attend(&self, tape: &mut Tape, f: Var, h: Var, x_prev: Var) -> Result<Attention> {
        if tape.dims(f).0 == 0 {
            return Err(Error::State("attention over an empty memory".into()));
        }
        let q = tape.linear(self.w_a, h, None)?;
        let logits = tape.matvec(f, q)?;
        let a = tape.softmax(logits);
        let x = tape.mat_t_vec(f, a)?;
        let cat = tape.concat(&[x_prev, x]);
        let pre = tape.linear(self.w_x, cat, None)?;
        let x_hat = tape.tanh(pre);
        Ok(Attention { a, x, x_hat })
    }

    fn attended_input(&self, tape: &mut Tape, f: Var, prev: usize, h: Var, log: Option<&RefCell<Vec<Var>>>) -> Result<Var> {
        let e = tape.lookup(self.base.emb, prev)?;
        let xp = tape.linear(self.in_proj, e, None)?;
        let att = self.attend(tape, f, h, xp)?;
        if let Some(log) = log {
            log.borrow_mut().push(att.a);
        }
        Ok(att.x_hat)
    }

    /// Context with entries, or `None` when the base model applies.
    fn memory_context(input: &ModelInput) -> Option<&MigrationContext> {
        input.context.as_ref().filter(|c| !c.is_empty())
    }

    /// Encoder input: setting marker and history; entries go to memory.
    fn encoder_tokens(input: &ModelInput, ctx: &MigrationContext) -> Vec<String> {
        let stripped = ModelInput::new(
            input.history.clone(),
            Some(MigrationContext::empty(ctx.target_setting, ctx.mode)),
        );
        model_tokens(&stripped)
    }

    fn forward(
        &self,
        tape: &mut Tape,
        input: &ModelInput,
        ctx: &MigrationContext,
        gold: &[String],
        log: Option<&RefCell<Vec<Var>>>,
    ) -> Result<Var> {
        let enc = self.base.encode(tape, &Self::encoder_tokens(input, ctx))?;
        let f = self.memories(tape, ctx)?;
        let gold = self.vocab().ids(gold);
        self.base
            .decode_loss(tape, enc, &gold, &|t, p, h| self.attended_input(t, f, p, h, log))
    }

    pub fn loss(&self, input: &ModelInput, gold: &[String]) -> Result<f64> {
        let Some(ctx) = Self::memory_context(input) else {
            return self.base.loss(input, gold);
        };
        let mut tape = Tape::new(self.params());
        let l = self.forward(&mut tape, input, ctx, gold, None)?;
        Ok(tape.scalar(l))
    }

    pub fn loss_and_grads(&self, input: &ModelInput, gold: &[String]) -> Result<(f64, Gradients)> {
        let Some(ctx) = Self::memory_context(input) else {
            return self.base.loss_and_grads(input, gold);
        };
        let mut tape = Tape::new(self.params());
        let l = self.forward(&mut tape, input, ctx, gold, None)?;
        Ok((tape.scalar(l), tape.backward(l)?))
    }

    /// Attention weights at every decoder step of a teacher-forced pass.
    pub fn attention_weights(&self, input: &ModelInput, gold: &[String]) -> Result<Vec<Vec<f64>>> {
        let Some(ctx) = Self::memory_context(input) else {
            return Ok(Vec::new());
        };
        let mut tape = Tape::new(self.params());
        let log = RefCell::new(Vec::new());
        self.forward(&mut tape, input, ctx, gold, Some(&log))?;
        let weights = log.into_inner().into_iter().map(|a| tape.value(a).to_vec()).collect();
        Ok(weights)
    }

    pub fn generate(&self, input: &ModelInput, max_len: usize) -> Result<Vec<String>> {
        let Some(ctx) = Self::memory_context(input) else {
            return self.base.generate(input, max_len);
        };
        let mut tape = Tape::new(self.params());
        let enc = self.base.encode(&mut tape, &Self::encoder_tokens(input, ctx))?;
        let f = self.memories(&mut tape, ctx)?;
        self.base
            .greedy(&mut tape, enc, max_len, &|t, p, h| self.attended_input(t, f, p, h, None))
    }

    pub fn score_candidates(&self, input: &ModelInput, candidates: &[Vec<String>], normalize: bool) -> Result<Vec<f64>> {
        let Some(ctx) = Self::memory_context(input) else {
            return self.base.score_candidates(input, candidates, normalize);
        };
        let mut tape = Tape::new(self.params());
        let enc = self.base.encode(&mut tape, &Self::encoder_tokens(input, ctx))?;
        let f = self.memories(&mut tape, ctx)?;
        candidates
            .iter()
            .map(|cand| {
                let ids = self.vocab().ids(cand);
                let l = self
                    .base
                    .decode_loss(&mut tape, enc, &ids, &|t, p, h| self.attended_input(t, f, p, h, None))?;
                Ok(candidate_score(tape.scalar(l), cand.len(), normalize))
            })
            .collect()
    }
}
