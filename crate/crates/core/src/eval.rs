//! Automatic metrics, the with/without-context ablation report and
//! human-rating aggregation.
//!
//! Percentages (F1, hits@1) are reported on a 0–100 scale. Ranking ties go
//! to the lowest candidate index.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, MigrationMode, Utterance};
use crate::dataset::{build_examples, DialogExample, ModelInput};
use crate::models::{argmax, ModelKind, TrainedModel, DEFAULT_MAX_LEN};
use crate::{Error, Result};

/// Default candidate-set size.
pub const DEFAULT_CANDIDATES: usize = 12;

/// Multiset word-overlap F1 in [0, 1].
pub fn word_f1<S: AsRef<str>, T: AsRef<str>>(pred: &[S], gold: &[T]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for g in gold {
        *counts.entry(g.as_ref()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for p in pred {
        if let Some(c) = counts.get_mut(p.as_ref()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred.len() as f64;
    let r = overlap as f64 / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// `exp(Σ NLL / Σ (|gold| + 1))`: every gold token plus the end marker.
pub fn perplexity(model: &TrainedModel, examples: &[DialogExample]) -> Result<f64> {
    if !model.kind().is_generative() {
        return Err(Error::Unsupported("perplexity is undefined for retrieval models".into()));
    }
    if examples.is_empty() {
        return Err(Error::Argument("perplexity over an empty test set".into()));
    }
    let parts = examples
        .par_iter()
        .map(|e| Ok((model.nll(&e.input, &e.gold.tokens)?, e.gold.tokens.len() + 1)))
        .collect::<Result<Vec<(f64, usize)>>>()?;
    let (nll, count) = parts.iter().fold((0.0, 0usize), |(a, n), (l, c)| (a + l, n + c));
    Ok((nll / count as f64).exp())
}

/// A gold reply hidden among distractors.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub id: usize,
    pub input: ModelInput,
    pub candidates: Vec<Utterance>,
    pub gold_index: usize,
}

impl CandidateSet {
    pub fn gold(&self) -> &Utterance {
        &self.candidates[self.gold_index]
    }

    pub fn candidate_tokens(&self) -> Vec<Vec<String>> {
        self.candidates.iter().map(|u| u.tokens.clone()).collect()
    }
}

/// One set per example: its gold plus `n − 1` distinct distractor texts
/// drawn without replacement from the other golds, the gold at a seeded
/// position.
pub fn build_candidate_sets(examples: &[DialogExample], n: usize, seed: u64) -> Result<Vec<CandidateSet>> {
    if n < 2 {
        return Err(Error::Config("candidate sets need at least 2 members".into()));
    }
    let mut pool: Vec<&Utterance> = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for e in examples {
        seen.entry(e.gold.text.as_str()).or_insert_with(|| {
            pool.push(&e.gold);
            pool.len() - 1
        });
    }
    if pool.len() < n {
        return Err(Error::Config(format!(
            "{} distinct replies cannot fill candidate sets of {n}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(examples
        .iter()
        .enumerate()
        .map(|(id, e)| {
            let own = seen[e.gold.text.as_str()];
            // sample from the pool with the gold's slot removed
            let mut candidates: Vec<Utterance> = sample(&mut rng, pool.len() - 1, n - 1)
                .into_iter()
                .map(|i| pool[if i >= own { i + 1 } else { i }].clone())
                .collect();
            let gold_index = rng.gen_range(0..n);
            candidates.insert(gold_index, e.gold.clone());
            CandidateSet {
                id,
                input: e.input.clone(),
                candidates,
                gold_index,
            }
        })
        .collect())
}

/// Anything that scores the members of a candidate set (higher is better).
pub trait CandidateScorer: Sync {
    fn score(&self, set: &CandidateSet) -> Result<Vec<f64>>;
}

impl CandidateScorer for TrainedModel {
    fn score(&self, set: &CandidateSet) -> Result<Vec<f64>> {
        self.score_candidates(&set.input, &set.candidate_tokens())
    }
}

/// Uniform random scores, reproducible per (seed, set id).
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer {
    pub seed: u64,
}

impl CandidateScorer for RandomScorer {
    fn score(&self, set: &CandidateSet) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(set.id as u64);
        Ok((0..set.candidates.len()).map(|_| rng.gen()).collect())
    }
}

/// Index of the top-scored candidate, ties to the lowest index.
pub fn top_candidate(scorer: &dyn CandidateScorer, set: &CandidateSet) -> Result<usize> {
    let s = scorer.score(set)?;
    argmax(&s).ok_or_else(|| Error::Argument("empty candidate set".into()))
}

/// Percentage of sets whose top-scored candidate is the gold.
pub fn hits_at_1(scorer: &dyn CandidateScorer, sets: &[CandidateSet]) -> Result<f64> {
    if sets.is_empty() {
        return Err(Error::Argument("hits@1 over no candidate sets".into()));
    }
    let hits = sets
        .par_iter()
        .map(|s| Ok(usize::from(top_candidate(scorer, s)? == s.gold_index)))
        .collect::<Result<Vec<usize>>>()?;
    Ok(100.0 * hits.iter().sum::<usize>() as f64 / sets.len() as f64)
}

/// One line of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: ModelKind,
    pub condition: MigrationMode,
    pub f1: f64,
    pub perplexity: Option<f64>,
    pub hits_at_1: f64,
}

impl EvalRow {
    /// `{model, condition, f1, perplexity|null, hits_at_1}` on one line.
    pub fn to_record(&self) -> String {
        serde_json::to_string(self).expect("rows serialize")
    }
}

/// Evaluation of one trained model on a test corpus. Generative models
/// are scored on their greedy reply; Starspace on its top candidate.
pub fn evaluate(model: &TrainedModel, test: &Corpus, n: usize, seed: u64) -> Result<EvalRow> {
    let examples = build_examples(test, &model.example_config());
    if examples.is_empty() {
        return Err(Error::Argument("test corpus yields no examples".into()));
    }
    let sets = build_candidate_sets(&examples, n, seed)?;
    let hits = hits_at_1(model, &sets)?;
    let f1s = if model.kind().is_generative() {
        examples
            .par_iter()
            .map(|e| Ok(word_f1(&model.generate(&e.input, DEFAULT_MAX_LEN)?, &e.gold.tokens)))
            .collect::<Result<Vec<f64>>>()?
    } else {
        sets.par_iter()
            .map(|s| Ok(word_f1(&s.candidates[top_candidate(model, s)?].tokens, &s.gold().tokens)))
            .collect::<Result<Vec<f64>>>()?
    };
    let perplexity = match perplexity(model, &examples) {
        Ok(p) => Some(p),
        Err(Error::Unsupported(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalRow {
        model: model.kind(),
        condition: if model.config.use_context {
            MigrationMode::WithContext
        } else {
            MigrationMode::WithoutContext
        },
        f1: 100.0 * f1s.iter().sum::<f64>() / f1s.len() as f64,
        perplexity,
        hits_at_1: hits,
    })
}

/// Evaluates every model; one row per (model, condition).
pub fn ablation_report(models: &[&TrainedModel], test: &Corpus, n: usize, seed: u64) -> Result<Vec<EvalRow>> {
    models.iter().map(|m| evaluate(m, test, n, seed)).collect()
}

const NO_CONTEXT: &str = "No Migration Context";
const WITH_CONTEXT: &str = "Migration Context";

fn condition_header(c: MigrationMode) -> &'static str {
    match c {
        MigrationMode::WithoutContext => NO_CONTEXT,
        MigrationMode::WithContext => WITH_CONTEXT,
    }
}

/// Lays out `rows` as text tables: one line per cell row, columns separated
/// by ` | ` and padded to their widest entry.
fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{s:<w$}", w = widths[i]))
            .collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
    }
    out
}

/// The ablation table: a model column, then F1 / perplexity / hits@1 under
/// each condition. Retrieval perplexity renders as `-`; missing rows too.
pub fn render_eval_table(rows: &[EvalRow]) -> String {
    let mut models: Vec<ModelKind> = Vec::new();
    for r in rows {
        if !models.contains(&r.model) {
            models.push(r.model);
        }
    }
    let conditions = [MigrationMode::WithoutContext, MigrationMode::WithContext];
    let mut table = vec![
        vec!["Model".to_string(), condition_header(conditions[0]).into(), String::new(), String::new()],
        vec![String::new()],
    ];
    table[0].extend([condition_header(conditions[1]).to_string(), String::new(), String::new()]);
    for _ in conditions {
        table[1].extend(["F1".to_string(), "perplexity".into(), "hits@1".into()]);
    }
    for m in models {
        let mut line = vec![m.display_name().to_string()];
        for c in conditions {
            match rows.iter().find(|r| r.model == m && r.condition == c) {
                Some(r) => line.extend([
                    format!("{:.2}", r.f1),
                    r.perplexity.map_or("-".into(), |p| format!("{p:.2}")),
                    format!("{:.2}", r.hits_at_1),
                ]),
                None => line.extend(["-".to_string(), "-".into(), "-".into()]),
            }
        }
        table.push(line);
    }
    align(&table)
}

// ---------------------------------------------------------------------------
// Human ratings
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RaterRole {
    HumanVsModel,
    HumanVsHuman,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub session_id: String,
    pub model_id: String,
    pub condition: MigrationMode,
    pub role: RaterRole,
    pub fluency: u8,
    pub engagingness: u8,
    pub consistency: u8,
}

impl RatingRecord {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.scores() {
            if !(1..=5).contains(&v) {
                return Err(Error::Argument(format!("{name} must be between 1 and 5, got {v}")));
            }
        }
        Ok(())
    }

    pub fn scores(&self) -> [(&'static str, u8); 3] {
        [
            (MEASURES[0], self.fluency),
            (MEASURES[1], self.engagingness),
            (MEASURES[2], self.consistency),
        ]
    }

    /// Column group: "Human" for human partners, else the model id.
    pub fn group(&self) -> String {
        match self.role {
            RaterRole::HumanVsHuman => "Human".to_string(),
            RaterRole::HumanVsModel => self.model_id.clone(),
        }
    }
}

pub const MEASURES: [&str; 3] = ["Fluency", "Engagingness", "Consistency"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdKind {
    #[default]
    Population,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatingCell {
    pub group: String,
    pub condition: MigrationMode,
    pub measure: &'static str,
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
}

impl RatingCell {
    pub fn formatted(&self) -> String {
        format!("{:.2} ({:.2})", self.mean, self.sd)
    }
}

pub fn mean_sd(xs: &[f64], kind: SdKind) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    let denom = match kind {
        SdKind::Population => n,
        SdKind::Sample => n - 1.0,
    };
    let sd = if denom > 0.0 { (ss / denom).sqrt() } else { 0.0 };
    (mean, sd)
}

/// Mean and sd per (group, condition, measure). Groups sort with "Human"
/// first; conditions without context first. No records, no cells.
pub fn aggregate_ratings(records: &[RatingRecord], kind: SdKind) -> Vec<RatingCell> {
    let mut by: BTreeMap<(bool, String, bool), Vec<&RatingRecord>> = BTreeMap::new();
    for r in records {
        let group = r.group();
        by.entry((group != "Human", group, r.condition == MigrationMode::WithContext))
            .or_default()
            .push(r);
    }
    let mut cells = Vec::new();
    for ((_, group, with), rs) in by {
        for (m, measure) in MEASURES.iter().enumerate() {
            let xs: Vec<f64> = rs.iter().map(|r| r.scores()[m].1 as f64).collect();
            let (mean, sd) = mean_sd(&xs, kind);
            cells.push(RatingCell {
                group: group.clone(),
                condition: if with {
                    MigrationMode::WithContext
                } else {
                    MigrationMode::WithoutContext
                },
                measure,
                n: xs.len(),
                mean,
                sd,
            });
        }
    }
    cells
}

/// Measures as rows, (group, condition) pairs as columns, cells as
/// `mean (sd)`. Empty input renders an empty string.
pub fn render_human_eval(cells: &[RatingCell]) -> String {
    if cells.is_empty() {
        return String::new();
    }
    let mut columns: Vec<(String, MigrationMode)> = Vec::new();
    for c in cells {
        if !columns.contains(&(c.group.clone(), c.condition)) {
            columns.push((c.group.clone(), c.condition));
        }
    }
    let mut header = vec!["Model".to_string()];
    let mut sub = vec![String::new()];
    let mut last_group: Option<&str> = None;
    for (g, c) in &columns {
        header.push(if last_group == Some(g.as_str()) { String::new() } else { g.clone() });
        last_group = Some(g);
        sub.push(condition_header(*c).to_string());
    }
    let mut table = vec![header, sub];
    for m in MEASURES {
        let mut line = vec![m.to_string()];
        for (g, c) in &columns {
            let cell = cells.iter().find(|x| &x.group == g && x.condition == *c && x.measure == m);
            line.push(cell.map_or("-".into(), RatingCell::formatted));
        }
        table.push(line);
    }
    align(&table)
}

/// Writes one JSON record per row.
pub fn records(rows: &[EvalRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let _ = writeln!(out, "{}", r.to_record());
    }
    out
}
