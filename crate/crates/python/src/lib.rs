//! Python bindings: corpora, training, generation and evaluation.
//!
//! ```python
//! import migdial
//! train = migdial.Corpus.generate(40, seed=1)
//! model = migdial.Model.train(train, model="seq2seq", epochs=2, use_context=True)
//! model.reply(["hi , how are you ?"], context=[("i support the hawks", "NP")], setting="public")
//! ```

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use migdial_core::corpus::{
    admissible, descriptive_stats, generate_synthetic_corpus, parse_corpus, Corpus, GeneratorConfig, MigrationContext,
    MigrationMode, PrivacyLabel, Setting, Speaker, Strictness, TemplateSet, Utterance,
};
use migdial_core::dataset::ModelInput;
use migdial_core::eval::{evaluate, render_eval_table, word_f1, EvalRow, DEFAULT_CANDIDATES};
use migdial_core::models::{train, TrainConfig, TrainedModel, DEFAULT_MAX_LEN};
use migdial_core::textstats::{self, lexical_report, Wordlist, DEFAULT_SEGMENT_LENGTH};
use migdial_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn rows(rows: Vec<(&'static str, String)>) -> Vec<(String, String)> {
    rows.into_iter().map(|(l, v)| (l.to_string(), v)).collect()
}

/// A validated dialog corpus.
#[pyclass(name = "Corpus", module = "migdial", frozen)]
struct PyCorpus {
    inner: Corpus,
}

#[pymethods]
impl PyCorpus {
    /// Synthetic corpus; `templates` is `health_center` or `context_recall`.
    #[staticmethod]
    #[pyo3(signature = (n_dialogs, seed=0, templates="health_center"))]
    fn generate(n_dialogs: usize, seed: u64, templates: &str) -> PyResult<Self> {
        let t = TemplateSet::by_name(templates).map_err(py_err)?;
        let inner = generate_synthetic_corpus(&GeneratorConfig::new(n_dialogs, seed).with_templates(t)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        let inner = parse_corpus(text.as_bytes(), Strictness::Lenient).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }

    fn to_jsonl(&self) -> String {
        self.inner.to_jsonl()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn dialog_ids(&self) -> Vec<String> {
        self.inner.dialogs.iter().map(|d| d.id.clone()).collect()
    }

    /// Descriptive statistics as `(label, value)` rows.
    fn stats(&self) -> Vec<(String, String)> {
        rows(descriptive_stats(&self.inner).rows())
    }

    #[pyo3(signature = (segment_length=DEFAULT_SEGMENT_LENGTH))]
    fn lexstats(&self, segment_length: usize) -> PyResult<Vec<(String, String)>> {
        let r = lexical_report(&self.inner, segment_length, &Wordlist::builtin()).map_err(py_err)?;
        Ok(rows(r.rows()))
    }
}

fn parse_setting(s: &str) -> PyResult<Setting> {
    Setting::parse(s).ok_or_else(|| PyValueError::new_err(format!("unknown setting {s:?}")))
}

fn parse_label(s: &str) -> PyResult<PrivacyLabel> {
    PrivacyLabel::parse(s).ok_or_else(|| PyValueError::new_err(format!("unknown privacy label {s:?}")))
}

fn eval_dict<'py>(py: Python<'py>, row: &EvalRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("model", row.model.as_str())?;
    d.set_item("condition", row.condition.as_str())?;
    d.set_item("f1", row.f1)?;
    d.set_item("perplexity", row.perplexity)?;
    d.set_item("hits_at_1", row.hits_at_1)?;
    Ok(d)
}

/// A trained model of any kind.
#[pyclass(name = "Model", module = "migdial", frozen)]
struct PyModel {
    inner: TrainedModel,
}

#[pymethods]
impl PyModel {
    /// Trains on `corpus`. Keyword arguments are training keys such as
    /// `model`, `epochs`, `use_context` or `hidden_size`.
    #[staticmethod]
    #[pyo3(signature = (corpus, **options))]
    fn train(py: Python<'_>, corpus: &PyCorpus, options: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = TrainConfig::default();
        if let Some(opts) = options {
            for (k, v) in opts.iter() {
                let key: String = k.extract()?;
                let value = match v.extract::<bool>() {
                    Ok(b) => b.to_string(),
                    Err(_) => v.str()?.to_string(),
                };
                cfg.set(&key, &value).map_err(py_err)?;
            }
        }
        let out = py.detach(|| train(&corpus.inner, &cfg, None)).map_err(py_err)?;
        Ok(Self { inner: out.model })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: TrainedModel::load(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().as_str()
    }

    #[getter]
    fn use_context(&self) -> bool {
        self.inner.config.use_context
    }

    /// Reply to `history` (user utterances, oldest first). `context` holds
    /// `(text, label)` pairs from earlier scenes; entries that may not
    /// appear in `setting` are dropped before the model sees them.
    #[pyo3(signature = (history, context=None, setting="private", max_len=DEFAULT_MAX_LEN))]
    fn reply(
        &self,
        history: Vec<String>,
        context: Option<Vec<(String, String)>>,
        setting: &str,
        max_len: usize,
    ) -> PyResult<String> {
        let input = self.input(history, context, setting)?;
        Ok(self.inner.generate(&input, max_len).map_err(py_err)?.join(" "))
    }

    /// Scores for each candidate reply; higher is better.
    #[pyo3(signature = (history, candidates, context=None, setting="private"))]
    fn score(
        &self,
        history: Vec<String>,
        candidates: Vec<String>,
        context: Option<Vec<(String, String)>>,
        setting: &str,
    ) -> PyResult<Vec<f64>> {
        let input = self.input(history, context, setting)?;
        let cands: Vec<Vec<String>> = candidates.iter().map(|c| textstats::tokenize(c)).collect();
        self.inner.score_candidates(&input, &cands).map_err(py_err)
    }

    /// F1, perplexity (None for Starspace) and hits@1 on a test corpus.
    #[pyo3(signature = (test, candidates=DEFAULT_CANDIDATES, seed=0))]
    fn evaluate<'py>(&self, py: Python<'py>, test: &PyCorpus, candidates: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let row = py.detach(|| evaluate(&self.inner, &test.inner, candidates, seed)).map_err(py_err)?;
        eval_dict(py, &row)
    }
}

impl PyModel {
    fn input(&self, history: Vec<String>, context: Option<Vec<(String, String)>>, setting: &str) -> PyResult<ModelInput> {
        let target = parse_setting(setting)?;
        let utt = |text: &str, label| Utterance::new(Speaker::User, text, label, None).map_err(py_err);
        let history = history.iter().map(|t| utt(t, None)).collect::<PyResult<Vec<_>>>()?;
        let context = if self.inner.config.use_context {
            let mut entries = Vec::new();
            for (text, label) in context.unwrap_or_default() {
                let label = parse_label(&label)?;
                if admissible(Some(label), target, MigrationMode::WithContext) {
                    entries.push(utt(&text, Some(label))?);
                }
            }
            Some(MigrationContext { entries, target_setting: target, mode: MigrationMode::WithContext })
        } else {
            None
        };
        Ok(ModelInput::new(history, context))
    }
}

/// Evaluates each model on `test` and renders the ablation table.
#[pyfunction]
#[pyo3(signature = (models, test, candidates=DEFAULT_CANDIDATES, seed=0))]
fn eval_table(py: Python<'_>, models: Vec<PyRef<'_, PyModel>>, test: &PyCorpus, candidates: usize, seed: u64) -> PyResult<String> {
    let trained: Vec<TrainedModel> = models.iter().map(|m| m.inner.clone()).collect();
    let rows = py
        .detach(|| trained.iter().map(|m| evaluate(m, &test.inner, candidates, seed)).collect::<Result<Vec<_>, _>>())
        .map_err(py_err)?;
    Ok(render_eval_table(&rows))
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    textstats::tokenize(text)
}

/// Unigram F1 between two texts, in [0, 1].
#[pyfunction]
fn f1(prediction: &str, gold: &str) -> f64 {
    word_f1(&textstats::tokenize(prediction), &textstats::tokenize(gold))
}

#[pyfunction]
fn ttr(tokens: Vec<String>) -> f64 {
    textstats::ttr(&tokens)
}

#[pyfunction]
#[pyo3(signature = (tokens, segment_length=DEFAULT_SEGMENT_LENGTH))]
fn msttr(tokens: Vec<String>, segment_length: usize) -> PyResult<f64> {
    textstats::msttr(&tokens, segment_length).map_err(py_err)
}

#[pymodule]
fn migdial(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(eval_table, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(f1, m)?)?;
    m.add_function(wrap_pyfunction!(ttr, m)?)?;
    m.add_function(wrap_pyfunction!(msttr, m)?)?;
    Ok(())
}
