//! The `migdial` command line.
//!
//! Exit codes are a stable contract: 0 success, 1 usage or configuration
//! error, 2 data error (unreadable or malformed input), 3 runtime failure.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::json;

use migdial_core::corpus::{
    descriptive_stats, generate_synthetic_corpus, parse_corpus, validate_dialog, Corpus, GeneratorConfig, Severity,
    Strictness, TemplateSet, Utterance,
};
use migdial_core::dataset::{build_examples, ModelInput};
use migdial_core::embeddings::load_vectors;
use migdial_core::eval::{
    aggregate_ratings, build_candidate_sets, records, render_eval_table, render_human_eval, EvalRow,
};
use migdial_core::models::{train, TrainedModel};
use migdial_core::textstats::{lexical_report, Wordlist};
use migdial_core::Error;
use migdial_service::{App, ServiceConfig, SessionStore};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: EXIT_RUNTIME, message: message.into() }
    }

    /// Classifies a library error met while reading `what`.
    fn reading(what: &Path, e: Error) -> Self {
        Self::data(format!("{}: {e}", what.display()))
    }

    fn from_core(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Argument(_) => Self::usage(e.to_string()),
            Error::Parse { .. } | Error::Schema(_) | Error::Format(_) => Self::data(e.to_string()),
            _ => Self::runtime(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "migdial", version, about = "Migration-context dialog models: corpus, training, evaluation and serving")]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Seed for generation, initialization, shuffling and candidate sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus as JSON lines.
    GenCorpus {
        /// Number of dialogs (key n_dialogs).
        #[arg(long)]
        n: Option<String>,
        /// Template set (key templates).
        #[arg(long)]
        templates: Option<String>,
    },
    /// Descriptive statistics of a corpus.
    Stats { corpus: PathBuf },
    /// Lexical richness of a corpus.
    Lexstats {
        corpus: PathBuf,
        #[arg(long)]
        segment_length: Option<String>,
        #[arg(long)]
        wordlist: Option<PathBuf>,
    },
    /// Train a model; writes a checkpoint to --out and a loss history.
    Train {
        corpus: PathBuf,
        /// seq2seq | profile_memory | starspace (key model).
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        epochs: Option<String>,
        /// Condition on the migration context (key use_context).
        #[arg(long)]
        use_context: Option<String>,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Evaluate checkpoints on a test corpus and print the ablation table.
    Eval {
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        /// Candidates per hits@1 set (key candidates_n).
        #[arg(long)]
        candidates: Option<String>,
    },
    /// Rank candidate replies with a checkpoint.
    Rank {
        checkpoint: PathBuf,
        /// Prior utterance (repeatable, oldest first).
        #[arg(long = "history-line", value_name = "TEXT")]
        history: Vec<String>,
        /// Candidate reply (repeatable). Without candidates, sets are built from --test.
        #[arg(long = "candidate", value_name = "TEXT")]
        candidates: Vec<String>,
        #[arg(long)]
        test: Option<PathBuf>,
        /// Candidate sets printed from --test.
        #[arg(long, default_value_t = 10)]
        limit: usize,
    },
    /// Run the human-evaluation chat service.
    Serve {
        /// Model to serve as ID=CHECKPOINT (repeatable).
        #[arg(long = "model", value_name = "ID=PATH")]
        models: Vec<String>,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        store: Option<PathBuf>,
        /// Expose the audit route.
        #[arg(long)]
        debug: bool,
    },
    /// Render stored results.
    Report {
        #[command(subcommand)]
        what: ReportKind,
    },
}

#[derive(Debug, Subcommand)]
enum ReportKind {
    /// The ablation table from eval records.
    Eval { records: PathBuf },
    /// The human-evaluation table from a session log.
    HumanEval { store: PathBuf },
}

fn command_with_keys() -> clap::Command {
    let keys = config::key_help();
    let mut cmd = Cli::command().after_help(keys.clone());
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for n in names {
        let keys = keys.clone();
        cmd = cmd.mut_subcommand(n, move |s| s.after_help(keys));
    }
    cmd
}

/// Parses `args`, runs the command, reports errors on `err`, and returns
/// the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command_with_keys().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return EXIT_USAGE;
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

fn configure(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(f) = &cli.config {
        cfg.load_file(f)?;
    }
    for pair in &cli.set {
        cfg.set_pair(pair)?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    let mut flag = |key: &str, v: &Option<String>| v.as_ref().map_or(Ok(()), |v| cfg.set(key, v));
    match &cli.command {
        Command::GenCorpus { n, templates } => {
            flag("n_dialogs", n)?;
            flag("templates", templates)?;
        }
        Command::Lexstats { segment_length, wordlist, .. } => {
            flag("segment_length", segment_length)?;
            if let Some(w) = wordlist {
                cfg.wordlist = Some(w.clone());
            }
        }
        Command::Train { model, epochs, use_context, history, .. } => {
            flag("model", model)?;
            flag("epochs", epochs)?;
            flag("use_context", use_context)?;
            if let Some(h) = history {
                cfg.history = Some(h.clone());
            }
        }
        Command::Eval { test, candidates, .. } => {
            flag("candidates_n", candidates)?;
            if let Some(t) = test {
                cfg.test = Some(t.clone());
            }
        }
        Command::Rank { test, .. } => {
            if let Some(t) = test {
                cfg.test = Some(t.clone());
            }
        }
        Command::Serve { models, listen, store, debug } => {
            flag("listen", listen)?;
            for m in models {
                cfg.add_model(m)?;
            }
            if let Some(s) = store {
                cfg.store = Some(s.clone());
            }
            if *debug {
                cfg.debug = true;
            }
        }
        Command::Stats { .. } | Command::Report { .. } => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = configure(&cli)?;
    match &cli.command {
        Command::GenCorpus { .. } => gen_corpus(&cfg, out),
        Command::Stats { corpus } => stats(&cfg, corpus, cli.json, out),
        Command::Lexstats { corpus, .. } => lexstats(&cfg, corpus, cli.json, out),
        Command::Train { corpus, .. } => train_cmd(&cfg, corpus, cli.json, out),
        Command::Eval { checkpoints, .. } => eval_cmd(&cfg, checkpoints, cli.json, out),
        Command::Rank { checkpoint, history, candidates, limit, .. } => {
            rank(&cfg, checkpoint, history, candidates, *limit, cli.json, out)
        }
        Command::Serve { .. } => serve(&cfg, out),
        Command::Report { what } => report(&cfg, what, cli.json, out),
    }
}

/// Writes `text` to the configured output file, or to `out`.
fn emit(cfg: &RunConfig, text: &str, out: &mut dyn Write) -> Result<()> {
    match &cfg.out {
        Some(p) => write_file(p, text.as_bytes()),
        None => out.write_all(text.as_bytes()).map_err(|e| CliError::runtime(format!("writing output: {e}"))),
    }
}

fn write_file(p: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(p, bytes).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", p.display())))
}

fn open(p: &Path) -> Result<BufReader<File>> {
    File::open(p).map(BufReader::new).map_err(|e| CliError::data(format!("cannot open {}: {e}", p.display())))
}

pub fn read_corpus(p: &Path) -> Result<Corpus> {
    parse_corpus(open(p)?, Strictness::Lenient).map_err(|e| CliError::reading(p, e))
}

fn load_checkpoint(p: &Path) -> Result<TrainedModel> {
    TrainedModel::read(open(p)?).map_err(|e| CliError::reading(p, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("values serialize");
    s.push('\n');
    s
}

fn rows_text(rows: &[(&str, String)]) -> String {
    let w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
    rows.iter().map(|(l, v)| format!("{l:<w$}  {v}\n")).collect()
}

fn rows_json(rows: &[(&str, String)]) -> String {
    let rows: Vec<_> = rows.iter().map(|(l, v)| json!({"label": l, "value": v})).collect();
    to_json(&rows)
}

fn gen_corpus(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let templates = TemplateSet::by_name(&cfg.templates).map_err(CliError::from_core)?;
    let gc = GeneratorConfig::new(cfg.n_dialogs, cfg.train.seed).with_templates(templates);
    let corpus = generate_synthetic_corpus(&gc).map_err(CliError::from_core)?;
    for d in &corpus.dialogs {
        if let Some(v) = validate_dialog(d, true).into_iter().find(|v| v.severity == Severity::Error) {
            return Err(CliError::runtime(format!("generated dialog {} is invalid: {v:?}", d.id)));
        }
    }
    emit(cfg, &corpus.to_jsonl(), out)
}

fn stats(cfg: &RunConfig, corpus: &Path, json: bool, out: &mut dyn Write) -> Result<()> {
    let rows = descriptive_stats(&read_corpus(corpus)?).rows();
    emit(cfg, &if json { rows_json(&rows) } else { rows_text(&rows) }, out)
}

fn lexstats(cfg: &RunConfig, corpus: &Path, json: bool, out: &mut dyn Write) -> Result<()> {
    let c = read_corpus(corpus)?;
    let wordlist = match &cfg.wordlist {
        Some(p) => Wordlist::from_reader(open(p)?).map_err(|e| CliError::reading(p, e))?,
        None => Wordlist::builtin(),
    };
    let report = lexical_report(&c, cfg.segment_length, &wordlist).map_err(CliError::from_core)?;
    let rows = report.rows();
    emit(cfg, &if json { rows_json(&rows) } else { rows_text(&rows) }, out)
}

fn history_path(cfg: &RunConfig, checkpoint: &Path) -> PathBuf {
    cfg.history.clone().unwrap_or_else(|| {
        let mut s = checkpoint.as_os_str().to_owned();
        s.push(".history.jsonl");
        PathBuf::from(s)
    })
}

fn train_cmd(cfg: &RunConfig, corpus: &Path, json: bool, out: &mut dyn Write) -> Result<()> {
    let checkpoint = cfg.out.as_ref().ok_or_else(|| CliError::usage("train needs --out for the checkpoint"))?;
    let c = read_corpus(corpus)?;
    let pretrained = match &cfg.embeddings {
        Some(p) => Some(load_vectors(open(p)?, cfg.vocab_limit, cfg.train.seed).map_err(|e| CliError::reading(p, e))?),
        None => None,
    };
    let result =
        train(&c, &cfg.train, pretrained.as_ref().map(|(v, t)| (v, t))).map_err(CliError::from_core)?;
    let mut buf = Vec::new();
    result.model.write(&mut buf).map_err(|e| CliError::runtime(e.to_string()))?;
    write_file(checkpoint, &buf)?;
    let history: String = result
        .history
        .iter()
        .map(|e| serde_json::to_string(e).expect("epoch stats serialize") + "\n")
        .collect();
    let hpath = history_path(cfg, checkpoint);
    write_file(&hpath, history.as_bytes())?;
    let last = result.history.last().map_or(f64::NAN, |e| e.mean_loss);
    let summary = if json {
        json!({
            "checkpoint": checkpoint,
            "history": hpath,
            "epochs": result.history.len(),
            "final_loss": last,
        })
        .to_string()
            + "\n"
    } else {
        format!(
            "trained {} for {} epochs, final loss {last:.4}\ncheckpoint {}\nhistory {}\n",
            cfg.train.model.as_str(),
            result.history.len(),
            checkpoint.display(),
            hpath.display()
        )
    };
    out.write_all(summary.as_bytes()).map_err(|e| CliError::runtime(e.to_string()))
}

fn test_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let p = cfg.test.as_ref().ok_or_else(|| CliError::usage("a test corpus is required (--test or key test)"))?;
    read_corpus(p)
}

fn eval_cmd(cfg: &RunConfig, checkpoints: &[PathBuf], json: bool, out: &mut dyn Write) -> Result<()> {
    if checkpoints.is_empty() {
        return Err(CliError::usage("eval needs at least one checkpoint"));
    }
    let models = checkpoints.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
    let test = test_corpus(cfg)?;
    let mut rows: Vec<EvalRow> = Vec::new();
    for m in &models {
        let row = migdial_core::eval::evaluate(m, &test, cfg.candidates_n, cfg.train.seed).map_err(CliError::from_core)?;
        if rows.iter().any(|r| r.model == row.model && r.condition == row.condition) {
            return Err(CliError::usage(format!(
                "two checkpoints for {} under {}",
                row.model.display_name(),
                row.condition
            )));
        }
        rows.push(row);
    }
    let recs = records(&rows);
    if let Some(p) = &cfg.out {
        write_file(p, recs.as_bytes())?;
    }
    let text = if json { recs } else { render_eval_table(&rows) };
    out.write_all(text.as_bytes()).map_err(|e| CliError::runtime(e.to_string()))
}

fn rank(
    cfg: &RunConfig,
    checkpoint: &Path,
    history: &[String],
    candidates: &[String],
    limit: usize,
    json: bool,
    out: &mut dyn Write,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let mut text = String::new();
    if !candidates.is_empty() {
        let hist = history
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let speaker = if (history.len() - i) % 2 == 1 {
                    migdial_core::corpus::Speaker::User
                } else {
                    migdial_core::corpus::Speaker::Agent
                };
                Utterance::new(speaker, h.as_str(), None, None).map_err(|e| CliError::usage(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let toks: Vec<Vec<String>> = candidates.iter().map(|c| migdial_core::textstats::tokenize(c)).collect();
        let scores = model
            .score_candidates(&ModelInput::new(hist, None), &toks)
            .map_err(CliError::from_core)?;
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        for (r, &i) in order.iter().enumerate() {
            text += &if json {
                json!({"rank": r + 1, "candidate": candidates[i], "score": scores[i]}).to_string() + "\n"
            } else {
                format!("{:>2}. {:>10.4}  {}\n", r + 1, scores[i], candidates[i])
            };
        }
        return emit(cfg, &text, out);
    }
    let test = test_corpus(cfg)?;
    let examples = build_examples(&test, &model.example_config());
    let sets = build_candidate_sets(&examples, cfg.candidates_n, cfg.train.seed).map_err(CliError::from_core)?;
    for set in sets.iter().take(limit) {
        let scores = model.score_candidates(&set.input, &set.candidate_tokens()).map_err(CliError::from_core)?;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        if json {
            let ranked: Vec<_> = order
                .iter()
                .map(|&i| json!({"text": set.candidates[i].text, "score": scores[i], "gold": i == set.gold_index}))
                .collect();
            text += &(json!({"set": set.id, "ranked": ranked}).to_string() + "\n");
        } else {
            text += &format!("set {} (gold: {})\n", set.id, set.gold().text);
            for (r, &i) in order.iter().enumerate() {
                let mark = if i == set.gold_index { "*" } else { " " };
                text += &format!("{mark}{:>2}. {:>10.4}  {}\n", r + 1, scores[i], set.candidates[i].text);
            }
        }
    }
    emit(cfg, &text, out)
}

fn serve(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    if cfg.models.is_empty() {
        return Err(CliError::usage("serve needs at least one --model ID=CHECKPOINT"));
    }
    let mut models = BTreeMap::new();
    for (id, p) in &cfg.models {
        models.insert(id.clone(), load_checkpoint(p)?);
    }
    let (store, replay) = match &cfg.store {
        Some(p) => SessionStore::open(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?,
        None => (SessionStore::in_memory(), Default::default()),
    };
    let service_cfg = ServiceConfig { min_turns: cfg.min_turns, debug: cfg.debug, max_reply_len: cfg.max_reply_len };
    let labeler = migdial_service::PrivacyLabeler::health_center().map_err(|e| CliError::runtime(e.to_string()))?;
    let app = Arc::new(App::new(models, store, replay, labeler, service_cfg).map_err(|e| CliError::data(e.to_string()))?);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::runtime(e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(cfg.listen)
            .await
            .map_err(|e| CliError::runtime(format!("cannot listen on {}: {e}", cfg.listen)))?;
        let addr = listener.local_addr().map_err(|e| CliError::runtime(e.to_string()))?;
        writeln!(out, "listening on http://{addr}").and_then(|_| out.flush()).map_err(|e| CliError::runtime(e.to_string()))?;
        migdial_service::serve(listener, app, shutdown_signal()).await.map_err(|e| CliError::runtime(e.to_string()))
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

fn report(cfg: &RunConfig, what: &ReportKind, json: bool, out: &mut dyn Write) -> Result<()> {
    let text = match what {
        ReportKind::Eval { records: p } => {
            let mut rows = Vec::new();
            for (i, line) in open(p)?.lines().enumerate() {
                let line = line.map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
                if line.trim().is_empty() {
                    continue;
                }
                let row: EvalRow = serde_json::from_str(&line)
                    .map_err(|e| CliError::data(format!("{}:{}: {e}", p.display(), i + 1)))?;
                rows.push(row);
            }
            if json {
                records(&rows)
            } else {
                render_eval_table(&rows)
            }
        }
        ReportKind::HumanEval { store } => {
            if !store.exists() {
                return Err(CliError::data(format!("no session log at {}", store.display())));
            }
            let replay = SessionStore::read(store).map_err(|e| CliError::data(format!("{}: {e}", store.display())))?;
            let cells = aggregate_ratings(&replay.ratings, cfg.sd);
            if json {
                to_json(&cells)
            } else {
                render_human_eval(&cells)
            }
        }
    };
    emit(cfg, &text, out)
}

/// Entry point for the binary.
pub fn main_with_std() -> i32 {
    let stdout = io::stdout();
    let stderr = io::stderr();
    run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}
