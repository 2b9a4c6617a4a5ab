//! Flat `key=value` run configuration.
//!
//! Values are layered: built-in defaults, then the `--config` file, then
//! `--set key=value` flags, then dedicated command flags. Every value is
//! parsed and checked as it is set, so a bad key fails before any work.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use migdial_core::corpus::TemplateSet;
use migdial_core::eval::{SdKind, DEFAULT_CANDIDATES};
use migdial_core::models::{TrainConfig, DEFAULT_MAX_LEN};
use migdial_core::textstats::DEFAULT_SEGMENT_LENGTH;
use migdial_service::DEFAULT_MIN_TURNS;

use crate::CliError;

/// Keys beyond the training keys, with descriptions for `--help`.
pub const RUN_KEYS: [(&str, &str); 17] = [
    ("n_dialogs", "dialogs written by gen-corpus (default 92)"),
    ("templates", "gen-corpus template set: health_center | context_recall"),
    ("candidates_n", "candidate set size for hits@1 (default 12)"),
    ("segment_length", "MSTTR segment length (default 100)"),
    ("wordlist", "frequent-word list for lexical sophistication (default builtin)"),
    ("embeddings", "pretrained word vectors, one `token v1 .. vd` per line"),
    ("vocab_limit", "rows kept from the embeddings file (default 50000)"),
    ("history", "loss-history output of train (default <out>.history.jsonl)"),
    ("test", "held-out corpus for eval and rank"),
    ("out", "output path (same as --out)"),
    ("listen", "serve address (default 127.0.0.1:8080)"),
    ("store", "serve session log; in memory when unset"),
    ("debug", "serve the audit route (true/false)"),
    ("min_turns", "utterances per scene before advancing (default 4)"),
    ("models", "serve models as id=checkpoint, comma-separated"),
    ("sd", "rating report deviation: population | sample"),
    ("max_reply_len", "longest generated reply in tokens (default 30)"),
];

/// Every accepted key, one per line, for help output.
pub fn key_help() -> String {
    let mut out = String::from("Configuration keys (config file, --set KEY=VALUE, or a matching flag):\n");
    for (k, d) in TrainConfig::KEYS.iter().chain(RUN_KEYS.iter()) {
        out.push_str(&format!("  {k:<22}{d}\n"));
    }
    out
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub n_dialogs: usize,
    pub templates: String,
    pub candidates_n: usize,
    pub segment_length: usize,
    pub wordlist: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub vocab_limit: usize,
    pub history: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub listen: SocketAddr,
    pub store: Option<PathBuf>,
    pub debug: bool,
    pub min_turns: usize,
    pub models: Vec<(String, PathBuf)>,
    pub sd: SdKind,
    pub max_reply_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            n_dialogs: 92,
            templates: "health_center".into(),
            candidates_n: DEFAULT_CANDIDATES,
            segment_length: DEFAULT_SEGMENT_LENGTH,
            wordlist: None,
            embeddings: None,
            vocab_limit: 50_000,
            history: None,
            test: None,
            out: None,
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            store: None,
            debug: false,
            min_turns: DEFAULT_MIN_TURNS,
            models: Vec::new(),
            sd: SdKind::Population,
            max_reply_len: DEFAULT_MAX_LEN,
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> CliError {
    CliError::usage(format!("invalid value {value:?} for {key}: {why}"))
}

fn count(key: &str, value: &str) -> Result<usize, CliError> {
    value.parse().map_err(|e| bad(key, value, e))
}

fn positive(key: &str, value: &str) -> Result<usize, CliError> {
    match count(key, value)? {
        0 => Err(bad(key, value, "must be at least 1")),
        n => Ok(n),
    }
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        if TrainConfig::KEYS.iter().any(|(k, _)| *k == key) {
            return self.train.set(key, value).map_err(|e| CliError::usage(e.to_string()));
        }
        match key {
            "n_dialogs" => self.n_dialogs = positive(key, value)?,
            "templates" => {
                TemplateSet::by_name(value).map_err(|e| bad(key, value, e))?;
                self.templates = value.to_string();
            }
            "candidates_n" => {
                self.candidates_n = count(key, value)?;
                if self.candidates_n < 2 {
                    return Err(bad(key, value, "need at least 2 candidates"));
                }
            }
            "segment_length" => self.segment_length = positive(key, value)?,
            "wordlist" => self.wordlist = path(value),
            "embeddings" => self.embeddings = path(value),
            "vocab_limit" => self.vocab_limit = positive(key, value)?,
            "history" => self.history = path(value),
            "test" => self.test = path(value),
            "out" => self.out = path(value),
            "listen" => self.listen = value.parse().map_err(|e| bad(key, value, e))?,
            "store" => self.store = path(value),
            "debug" => {
                self.debug = match value {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    _ => return Err(bad(key, value, "expected true or false")),
                }
            }
            "min_turns" => self.min_turns = count(key, value)?,
            "models" => {
                self.models.clear();
                for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    self.add_model(item)?;
                }
            }
            "sd" => {
                self.sd = match value {
                    "population" => SdKind::Population,
                    "sample" => SdKind::Sample,
                    _ => return Err(bad(key, value, "expected population or sample")),
                }
            }
            "max_reply_len" => self.max_reply_len = positive(key, value)?,
            _ => return Err(CliError::usage(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Adds one `id=checkpoint` pair; a bare path is keyed by its file stem.
    pub fn add_model(&mut self, item: &str) -> Result<(), CliError> {
        let (id, p) = match item.split_once('=') {
            Some((id, p)) => (id.trim().to_string(), PathBuf::from(p.trim())),
            None => {
                let p = PathBuf::from(item);
                let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                (id, p)
            }
        };
        if id.is_empty() {
            return Err(bad("models", item, "empty model id"));
        }
        if self.models.iter().any(|(m, _)| *m == id) {
            return Err(bad("models", item, "duplicate model id"));
        }
        self.models.push((id, p));
        Ok(())
    }

    /// Applies a `key=value` pair.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("expected KEY=VALUE, got {pair:?}")))?;
        self.set(k.trim(), v)
    }

    /// Reads a config file: `key = value` lines, `#` comments, blank lines.
    pub fn load_file(&mut self, file: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(file)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", file.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| CliError::usage(format!("{}:{}: {}", file.display(), i + 1, e.message)))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::usage(e.to_string()))
    }
}
