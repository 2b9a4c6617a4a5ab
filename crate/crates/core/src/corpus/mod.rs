//! Migration-dialog data model.
//!
//! A [`Corpus`] holds [`Dialog`]s, each made of [`Scene`]s that carry a
//! public/private [`Setting`]. Utterances may carry a P/NP privacy label and
//! a meaning representation. On disk a corpus is one JSON dialog record per
//! line.

mod generator;
mod stats;

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::textstats::tokenize;
use crate::{Error, Result};

pub use generator::{
    generate_synthetic_corpus, GeneratorConfig, TemplateSet, HOME, PROFESSIONAL_ROOM, RECEPTION,
};
pub use stats::{descriptive_stats, DescriptiveStats, MeanRange};

/// Minimum utterance count for a dialog under strict validation.
pub const MIN_DIALOG_TURNS: usize = 8;
/// Minimum number of P- and of NP-labeled utterances per dialog.
pub const MIN_LABELED_PER_KIND: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PrivacyLabel {
    P,
    NP,
}

impl PrivacyLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            PrivacyLabel::P => "P",
            PrivacyLabel::NP => "NP",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "P" => Some(Self::P),
            "NP" => Some(Self::NP),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Private,
    Public,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Private => "private",
            Setting::Public => "public",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "private" => Some(Self::Private),
            "public" => Some(Self::Public),
            _ => None,
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MigrationMode {
    WithContext,
    WithoutContext,
}

impl MigrationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MigrationMode::WithContext => "with_context",
            MigrationMode::WithoutContext => "without_context",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "with_context" => Some(Self::WithContext),
            "without_context" => Some(Self::WithoutContext),
            _ => None,
        }
    }
}

impl fmt::Display for MigrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Agent,
    User,
}

impl Speaker {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "agent" => Some(Self::Agent),
            "user" => Some(Self::User),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Speaker::Agent => Speaker::User,
            Speaker::User => Speaker::Agent,
        }
    }
}

/// A dialog act with ordered slot-value pairs.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MeaningRepresentation {
    pub act: String,
    pub slots: Vec<(String, String)>,
}

impl MeaningRepresentation {
    pub fn new(act: impl Into<String>, slots: Vec<(String, String)>) -> Result<Self> {
        let act = act.into();
        if act.is_empty() {
            return Err(Error::Schema("meaning representation act is empty".into()));
        }
        let mut seen = HashSet::new();
        for (name, _) in &slots {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate slot name {name:?}")));
            }
        }
        Ok(Self { act, slots })
    }
}

impl Serialize for MeaningRepresentation {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let slots: Vec<[&str; 2]> = self
            .slots
            .iter()
            .map(|(k, v)| [k.as_str(), v.as_str()])
            .collect();
        let mut s = serializer.serialize_struct("MeaningRepresentation", 2)?;
        s.serialize_field("act", &self.act)?;
        s.serialize_field("slots", &slots)?;
        s.end()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    #[serde(skip)]
    pub tokens: Vec<String>,
    pub label: Option<PrivacyLabel>,
    pub mr: Option<MeaningRepresentation>,
}

impl Utterance {
    pub fn new(
        speaker: Speaker,
        text: impl Into<String>,
        label: Option<PrivacyLabel>,
        mr: Option<MeaningRepresentation>,
    ) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Schema("utterance text is empty".into()));
        }
        let tokens = tokenize(&text);
        Ok(Self {
            speaker,
            text,
            tokens,
            label,
            mr,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scene {
    pub name: String,
    pub setting: Setting,
    pub utterances: Vec<Utterance>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dialog {
    pub id: String,
    pub mode: MigrationMode,
    pub scenes: Vec<Scene>,
}

impl Dialog {
    pub fn utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.scenes.iter().flat_map(|s| s.utterances.iter())
    }

    pub fn turn_count(&self) -> usize {
        self.scenes.iter().map(|s| s.utterances.len()).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub dialogs: Vec<Dialog>,
}

impl Corpus {
    /// Builds a corpus, rejecting duplicate dialog ids.
    pub fn new(dialogs: Vec<Dialog>) -> Result<Self> {
        let mut ids = HashSet::new();
        for d in &dialogs {
            if !ids.insert(d.id.as_str()) {
                return Err(Error::Schema(format!("duplicate dialog id {:?}", d.id)));
            }
        }
        Ok(Self { dialogs })
    }

    pub fn len(&self) -> usize {
        self.dialogs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogs.is_empty()
    }

    pub fn utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.dialogs.iter().flat_map(Dialog::utterances)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for d in &self.dialogs {
            serde_json::to_writer(&mut out, d).map_err(|e| Error::Format(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

/// Whether unknown record fields are rejected or ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    Strict,
    #[default]
    Lenient,
}

/// Parses line-delimited dialog records. Blank lines are skipped.
pub fn parse_corpus<R: BufRead>(input: R, strictness: Strictness) -> Result<Corpus> {
    let mut dialogs = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let dialog = RecordReader { strictness }
            .dialog(&value)
            .map_err(|message| Error::Parse {
                line: line_no,
                message,
            })?;
        if !ids.insert(dialog.id.clone()) {
            return Err(Error::Schema(format!(
                "line {line_no}: duplicate dialog id {:?}",
                dialog.id
            )));
        }
        dialogs.push(dialog);
    }
    Ok(Corpus { dialogs })
}

struct RecordReader {
    strictness: Strictness,
}

type FieldResult<T> = std::result::Result<T, String>;

impl RecordReader {
    fn object<'a>(
        &self,
        v: &'a Value,
        path: &str,
        allowed: &[&str],
    ) -> FieldResult<&'a Map<String, Value>> {
        let obj = v
            .as_object()
            .ok_or_else(|| format!("{path}: expected an object"))?;
        if self.strictness == Strictness::Strict {
            if let Some(k) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
                return Err(format!("{path}: unknown field {k:?}"));
            }
        }
        Ok(obj)
    }

    fn string<'a>(&self, obj: &'a Map<String, Value>, key: &str, path: &str) -> FieldResult<&'a str> {
        obj.get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| format!("{path}.{key}: expected a string"))
    }

    fn array<'a>(&self, obj: &'a Map<String, Value>, key: &str, path: &str) -> FieldResult<&'a [Value]> {
        obj.get(key)
            .and_then(Value::as_array)
            .map(Vec::as_slice)
            .ok_or_else(|| format!("{path}.{key}: expected an array"))
    }

    fn dialog(&self, v: &Value) -> FieldResult<Dialog> {
        let obj = self.object(v, "dialog", &["id", "mode", "scenes"])?;
        let id = self.string(obj, "id", "dialog")?.to_string();
        let mode_str = self.string(obj, "mode", "dialog")?;
        let mode = MigrationMode::parse(mode_str).ok_or_else(|| {
            format!("mode: expected \"with_context\" or \"without_context\", got {mode_str:?}")
        })?;
        let scenes = self
            .array(obj, "scenes", "dialog")?
            .iter()
            .enumerate()
            .map(|(i, s)| self.scene(s, &format!("scenes[{i}]")))
            .collect::<FieldResult<Vec<_>>>()?;
        if scenes.is_empty() {
            return Err("scenes: a dialog needs at least one scene".into());
        }
        Ok(Dialog { id, mode, scenes })
    }

    fn scene(&self, v: &Value, path: &str) -> FieldResult<Scene> {
        let obj = self.object(v, path, &["name", "setting", "utterances"])?;
        let name = self.string(obj, "name", path)?.to_string();
        let setting_str = self.string(obj, "setting", path)?;
        let setting = Setting::parse(setting_str).ok_or_else(|| {
            format!("{path}.setting: expected \"private\" or \"public\", got {setting_str:?}")
        })?;
        let utterances = self
            .array(obj, "utterances", path)?
            .iter()
            .enumerate()
            .map(|(i, u)| self.utterance(u, &format!("{path}.utterances[{i}]")))
            .collect::<FieldResult<Vec<_>>>()?;
        Ok(Scene {
            name,
            setting,
            utterances,
        })
    }

    fn utterance(&self, v: &Value, path: &str) -> FieldResult<Utterance> {
        let obj = self.object(v, path, &["speaker", "text", "label", "mr"])?;
        let speaker_str = self.string(obj, "speaker", path)?;
        let speaker = Speaker::parse(speaker_str).ok_or_else(|| {
            format!("{path}.speaker: expected \"agent\" or \"user\", got {speaker_str:?}")
        })?;
        let text = self.string(obj, "text", path)?;
        let label = match obj.get("label") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(PrivacyLabel::parse(s).ok_or_else(|| {
                format!("{path}.label: expected \"P\", \"NP\" or null, got {s:?}")
            })?),
            Some(other) => {
                return Err(format!(
                    "{path}.label: expected \"P\", \"NP\" or null, got {other}"
                ))
            }
        };
        let mr = match obj.get("mr") {
            None | Some(Value::Null) => None,
            Some(m) => Some(self.mr(m, &format!("{path}.mr"))?),
        };
        Utterance::new(speaker, text, label, mr).map_err(|e| format!("{path}: {e}"))
    }

    fn mr(&self, v: &Value, path: &str) -> FieldResult<MeaningRepresentation> {
        let obj = self.object(v, path, &["act", "slots"])?;
        let act = self.string(obj, "act", path)?;
        let mut slots = Vec::new();
        for (i, pair) in self.array(obj, "slots", path)?.iter().enumerate() {
            match pair.as_array().map(Vec::as_slice) {
                Some([Value::String(k), Value::String(v)]) => slots.push((k.clone(), v.clone())),
                _ => return Err(format!("{path}.slots[{i}]: expected a [name, value] pair")),
            }
        }
        MeaningRepresentation::new(act, slots).map_err(|e| format!("{path}: {e}"))
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViolationKind {
    TooFewTurns { turns: usize },
    TooFewPersonal { count: usize },
    TooFewNonPersonal { count: usize },
    Unlabeled { scene: usize, utterance: usize },
    EmptyScene { scene: usize },
    SpeakersNotAlternating { scene: usize, utterance: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub severity: Severity,
    #[serde(flatten)]
    pub kind: ViolationKind,
}

impl Violation {
    fn error(kind: ViolationKind) -> Self {
        Self {
            severity: Severity::Error,
            kind,
        }
    }
}

/// Checks a dialog against the collection protocol. The minimum-length rule
/// only applies when `strict` is set.
pub fn validate_dialog(d: &Dialog, strict: bool) -> Vec<Violation> {
    let mut out = Vec::new();
    let turns = d.turn_count();
    if strict && turns < MIN_DIALOG_TURNS {
        out.push(Violation::error(ViolationKind::TooFewTurns { turns }));
    }
    let count = |l| d.utterances().filter(|u| u.label == Some(l)).count();
    let p = count(PrivacyLabel::P);
    if p < MIN_LABELED_PER_KIND {
        out.push(Violation::error(ViolationKind::TooFewPersonal { count: p }));
    }
    let np = count(PrivacyLabel::NP);
    if np < MIN_LABELED_PER_KIND {
        out.push(Violation::error(ViolationKind::TooFewNonPersonal { count: np }));
    }
    for (si, scene) in d.scenes.iter().enumerate() {
        if scene.utterances.is_empty() {
            out.push(Violation::error(ViolationKind::EmptyScene { scene: si }));
        }
        for (ui, u) in scene.utterances.iter().enumerate() {
            if u.label.is_none() {
                out.push(Violation {
                    severity: Severity::Warning,
                    kind: ViolationKind::Unlabeled {
                        scene: si,
                        utterance: ui,
                    },
                });
            }
            if ui > 0 && scene.utterances[ui - 1].speaker == u.speaker {
                out.push(Violation::error(ViolationKind::SpeakersNotAlternating {
                    scene: si,
                    utterance: ui,
                }));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Migration context
// ---------------------------------------------------------------------------

/// The prior utterances a model may condition on for a target scene.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MigrationContext {
    pub entries: Vec<Utterance>,
    pub target_setting: Setting,
    pub mode: MigrationMode,
}

impl MigrationContext {
    pub fn empty(target_setting: Setting, mode: MigrationMode) -> Self {
        Self {
            entries: Vec::new(),
            target_setting,
            mode,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Whether an utterance with `label` may be shown in a scene with `target`
/// setting under `mode`.
///
/// Without context every labeled utterance is admissible. With context a
/// public target only admits NP; a private target admits both P and NP.
/// Unlabeled utterances are never admissible context entries.
pub fn admissible(label: Option<PrivacyLabel>, target: Setting, mode: MigrationMode) -> bool {
    match (label, mode, target) {
        (None, _, _) => false,
        (Some(_), MigrationMode::WithoutContext, _) => true,
        (Some(l), MigrationMode::WithContext, Setting::Public) => l == PrivacyLabel::NP,
        (Some(_), MigrationMode::WithContext, Setting::Private) => true,
    }
}

/// Collects the context entries from `history` (every scene before the
/// target scene, in order) that may be used in a `target`-setting scene.
pub fn build_migration_context(
    history: &[Scene],
    target: Setting,
    mode: MigrationMode,
) -> MigrationContext {
    let entries = history
        .iter()
        .flat_map(|s| s.utterances.iter())
        .filter(|u| admissible(u.label, target, mode))
        .cloned()
        .collect();
    MigrationContext {
        entries,
        target_setting: target,
        mode,
    }
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Dialog-level train/test split. `round(ratio * n)` dialogs go to train;
/// both halves keep the corpus order.
pub fn split_train_test(c: &Corpus, ratio: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Argument(format!(
            "split ratio must be in (0, 1), got {ratio}"
        )));
    }
    if c.is_empty() {
        return Err(Error::Argument("cannot split an empty corpus".into()));
    }
    let n = c.len();
    let n_train = (ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (d, t) in c.dialogs.iter().zip(is_train) {
        if t {
            train.push(d.clone());
        } else {
            test.push(d.clone());
        }
    }
    Ok((Corpus { dialogs: train }, Corpus { dialogs: test }))
}
