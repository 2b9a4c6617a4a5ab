//! Turns dialogs into next-utterance examples.
//!
//! Each example pairs a gold utterance with the history a model may read
//! and, optionally, the migration context for the gold's scene. When the
//! dialog runs with context and the target scene is public, history is
//! filtered with the same admissibility rule as the context, so personal
//! utterances never reach a model's input for a public target.

use serde::Serialize;

use crate::corpus::{
    admissible, build_migration_context, Corpus, Dialog, MigrationContext, MigrationMode, Setting,
    Speaker, Utterance,
};

/// Default number of history utterances a model sees.
pub const DEFAULT_HISTORY_WINDOW: usize = 12;

/// What a model conditions on: flattened history tokens and an optional
/// migration context.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelInput {
    pub history: Vec<Utterance>,
    pub context: Option<MigrationContext>,
}

impl ModelInput {
    pub fn new(history: Vec<Utterance>, context: Option<MigrationContext>) -> Self {
        Self { history, context }
    }

    pub fn history_tokens(&self) -> Vec<String> {
        self.history.iter().flat_map(|u| u.tokens.iter().cloned()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleConfig {
    pub history_window: usize,
    pub use_context: bool,
    /// Keep only golds whose MR act is listed.
    pub acts: Option<Vec<String>>,
    /// Keep only golds spoken by this speaker.
    pub speaker: Option<Speaker>,
}

impl Default for ExampleConfig {
    fn default() -> Self {
        Self {
            history_window: DEFAULT_HISTORY_WINDOW,
            use_context: false,
            acts: None,
            speaker: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogExample {
    pub dialog_id: String,
    pub scene: usize,
    pub utterance: usize,
    pub setting: Setting,
    pub mode: MigrationMode,
    pub input: ModelInput,
    pub gold: Utterance,
}

/// History visible for a target in `setting`: under `WithContext` with a
/// public target only admissible utterances remain. The last `window`
/// survivors are kept.
pub fn visible_history<'a, I>(prior: I, setting: Setting, mode: MigrationMode, window: usize) -> Vec<Utterance>
where
    I: IntoIterator<Item = &'a Utterance>,
{
    let filter = mode == MigrationMode::WithContext && setting == Setting::Public;
    let kept: Vec<&Utterance> = prior
        .into_iter()
        .filter(|u| !filter || admissible(u.label, setting, mode))
        .collect();
    let skip = kept.len().saturating_sub(window);
    kept.into_iter().skip(skip).cloned().collect()
}

/// Builds the model input for utterance `ui` of scene `si`.
pub fn input_for(d: &Dialog, si: usize, ui: usize, cfg: &ExampleConfig) -> ModelInput {
    let setting = d.scenes[si].setting;
    let prior = d.scenes[..si]
        .iter()
        .flat_map(|s| s.utterances.iter())
        .chain(d.scenes[si].utterances[..ui].iter());
    let history = visible_history(prior, setting, d.mode, cfg.history_window);
    let context = cfg
        .use_context
        .then(|| build_migration_context(&d.scenes[..si], setting, d.mode));
    ModelInput { history, context }
}

/// Every utterance after the first one of its dialog becomes a gold, subject
/// to the act and speaker filters.
pub fn dialog_examples(d: &Dialog, cfg: &ExampleConfig) -> Vec<DialogExample> {
    let mut out = Vec::new();
    let mut first = true;
    for (si, scene) in d.scenes.iter().enumerate() {
        for (ui, u) in scene.utterances.iter().enumerate() {
            if std::mem::take(&mut first) {
                continue;
            }
            if cfg.speaker.is_some_and(|s| s != u.speaker) {
                continue;
            }
            if let Some(acts) = &cfg.acts {
                match &u.mr {
                    Some(mr) if acts.iter().any(|a| *a == mr.act) => {}
                    _ => continue,
                }
            }
            out.push(DialogExample {
                dialog_id: d.id.clone(),
                scene: si,
                utterance: ui,
                setting: scene.setting,
                mode: d.mode,
                input: input_for(d, si, ui, cfg),
                gold: u.clone(),
            });
        }
    }
    out
}

pub fn build_examples(c: &Corpus, cfg: &ExampleConfig) -> Vec<DialogExample> {
    c.dialogs.iter().flat_map(|d| dialog_examples(d, cfg)).collect()
}
