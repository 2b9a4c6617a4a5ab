//! Session state and the events that drive it.
//!
//! A session is a fold over its events. The live service and log replay
//! both go through [`Session::apply`], so a replayed session is the same
//! value as the one that was running.

use serde::{Deserialize, Serialize};

use migdial_core::corpus::{
    Dialog, MigrationMode, PrivacyLabel, Scene, Setting, Speaker, Utterance, HOME, PROFESSIONAL_ROOM, RECEPTION,
};
use migdial_core::eval::RatingRecord;

use crate::ServiceError;

/// The fixed three-scene scenario every session walks through.
pub const SCENARIO: [(&str, Setting); 3] = [
    (HOME, Setting::Private),
    (RECEPTION, Setting::Public),
    (PROFESSIONAL_ROOM, Setting::Private),
];

/// Utterances (user and agent both count) required in a scene before it
/// can be left.
pub const DEFAULT_MIN_TURNS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Active,
    AwaitingRating,
    Closed,
}

/// One line of the session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        session_id: String,
        model_id: String,
        mode: MigrationMode,
        seed: Option<u64>,
        created_at: u64,
    },
    Message {
        session_id: String,
        text: String,
        label: Option<PrivacyLabel>,
        reply: String,
        reply_label: Option<PrivacyLabel>,
    },
    Advanced {
        session_id: String,
    },
    Rated {
        record: RatingRecord,
    },
}

impl Event {
    pub fn session_id(&self) -> &str {
        match self {
            Event::Created { session_id, .. }
            | Event::Message { session_id, .. }
            | Event::Advanced { session_id } => session_id,
            Event::Rated { record } => &record.session_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Session {
    pub id: String,
    pub model_id: String,
    /// Hidden from the rater until ratings are in.
    pub mode: MigrationMode,
    pub seed: Option<u64>,
    pub created_at: u64,
    pub scene: usize,
    pub scenes: Vec<Scene>,
    pub status: Status,
    pub rating: Option<RatingRecord>,
}

impl Session {
    /// Starts a session from its `Created` event.
    pub fn create(event: &Event) -> Result<Self, ServiceError> {
        let Event::Created { session_id, model_id, mode, seed, created_at } = event else {
            return Err(ServiceError::Corrupt(format!("session {} does not start with a creation", event.session_id())));
        };
        Ok(Self {
            id: session_id.clone(),
            model_id: model_id.clone(),
            mode: *mode,
            seed: *seed,
            created_at: *created_at,
            scene: 0,
            scenes: SCENARIO
                .iter()
                .map(|(name, setting)| Scene { name: name.to_string(), setting: *setting, utterances: Vec::new() })
                .collect(),
            status: Status::Active,
            rating: None,
        })
    }

    pub fn current(&self) -> &Scene {
        &self.scenes[self.scene]
    }

    pub fn turns(&self) -> usize {
        self.current().utterances.len()
    }

    pub fn require(&self, status: Status) -> Result<(), ServiceError> {
        if self.status == status {
            return Ok(());
        }
        let what = match self.status {
            Status::Active => "still active",
            Status::AwaitingRating => "awaiting ratings",
            Status::Closed => "closed",
        };
        Err(ServiceError::State(format!("session {} is {what}", self.id)))
    }

    /// Checks that leaving the current scene is allowed.
    pub fn check_advance(&self, min_turns: usize) -> Result<(), ServiceError> {
        self.require(Status::Active)?;
        let turns = self.turns();
        if turns < min_turns {
            return Err(ServiceError::Precondition {
                detail: format!(
                    "scene {} needs {} more turn(s) before advancing",
                    self.current().name,
                    min_turns - turns
                ),
                remaining_turns: min_turns - turns,
            });
        }
        Ok(())
    }

    /// The session as a dialog, for building model inputs.
    pub fn dialog(&self) -> Dialog {
        Dialog { id: self.id.clone(), mode: self.mode, scenes: self.scenes.clone() }
    }

    pub fn apply(&mut self, event: &Event) -> Result<(), ServiceError> {
        match event {
            Event::Created { .. } => {
                return Err(ServiceError::Corrupt(format!("session {} created twice", self.id)));
            }
            Event::Message { text, label, reply, reply_label, .. } => {
                self.require(Status::Active)?;
                let user = Utterance::new(Speaker::User, text.as_str(), *label, None)
                    .map_err(|e| ServiceError::Validation(e.to_string()))?;
                let agent = Utterance::new(Speaker::Agent, reply.as_str(), *reply_label, None)
                    .map_err(|e| ServiceError::Corrupt(e.to_string()))?;
                let scene = &mut self.scenes[self.scene];
                scene.utterances.push(user);
                scene.utterances.push(agent);
            }
            Event::Advanced { .. } => {
                self.require(Status::Active)?;
                if self.scene + 1 < self.scenes.len() {
                    self.scene += 1;
                } else {
                    self.status = Status::AwaitingRating;
                }
            }
            Event::Rated { record } => {
                self.require(Status::AwaitingRating)?;
                self.rating = Some(record.clone());
                self.status = Status::Closed;
            }
        }
        Ok(())
    }
}

/// What the rater may see of a scene.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneView {
    pub index: usize,
    pub name: String,
    pub setting: Setting,
    pub turns: usize,
}

impl SceneView {
    pub fn of(s: &Session) -> Self {
        Self { index: s.scene, name: s.current().name.clone(), setting: s.current().setting, turns: s.turns() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TranscriptLine {
    pub scene: usize,
    pub speaker: Speaker,
    pub text: String,
}

/// Client-facing session summary. Carries no condition field.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionView {
    pub session_id: String,
    pub model_id: String,
    pub status: Status,
    pub scene: SceneView,
    pub transcript: Vec<TranscriptLine>,
}

impl SessionView {
    pub fn of(s: &Session) -> Self {
        let transcript = s
            .scenes
            .iter()
            .enumerate()
            .flat_map(|(i, sc)| {
                sc.utterances.iter().map(move |u| TranscriptLine { scene: i, speaker: u.speaker, text: u.text.clone() })
            })
            .collect();
        Self {
            session_id: s.id.clone(),
            model_id: s.model_id.clone(),
            status: s.status,
            scene: SceneView::of(s),
            transcript,
        }
    }
}
