//! Template-driven synthetic migration dialogs.
//!
//! Two template sets ship with the crate:
//!
//! - `health_center`: a friend at home asks personal and non-personal
//!   questions, a receptionist (public) recalls only non-personal facts, and
//!   a helper in the professional's room (private) recalls personal ones.
//! - `context_recall`: a probe set where every agent line after the home
//!   scene names a fact stated at home and is preceded by the same user
//!   acknowledgement, so the fact is only recoverable from migration context.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    Corpus, Dialog, MeaningRepresentation, MigrationMode, PrivacyLabel, Scene, Setting, Speaker,
    Utterance,
};
use crate::{Error, Result};

pub const HOME: &str = "Home";
pub const RECEPTION: &str = "Reception";
pub const PROFESSIONAL_ROOM: &str = "ProfessionalRoom";

type Pool = (&'static str, &'static [&'static str]);

/// One line template: a dialog act, its label, surface variants and the
/// slots it mentions.
#[derive(Debug, Clone, Copy)]
struct Line {
    act: &'static str,
    label: PrivacyLabel,
    variants: &'static [&'static str],
    slots: &'static [&'static str],
}

/// A fact the home scene asks about and a later scene recalls.
#[derive(Debug, Clone)]
pub struct Topic {
    pub name: &'static str,
    pub label: PrivacyLabel,
    ask: Line,
    inform: Line,
    recall: Line,
    recall_reply: Line,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Style {
    HealthCenter,
    ContextRecall,
}

/// A named collection of topics plus the scene layout that uses them.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub name: &'static str,
    pub topics: Vec<Topic>,
    style: Style,
}

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub n_dialogs: usize,
    pub seed: u64,
    pub templates: TemplateSet,
}

impl GeneratorConfig {
    /// `n_dialogs` health-center dialogs.
    pub fn new(n_dialogs: usize, seed: u64) -> Self {
        Self {
            n_dialogs,
            seed,
            templates: TemplateSet::health_center(),
        }
    }

    pub fn with_templates(mut self, templates: TemplateSet) -> Self {
        self.templates = templates;
        self
    }
}

const NP: PrivacyLabel = PrivacyLabel::NP;
const P: PrivacyLabel = PrivacyLabel::P;

const POOLS: &[Pool] = &[
    (
        "body_part",
        &["knee", "ankle", "wrist", "shoulder", "back", "elbow", "hip", "neck"],
    ),
    (
        "activity",
        &["morning run", "yoga class", "hike", "bike ride", "dance class", "garden work"],
    ),
    ("feeling", &["anxious", "tired", "nervous", "hopeful", "restless", "worried"]),
    (
        "partner",
        &[
            "Rachel", "Emma", "Olivia", "Sophia", "Mia", "James", "Liam", "Noah", "Ethan", "Lucas",
            "Grace", "Henry",
        ],
    ),
    (
        "medication",
        &["ibuprofen", "vitamins", "painkillers", "antibiotics", "allergy pills"],
    ),
    (
        "sport",
        &["baseball", "basketball", "soccer", "tennis", "hockey", "football", "golf"],
    ),
    ("weather", &["sunny", "cool", "breezy", "warm", "cloudy"]),
    (
        "hobby",
        &["reading", "gardening", "painting", "cooking", "hiking", "chess"],
    ),
    ("food", &["pizza", "pasta", "sushi", "tacos", "salad", "curry"]),
    ("time", &["ten", "eleven", "two", "three", "four"]),
    (
        "team",
        &[
            "hawks", "bears", "lions", "tigers", "eagles", "sharks", "wolves", "falcons",
            "panthers", "ravens", "bulls", "giants",
        ],
    ),
    (
        "name",
        &[
            "rachel", "emma", "olivia", "sophia", "mia", "ava", "james", "liam", "noah", "ethan",
            "lucas", "henry",
        ],
    ),
];

fn pool(slot: &str) -> &'static [&'static str] {
    POOLS
        .iter()
        .find(|(name, _)| *name == slot)
        .map(|(_, values)| *values)
        .expect("every template slot has a value pool")
}

const fn line(
    act: &'static str,
    label: PrivacyLabel,
    variants: &'static [&'static str],
    slots: &'static [&'static str],
) -> Line {
    Line {
        act,
        label,
        variants,
        slots,
    }
}

const GREET: Line = line(
    "greet",
    NP,
    &["Hello! How are you doing?", "Hi! How is your day going?", "Good morning! How are you?"],
    &[],
);
const GREET_REPLY: Line = line(
    "greet_reply",
    NP,
    &["I'm good, thank you. How are you?", "Pretty good, thanks for asking.", "Not bad at all, thanks."],
    &[],
);
const REMIND: Line = line(
    "remind_appointment",
    NP,
    &[
        "I notice that you have an appointment at the health center at {time}.",
        "Don't forget your {time} o'clock appointment at the health center.",
    ],
    &["time"],
);
const REMIND_REPLY: Line = line(
    "thank",
    NP,
    &["Oh yeah. Thanks for reminding me.", "Right, thank you for the reminder."],
    &[],
);
const CHECK_IN: Line = line(
    "check_in",
    NP,
    &[
        "Hello! Welcome to the Health Center. I will check you in for the {time} appointment.",
        "Welcome to the Health Center! You are checked in for {time} o'clock.",
    ],
    &["time"],
);
const CHECK_IN_REPLY: Line = line("thank", NP, &["Thank you.", "Thanks a lot."], &[]);
const ROOM_GREET: Line = line(
    "announce_wait",
    NP,
    &[
        "Hello! The health care professional should be here shortly.",
        "Please have a seat, the professional will be with you soon.",
    ],
    &[],
);
const ROOM_GREET_REPLY: Line = line("thank", NP, &["Thank you.", "Okay, thanks."], &[]);

fn health_center_topics() -> Vec<Topic> {
    vec![
        Topic {
            name: "injury",
            label: P,
            ask: line(
                "ask_injury",
                P,
                &["So, tell me how did you get injured?", "How did you hurt yourself?"],
                &[],
            ),
            inform: line(
                "inform_injury",
                P,
                &[
                    "I twisted my {body_part} during my {activity}.",
                    "I hurt my {body_part} on a {activity}.",
                ],
                &["body_part", "activity"],
            ),
            recall: line(
                "recall_injury",
                P,
                &["How is your {body_part} feeling now?", "Is your {body_part} still hurting?"],
                &["body_part"],
            ),
            recall_reply: line(
                "inform_recovery",
                P,
                &["It is getting better slowly.", "Much better than last week, thanks."],
                &[],
            ),
        },
        Topic {
            name: "feeling",
            label: P,
            ask: line(
                "ask_feeling",
                P,
                &["I am sorry to hear that. How are you feeling today?", "How are you feeling these days?"],
                &[],
            ),
            inform: line(
                "inform_feeling",
                P,
                &["I am feeling better than before. Just a little {feeling}.", "Honestly I am a bit {feeling}."],
                &["feeling"],
            ),
            recall: line(
                "recall_feeling",
                P,
                &[
                    "I hope you are feeling less {feeling} than you were at home.",
                    "Are you still feeling {feeling}?",
                ],
                &["feeling"],
            ),
            recall_reply: line(
                "inform_feeling_update",
                P,
                &["Thanks. Yup, I am much better now.", "A little, but it is fine."],
                &[],
            ),
        },
        Topic {
            name: "partner",
            label: P,
            ask: line(
                "ask_partner",
                P,
                &["What is your partner's name?", "Who is your partner?"],
                &[],
            ),
            inform: line(
                "inform_partner",
                P,
                &["umm.. My partner's name is {partner}.", "{partner}, we have been together for years."],
                &["partner"],
            ),
            recall: line(
                "recall_partner",
                P,
                &["How is your partner {partner} doing?", "Will {partner} pick you up later?"],
                &["partner"],
            ),
            recall_reply: line(
                "inform_partner_plan",
                P,
                &["We are planning to meet for dinner tonight.", "Yes, after the appointment."],
                &[],
            ),
        },
        Topic {
            name: "medication",
            label: P,
            ask: line(
                "ask_medication",
                P,
                &["Are you taking any medication?", "Do you take anything for the pain?"],
                &[],
            ),
            inform: line(
                "inform_medication",
                P,
                &["Yes, I take {medication} every morning.", "Just some {medication} when it hurts."],
                &["medication"],
            ),
            recall: line(
                "recall_medication",
                P,
                &["Did you remember to take your {medication} today?", "Do you have your {medication} with you?"],
                &["medication"],
            ),
            recall_reply: line("confirm", P, &["Yes, I did.", "I have them right here."], &[]),
        },
        Topic {
            name: "sport",
            label: NP,
            ask: line("ask_sport", NP, &["Do you watch any sports?", "Are you into sports?"], &[]),
            inform: line(
                "inform_sport",
                NP,
                &["Yes, I love watching {sport}.", "Mostly {sport}, I never miss a game."],
                &["sport"],
            ),
            recall: line(
                "recall_sport",
                NP,
                &[
                    "While we are waiting, did you watch yesterday's {sport} game?",
                    "Did you catch the {sport} game last night?",
                ],
                &["sport"],
            ),
            recall_reply: line(
                "inform_missed",
                NP,
                &["No. I missed it.", "Yes, it was a fun game."],
                &[],
            ),
        },
        Topic {
            name: "weather",
            label: NP,
            ask: line(
                "ask_perfect_day",
                NP,
                &["What does a perfect day look like for you?", "What is your favorite kind of weather?"],
                &[],
            ),
            inform: line(
                "inform_weather",
                NP,
                &["I prefer a nice {weather} day, not too hot.", "Anything {weather} makes me happy."],
                &["weather"],
            ),
            recall: line(
                "recall_weather",
                NP,
                &[
                    "It's a nice {weather} day today, I hope you will enjoy it later.",
                    "Looks like a {weather} afternoon, just the way you like it.",
                ],
                &["weather"],
            ),
            recall_reply: line(
                "inform_plan",
                NP,
                &["Thanks. I hope to go outdoors later.", "Great, maybe I will take a walk."],
                &[],
            ),
        },
        Topic {
            name: "hobby",
            label: NP,
            ask: line(
                "ask_hobby",
                NP,
                &["What do you like to do on weekends?", "Do you have any hobbies?"],
                &[],
            ),
            inform: line(
                "inform_hobby",
                NP,
                &["I enjoy {hobby} with friends.", "I spend most weekends {hobby}."],
                &["hobby"],
            ),
            recall: line(
                "recall_hobby",
                NP,
                &["Any plans for {hobby} this weekend?", "We have a magazine about {hobby} here."],
                &["hobby"],
            ),
            recall_reply: line(
                "inform_interest",
                NP,
                &["Yes, I am looking forward to it.", "Oh nice, I will take a look."],
                &[],
            ),
        },
        Topic {
            name: "food",
            label: NP,
            ask: line(
                "ask_food",
                NP,
                &["What is your favorite food?", "What do you usually like to eat?"],
                &[],
            ),
            inform: line(
                "inform_food",
                NP,
                &["I really like {food}.", "You can never go wrong with {food}."],
                &["food"],
            ),
            recall: line(
                "recall_food",
                NP,
                &[
                    "There is a good {food} place across the street.",
                    "The cafe downstairs serves {food} today.",
                ],
                &["food"],
            ),
            recall_reply: line(
                "inform_interest",
                NP,
                &["Great, I might stop by later.", "Good to know, thanks."],
                &[],
            ),
        },
    ]
}

const ACK: Line = line("ack", NP, &["Ok."], &[]);

fn context_recall_topics() -> Vec<Topic> {
    vec![
        Topic {
            name: "team",
            label: NP,
            ask: line("ask_team", NP, &["Which team do you follow?"], &[]),
            inform: line("inform_team", NP, &["I follow the {team}."], &["team"]),
            recall: line(
                "recall_team",
                NP,
                &["Did you see the {team} game?", "The {team} played well today.", "Go {team}!"],
                &["team"],
            ),
            recall_reply: ACK,
        },
        Topic {
            name: "partner",
            label: P,
            ask: line("ask_partner", P, &["What is your partner's name?"], &[]),
            inform: line("inform_partner", P, &["My partner is {name}."], &["name"]),
            recall: line(
                "recall_partner",
                P,
                &["How is {name} doing?", "Say hello to {name} for me.", "Will {name} pick you up later?"],
                &["name"],
            ),
            recall_reply: ACK,
        },
    ]
}

impl TemplateSet {
    pub fn health_center() -> Self {
        Self {
            name: "health_center",
            topics: health_center_topics(),
            style: Style::HealthCenter,
        }
    }

    pub fn context_recall() -> Self {
        Self {
            name: "context_recall",
            topics: context_recall_topics(),
            style: Style::ContextRecall,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "health_center" => Ok(Self::health_center()),
            "context_recall" => Ok(Self::context_recall()),
            other => Err(Error::Config(format!(
                "unknown template set {other:?} (expected health_center or context_recall)"
            ))),
        }
    }

    /// Restricts the set to the named topics.
    pub fn only(mut self, names: &[&str]) -> Self {
        self.topics.retain(|t| names.contains(&t.name));
        self
    }

    /// Inclusive bounds on the utterance count of one generated dialog.
    pub fn turn_bounds(&self) -> (usize, usize) {
        match self.style {
            // home: greeting + 4..=6 exchanges + reminder; two 2..=3 exchange scenes
            Style::HealthCenter => (4 + 8 + 4 + 4, 4 + 12 + 6 + 6),
            // home: one exchange per topic; recall scenes: three (ack, recall) pairs
            Style::ContextRecall => (4 + 6 + 6, 4 + 6 + 6),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.topics.is_empty() {
            return Err(Error::Config(format!("template set {:?} has no topics", self.name)));
        }
        let count = |l| self.topics.iter().filter(|t| t.label == l).count();
        let needed = match self.style {
            Style::HealthCenter => 2,
            Style::ContextRecall => 1,
        };
        if count(P) < needed || count(NP) < needed {
            return Err(Error::Config(format!(
                "template set {:?} needs at least {needed} personal and {needed} non-personal topics",
                self.name
            )));
        }
        Ok(())
    }
}

/// Per-dialog slot values, drawn once so later scenes recall the same facts.
struct Facts(Vec<(&'static str, &'static str)>);

impl Facts {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Facts(
            POOLS
                .iter()
                .map(|(slot, values)| (*slot, *values.choose(rng).unwrap()))
                .collect(),
        )
    }

    fn get(&self, slot: &str) -> &'static str {
        self.0.iter().find(|(s, _)| *s == slot).map(|(_, v)| *v).unwrap()
    }
}

struct SceneBuilder {
    speaker: Speaker,
    utterances: Vec<Utterance>,
}

impl SceneBuilder {
    fn new(first: Speaker) -> Self {
        Self {
            speaker: first,
            utterances: Vec::new(),
        }
    }

    fn say(&mut self, line: &Line, facts: &Facts, rng: &mut ChaCha8Rng) {
        let variant = line.variants[rng.gen_range(0..line.variants.len())];
        self.say_variant(line, variant, facts);
    }

    fn say_variant(&mut self, line: &Line, variant: &str, facts: &Facts) {
        let mut text = variant.to_string();
        let mut slots = Vec::with_capacity(line.slots.len());
        for slot in line.slots {
            debug_assert!(!pool(slot).is_empty());
            let value = facts.get(slot);
            text = text.replace(&format!("{{{slot}}}"), value);
            slots.push((slot.to_string(), value.to_lowercase()));
        }
        let mr = MeaningRepresentation::new(line.act, slots).expect("template MRs are well-formed");
        let u = Utterance::new(self.speaker, text, Some(line.label), Some(mr))
            .expect("template text is nonempty");
        self.utterances.push(u);
        self.speaker = self.speaker.other();
    }

    fn finish(self, name: &str, setting: Setting) -> Scene {
        Scene {
            name: name.to_string(),
            setting,
            utterances: self.utterances,
        }
    }
}

fn health_center_dialog(set: &TemplateSet, rng: &mut ChaCha8Rng) -> Vec<Scene> {
    let facts = Facts::draw(rng);
    let mut personal: Vec<&Topic> = set.topics.iter().filter(|t| t.label == P).collect();
    let mut public: Vec<&Topic> = set.topics.iter().filter(|t| t.label == NP).collect();
    personal.shuffle(rng);
    public.shuffle(rng);
    personal.truncate(rng.gen_range(2..=3).min(personal.len()));
    public.truncate(rng.gen_range(2..=3).min(public.len()));

    let mut asked: Vec<&Topic> = personal.iter().chain(public.iter()).copied().collect();
    asked.shuffle(rng);

    let mut home = SceneBuilder::new(Speaker::Agent);
    home.say(&GREET, &facts, rng);
    home.say(&GREET_REPLY, &facts, rng);
    for t in &asked {
        home.say(&t.ask, &facts, rng);
        home.say(&t.inform, &facts, rng);
    }
    home.say(&REMIND, &facts, rng);
    home.say(&REMIND_REPLY, &facts, rng);

    let mut reception = SceneBuilder::new(Speaker::Agent);
    reception.say(&CHECK_IN, &facts, rng);
    reception.say(&CHECK_IN_REPLY, &facts, rng);
    let n_public = rng.gen_range(1..=2).min(public.len());
    for t in &public[..n_public] {
        reception.say(&t.recall, &facts, rng);
        reception.say(&t.recall_reply, &facts, rng);
    }

    let mut room = SceneBuilder::new(Speaker::Agent);
    room.say(&ROOM_GREET, &facts, rng);
    room.say(&ROOM_GREET_REPLY, &facts, rng);
    let n_personal = rng.gen_range(1..=2).min(personal.len());
    for t in &personal[..n_personal] {
        room.say(&t.recall, &facts, rng);
        room.say(&t.recall_reply, &facts, rng);
    }

    vec![
        home.finish(HOME, Setting::Private),
        reception.finish(RECEPTION, Setting::Public),
        room.finish(PROFESSIONAL_ROOM, Setting::Private),
    ]
}

fn context_recall_dialog(set: &TemplateSet, rng: &mut ChaCha8Rng) -> Vec<Scene> {
    let facts = Facts::draw(rng);
    let mut home = SceneBuilder::new(Speaker::Agent);
    for t in &set.topics {
        home.say(&t.ask, &facts, rng);
        home.say(&t.inform, &facts, rng);
    }
    let recall_scene = |label: PrivacyLabel, rng: &mut ChaCha8Rng| {
        let mut scene = SceneBuilder::new(Speaker::User);
        let topics: Vec<&Topic> = set.topics.iter().filter(|t| t.label == label).collect();
        let mut frames: Vec<(&Topic, &str)> = topics
            .iter()
            .flat_map(|t| t.recall.variants.iter().map(move |v| (*t, *v)))
            .collect();
        frames.shuffle(rng);
        for (topic, frame) in frames.into_iter().take(3) {
            scene.say(&ACK, &facts, rng);
            scene.say_variant(&topic.recall, frame, &facts);
        }
        scene
    };
    let reception = recall_scene(NP, rng);
    let room = recall_scene(P, rng);
    vec![
        home.finish(HOME, Setting::Private),
        reception.finish(RECEPTION, Setting::Public),
        room.finish(PROFESSIONAL_ROOM, Setting::Private),
    ]
}

/// Generates `cfg.n_dialogs` dialogs; identical configs give identical
/// corpora.
pub fn generate_synthetic_corpus(cfg: &GeneratorConfig) -> Result<Corpus> {
    if cfg.n_dialogs == 0 {
        return Err(Error::Argument("n_dialogs must be at least 1".into()));
    }
    cfg.templates.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dialogs = (0..cfg.n_dialogs)
        .map(|i| {
            let mode = if rng.gen_bool(0.5) {
                MigrationMode::WithContext
            } else {
                MigrationMode::WithoutContext
            };
            let scenes = match cfg.templates.style {
                Style::HealthCenter => health_center_dialog(&cfg.templates, &mut rng),
                Style::ContextRecall => context_recall_dialog(&cfg.templates, &mut rng),
            };
            Dialog {
                id: format!("{}-{}-{:04}", cfg.templates.name, cfg.seed, i),
                mode,
                scenes,
            }
        })
        .collect();
    Corpus::new(dialogs)
}
