//! Public-setting targets under WithContext never condition on personal
//! material, for any model.

use migdial_core::corpus::{
    generate_synthetic_corpus, Corpus, Dialog, GeneratorConfig, MigrationMode, PrivacyLabel, Scene, Setting, Speaker,
    Utterance,
};
use migdial_core::dataset::{dialog_examples, ExampleConfig};
use migdial_core::embeddings::CTX_P;
use migdial_core::models::{conditioning_trace, train, ModelKind, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Personal utterances draw from `p*` words, everything else from `n*`
/// words, so a leak is visible in the token strings alone.
fn random_dialog(rng: &mut ChaCha8Rng, id: usize) -> Dialog {
    let scenes = (0..rng.gen_range(1..5))
        .map(|s| Scene {
            name: format!("scene{s}"),
            setting: if rng.gen_bool(0.5) { Setting::Public } else { Setting::Private },
            utterances: (0..rng.gen_range(1..6))
                .map(|u| {
                    let label = match rng.gen_range(0..3) {
                        0 => Some(PrivacyLabel::P),
                        1 => Some(PrivacyLabel::NP),
                        _ => None,
                    };
                    let prefix = if label == Some(PrivacyLabel::P) { "p" } else { "n" };
                    let text = (0..rng.gen_range(1..5))
                        .map(|_| format!("{prefix}{}", rng.gen_range(0..50)))
                        .collect::<Vec<_>>()
                        .join(" ");
                    let speaker = if u % 2 == 0 { Speaker::Agent } else { Speaker::User };
                    Utterance::new(speaker, text, label, None).unwrap()
                })
                .collect(),
        })
        .collect();
    Dialog {
        id: format!("r{id}"),
        mode: if rng.gen_bool(0.8) { MigrationMode::WithContext } else { MigrationMode::WithoutContext },
        scenes,
    }
}

/// `marked`: personal words are spelled with a leading 'p'.
fn assert_clean(d: &Dialog, window: usize, marked: bool) -> usize {
    let cfg = ExampleConfig {
        use_context: true,
        history_window: window,
        ..Default::default()
    };
    let mut checked = 0;
    for ex in dialog_examples(d, &cfg) {
        if ex.setting != Setting::Public || ex.mode != MigrationMode::WithContext {
            continue;
        }
        for kind in ModelKind::ALL {
            for t in conditioning_trace(kind, &ex.input) {
                assert!(!t.is_personal(), "{}: {:?} conditions on {:?}", d.id, kind, t);
                assert_ne!(t.token, CTX_P);
                assert!(!(marked && t.token.starts_with('p')), "{}: personal word {}", d.id, t.token);
            }
        }
        checked += 1;
    }
    checked
}

#[test]
fn ten_thousand_random_dialogs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2019);
    let mut checked = 0;
    for i in 0..10_000 {
        let d = random_dialog(&mut rng, i);
        checked += assert_clean(&d, [1, 12, 100][i % 3], true);
    }
    assert!(checked > 10_000, "only {checked} public targets");
}

#[test]
fn generated_corpus_and_trained_models() {
    let corpus = generate_synthetic_corpus(&GeneratorConfig::new(200, 11)).unwrap();
    for d in &corpus.dialogs {
        assert_clean(d, 12, false);
    }
    let small = Corpus::new(corpus.dialogs[..2].to_vec()).unwrap();
    for model in ModelKind::ALL {
        let cfg = TrainConfig { model, epochs: 1, hidden_size: 4, embed_dim: 4, use_context: true, ..Default::default() };
        let trained = train(&small, &cfg, None).unwrap().model;
        for d in corpus.dialogs.iter().filter(|d| d.mode == MigrationMode::WithContext) {
            for ex in dialog_examples(d, &trained.example_config()) {
                if ex.setting == Setting::Public {
                    assert!(trained.conditioning_trace(&ex.input).iter().all(|t| !t.is_personal() && t.token != CTX_P));
                }
            }
        }
    }
}
