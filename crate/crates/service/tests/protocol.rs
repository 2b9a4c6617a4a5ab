use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use serde_json::{json, Value};
use tower::ServiceExt;

use migdial_core::corpus::{generate_synthetic_corpus, GeneratorConfig, MigrationMode};
use migdial_core::eval::{aggregate_ratings, SdKind};
use migdial_core::models::{train, ModelKind, TrainConfig, TrainedModel};
use migdial_service::{assign_mode, router, App, Event, ServiceConfig};

fn models() -> BTreeMap<String, TrainedModel> {
    let corpus = generate_synthetic_corpus(&GeneratorConfig::new(3, 5)).unwrap();
    let mut out = BTreeMap::new();
    for (id, model) in [("seq2seq", ModelKind::Seq2Seq), ("pmn", ModelKind::ProfileMemory), ("starspace", ModelKind::Starspace)] {
        let cfg = TrainConfig { model, epochs: 1, hidden_size: 8, embed_dim: 8, use_context: true, ..Default::default() };
        out.insert(id.to_string(), train(&corpus, &cfg, None).unwrap().model);
    }
    out
}

fn app(debug: bool) -> Arc<App> {
    Arc::new(App::open(models(), None, ServiceConfig { debug, ..Default::default() }).unwrap())
}

async fn call(app: &Arc<App>, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), |b| Body::from(b.to_string())))
        .unwrap();
    let resp = router(app.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

/// No key or value in `v` gives the condition away.
fn assert_blind(v: &Value) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                assert!(!["mode", "condition"].contains(&k.as_str()), "leaks {k}: {v}");
                assert_blind(x);
            }
        }
        Value::Array(xs) => xs.iter().for_each(assert_blind),
        Value::String(s) => assert!(!s.contains("with_context") && !s.contains("without_context"), "leaks {s}"),
        _ => {}
    }
}

fn seed_for(mode: MigrationMode) -> u64 {
    (0..).find(|&s| assign_mode(Some(s)) == mode).unwrap()
}

const LINES: [&str; 8] = [
    "hello there",
    "i support the hawks",
    "my friend is emma",
    "hi , i am here for my appointment",
    "thanks",
    "do you remember my team ?",
    "what about my friend ?",
    "ok",
];

/// create, 8 messages over 3 scenes (3, 3, 2), advance past each scene,
/// then ratings. Returns the session id and the condition revealed.
async fn scripted(app: &Arc<App>, model: &str, seed: u64) -> (String, String) {
    let (st, created) = call(app, Method::POST, "/sessions", Some(json!({"model_id": model, "seed": seed}))).await;
    assert_eq!(st, StatusCode::CREATED, "{created}");
    assert_blind(&created);
    assert_eq!(created["scene"]["name"], "Home");
    assert_eq!(created["scene"]["setting"], "private");
    let id = created["session_id"].as_str().unwrap().to_string();
    let mut line = LINES.iter();
    for (scene, n) in [(0, 3), (1, 3), (2, 2)] {
        for _ in 0..n {
            let (st, r) =
                call(app, Method::POST, &format!("/sessions/{id}/message"), Some(json!({"text": line.next().unwrap()}))).await;
            assert_eq!(st, StatusCode::OK, "{r}");
            assert_blind(&r);
            assert!(!r["reply"].as_str().unwrap().trim().is_empty());
            assert_eq!(r["scene"]["index"], scene);
        }
        let (st, view) = call(app, Method::GET, &format!("/sessions/{id}"), None).await;
        assert_eq!(st, StatusCode::OK);
        assert_blind(&view);
        let (st, adv) = call(app, Method::POST, &format!("/sessions/{id}/advance"), None).await;
        assert_eq!(st, StatusCode::OK, "{adv}");
        assert_blind(&adv);
        match scene {
            0 => assert_eq!((adv["scene"]["name"].as_str(), adv["scene"]["setting"].as_str()), (Some("Reception"), Some("public"))),
            1 => assert_eq!(adv["scene"]["setting"], "private"),
            _ => assert_eq!(adv["status"], "awaiting_rating"),
        }
    }
    let (st, r) = call(
        app,
        Method::POST,
        &format!("/sessions/{id}/ratings"),
        Some(json!({"fluency": 4, "engagingness": 5, "consistency": 3})),
    )
    .await;
    assert_eq!(st, StatusCode::OK, "{r}");
    (id, r["condition"].as_str().unwrap().to_string())
}

#[tokio::test]
async fn scripted_session_for_every_model() {
    let app = app(false);
    for model in ["seq2seq", "pmn", "starspace"] {
        for mode in [MigrationMode::WithContext, MigrationMode::WithoutContext] {
            let (id, condition) = scripted(&app, model, seed_for(mode)).await;
            assert_eq!(condition, mode.as_str());
            let (_, view) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
            assert_eq!(view["status"], "closed");
            assert_eq!(view["transcript"].as_array().unwrap().len(), 16);
        }
    }
    let records = app.ratings().unwrap();
    assert_eq!(records.len(), 6);
    assert!(records.iter().all(|r| (r.fluency, r.engagingness, r.consistency) == (4, 5, 3)));
    let (st, report) = call(&app, Method::GET, "/reports/human-eval", None).await;
    assert_eq!(st, StatusCode::OK);
    let expected = serde_json::to_value(aggregate_ratings(&records, SdKind::Population)).unwrap();
    assert_eq!(report["cells"], expected);
    assert_eq!(call(&app, Method::GET, "/reports/human-eval", None).await.1, report);
}

#[tokio::test]
async fn rejections() {
    let app = app(false);
    let (st, e) = call(&app, Method::POST, "/sessions", Some(json!({"model_id": "nope"}))).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(e["error"], "not_found");
    assert!(e["detail"].as_str().unwrap().contains("nope"));

    let (st, e) = call(&app, Method::POST, "/sessions", Some(json!({"model": "seq2seq"}))).await;
    assert_eq!((st, e["error"].as_str()), (StatusCode::BAD_REQUEST, Some("bad_request")));

    let (_, c) = call(&app, Method::POST, "/sessions", Some(json!({"model_id": "seq2seq"}))).await;
    let id = c["session_id"].as_str().unwrap().to_string();

    let (st, e) = call(&app, Method::POST, &format!("/sessions/{id}/message"), Some(json!({"text": "   "}))).await;
    assert_eq!((st, e["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("validation")));

    let (st, e) = call(&app, Method::POST, &format!("/sessions/{id}/advance"), None).await;
    assert_eq!((st, e["error"].as_str()), (StatusCode::CONFLICT, Some("precondition")));
    assert_eq!(e["remaining_turns"], 4);
    call(&app, Method::POST, &format!("/sessions/{id}/message"), Some(json!({"text": "hi"}))).await;
    let (_, e) = call(&app, Method::POST, &format!("/sessions/{id}/advance"), None).await;
    assert_eq!(e["remaining_turns"], 2);

    let scores = json!({"fluency": 4, "engagingness": 5, "consistency": 3});
    let (st, e) = call(&app, Method::POST, &format!("/sessions/{id}/ratings"), Some(scores.clone())).await;
    assert_eq!((st, e["error"].as_str()), (StatusCode::CONFLICT, Some("state")));
    assert_blind(&e);

    let (st, e) = call(&app, Method::POST, "/sessions/missing/message", Some(json!({"text": "hi"}))).await;
    assert_eq!((st, e["error"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));

    let (st, e) = call(&app, Method::GET, &format!("/sessions/{id}/audit"), None).await;
    assert_eq!((st, e["error"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));

    let (st, e) = call(&app, Method::GET, "/nowhere", None).await;
    assert_eq!((st, e["error"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));

    let (id, _) = scripted(&app, "seq2seq", 3).await;
    let (st, e) = call(&app, Method::POST, &format!("/sessions/{id}/ratings"), Some(scores)).await;
    assert_eq!((st, e["error"].as_str()), (StatusCode::CONFLICT, Some("state")));
    let (st, _) = call(&app, Method::POST, &format!("/sessions/{id}/message"), Some(json!({"text": "hi"}))).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(app.ratings().unwrap().len(), 1);
}

#[tokio::test]
async fn out_of_range_scores_are_rejected() {
    let app = app(false);
    let (_, c) = call(&app, Method::POST, "/sessions", Some(json!({"model_id": "seq2seq", "seed": 1}))).await;
    let id = c["session_id"].as_str().unwrap().to_string();
    for _ in 0..3 {
        for _ in 0..2 {
            call(&app, Method::POST, &format!("/sessions/{id}/message"), Some(json!({"text": "hello"}))).await;
        }
        call(&app, Method::POST, &format!("/sessions/{id}/advance"), None).await;
    }
    for bad in [json!({"fluency": 6, "engagingness": 5, "consistency": 3}), json!({"fluency": 1, "engagingness": 0, "consistency": 3}), json!({"fluency": 1, "engagingness": 2, "consistency": -1})] {
        let (st, e) = call(&app, Method::POST, &format!("/sessions/{id}/ratings"), Some(bad)).await;
        assert_eq!((st, e["error"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("validation")));
    }
    assert!(app.ratings().unwrap().is_empty());
}

#[test]
fn seeded_modes_split_evenly() {
    let with = (0..1000).filter(|&s| assign_mode(Some(s)) == MigrationMode::WithContext).count();
    assert!((450..=550).contains(&with), "{with}");
    assert_eq!(assign_mode(Some(7)), assign_mode(Some(7)));
}

#[tokio::test]
async fn public_replies_never_condition_on_personal_history() {
    let app = app(true);
    for model in ["seq2seq", "pmn", "starspace"] {
        let (id, _) = scripted(&app, model, seed_for(MigrationMode::WithContext)).await;
        let (st, audit) = call(&app, Method::GET, &format!("/sessions/{id}/audit"), None).await;
        assert_eq!(st, StatusCode::OK);
        let replies = audit["replies"].as_array().unwrap();
        assert_eq!(replies.len(), 8);
        let public: Vec<&Value> = replies.iter().filter(|r| r["setting"] == "public").collect();
        assert_eq!(public.len(), 3);
        for r in public {
            for t in r["tokens"].as_array().unwrap() {
                assert_ne!(t["origin"]["label"], "P", "{model}: {t}");
                assert_ne!(t["token"], "<ctx_p>");
            }
        }
    }
}

#[test]
fn concurrent_sessions_keep_their_own_transcripts() {
    let app = app(false);
    let ids: Vec<String> = (0..4).map(|i| app.create_session("seq2seq", Some(i)).unwrap().0).collect();
    std::thread::scope(|s| {
        for (i, id) in ids.iter().enumerate() {
            let app = &app;
            s.spawn(move || {
                for j in 0..5 {
                    app.post_message(id, &format!("session{i} line{j}")).unwrap();
                }
            });
        }
    });
    for (i, id) in ids.iter().enumerate() {
        let user: Vec<String> = app
            .view(id)
            .unwrap()
            .transcript
            .iter()
            .step_by(2)
            .map(|l| l.text.clone())
            .collect();
        assert_eq!(user, (0..5).map(|j| format!("session{i} line{j}")).collect::<Vec<_>>());
    }
}

#[tokio::test]
async fn log_replay_restores_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sessions.jsonl");
    let models = models();
    let open = || Arc::new(App::open(models.clone(), Some(&path), ServiceConfig::default()).unwrap());

    let first = open();
    scripted(&first, "pmn", 11).await;
    let (_, c) = call(&first, Method::POST, "/sessions", Some(json!({"model_id": "seq2seq", "seed": 4}))).await;
    let open_id = c["session_id"].as_str().unwrap().to_string();
    for text in ["hello", "i like the bears", "bye"] {
        call(&first, Method::POST, &format!("/sessions/{open_id}/message"), Some(json!({"text": text}))).await;
    }
    call(&first, Method::POST, &format!("/sessions/{open_id}/advance"), None).await;
    let before = first.snapshot().unwrap();
    let before_json = serde_json::to_string(&before).unwrap();
    let report = first.human_eval_report().unwrap();
    // no clean shutdown: the log is all that survives
    drop(first);

    // a half-written trailing event is discarded
    {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"event":"advanced","sess"#).unwrap();
    }

    let second = open();
    assert_eq!(second.snapshot().unwrap(), before);
    assert_eq!(serde_json::to_string(&second.snapshot().unwrap()).unwrap(), before_json);
    assert_eq!(second.human_eval_report().unwrap(), report);

    // the restored session carries on where it stopped
    let (st, r) = call(&second, Method::POST, &format!("/sessions/{open_id}/message"), Some(json!({"text": "hi again"}))).await;
    assert_eq!(st, StatusCode::OK, "{r}");
    assert_eq!(r["scene"]["index"], 1);
    let after = second.snapshot().unwrap();
    drop(second);
    assert_eq!(open().snapshot().unwrap(), after);

    let lines = std::fs::read_to_string(&path).unwrap();
    for line in lines.lines() {
        serde_json::from_str::<Event>(line).unwrap();
    }
}

#[test]
fn replies_are_deterministic_for_equal_state() {
    let a = app(false);
    let b = app(false);
    let ia = a.create_session("pmn", Some(2)).unwrap().0;
    let ib = b.create_session("pmn", Some(2)).unwrap().0;
    for text in ["hello there", "i support the hawks", "ok"] {
        assert_eq!(a.post_message(&ia, text).unwrap().0, b.post_message(&ib, text).unwrap().0);
    }
}
