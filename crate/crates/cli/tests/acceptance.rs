//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p migdial-cli --test acceptance`. Set
//! `ACCEPTANCE_ONLY=4,5` to run a subset.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use migdial_cli::RunConfig;
use migdial_core::autodiff::{ParameterSet, Tape, Tensor};
use migdial_core::corpus::{
    generate_synthetic_corpus, Dialog, GeneratorConfig, MigrationContext, MigrationMode, PrivacyLabel, Scene, Setting,
    Speaker, TemplateSet, Utterance,
};
use migdial_core::dataset::{build_examples, dialog_examples, DialogExample, ExampleConfig, ModelInput};
use migdial_core::embeddings::{Vocabulary, CTX_P};
use migdial_core::eval::{
    aggregate_ratings, build_candidate_sets, hits_at_1, perplexity, word_f1, RandomScorer, RaterRole, RatingRecord,
    SdKind,
};
use migdial_core::models::{conditioning_trace, train, Model, ModelKind, ProfileMemory, Seq2Seq, TrainConfig, TrainedModel};
use migdial_core::textstats::{msttr, ttr};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "gradient correctness", gradients),
        (2, "fallback equivalence", fallback),
        (3, "privacy invariant", privacy),
        (4, "context-signal ablation", ablation),
        (5, "retrieval sanity", retrieval),
        (6, "metric oracles", metric_oracles),
        (7, "report shape", report_shape),
        (8, "determinism", determinism),
        (9, "service protocol", service_protocol),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n} PASS  {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL  {name}: {detail} ({secs:.1}s)");
            }
        }
        let _ = std::io::stdout().flush();
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// 1. gradients
// ---------------------------------------------------------------------------

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 50;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

/// Worst relative error of `analytic` against central differences of
/// `loss` over every parameter scalar.
fn fd_params(ps: &ParameterSet, analytic: &[Vec<f64>], loss: impl Fn(&ParameterSet) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for (pi, p) in ps.ids().enumerate() {
        for i in 0..ps.value(p).len() {
            let mut plus = ps.clone();
            plus.value_mut(p).data_mut()[i] += FD_STEP;
            let mut minus = ps.clone();
            minus.value_mut(p).data_mut()[i] -= FD_STEP;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[pi][i], numeric));
        }
    }
    worst
}

fn fd_inputs(values: &[Vec<f64>], analytic: &[Vec<f64>], loss: impl Fn(&[Vec<f64>]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for (vi, v) in values.iter().enumerate() {
        for i in 0..v.len() {
            let mut plus = values.to_vec();
            plus[vi][i] += FD_STEP;
            let mut minus = values.to_vec();
            minus[vi][i] -= FD_STEP;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[vi][i], numeric));
        }
    }
    worst
}

fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn grads_of(ps: &ParameterSet, g: &migdial_core::autodiff::Gradients) -> Vec<Vec<f64>> {
    ps.ids().map(|p| g.param(ps, p)).collect()
}

fn lstm_cell_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dx, k) = (rng.gen_range(1..6), rng.gen_range(1..9));
    let mut ps = ParameterSet::new();
    let w = ps.add("w", Tensor::uniform(vec![4 * k, dx + k], 0.8, &mut rng)).unwrap();
    let b = ps.add("b", Tensor::uniform(vec![4 * k], 0.8, &mut rng)).unwrap();
    let inputs = vec![randv(&mut rng, dx), randv(&mut rng, k), randv(&mut rng, k)];
    let r = randv(&mut rng, 2 * k);
    let run = |ps: &ParameterSet, inp: &[Vec<f64>]| {
        let mut t = Tape::new(ps);
        let (x, h, c) = (t.input(inp[0].clone()), t.input(inp[1].clone()), t.input(inp[2].clone()));
        let hc = t.lstm(x, h, c, w, b).unwrap();
        let rv = t.input(r.clone());
        let l = t.dot(hc, rv).unwrap();
        let g = t.backward(l).unwrap();
        let gi: Vec<Vec<f64>> = [x, h, c].iter().zip(inp).map(|(v, i)| g.wrt(*v, i.len())).collect();
        (t.scalar(l), gi, g)
    };
    let (_, gi, g) = run(&ps, &inputs);
    let gp = grads_of(&ps, &g);
    fd_params(&ps, &gp, |q| run(q, &inputs).0).max(fd_inputs(&inputs, &gi, |i| run(&ps, i).0))
}

fn xent_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let (v, d) = (rng.gen_range(2..11), rng.gen_range(1..9));
    let mut ps = ParameterSet::new();
    let w = ps.add("w", Tensor::uniform(vec![v, d], 1.0, &mut rng)).unwrap();
    let xs: Vec<Vec<f64>> = (0..4).map(|_| randv(&mut rng, d)).collect();
    let ys: Vec<usize> = (0..4).map(|_| rng.gen_range(0..v)).collect();
    let run = |ps: &ParameterSet| {
        let mut t = Tape::new(ps);
        let mut total = None;
        for (x, &y) in xs.iter().zip(&ys) {
            let xv = t.input(x.clone());
            let z = t.linear(w, xv, None).unwrap();
            let l = t.softmax_xent(z, y).unwrap();
            total = Some(match total {
                None => l,
                Some(a) => t.add(a, l).unwrap(),
            });
        }
        let l = total.unwrap();
        (t.scalar(l), t.backward(l).unwrap())
    };
    let (_, g) = run(&ps);
    fd_params(&ps, &grads_of(&ps, &g), |q| run(q).0)
}

/// Ten tokens: one word plus the nine specials.
fn toy_vocab() -> Vocabulary {
    Vocabulary::from_ranked(["a"]).unwrap()
}

fn toy_utt(text: &str, label: Option<PrivacyLabel>) -> Utterance {
    Utterance::new(Speaker::User, text, label, None).unwrap()
}

fn toy_tokens(rng: &mut ChaCha8Rng) -> Vec<String> {
    let n = rng.gen_range(1..4);
    (0..n).map(|_| ["a", "b", "<sep>", "<ctx_np>"][rng.gen_range(0..4)].to_string()).collect()
}

fn seq2seq_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
    let k = rng.gen_range(1..9);
    let m = Seq2Seq::new(toy_vocab(), 3, k, 0.5, None, &mut rng).unwrap();
    let ctx = rng.gen_bool(0.5).then(|| MigrationContext {
        entries: vec![toy_utt("a a", Some(PrivacyLabel::NP))],
        target_setting: Setting::Public,
        mode: MigrationMode::WithContext,
    });
    let input = ModelInput::new(vec![toy_utt(["a b", "a", "b a a"][rng.gen_range(0..3)], None)], ctx);
    let gold = toy_tokens(&mut rng);
    let (_, g) = m.loss_and_grads(&input, &gold).unwrap();
    let ps = m.params().clone();
    fd_params(&ps, &grads_of(&ps, &g), |q| {
        let mut mm = m.clone();
        *mm.params_mut() = q.clone();
        mm.loss(&input, &gold).unwrap()
    })
}

fn attend_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
    let k = rng.gen_range(1..9);
    let m = ProfileMemory::new(toy_vocab(), 3, k, 0.5, None, &mut rng).unwrap();
    let rows = rng.gen_range(1..5);
    let inputs = vec![randv(&mut rng, rows * k), randv(&mut rng, k), randv(&mut rng, k)];
    let r = randv(&mut rng, 3);
    let run = |ps: &ParameterSet, inp: &[Vec<f64>]| {
        let mut t = Tape::new(ps);
        let f = t.input_matrix(rows, k, inp[0].clone()).unwrap();
        let h = t.input(inp[1].clone());
        let xp = t.input(inp[2].clone());
        let att = m.attend(&mut t, f, h, xp).unwrap();
        let rv = t.input(r.clone());
        let l = t.dot(att.x_hat, rv).unwrap();
        let g = t.backward(l).unwrap();
        let gi: Vec<Vec<f64>> = [f, h, xp].iter().zip(inp).map(|(v, i)| g.wrt(*v, i.len())).collect();
        (t.scalar(l), gi, g)
    };
    let ps = m.params();
    let (_, gi, g) = run(ps, &inputs);
    fd_params(ps, &grads_of(ps, &g), |q| run(q, &inputs).0).max(fd_inputs(&inputs, &gi, |i| run(ps, i).0))
}

fn memory_network_err(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
    let k = rng.gen_range(1..9);
    let m = ProfileMemory::new(toy_vocab(), 3, k, 0.5, None, &mut rng).unwrap();
    let entries = (0..rng.gen_range(1..4))
        .map(|_| toy_utt(&toy_tokens(&mut rng).join(" "), Some(PrivacyLabel::P)))
        .collect();
    let input = ModelInput::new(
        vec![toy_utt("a b", None)],
        Some(MigrationContext { entries, target_setting: Setting::Private, mode: MigrationMode::WithContext }),
    );
    let gold = toy_tokens(&mut rng);
    let (_, g) = m.loss_and_grads(&input, &gold).unwrap();
    let ps = m.params().clone();
    fd_params(&ps, &grads_of(&ps, &g), |q| {
        let mut mm = m.clone();
        *mm.params_mut() = q.clone();
        mm.loss(&input, &gold).unwrap()
    })
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let parts: [(&str, fn(u64) -> f64); 5] = [
        ("lstm cell", lstm_cell_err),
        ("softmax cross-entropy", xent_err),
        ("seq2seq loss", seq2seq_err),
        ("attention", attend_err),
        ("memory network loss", memory_network_err),
    ];
    let mut summary = Vec::new();
    for (name, f) in parts {
        let worst = (0..GRAD_SEEDS).map(f).fold(0.0, f64::max);
        check(worst < GRAD_TOL, || format!("{name}: max relative error {worst:.2e} >= {GRAD_TOL:e}"))?;
        summary.push(format!("{name} {worst:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, || format!("took {secs:.1}s, limit 60s"))?;
    Ok(format!("{GRAD_SEEDS} seeds each, max rel err: {}", summary.join(", ")))
}

// ---------------------------------------------------------------------------
// 2. fallback
// ---------------------------------------------------------------------------

fn fallback() -> Outcome {
    const WORDS: [&str; 8] = ["i", "hurt", "my", "knee", "today", "the", "game", "was"];
    let sentence = |rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(1..7);
        (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
    };
    let vocab = Vocabulary::from_ranked(WORDS).unwrap();
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let m = ProfileMemory::new(vocab.clone(), 6, rng.gen_range(2..9), 0.3, None, &mut rng).unwrap();
        // a stand-alone base model holding copies of the shared parameters
        let src = m.params();
        let mut ps = ParameterSet::new();
        for name in ["emb", "enc.w", "enc.b", "dec.w", "dec.b", "out.w", "out.b"] {
            ps.add(name, src.value(src.id(name).unwrap()).clone()).unwrap();
        }
        let base = Seq2Seq::from_parts(ps, vocab.clone()).unwrap();
        let history = (0..rng.gen_range(0..4))
            .map(|_| Utterance::new(Speaker::User, sentence(&mut rng), None, None).unwrap())
            .collect();
        let context = match case % 3 {
            0 => None,
            1 => Some(MigrationContext::empty(Setting::Public, MigrationMode::WithContext)),
            _ => Some(MigrationContext::empty(Setting::Private, MigrationMode::WithoutContext)),
        };
        let input = ModelInput::new(history, context);
        let gold: Vec<String> = sentence(&mut rng).split(' ').map(String::from).collect();
        let a = m.loss(&input, &gold).unwrap();
        let b = base.loss(&input, &gold).unwrap();
        check(a.to_bits() == b.to_bits(), || format!("case {case}: {a:e} != {b:e}"))?;
    }
    Ok("100 inputs bit-identical".into())
}

// ---------------------------------------------------------------------------
// 3. privacy
// ---------------------------------------------------------------------------

/// Personal utterances use `p*` words and everything else `n*` words, so a
/// leak shows in the token strings alone.
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

fn privacy() -> Outcome {
    // tiny trained models so the audit path through TrainedModel is covered
    let small = generate_synthetic_corpus(&GeneratorConfig::new(2, 1)).unwrap();
    let models: Vec<TrainedModel> = ModelKind::ALL
        .iter()
        .map(|&model| {
            let cfg = TrainConfig { model, epochs: 1, hidden_size: 4, embed_dim: 4, use_context: true, ..Default::default() };
            train(&small, &cfg, None).unwrap().model
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2019);
    let mut targets = 0usize;
    let mut tokens = 0usize;
    for i in 0..10_000 {
        let d = random_dialog(&mut rng, i);
        let cfg = ExampleConfig { use_context: true, history_window: [1, 12, 100][i % 3], ..Default::default() };
        for ex in dialog_examples(&d, &cfg) {
            if ex.setting != Setting::Public || ex.mode != MigrationMode::WithContext {
                continue;
            }
            targets += 1;
            let traces = ModelKind::ALL
                .iter()
                .map(|&k| conditioning_trace(k, &ex.input))
                .chain(models.iter().map(|m| m.conditioning_trace(&ex.input)));
            for trace in traces {
                for t in trace {
                    tokens += 1;
                    check(!t.is_personal() && t.token != CTX_P && !t.token.starts_with('p'), || {
                        format!("{}: public target conditions on {:?}", d.id, t)
                    })?;
                }
            }
        }
    }
    check(targets > 10_000, || format!("only {targets} public targets"))?;
    Ok(format!("10000 dialogs, {targets} public targets, {tokens} traced tokens, no personal material"))
}

// ---------------------------------------------------------------------------
// 4 and 5. ablation and retrieval
// ---------------------------------------------------------------------------

const ABLATION_SEEDS: u64 = 5;
const RANDOM_BASELINE: f64 = 100.0 / 12.0;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn ablation_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.load_file(&repo_root().join("configs/ablation.conf")).expect("configs/ablation.conf loads");
    cfg
}

/// hits@1 of `kind` trained with and without context on a seeded corpus,
/// tested on a corpus from a different seed.
fn ablation_hits(kind: ModelKind, use_context: bool, seed: u64) -> f64 {
    let base = ablation_config();
    let templates = TemplateSet::by_name(&base.templates).unwrap();
    let train_c = generate_synthetic_corpus(&GeneratorConfig::new(base.n_dialogs, seed).with_templates(templates.clone())).unwrap();
    let test_c =
        generate_synthetic_corpus(&GeneratorConfig::new(base.n_dialogs, seed + 1000).with_templates(templates)).unwrap();
    let mut cfg = base.train.clone();
    cfg.model = kind;
    cfg.seed = seed;
    cfg.use_context = use_context;
    let model = train(&train_c, &cfg, None).unwrap().model;
    let examples = build_examples(&test_c, &model.example_config());
    let sets = build_candidate_sets(&examples, base.candidates_n, seed).unwrap();
    hits_at_1(&model, &sets).unwrap()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn fmt_runs(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join("/")
}

fn ablation() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut problems = Vec::new();
    for kind in [ModelKind::Seq2Seq, ModelKind::ProfileMemory] {
        let with: Vec<f64> = (0..ABLATION_SEEDS).map(|s| ablation_hits(kind, true, s)).collect();
        let without: Vec<f64> = (0..ABLATION_SEEDS).map(|s| ablation_hits(kind, false, s)).collect();
        let (mw, mo) = (median(with.clone()), median(without.clone()));
        lines.push(format!("{} with {mw:.1} [{}] without {mo:.1} [{}]", kind.as_str(), fmt_runs(&with), fmt_runs(&without)));
        if mw < mo + 10.0 {
            problems.push(format!("{}: with-context median {mw:.2} is not 10 points above {mo:.2}", kind.as_str()));
        }
        if (mo - RANDOM_BASELINE).abs() > 5.0 {
            problems.push(format!("{}: without-context median {mo:.2} is not within 5 of 8.33", kind.as_str()));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs > 900.0 {
        problems.push(format!("took {secs:.0}s, limit 900s"));
    }
    let detail = lines.join("; ");
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", problems.join("; ")))
    }
}

fn retrieval() -> Outcome {
    let hits: Vec<f64> = (0..ABLATION_SEEDS).map(|s| ablation_hits(ModelKind::Starspace, true, s)).collect();
    let m = median(hits.clone());
    check(m >= 25.0, || format!("starspace median hits@1 {m:.2} < 25 [{}]", fmt_runs(&hits)))?;

    // random scorer over 10k Monte Carlo candidate sets
    let corpus = generate_synthetic_corpus(&GeneratorConfig::new(500, 7)).unwrap();
    let examples = build_examples(&corpus, &ExampleConfig::default());
    let mut sets = build_candidate_sets(&examples, 12, 7).unwrap();
    check(sets.len() >= 10_000, || format!("only {} candidate sets", sets.len()))?;
    sets.truncate(10_000);
    let random = hits_at_1(&RandomScorer { seed: 7 }, &sets).unwrap();
    check((random - RANDOM_BASELINE).abs() <= 1.0, || format!("random scorer {random:.2}% not within 1 of 8.33%"))?;
    Ok(format!("starspace median {m:.1} [{}]; random scorer {random:.2}% over 10000 sets", fmt_runs(&hits)))
}

// ---------------------------------------------------------------------------
// 6. metric oracles
// ---------------------------------------------------------------------------

const FIXTURES: u64 = 25;
const ORACLE_TOL: f64 = 1e-9;

fn words(rng: &mut ChaCha8Rng, max: usize, alphabet: usize) -> Vec<String> {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| format!("w{}", rng.gen_range(0..alphabet))).collect()
}

/// Multiset overlap by sorting both sides and walking them together.
fn f1_oracle(pred: &[String], gold: &[String]) -> f64 {
    let (mut p, mut g) = (pred.to_vec(), gold.to_vec());
    p.sort();
    g.sort();
    let (mut i, mut j, mut common) = (0, 0, 0usize);
    while i < p.len() && j < g.len() {
        match p[i].cmp(&g[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                common += 1;
                i += 1;
                j += 1;
            }
        }
    }
    if common == 0 {
        0.0
    } else {
        2.0 * common as f64 / (p.len() + g.len()) as f64
    }
}

fn ttr_oracle(t: &[String]) -> f64 {
    if t.is_empty() {
        0.0
    } else {
        t.iter().collect::<BTreeSet<_>>().len() as f64 / t.len() as f64
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-token log-probabilities of `gold ++ [EOS]`, computed directly from
/// the parameter arrays.
fn raw_log_probs(m: &Seq2Seq, enc: &[String], gold: &[String]) -> Vec<f64> {
    let ps = m.params();
    let get = |name: &str| {
        let t = ps.value(ps.id(name).unwrap());
        (t.data().to_vec(), *t.shape().last().unwrap())
    };
    let lstm = |prefix: &str, x: &[f64], h: &[f64], c: &[f64]| {
        let (w, cols) = get(&format!("{prefix}.w"));
        let (b, _) = get(&format!("{prefix}.b"));
        let k = h.len();
        let xh: Vec<f64> = x.iter().chain(h).copied().collect();
        let z: Vec<f64> = (0..4 * k).map(|r| b[r] + (0..cols).map(|j| w[r * cols + j] * xh[j]).sum::<f64>()).collect();
        let c2: Vec<f64> = (0..k).map(|j| sigmoid(z[k + j]) * c[j] + sigmoid(z[j]) * z[2 * k + j].tanh()).collect();
        let h2: Vec<f64> = (0..k).map(|j| sigmoid(z[3 * k + j]) * c2[j].tanh()).collect();
        (h2, c2)
    };
    let (emb, d) = get("emb");
    let row = |id: usize| emb[id * d..(id + 1) * d].to_vec();
    let v = m.vocab();
    let k = get("dec.b").0.len() / 4;
    let (mut h, mut c) = (vec![0.0; k], vec![0.0; k]);
    let ids = if enc.is_empty() { vec![v.bos()] } else { v.ids(enc) };
    for id in ids {
        (h, c) = lstm("enc", &row(id), &h, &c);
    }
    let (ow, _) = get("out.w");
    let (ob, _) = get("out.b");
    let mut prev = v.bos();
    let mut out = Vec::new();
    for target in v.ids(gold).into_iter().chain([v.eos()]) {
        (h, c) = lstm("dec", &row(prev), &h, &c);
        let logits: Vec<f64> = (0..v.len()).map(|r| ob[r] + (0..k).map(|j| ow[r * k + j] * h[j]).sum::<f64>()).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        out.push(logits[target] - lse);
        prev = target;
    }
    out
}

fn metric_oracles() -> Outcome {
    // worked values
    let f = word_f1(&["a", "b", "c"], &["b", "c", "d"]);
    check((f - 2.0 / 3.0).abs() < ORACLE_TOL, || format!("word_f1 worked example gave {f}"))?;
    let pair = [1u8, 5].map(|x| RatingRecord {
        session_id: format!("w{x}"),
        model_id: "m".into(),
        condition: MigrationMode::WithContext,
        role: RaterRole::HumanVsModel,
        fluency: x,
        engagingness: x,
        consistency: x,
    });
    let cell = aggregate_ratings(&pair, SdKind::Population)[0].formatted();
    check(cell == "3.00 (2.00)", || format!("{{1,5}} rendered {cell}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = [0.0f64; 5];
    for fixture in 0..FIXTURES {
        let (p, g) = (words(&mut rng, 12, 6), words(&mut rng, 12, 6));
        worst[0] = worst[0].max((word_f1(&p, &g) - f1_oracle(&p, &g)).abs());

        let t = words(&mut rng, 400, 40);
        worst[1] = worst[1].max((ttr(&t) - ttr_oracle(&t)).abs());
        let seg = rng.gen_range(1..60);
        let ratios: Vec<f64> = t.chunks_exact(seg).map(ttr_oracle).collect();
        let expected = if ratios.is_empty() { 0.0 } else { ratios.iter().sum::<f64>() / ratios.len() as f64 };
        worst[2] = worst[2].max((msttr(&t, seg).unwrap() - expected).abs());

        let records: Vec<RatingRecord> = (0..rng.gen_range(1..40))
            .map(|i| RatingRecord {
                session_id: format!("s{fixture}-{i}"),
                model_id: "seq2seq".into(),
                condition: if rng.gen_bool(0.5) { MigrationMode::WithContext } else { MigrationMode::WithoutContext },
                role: RaterRole::HumanVsModel,
                fluency: rng.gen_range(1..=5),
                engagingness: rng.gen_range(1..=5),
                consistency: rng.gen_range(1..=5),
            })
            .collect();
        for cell in aggregate_ratings(&records, SdKind::Population) {
            let xs: Vec<f64> = records
                .iter()
                .filter(|r| r.condition == cell.condition)
                .map(|r| match cell.measure {
                    "Fluency" => r.fluency,
                    "Engagingness" => r.engagingness,
                    _ => r.consistency,
                } as f64)
                .collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let sd = (xs.iter().map(|x| x * x).sum::<f64>() / n - mean * mean).max(0.0).sqrt();
            worst[3] = worst[3].max((cell.mean - mean).abs()).max((cell.sd - sd).abs());
        }

        let vocab = Vocabulary::from_ranked(["w0", "w1", "w2", "w3", "w4", "w5"]).unwrap();
        let m = Seq2Seq::new(vocab, 4, 3, 0.7, None, &mut rng).unwrap();
        let examples: Vec<DialogExample> = (0..rng.gen_range(1..5))
            .map(|i| {
                let mut gold = words(&mut rng, 5, 7);
                if gold.is_empty() {
                    gold.push("w1".into());
                }
                let hist = words(&mut rng, 6, 7);
                let history = if hist.is_empty() {
                    vec![]
                } else {
                    vec![Utterance::new(Speaker::User, hist.join(" "), None, None).unwrap()]
                };
                DialogExample {
                    dialog_id: format!("d{i}"),
                    scene: 0,
                    utterance: i,
                    setting: Setting::Private,
                    mode: MigrationMode::WithoutContext,
                    input: ModelInput::new(history, None),
                    gold: Utterance::new(Speaker::Agent, gold.join(" "), None, None).unwrap(),
                }
            })
            .collect();
        let lp: Vec<f64> = examples.iter().flat_map(|e| raw_log_probs(&m, &e.input.history_tokens(), &e.gold.tokens)).collect();
        let expected = (-lp.iter().sum::<f64>() / lp.len() as f64).exp();
        let trained = TrainedModel { config: TrainConfig::default(), model: Model::Seq2Seq(m) };
        let got = perplexity(&trained, &examples).unwrap();
        worst[4] = worst[4].max((got - expected).abs() / expected);
    }
    let names = ["word_f1", "TTR", "MSTTR", "aggregate_ratings", "perplexity"];
    for (name, w) in names.iter().zip(worst) {
        check(w <= ORACLE_TOL, || format!("{name} differs from its oracle by {w:e}"))?;
    }
    Ok(format!("{FIXTURES} fixtures per metric, worst deviation {:.1e}", worst.iter().cloned().fold(0.0, f64::max)))
}

// ---------------------------------------------------------------------------
// CLI helpers
// ---------------------------------------------------------------------------

fn migdial(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_migdial")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = migdial(dir, args);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("migdial {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

const SMALL: [&str; 6] = ["--set", "hidden_size=8", "--set", "embed_dim=8", "--set", "epochs=1"];

fn train_args<'a>(model: &'a str, ctx: &'a str, out: &'a str) -> Vec<&'a str> {
    let mut a = vec!["train", "train.jsonl", "--model", model, "--use-context", ctx, "--out", out, "--seed", "3"];
    a.extend(SMALL);
    a
}

/// Six small checkpoints (three models, both conditions) in `dir`.
fn six_checkpoints(dir: &Path) -> Result<Vec<String>, String> {
    ok(dir, &["gen-corpus", "--n", "8", "--seed", "1", "--out", "train.jsonl"])?;
    ok(dir, &["gen-corpus", "--n", "6", "--seed", "2", "--out", "test.jsonl"])?;
    let mut names = Vec::new();
    for model in ["seq2seq", "profile_memory", "starspace"] {
        for ctx in ["false", "true"] {
            let name = format!("{model}-{ctx}.ckpt");
            ok(dir, &train_args(model, ctx, &name))?;
            names.push(name);
        }
    }
    Ok(names)
}

fn cells(line: &str) -> Vec<String> {
    line.split('|').map(|c| c.trim().to_string()).collect()
}

// ---------------------------------------------------------------------------
// 7. report shape
// ---------------------------------------------------------------------------

fn report_shape() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let ckpts = six_checkpoints(d)?;
    let mut args = vec!["eval", "--test", "test.jsonl"];
    args.extend(ckpts.iter().map(String::as_str));
    let table = ok(d, &args)?;
    let lines: Vec<&str> = table.lines().collect();
    check(lines.len() == 5, || format!("expected 2 header lines and 3 model rows, got:\n{table}"))?;
    let expect_head = ["Model", "No Migration Context", "", "", "Migration Context", "", ""];
    check(cells(lines[0]) == expect_head, || format!("header {:?}", cells(lines[0])))?;
    let expect_sub = ["", "F1", "perplexity", "hits@1", "F1", "perplexity", "hits@1"];
    check(cells(lines[1]) == expect_sub, || format!("sub-header {:?}", cells(lines[1])))?;
    for (line, name) in lines[2..].iter().zip(["Sequence-to-Sequence", "GPMV", "Starspace"]) {
        let c = cells(line);
        check(c.len() == 7 && c[0] == name, || format!("row {c:?}, expected {name}"))?;
        for (i, v) in c[1..].iter().enumerate() {
            let is_ppl = i % 3 == 1;
            if name == "Starspace" && is_ppl {
                check(v == "-", || format!("Starspace perplexity rendered {v:?}"))?;
            } else {
                check(v.parse::<f64>().is_ok() && v.split('.').nth(1).map(str::len) == Some(2), || {
                    format!("{name} cell {v:?} is not a 2-decimal number")
                })?;
            }
        }
    }

    let labels = |cmd: &str| -> Result<Vec<String>, String> {
        let v: Value = serde_json::from_str(&ok(d, &[cmd, "train.jsonl", "--json"])?).map_err(|e| e.to_string())?;
        Ok(v.as_array().unwrap().iter().map(|r| r["label"].as_str().unwrap().to_string()).collect())
    };
    let stats_rows = [
        "Number of instances",
        "Number of dialogs",
        "Number of MRs",
        "Refs/MR",
        "Words/MR",
        "Slots/MR",
        "Sentences/Refs",
        "Words/Sentence",
    ];
    check(labels("stats")? == stats_rows, || "stats row labels differ".into())?;
    let lex_rows = ["Tokens", "Types", "LS", "TTR", "MSTR"];
    check(labels("lexstats")? == lex_rows, || "lexstats row labels differ".into())?;
    // the plain-text tables lead with the same labels
    for (cmd, rows) in [("stats", &stats_rows[..]), ("lexstats", &lex_rows[..])] {
        let text = ok(d, &[cmd, "train.jsonl"])?;
        for (line, label) in text.lines().zip(rows) {
            check(line.starts_with(label), || format!("{cmd} line {line:?} does not start with {label:?}"))?;
        }
        check(text.lines().count() == rows.len(), || format!("{cmd} printed extra lines"))?;
    }
    Ok("eval table 2x3 columns with dash perplexity for Starspace; stats and lexstats labels exact".into())
}

// ---------------------------------------------------------------------------
// 8. determinism
// ---------------------------------------------------------------------------

fn determinism() -> Outcome {
    let run = |d: &Path| -> Result<Vec<(String, Vec<u8>)>, String> {
        let mut outputs = Vec::new();
        let ckpts = six_checkpoints(d)?;
        for f in ["train.jsonl", "test.jsonl"] {
            outputs.push((f.to_string(), std::fs::read(d.join(f)).map_err(|e| e.to_string())?));
        }
        for c in &ckpts {
            outputs.push((c.clone(), std::fs::read(d.join(c)).map_err(|e| e.to_string())?));
            let h = format!("{c}.history.jsonl");
            outputs.push((h.clone(), std::fs::read(d.join(&h)).map_err(|e| e.to_string())?));
        }
        let mut args = vec!["eval", "--test", "test.jsonl", "--out", "records.jsonl"];
        args.extend(ckpts.iter().map(String::as_str));
        outputs.push(("eval table".into(), ok(d, &args)?.into_bytes()));
        outputs.push(("eval records".into(), std::fs::read(d.join("records.jsonl")).map_err(|e| e.to_string())?));
        Ok(outputs)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (run(a.path())?, run(b.path())?);
    for ((name, x), (_, y)) in ra.iter().zip(&rb) {
        check(x == y, || format!("{name} differs between runs"))?;
    }
    Ok(format!("{} artifacts byte-identical across two runs", ra.len()))
}

// ---------------------------------------------------------------------------
// 9. service protocol
// ---------------------------------------------------------------------------

struct Server {
    child: Child,
    addr: String,
}

impl Server {
    fn start(dir: &Path, args: &[&str]) -> Result<Self, String> {
        let mut child = Command::new(env!("CARGO_BIN_EXE_migdial"))
            .current_dir(dir)
            .args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| e.to_string())?;
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).map_err(|e| e.to_string())?;
        let addr = line.trim().strip_prefix("listening on http://").map(str::to_string);
        match addr {
            Some(addr) => Ok(Self { child, addr }),
            None => {
                let _ = child.kill();
                let mut err = String::new();
                let _ = child.stderr.take().unwrap().read_to_string(&mut err);
                Err(format!("server did not start: {err}"))
            }
        }
    }

    fn call(&self, method: &str, path: &str, body: Option<Value>) -> (u16, Value) {
        let mut s = TcpStream::connect(&self.addr).expect("server reachable");
        s.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
        let body = body.map(|b| b.to_string()).unwrap_or_default();
        write!(
            s,
            "{method} {path} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            self.addr,
            body.len()
        )
        .unwrap();
        let mut resp = String::new();
        s.read_to_string(&mut resp).unwrap();
        let status = resp[9..12].parse().unwrap();
        let payload = resp.split_once("\r\n\r\n").map_or("", |(_, b)| b);
        (status, serde_json::from_str(payload).unwrap_or(Value::Null))
    }

    /// Simulated crash: SIGKILL, no shutdown path runs.
    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn leaks(v: &Value) -> Option<String> {
    match v {
        Value::Object(m) => m.iter().find_map(|(k, x)| {
            if k == "mode" || k == "condition" {
                Some(format!("field {k}"))
            } else {
                leaks(x)
            }
        }),
        Value::Array(xs) => xs.iter().find_map(leaks),
        Value::String(s) if s.contains("with_context") || s.contains("without_context") => Some(format!("value {s}")),
        _ => None,
    }
}

fn blind(v: &Value, step: &str) -> Result<(), String> {
    leaks(v).map_or(Ok(()), |l| Err(format!("{step} reveals the condition ({l}): {v}")))
}

const SCRIPT: [(usize, &str); 8] = [
    (0, "hello , how are you ?"),
    (0, "i support the hawks"),
    (0, "my friend is emma"),
    (1, "hi , i am here for my appointment"),
    (1, "thanks"),
    (1, "do you remember my team ?"),
    (2, "what about my friend ?"),
    (2, "ok , bye"),
];

fn service_protocol() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    ok(d, &["gen-corpus", "--n", "12", "--seed", "4", "--out", "train.jsonl"])?;
    let mut args = train_args("seq2seq", "true", "model.ckpt");
    args[9] = "5";
    ok(d, &args)?;

    let missing = migdial(d, &["serve", "--model", "m=absent.ckpt", "--listen", "127.0.0.1:0"]);
    check(!missing.status.success(), || "serve started without its checkpoint".into())?;

    let serve_args = ["serve", "--model", "seq2seq=model.ckpt", "--listen", "127.0.0.1:0", "--store", "sessions.jsonl"];
    let server = Server::start(d, &serve_args)?;
    let (st, health) = server.call("GET", "/health", None);
    check(st == 200 && health["status"] == "ok", || format!("health probe: {st} {health}"))?;

    // scripted session: create, 8 messages over 3 scenes, advance x2, then the
    // last advance closes the scenario, then ratings
    let (st, created) = server.call("POST", "/sessions", Some(json!({"model_id": "seq2seq", "seed": 21})));
    check(st == 201, || format!("create: {st} {created}"))?;
    blind(&created, "create")?;
    let id = created["session_id"].as_str().unwrap().to_string();
    let mut scene = 0;
    let mut advances = 0;
    for (target, text) in SCRIPT {
        if target != scene {
            let (st, adv) = server.call("POST", &format!("/sessions/{id}/advance"), None);
            check(st == 200 && adv["scene"]["index"] == target, || format!("advance: {st} {adv}"))?;
            blind(&adv, "advance")?;
            scene = target;
            advances += 1;
        }
        let (st, r) = server.call("POST", &format!("/sessions/{id}/message"), Some(json!({ "text": text })));
        check(st == 200 && !r["reply"].as_str().unwrap_or("").is_empty(), || format!("message: {st} {r}"))?;
        blind(&r, "message")?;
        let (_, view) = server.call("GET", &format!("/sessions/{id}"), None);
        blind(&view, "session view")?;
    }
    check(advances == 2, || format!("{advances} scene changes"))?;
    let (st, early) = server.call("POST", &format!("/sessions/{id}/ratings"), Some(json!({"fluency": 4, "engagingness": 5, "consistency": 3})));
    check(st == 409, || format!("ratings before the end: {st} {early}"))?;
    blind(&early, "early ratings")?;
    let (st, last) = server.call("POST", &format!("/sessions/{id}/advance"), None);
    check(st == 200 && last["status"] == "awaiting_rating", || format!("final advance: {st} {last}"))?;
    blind(&last, "final advance")?;
    let (st, bad) = server.call("POST", &format!("/sessions/{id}/ratings"), Some(json!({"fluency": 6, "engagingness": 5, "consistency": 3})));
    check(st == 422 && bad["error"] == "validation", || format!("score 6: {st} {bad}"))?;
    let (st, rated) = server.call("POST", &format!("/sessions/{id}/ratings"), Some(json!({"fluency": 4, "engagingness": 5, "consistency": 3})));
    let condition = rated["condition"].as_str().unwrap_or("").to_string();
    check(st == 200 && ["with_context", "without_context"].contains(&condition.as_str()), || {
        format!("ratings: {st} {rated}")
    })?;

    // a second session left mid-scene when the process dies
    let (_, c2) = server.call("POST", "/sessions", Some(json!({"model_id": "seq2seq"})));
    let open_id = c2["session_id"].as_str().unwrap().to_string();
    for text in ["hello", "i like the bears", "see you"] {
        server.call("POST", &format!("/sessions/{open_id}/message"), Some(json!({ "text": text })));
    }
    server.call("POST", &format!("/sessions/{open_id}/advance"), None);
    server.call("POST", &format!("/sessions/{open_id}/message"), Some(json!({"text": "hi again"})));
    let (_, before_open) = server.call("GET", &format!("/sessions/{open_id}"), None);
    let (_, before_done) = server.call("GET", &format!("/sessions/{id}"), None);
    let (_, before_report) = server.call("GET", "/reports/human-eval", None);
    server.kill();

    let server = Server::start(d, &serve_args)?;
    let (_, after_open) = server.call("GET", &format!("/sessions/{open_id}"), None);
    let (_, after_done) = server.call("GET", &format!("/sessions/{id}"), None);
    let (_, after_report) = server.call("GET", "/reports/human-eval", None);
    check(after_open == before_open, || format!("open session after replay {after_open} != {before_open}"))?;
    check(after_done == before_done, || "closed session changed after replay".into())?;
    check(after_report == before_report, || "report changed after replay".into())?;
    let (st, more) = server.call("POST", &format!("/sessions/{open_id}/message"), Some(json!({"text": "still here"})));
    check(st == 200 && more["scene"]["index"] == 1, || format!("restored session cannot continue: {st} {more}"))?;
    let cells = after_report["cells"].as_array().map_or(0, Vec::len);
    check(cells == 3, || format!("report has {cells} cells"))?;
    drop(server);

    let report = ok(d, &["report", "human-eval", "sessions.jsonl"])?;
    check(report.lines().count() == 5, || format!("human-eval table:\n{report}"))?;
    Ok(format!(
        "scripted session completed ({condition} revealed only at rating), blinding held on every response, crash replay restored both sessions"
    ))
}
