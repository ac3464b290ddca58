//! Acceptance suite. Every criterion runs in order and reports one
//! PASS/FAIL line; the test fails if any criterion does.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mmkp_core::data::vocab::{LabelVocab, TokenVocab, Vocabulary, EOS_ID, RESERVED};
use mmkp_core::data::{build_vocab, encode_post, synth_corpus, EncodedPost, Mode, Post};
use mmkp_core::eval::{
    absent_recall_at_5, average_precision_at_5, beam_search, evaluate, exhaustive, f1_at_k, is_present,
    keyphrase_match, porter_stem, predict_all, DecodeOptions, ModelScorer, PostResult, Prediction,
};
use mmkp_core::model::attention::{multi_head, scaled_dot_attention, MultiHeadParams};
use mmkp_core::model::{CoAttentionStack, Direction, StepOutput};
use mmkp_core::train::{fit, FitOutcome, Split};
use mmkp_core::{Aggregation, Model, ModelConfig, ParamId, ParamStore, Tape, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

fn run(name: &str, f: impl FnOnce() -> Check) -> bool {
    let t0 = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = t0.elapsed().as_secs_f64();
    let line = match &outcome {
        Ok(detail) => format!("PASS  {name} ({secs:.1}s): {detail}"),
        Err(detail) => format!("FAIL  {name} ({secs:.1}s): {detail}"),
    };
    // written to the raw handle so the line shows without --nocapture
    let _ = writeln!(std::io::stderr(), "{line}");
    outcome.is_ok()
}

#[test]
fn acceptance() {
    let results = [
        run("1 gradient oracle", gradient_oracle),
        run("2 normalization", normalization),
        run("3 pointer-generator reduction", pointer_generator_reduction),
        run("4 beam oracle", beam_oracle),
        run("5 overfit fixture", overfit_fixture),
        run("6 warm-up effect", warm_up_effect),
        run("7 metric oracles", metric_oracles),
        run("8 porter stemmer", porter_fixture),
        run("9 determinism", determinism),
        run("10 attention reductions", attention_reductions),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}

// 1 ------------------------------------------------------------------------

const FD_EPS: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

fn full_model_error(seed: u64) -> (f64, usize) {
    let (model, vocab) = common::tiny_model::<f64>(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = common::random_case(&mut rng, &vocab, 0);
    let agg = Aggregation::BALANCED;
    let loss_of = |m: &Model<f64>| {
        let mut tape = Tape::no_grad();
        let l = m
            .instance_loss(&mut tape, &case.post, &case.target, case.label, &vocab, agg, 1.0)
            .unwrap();
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let l = model
        .instance_loss(&mut tape, &case.post, &case.target, case.label, &vocab, agg, 1.0)
        .unwrap();
    let grads = tape.backward(l).unwrap();
    let coords: Vec<(ParamId, usize)> = model
        .params()
        .iter()
        .flat_map(|(id, _, t)| (0..t.numel()).map(move |i| (id, i)))
        .collect();
    let worst = coords
        .par_iter()
        .map(|&(id, i)| {
            let mut m = model.clone();
            m.params_mut().get_mut(id).data_mut()[i] += FD_EPS;
            let up = loss_of(&m);
            m.params_mut().get_mut(id).data_mut()[i] -= 2.0 * FD_EPS;
            let down = loss_of(&m);
            let numeric = (up - down) / (2.0 * FD_EPS);
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[i]);
            rel_err(analytic, numeric)
        })
        .reduce(|| 0.0, f64::max);
    (worst, coords.len())
}

fn gradient_oracle() -> Check {
    let t0 = Instant::now();
    let vocab = common::tiny_vocab();
    ensure!(
        vocab.gen.len() == 20 && vocab.cls.len() == 4,
        "tiny vocabulary is {}/{}",
        vocab.gen.len(),
        vocab.cls.len()
    );
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for seed in 0..5 {
        let (err, n) = full_model_error(seed);
        ensure!(err < 1e-4, "seed {seed}: max relative error {err:e}");
        worst = worst.max(err);
        coords = n;
    }
    let elapsed = t0.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("max relative error {worst:.2e} over {coords} coordinates x 5 seeds"))
}

// 2 ------------------------------------------------------------------------

fn unit_sum(what: &str, xs: &[f64]) -> Result<f64, String> {
    let dev = (xs.iter().sum::<f64>() - 1.0).abs();
    ensure!(dev <= 1e-6, "{what} sums to 1 {dev:+e}");
    Ok(dev)
}

fn normalization() -> Check {
    let mut worst: f64 = 0.0;
    let mut rows = 0usize;
    for seed in 0..100 {
        let (model, vocab) = common::tiny_model::<f64>(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let case = common::random_case(&mut rng, &vocab, seed as usize);
        let mut tape = Tape::no_grad();
        let mut records = Vec::new();
        let prep = model
            .prepare(&mut tape, &case.post, &vocab, Aggregation::BALANCED, Some(&mut records))
            .map_err(|e| e.to_string())?;
        let p_cls = tape.softmax_last(prep.logits).unwrap();
        worst = worst.max(unit_sum("P_cls", &tape.value(p_cls).to_f64_vec())?);
        worst = worst.max(unit_sum("beta", &tape.value(prep.beta).to_f64_vec())?);
        ensure!(!records.is_empty(), "instance {seed}: no co-attention records");
        for r in &records {
            worst = worst.max(unit_sum("co-attention row", &r.weights)?);
            rows += 1;
        }
        let (_, steps) = model
            .sequence_loss(&mut tape, &prep, &vocab, &case.target)
            .map_err(|e| e.to_string())?;
        for s in &steps {
            worst = worst.max(unit_sum("P_gen", &tape.value(s.p_gen).to_f64_vec())?);
            worst = worst.max(unit_sum("decoder attention", &tape.value(s.alpha).to_f64_vec())?);
            worst = worst.max(unit_sum("P_unf", &tape.value(s.p_unf).to_f64_vec())?);
            rows += 1;
        }
    }
    Ok(format!("100 instances, {rows} distributions, max deviation {worst:.1e}"))
}

// 3 ------------------------------------------------------------------------

/// `λ·P_gen(w) + (1−λ)·Σ_{i: x_i = w} α_i` over the source tokens, with
/// out-of-vocabulary source tokens given slots after the generation
/// vocabulary in order of first appearance.
fn pointer_generator(p_gen: &[f64], lambda: f64, alpha: &[f64], source: &[String], gen: &TokenVocab) -> Vec<f64> {
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let mut ids = Vec::with_capacity(source.len());
    for t in source {
        let id = match gen.id(t) {
            Some(id) => id,
            None => {
                let next = p_gen.len() + slot.len();
                *slot.entry(t.as_str()).or_insert(next)
            }
        };
        ids.push(id);
    }
    let size = p_gen.len() + slot.len();
    let mut attn = vec![0.0; size];
    for (&id, &a) in ids.iter().zip(alpha) {
        attn[id] += a;
    }
    (0..size)
        .map(|w| {
            let pg = if w < p_gen.len() { p_gen[w] } else { 0.0 };
            lambda * pg + (1.0 - lambda) * attn[w]
        })
        .collect()
}

fn pointer_generator_reduction() -> Check {
    let mut steps_checked = 0;
    let mut oov = 0;
    for seed in 0..20 {
        let (model, vocab) = common::tiny_model::<f64>(100 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let case = common::random_case(&mut rng, &vocab, seed as usize);
        let mut tape = Tape::no_grad();
        let prep = model
            .prepare(&mut tape, &case.post, &vocab, Aggregation::SOURCE_ONLY, None)
            .map_err(|e| e.to_string())?;
        oov += prep.ext.extra().len();
        let (_, steps) = model
            .sequence_loss(&mut tape, &prep, &vocab, &case.target)
            .map_err(|e| e.to_string())?;
        for (t, s) in steps.iter().enumerate() {
            let expect = pointer_generator(
                &tape.value(s.p_gen).to_f64_vec(),
                tape.value(s.lambda).item(),
                &tape.value(s.alpha).to_f64_vec(),
                &case.post.source,
                &vocab.gen,
            );
            let got = tape.value(s.p_unf).to_f64_vec();
            ensure!(
                got == expect,
                "instance {seed} step {t}: P_unf differs from the pointer-generator mixture"
            );
            steps_checked += 1;
        }
    }
    Ok(format!("20 instances, {steps_checked} steps bitwise equal, {oov} copied OOV slots"))
}

// 4 ------------------------------------------------------------------------

fn beam_world() -> (Vocabulary, EncodedPost, ModelConfig) {
    let mut gen: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    gen.extend(["cat", "sun"].map(String::from));
    let vocab = Vocabulary {
        gen: TokenVocab::from_tokens(gen).unwrap(),
        cls: LabelVocab::new(vec!["cat".into(), "blat".into()], vec![1, 1]).unwrap(),
    };
    let post = Post {
        id: "p".into(),
        text: ["sun", "zorp", "cat"].map(String::from).to_vec(),
        ocr: vec![],
        attributes: vec!["cat".into()],
        visual_features: Some(vec![vec![0.5; 6], vec![-0.25; 6]]),
        keyphrases: vec!["cat".into()],
    };
    let encoded = encode_post(&post, &vocab).unwrap();
    let config = ModelConfig {
        max_decode_len: 3,
        ..common::tiny_config()
    };
    (vocab, encoded, config)
}

fn beam_oracle() -> Check {
    let (vocab, post, config) = beam_world();
    let mut max_gap: f64 = 0.0;
    let mut size = 0;
    for seed in 0..50 {
        let mut m = Model::<f64>::new(config.clone(), vocab.gen.len(), vocab.cls.len(), seed).unwrap();
        common::randomize(&mut m, seed, 1.0);
        let scorer = ModelScorer::new(&m, &vocab, &post, Aggregation::BALANCED).map_err(|e| e.to_string())?;
        size = scorer.prepared().ext.len();
        ensure!(size <= 12, "extended vocabulary has {size} entries");
        let beam = beam_search(&scorer, 10, 3, EOS_ID).map_err(|e| e.to_string())?;
        let best = exhaustive(&scorer, 3, EOS_ID).map_err(|e| e.to_string())?.ok_or("no sequence")?;
        ensure!(beam[0].tokens == best.tokens, "seed {seed}: {:?} vs {:?}", beam[0].tokens, best.tokens);
        let gap = (beam[0].score - best.score).abs();
        ensure!(gap <= 1e-9, "seed {seed}: score gap {gap:e}");
        max_gap = max_gap.max(gap);
    }
    Ok(format!("50 parameterizations, vocabulary {size}, max score gap {max_gap:.1e}"))
}

// 5 ------------------------------------------------------------------------

/// Tokens need six occurrences to enter the generation vocabulary, so
/// text triggers (two occurrences) are reachable only by copying and
/// attribute-topic keyphrases (four) only through the classifier.
const FIXTURE_MIN_COUNT: usize = 6;

/// Epoch budget for the fixture; the loss has flattened well before it.
const FIXTURE_EPOCHS: usize = 60;

/// Default architecture with the visual width of the synthetic features.
fn fixture_model_config() -> ModelConfig {
    ModelConfig {
        visual_dim: mmkp_core::data::synth::VISUAL_DIM,
        ..ModelConfig::default()
    }
}

struct Trained {
    posts: Vec<Post>,
    vocab: Vocabulary,
    split: Split,
    outcome: FitOutcome<f32>,
    train_cfg: TrainConfig,
    elapsed: Duration,
}

fn fixture() -> Result<Trained, String> {
    let t0 = Instant::now();
    let posts = synth_corpus(50, 30, 7).map_err(|e| e.to_string())?;
    let vocab = build_vocab(&posts, 45_000, FIXTURE_MIN_COUNT).map_err(|e| e.to_string())?;
    let split = Split::build(&posts, &vocab, Mode::Train).map_err(|e| e.to_string())?;
    let model = Model::<f32>::new(fixture_model_config(), vocab.gen.len(), vocab.cls.len(), 7).map_err(|e| e.to_string())?;
    let train_cfg = TrainConfig {
        max_epochs: FIXTURE_EPOCHS,
        ..TrainConfig::default()
    };
    let outcome = fit(model, &split, &split, &vocab, &train_cfg, |_| {}).map_err(|e| e.to_string())?;
    Ok(Trained {
        posts,
        vocab,
        split,
        outcome,
        train_cfg,
        elapsed: t0.elapsed(),
    })
}

static TRAINED: std::sync::OnceLock<Result<Trained, String>> = std::sync::OnceLock::new();

fn trained() -> Result<&'static Trained, String> {
    TRAINED.get_or_init(fixture).as_ref().map_err(Clone::clone)
}

fn decode_all(model: &Model<f32>, vocab: &Vocabulary, split: &Split, agg: Aggregation) -> Result<Vec<Prediction>, String> {
    let opts = DecodeOptions {
        beam: 10,
        top_k: 10,
        max_len: model.config().max_decode_len,
        agg,
    };
    predict_all(model, vocab, &split.posts, opts).map_err(|e| e.to_string())
}

fn overfit_fixture() -> Check {
    let t0 = Instant::now();
    let t = trained()?;
    let pops: HashSet<_> = t
        .posts
        .iter()
        .map(|p| mmkp_core::data::Population::of_id(&p.id).unwrap())
        .collect();
    ensure!(pops.len() == 3, "fixture covers {} sub-populations", pops.len());
    let epochs = t.outcome.log.len();
    ensure!(epochs <= 200, "{epochs} epochs");

    let model = &t.outcome.best;
    let preds = decode_all(model, &t.vocab, &t.split, Aggregation::BALANCED)?;
    let results: Vec<PostResult> = preds
        .iter()
        .zip(&t.posts)
        .map(|(pr, p)| PostResult {
            id: p.id.clone(),
            predictions: pr.keyphrases.clone(),
            golds: p.keyphrases.clone(),
            text: p.text.clone(),
        })
        .collect();
    let report = evaluate(&results, |k| t.vocab.cls.count(k)).map_err(|e| e.to_string())?;

    let outside_gen = |k: &str| k.split_whitespace().all(|w| !t.vocab.gen.contains(w));
    let in_source = |k: &str, enc: &EncodedPost| k.split_whitespace().all(|w| enc.source.iter().any(|s| s == w));
    let copied = results
        .iter()
        .zip(&t.split.posts)
        .filter(|(r, enc)| {
            let g = &r.golds[0];
            outside_gen(g) && in_source(g, enc) && r.predictions.first().is_some_and(|p| keyphrase_match(p, g))
        })
        .count();

    // absent golds whose tokens are neither generable nor in the source
    // can only come from the classifier's top predictions
    let source_only = decode_all(model, &t.vocab, &t.split, Aggregation::SOURCE_ONLY)?;
    let mut aggregated = 0;
    for ((r, enc), so) in results.iter().zip(&t.split.posts).zip(&source_only) {
        let g = &r.golds[0];
        let unreachable = outside_gen(g)
            && !is_present(g, &r.text)
            && g.split_whitespace().all(|w| !enc.source.iter().any(|s| s == w));
        let found = r.predictions.iter().take(5).any(|p| keyphrase_match(p, g));
        let found_without = so.keyphrases.iter().any(|p| keyphrase_match(p, g));
        if unreachable && found && !found_without {
            aggregated += 1;
        }
    }
    ensure!(report.f1_at_1 >= 0.95, "F1@1 {:.4} after {epochs} epochs", report.f1_at_1);
    ensure!(copied >= 1, "no copied out-of-vocabulary keyphrase predicted first");
    ensure!(aggregated >= 1, "no absent keyphrase recovered through the classifier");
    let elapsed = t0.elapsed();
    ensure!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
    Ok(format!(
        "F1@1 {:.4} after {epochs} epochs (best {}), {copied} copied OOV, {aggregated} absent via classifier, training {:.0}s",
        report.f1_at_1,
        t.outcome.best_epoch,
        t.elapsed.as_secs_f64()
    ))
}

// 6 ------------------------------------------------------------------------

fn teacher_forced(model: &Model<f64>, vocab: &Vocabulary, split: &Split, agg: Aggregation) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for inst in &split.instances {
        let mut tape = Tape::no_grad();
        let prep = model.prepare(&mut tape, &split.posts[inst.post], vocab, agg, None).unwrap();
        let (_, steps) = model.sequence_loss(&mut tape, &prep, vocab, &inst.target).unwrap();
        out.extend(steps.iter().map(|s: &StepOutput| tape.value(s.p_unf).to_f64_vec()));
    }
    out
}

fn perturb_classifier(model: &Model<f64>, seed: u64) -> Model<f64> {
    let mut m = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in ["cls.w2", "cls.b2"] {
        let id = m.params().id(name).unwrap();
        let t = m.params_mut().get_mut(id);
        for v in t.data_mut() {
            *v += rng.gen_range(-2.0..2.0);
        }
    }
    m
}

/// Steps whose distribution changed, and the largest change among steps
/// that kept their extended vocabulary.
fn changes(a: &[Vec<f64>], b: &[Vec<f64>]) -> (usize, f64) {
    let changed = a.iter().zip(b).filter(|(x, y)| x != y).count();
    let max = a
        .iter()
        .zip(b)
        .filter(|(x, y)| x.len() == y.len())
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max);
    (changed, max)
}

fn warm_up_effect() -> Check {
    let t = trained()?;
    let schedule: Vec<(f64, f64)> = t.outcome.log.iter().map(|e| (e.a, e.b)).collect();
    let w = t.train_cfg.warmup_epochs;
    ensure!(
        schedule[..w].iter().all(|&ab| ab == (1.0, 0.0)) && schedule[w..].iter().all(|&ab| ab == (0.5, 0.5)),
        "schedule {schedule:?}"
    );

    let warm_cfg = TrainConfig {
        max_epochs: w,
        ..t.train_cfg.clone()
    };
    let model = Model::<f32>::new(fixture_model_config(), t.vocab.gen.len(), t.vocab.cls.len(), 7).unwrap();
    let warm = fit(model, &t.split, &t.split, &t.vocab, &warm_cfg, |_| {}).map_err(|e| e.to_string())?;
    ensure!(warm.log[..] == t.outcome.log[..w], "warm-up prefix differs from the full run");
    let warm = warm.best.cast::<f64>();
    let done = t.outcome.best.cast::<f64>();

    // inert: P_unf under (1, 0) ignores the classifier entirely
    let base = teacher_forced(&warm, &t.vocab, &t.split, Aggregation::SOURCE_ONLY);
    let moved = teacher_forced(&perturb_classifier(&warm, 1), &t.vocab, &t.split, Aggregation::SOURCE_ONLY);
    let (changed, max) = changes(&base, &moved);
    ensure!(changed == 0, "classifier perturbation moved {changed} warm-up steps (max {max:e})");

    let mut tape = Tape::new();
    let inst = &t.split.instances[1];
    let prep = warm
        .prepare(&mut tape, &t.split.posts[inst.post], &t.vocab, Aggregation::SOURCE_ONLY, None)
        .unwrap();
    let (loss, _) = warm.sequence_loss(&mut tape, &prep, &t.vocab, &inst.target).unwrap();
    let grads = tape.backward(loss).unwrap();
    for name in ["cls.w1", "cls.b1", "cls.w2", "cls.b2"] {
        let id = warm.params().id(name).unwrap();
        let g = grads.param(id).map_or(0.0, |g| g.data().iter().map(|v| v.abs()).sum());
        ensure!(g == 0.0, "generation loss reaches {name} during warm-up");
    }

    // active: after the switch the same perturbation moves P_unf
    let base = teacher_forced(&done, &t.vocab, &t.split, Aggregation::BALANCED);
    let moved = teacher_forced(&perturb_classifier(&done, 1), &t.vocab, &t.split, Aggregation::BALANCED);
    let (changed, max) = changes(&base, &moved);
    ensure!(changed > 0 && max > 1e-3, "classifier perturbation moved {changed} steps by at most {max:e} after warm-up");
    Ok(format!(
        "schedule (1,0)x{w} then (0.5,0.5); {n} warm-up steps bitwise unchanged; after the switch {changed}/{n} steps change (max {max:.3})",
        n = base.len()
    ))
}

// 7 ------------------------------------------------------------------------

#[derive(serde::Deserialize)]
struct MetricFixture {
    posts: Vec<PostResult>,
    train_counts: HashMap<String, usize>,
}

fn metric_oracles() -> Check {
    let f: MetricFixture =
        serde_json::from_str(include_str!("../../core/tests/fixtures/metric_fixture.json")).map_err(|e| e.to_string())?;
    ensure!(f.posts.len() == 10, "fixture has {} posts", f.posts.len());
    let close = |got: f64, want: f64, what: &str| -> Result<(), String> {
        ensure!((got - want).abs() <= 1e-9, "{what}: got {got}, want {want}");
        Ok(())
    };
    // per post: F1@1, F1@3, AP@5, absent recall@5 (None when no absent gold)
    let want: [(f64, f64, f64, Option<f64>); 9] = [
        (1.0, 0.5, 1.0, None),
        (2.0 / 3.0, 0.8, 1.0, Some(1.0)),
        (0.0, 0.0, 0.0, Some(0.0)),
        (0.0, 0.0, 0.0, None),
        (1.0, 0.5, 1.0, Some(1.0)),
        (0.0, 2.0 / 3.0, 0.5, Some(1.0)),
        (0.5, 1.0, 1.0, Some(1.0)),
        (0.0, 0.0, 0.1, Some(0.5)),
        (1.0, 1.0, 1.0, None),
    ];
    let scored: Vec<&PostResult> = f.posts.iter().filter(|r| !r.golds.is_empty()).collect();
    ensure!(scored.len() == 9, "{} scored posts", scored.len());
    for (r, (f1, f3, ap, absent)) in scored.iter().zip(want) {
        close(f1_at_k(&r.predictions, &r.golds, 1).unwrap(), f1, &format!("{} F1@1", r.id))?;
        close(f1_at_k(&r.predictions, &r.golds, 3).unwrap(), f3, &format!("{} F1@3", r.id))?;
        close(average_precision_at_5(&r.predictions, &r.golds).unwrap(), ap, &format!("{} AP@5", r.id))?;
        let got = absent_recall_at_5(&r.predictions, &r.golds, &r.text);
        ensure!(got.is_some() == absent.is_some(), "{} absent recall presence", r.id);
        if let (Some(g), Some(w)) = (got, absent) {
            close(g, w, &format!("{} absent recall@5", r.id))?;
        }
    }
    let report = evaluate(&f.posts, |k| f.train_counts.get(k).copied().unwrap_or(0)).map_err(|e| e.to_string())?;
    close(report.f1_at_1, 25.0 / 54.0, "F1@1")?;
    close(report.f1_at_3, 67.0 / 135.0, "F1@3")?;
    close(report.map_at_5, 28.0 / 45.0, "MAP@5")?;
    close(report.absent_recall_at_5.unwrap_or(f64::NAN), 0.75, "absent recall@5")?;
    Ok(format!(
        "F1@1 {:.6} F1@3 {:.6} MAP@5 {:.6} absent R@5 0.75",
        report.f1_at_1, report.f1_at_3, report.map_at_5
    ))
}

// 8 ------------------------------------------------------------------------

fn porter_fixture() -> Check {
    let pairs: Vec<(&str, &str)> = include_str!("../../core/tests/fixtures/porter_reference.tsv")
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.split_once('\t').unwrap())
        .collect();
    ensure!(pairs.len() >= 100, "only {} pairs", pairs.len());
    let wrong: Vec<String> = pairs
        .iter()
        .filter(|(w, s)| porter_stem(w) != *s)
        .map(|(w, s)| format!("{w}->{} (want {s})", porter_stem(w)))
        .collect();
    ensure!(wrong.is_empty(), "{} disagreements: {wrong:?}", wrong.len());
    Ok(format!("{}/{} pairs agree", pairs.len(), pairs.len()))
}

// 9 ------------------------------------------------------------------------

fn mmkp(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mmkp"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "mmkp {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    std::fs::write(
        p("config.toml"),
        "[model]\nd_model = 16\nd_emb = 8\nheads = 2\nd_head = 4\nvisual_dim = 8\n\n[train]\nmax_epochs = 4\n",
    )
    .map_err(|e| e.to_string())?;
    mmkp(&["synth", "--n", "30", "--vocab", "30", "--seed", "7", "--out", &p("data.jsonl")])?;
    for run in ["a", "b"] {
        mmkp(&[
            "train", "--config", &p("config.toml"), "--train", &p("data.jsonl"), "--val", &p("data.jsonl"), "--out",
            &p(run), "--seed", "7",
        ])?;
    }
    let read = |run: &str, file: &str| std::fs::read(Path::new(&p(run)).join(file)).map_err(|e| e.to_string());
    let mut sizes = Vec::new();
    for file in ["train_log.jsonl", "model.ckpt"] {
        let (a, b) = (read("a", file)?, read("b", file)?);
        ensure!(!a.is_empty() && a == b, "{file} differs between runs");
        sizes.push(a.len());
    }
    Ok(format!("logs ({} B) and checkpoints ({} B) byte-identical", sizes[0], sizes[1]))
}

// 10 -----------------------------------------------------------------------

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn attention_reductions() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);

    // H = 1 with identity projections is plain scaled-dot attention
    for d in [3, 5, 8] {
        let mut store = ParamStore::new();
        let p = MultiHeadParams::register(&mut store, "mha", d, 1, d, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.set(id, Tensor::identity(d)).unwrap();
        }
        let mut tape = Tape::new();
        let q = tape.constant(random_mat(&mut rng, 2, d));
        let m = tape.constant(random_mat(&mut rng, 4, d));
        let (a, _) = multi_head(&mut tape, &store, &p, q, m, m).unwrap();
        let (b, _) = scaled_dot_attention(&mut tape, q, m, m).unwrap();
        ensure!(tape.value(a).data() == tape.value(b).data(), "d={d}: multi-head differs from plain attention");
    }

    // L = 0 stacks return the pooled query
    for dir in Direction::ALL {
        let mut store = ParamStore::new();
        let s = CoAttentionStack::register(&mut store, dir, 0, 6, 2, 3, 12, &mut rng).unwrap();
        let mut tape = Tape::new();
        let q = tape.constant(random_mat(&mut rng, 4, 6));
        let m = tape.constant(random_mat(&mut rng, 3, 6));
        let out = s.forward(&mut tape, &store, q, m, None).unwrap();
        let pooled = tape.pool(q, dir.query_pool()).unwrap();
        ensure!(
            tape.value(out).data() == tape.value(pooled).data(),
            "{}: zero-layer stack is not the pooled query",
            dir.as_str()
        );
    }

    // text-only posts: finite fused context, and the model trains
    let posts: Vec<Post> = synth_corpus(12, 30, 7)
        .unwrap()
        .into_iter()
        .map(|mut p| {
            p.visual_features = None;
            p.attributes.clear();
            p.ocr.clear();
            p
        })
        .collect();
    let vocab = build_vocab(&posts, 45_000, 1).unwrap();
    let split = Split::build(&posts, &vocab, Mode::Train).map_err(|e| e.to_string())?;
    let config = ModelConfig {
        d_model: 16,
        d_emb: 8,
        heads: 2,
        d_head: 4,
        visual_dim: 8,
        ..ModelConfig::default()
    };
    let model = Model::<f32>::new(config.clone(), vocab.gen.len(), vocab.cls.len(), 3).unwrap();
    let mut tape = Tape::no_grad();
    let mut records = Vec::new();
    let enc = model.encode(&mut tape, &split.posts[0], Some(&mut records)).map_err(|e| e.to_string())?;
    let c = tape.value(enc.c_fuse);
    ensure!(c.shape() == [1, config.d_model], "c_fuse shape {:?}", c.shape());
    ensure!(c.all_finite() && c.data().iter().any(|&v| v != 0.0), "degenerate c_fuse");
    ensure!(records.is_empty(), "text-only post ran co-attention stacks");

    let cfg = TrainConfig {
        max_epochs: 4,
        warmup_epochs: 0,
        ..TrainConfig::default()
    };
    let out = fit(model, &split, &split, &vocab, &cfg, |_| {}).map_err(|e| e.to_string())?;
    let losses: Vec<f64> = out.log.iter().map(|e| e.train_loss).collect();
    ensure!(losses.windows(2).all(|w| w[1] < w[0]), "text-only losses {losses:?}");
    let preds = mmkp_core::eval::predict_greedy(&out.best, &vocab, &split.posts[0], 6, Aggregation::BALANCED)
        .map_err(|e| e.to_string())?;
    ensure!(preds.keyphrases.len() <= 1, "greedy decoding returned {:?}", preds.keyphrases);
    Ok(format!(
        "identity H=1 exact, L=0 pooled for 4 directions, text-only loss {:.3} -> {:.3}",
        losses[0],
        losses[losses.len() - 1]
    ))
}
