//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p stm-core --test acceptance`. The learnability and
//! policy-ablation criteria train the network from scratch and dominate
//! the runtime.

use std::collections::BTreeMap;
use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stm_core::data::{synth_scenes, synth_videos, write_annotation, SynthConfig, Video};
use stm_core::encoders::KeyValuePair;
use stm_core::engine::{run_video, InferenceConfig};
use stm_core::eval::{contour_f, evaluate_model, jaccard, Mask};
use stm_core::gradcheck::suite::full_suite;
use stm_core::memory::{read_fast, space_time_read};
use stm_core::multi_object::{argmax_labels, soft_aggregate};
use stm_core::training::{main_train, pretrain, RunOptions, TrainConfig};
use stm_core::{MemoryPolicy, MemoryStore, StmModel, Tensor};

/// Iteration budget of the desk-scale training runs.
const PRETRAIN_ITERATIONS: usize = 1000;
const MAIN_ITERATIONS: usize = 3000;
const TRAIN_SEQUENCES: usize = 200;
const HELD_OUT_SEQUENCES: usize = 24;
const FRAMES: usize = 16;
const SIDE: usize = 64;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn run(&mut self, name: &str, f: impl FnOnce() -> Result<Verdict, String>) {
        let start = Instant::now();
        let v = f().unwrap_or_else(|e| verdict(false, format!("error: {e}")));
        let status = if v.passed { "PASS" } else { "FAIL" };
        self.failures += usize::from(!v.passed);
        println!("{status} {name}: {} [{:.1}s]", v.detail, start.elapsed().as_secs_f64());
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn random_read(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize, ck: usize, cv: usize, scale: f64) -> [Tensor; 4] {
    [
        Tensor::uniform(&[ck, h, w], -scale, scale, rng).unwrap(),
        Tensor::uniform(&[cv, h, w], -1.0, 1.0, rng).unwrap(),
        Tensor::uniform(&[t, ck, h, w], -scale, scale, rng).unwrap(),
        Tensor::uniform(&[t, cv, h, w], -1.0, 1.0, rng).unwrap(),
    ]
}

fn read_equivalence() -> Result<Verdict, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let start = Instant::now();
    let mut worst = 0.0f64;
    let shapes = 60;
    for _ in 0..shapes {
        let t = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let (ck, cv) = (rng.random_range(1..=16), rng.random_range(1..=32));
        let [kq, vq, km, vm] = random_read(&mut rng, t, h, w, ck, cv, 1.0);
        let slow = space_time_read(&kq, &vq, &km, &vm).map_err(err)?;
        let fast = read_fast(&kq, &vq, &km, &vm, false).map_err(err)?;
        worst = worst.max(slow.y.max_abs_diff(&fast.y));
    }
    let elapsed = start.elapsed();
    Ok(verdict(
        worst < 1e-5 && elapsed < Duration::from_secs(10),
        format!("max |fast - loop| = {worst:.2e} over {shapes} shapes in {:.2}s", elapsed.as_secs_f64()),
    ))
}

fn attention_normalization() -> Result<Verdict, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let t = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let [kq, vq, km, vm] = random_read(&mut rng, t, h, w, 8, 16, 2.0);
        let weights = read_fast(&kq, &vq, &km, &vm, false).map_err(err)?.weights.unwrap();
        let q = h * w;
        for i in 0..q {
            let total: f64 = (0..t * q).map(|j| weights.data()[j * q + i] as f64).sum();
            worst = worst.max((total - 1.0).abs());
        }
    }
    let [kq, vq, km, vm] = random_read(&mut rng, 3, 8, 8, 16, 32, 1e3);
    let mut finite = true;
    for out in [
        read_fast(&kq, &vq, &km, &vm, false).map_err(err)?,
        space_time_read(&kq, &vq, &km, &vm).map_err(err)?,
    ] {
        finite &= out.y.is_finite() && out.weights.unwrap().is_finite();
    }
    Ok(verdict(
        worst < 1e-5 && finite,
        format!("max |sum - 1| = {worst:.2e}; keys at magnitude 1e3 finite: {finite}"),
    ))
}

fn memory_invariances() -> Result<Verdict, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut dup, mut perm) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let t = rng.random_range(2..=3);
        let [kq, vq, km, vm] = random_read(&mut rng, t, 4, 5, 8, 16, 1.0);
        let base = read_fast(&kq, &vq, &km, &vm, true).map_err(err)?.y;
        let km2 = Tensor::concat(&[&km, &km], 0).map_err(err)?;
        let vm2 = Tensor::concat(&[&vm, &vm], 0).map_err(err)?;
        dup = dup.max(base.max_abs_diff(&read_fast(&kq, &vq, &km2, &vm2, true).map_err(err)?.y));
        let order: Vec<usize> = (0..t).rev().collect();
        let pick = |m: &Tensor| {
            let parts: Vec<Tensor> = order.iter().map(|&i| m.slice_axis(0, i, 1).unwrap()).collect();
            Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0).unwrap()
        };
        let out = read_fast(&kq, &vq, &pick(&km), &pick(&vm), true).map_err(err)?.y;
        perm = perm.max(base.max_abs_diff(&out));
    }
    Ok(verdict(
        dup < 1e-5 && perm < 1e-6,
        format!("duplication {dup:.2e}, permutation {perm:.2e}"),
    ))
}

fn gradient_suite() -> Result<Verdict, String> {
    let start = Instant::now();
    let checks = full_suite(7).map_err(err)?;
    let elapsed = start.elapsed();
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{} ({:.2e})", c.name, c.rel_err))
        .collect();
    let worst_op = checks
        .iter()
        .filter(|c| c.tolerance <= 1e-3)
        .map(|c| c.rel_err)
        .fold(0.0, f64::max);
    let end_to_end = checks.iter().filter(|c| c.tolerance > 1e-3).map(|c| c.rel_err).fold(0.0, f64::max);
    let mut detail = format!(
        "{} checks, worst op {worst_op:.2e}, end-to-end {end_to_end:.2e}, {:.1}s",
        checks.len(),
        elapsed.as_secs_f64()
    );
    if !failed.is_empty() {
        detail.push_str(&format!("; failed: {}", failed.join(", ")));
    }
    Ok(verdict(failed.is_empty() && elapsed < Duration::from_secs(300), detail))
}

fn soft_aggregation() -> Result<Verdict, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst = 0.0f64;
    let mut equivariant = true;
    for m in 1..=4 {
        let probs: Vec<Tensor> = (0..m).map(|_| Tensor::uniform(&[1, 16, 16], 0.0, 1.0, &mut rng).unwrap()).collect();
        let agg = soft_aggregate(&probs).map_err(err)?;
        let n = 256;
        for i in 0..n {
            let total: f64 = (0..=m).map(|c| agg.data()[c * n + i] as f64).sum();
            worst = worst.max((total - 1.0).abs());
        }
        let order: Vec<usize> = (0..m).rev().collect();
        let permuted: Vec<Tensor> = order.iter().map(|&k| probs[k].clone()).collect();
        let agg2 = soft_aggregate(&permuted).map_err(err)?;
        equivariant &= agg.data()[..n] == agg2.data()[..n];
        for (new, &old) in order.iter().enumerate() {
            equivariant &= agg.data()[(old + 1) * n..(old + 2) * n] == agg2.data()[(new + 1) * n..(new + 2) * n];
        }
    }
    let count = 10_000;
    let p: Tensor = Tensor::uniform(&[1, 100, 100], 0.0, 1.0, &mut rng).map_err(err)?;
    let agg = soft_aggregate(std::slice::from_ref(&p)).map_err(err)?;
    let labels = argmax_labels(&agg).map_err(err)?;
    let agreeing = (0..count)
        .filter(|&i| {
            let raw = p.data()[i] > 0.5;
            raw == (agg.data()[count + i] > 0.5) && raw == (labels.labels[i] == 1)
        })
        .count();
    Ok(verdict(
        worst < 1e-5 && equivariant && agreeing == count,
        format!("max |sum - 1| = {worst:.2e}; permutation exact: {equivariant}; threshold kept {agreeing}/{count}"),
    ))
}

fn policy_simulation() -> Result<Verdict, String> {
    let pair = |f: usize| KeyValuePair::new(Tensor::full(&[2, 1, 1], f as f32).unwrap(), Tensor::full(&[4, 1, 1], f as f32).unwrap()).unwrap();
    let mut mismatches = 0;
    for n in [Some(1usize), Some(2), Some(5), None] {
        let policy = n.map_or(MemoryPolicy::FirstAndPrevious, MemoryPolicy::Interval);
        let mut store = MemoryStore::new(policy, None).map_err(err)?;
        store.init(pair(0), 0).map_err(err)?;
        mismatches += usize::from(store.len() != 1);
        for t in 1..=100usize {
            store.update(pair(t), t).map_err(err)?;
            let permanent = match n {
                Some(n) => 1 + t / n - usize::from(t % n == 0),
                None => 1,
            };
            mismatches += usize::from(store.len() != permanent + 1 || store.previous_frame() != Some(t));
        }
    }
    Ok(verdict(mismatches == 0, format!("{mismatches} mismatches over N in {{1, 2, 5, inf}}, t <= 100")))
}

fn rect(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Mask {
    Mask::from_fn(h, w, |y, x| (y0..y1).contains(&y) && (x0..x1).contains(&x))
}

fn metric_cases() -> Result<Verdict, String> {
    let full = rect(8, 8, 0, 8, 0, 8);
    let left = rect(8, 8, 0, 8, 0, 4);
    let right = rect(8, 8, 0, 8, 4, 8);
    let a = rect(8, 8, 0, 4, 0, 4);
    let b = rect(8, 8, 0, 4, 2, 6);
    let sq = rect(20, 20, 5, 15, 5, 15);
    let cases: Vec<(&str, f64, f64)> = vec![
        ("J identical", jaccard(&full, &full).map_err(err)?, 1.0),
        ("J disjoint", jaccard(&left, &right).map_err(err)?, 0.0),
        ("J half", jaccard(&left, &full).map_err(err)?, 0.5),
        ("J half-overlap", jaccard(&a, &b).map_err(err)?, 1.0 / 3.0),
        ("F identical", contour_f(&sq, &sq, 1.0).map_err(err)?, 1.0),
        (
            "F far apart",
            contour_f(&rect(40, 40, 0, 4, 0, 4), &rect(40, 40, 20, 30, 20, 30), 2.0).map_err(err)?,
            0.0,
        ),
        ("F shifted square", contour_f(&rect(20, 20, 5, 15, 6, 16), &sq, 1.0).map_err(err)?, 1.0),
    ];
    let bad: Vec<String> = cases
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > 1e-9)
        .map(|(n, got, want)| format!("{n}: {got} != {want}"))
        .collect();
    Ok(verdict(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} tabulated cases exact", cases.len())
        } else {
            bad.join("; ")
        },
    ))
}

fn determinism() -> Result<Verdict, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let model = StmModel::init(Default::default(), 21).map_err(err)?;
    let config = SynthConfig {
        sequences: 2,
        frames: 8,
        max_objects: 3,
        ..Default::default()
    };
    let inference = InferenceConfig {
        deterministic: true,
        ..Default::default()
    };
    let mut runs = Vec::new();
    for run in 0..2 {
        let videos = synth_videos(&config, &mut ChaCha8Rng::seed_from_u64(5)).map_err(err)?;
        let mut bytes = Vec::new();
        for v in &videos {
            let out = run_video(&model, &v.frames, &v.labels[0], inference).map_err(err)?;
            for (i, l) in out.labels.iter().enumerate() {
                let path = dir.path().join(format!("{run}/{}/{i:05}.png", v.name));
                write_annotation(&path, l).map_err(err)?;
                bytes.push(fs::read(&path).map_err(err)?);
            }
        }
        runs.push(bytes);
    }
    let identical = runs[0] == runs[1];
    Ok(verdict(identical, format!("{} mask files, byte-identical: {identical}", runs[0].len())))
}

struct Trained {
    random: StmModel,
    full: StmModel,
    main_only: StmModel,
    held_out: Vec<Video>,
}

fn train_models() -> Result<Trained, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let corpus = SynthConfig {
        sequences: TRAIN_SEQUENCES,
        frames: FRAMES,
        height: SIDE,
        width: SIDE,
        ..Default::default()
    };
    let train = synth_videos(&corpus, &mut rng).map_err(err)?;
    let held_out = synth_videos(
        &SynthConfig {
            sequences: HELD_OUT_SEQUENCES,
            name_prefix: "held".into(),
            ..corpus.clone()
        },
        &mut rng,
    )
    .map_err(err)?;
    let scenes = synth_scenes(&corpus, 500, &mut rng).map_err(err)?;
    let config = TrainConfig {
        crop: SIDE,
        pretrain_iterations: PRETRAIN_ITERATIONS,
        main_iterations: MAIN_ITERATIONS,
        final_learning_rate: Some(1e-5),
        seed: 1,
        ..Default::default()
    };
    let mut random = StmModel::init(config.model, 1).map_err(err)?;
    random.zero_prediction_head();
    let run = RunOptions::default();
    let pre = pretrain(random.clone(), &scenes, &config, &run).map_err(err)?;
    let full = main_train(pre.model, &train, &config, &run).map_err(err)?.model;
    let main_only = main_train(random.clone(), &train, &config, &run).map_err(err)?.model;
    Ok(Trained {
        random,
        full,
        main_only,
        held_out,
    })
}

fn learnability(t: &Trained, start: Instant) -> Result<Verdict, String> {
    let config = InferenceConfig::default();
    let j = |m: &StmModel| evaluate_model(m, &t.held_out, config).map(|r| r.j_mean).map_err(err);
    let (random, full, main_only) = (j(&t.random)?, j(&t.full)?, j(&t.main_only)?);
    let elapsed = start.elapsed();
    Ok(verdict(
        full >= 0.70 && full - random >= 0.40 && full >= main_only && elapsed < Duration::from_secs(7200),
        format!(
            "held-out J: full {full:.3}, random init {random:.3}, main-only {main_only:.3}; {:.0} min",
            elapsed.as_secs_f64() / 60.0
        ),
    ))
}

fn policy_ablation(model: &StmModel) -> Result<Verdict, String> {
    let videos = synth_videos(
        &SynthConfig {
            sequences: HELD_OUT_SEQUENCES,
            frames: 24,
            height: SIDE,
            width: SIDE,
            occlusion: true,
            name_prefix: "occl".into(),
            ..Default::default()
        },
        &mut ChaCha8Rng::seed_from_u64(17),
    )
    .map_err(err)?;
    let mut j = BTreeMap::new();
    for policy in [
        MemoryPolicy::First,
        MemoryPolicy::Previous,
        MemoryPolicy::FirstAndPrevious,
        MemoryPolicy::Interval(5),
    ] {
        let config = InferenceConfig {
            policy,
            ..Default::default()
        };
        j.insert(policy.label(), evaluate_model(model, &videos, config).map_err(err)?.j_mean);
    }
    let (first, prev, both, every) = (j["first"], j["prev"], j["first+prev"], j["every-5"]);
    Ok(verdict(
        both >= first && both >= prev && every >= both - 0.02,
        format!("J on occlusion clips: first {first:.3}, prev {prev:.3}, first+prev {both:.3}, every-5 {every:.3}"),
    ))
}

fn main() -> ExitCode {
    let mut suite = Suite { failures: 0 };
    suite.run("read-kernel oracle equivalence", read_equivalence);
    suite.run("attention normalization", attention_normalization);
    suite.run("memory invariances", memory_invariances);
    suite.run("gradient suite", gradient_suite);
    suite.run("soft aggregation", soft_aggregation);
    suite.run("policy simulation", policy_simulation);
    suite.run("metrics", metric_cases);
    suite.run("determinism", determinism);

    let start = Instant::now();
    match train_models() {
        Ok(trained) => {
            suite.run("desk-scale learnability", || learnability(&trained, start));
            suite.run("memory-policy ablation", || policy_ablation(&trained.full));
        }
        Err(e) => {
            suite.run("desk-scale learnability", || Err(e.clone()));
            suite.run("memory-policy ablation", || Err(e));
        }
    }
    println!("{} criteria failed", suite.failures);
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if suite.failures == 0 || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
