//! The finite-difference suite run by the `gradcheck` command and the
//! acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check, project, random_input, GradCheck, FD_STEP};
use crate::data::{synth_videos, SynthConfig};
use crate::decoder::{decode, refine};
use crate::encoders::{encode_memory, encode_query, SkipFeatures};
use crate::error::Result;
use crate::memory::read_vars;
use crate::model::{ModelConfig, StmModel};
use crate::tensor::Tensor;
use crate::training::clip_loss;

/// Per-operation tolerance on the relative gradient error.
pub const OP_TOLERANCE: f64 = 1e-3;

/// Tolerance for the full three-frame training loss.
pub const END_TO_END_TOLERANCE: f64 = 1e-2;

/// Step for checks through deep ReLU stacks; in `f64` the roundoff at
/// this step is still far below the tolerances, while the chance of a
/// perturbation straddling a kink shrinks with the step.
pub const MODEL_FD_STEP: f64 = 1e-6;

/// Entries perturbed per parameter tensor in model-level checks.
const MODEL_PROBES: usize = 12;

/// Minimum distance of any ReLU input from zero in generated test cases.
const KINK_MARGIN: f64 = 1e-2;

pub fn primitive_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = FD_STEP;
    let tol = OP_TOLERANCE;
    let mut out = Vec::new();

    let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
    let a = random_input(&[m, k], 1.0, 0.0, &mut rng)?;
    let b = random_input(&[k, n], 1.0, 0.0, &mut rng)?;
    out.push(check("matmul", &[a, b], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, seed)
    }, h, tol, None, seed)?);

    let x = random_input(&[3, 4, 2], 2.0, 0.0, &mut rng)?;
    let axis = rng.random_range(0..3);
    out.push(check("softmax", &[x], |t, v| {
        let y = t.softmax(v[0], axis)?;
        project(t, y, seed)
    }, h, tol, None, seed)?);

    for (stride, pad, ksize) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
        let (c, o) = (rng.random_range(1..4), rng.random_range(1..4));
        let x = random_input(&[c, 6, 5], 1.0, 0.0, &mut rng)?;
        let w = random_input(&[o, c, ksize, ksize], 1.0, 0.0, &mut rng)?;
        let b = random_input(&[o], 1.0, 0.0, &mut rng)?;
        let name = format!("conv2d k{ksize} s{stride} p{pad}");
        out.push(check(&name, &[x, w, b], |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(t, y, seed)
        }, h, tol, None, seed)?);
    }

    let a = random_input(&[2, 3, 2], 1.0, 0.0, &mut rng)?;
    let b = random_input(&[2, 1, 2], 1.0, 0.0, &mut rng)?;
    out.push(check("concat", &[a, b], |t, v| {
        let y = t.concat(&[v[0], v[1]], 1)?;
        project(t, y, seed)
    }, h, tol, None, seed)?);

    let x = random_input(&[3, 4, 2], 1.0, 0.0, &mut rng)?;
    out.push(check("slice", &[x.clone()], |t, v| {
        let y = t.slice(v[0], 1, 1, 2)?;
        project(t, y, seed)
    }, h, tol, None, seed)?);
    out.push(check("permute+reshape", &[x], |t, v| {
        let y = t.permute(v[0], &[2, 0, 1])?;
        let y = t.reshape(y, &[2, 12])?;
        project(t, y, seed)
    }, h, tol, None, seed)?);

    for factor in [2, 4] {
        let x = random_input(&[2, 3, 2], 1.0, 0.0, &mut rng)?;
        out.push(check(&format!("upsample x{factor}"), &[x], |t, v| {
            let y = t.upsample_bilinear(v[0], factor)?;
            project(t, y, seed)
        }, h, tol, None, seed)?);
    }

    let x = random_input(&[10], 1.0, 0.05, &mut rng)?;
    out.push(check("relu", &[x], |t, v| {
        let y = t.relu(v[0])?;
        project(t, y, seed)
    }, h, tol, None, seed)?);

    let a = random_input(&[6], 1.0, 0.0, &mut rng)?;
    let b = random_input(&[6], 1.0, 0.0, &mut rng)?;
    out.push(check("add/sub/mul/scale", &[a, b], |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(v[0], v[1])?;
        let p = t.mul(s, d)?;
        let y = t.scale(p, 0.7)?;
        project(t, y, seed)
    }, h, tol, None, seed)?);

    let c = 3;
    let (x, w1, b1, w2, b2) = loop {
        let x = random_input(&[c, 5, 4], 1.0, 0.05, &mut rng)?;
        let w1 = random_input(&[c, c, 3, 3], 0.4, 0.0, &mut rng)?;
        let b1 = random_input(&[c], 0.2, 0.0, &mut rng)?;
        let w2 = random_input(&[c, c, 3, 3], 0.4, 0.0, &mut rng)?;
        let b2 = random_input(&[c], 0.2, 0.0, &mut rng)?;
        // Resample until the hidden ReLU inputs sit clear of the kink.
        let hidden = x.relu().conv2d(&w1, Some(&b1), 1, 1)?;
        if hidden.data().iter().all(|z| z.abs() > KINK_MARGIN) {
            break (x, w1, b1, w2, b2);
        }
    };
    out.push(check("residual_block", &[x, w1, b1, w2, b2], |t, v| {
        let y = t.residual_block(v[0], v[1], v[2], v[3], v[4])?;
        project(t, y, seed)
    }, h, tol, None, seed)?);

    let classes = rng.random_range(2..4);
    let logits = random_input(&[classes, 3, 3], 3.0, 0.0, &mut rng)?;
    let labels: Vec<u32> = (0..9).map(|_| rng.random_range(0..classes as u32)).collect();
    out.push(check("cross_entropy", &[logits], |t, v| t.cross_entropy(v[0], &labels), h, tol, None, seed)?);

    let objects = rng.random_range(1..4);
    let probs: Vec<Tensor<f64>> = (0..objects)
        .map(|_| Tensor::from_fn(&[1, 3, 3], |_| rng.random_range(0.05..0.95)))
        .collect::<Result<_>>()?;
    out.push(check("soft_aggregate", &probs, |t, v| {
        let logits = t.aggregate_logits(v)?;
        let y = t.softmax(logits, 0)?;
        project(t, y, seed)
    }, h, tol, None, seed)?);

    Ok(out)
}

/// A small model for the module and end-to-end checks.
fn tiny_model(seed: u64) -> Result<StmModel<f64>> {
    let config = ModelConfig {
        widths: [4, 8, 8, 16],
        decoder_width: 8,
    };
    Ok(StmModel::init(config, seed)?.cast())
}

/// Checks of the memory read, the refinement module, the decoder and both
/// encoders with respect to their inputs and selected weights.
pub fn module_checks(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = MODEL_FD_STEP;
    let tol = OP_TOLERANCE;
    let mut out = Vec::new();

    let (t, ck, cv) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5));
    let (hh, ww) = (rng.random_range(1..4), rng.random_range(1..4));
    let kq = random_input(&[ck, hh, ww], 1.0, 0.0, &mut rng)?;
    let vq = random_input(&[cv, hh, ww], 1.0, 0.0, &mut rng)?;
    let km = random_input(&[t, ck, hh, ww], 1.0, 0.0, &mut rng)?;
    let vm = random_input(&[t, cv, hh, ww], 1.0, 0.0, &mut rng)?;
    out.push(check("memory read", &[kq, vq, km, vm], |tp, v| {
        let (y, _) = read_vars(tp, v[0], v[1], v[2], v[3])?;
        project(tp, y, seed)
    }, h, tol, None, seed)?);

    let model = tiny_model(seed)?;
    let p = &model.params;
    let d = model.config.decoder_width;
    let coarse = random_input(&[d, 2, 2], 1.0, 0.0, &mut rng)?;
    let skip = random_input(&[model.config.widths[2], 4, 4], 1.0, 0.0, &mut rng)?;
    let w = p.get("dec/refine8/skip/w").unwrap().clone();
    out.push(check("refine", &[coarse, skip, w], |tp, v| {
        let bound = p.bind_with(tp, false, &[("dec/refine8/skip/w", v[2])]);
        let y = refine(tp, &bound, "dec/refine8", v[0], v[1])?;
        project(tp, y, seed)
    }, h, tol, Some(4 * MODEL_PROBES), seed)?);

    let read = random_input(&[model.config.value_channels() * 2, 2, 2], 1.0, 0.0, &mut rng)?;
    let s8 = random_input(&[model.config.widths[2], 4, 4], 1.0, 0.0, &mut rng)?;
    let s4 = random_input(&[model.config.widths[1], 8, 8], 1.0, 0.0, &mut rng)?;
    let w = p.get("dec/compress/w").unwrap().clone();
    out.push(check("decoder", &[read, s4, s8, w], |tp, v| {
        let bound = p.bind_with(tp, false, &[("dec/compress/w", v[3])]);
        let skips = SkipFeatures {
            stride4: v[1],
            stride8: v[2],
        };
        let y = decode(tp, &bound, v[0], &skips)?;
        project(tp, y, seed)
    }, h, tol, Some(4 * MODEL_PROBES), seed)?);

    let frame = Tensor::from_fn(&[3, 32, 32], |_| rng.random_range(0.0..1.0))?;
    let mask = Tensor::from_fn(&[1, 32, 32], |_| rng.random_range(0.0..1.0))?;
    let w = p.get("enc_q/stage1/down/w").unwrap().clone();
    out.push(check("query encoder", &[frame.clone(), w], |tp, v| {
        let bound = p.bind_with(tp, false, &[("enc_q/stage1/down/w", v[1])]);
        let (kv, skips) = encode_query(tp, &bound, v[0])?;
        let parts = [kv.key, kv.value];
        let mut total = project(tp, skips.stride4, seed)?;
        for part in parts {
            let s = project(tp, part, seed ^ part.index() as u64)?;
            total = tp.add(total, s)?;
        }
        Ok(total)
    }, h, tol, Some(4 * MODEL_PROBES), seed)?);
    let w = p.get("enc_m/key/w").unwrap().clone();
    out.push(check("memory encoder", &[frame, mask, w], |tp, v| {
        let bound = p.bind_with(tp, false, &[("enc_m/key/w", v[2])]);
        let kv = encode_memory(tp, &bound, v[0], v[1])?;
        let k = project(tp, kv.key, seed)?;
        let val = project(tp, kv.value, seed ^ 1)?;
        tp.add(k, val)
    }, h, tol, Some(4 * MODEL_PROBES), seed)?);

    Ok(out)
}

/// Weights probed by the end-to-end check: one per encoder stage group and
/// the decoder ends.
pub const END_TO_END_PARAMS: [&str; 6] = [
    "enc_q/stage1/down/w",
    "enc_q/key/w",
    "enc_m/stage2/res/w1",
    "enc_m/value/w",
    "dec/refine4/skip/w",
    "dec/pred/w",
];

/// Gradient of the three-frame training loss (dynamic memory included) with
/// respect to selected weights, on a small synthetic clip.
pub fn end_to_end_check(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let synth = SynthConfig {
        sequences: 1,
        frames: 3,
        height: 32,
        width: 32,
        min_objects: 1,
        max_objects: 2,
        max_speed: 3.0,
        ..SynthConfig::default()
    };
    let video = synth_videos(&synth, &mut rng)?.remove(0);
    let frames: Vec<Tensor<f64>> = video.frames.iter().map(Tensor::cast).collect();
    let objects = crate::data::object_ids(&video.labels[0]).len().max(1);
    let model = tiny_model(seed)?;
    let p = &model.params;
    let inputs: Vec<Tensor<f64>> = END_TO_END_PARAMS.iter().map(|n| p.get(n).unwrap().clone()).collect();
    check("train_step (3 frames)", &inputs, |tp, v| {
        let overrides: Vec<(&str, _)> = END_TO_END_PARAMS.iter().copied().zip(v.iter().copied()).collect();
        let bound = p.bind_with(tp, false, &overrides);
        Ok(clip_loss(tp, &bound, &frames, &video.labels, objects)?.loss)
    }, MODEL_FD_STEP, END_TO_END_TOLERANCE, Some(MODEL_PROBES), seed)
}

/// Every check: primitives, modules, and the end-to-end loss.
pub fn full_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = primitive_checks(seed)?;
    out.extend(module_checks(seed)?);
    out.push(end_to_end_check(seed)?);
    Ok(out)
}
