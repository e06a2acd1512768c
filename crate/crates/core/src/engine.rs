//! Frame-by-frame inference with a per-object space-time memory.

use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode, to_probability};
use crate::encoders::{encode_memory, encode_query, KeyValueVars, SkipFeatures, STRIDE};
use crate::error::{Result, StmError};
use crate::memory::{export_attention, read_vars, MemoryPolicy, MemoryStore};
use crate::model::{Bound, StmModel};
use crate::multi_object::{argmax_labels, soft_aggregate_vars, LabelMap};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub policy: MemoryPolicy,
    /// Upper bound on memory entries per object.
    pub capacity: Option<usize>,
    /// Fixed-order reductions in the memory read.
    pub deterministic: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            policy: MemoryPolicy::Interval(5),
            capacity: None,
            deterministic: false,
        }
    }
}

/// Query-frame encoding shared by every object.
#[derive(Clone, Copy, Debug)]
pub struct QueryEncoding {
    pub kv: KeyValueVars,
    pub skips: SkipFeatures,
}

pub fn encode_query_frame<E: Element>(tape: &mut Tape<E>, params: &Bound, frame: Var) -> Result<QueryEncoding> {
    let (kv, skips) = encode_query(tape, params, frame)?;
    Ok(QueryEncoding { kv, skips })
}

/// Single-object prediction from stacked memory keys/values: read, decode,
/// and convert to a full-resolution foreground probability. Returns
/// `(logits, probability)`.
pub fn predict_object<E: Element>(
    tape: &mut Tape<E>,
    params: &Bound,
    query: &QueryEncoding,
    mem_keys: Var,
    mem_values: Var,
) -> Result<(Var, Var)> {
    let (y, _) = read_vars(tape, query.kv.key, query.kv.value, mem_keys, mem_values)?;
    let logits = decode(tape, params, y, &query.skips)?;
    let prob = to_probability(tape, logits)?;
    Ok((logits, prob))
}

/// Pads a `C×H×W` image on the bottom and right to multiples of 16,
/// replicating edge pixels.
pub fn pad_frame<E: Element>(frame: &Tensor<E>) -> Result<Tensor<E>> {
    frame.expect_rank(3, "frame")?;
    let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    let (ph, pw) = (h.div_ceil(STRIDE) * STRIDE, w.div_ceil(STRIDE) * STRIDE);
    if (ph, pw) == (h, w) {
        return Ok(frame.clone());
    }
    Tensor::from_fn(&[c, ph, pw], |i| {
        let (ch, y, x) = (i / (ph * pw), (i / pw) % ph, i % pw);
        frame.get(&[ch, y.min(h - 1), x.min(w - 1)])
    })
}

/// Zero-pads a `1×H×W` mask to `ph×pw`.
fn pad_mask<E: Element>(mask: &Tensor<E>, ph: usize, pw: usize) -> Result<Tensor<E>> {
    let (h, w) = (mask.shape()[1], mask.shape()[2]);
    Tensor::from_fn(&[1, ph, pw], |i| {
        let (y, x) = (i / pw, i % pw);
        if y < h && x < w {
            mask.get(&[0, y, x])
        } else {
            E::zero()
        }
    })
}

fn crop_labels(labels: &LabelMap, h: usize, w: usize) -> LabelMap {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        out.extend_from_slice(&labels.labels[y * labels.width..y * labels.width + w]);
    }
    LabelMap {
        height: h,
        width: w,
        labels: out,
    }
}

fn crop_plane<E: Element>(t: &Tensor<E>, h: usize, w: usize) -> Result<Tensor<E>> {
    t.slice_axis(1, 0, h)?.slice_axis(2, 0, w)
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub labels: LabelMap,
    /// Aggregated foreground probability per object, `1×H×W`.
    pub probs: Vec<Tensor<f32>>,
    /// Memory entries per object after the update.
    pub memory_entries: Vec<usize>,
    pub elapsed_ms: f64,
}

/// Per-video inference state.
pub struct VideoSession<'m> {
    model: &'m StmModel,
    config: InferenceConfig,
    stores: Vec<MemoryStore>,
    object_ids: Vec<u8>,
    frame_index: usize,
    extent: (usize, usize),
    padded: (usize, usize),
    warnings: Vec<String>,
}

impl<'m> VideoSession<'m> {
    /// Starts a session from the first frame and one binary `1×H×W` mask
    /// per object; `object_ids[m]` is the label written for object `m`.
    pub fn new(
        model: &'m StmModel,
        first_frame: &Tensor,
        masks: &[Tensor],
        object_ids: &[u8],
        config: InferenceConfig,
    ) -> Result<Self> {
        config.policy.validate()?;
        first_frame.expect_rank(3, "first frame")?;
        if first_frame.shape()[0] != 3 {
            return Err(StmError::dim("frames must have 3 channels"));
        }
        if masks.is_empty() {
            return Err(StmError::invalid("at least one object mask is required"));
        }
        if masks.len() != object_ids.len() || object_ids.contains(&0) {
            return Err(StmError::invalid("object ids must be nonzero, one per mask"));
        }
        let (h, w) = (first_frame.shape()[1], first_frame.shape()[2]);
        let mut coverage = vec![false; h * w];
        let mut warnings = Vec::new();
        for (m, mask) in masks.iter().enumerate() {
            if mask.shape() != [1, h, w] {
                return Err(StmError::dim(format!(
                    "mask {m} has shape {:?}, frame is {h}x{w}",
                    mask.shape()
                )));
            }
            for (i, &v) in mask.data().iter().enumerate() {
                if v != 0.0 && v != 1.0 {
                    return Err(StmError::invalid(format!("mask {m} is not binary")));
                }
                if v == 1.0 && std::mem::replace(&mut coverage[i], true) {
                    return Err(StmError::invalid(format!("mask {m} overlaps another object")));
                }
            }
            if mask.sum() == 0.0 {
                let msg = format!("object {} is absent from the first frame", object_ids[m]);
                warn!("{msg}");
                warnings.push(msg);
            }
        }

        let padded_frame = pad_frame(first_frame)?;
        let (ph, pw) = (padded_frame.shape()[1], padded_frame.shape()[2]);
        let mut tape = Tape::inference().with_deterministic(config.deterministic);
        let params = model.bind(&mut tape, false);
        let fv = tape.constant(padded_frame);
        let mut stores = Vec::with_capacity(masks.len());
        for mask in masks {
            let mv = tape.constant(pad_mask(mask, ph, pw)?);
            let kv = encode_memory(&mut tape, &params, fv, mv)?;
            let mut store = MemoryStore::new(config.policy, config.capacity)?;
            store.init(kv.detach(&tape), 0)?;
            stores.push(store);
        }
        Ok(VideoSession {
            model,
            config,
            stores,
            object_ids: object_ids.to_vec(),
            frame_index: 0,
            extent: (h, w),
            padded: (ph, pw),
            warnings,
        })
    }

    /// Starts a session from a first-frame label map; every nonzero label
    /// present becomes an object.
    pub fn from_labels(model: &'m StmModel, first_frame: &Tensor, labels: &LabelMap, config: InferenceConfig) -> Result<Self> {
        let mut ids: Vec<u8> = labels.labels.iter().copied().filter(|&l| l != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            return Err(StmError::invalid("first-frame annotation has no objects"));
        }
        let masks: Vec<Tensor> = ids.iter().map(|&id| labels.mask_tensor(id)).collect();
        Self::new(model, first_frame, &masks, &ids, config)
    }

    pub fn stores(&self) -> &[MemoryStore] {
        &self.stores
    }

    pub fn object_ids(&self) -> &[u8] {
        &self.object_ids
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Read weights from feature location `pixel` of `frame` over the
    /// memory of object `object` (`T×h×w`), with the frame index of each
    /// memory slot.
    pub fn attention(&self, frame: &Tensor, object: usize, pixel: (usize, usize)) -> Result<(Tensor, Vec<usize>)> {
        let store = self
            .stores
            .get(object)
            .ok_or_else(|| StmError::invalid(format!("object index {object} out of range")))?;
        let mut tape = Tape::inference().with_deterministic(self.config.deterministic);
        let params = self.model.bind(&mut tape, false);
        let fv = tape.constant(pad_frame(frame)?);
        let query = encode_query_frame(&mut tape, &params, fv)?;
        let (keys, _) = store.stacked()?;
        let weights = export_attention(tape.value(query.kv.key), &keys, pixel)?;
        Ok((weights, store.entries().iter().map(|e| e.frame).collect()))
    }

    /// Segments the next frame and writes it to every object's memory.
    pub fn step(&mut self, frame: &Tensor) -> Result<StepOutput> {
        let start = Instant::now();
        let (h, w) = self.extent;
        if frame.shape() != [3, h, w] {
            return Err(StmError::invalid(format!(
                "frame shape {:?} does not match the session ({h}x{w})",
                frame.shape()
            )));
        }
        let t = self.frame_index + 1;
        let mut tape = Tape::inference().with_deterministic(self.config.deterministic);
        let params = self.model.bind(&mut tape, false);
        let fv = tape.constant(pad_frame(frame)?);
        let query = encode_query_frame(&mut tape, &params, fv)?;
        let mut probs = Vec::with_capacity(self.stores.len());
        for store in &self.stores {
            let (keys, values) = store.stacked()?;
            let (kv, vv) = (tape.constant(keys), tape.constant(values));
            let (_, prob) = predict_object(&mut tape, &params, &query, kv, vv)?;
            probs.push(prob);
        }
        let (_, agg) = soft_aggregate_vars(&mut tape, &probs)?;

        let padded_labels = argmax_labels(tape.value(agg))?;
        let mut labels = crop_labels(&padded_labels, h, w);
        for l in labels.labels.iter_mut().filter(|l| **l != 0) {
            *l = self.object_ids[*l as usize - 1];
        }

        let write_memory = self.config.policy != MemoryPolicy::First;
        let mut object_probs = Vec::with_capacity(self.stores.len());
        for (m, store) in self.stores.iter_mut().enumerate() {
            let soft = tape.slice(agg, 0, m + 1, 1)?;
            object_probs.push(crop_plane(tape.value(soft), h, w)?);
            if write_memory {
                let kv = encode_memory(&mut tape, &params, fv, soft)?;
                store.update(kv.detach(&tape), t)?;
            }
        }
        debug_assert_eq!(self.padded, (tape.value(fv).shape()[1], tape.value(fv).shape()[2]));
        self.frame_index = t;
        Ok(StepOutput {
            labels,
            probs: object_probs,
            memory_entries: self.stores.iter().map(MemoryStore::len).collect(),
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// Per-frame record of a video run.
#[derive(Clone, Debug, Serialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub elapsed_ms: f64,
    pub memory_entries: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct VideoResult {
    pub labels: Vec<LabelMap>,
    pub records: Vec<FrameRecord>,
    pub warnings: Vec<String>,
}

/// Segments a whole video given the first-frame annotation. The first
/// output is the annotation itself.
pub fn run_video(model: &StmModel, frames: &[Tensor], first_labels: &LabelMap, config: InferenceConfig) -> Result<VideoResult> {
    let first = frames
        .first()
        .ok_or_else(|| StmError::invalid("a video needs at least one frame"))?;
    if (first_labels.height, first_labels.width) != (first.shape()[1], first.shape()[2]) {
        return Err(StmError::dim(format!(
            "annotation {}x{} does not match frame {:?}",
            first_labels.height,
            first_labels.width,
            first.shape()
        )));
    }
    let mut labels = vec![first_labels.clone()];
    let mut records = vec![];
    if frames.len() == 1 {
        return Ok(VideoResult {
            labels,
            records,
            warnings: vec![],
        });
    }
    let mut session = VideoSession::from_labels(model, first, first_labels, config).map_err(|e| e.context("frame 0"))?;
    records.push(FrameRecord {
        frame: 0,
        elapsed_ms: 0.0,
        memory_entries: session.stores().iter().map(MemoryStore::len).collect(),
    });
    for (i, frame) in frames.iter().enumerate().skip(1) {
        let out = session.step(frame).map_err(|e| e.context(format!("frame {i}")))?;
        records.push(FrameRecord {
            frame: i,
            elapsed_ms: out.elapsed_ms,
            memory_entries: out.memory_entries,
        });
        labels.push(out.labels);
    }
    Ok(VideoResult {
        labels,
        records,
        warnings: session.warnings().to_vec(),
    })
}
