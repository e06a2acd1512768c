//! Two-stage training: pre-training on clips synthesized from still images,
//! then main training on clips sampled from videos with a growing frame
//! skip. Inside each clip the memory is updated with the network's own
//! soft output, so the loss on the third frame back-propagates through the
//! second frame's prediction.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{object_ids, Scene, Video};
use crate::encoders::{encode_memory, stack_memory_vars, KeyValueVars};
use crate::engine::{encode_query_frame, predict_object};
use crate::error::{Result, StmError};
use crate::model::{Bound, ModelConfig, ParamSet, StmModel};
use crate::multi_object::{soft_aggregate_vars, LabelMap};
use crate::tensor::{read_checkpoint, write_checkpoint, Element, Tape, Tensor, Var};

pub mod augment;

pub use augment::{synthesize_clip, AffineParams, AffineRanges, CropWindow};

/// Three temporally ordered frames with their label maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub frames: Vec<Tensor>,
    pub labels: Vec<LabelMap>,
}

impl Clip {
    pub fn new(frames: Vec<Tensor>, labels: Vec<LabelMap>) -> Result<Self> {
        if frames.len() != 3 || labels.len() != 3 {
            return Err(StmError::invalid("a clip has exactly three frames"));
        }
        let shape = frames[0].shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(StmError::dim(format!("clip frames must be 3xHxW, got {shape:?}")));
        }
        for (f, l) in frames.iter().zip(&labels) {
            if f.shape() != shape.as_slice() || (l.height, l.width) != (shape[1], shape[2]) {
                return Err(StmError::dim("clip frames and labels must share extents"));
            }
        }
        Ok(Clip { frames, labels })
    }

    /// Number of objects, taken from the first frame (at least one).
    pub fn objects(&self) -> usize {
        object_ids(&self.labels[0]).len().max(1)
    }

    /// Keeps at most `max` objects of the first frame, chosen at random, and
    /// relabels them `1..=k`; everything else becomes background.
    pub fn select_objects<R: Rng + ?Sized>(&self, max: usize, rng: &mut R) -> Clip {
        let mut ids = object_ids(&self.labels[0]);
        while ids.len() > max {
            ids.remove(rng.random_range(0..ids.len()));
        }
        let mut table = [0u8; 256];
        for (k, &id) in ids.iter().enumerate() {
            table[id as usize] = k as u8 + 1;
        }
        Clip {
            frames: self.frames.clone(),
            labels: self
                .labels
                .iter()
                .map(|l| LabelMap {
                    height: l.height,
                    width: l.width,
                    labels: l.labels.iter().map(|&v| table[v as usize]).collect(),
                })
                .collect(),
        }
    }
}

/// Largest allowed frame skip at `iteration`: rises linearly (rounded down)
/// from 0 to `max_skip` at `end`, constant afterwards.
pub fn curriculum_max_skip(iteration: usize, end: usize, max_skip: usize) -> usize {
    if end == 0 {
        return max_skip;
    }
    (max_skip as u128 * iteration.min(end) as u128 / end as u128) as usize
}

/// Draws frame indices `i1 < i2 < i3` with both gaps in `1..=max_skip+1`,
/// uniformly over all such triples.
pub fn sample_indices<R: Rng + ?Sized>(len: usize, max_skip: usize, rng: &mut R) -> Result<[usize; 3]> {
    if len < 3 {
        return Err(StmError::invalid(format!("video of {len} frames is too short for a clip")));
    }
    let max_gap = max_skip + 1;
    // Each gap pair (g1, g2) admits len - g1 - g2 start positions.
    let mut pairs = Vec::new();
    let mut total = 0usize;
    for g1 in 1..=max_gap {
        for g2 in 1..=max_gap {
            if g1 + g2 < len {
                total += len - g1 - g2;
                pairs.push((g1, g2, total));
            }
        }
    }
    let r = rng.random_range(0..total);
    let k = pairs.partition_point(|&(_, _, cum)| cum <= r);
    let (g1, g2, cum) = pairs[k];
    let start = r - (cum - (len - g1 - g2));
    Ok([start, start + g1, start + g1 + g2])
}

/// Samples a clip from a video: indices per [`sample_indices`], one random
/// crop window shared by the three frames.
pub fn sample_video_clip<R: Rng + ?Sized>(video: &Video, max_skip: usize, crop: (usize, usize), rng: &mut R) -> Result<Clip> {
    let idx = sample_indices(video.len(), max_skip, rng)?;
    let (h, w) = video.extent();
    if crop.0 > h || crop.1 > w {
        return Err(StmError::invalid(format!("crop {crop:?} exceeds the {h}x{w} video")));
    }
    let (y, x) = (rng.random_range(0..=h - crop.0), rng.random_range(0..=w - crop.1));
    let mut frames = Vec::with_capacity(3);
    let mut labels = Vec::with_capacity(3);
    for i in idx {
        frames.push(video.frames[i].slice_axis(1, y, crop.0)?.slice_axis(2, x, crop.1)?);
        let l = &video.labels[i];
        let mut cropped = Vec::with_capacity(crop.0 * crop.1);
        for row in y..y + crop.0 {
            cropped.extend_from_slice(&l.labels[row * w + x..row * w + x + crop.1]);
        }
        labels.push(LabelMap::new(crop.0, crop.1, cropped)?);
    }
    Clip::new(frames, labels)
}

/// Handles produced by [`clip_loss`].
#[derive(Clone, Debug)]
pub struct ClipForward {
    /// Mean of the two frame losses.
    pub loss: Var,
    pub frame_losses: [Var; 2],
    /// Soft masks written to memory after the second frame, one per object.
    pub fed_masks: Vec<Var>,
}

fn class_labels(labels: &LabelMap, objects: usize) -> Vec<u32> {
    labels
        .labels
        .iter()
        .map(|&l| if (l as usize) <= objects { l as u32 } else { 0 })
        .collect()
}

/// Forward pass over one clip with `objects` objects: the memory starts
/// from the first frame with its ground truth, the second frame is
/// predicted and its aggregated soft output appended to memory, then the
/// third frame is predicted. Each prediction is scored with cross-entropy
/// on the aggregated log-odds.
pub fn clip_loss<E: Element>(
    tape: &mut Tape<E>,
    params: &Bound,
    frames: &[Tensor<E>],
    labels: &[LabelMap],
    objects: usize,
) -> Result<ClipForward> {
    if frames.len() != 3 || labels.len() != 3 || objects == 0 {
        return Err(StmError::invalid("clip_loss needs three frames and at least one object"));
    }
    let f: Vec<Var> = frames.iter().map(|t| tape.constant(t.clone())).collect();
    let mut memory: Vec<Vec<KeyValueVars>> = Vec::with_capacity(objects);
    for m in 1..=objects {
        let mask = tape.constant(labels[0].mask_tensor::<E>(m as u8));
        memory.push(vec![encode_memory(tape, params, f[0], mask)?]);
    }
    let mut frame_losses = Vec::with_capacity(2);
    let mut fed_masks = Vec::new();
    for t in 1..3 {
        let query = encode_query_frame(tape, params, f[t])?;
        let mut probs = Vec::with_capacity(objects);
        for entries in &memory {
            let (km, vm) = stack_memory_vars(tape, entries)?;
            probs.push(predict_object(tape, params, &query, km, vm)?.1);
        }
        let (logits, agg) = soft_aggregate_vars(tape, &probs)?;
        frame_losses.push(tape.cross_entropy(logits, &class_labels(&labels[t], objects))?);
        if t == 1 {
            for (m, entries) in memory.iter_mut().enumerate() {
                let soft = tape.slice(agg, 0, m + 1, 1)?;
                entries.push(encode_memory(tape, params, f[t], soft)?);
                fed_masks.push(soft);
            }
        }
    }
    let loss = tape.mean_scalars(&frame_losses)?;
    Ok(ClipForward {
        loss,
        frame_losses: [frame_losses[0], frame_losses[1]],
        fed_masks,
    })
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: ParamSet::default(),
            v: ParamSet::default(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &IndexMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.shape() {
                return Err(StmError::dim(format!("gradient of {name} has shape {:?}", g.shape())));
            }
            if self.m.get(name).is_none() {
                self.m.insert(name, Tensor::zeros(p.shape())?);
                self.v.insert(name, Tensor::zeros(p.shape())?);
            }
            let m = self.m.get_mut(name).unwrap().data_mut();
            for (mi, &gi) in m.iter_mut().zip(g.data()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
            }
            let v = self.v.get_mut(name).unwrap().data_mut();
            for (vi, &gi) in v.iter_mut().zip(g.data()) {
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
            let (m, v) = (self.m.get(name).unwrap().data(), self.v.get(name).unwrap().data());
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                let mhat = mi as f64 / c1;
                let vhat = vi as f64 / c2;
                *pi -= (self.lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, t) in self.m.iter() {
            out.push((format!("opt/m/{name}"), t.clone()));
        }
        for (name, t) in self.v.iter() {
            out.push((format!("opt/v/{name}"), t.clone()));
        }
        out
    }

    fn restore(&mut self, tensors: &IndexMap<String, Tensor>) {
        for (name, t) in tensors {
            if let Some(rest) = name.strip_prefix("opt/m/") {
                self.m.insert(rest, t.clone());
            } else if let Some(rest) = name.strip_prefix("opt/v/") {
                self.v.insert(rest, t.clone());
            }
        }
    }
}

/// One optimization step on a batch of clips; returns the mean loss.
/// The model is left untouched when the loss is not finite.
pub fn train_step(model: &mut StmModel, opt: &mut Adam, batch: &[Clip], deterministic: bool) -> Result<f64> {
    if batch.is_empty() {
        return Err(StmError::invalid("empty batch"));
    }
    let mut tape = Tape::new().with_deterministic(deterministic);
    let params = model.bind(&mut tape, true);
    let mut losses = Vec::with_capacity(batch.len());
    for clip in batch {
        losses.push(clip_loss(&mut tape, &params, &clip.frames, &clip.labels, clip.objects())?.loss);
    }
    let loss = tape.mean_scalars(&losses)?;
    let value = tape.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(StmError::numeric(format!("training loss is {value}")));
    }
    let mut grads = tape.backward(loss)?;
    let mut named = IndexMap::new();
    for (name, var) in params.iter() {
        if let Some(g) = grads.take(var) {
            if !g.is_finite() {
                return Err(StmError::numeric(format!("non-finite gradient for {name}")));
            }
            named.insert(name.to_string(), g);
        }
    }
    opt.update(&mut model.params, &named)?;
    Ok(value)
}

/// Training hyperparameters, readable from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Square crop side in pixels; a multiple of 16.
    pub crop: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// When set, the rate follows a half cosine from `learning_rate` down to
    /// this value over each stage; constant otherwise.
    pub final_learning_rate: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub pretrain_iterations: usize,
    pub main_iterations: usize,
    /// Final value of the frame-skip curriculum.
    pub max_skip: usize,
    /// Iteration at which the curriculum reaches `max_skip`; defaults to
    /// 80% of `main_iterations`.
    pub curriculum_end: Option<usize>,
    /// Objects per training sample.
    pub max_objects: usize,
    /// Checkpoint period in iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub augment: AffineRanges,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            crop: 64,
            batch_size: 2,
            learning_rate: 1e-3,
            final_learning_rate: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            pretrain_iterations: 1000,
            main_iterations: 1000,
            max_skip: 25,
            curriculum_end: None,
            max_objects: 2,
            checkpoint_every: 0,
            augment: AffineRanges::default(),
            seed: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    /// Full-size settings: 384-pixel crops, batch 4, learning rate 1e-5.
    pub fn full_size_preset() -> Self {
        TrainConfig {
            model: ModelConfig::full_size_preset(),
            crop: 384,
            batch_size: 4,
            learning_rate: 1e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        if self.crop == 0 || self.crop % 16 != 0 {
            return Err(StmError::invalid(format!("crop {} is not a positive multiple of 16", self.crop)));
        }
        if self.batch_size == 0 || self.max_objects == 0 {
            return Err(StmError::invalid("batch_size and max_objects must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(StmError::invalid("learning rate must be positive and betas in [0, 1)"));
        }
        if let Some(lr) = self.final_learning_rate {
            if !(lr >= 0.0 && lr <= self.learning_rate) {
                return Err(StmError::invalid(format!("final learning rate {lr} is outside [0, {}]", self.learning_rate)));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: TrainConfig = toml::from_str(text).map_err(|e| StmError::invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn curriculum_end(&self) -> usize {
        self.curriculum_end.unwrap_or(self.main_iterations * 4 / 5)
    }

    /// Learning rate at iteration `it` of a stage lasting `iterations`.
    pub fn learning_rate_at(&self, it: usize, iterations: usize) -> f64 {
        match self.final_learning_rate {
            Some(end) if iterations > 1 => {
                let progress = it.min(iterations - 1) as f64 / (iterations - 1) as f64;
                end + 0.5 * (self.learning_rate - end) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
            _ => self.learning_rate,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Main,
}

impl Stage {
    fn code(self) -> u64 {
        match self {
            Stage::Pretrain => 0,
            Stage::Main => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Main => "main",
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub stage: Stage,
    pub iteration: usize,
    pub loss: f64,
    pub max_skip: usize,
    pub elapsed_s: f64,
}

/// Where a training run writes, and whether it resumes.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Checkpoints and `train_log.jsonl` go here when set.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint written by an earlier run of the same stage.
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: StmModel,
    pub log: Vec<LogEntry>,
    /// Final checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

/// Random stream of one (stage, iteration); resuming replays it exactly.
fn iteration_rng(seed: u64, stage: Stage, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stage.code() << 48) | iteration as u64);
    rng
}

fn save_training_checkpoint(path: &Path, model: &StmModel, opt: &Adam, stage: Stage, iteration: usize) -> Result<()> {
    let mut entries: Vec<(String, Tensor)> = model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    entries.extend(opt.entries());
    entries.push(("train/stage".into(), Tensor::scalar(stage.code() as f32)));
    entries.push(("train/iteration".into(), Tensor::scalar(iteration as f32)));
    entries.push(("train/adam_step".into(), Tensor::scalar(opt.step as f32)));
    write_checkpoint(path, entries.iter().map(|(n, t)| (n.as_str(), t)))
}

fn run_stage(
    stage: Stage,
    mut model: StmModel,
    config: &TrainConfig,
    iterations: usize,
    run: &RunOptions,
    mut sample: impl FnMut(usize, &mut ChaCha8Rng) -> Result<(Clip, usize)>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if model.config != config.model {
        return Err(StmError::invalid("model layout differs from the training configuration"));
    }
    let mut opt = Adam::new(config.learning_rate, config.beta1, config.beta2, config.eps);
    let mut start = 0;
    if let Some(path) = &run.resume {
        let tensors = read_checkpoint(path)?;
        let scalar = |name: &str| {
            tensors
                .get(name)
                .map(|t| t.item() as u64)
                .ok_or_else(|| StmError::format(path, format!("not a training checkpoint: missing {name}")))
        };
        if scalar("train/stage")? != stage.code() {
            return Err(StmError::format(path, format!("checkpoint is not from the {} stage", stage.name())));
        }
        start = scalar("train/iteration")? as usize;
        opt.step = scalar("train/adam_step")?;
        opt.restore(&tensors);
        model = StmModel::load(path)?;
        info!("resuming {} at iteration {start}", stage.name());
    }
    let mut log_file = match &run.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| StmError::io(dir, e))?;
            let path = dir.join("train_log.jsonl");
            let file = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| StmError::io(&path, e))?;
            Some((BufWriter::new(file), path))
        }
        None => None,
    };
    let clock = Instant::now();
    let mut log = Vec::with_capacity(iterations.saturating_sub(start));
    for it in start..iterations {
        let mut rng = iteration_rng(config.seed, stage, it);
        let mut batch = Vec::with_capacity(config.batch_size);
        let mut max_skip = 0;
        for _ in 0..config.batch_size {
            let (clip, skip) = sample(it, &mut rng)?;
            batch.push(clip.select_objects(config.max_objects, &mut rng));
            max_skip = skip;
        }
        opt.lr = config.learning_rate_at(it, iterations);
        let loss = train_step(&mut model, &mut opt, &batch, config.deterministic)
            .map_err(|e| e.context(format!("{} iteration {it}", stage.name())))?;
        let entry = LogEntry {
            stage,
            iteration: it,
            loss,
            max_skip,
            elapsed_s: clock.elapsed().as_secs_f64(),
        };
        if let Some((w, path)) = &mut log_file {
            let line = serde_json::to_string(&entry).map_err(|e| StmError::format(path.as_path(), e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| StmError::io(path.as_path(), e))?;
        }
        if (it + 1) % 100 == 0 {
            info!("{} {}/{iterations} loss {loss:.4} max_skip {max_skip}", stage.name(), it + 1);
        }
        log.push(entry);
        let done = it + 1;
        if let Some(dir) = &run.out_dir {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < iterations {
                save_training_checkpoint(&dir.join(format!("{}-{done:06}.ckpt", stage.name())), &model, &opt, stage, done)?;
            }
        }
    }
    if let Some((w, path)) = &mut log_file {
        w.flush().map_err(|e| StmError::io(path.as_path(), e))?;
    }
    let checkpoint = match &run.out_dir {
        Some(dir) => {
            let path = dir.join(format!("{}-final.ckpt", stage.name()));
            save_training_checkpoint(&path, &model, &opt, stage, iterations.max(start))?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome { model, log, checkpoint })
}

/// Pre-training on clips synthesized from annotated still images.
pub fn pretrain(model: StmModel, scenes: &[Scene], config: &TrainConfig, run: &RunOptions) -> Result<TrainOutcome> {
    if scenes.is_empty() {
        return Err(StmError::invalid("pre-training needs at least one image"));
    }
    let crop = (config.crop, config.crop);
    run_stage(Stage::Pretrain, model, config, config.pretrain_iterations, run, |_, rng| {
        let scene = &scenes[rng.random_range(0..scenes.len())];
        Ok((synthesize_clip(scene, rng, &config.augment, crop)?, 0))
    })
}

/// Main training on video clips under the frame-skip curriculum.
pub fn main_train(model: StmModel, videos: &[Video], config: &TrainConfig, run: &RunOptions) -> Result<TrainOutcome> {
    let usable: Vec<&Video> = videos.iter().filter(|v| v.len() >= 3).collect();
    if usable.is_empty() {
        return Err(StmError::invalid("main training needs at least one video of three or more frames"));
    }
    let crop = (config.crop, config.crop);
    let end = config.curriculum_end();
    run_stage(Stage::Main, model, config, config.main_iterations, run, |it, rng| {
        let skip = curriculum_max_skip(it, end, config.max_skip);
        let video = usable[rng.random_range(0..usable.len())];
        Ok((sample_video_clip(video, skip, crop, rng)?, skip))
    })
}

/// Reads a JSONL training log.
pub fn read_log(path: &Path) -> Result<Vec<LogEntry>> {
    let text = fs::read_to_string(path).map_err(|e| StmError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| StmError::format(path, e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curriculum_endpoints() {
        assert_eq!(curriculum_max_skip(0, 100_000, 25), 0);
        assert_eq!(curriculum_max_skip(50_000, 100_000, 25), 12);
        assert_eq!(curriculum_max_skip(100_000, 100_000, 25), 25);
        assert_eq!(curriculum_max_skip(250_000, 100_000, 25), 25);
        assert_eq!(curriculum_max_skip(7, 0, 25), 25);
    }

    #[test]
    fn three_frame_video_has_one_triple() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(sample_indices(3, 10, &mut rng).unwrap(), [0, 1, 2]);
        }
        assert!(sample_indices(2, 0, &mut rng).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = TrainConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), c);
        assert!(TrainConfig::from_toml("crop = 70").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = TrainConfig { learning_rate: 1e-3, final_learning_rate: Some(1e-5), ..Default::default() };
        assert_eq!(c.learning_rate_at(0, 101), 1e-3);
        assert!((c.learning_rate_at(50, 101) - 5.05e-4).abs() < 1e-12);
        assert!((c.learning_rate_at(100, 101) - 1e-5).abs() < 1e-12);
        assert_eq!(TrainConfig::default().learning_rate_at(70, 101), 1e-3);
        assert!(TrainConfig { final_learning_rate: Some(1.0), ..Default::default() }.validate().is_err());
    }
}
