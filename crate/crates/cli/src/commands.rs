use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use stm_core::data::{
    load_dataset, load_scene_folder, load_video, read_annotation, read_annotation_dir, sequence_from_dir, synth_scenes, synth_videos,
    write_annotation, write_dataset, write_frame, SequenceRecord, SynthConfig, Video,
};
use stm_core::engine::{run_video, FrameRecord, InferenceConfig, VideoSession};
use stm_core::eval::{evaluate, EvalSequence, MetricsReport};
use stm_core::gradcheck::suite::full_suite;
use stm_core::training::{main_train, pretrain, RunOptions};
use stm_core::{LabelMap, MemoryPolicy, Result, StmError, StmModel, Tensor};

use crate::args::{BenchArgs, EvalArgs, InferArgs, PretrainArgs, SynthGenArgs, TrainArgs, VizAttnArgs};
use crate::config::CliConfig;

/// Feature stride of the encoders.
const STRIDE: usize = 16;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| StmError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| StmError::format(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| StmError::io(path, e))
}

/// Weights from `checkpoint`, or a fresh model with a zeroed prediction head.
fn load_model(checkpoint: Option<&Path>, config: &CliConfig) -> Result<StmModel> {
    match checkpoint {
        Some(path) => {
            let model = StmModel::load(path)?;
            info!("loaded {} ({} parameters)", path.display(), model.params.num_elements());
            Ok(model)
        }
        None => {
            let mut model = StmModel::init(config.train.model, config.seed)?;
            model.zero_prediction_head();
            Ok(model)
        }
    }
}

fn load_videos(root: &Path) -> Result<Vec<(SequenceRecord, Video)>> {
    load_dataset(root)?
        .into_iter()
        .map(|r| {
            let (video, _) = load_video(&r)?;
            Ok((r, video))
        })
        .collect()
}

pub fn pretrain_cmd(args: &PretrainArgs, config: &CliConfig, out: &Path) -> Result<i32> {
    let scenes = match &args.images {
        Some(dir) => load_scene_folder(dir)?,
        None => synth_scenes(&config.synth, args.scenes, &mut rng(config.seed))?,
    };
    let mut train = config.train.clone();
    if let Some(n) = args.iterations {
        train.pretrain_iterations = n;
    }
    info!("pre-training on {} images for {} iterations", scenes.len(), train.pretrain_iterations);
    let model = load_model(args.init.as_deref(), config)?;
    let outcome = pretrain(model, &scenes, &train, &run_options(out, &args.resume))?;
    report_training(&outcome.log, outcome.checkpoint.as_deref());
    Ok(0)
}

pub fn train_cmd(args: &TrainArgs, config: &CliConfig, out: &Path) -> Result<i32> {
    let videos = match &args.data {
        Some(root) => load_videos(root)?.into_iter().map(|(_, v)| v).collect(),
        None => synth_videos(&config.synth, &mut rng(config.seed))?,
    };
    let mut train = config.train.clone();
    if let Some(n) = args.iterations {
        train.main_iterations = n;
    }
    info!("training on {} videos for {} iterations", videos.len(), train.main_iterations);
    let model = load_model(args.init.as_deref(), config)?;
    let outcome = main_train(model, &videos, &train, &run_options(out, &args.resume))?;
    report_training(&outcome.log, outcome.checkpoint.as_deref());
    Ok(0)
}

fn run_options(out: &Path, resume: &Option<PathBuf>) -> RunOptions {
    RunOptions {
        out_dir: Some(out.to_path_buf()),
        resume: resume.clone(),
    }
}

fn report_training(log: &[stm_core::training::LogEntry], checkpoint: Option<&Path>) {
    if let Some(last) = log.last() {
        let tail = &log[log.len().saturating_sub(50)..];
        let mean = tail.iter().map(|e| e.loss).sum::<f64>() / tail.len() as f64;
        println!("iterations={} final_loss={:.4} ({:.1}s)", last.iteration + 1, mean, last.elapsed_s);
    }
    if let Some(path) = checkpoint {
        println!("checkpoint {}", path.display());
    }
}

#[derive(Serialize)]
struct SequenceTiming {
    name: String,
    frames: usize,
    ms_per_frame: f64,
    peak_memory_entries: usize,
    records: Vec<FrameRecord>,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct TimingReport {
    policy: String,
    ms_per_frame: f64,
    sequences: Vec<SequenceTiming>,
}

fn mean_step_ms(records: &[FrameRecord]) -> f64 {
    let steps: Vec<f64> = records.iter().filter(|r| r.frame > 0).map(|r| r.elapsed_ms).collect();
    if steps.is_empty() {
        0.0
    } else {
        steps.iter().sum::<f64>() / steps.len() as f64
    }
}

fn peak_entries(records: &[FrameRecord]) -> usize {
    records.iter().flat_map(|r| r.memory_entries.iter().copied()).max().unwrap_or(0)
}

pub fn infer_cmd(args: &InferArgs, config: &CliConfig, out: &Path) -> Result<i32> {
    let records = match (&args.sequence, &args.annotation, &args.data) {
        (Some(dir), Some(ann), _) => vec![sequence_from_dir(dir, ann)?],
        (_, _, Some(root)) => load_dataset(root)?,
        _ => return Err(StmError::invalid("infer needs --sequence with --annotation, or --data")),
    };
    let model = load_model(args.checkpoint.as_deref(), config)?;
    let mut timings = Vec::with_capacity(records.len());
    for record in &records {
        let (video, _) = load_video(record)?;
        let result = run_video(&model, &video.frames, &video.labels[0], config.inference)
            .map_err(|e| e.context(format!("sequence {}", record.name)))?;
        let dir = out.join(&record.name);
        for (path, labels) in record.frames.iter().zip(&result.labels) {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            write_annotation(&dir.join(format!("{stem}.png")), labels)?;
        }
        let ms = mean_step_ms(&result.records);
        println!("{}: {} frames, {ms:.1} ms/frame", record.name, result.labels.len());
        timings.push(SequenceTiming {
            name: record.name.clone(),
            frames: result.labels.len(),
            ms_per_frame: ms,
            peak_memory_entries: peak_entries(&result.records),
            records: result.records,
            warnings: result.warnings,
        });
    }
    if args.report {
        let all: Vec<&FrameRecord> = timings.iter().flat_map(|t| &t.records).filter(|r| r.frame > 0).collect();
        let ms = if all.is_empty() {
            0.0
        } else {
            all.iter().map(|r| r.elapsed_ms).sum::<f64>() / all.len() as f64
        };
        let path = out.join("timing.json");
        write_json(
            &path,
            &TimingReport {
                policy: config.inference.policy.label(),
                ms_per_frame: ms,
                sequences: timings,
            },
        )?;
        println!("timing report {}", path.display());
    }
    Ok(0)
}

/// Ground truth from a dataset root (frames decide the indexing) or from a
/// directory of per-sequence annotation folders.
fn ground_truth(root: &Path) -> Result<Vec<(EvalSequence, Vec<String>)>> {
    if root.join("JPEGImages").is_dir() {
        return load_dataset(root)?
            .into_iter()
            .map(|r| {
                let gt = r
                    .annotations
                    .iter()
                    .map(|a| a.as_deref().map(read_annotation).transpose())
                    .collect::<Result<Vec<_>>>()?;
                let stems = r.frames.iter().map(|p| file_stem(p)).collect();
                Ok((EvalSequence { name: r.name, gt }, stems))
            })
            .collect();
    }
    let mut out = Vec::new();
    for dir in subdirs(root)? {
        let name = file_stem(&dir);
        let (stems, maps): (Vec<String>, Vec<LabelMap>) = read_annotation_dir(&dir)?.into_iter().unzip();
        if maps.is_empty() {
            warn!("{} holds no annotations; skipped", dir.display());
            continue;
        }
        out.push((
            EvalSequence {
                name,
                gt: maps.into_iter().map(Some).collect(),
            },
            stems,
        ));
    }
    if out.is_empty() {
        return Err(StmError::invalid(format!("no ground truth under {}", root.display())));
    }
    Ok(out)
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn subdirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| StmError::io(root, e))? {
        let path = entry.map_err(|e| StmError::io(root, e))?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn eval_cmd(args: &EvalArgs, config: &CliConfig, out: &Path) -> Result<i32> {
    let truth = ground_truth(&args.gt)?;
    let mut predictions = BTreeMap::new();
    for (seq, stems) in &truth {
        let dir = args.pred.join(&seq.name);
        if !dir.is_dir() {
            continue;
        }
        let found: BTreeMap<String, LabelMap> = read_annotation_dir(&dir)?.into_iter().collect();
        // Predictions are aligned to ground-truth frames by file stem; the
        // list stops at the first missing frame.
        let maps: Vec<LabelMap> = stems.iter().map_while(|s| found.get(s).cloned()).collect();
        predictions.insert(seq.name.clone(), maps);
    }
    let dataset: Vec<EvalSequence> = truth.into_iter().map(|(s, _)| s).collect();
    let tolerance = args.tolerance.or(config.eval.tolerance);
    let report = evaluate(&predictions, &dataset, tolerance)?;
    print_report(&report);
    fs::create_dir_all(out).map_err(|e| StmError::io(out, e))?;
    report.write_json(&out.join("metrics.json"))?;
    report.write_csv(&out.join("metrics.csv"))?;
    report.distribution.write_svg(&out.join("score_curve.svg"))?;
    Ok(0)
}

fn print_report(report: &MetricsReport) {
    for s in &report.sequences {
        println!("  {:<24} J={:.4} F={:.4}", s.name, s.j, s.f);
    }
    println!("J={:.4} F={:.4} J&F={:.4}", report.j_mean, report.f_mean, report.jf_mean);
}

#[derive(Serialize)]
struct BenchRow {
    policy: String,
    ms_per_frame: f64,
    peak_memory_entries: usize,
    j: f64,
    f: f64,
}

pub fn bench_cmd(args: &BenchArgs, config: &CliConfig, out: &Path) -> Result<i32> {
    let videos: Vec<Video> = match &args.data {
        Some(root) => load_videos(root)?.into_iter().map(|(_, v)| v).collect(),
        None => synth_videos(
            &SynthConfig {
                occlusion: true,
                ..config.synth.clone()
            },
            &mut rng(config.seed),
        )?,
    };
    let model = load_model(args.checkpoint.as_deref(), config)?;
    let interval = match config.inference.policy {
        MemoryPolicy::Interval(n) => n,
        _ => 5,
    };
    let policies = [
        MemoryPolicy::First,
        MemoryPolicy::Previous,
        MemoryPolicy::FirstAndPrevious,
        MemoryPolicy::Interval(interval),
    ];
    let dataset: Vec<EvalSequence> = videos.iter().map(EvalSequence::from_video).collect();
    let mut rows = Vec::new();
    println!("{:<12} {:>10} {:>12} {:>8} {:>8}", "policy", "ms/frame", "peak_memory", "J", "F");
    for policy in policies {
        let inference = InferenceConfig { policy, ..config.inference };
        let mut predictions = BTreeMap::new();
        let mut records = Vec::new();
        for v in &videos {
            let result = run_video(&model, &v.frames, &v.labels[0], inference)?;
            records.extend(result.records);
            predictions.insert(v.name.clone(), result.labels);
        }
        let report = evaluate(&predictions, &dataset, config.eval.tolerance)?;
        let row = BenchRow {
            policy: policy.label(),
            ms_per_frame: mean_step_ms(&records),
            peak_memory_entries: peak_entries(&records),
            j: report.j_mean,
            f: report.f_mean,
        };
        println!(
            "{:<12} {:>10.2} {:>12} {:>8.4} {:>8.4}",
            row.policy, row.ms_per_frame, row.peak_memory_entries, row.j, row.f
        );
        rows.push(row);
    }
    write_json(&out.join("bench.json"), &rows)?;
    Ok(0)
}

pub fn gradcheck_cmd(config: &CliConfig, out: &Path) -> Result<i32> {
    let checks = full_suite(config.seed)?;
    let mut failed = 0;
    for c in &checks {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!c.passed());
        println!("{status} {:<32} rel_err={:.3e} tol={:.0e} probed={}", c.name, c.rel_err, c.tolerance, c.probed);
    }
    write_json(&out.join("gradcheck.json"), &checks)?;
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    Ok(if failed == 0 { 0 } else { 3 })
}

pub fn synth_gen_cmd(args: &SynthGenArgs, config: &CliConfig, out: &Path) -> Result<i32> {
    let mut synth = config.synth.clone();
    if let Some(n) = args.sequences {
        synth.sequences = n;
    }
    if let Some(n) = args.frames {
        synth.frames = n;
    }
    if let Some(n) = args.size {
        synth.height = n;
        synth.width = n;
    }
    synth.occlusion |= args.occlusion;
    synth.drift |= args.drift;
    synth.validate()?;
    let videos = synth_videos(&synth, &mut rng(config.seed))?;
    write_dataset(out, &videos)?;
    println!("wrote {} sequences to {}", videos.len(), out.display());
    Ok(0)
}

#[derive(Serialize)]
struct SlotWeights {
    frame: usize,
    weights: Vec<f32>,
}

#[derive(Serialize)]
struct AttentionDump {
    object: u8,
    pixel: (usize, usize),
    feature_pixel: (usize, usize),
    feature_extent: (usize, usize),
    slots: Vec<SlotWeights>,
}

fn centroid(labels: &LabelMap, id: u8) -> (usize, usize) {
    let (mut sy, mut sx, mut n) = (0usize, 0usize, 0usize);
    for y in 0..labels.height {
        for x in 0..labels.width {
            if labels.get(y, x) == id {
                sy += y;
                sx += x;
                n += 1;
            }
        }
    }
    if n == 0 {
        (labels.height / 2, labels.width / 2)
    } else {
        (sy / n, sx / n)
    }
}

/// Black to red to yellow to white.
fn heat(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    [(3.0 * v).min(1.0), (3.0 * v - 1.0).clamp(0.0, 1.0), (3.0 * v - 2.0).clamp(0.0, 1.0)]
}

fn heatmap(weights: &[f32], fh: usize, fw: usize, h: usize, w: usize) -> Result<Tensor> {
    let peak = weights.iter().copied().fold(f32::MIN_POSITIVE, f32::max);
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let (y, x) = ((p / w) / STRIDE, (p % w) / STRIDE);
        heat(weights[y.min(fh - 1) * fw + x.min(fw - 1)] / peak)[c]
    })
}

pub fn viz_attn_cmd(args: &VizAttnArgs, config: &CliConfig, out: &Path) -> Result<i32> {
    let video = match (&args.sequence, &args.annotation) {
        (Some(dir), Some(ann)) => load_video(&sequence_from_dir(dir, ann)?)?.0,
        _ => synth_videos(
            &SynthConfig {
                sequences: 1,
                ..config.synth.clone()
            },
            &mut rng(config.seed),
        )?
        .remove(0),
    };
    if args.frame == 0 || args.frame >= video.len() {
        return Err(StmError::invalid(format!(
            "query frame {} must lie in 1..{}",
            args.frame,
            video.len()
        )));
    }
    let model = load_model(args.checkpoint.as_deref(), config)?;
    let mut session = VideoSession::from_labels(&model, &video.frames[0], &video.labels[0], config.inference)?;
    for frame in &video.frames[1..args.frame] {
        session.step(frame)?;
    }
    let (h, w) = video.extent();
    let query = &video.frames[args.frame];
    fs::create_dir_all(out).map_err(|e| StmError::io(out, e))?;
    write_frame(&out.join("query.png"), query)?;
    let mut dumps = Vec::new();
    for (m, &id) in session.object_ids().to_vec().iter().enumerate() {
        let pixel = args.pixel.unwrap_or_else(|| centroid(&video.labels[0], id));
        if pixel.0 >= h || pixel.1 >= w {
            return Err(StmError::invalid(format!("pixel {pixel:?} lies outside the {h}x{w} frame")));
        }
        let feature_pixel = (pixel.0 / STRIDE, pixel.1 / STRIDE);
        let (weights, frames) = session.attention(query, m, feature_pixel)?;
        let (fh, fw) = (weights.shape()[1], weights.shape()[2]);
        let mut slots = Vec::new();
        for (k, &frame) in frames.iter().enumerate() {
            let plane = &weights.data()[k * fh * fw..(k + 1) * fh * fw];
            write_frame(
                &out.join(format!("attn_obj{id}_slot{k}_frame{frame:05}.png")),
                &heatmap(plane, fh, fw, h, w)?,
            )?;
            slots.push(SlotWeights {
                frame,
                weights: plane.to_vec(),
            });
        }
        dumps.push(AttentionDump {
            object: id,
            pixel,
            feature_pixel,
            feature_extent: (fh, fw),
            slots,
        });
    }
    write_json(&out.join("attention.json"), &dumps)?;
    println!("attention maps for {} objects in {}", dumps.len(), out.display());
    Ok(0)
}
