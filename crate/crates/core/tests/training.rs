use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stm_core::data::{synth_scenes, synth_videos, Scene, SynthConfig, Video};
use stm_core::training::augment::{warp_image, warp_labels};
use stm_core::training::{
    clip_loss, curriculum_max_skip, main_train, pretrain, read_log, sample_indices, sample_video_clip, synthesize_clip, train_step, Adam,
    AffineParams, AffineRanges, Clip, RunOptions, TrainConfig,
};
use stm_core::{LabelMap, ModelConfig, StmError, StmModel, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn square_scene(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> Scene {
    let inside = |y: usize, x: usize| (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x);
    let image = Tensor::from_fn(&[3, h, w], |i| {
        let p = i % (h * w);
        if inside(p / w, p % w) {
            0.9
        } else {
            0.1 + 0.01 * (i % 7) as f32
        }
    })
    .unwrap();
    let labels = LabelMap::new(h, w, (0..h * w).map(|p| inside(p / w, p % w) as u8).collect()).unwrap();
    Scene { image, labels }
}

fn centroid(l: &LabelMap) -> (f64, f64) {
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
    for y in 0..l.height {
        for x in 0..l.width {
            if l.get(y, x) != 0 {
                sy += y as f64;
                sx += x as f64;
                n += 1.0;
            }
        }
    }
    (sy / n, sx / n)
}

#[test]
fn identity_ranges_give_identical_frames() {
    let scene = square_scene(32, 32, 8, 10, 9);
    let clip = synthesize_clip(&scene, &mut rng(1), &AffineRanges::identity(), (32, 32)).unwrap();
    for t in 0..3 {
        assert_eq!(clip.frames[t], scene.image);
        assert_eq!(clip.labels[t], scene.labels);
    }
}

#[test]
fn translation_shifts_the_centroid_exactly() {
    let scene = square_scene(64, 64, 20, 20, 10);
    let params = AffineParams {
        translate: (10.0 / 64.0, 0.0),
        ..AffineParams::identity(64, 64)
    };
    let moved = warp_labels(&scene.labels, &params).unwrap();
    let (a, b) = (centroid(&scene.labels), centroid(&moved));
    assert_eq!((b.0 - a.0, b.1 - a.1), (0.0, 10.0));
    let img = warp_image(&scene.image, &params).unwrap();
    assert_eq!(img.get(&[0, 25, 35]), 0.9);
}

#[test]
fn seeded_clips_are_reproducible() {
    let scene = square_scene(48, 48, 10, 12, 14);
    let ranges = AffineRanges::default();
    let a = synthesize_clip(&scene, &mut rng(3), &ranges, (32, 32)).unwrap();
    let b = synthesize_clip(&scene, &mut rng(3), &ranges, (32, 32)).unwrap();
    assert_eq!(a, b);
    for l in &a.labels {
        assert_eq!((l.height, l.width), (32, 32));
    }
}

#[test]
fn objects_pushed_out_of_view_are_resampled() {
    // A tiny object near the corner; a wide translation range often loses it.
    let scene = square_scene(32, 32, 0, 0, 3);
    let ranges = AffineRanges {
        translate: 0.4,
        ..AffineRanges::identity()
    };
    let mut kept = 0;
    for s in 0..20 {
        let clip = synthesize_clip(&scene, &mut rng(s), &ranges, (32, 32)).unwrap();
        kept += clip.labels.iter().filter(|l| l.max_label() == 1).count();
    }
    assert!(kept >= 57, "{kept} of 60 frames kept the object");
}

#[test]
fn curriculum_examples() {
    assert_eq!(curriculum_max_skip(0, 100_000, 25), 0);
    assert_eq!(curriculum_max_skip(50_000, 100_000, 25), 12);
    assert_eq!(curriculum_max_skip(100_000, 100_000, 25), 25);
    assert_eq!(curriculum_max_skip(1_000_000, 100_000, 25), 25);
}

proptest! {
    #[test]
    fn curriculum_is_monotone_and_clamped(a in 0usize..200_000, b in 0usize..200_000, end in 1usize..150_000) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (x, y) = (curriculum_max_skip(lo, end, 25), curriculum_max_skip(hi, end, 25));
        prop_assert!(x <= y && y <= 25);
    }

    #[test]
    fn sampled_gaps_are_valid(len in 3usize..40, max_skip in 0usize..30, seed in 0u64..1000) {
        let [a, b, c] = sample_indices(len, max_skip, &mut rng(seed)).unwrap();
        prop_assert!(a < b && b < c && c < len);
        prop_assert!(b - a <= max_skip + 1 && c - b <= max_skip + 1);
    }
}

#[test]
fn zero_skip_gives_consecutive_frames() {
    let mut r = rng(2);
    for _ in 0..50 {
        let [a, b, c] = sample_indices(30, 0, &mut r).unwrap();
        assert_eq!((b, c), (a + 1, a + 2));
    }
}

#[test]
fn gap_distribution_is_uniform_over_triples() {
    let (len, max_skip) = (12usize, 3usize);
    let mut r = rng(7);
    let mut counts = std::collections::HashMap::new();
    let mut gaps = [0usize; 5];
    let draws = 10_000;
    for _ in 0..draws {
        let idx = sample_indices(len, max_skip, &mut r).unwrap();
        gaps[idx[1] - idx[0]] += 1;
        gaps[idx[2] - idx[1]] += 1;
        *counts.entry(idx).or_insert(0usize) += 1;
    }
    assert!(gaps[1..=4].iter().all(|&g| g > 0), "{gaps:?}");
    // Every valid triple appears, each near draws / count.
    let valid: usize = (1..=4).flat_map(|g1| (1..=4).map(move |g2| len.saturating_sub(g1 + g2))).sum();
    assert_eq!(counts.len(), valid);
    let expected = draws as f64 / valid as f64;
    for (&idx, &c) in &counts {
        assert!((c as f64 - expected).abs() < 5.0 * expected.sqrt() + 3.0, "{idx:?}: {c} vs {expected}");
    }
}

#[test]
fn short_videos_are_rejected() {
    let video = synth_videos(&SynthConfig { sequences: 1, frames: 2, ..Default::default() }, &mut rng(0)).unwrap().remove(0);
    assert!(matches!(sample_video_clip(&video, 0, (64, 64), &mut rng(1)), Err(StmError::Validation(_))));
}

fn clips(seed: u64, count: usize, objects: usize) -> Vec<Clip> {
    let config = SynthConfig {
        sequences: count,
        frames: 6,
        height: 32,
        width: 32,
        min_objects: objects,
        max_objects: objects,
        ..Default::default()
    };
    let videos: Vec<Video> = synth_videos(&config, &mut rng(seed)).unwrap();
    videos.iter().map(|v| sample_video_clip(v, 1, (32, 32), &mut rng(seed)).unwrap()).collect()
}

#[test]
fn zero_head_starts_at_ln_two() {
    let mut model = StmModel::init(ModelConfig::default(), 2).unwrap();
    model.zero_prediction_head();
    let clip = &clips(1, 1, 1)[0];
    let mut tape = Tape::inference();
    let params = model.bind(&mut tape, false);
    let out = clip_loss(&mut tape, &params, &clip.frames, &clip.labels, 1).unwrap();
    let loss = tape.value(out.loss).item() as f64;
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-5, "{loss}");
}

#[test]
fn fed_masks_are_soft() {
    let model = StmModel::init(ModelConfig::default(), 3).unwrap();
    let clip = &clips(2, 1, 2)[0];
    let mut tape = Tape::inference();
    let params = model.bind(&mut tape, false);
    let out = clip_loss(&mut tape, &params, &clip.frames, &clip.labels, 2).unwrap();
    assert_eq!(out.fed_masks.len(), 2);
    for m in out.fed_masks {
        assert!(tape.value(m).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
}

#[test]
fn overfitting_one_batch_lowers_the_loss() {
    let mut model = StmModel::init(ModelConfig::default(), 4).unwrap();
    let scene = &synth_scenes(&SynthConfig { height: 32, width: 32, ..Default::default() }, 1, &mut rng(5)).unwrap()[0];
    let clip = Clip::new(vec![scene.image.clone(); 3], vec![scene.labels.clone(); 3]).unwrap();
    let batch = vec![clip];
    let mut opt = Adam::new(1e-3, 0.9, 0.999, 1e-8);
    let losses: Vec<f64> = (0..200).map(|_| train_step(&mut model, &mut opt, &batch, true).unwrap()).collect();
    let window = |k: usize| losses[k..k + 20].iter().sum::<f64>() / 20.0;
    let means: Vec<f64> = (0..10).map(|i| window(i * 18)).collect();
    // Bilinear upsampling of quarter-resolution logits leaves a floor at
    // object boundaries, so the average may flatten but never climb.
    for w in means.windows(2) {
        assert!(w[1] < w[0] + 1e-3, "moving average rose: {means:?}");
    }
    assert!(losses[199] < 0.1 * losses[0], "{} -> {}", losses[0], losses[199]);
}

#[test]
fn non_finite_input_is_a_numeric_error() {
    let mut model = StmModel::init(ModelConfig::default(), 5).unwrap();
    let before = model.clone();
    let mut clip = clips(3, 1, 1).remove(0);
    clip.frames[1].data_mut()[7] = f32::NAN;
    let mut opt = Adam::new(1e-3, 0.9, 0.999, 1e-8);
    let err = train_step(&mut model, &mut opt, &[clip], false).err().unwrap();
    assert!(matches!(err, StmError::Numeric(_)), "{err}");
    assert_eq!(model, before);
}

fn small_config() -> TrainConfig {
    TrainConfig {
        crop: 32,
        pretrain_iterations: 6,
        main_iterations: 6,
        checkpoint_every: 3,
        deterministic: true,
        seed: 9,
        ..Default::default()
    }
}

#[test]
fn resume_reproduces_the_next_loss() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config();
    let videos = synth_videos(&SynthConfig { sequences: 3, frames: 8, height: 32, width: 32, ..Default::default() }, &mut rng(6)).unwrap();
    let init = StmModel::init(config.model, 1).unwrap();
    let full = main_train(init.clone(), &videos, &config, &RunOptions::default()).unwrap();
    let run = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        resume: None,
    };
    let first = TrainConfig {
        main_iterations: 6,
        ..config.clone()
    };
    main_train(init.clone(), &videos, &first, &run).unwrap();
    let ckpt = dir.path().join("main-000003.ckpt");
    assert!(ckpt.is_file());
    let resumed = main_train(
        init,
        &videos,
        &config,
        &RunOptions {
            out_dir: None,
            resume: Some(ckpt),
        },
    )
    .unwrap();
    assert_eq!(resumed.log[0].iteration, 3);
    for (a, b) in resumed.log.iter().zip(&full.log[3..]) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }
    assert_eq!(resumed.model, full.model);
    let log = read_log(&dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.len(), 6);
    assert!(log.iter().all(|e| e.max_skip <= 25));
}

#[test]
fn identical_seeds_give_identical_losses() {
    let config = small_config();
    let scenes = synth_scenes(&SynthConfig { height: 32, width: 32, ..Default::default() }, 4, &mut rng(8)).unwrap();
    let before = scenes.clone();
    let init = StmModel::init(config.model, 1).unwrap();
    let a = pretrain(init.clone(), &scenes, &config, &RunOptions::default()).unwrap();
    let b = pretrain(init, &scenes, &config, &RunOptions::default()).unwrap();
    let bits = |o: &stm_core::training::TrainOutcome| o.log.iter().map(|e| e.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(scenes, before);
}

#[test]
fn empty_datasets_are_rejected() {
    let config = small_config();
    let init = StmModel::init(config.model, 1).unwrap();
    assert!(pretrain(init.clone(), &[], &config, &RunOptions::default()).is_err());
    assert!(main_train(init, &[], &config, &RunOptions::default()).is_err());
}

#[test]
fn config_presets() {
    let full = TrainConfig::full_size_preset();
    assert_eq!((full.crop, full.batch_size, full.learning_rate), (384, 4, 1e-5));
    assert_eq!((full.beta1, full.beta2), (0.9, 0.999));
    assert_eq!(TrainConfig::default().max_skip, 25);
    let c = TrainConfig {
        main_iterations: 1000,
        ..Default::default()
    };
    assert_eq!(c.curriculum_end(), 800);
}
