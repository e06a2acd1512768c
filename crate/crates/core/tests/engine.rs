use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stm_core::data::{synth_videos, SynthConfig, Video};
use stm_core::encoders::KeyValuePair;
use stm_core::engine::{pad_frame, run_video, InferenceConfig, VideoSession};
use stm_core::memory::{MemoryPolicy, MemoryStore};
use stm_core::{LabelMap, StmError, StmModel, Tensor};

fn model() -> StmModel {
    StmModel::init(Default::default(), 11).unwrap()
}

fn video(seed: u64, frames: usize, objects: usize, extent: (usize, usize)) -> Video {
    let config = SynthConfig {
        sequences: 1,
        frames,
        height: extent.0,
        width: extent.1,
        min_objects: objects,
        max_objects: objects,
        ..Default::default()
    };
    synth_videos(&config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().remove(0)
}

fn masks(labels: &LabelMap, ids: &[u8]) -> Vec<Tensor> {
    ids.iter().map(|&id| labels.mask_tensor(id)).collect()
}

#[test]
fn one_store_per_object_with_one_entry() {
    let m = model();
    for objects in [1u8, 3] {
        let v = video(objects as u64, 2, objects as usize, (32, 32));
        let ids: Vec<u8> = (1..=objects).collect();
        let s = VideoSession::new(&m, &v.frames[0], &masks(&v.labels[0], &ids), &ids, InferenceConfig::default()).unwrap();
        assert_eq!(s.stores().len(), objects as usize);
        for store in s.stores() {
            assert_eq!(store.len(), 1);
            assert_eq!(store.permanent_frames(), vec![0]);
        }
    }
}

#[test]
fn empty_first_mask_is_accepted_with_a_warning() {
    let m = model();
    let v = video(4, 3, 1, (32, 32));
    let empty = Tensor::zeros(&[1, 32, 32]).unwrap();
    let mut s = VideoSession::new(&m, &v.frames[0], &[empty], &[1], InferenceConfig::default()).unwrap();
    assert_eq!(s.warnings().len(), 1);
    assert_eq!(s.stores()[0].len(), 1);
    s.step(&v.frames[1]).unwrap();
}

#[test]
fn overlapping_or_non_binary_masks_are_rejected() {
    let m = model();
    let v = video(5, 2, 1, (32, 32));
    let a = v.labels[0].mask_tensor::<f32>(1);
    let err = VideoSession::new(&m, &v.frames[0], &[a.clone(), a.clone()], &[1, 2], InferenceConfig::default()).err().unwrap();
    assert!(matches!(err, StmError::Validation(_)), "{err}");
    let half = a.map(|x| x * 0.5);
    let err = VideoSession::new(&m, &v.frames[0], &[half], &[1], InferenceConfig::default()).err().unwrap();
    assert!(matches!(err, StmError::Validation(_)));
}

#[test]
fn frame_extent_mismatch_is_a_validation_error() {
    let m = model();
    let v = video(6, 2, 1, (32, 32));
    let mut s = VideoSession::from_labels(&m, &v.frames[0], &v.labels[0], InferenceConfig::default()).unwrap();
    let other = Tensor::zeros(&[3, 48, 32]).unwrap();
    assert!(matches!(s.step(&other), Err(StmError::Validation(_))));
}

#[test]
fn infinite_interval_keeps_two_entries() {
    let m = model();
    let v = video(7, 8, 2, (32, 32));
    let config = InferenceConfig {
        policy: MemoryPolicy::FirstAndPrevious,
        ..Default::default()
    };
    let mut s = VideoSession::from_labels(&m, &v.frames[0], &v.labels[0], config).unwrap();
    for (k, f) in v.frames.iter().enumerate().skip(1) {
        let out = s.step(f).unwrap();
        assert_eq!(out.memory_entries, vec![2; s.stores().len()]);
        for store in s.stores() {
            assert_eq!(store.previous_frame(), Some(k));
        }
    }
}

#[test]
fn interval_five_after_eleven_steps() {
    let m = model();
    let v = video(8, 12, 1, (32, 32));
    let mut s = VideoSession::from_labels(&m, &v.frames[0], &v.labels[0], InferenceConfig::default()).unwrap();
    for f in &v.frames[1..12] {
        s.step(f).unwrap();
    }
    assert_eq!(s.frame_index(), 11);
    // Frame 10 was promoted when frame 11 displaced it from the previous slot.
    assert_eq!(s.stores()[0].permanent_frames(), vec![0, 5, 10]);
    assert_eq!(s.stores()[0].previous_frame(), Some(11));
}

fn dummy_pair(frame: usize) -> KeyValuePair {
    KeyValuePair::new(
        Tensor::full(&[2, 1, 1], frame as f32).unwrap(),
        Tensor::full(&[4, 1, 1], frame as f32).unwrap(),
    )
    .unwrap()
}

#[test]
fn policy_simulation_matches_closed_form() {
    for n in [Some(1), Some(2), Some(5), None] {
        let policy = n.map_or(MemoryPolicy::FirstAndPrevious, MemoryPolicy::Interval);
        let mut store = MemoryStore::new(policy, None).unwrap();
        store.init(dummy_pair(0), 0).unwrap();
        assert_eq!(store.len(), 1);
        for t in 1..=100usize {
            store.update(dummy_pair(t), t).unwrap();
            let expected = match n {
                Some(n) => 1 + t / n - usize::from(t % n == 0),
                None => 1,
            };
            assert_eq!(store.permanent_frames().len(), expected, "N={n:?} t={t}");
            assert_eq!(store.previous_frame(), Some(t));
        }
    }
}

#[test]
fn single_frame_video_echoes_the_annotation() {
    let m = model();
    let v = video(9, 1, 2, (32, 32));
    let out = run_video(&m, &v.frames, &v.labels[0], InferenceConfig::default()).unwrap();
    assert_eq!(out.labels, vec![v.labels[0].clone()]);
}

#[test]
fn outputs_cover_every_frame_and_start_with_ground_truth() {
    let m = model();
    let v = video(10, 4, 2, (40, 24));
    let out = run_video(&m, &v.frames, &v.labels[0], InferenceConfig::default()).unwrap();
    assert_eq!(out.labels.len(), 4);
    assert_eq!(out.labels[0], v.labels[0]);
    for l in &out.labels {
        assert_eq!((l.height, l.width), (40, 24));
    }
}

#[test]
fn step_errors_name_the_frame() {
    let m = model();
    let mut v = video(12, 4, 1, (32, 32));
    v.frames[2] = Tensor::zeros(&[3, 16, 16]).unwrap();
    let err = run_video(&m, &v.frames, &v.labels[0], InferenceConfig::default()).err().unwrap();
    assert!(err.to_string().contains("frame 2"), "{err}");
}

#[test]
fn deterministic_runs_are_bit_identical() {
    let m = model();
    let v = video(13, 6, 2, (32, 32));
    let config = InferenceConfig {
        deterministic: true,
        ..Default::default()
    };
    let mut a = VideoSession::from_labels(&m, &v.frames[0], &v.labels[0], config).unwrap();
    let mut b = VideoSession::from_labels(&m, &v.frames[0], &v.labels[0], config).unwrap();
    for f in &v.frames[1..] {
        let (x, y) = (a.step(f).unwrap(), b.step(f).unwrap());
        assert_eq!(x.labels, y.labels);
        for (p, q) in x.probs.iter().zip(&y.probs) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(p), bits(q));
        }
    }
}

#[test]
fn probabilities_sum_to_at_most_one() {
    let m = model();
    let v = video(14, 3, 2, (32, 32));
    let mut s = VideoSession::from_labels(&m, &v.frames[0], &v.labels[0], InferenceConfig::default()).unwrap();
    let out = s.step(&v.frames[1]).unwrap();
    let total = out.probs[0].add(&out.probs[1]).unwrap();
    assert!(total.data().iter().all(|&p| p > 0.0 && p < 1.0 + 1e-6));
}

#[test]
fn padding_replicates_edges() {
    let f = Tensor::from_fn(&[3, 17, 5], |i| i as f32).unwrap();
    let p = pad_frame(&f).unwrap();
    assert_eq!(p.shape(), &[3, 32, 16]);
    assert_eq!(p.get(&[0, 31, 15]), f.get(&[0, 16, 4]));
}
