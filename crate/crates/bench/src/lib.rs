//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
pub use stm_core::engine::{InferenceConfig, VideoSession};
pub use stm_core::memory::{read_fast, space_time_read};
pub use stm_core::{LabelMap, MemoryPolicy, ModelConfig, StmModel, Tensor};

/// Uniform `[-1, 1)` tensor from `seed`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).expect("valid shape")
}

/// Query key/value and a `t`-slot memory at feature extent `h×w`.
pub struct ReadInputs {
    pub kq: Tensor,
    pub vq: Tensor,
    pub km: Tensor,
    pub vm: Tensor,
}

pub fn read_inputs(config: &ModelConfig, t: usize, h: usize, w: usize) -> ReadInputs {
    let (ck, cv) = (config.key_channels(), config.value_channels());
    ReadInputs {
        kq: random_tensor(&[ck, h, w], 1),
        vq: random_tensor(&[cv, h, w], 2),
        km: random_tensor(&[t, ck, h, w], 3),
        vm: random_tensor(&[t, cv, h, w], 4),
    }
}

/// A smooth RGB frame in `[0, 1]`.
pub fn frame(h: usize, w: usize, phase: f32) -> Tensor {
    Tensor::from_fn(&[3, h, w], |i| {
        let p = (i % (h * w)) as f32;
        0.5 + 0.4 * (0.05 * p + phase + (i / (h * w)) as f32).sin()
    })
    .expect("valid shape")
}
