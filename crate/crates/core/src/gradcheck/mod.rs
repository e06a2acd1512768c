//! Central finite-difference checks of tape gradients, run in `f64`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Result, StmError};
use crate::tensor::{Tape, Tensor, Var};

pub mod suite;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the probed entries.
    pub rel_err: f64,
    pub probed: usize,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_err.is_finite() && self.rel_err < self.tolerance
    }
}

/// Compares reverse-mode gradients of a scalar-valued `f` against central
/// differences with step `h`. At most `max_probes` entries per input are
/// perturbed (chosen by `seed`); `None` probes every entry.
pub fn check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    f: F,
    h: f64,
    tolerance: f64,
    max_probes: Option<usize>,
    seed: u64,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_value(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_value(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut diff_sq = 0.0;
    let mut analytic_sq = 0.0;
    let mut numeric_sq = 0.0;
    let mut probed = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let n = inputs[slot].len();
        let zeros = Tensor::zeros(inputs[slot].shape())?;
        let analytic = grads.get(*var).unwrap_or(&zeros);
        let picks: Vec<usize> = match max_probes {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for idx in picks {
            let orig = inputs[slot].data()[idx];
            work[slot].data_mut()[idx] = orig + h;
            let plus = eval(&work)?;
            work[slot].data_mut()[idx] = orig - h;
            let minus = eval(&work)?;
            work[slot].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[idx];
            diff_sq += (a - numeric).powi(2);
            analytic_sq += a * a;
            numeric_sq += numeric * numeric;
            probed += 1;
        }
    }
    let scale = analytic_sq.max(numeric_sq).sqrt();
    let rel_err = if scale == 0.0 { 0.0 } else { diff_sq.sqrt() / scale };
    Ok(GradCheck {
        name: name.to_string(),
        rel_err,
        probed,
        tolerance,
    })
}

fn scalar_value(tape: &Tape<f64>, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(StmError::dim(format!(
            "gradient check needs a scalar output, got {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Reduces a tensor-valued output to a scalar with a fixed random weighting,
/// so every output element contributes to the checked gradient.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let weights = Tensor::from_fn(tape.value(out).shape(), |_| rng.random_range(-1.0..1.0))?;
    let w = tape.constant(weights);
    let weighted = tape.mul(out, w)?;
    tape.sum(weighted)
}

/// Uniform random tensor in `[-scale, scale)`, kept at least `gap` away from
/// zero so kinks such as ReLU are not straddled by the finite difference.
pub fn random_input<R: Rng + ?Sized>(shape: &[usize], scale: f64, gap: f64, rng: &mut R) -> Result<Tensor<f64>> {
    Tensor::from_fn(shape, |_| {
        let mag = rng.random_range(gap..scale);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}
