//! Mask decoder: compresses the read output, then refines it from stride
//! 16 to stride 4 using backbone skip features, and predicts two-class
//! logits at a quarter of the input resolution.

use crate::encoders::SkipFeatures;
use crate::error::{Result, StmError};
use crate::model::Bound;
use crate::tensor::{Element, Tape, Var};

/// One refinement stage: the skip feature is projected to the decoder
/// width, added to the 2× upsampled coarse map and passed through a
/// residual block.
pub fn refine<E: Element>(tape: &mut Tape<E>, params: &Bound, prefix: &str, coarse: Var, skip: Var) -> Result<Var> {
    let (cs, ss) = (tape.value(coarse).shape().to_vec(), tape.value(skip).shape().to_vec());
    if cs.len() != 3 || ss.len() != 3 || ss[1] != 2 * cs[1] || ss[2] != 2 * cs[2] {
        return Err(StmError::dim(format!(
            "refine: skip {ss:?} must be twice the spatial extent of coarse {cs:?}"
        )));
    }
    let s = params.conv(tape, &format!("{prefix}/skip"), skip, 1)?;
    let up = tape.upsample_bilinear(coarse, 2)?;
    let m = tape.add(s, up)?;
    params.residual(tape, &format!("{prefix}/res"), m)
}

/// Two-channel (background, foreground) logits at stride 4.
pub fn decode<E: Element>(tape: &mut Tape<E>, params: &Bound, read: Var, skips: &SkipFeatures) -> Result<Var> {
    let x = params.conv(tape, "dec/compress", read, 1)?;
    let x = params.residual(tape, "dec/compress_res", x)?;
    let x = refine(tape, params, "dec/refine8", x, skips.stride8)?;
    let x = refine(tape, params, "dec/refine4", x, skips.stride4)?;
    let x = tape.relu(x)?;
    params.conv(tape, "dec/pred", x, 1)
}

/// Foreground probability at input resolution: softmax over the two
/// channels, then a parameter-free bilinear ×4 upsampling.
pub fn to_probability<E: Element>(tape: &mut Tape<E>, logits: Var) -> Result<Var> {
    let shape = tape.value(logits).shape();
    if shape.len() != 3 || shape[0] != 2 {
        return Err(StmError::dim(format!(
            "expected 2×h×w logits, got {shape:?}"
        )));
    }
    let probs = tape.softmax(logits, 0)?;
    let fg = tape.slice(probs, 0, 1, 1)?;
    tape.upsample_bilinear(fg, 4)
}
