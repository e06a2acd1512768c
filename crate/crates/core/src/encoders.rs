//! Query and memory encoders.
//!
//! Both encoders run the same four-stage residual backbone (stride 16 in
//! total) followed by two parallel linear 3×3 projections: a key with
//! `C16/8` channels and a value with `C16/2` channels. The memory encoder
//! sees the frame concatenated with a one-channel object probability map.

use crate::error::{Result, StmError};
use crate::model::{Bound, ModelConfig};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Total downsampling factor of the backbone.
pub const STRIDE: usize = 16;

/// Key and value maps of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyValuePair<E = f32> {
    pub key: Tensor<E>,
    pub value: Tensor<E>,
}

impl<E: Element> KeyValuePair<E> {
    pub fn new(key: Tensor<E>, value: Tensor<E>) -> Result<Self> {
        key.expect_rank(3, "key map")?;
        value.expect_rank(3, "value map")?;
        if key.shape()[1..] != value.shape()[1..] {
            return Err(StmError::dim(format!(
                "key {:?} and value {:?} spatial extents differ",
                key.shape(),
                value.shape()
            )));
        }
        Ok(KeyValuePair { key, value })
    }

    /// `(height, width)` of the maps.
    pub fn extent(&self) -> (usize, usize) {
        (self.key.shape()[1], self.key.shape()[2])
    }
}

/// Key/value maps still attached to a tape.
#[derive(Clone, Copy, Debug)]
pub struct KeyValueVars {
    pub key: Var,
    pub value: Var,
}

impl KeyValueVars {
    pub fn detach<E: Element>(&self, tape: &Tape<E>) -> KeyValuePair<E> {
        KeyValuePair {
            key: tape.value(self.key).clone(),
            value: tape.value(self.value).clone(),
        }
    }
}

/// Backbone features at strides 4 and 8, taken before activation.
#[derive(Clone, Copy, Debug)]
pub struct SkipFeatures {
    pub stride4: Var,
    pub stride8: Var,
}

fn check_frame<E: Element>(frame: &Tensor<E>, channels: usize) -> Result<(usize, usize)> {
    frame.expect_rank(3, "frame")?;
    let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    if c != channels {
        return Err(StmError::dim(format!("expected {channels} channels, got {c}")));
    }
    if h % STRIDE != 0 || w % STRIDE != 0 {
        return Err(StmError::invalid(format!(
            "frame extents {h}x{w} are not divisible by {STRIDE}"
        )));
    }
    Ok((h, w))
}

struct BackboneOut {
    stride4: Var,
    stride8: Var,
    stride16: Var,
}

fn backbone<E: Element>(tape: &mut Tape<E>, params: &Bound, prefix: &str, input: Var) -> Result<BackboneOut> {
    let mut x = input;
    let mut taps = Vec::with_capacity(4);
    for stage in 1..=4 {
        x = params.conv(tape, &format!("{prefix}/stage{stage}/down"), x, 2)?;
        x = params.residual(tape, &format!("{prefix}/stage{stage}/res"), x)?;
        taps.push(x);
    }
    Ok(BackboneOut {
        stride4: taps[1],
        stride8: taps[2],
        stride16: taps[3],
    })
}

fn project<E: Element>(tape: &mut Tape<E>, params: &Bound, prefix: &str, feature: Var) -> Result<KeyValueVars> {
    let h = tape.relu(feature)?;
    Ok(KeyValueVars {
        key: params.conv(tape, &format!("{prefix}/key"), h, 1)?,
        value: params.conv(tape, &format!("{prefix}/value"), h, 1)?,
    })
}

/// Encodes a `3×H×W` query frame.
pub fn encode_query<E: Element>(tape: &mut Tape<E>, params: &Bound, frame: Var) -> Result<(KeyValueVars, SkipFeatures)> {
    check_frame(tape.value(frame), 3)?;
    let feats = backbone(tape, params, "enc_q", frame)?;
    let kv = project(tape, params, "enc_q", feats.stride16)?;
    Ok((
        kv,
        SkipFeatures {
            stride4: feats.stride4,
            stride8: feats.stride8,
        },
    ))
}

/// Encodes a `3×H×W` frame together with its `1×H×W` object probability map.
pub fn encode_memory<E: Element>(tape: &mut Tape<E>, params: &Bound, frame: Var, mask: Var) -> Result<KeyValueVars> {
    let (h, w) = check_frame(tape.value(frame), 3)?;
    let m = tape.value(mask);
    if m.shape() != [1, h, w] {
        return Err(StmError::dim(format!(
            "mask shape {:?} does not match frame {h}x{w}",
            m.shape()
        )));
    }
    if !m.data().iter().all(|&v| v >= E::zero() && v <= E::one()) {
        return Err(StmError::invalid("mask values must lie in [0, 1]"));
    }
    let input = tape.concat(&[frame, mask], 0)?;
    let feats = backbone(tape, params, "enc_m", input)?;
    project(tape, params, "enc_m", feats.stride16)
}

/// Stacks per-frame maps along a new leading time axis.
pub fn stack_memory<E: Element>(pairs: &[KeyValuePair<E>]) -> Result<(Tensor<E>, Tensor<E>)> {
    let first = pairs
        .first()
        .ok_or_else(|| StmError::invalid("cannot stack an empty memory"))?;
    let mut keys = Vec::with_capacity(pairs.len());
    let mut values = Vec::with_capacity(pairs.len());
    for p in pairs {
        if p.key.shape() != first.key.shape() || p.value.shape() != first.value.shape() {
            return Err(StmError::dim(format!(
                "memory entries disagree: key {:?} vs {:?}, value {:?} vs {:?}",
                p.key.shape(),
                first.key.shape(),
                p.value.shape(),
                first.value.shape()
            )));
        }
        keys.push(with_time_axis(&p.key)?);
        values.push(with_time_axis(&p.value)?);
    }
    let keys: Vec<&Tensor<E>> = keys.iter().collect();
    let values: Vec<&Tensor<E>> = values.iter().collect();
    Ok((Tensor::concat(&keys, 0)?, Tensor::concat(&values, 0)?))
}

/// Tape version of [`stack_memory`], differentiable w.r.t. every entry.
pub fn stack_memory_vars<E: Element>(tape: &mut Tape<E>, pairs: &[KeyValueVars]) -> Result<(Var, Var)> {
    if pairs.is_empty() {
        return Err(StmError::invalid("cannot stack an empty memory"));
    }
    let mut keys = Vec::with_capacity(pairs.len());
    let mut values = Vec::with_capacity(pairs.len());
    for p in pairs {
        let ks = [1].iter().chain(tape.value(p.key).shape()).copied().collect::<Vec<_>>();
        let vs = [1].iter().chain(tape.value(p.value).shape()).copied().collect::<Vec<_>>();
        keys.push(tape.reshape(p.key, &ks)?);
        values.push(tape.reshape(p.value, &vs)?);
    }
    Ok((tape.concat(&keys, 0)?, tape.concat(&values, 0)?))
}

fn with_time_axis<E: Element>(t: &Tensor<E>) -> Result<Tensor<E>> {
    let shape: Vec<usize> = [1].iter().chain(t.shape()).copied().collect();
    t.reshape(&shape)
}

/// Output extents of the key map for an `H×W` frame.
pub fn feature_extent(config: &ModelConfig, height: usize, width: usize) -> ([usize; 3], [usize; 3]) {
    let (h, w) = (height / STRIDE, width / STRIDE);
    ([config.key_channels(), h, w], [config.value_channels(), h, w])
}
