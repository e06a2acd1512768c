//! Merging per-object foreground maps into one normalized distribution.
//!
//! The background probability is the product of the object complements.
//! Each channel (background included) is weighted by its odds `p/(1-p)`
//! and the weights are normalized per pixel; equivalently, a softmax over
//! per-channel log-odds. Probabilities are clamped to `[1e-5, 1 - 1e-5]`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StmError};
use crate::tensor::{Element, Tape, Tensor, Var};

pub use crate::tensor::kernels::AGGREGATE_EPS;

/// Aggregated `(M+1)×H×W` distribution, channel 0 being background.
pub fn soft_aggregate<E: Element>(probs: &[Tensor<E>]) -> Result<Tensor<E>> {
    let mut tape = Tape::inference();
    let vars: Vec<Var> = probs.iter().map(|p| tape.constant(p.clone())).collect();
    let (_, agg) = soft_aggregate_vars(&mut tape, &vars)?;
    Ok(tape.value(agg).clone())
}

/// Tape form returning `(log-odds, probabilities)`. The log-odds feed a
/// cross-entropy loss directly.
pub fn soft_aggregate_vars<E: Element>(tape: &mut Tape<E>, probs: &[Var]) -> Result<(Var, Var)> {
    let logits = tape.aggregate_logits(probs)?;
    let agg = tape.softmax(logits, 0)?;
    Ok((logits, agg))
}

/// Per-pixel label map; 0 is background, `m` is object `m`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(StmError::dim(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        Ok(LabelMap { height, width, labels })
    }

    pub fn background(height: usize, width: usize) -> Self {
        LabelMap {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Binary mask of one object id.
    pub fn mask(&self, id: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == id).collect()
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// `1×H×W` float mask of one object.
    pub fn mask_tensor<E: Element>(&self, id: u8) -> Tensor<E> {
        Tensor::from_parts(
            vec![1, self.height, self.width],
            self.labels
                .iter()
                .map(|&l| if l == id { E::one() } else { E::zero() })
                .collect(),
        )
    }
}

/// Per-pixel argmax over channels; ties go to the lower channel index.
pub fn argmax_labels<E: Element>(agg: &Tensor<E>) -> Result<LabelMap> {
    agg.expect_rank(3, "aggregated probabilities")?;
    let (c, h, w) = (agg.shape()[0], agg.shape()[1], agg.shape()[2]);
    if c > 256 {
        return Err(StmError::invalid("at most 255 objects are supported"));
    }
    let n = h * w;
    let d = agg.data();
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for ch in 1..c {
                if d[ch * n + i] > d[best * n + i] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, labels)
}
