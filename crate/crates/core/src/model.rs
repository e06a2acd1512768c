//! Network configuration, parameter storage and initialization.

use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StmError};
use crate::tensor::{read_checkpoint, write_checkpoint, Element, Tape, Tensor, Var};

/// Channel layout of the backbone and decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Channels after the stride-2, 4, 8 and 16 stages. The last entry is
    /// the base width `C16` from which key (`C16/8`) and value (`C16/2`)
    /// widths derive.
    pub widths: [usize; 4],
    /// Width of every intermediate decoder convolution.
    pub decoder_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: [16, 32, 48, 64],
            decoder_width: 64,
        }
    }
}

impl ModelConfig {
    /// Channel counts of the ResNet50 `res4` setting (1024 at stride 16, 256 in the decoder).
    pub fn full_size_preset() -> Self {
        ModelConfig {
            widths: [64, 256, 512, 1024],
            decoder_width: 256,
        }
    }

    pub fn base_width(&self) -> usize {
        self.widths[3]
    }

    pub fn key_channels(&self) -> usize {
        self.base_width() / 8
    }

    pub fn value_channels(&self) -> usize {
        self.base_width() / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) || self.decoder_width == 0 {
            return Err(StmError::invalid("model widths must be positive"));
        }
        if self.base_width() % 8 != 0 {
            return Err(StmError::invalid(format!(
                "base width {} must be divisible by 8",
                self.base_width()
            )));
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<E = f32> {
    tensors: IndexMap<String, Tensor<E>>,
}

impl<E: Element> Default for ParamSet<E> {
    fn default() -> Self {
        ParamSet {
            tensors: IndexMap::new(),
        }
    }
}

impl<E: Element> ParamSet<E> {
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<E>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<E>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<F: Element>(&self) -> ParamSet<F> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Registers every tensor on the tape.
    pub fn bind(&self, tape: &mut Tape<E>, trainable: bool) -> Bound {
        self.bind_with(tape, trainable, &[])
    }

    /// Binds every tensor except those in `overrides`, which use the given
    /// handles instead.
    pub fn bind_with(&self, tape: &mut Tape<E>, trainable: bool, overrides: &[(&str, Var)]) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| {
                    let var = match overrides.iter().find(|(name, _)| name == k) {
                        Some(&(_, var)) => var,
                        None => tape.leaf(v.clone(), trainable),
                    };
                    (k.clone(), var)
                })
                .collect(),
        }
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| StmError::invalid(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// `conv2d` with the `{prefix}/w`, `{prefix}/b` pair.
    pub fn conv<E: Element>(&self, tape: &mut Tape<E>, prefix: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.var(&format!("{prefix}/w"))?;
        let b = self.var(&format!("{prefix}/b"))?;
        let k = tape.value(w).shape()[2];
        tape.conv2d(x, w, Some(b), stride, k / 2)
    }

    pub fn residual<E: Element>(&self, tape: &mut Tape<E>, prefix: &str, x: Var) -> Result<Var> {
        let w1 = self.var(&format!("{prefix}/w1"))?;
        let b1 = self.var(&format!("{prefix}/b1"))?;
        let w2 = self.var(&format!("{prefix}/w2"))?;
        let b2 = self.var(&format!("{prefix}/b2"))?;
        tape.residual_block(x, w1, b1, w2, b2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Gain {
    /// Output feeds a ReLU.
    Relu,
    Linear,
}

struct Initializer<'a> {
    rng: ChaCha8Rng,
    params: &'a mut ParamSet<f32>,
}

impl Initializer<'_> {
    fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize, gain: Gain) {
        let fan_in = (c_in * k * k) as f64;
        let bound = match gain {
            Gain::Relu => (6.0 / fan_in).sqrt(),
            Gain::Linear => (3.0 / fan_in).sqrt(),
        };
        let rng = &mut self.rng;
        let w = Tensor::from_fn(&[c_out, c_in, k, k], |_| rng.random_range(-bound..bound) as f32)
            .expect("positive extents");
        self.params.insert(format!("{prefix}/w"), w);
        self.params
            .insert(format!("{prefix}/b"), Tensor::zeros(&[c_out]).expect("positive extents"));
    }

    fn residual(&mut self, prefix: &str, c: usize) {
        let scratch = format!("{prefix}/tmp");
        self.conv(&scratch, c, c, 3, Gain::Relu);
        let w1 = self.params.tensors.shift_remove(&format!("{scratch}/w")).unwrap();
        let b1 = self.params.tensors.shift_remove(&format!("{scratch}/b")).unwrap();
        self.conv(&scratch, c, c, 3, Gain::Linear);
        let w2 = self.params.tensors.shift_remove(&format!("{scratch}/w")).unwrap();
        let b2 = self.params.tensors.shift_remove(&format!("{scratch}/b")).unwrap();
        self.params.insert(format!("{prefix}/w1"), w1);
        self.params.insert(format!("{prefix}/b1"), b1);
        self.params.insert(format!("{prefix}/w2"), w2);
        self.params.insert(format!("{prefix}/b2"), b2);
    }

    fn encoder(&mut self, prefix: &str, in_channels: usize, config: &ModelConfig) {
        let mut c_in = in_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            self.conv(&format!("{prefix}/stage{}/down", i + 1), c_in, w, 3, Gain::Relu);
            self.residual(&format!("{prefix}/stage{}/res", i + 1), w);
            c_in = w;
        }
        self.conv(&format!("{prefix}/key"), c_in, config.key_channels(), 3, Gain::Linear);
        self.conv(&format!("{prefix}/value"), c_in, config.value_channels(), 3, Gain::Linear);
    }

    fn decoder(&mut self, config: &ModelConfig) {
        let d = config.decoder_width;
        self.conv("dec/compress", config.base_width(), d, 3, Gain::Relu);
        self.residual("dec/compress_res", d);
        self.conv("dec/refine8/skip", config.widths[2], d, 3, Gain::Linear);
        self.residual("dec/refine8/res", d);
        self.conv("dec/refine4/skip", config.widths[1], d, 3, Gain::Linear);
        self.residual("dec/refine4/res", d);
        self.conv("dec/pred", d, 2, 3, Gain::Linear);
    }
}

/// Number of input channels of the query and memory encoders.
pub const QUERY_CHANNELS: usize = 3;
pub const MEMORY_CHANNELS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct StmModel<E = f32> {
    pub config: ModelConfig,
    pub params: ParamSet<E>,
}

impl StmModel<f32> {
    /// Uniform fan-in scaled initialization from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let mut init = Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: &mut params,
        };
        init.encoder("enc_q", QUERY_CHANNELS, &config);
        init.encoder("enc_m", MEMORY_CHANNELS, &config);
        init.decoder(&config);
        Ok(StmModel { config, params })
    }

    /// Zeroes the final 2-channel prediction layer, making the initial
    /// output exactly uniform.
    pub fn zero_prediction_head(&mut self) {
        for name in ["dec/pred/w", "dec/pred/b"] {
            let t = self.params.get_mut(name).expect("prediction head exists");
            t.data_mut().fill(0.0);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, self.params.iter())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = read_checkpoint(path)?;
        let mut params = ParamSet::default();
        for (name, t) in tensors {
            if name.starts_with("enc_q/") || name.starts_with("enc_m/") || name.starts_with("dec/") {
                params.insert(name, t);
            }
        }
        Self::from_params(params).map_err(|e| StmError::format(path, e.to_string()))
    }
}

impl<E: Element> StmModel<E> {
    /// Rebuilds a model from parameters, inferring the channel layout and
    /// checking every expected tensor is present with the right shape.
    pub fn from_params(params: ParamSet<E>) -> Result<Self> {
        let width = |stage: usize| -> Result<usize> {
            params
                .get(&format!("enc_q/stage{stage}/down/w"))
                .map(|t| t.shape()[0])
                .ok_or_else(|| StmError::invalid(format!("missing enc_q/stage{stage}/down/w")))
        };
        let decoder_width = params
            .get("dec/compress/w")
            .map(|t| t.shape()[0])
            .ok_or_else(|| StmError::invalid("missing dec/compress/w"))?;
        let config = ModelConfig {
            widths: [width(1)?, width(2)?, width(3)?, width(4)?],
            decoder_width,
        };
        let reference = StmModel::init(config, 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(StmError::dim(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(StmError::invalid(format!("missing parameter {name}"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(StmError::invalid("unexpected extra parameters"));
        }
        // Keep the canonical ordering.
        let mut ordered = ParamSet::default();
        for name in reference.params.names() {
            ordered.insert(name, params.get(name).unwrap().clone());
        }
        Ok(StmModel {
            config,
            params: ordered,
        })
    }

    pub fn cast<F: Element>(&self) -> StmModel<F> {
        StmModel {
            config: self.config,
            params: self.params.cast(),
        }
    }

    pub fn to_f32(&self) -> StmModel<f32> {
        self.cast()
    }

    pub fn bind(&self, tape: &mut Tape<E>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_ratios_follow_base_width() {
        let c = ModelConfig::default();
        assert_eq!(c.key_channels() * 8, c.base_width());
        assert_eq!(c.value_channels() * 2, c.base_width());
        let p = ModelConfig::full_size_preset();
        assert_eq!((p.key_channels(), p.value_channels()), (128, 512));
        let bad = ModelConfig {
            widths: [16, 32, 48, 60],
            decoder_width: 8,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_checkpoint_round_trips() {
        let a = StmModel::init(ModelConfig::default(), 1).unwrap();
        let b = StmModel::init(ModelConfig::default(), 1).unwrap();
        let c = StmModel::init(ModelConfig::default(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stmw");
        a.save(&path).unwrap();
        assert_eq!(StmModel::load(&path).unwrap(), a);
    }

    #[test]
    fn memory_encoder_takes_four_channels() {
        let m = StmModel::init(ModelConfig::default(), 0).unwrap();
        assert_eq!(m.params.get("enc_q/stage1/down/w").unwrap().shape(), &[16, 3, 3, 3]);
        assert_eq!(m.params.get("enc_m/stage1/down/w").unwrap().shape(), &[16, 4, 3, 3]);
        assert_eq!(m.params.get("dec/pred/w").unwrap().shape(), &[2, 64, 3, 3]);
        assert!(m.params.names().all(|n| n.starts_with("enc_q/") || n.starts_with("enc_m/") || n.starts_with("dec/")));
    }

    #[test]
    fn from_params_rejects_shape_mismatch() {
        let m = StmModel::init(ModelConfig::default(), 0).unwrap();
        let mut p = m.params.clone();
        *p.get_mut("dec/pred/b").unwrap() = Tensor::zeros(&[3]).unwrap();
        assert!(StmModel::from_params(p).is_err());
    }
}
