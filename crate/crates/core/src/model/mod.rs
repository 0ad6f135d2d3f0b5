//! Tiny byte-level decoder-only transformer.
//!
//! Pre-norm GPT layout: token + learned positional embeddings, `n_layers`
//! blocks of causal multi-head attention and a 4x GELU MLP, final layer
//! norm and an untied output head. Training-side evaluation runs on a
//! [`Tape`](crate::numcore::Tape); sampling uses a KV-cached decoder that
//! performs the same arithmetic without recording.

mod checkpoint;
mod decode;
mod forward;
pub mod tokenizer;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numcore::Tensor;
use crate::seed;
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use decode::{sample, sample_token, Decoder};
pub use forward::{forward_logits, forward_logits_batch, forward_logits_value, sequence_logprobs, ParamHandles};
pub use tokenizer::Token;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Contract(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Contract("max_seq_len must be at least 2".into()));
        }
        if self.vocab_size < 5 {
            return Err(Error::Contract("vocab_size must be at least 5".into()));
        }
        if self.n_layers == 0 {
            return Err(Error::Contract("n_layers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// Every parameter name with its shape, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff());
        let mut shapes = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            shapes.push((p("ln1.scale"), vec![d]));
            shapes.push((p("ln1.offset"), vec![d]));
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                shapes.push((p(w), vec![d, d]));
            }
            shapes.push((p("ln2.scale"), vec![d]));
            shapes.push((p("ln2.offset"), vec![d]));
            shapes.push((p("mlp.w1"), vec![d, f]));
            shapes.push((p("mlp.b1"), vec![f]));
            shapes.push((p("mlp.w2"), vec![f, d]));
            shapes.push((p("mlp.b2"), vec![d]));
        }
        shapes.push(("ln_f.scale".to_string(), vec![d]));
        shapes.push(("ln_f.offset".to_string(), vec![d]));
        shapes.push(("head".to_string(), vec![d, v]));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// The four desk-scale sizes used for the size sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelSize {
    XS,
    S,
    M,
    L,
}

impl ModelSize {
    pub const ALL: [ModelSize; 4] = [ModelSize::XS, ModelSize::S, ModelSize::M, ModelSize::L];

    pub fn config(self) -> ModelConfig {
        let (d_model, n_layers, n_heads) = match self {
            ModelSize::XS => (32, 1, 2),
            ModelSize::S => (64, 2, 4),
            ModelSize::M => (128, 2, 4),
            ModelSize::L => (128, 4, 8),
        };
        ModelConfig {
            vocab_size: tokenizer::VOCAB_SIZE,
            d_model,
            n_layers,
            n_heads,
            max_seq_len: 512,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelSize::XS => "XS",
            ModelSize::S => "S",
            ModelSize::M => "M",
            ModelSize::L => "L",
        }
    }
}

impl fmt::Display for ModelSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ModelSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "XS" => Ok(ModelSize::XS),
            "S" => Ok(ModelSize::S),
            "M" => Ok(ModelSize::M),
            "L" => Ok(ModelSize::L),
            _ => Err(Error::Contract(format!("unknown model size {s:?}"))),
        }
    }
}

/// Named weight tensors for one model instance (student or teacher).
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl Parameters {
    /// Builds a parameter set, checking every name and shape against `config`.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &shapes {
            match tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Shape(format!(
                        "{name}: expected {shape:?}, got {:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Shape(format!("missing tensor {name}"))),
            }
        }
        Ok(Parameters { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Same key set and shapes.
    pub fn check_compatible(&self, other: &Parameters) -> Result<()> {
        if self.config != other.config {
            return Err(Error::Contract("parameter sets have different model configs".into()));
        }
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                Some(o) if o.shape() == t.shape() => {}
                _ => return Err(Error::Shape(format!("parameter {name} missing or mis-shaped"))),
            }
        }
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Shape("parameter key sets differ".into()));
        }
        Ok(())
    }

    /// L2 distance over all tensors.
    pub fn distance(&self, other: &Parameters) -> Result<f64> {
        self.check_compatible(other)?;
        let mut sq = 0.0;
        for (name, t) in &self.tensors {
            let o = &other.tensors[name];
            for (a, b) in t.data().iter().zip(o.data()) {
                sq += (a - b) * (a - b);
            }
        }
        Ok(sq.sqrt())
    }
}

/// Normal(0, 0.02) for embeddings, projections and the head; ones for
/// layer-norm scales; zeros for offsets and biases.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<Parameters> {
    config.validate()?;
    let mut rng = seed::derived_rng(seed, "init", &[]);
    let normal = Normal::new(0.0, INIT_STD).map_err(|e| Error::Contract(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for (name, shape) in config.param_shapes() {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if name.ends_with(".scale") {
            vec![1.0; n]
        } else if name.ends_with(".offset") || name.contains(".b1") || name.contains(".b2") {
            vec![0.0; n]
        } else {
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    Parameters::from_tensors(*config, tensors)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub n_samples: usize,
}

impl DecodingParams {
    /// Training rollouts: temperature 1.0, top-p 1.0.
    pub fn train(max_new_tokens: usize, n_samples: usize) -> Self {
        DecodingParams {
            temperature: 1.0,
            top_p: 1.0,
            max_new_tokens,
            n_samples,
        }
    }

    /// Validation: temperature 0.6, top-p 0.95, 4 samples.
    pub fn validation(max_new_tokens: usize) -> Self {
        DecodingParams {
            temperature: 0.6,
            top_p: 0.95,
            max_new_tokens,
            n_samples: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(Error::Contract(format!("temperature {} must be >= 0", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Contract(format!("top_p {} must lie in (0, 1]", self.top_p)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelSize::XS.config();
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = init_params(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn layer_norm_scales_start_at_one() {
        let p = init_params(&ModelSize::S.config(), 1).unwrap();
        let mut seen = 0;
        for (name, t) in p.iter() {
            if name.ends_with(".scale") {
                assert!(t.data().iter().all(|v| *v == 1.0), "{name}");
                seen += 1;
            }
            if name.ends_with(".offset") {
                assert!(t.data().iter().all(|v| *v == 0.0), "{name}");
            }
        }
        assert_eq!(seen, 2 * 2 + 1);
    }

    #[test]
    fn init_std_is_close_to_target() {
        let p = init_params(&ModelSize::S.config(), 3).unwrap();
        let w = p.get("head").unwrap().data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 2e-3);
        assert!((var.sqrt() - INIT_STD).abs() < 1e-3);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelSize::XS.config();
        cfg.n_heads = 3;
        assert!(init_params(&cfg, 0).is_err());
        let mut cfg = ModelSize::XS.config();
        cfg.max_seq_len = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelSize::XS.config();
        cfg.vocab_size = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sizes_strictly_increase_in_parameter_count() {
        let counts: Vec<usize> = ModelSize::ALL.iter().map(|s| s.config().param_count()).collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
    }

    #[test]
    fn decoding_params_validate() {
        assert!(DecodingParams::train(8, 4).validate().is_ok());
        let mut d = DecodingParams::validation(8);
        d.top_p = 0.0;
        assert!(d.validate().is_err());
        d.top_p = 1.2;
        assert!(d.validate().is_err());
        d.top_p = 0.5;
        d.temperature = -1.0;
        assert!(d.validate().is_err());
    }
}
