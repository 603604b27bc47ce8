//! Toy decoder-only transformer: configuration, parameters, forward passes,
//! greedy generation, Adam training, and checkpoint persistence.

pub mod checkpoint;
pub mod forward;
pub mod tokenizer;
pub mod train;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::NumericsError;

/// Architecture hyperparameters. `seed` drives parameter initialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size: tokenizer::VOCAB_SIZE,
            max_seq_len: 256,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers == 0
            || self.n_heads == 0
            || self.d_model == 0
            || self.d_ff == 0
            || self.vocab_size == 0
            || self.max_seq_len == 0
        {
            return Err(ModelError::InvalidConfig("all dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Model-side errors.
#[derive(Debug)]
pub enum ModelError {
    InvalidConfig(String),
    SequenceTooLong { len: usize, max: usize },
    TrainingDiverged { epoch: usize, step: usize, loss: f64 },
    NonFinite(String),
    Numerics(NumericsError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::InvalidConfig(msg) => write!(f, "invalid model config: {msg}"),
            ModelError::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds max_seq_len {max}")
            }
            ModelError::TrainingDiverged { epoch, step, loss } => {
                write!(f, "training diverged at epoch {epoch}, step {step} (loss {loss})")
            }
            ModelError::NonFinite(what) => write!(f, "non-finite values in {what}"),
            ModelError::Numerics(e) => write!(f, "numerics error: {e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<NumericsError> for ModelError {
    fn from(e: NumericsError) -> Self {
        ModelError::Numerics(e)
    }
}

/// Weights of one transformer block (pre-norm, GELU feed-forward).
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w_ff1: Vec<f64>,
    pub b_ff1: Vec<f64>,
    pub w_ff2: Vec<f64>,
    pub b_ff2: Vec<f64>,
}

/// All model weights plus the config they were built for. Untied output
/// projection: the unembedding matrix is independent of the token table.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub token_embedding: Vec<f64>,
    pub pos_embedding: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Vec<f64>,
    pub lnf_bias: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

/// Reference to one named weight tensor. The ordering of
/// [`ModelParams::named_tensors`] is the canonical tensor order used by
/// checkpointing and training.
pub struct NamedTensor<'p> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'p [f64],
}

pub struct NamedTensorMut<'p> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'p mut Vec<f64>,
}

/// Draw weights from N(0, 0.02^2) for embeddings and projections, unit
/// gains, zero biases. Deterministic in `config.seed`.
pub fn init_params(config: &ModelConfig) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 0.02).expect("valid stddev");
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(&mut rng)).collect() };

    let d = config.d_model;
    let layers = (0..config.n_layers)
        .map(|_| LayerParams {
            ln1_gain: vec![1.0; d],
            ln1_bias: vec![0.0; d],
            wq: draw(d * d),
            bq: vec![0.0; d],
            wk: draw(d * d),
            bk: vec![0.0; d],
            wv: draw(d * d),
            bv: vec![0.0; d],
            wo: draw(d * d),
            bo: vec![0.0; d],
            ln2_gain: vec![1.0; d],
            ln2_bias: vec![0.0; d],
            w_ff1: draw(d * config.d_ff),
            b_ff1: vec![0.0; config.d_ff],
            w_ff2: draw(config.d_ff * d),
            b_ff2: vec![0.0; d],
        })
        .collect();

    Ok(ModelParams {
        token_embedding: draw(config.vocab_size * d),
        pos_embedding: draw(config.max_seq_len * d),
        layers,
        lnf_gain: vec![1.0; d],
        lnf_bias: vec![0.0; d],
        w_out: draw(d * config.vocab_size),
        b_out: vec![0.0; config.vocab_size],
        config: config.clone(),
    })
}

macro_rules! layer_tensor_list {
    ($out:ident, $i:ident, $l:ident, $d:ident, $dff:expr, $ctor:ident, $($ref_kind:tt)+) => {{
        $out.push($ctor {
            name: format!("layers.{}.ln1_gain", $i),
            shape: vec![$d],
            data: $ref_kind $l.ln1_gain,
        });
        $out.push($ctor {
            name: format!("layers.{}.ln1_bias", $i),
            shape: vec![$d],
            data: $ref_kind $l.ln1_bias,
        });
        $out.push($ctor {
            name: format!("layers.{}.wq", $i),
            shape: vec![$d, $d],
            data: $ref_kind $l.wq,
        });
        $out.push($ctor {
            name: format!("layers.{}.bq", $i),
            shape: vec![$d],
            data: $ref_kind $l.bq,
        });
        $out.push($ctor {
            name: format!("layers.{}.wk", $i),
            shape: vec![$d, $d],
            data: $ref_kind $l.wk,
        });
        $out.push($ctor {
            name: format!("layers.{}.bk", $i),
            shape: vec![$d],
            data: $ref_kind $l.bk,
        });
        $out.push($ctor {
            name: format!("layers.{}.wv", $i),
            shape: vec![$d, $d],
            data: $ref_kind $l.wv,
        });
        $out.push($ctor {
            name: format!("layers.{}.bv", $i),
            shape: vec![$d],
            data: $ref_kind $l.bv,
        });
        $out.push($ctor {
            name: format!("layers.{}.wo", $i),
            shape: vec![$d, $d],
            data: $ref_kind $l.wo,
        });
        $out.push($ctor {
            name: format!("layers.{}.bo", $i),
            shape: vec![$d],
            data: $ref_kind $l.bo,
        });
        $out.push($ctor {
            name: format!("layers.{}.ln2_gain", $i),
            shape: vec![$d],
            data: $ref_kind $l.ln2_gain,
        });
        $out.push($ctor {
            name: format!("layers.{}.ln2_bias", $i),
            shape: vec![$d],
            data: $ref_kind $l.ln2_bias,
        });
        $out.push($ctor {
            name: format!("layers.{}.w_ff1", $i),
            shape: vec![$d, $dff],
            data: $ref_kind $l.w_ff1,
        });
        $out.push($ctor {
            name: format!("layers.{}.b_ff1", $i),
            shape: vec![$dff],
            data: $ref_kind $l.b_ff1,
        });
        $out.push($ctor {
            name: format!("layers.{}.w_ff2", $i),
            shape: vec![$dff, $d],
            data: $ref_kind $l.w_ff2,
        });
        $out.push($ctor {
            name: format!("layers.{}.b_ff2", $i),
            shape: vec![$d],
            data: $ref_kind $l.b_ff2,
        });
    }};
}

impl ModelParams {
    /// Canonical (name, shape, data) listing of every weight tensor.
    pub fn named_tensors(&self) -> Vec<NamedTensor<'_>> {
        let c = &self.config;
        let d = c.d_model;
        let dff = c.d_ff;
        let mut out: Vec<NamedTensor<'_>> = vec![
            NamedTensor {
                name: "token_embedding".into(),
                shape: vec![c.vocab_size, d],
                data: &self.token_embedding,
            },
            NamedTensor {
                name: "pos_embedding".into(),
                shape: vec![c.max_seq_len, d],
                data: &self.pos_embedding,
            },
        ];
        for (i, l) in self.layers.iter().enumerate() {
            layer_tensor_list!(out, i, l, d, dff, NamedTensor, &);
        }
        out.push(NamedTensor { name: "lnf_gain".into(), shape: vec![d], data: &self.lnf_gain });
        out.push(NamedTensor { name: "lnf_bias".into(), shape: vec![d], data: &self.lnf_bias });
        out.push(NamedTensor {
            name: "w_out".into(),
            shape: vec![d, c.vocab_size],
            data: &self.w_out,
        });
        out.push(NamedTensor { name: "b_out".into(), shape: vec![c.vocab_size], data: &self.b_out });
        out
    }

    /// Mutable variant of [`named_tensors`](Self::named_tensors), same order.
    pub fn named_tensors_mut(&mut self) -> Vec<NamedTensorMut<'_>> {
        let c = self.config.clone();
        let d = c.d_model;
        let dff = c.d_ff;
        let mut out: Vec<NamedTensorMut<'_>> = vec![
            NamedTensorMut {
                name: "token_embedding".into(),
                shape: vec![c.vocab_size, d],
                data: &mut self.token_embedding,
            },
            NamedTensorMut {
                name: "pos_embedding".into(),
                shape: vec![c.max_seq_len, d],
                data: &mut self.pos_embedding,
            },
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            layer_tensor_list!(out, i, l, d, dff, NamedTensorMut, &mut);
        }
        out.push(NamedTensorMut {
            name: "lnf_gain".into(),
            shape: vec![d],
            data: &mut self.lnf_gain,
        });
        out.push(NamedTensorMut {
            name: "lnf_bias".into(),
            shape: vec![d],
            data: &mut self.lnf_bias,
        });
        out.push(NamedTensorMut {
            name: "w_out".into(),
            shape: vec![d, c.vocab_size],
            data: &mut self.w_out,
        });
        out.push(NamedTensorMut {
            name: "b_out".into(),
            shape: vec![c.vocab_size],
            data: &mut self.b_out,
        });
        out
    }

    /// Error if any weight is NaN or infinite.
    pub fn check_finite(&self) -> Result<(), ModelError> {
        for t in self.named_tensors() {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(t.name));
            }
        }
        Ok(())
    }

    /// Token-table row plus positional row for each id: the model input for
    /// a pure-token sequence.
    pub fn embed_ids(&self, ids: &[u32]) -> Result<Vec<f64>, ModelError> {
        let d = self.config.d_model;
        if ids.len() > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        let mut out = vec![0.0; ids.len() * d];
        for (t, &id) in ids.iter().enumerate() {
            let id = id as usize;
            assert!(id < self.config.vocab_size, "token id {id} out of range");
            for c in 0..d {
                out[t * d + c] = self.token_embedding[id * d + c] + self.pos_embedding[t * d + c];
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            max_seq_len: 16,
            ..Default::default()
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = small_cfg();
        let a = init_params(&cfg).unwrap();
        let b = init_params(&cfg).unwrap();
        assert_eq!(a.token_embedding, b.token_embedding);
        assert_eq!(a.layers[1].w_ff2, b.layers[1].w_ff2);

        let cfg2 = ModelConfig { seed: 43, ..cfg };
        let c = init_params(&cfg2).unwrap();
        assert_ne!(a.token_embedding, c.token_embedding);
    }

    #[test]
    fn init_statistics_match_declared_distribution() {
        let cfg = ModelConfig::default();
        let p = init_params(&cfg).unwrap();
        let n = p.token_embedding.len() as f64;
        let mean = p.token_embedding.iter().sum::<f64>() / n;
        // sample mean of N(0, 0.02^2) stays within 3 sigma / sqrt(n)
        assert!(mean.abs() < 3.0 * 0.02 / n.sqrt(), "mean {mean}");
        assert!(p.layers[0].ln1_gain.iter().all(|&v| v == 1.0));
        assert!(p.b_out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = ModelConfig { d_model: 10, n_heads: 4, ..Default::default() };
        assert!(matches!(init_params(&cfg), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn named_tensor_listing_is_consistent() {
        let cfg = small_cfg();
        let mut p = init_params(&cfg).unwrap();
        let names: Vec<String> = p.named_tensors().iter().map(|t| t.name.clone()).collect();
        assert_eq!(names.len(), 2 + cfg.n_layers * 16 + 4);
        assert_eq!(names[0], "token_embedding");
        assert_eq!(names[2], "layers.0.ln1_gain");
        assert_eq!(names.last().unwrap(), "b_out");

        let shapes: Vec<(String, usize, usize)> = p
            .named_tensors()
            .iter()
            .map(|t| (t.name.clone(), t.shape.iter().product::<usize>(), t.data.len()))
            .collect();
        for (name, numel, len) in &shapes {
            assert_eq!(numel, len, "{name}");
        }
        let mut_names: Vec<String> =
            p.named_tensors_mut().iter().map(|t| t.name.clone()).collect();
        assert_eq!(names, mut_names);
    }

    #[test]
    fn finiteness_check_catches_nan() {
        let cfg = small_cfg();
        let mut p = init_params(&cfg).unwrap();
        assert!(p.check_finite().is_ok());
        p.layers[0].wq[3] = f64::NAN;
        assert!(matches!(p.check_finite(), Err(ModelError::NonFinite(_))));
    }

    #[test]
    fn embed_ids_respects_length_bound() {
        let cfg = small_cfg();
        let p = init_params(&cfg).unwrap();
        let ids = vec![0u32; cfg.max_seq_len + 1];
        assert!(matches!(p.embed_ids(&ids), Err(ModelError::SequenceTooLong { .. })));
        let ok = p.embed_ids(&[65, 66]).unwrap();
        assert_eq!(ok.len(), 2 * cfg.d_model);
        assert_eq!(ok[0], p.token_embedding[65 * cfg.d_model] + p.pos_embedding[0]);
    }
}
