//! Model checkpoints, layer tapes, and the forward/backward entry points.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{mlp, transformer};
use crate::error::{CoreError, Result};
use crate::linalg::Mat;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Embedding,
    Linear,
    AttentionProjection,
}

/// One weight matrix of the model; `weight` is R×C acting as `y = W a`.
#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub weight: Mat,
    pub prunable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Single linear map trained with squared error.
    Linear,
    /// Byte-level MLP language model: embedding, tanh hidden stack, unembed.
    CharMlp,
    /// One pre-layernorm transformer block with a single attention head.
    CharTransformer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub arch: Architecture,
    pub vocab_size: usize,
    pub hidden_dims: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub layers: Vec<Layer>,
    pub meta: ModelMeta,
}

impl ModelCheckpoint {
    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub fn prunable_layers(&self) -> impl Iterator<Item = &Layer> {
        self.layers.iter().filter(|l| l.prunable)
    }

    pub fn prunable_weight_count(&self) -> usize {
        self.prunable_layers().map(|l| l.weight.len()).sum()
    }

    pub fn live_weight_count(&self) -> usize {
        self.prunable_layers()
            .map(|l| l.weight.iter().filter(|w| **w != 0.0).count())
            .sum()
    }

    pub fn assert_finite(&self) -> Result<()> {
        for layer in &self.layers {
            if layer.weight.iter().any(|w| !w.is_finite()) {
                return Err(CoreError::numeric(format!(
                    "layer `{}` contains non-finite weights",
                    layer.name
                )));
            }
        }
        Ok(())
    }
}

/// Per-layer capture of inputs and output gradients over N samples.
///
/// `out_grads` holds per-sample gradients of the summed (not averaged)
/// loss, so the mean weight gradient reconstructs as
/// `(1/N) * out_gradsᵀ · activations`.
#[derive(Debug, Clone)]
pub struct LayerTape {
    pub layer_name: String,
    /// N×C inputs to the layer.
    pub activations: Mat,
    /// N×R gradients at the layer output.
    pub out_grads: Mat,
    pub sample_count: usize,
}

impl LayerTape {
    pub fn assert_finite(&self) -> Result<()> {
        if self
            .activations
            .iter()
            .chain(self.out_grads.iter())
            .any(|v| !v.is_finite())
        {
            return Err(CoreError::numeric(format!(
                "tape for `{}` contains non-finite values",
                self.layer_name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Batch {
    /// Next-token prediction with cross-entropy loss.
    Tokens {
        inputs: Array2<u32>,
        targets: Array2<u32>,
    },
    /// Row-per-sample regression with squared-error loss.
    Regression { features: Mat, targets: Mat },
}

impl Batch {
    pub fn sample_count(&self) -> usize {
        match self {
            Batch::Tokens { inputs, .. } => inputs.len(),
            Batch::Regression { features, .. } => features.nrows(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum ModelConfig {
    Linear {
        in_dim: usize,
        out_dim: usize,
    },
    Mlp {
        vocab_size: usize,
        hidden: Vec<usize>,
    },
    Transformer {
        vocab_size: usize,
        d_model: usize,
        ff_dim: usize,
    },
}

/// Everything a single pass produces: mean loss, per-layer tapes, and the
/// per-layer mean weight gradients.
#[derive(Debug)]
pub struct ForwardBackward {
    pub loss: f64,
    pub tapes: Vec<LayerTape>,
    pub weight_grads: Vec<(String, Mat)>,
}

fn uniform_init(rows: usize, cols: usize, rng: &mut Rng) -> Mat {
    let bound = (1.0 / cols as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.uniform_in(-bound, bound))
}

/// Builds a model deterministically from a config and seed.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelCheckpoint> {
    let mut layers = Vec::new();
    let meta;
    match config {
        ModelConfig::Linear { in_dim, out_dim } => {
            if *in_dim == 0 || *out_dim == 0 {
                return Err(CoreError::config("linear dims must be positive"));
            }
            let mut rng = Rng::seed_stream(seed, &[0]);
            layers.push(Layer {
                name: "linear".into(),
                kind: LayerKind::Linear,
                weight: uniform_init(*out_dim, *in_dim, &mut rng),
                prunable: true,
            });
            meta = ModelMeta {
                arch: Architecture::Linear,
                vocab_size: 0,
                hidden_dims: vec![*in_dim, *out_dim],
                seed,
            };
        }
        ModelConfig::Mlp { vocab_size, hidden } => {
            if *vocab_size < 2 {
                return Err(CoreError::config("vocab_size must be at least 2"));
            }
            if hidden.is_empty() || hidden.contains(&0) {
                return Err(CoreError::config(
                    "hidden dims must be positive and non-empty",
                ));
            }
            let embed_dim = hidden[0];
            let mut idx = 0u64;
            let mut stream = |r: usize, c: usize| {
                let mut rng = Rng::seed_stream(seed, &[idx]);
                idx += 1;
                uniform_init(r, c, &mut rng)
            };
            layers.push(Layer {
                name: "embed".into(),
                kind: LayerKind::Embedding,
                weight: stream(embed_dim, *vocab_size),
                prunable: true,
            });
            let mut prev = embed_dim;
            for (i, &d) in hidden.iter().enumerate() {
                layers.push(Layer {
                    name: format!("mlp.{i}"),
                    kind: LayerKind::Linear,
                    weight: stream(d, prev),
                    prunable: true,
                });
                prev = d;
            }
            layers.push(Layer {
                name: "out".into(),
                kind: LayerKind::Linear,
                weight: stream(*vocab_size, prev),
                prunable: true,
            });
            meta = ModelMeta {
                arch: Architecture::CharMlp,
                vocab_size: *vocab_size,
                hidden_dims: hidden.clone(),
                seed,
            };
        }
        ModelConfig::Transformer {
            vocab_size,
            d_model,
            ff_dim,
        } => {
            if *vocab_size < 2 {
                return Err(CoreError::config("vocab_size must be at least 2"));
            }
            if *d_model == 0 || *ff_dim == 0 {
                return Err(CoreError::config("transformer dims must be positive"));
            }
            let d = *d_model;
            let mut idx = 0u64;
            let mut stream = |r: usize, c: usize| {
                let mut rng = Rng::seed_stream(seed, &[idx]);
                idx += 1;
                uniform_init(r, c, &mut rng)
            };
            layers.push(Layer {
                name: "embed".into(),
                kind: LayerKind::Embedding,
                weight: stream(d, *vocab_size),
                prunable: true,
            });
            for name in ["attn.q", "attn.k", "attn.v", "attn.o"] {
                layers.push(Layer {
                    name: name.into(),
                    kind: LayerKind::AttentionProjection,
                    weight: stream(d, d),
                    prunable: true,
                });
            }
            layers.push(Layer {
                name: "ffn.up".into(),
                kind: LayerKind::Linear,
                weight: stream(*ff_dim, d),
                prunable: true,
            });
            layers.push(Layer {
                name: "ffn.down".into(),
                kind: LayerKind::Linear,
                weight: stream(d, *ff_dim),
                prunable: true,
            });
            layers.push(Layer {
                name: "unembed".into(),
                kind: LayerKind::Linear,
                weight: stream(*vocab_size, d),
                prunable: true,
            });
            meta = ModelMeta {
                arch: Architecture::CharTransformer,
                vocab_size: *vocab_size,
                hidden_dims: vec![d, *ff_dim],
                seed,
            };
        }
    }
    Ok(ModelCheckpoint { layers, meta })
}

/// Runs the exact forward and backward pass, capturing tapes for every
/// prunable layer. The loss is the mean per-sample loss.
pub fn forward_backward(model: &ModelCheckpoint, batch: &Batch) -> Result<ForwardBackward> {
    match (model.meta.arch, batch) {
        (Architecture::Linear, Batch::Regression { features, targets }) => {
            mlp::linear_regression_pass(model, features, targets)
        }
        (Architecture::CharMlp, Batch::Tokens { inputs, targets }) => {
            mlp::mlp_pass(model, inputs, targets)
        }
        (Architecture::CharTransformer, Batch::Tokens { inputs, targets }) => {
            transformer::block_pass(model, inputs, targets)
        }
        _ => Err(CoreError::shape(
            "batch kind does not match model architecture",
        )),
    }
}

/// Mean loss over a set of batches, forward only.
pub fn evaluate_loss(model: &ModelCheckpoint, batches: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    let mut samples = 0usize;
    for batch in batches {
        let (loss, n) = match (model.meta.arch, batch) {
            (Architecture::Linear, Batch::Regression { features, targets }) => {
                mlp::linear_regression_loss(model, features, targets)?
            }
            (Architecture::CharMlp, Batch::Tokens { inputs, targets }) => {
                mlp::mlp_loss(model, inputs, targets)?
            }
            (Architecture::CharTransformer, Batch::Tokens { inputs, targets }) => {
                transformer::block_loss(model, inputs, targets)?
            }
            _ => {
                return Err(CoreError::shape(
                    "batch kind does not match model architecture",
                ))
            }
        };
        total += loss * n as f64;
        samples += n;
    }
    if samples == 0 {
        return Err(CoreError::Ingest("no samples to evaluate".into()));
    }
    Ok(total / samples as f64)
}

pub(super) fn check_tokens(model: &ModelCheckpoint, tokens: &Array2<u32>) -> Result<()> {
    let vocab = model.meta.vocab_size as u32;
    if tokens.iter().any(|&t| t >= vocab) {
        return Err(CoreError::shape(format!(
            "token id out of range for vocab {}",
            model.meta.vocab_size
        )));
    }
    Ok(())
}
