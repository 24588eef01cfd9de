//! Small configurable transformer with exact manual gradients.
//!
//! Pre-norm residual blocks with learned positional embeddings. Attention
//! heads have independent `W_Q/W_K/W_V/W_O` projections so that each head is
//! addressable as a parameter component (`layer0.head3`). The binary
//! classifier head mean-pools the final residual stream before a linear map
//! to two logits.

mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::SequenceOutput;
pub use params::{Component, ParamVector, Segment};

use serde::{Deserialize, Serialize};

use crate::{Error, Precision, Result, Scalar};
use params::Layout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskHead {
    NextToken,
    BinaryClassifier,
}

fn default_true() -> bool {
    true
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    /// Hidden width of the MLP blocks; unused when `attention_only`.
    #[serde(default)]
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub attention_only: bool,
    pub task_head: TaskHead,
    #[serde(default)]
    pub numeric_precision: Precision,
    #[serde(default = "default_true")]
    pub layer_norm: bool,
    /// Causal attention mask. Next-token models must be causal.
    #[serde(default = "default_true")]
    pub causal: bool,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl ModelConfig {
    /// Two-layer attention-only next-token model used for the induction experiments.
    pub fn toy_lm(vocab_size: usize, max_seq_len: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            d_head: 8,
            d_mlp: 0,
            vocab_size,
            max_seq_len,
            attention_only: true,
            task_head: TaskHead::NextToken,
            numeric_precision: Precision::F32,
            layer_norm: true,
            causal: true,
            init_std: 0.02,
        }
    }

    /// Bracket classifier over the two-token alphabet, sequences up to 40 tokens.
    pub fn bracket_classifier(n_layers: usize) -> Self {
        ModelConfig {
            n_layers,
            n_heads: 4,
            d_model: 16,
            d_head: 4,
            d_mlp: 32,
            vocab_size: 2,
            max_seq_len: 40,
            attention_only: false,
            task_head: TaskHead::BinaryClassifier,
            numeric_precision: Precision::F32,
            layer_norm: true,
            causal: false,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.n_layers == 0 || self.n_layers > 4 {
            return bad("n_layers must be between 1 and 4");
        }
        if self.n_heads == 0 {
            return bad("n_heads must be positive");
        }
        if self.d_model == 0 || self.d_head == 0 {
            return bad("d_model and d_head must be positive");
        }
        if !self.attention_only && self.d_mlp == 0 {
            return bad("d_mlp must be positive when the model has MLP blocks");
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad("vocab_size and max_seq_len must be positive");
        }
        if self.task_head == TaskHead::NextToken && !self.causal {
            return bad("next-token models must use causal attention");
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad("init_std must be positive");
        }
        Ok(())
    }
}

/// One input sequence with its prediction targets.
///
/// Next-token examples carry one target per position; classifier examples
/// carry a single label (0 or 1). `weights`, when present, is aligned with
/// `targets`.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    pub weights: Option<Vec<f64>>,
}

impl Example {
    /// Predict `doc[i + 1]` from `doc[..=i]`.
    pub fn next_token(doc: &[u32]) -> Self {
        assert!(doc.len() >= 2, "document needs at least two tokens");
        Example {
            tokens: doc[..doc.len() - 1].to_vec(),
            targets: doc[1..].to_vec(),
            weights: None,
        }
    }

    /// Like [`Example::next_token`], with `weights[i]` weighting the loss on `doc[i]`
    /// (the first weight is dropped since `doc[0]` is never predicted).
    pub fn next_token_weighted(doc: &[u32], weights: &[f64]) -> Self {
        assert_eq!(doc.len(), weights.len());
        let mut ex = Example::next_token(doc);
        ex.weights = Some(weights[1..].to_vec());
        ex
    }

    pub fn classify(tokens: Vec<u32>, label: bool) -> Self {
        Example {
            tokens,
            targets: vec![label as u32],
            weights: None,
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weights = Some(vec![weight; self.targets.len()]);
        self
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }
}

/// Examples evaluated together; the loss is the weighted mean over all targets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub examples: Vec<Example>,
}

impl Batch {
    pub fn new(examples: Vec<Example>) -> Self {
        Batch { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

impl std::ops::Deref for Batch {
    type Target = [Example];
    fn deref(&self) -> &[Example] {
        &self.examples
    }
}

impl FromIterator<Example> for Batch {
    fn from_iter<I: IntoIterator<Item = Example>>(iter: I) -> Self {
        Batch {
            examples: iter.into_iter().collect(),
        }
    }
}

/// A transformer architecture; parameters are supplied per call.
#[derive(Clone, Debug)]
pub struct Transformer {
    config: ModelConfig,
    layout: Layout,
}

impl Transformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        Ok(Transformer { config, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    /// Deterministic random initialisation for `(config, seed)`.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamVector<T> {
        self.layout.init(&self.config, seed)
    }

    pub fn zero_params<T: Scalar>(&self) -> ParamVector<T> {
        self.layout.zeros()
    }

    /// Names of every attention head component, `layer{l}.head{h}`, in layer-major order.
    pub fn head_names(&self) -> Vec<String> {
        (0..self.config.n_layers)
            .flat_map(|l| (0..self.config.n_heads).map(move |h| format!("layer{l}.head{h}")))
            .collect()
    }

    pub fn check_params<T: Scalar>(&self, params: &ParamVector<T>) -> Result<()> {
        if params.len() != self.layout.total || params.segments() != &self.layout.segments[..] {
            return Err(Error::Shape(
                "parameter vector does not match model layout".to_string(),
            ));
        }
        Ok(())
    }

    pub(crate) fn check_examples(&self, examples: &[Example]) -> Result<()> {
        for ex in examples {
            if ex.tokens.is_empty() {
                return Err(Error::Shape("empty sequence".into()));
            }
            if ex.tokens.len() > self.config.max_seq_len {
                return Err(Error::SequenceTooLong {
                    len: ex.tokens.len(),
                    max: self.config.max_seq_len,
                });
            }
            if let Some(&t) = ex.tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab_size: self.config.vocab_size,
                });
            }
            let (want, n_classes) = match self.config.task_head {
                TaskHead::NextToken => (ex.tokens.len(), self.config.vocab_size),
                TaskHead::BinaryClassifier => (1, 2),
            };
            if ex.targets.len() != want {
                return Err(Error::Shape(format!(
                    "expected {want} targets, got {}",
                    ex.targets.len()
                )));
            }
            if let Some(&t) = ex.targets.iter().find(|&&t| t as usize >= n_classes) {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab_size: n_classes,
                });
            }
            if let Some(w) = &ex.weights {
                if w.len() != ex.targets.len() {
                    return Err(Error::Shape("token_weights shape differs from targets".into()));
                }
                if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                    return Err(Error::InvalidArgument(
                        "token weights must be finite and non-negative".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
