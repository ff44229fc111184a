use serde::{Deserialize, Serialize};

use super::params::Layout;
use super::EncoderError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    /// Adds the masked-language-model head.
    #[serde(default)]
    pub mlm_head: bool,
}

impl EncoderConfig {
    /// 2 layers, 64 hidden, 4 heads, 128 FFN, 64 positions.
    pub fn desk(vocab_size: usize, num_classes: usize) -> Self {
        Self {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            ffn_size: 128,
            vocab_size,
            max_len: 64,
            num_classes,
            dropout_rate: 0.1,
            seed: 0,
            mlm_head: false,
        }
    }

    /// BERT-base shape.
    pub fn base(num_classes: usize) -> Self {
        Self {
            num_layers: 12,
            hidden_size: 768,
            num_heads: 12,
            ffn_size: 3072,
            vocab_size: 30_000,
            max_len: 512,
            num_classes,
            dropout_rate: 0.1,
            seed: 0,
            mlm_head: false,
        }
    }

    /// BERT-large shape.
    pub fn large(num_classes: usize) -> Self {
        Self {
            num_layers: 24,
            hidden_size: 1024,
            num_heads: 16,
            ffn_size: 4096,
            ..Self::base(num_classes)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(EncoderError::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_size % self.num_heads != 0 {
            return Err(EncoderError::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(EncoderError::Config(format!(
                "dropout_rate {} not in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Number of trainable scalars, from tensor shapes alone.
    pub fn parameter_count(&self) -> usize {
        Layout::new(self).total()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
    /// Stop once dev accuracy reaches this value.
    pub target_dev_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 16,
            epochs: 20,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            max_grad_norm: 1.0,
            seed: 0,
            target_dev_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(EncoderError::Config(
                "learning_rate must be finite and non-negative".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(EncoderError::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(EncoderError::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        if self.weight_decay < 0.0 || self.max_grad_norm < 0.0 {
            return Err(EncoderError::Config(
                "weight_decay and max_grad_norm must be non-negative".into(),
            ));
        }
        Ok(())
    }
}
