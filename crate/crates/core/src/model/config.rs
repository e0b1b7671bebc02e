use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::SEQ_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{0} must be at least 1")]
    Zero(&'static str),
    #[error("hidden size {hidden} is not divisible by {heads} heads")]
    HeadSplit { hidden: usize, heads: usize },
    #[error("max_seq {0} is below 3 (room for [CLS] and two [SEP])")]
    MaxSeq(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: 4 layers, hidden 128, 4 heads, ff 512.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 4,
            hidden: 128,
            heads: 4,
            ff_dim: 512,
            vocab_size,
            max_seq: SEQ_LEN,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        if self.max_seq < 3 {
            return Err(ConfigError::MaxSeq(self.max_seq));
        }
        if self.hidden % self.heads != 0 {
            return Err(ConfigError::HeadSplit {
                hidden: self.hidden,
                heads: self.heads,
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_split() {
        let mut c = ModelConfig::desk(100);
        c.hidden = 32;
        c.heads = 4;
        assert!(c.validate().is_ok());
        assert_eq!(c.head_dim(), 8);
        c.hidden = 30;
        assert_eq!(
            c.validate(),
            Err(ConfigError::HeadSplit {
                hidden: 30,
                heads: 4
            })
        );
    }

    #[test]
    fn zero_and_short_seq() {
        let mut c = ModelConfig::desk(100);
        c.layers = 0;
        assert_eq!(c.validate(), Err(ConfigError::Zero("layers")));
        let mut c = ModelConfig::desk(100);
        c.max_seq = 2;
        assert_eq!(c.validate(), Err(ConfigError::MaxSeq(2)));
    }
}
