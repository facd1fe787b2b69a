use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LossConfig;
use crate::error::Result;
use crate::memory::MemoryBank;

/// Granularity of memory dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutLevel {
    /// Each phrase pair is removed independently (both sides together).
    Item,
    /// Each layer's whole memory is removed independently.
    Layer,
}

/// Keep-mask over bank items. One Bernoulli(p) draw per layer (layer level)
/// or per item in layer-major order (item level); `true` keeps the item.
pub fn dropout_mask(bank: &MemoryBank, cfg: &LossConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    let p = cfg.dropout_rate;
    bank.layers()
        .iter()
        .map(|l| match cfg.dropout_level {
            DropoutLevel::Layer => {
                let keep = !rng.random_bool(p);
                vec![keep; l.len()]
            }
            DropoutLevel::Item => (0..l.len()).map(|_| !rng.random_bool(p)).collect(),
        })
        .collect()
}

/// A training-time copy of `bank` with items removed by [`dropout_mask`].
pub fn memory_dropout(bank: &MemoryBank, cfg: &LossConfig, rng: &mut ChaCha8Rng) -> Result<MemoryBank> {
    let mask = dropout_mask(bank, cfg, rng);
    bank.retain(&mask)
}
