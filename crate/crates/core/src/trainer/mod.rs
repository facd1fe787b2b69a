//! Plugin training against a frozen base model.
//!
//! The memory adapter objective combines three terms per batch:
//!
//! ```text
//! L = NLL(full memory) + α · NLL(dropped memory) + β · SymKL(P_full, P_dropped)
//! ```
//!
//! where the dropped memory removes items or whole layers at random, with a
//! fresh mask every step.

mod dropout;
mod loss;

pub use dropout::{dropout_mask, memory_dropout, DropoutLevel};
pub use loss::{agreement_loss, evaluate_nll, loss_and_grads, LossConfig, LossParts};

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{MemoryUsage, PluginParams};
use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::nmt::{Pair, TransformerParams};
use crate::tensor::{AdamConfig, AdamState, InverseSqrtSchedule, Tensor};

/// Optimization settings for plugin training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub warmup: usize,
    pub max_lr: f64,
    pub batch_tokens: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Save the plugin every this many steps when a directory is given; 0 disables.
    pub checkpoint_every: usize,
    /// Validation NLL is recorded every this many steps and after the last; 0 records only the last.
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            warmup: 100,
            max_lr: 2e-4,
            batch_tokens: 512,
            label_smoothing: 0.1,
            seed: 0,
            checkpoint_every: 0,
            validate_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.max_lr > 0.0) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("max_lr must be > 0 and label_smoothing in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One optimizer step of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub parts: LossParts,
    pub lr: f64,
}

/// Per-step losses plus a validation curve.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// `(step, validation NLL)`; the last entry is the final model.
    pub valid: Vec<(usize, f64)>,
}

impl TrainLog {
    pub const HEADER: &'static str = "step,loss,nll_full,nll_drop,dist,lr";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let p = &r.parts;
            let _ = writeln!(s, "{},{},{},{},{},{}", r.step, p.total, p.nll_full, p.nll_drop, p.dist, r.lr);
        }
        s
    }

    pub fn valid_csv(&self) -> String {
        let mut s = String::from("step,valid_nll\n");
        for (step, v) in &self.valid {
            let _ = writeln!(s, "{step},{v}");
        }
        s
    }

    pub fn final_valid(&self) -> Option<f64> {
        self.valid.last().map(|v| v.1)
    }
}

/// Trains `plugin` on `pairs` with the base model frozen.
///
/// Memory adapters need `bank`; each step draws a dropped copy of it. The
/// bank itself is never modified. Base-model dropout is off throughout.
#[allow(clippy::too_many_arguments)]
pub fn train_adapters(
    model: &TransformerParams,
    plugin: &mut PluginParams,
    bank: Option<&MemoryBank>,
    usage: MemoryUsage,
    pairs: &[Pair],
    valid: &[Pair],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    loss_cfg.validate()?;
    plugin.view(bank, usage)?.check(model.config.d_model, model.config.layers)?;
    let mut stream = crate::nmt::BatchStream::new(pairs, cfg.batch_tokens, cfg.seed)?;
    let mut drop_rng = ChaCha8Rng::seed_from_u64(loss_cfg.seed);
    let schedule = InverseSqrtSchedule {
        max_lr: cfg.max_lr,
        warmup: cfg.warmup as u64,
    };
    let mut adam = AdamState::new(plugin.named().into_iter().map(|(_, t)| t), AdamConfig::default());
    let mut log = TrainLog::default();
    for step in 1..=cfg.steps {
        let batch = stream.next_batch();
        let dropped = match (plugin as &PluginParams, bank) {
            (PluginParams::Memory(_), Some(b)) if loss_cfg.needs_dropped_pass() => {
                Some(memory_dropout(b, loss_cfg, &mut drop_rng)?)
            }
            _ => None,
        };
        let (parts, grads) = loss_and_grads(
            model,
            plugin,
            bank,
            dropped.as_ref(),
            usage,
            &batch,
            loss_cfg,
            cfg.label_smoothing,
        )?;
        if !parts.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("{parts:?}"),
            });
        }
        let lr = schedule.lr(step as u64);
        let refs: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
        adam.step(&mut plugin.tensors_mut(), &refs, lr)?;
        log.rows.push(LogRow { step, parts, lr });
        let last = step == cfg.steps;
        if !valid.is_empty() && (last || (cfg.validate_every > 0 && step % cfg.validate_every == 0)) {
            let v = evaluate_nll(model, &plugin.view(bank, usage)?, valid)?;
            log.valid.push((step, v));
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                plugin.save(&dir.join(format!("plugin_step{step}.bin")))?;
            }
        }
        if step % 100 == 0 {
            log::debug!("plugin step {step}: {:?}", log.rows.last().map(|r| r.parts.total));
        }
    }
    Ok(log)
}
