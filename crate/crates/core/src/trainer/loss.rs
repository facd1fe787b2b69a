use serde::{Deserialize, Serialize};

use super::DropoutLevel;
use crate::adapter::{Plugin, PluginParams, PluginVars, MemoryUsage};
use crate::error::{dim_err, Error, Result};
use crate::memory::MemoryBank;
use crate::nmt::{decode_batch, encode_batch, nll_on_tape, project, Batch, ModelVars, Noise, Pair, TransformerParams, PAD};
use crate::par;
use crate::tensor::{log_softmax, Tape, Tensor, Var};

/// Weights of the objective and the memory dropout applied to its second pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub dropout_rate: f64,
    pub dropout_level: DropoutLevel,
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 5.0,
            dropout_rate: 0.1,
            dropout_level: DropoutLevel::Item,
            seed: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config(format!("alpha {} and beta {} must be >= 0", self.alpha, self.beta)));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1]", self.dropout_rate)));
        }
        Ok(())
    }

    /// Whether the objective has any dropped-memory term.
    pub fn needs_dropped_pass(&self) -> bool {
        self.alpha > 0.0 || self.beta > 0.0
    }
}

/// Objective value and its components for one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub nll_full: f64,
    pub nll_drop: f64,
    pub dist: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        [self.total, self.nll_full, self.nll_drop, self.dist].iter().all(|x| x.is_finite())
    }
}

/// `½(KL(p‖q) + KL(q‖p))` averaged over rows flagged in `rows`. `p` and `q`
/// hold one strictly positive distribution per row.
pub fn agreement_loss(p: &Tensor, q: &Tensor, rows: &[bool]) -> Result<f64> {
    if p.shape() != q.shape() || p.rows() != rows.len() {
        return Err(dim_err!("agreement_loss: {:?} vs {:?} with {} flags", p.shape(), q.shape(), rows.len()));
    }
    let mut total = 0.0;
    let mut count = 0;
    for (i, _) in rows.iter().enumerate().filter(|(_, &r)| r) {
        total += 0.5
            * p.row(i)
                .iter()
                .zip(q.row(i))
                .map(|(a, b)| (a - b) * (a.ln() - b.ln()))
                .sum::<f64>();
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

fn bind_base<'a>(tape: &mut Tape<'a>, model: &'a TransformerParams) -> Result<ModelVars> {
    let mv = model.bind(tape, false);
    if mv.all().iter().any(|&v| tape.needs_grad(v)) {
        return Err(Error::Contract("base model bound as trainable".into()));
    }
    Ok(mv)
}

fn batch_logits(
    tape: &mut Tape,
    model: &TransformerParams,
    mv: &ModelVars,
    enc: &crate::nmt::EncoderOut,
    batch: &Batch,
    pv: &PluginVars,
) -> Result<Var> {
    let src_of: Vec<usize> = (0..batch.len()).collect();
    let dec = decode_batch(tape, mv, &model.config, enc, &batch.tgt_refs(), &src_of, pv, &mut Noise::off())?;
    project(tape, mv, dec.final_state())
}

/// Objective and plugin gradients (in `tensors_mut` order) for one batch.
///
/// A memory adapter runs a second pass over `dropped` when the objective has
/// dropped-memory terms. Without a second pass `nll_drop` repeats `nll_full`
/// and `dist` is zero.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grads(
    model: &TransformerParams,
    plugin: &PluginParams,
    bank: Option<&MemoryBank>,
    dropped: Option<&MemoryBank>,
    usage: MemoryUsage,
    batch: &Batch,
    cfg: &LossConfig,
    label_smoothing: f64,
) -> Result<(LossParts, Vec<Option<Tensor>>)> {
    let mut tape = Tape::new();
    let mv = bind_base(&mut tape, model)?;
    let enc = encode_batch(&mut tape, &mv, &model.config, &batch.src_refs(), &mut Noise::off())?;
    let targets = batch.targets();
    let (full_pv, second, params) = match plugin {
        PluginParams::Memory(adapter) => {
            let bank = bank.ok_or_else(|| Error::Contract("memory adapter trained without a bank".into()))?;
            let vars = adapter.bind(&mut tape, true);
            let full = PluginVars::memory(&mut tape, adapter, &vars, bank, usage)?;
            let second = match (cfg.needs_dropped_pass(), dropped) {
                (true, Some(d)) => Some(PluginVars::memory(&mut tape, adapter, &vars, d, usage)?),
                (true, None) => return Err(Error::Contract("objective needs a dropped memory".into())),
                (false, _) => None,
            };
            (full, second, vars.all())
        }
        PluginParams::Bottleneck(p) => {
            let vars = p.bind(&mut tape, true);
            let all = vars.iter().flatten().flat_map(|s| s.all()).collect();
            (PluginVars::Bottleneck(vars), None, all)
        }
    };
    let logits_full = batch_logits(&mut tape, model, &mv, &enc, batch, &full_pv)?;
    let (nll_full, _) = nll_on_tape(&mut tape, logits_full, &targets, label_smoothing)?;
    let nll_full_v = tape.value(nll_full).data()[0];
    let (loss, parts) = match second {
        None => (
            nll_full,
            LossParts {
                total: nll_full_v,
                nll_full: nll_full_v,
                nll_drop: nll_full_v,
                dist: 0.0,
            },
        ),
        Some(pv) => {
            let logits_drop = batch_logits(&mut tape, model, &mv, &enc, batch, &pv)?;
            let (nll_drop, count) = nll_on_tape(&mut tape, logits_drop, &targets, label_smoothing)?;
            let rows: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
            let kl = tape.sym_kl(logits_full, logits_drop, &rows)?;
            let dist = tape.scale(kl, 1.0 / count.max(1) as f64);
            let a = tape.scale(nll_drop, cfg.alpha);
            let b = tape.scale(dist, cfg.beta);
            let ab = tape.add(a, b)?;
            let total = tape.add(nll_full, ab)?;
            let parts = LossParts {
                total: tape.value(total).data()[0],
                nll_full: nll_full_v,
                nll_drop: tape.value(nll_drop).data()[0],
                dist: tape.value(dist).data()[0],
            };
            (total, parts)
        }
    };
    let g = tape.backward(loss)?;
    if mv.all().iter().any(|&v| g.get(v).is_some()) {
        return Err(Error::Contract("gradient reached the base model".into()));
    }
    Ok((parts, params.into_iter().map(|v| g.get(v).cloned()).collect()))
}

const EVAL_CHUNK: usize = 32;

/// Token-weighted mean negative log-likelihood of `pairs` (no smoothing).
pub fn evaluate_nll(model: &TransformerParams, plugin: &Plugin, pairs: &[Pair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let chunks: Vec<&[Pair]> = pairs.chunks(EVAL_CHUNK).collect();
    let sums = par::map(&chunks, |chunk| -> Result<(f64, usize)> {
        let batch = Batch::from_pairs(chunk.iter());
        let mut tape = Tape::new();
        let mv = bind_base(&mut tape, model)?;
        let (pv, _) = plugin.bind(&mut tape, false)?;
        let enc = encode_batch(&mut tape, &mv, &model.config, &batch.src_refs(), &mut Noise::off())?;
        let logits = batch_logits(&mut tape, model, &mv, &enc, &batch, &pv)?;
        let z = tape.value(logits);
        let mut row = vec![0.0; z.cols()];
        let mut sum = 0.0;
        for (i, &t) in batch.targets().iter().enumerate() {
            log_softmax(z.row(i), &mut row);
            sum -= row[t as usize];
        }
        Ok((sum, batch.target_tokens()))
    });
    let mut total = 0.0;
    let mut count = 0;
    for s in sums {
        let (a, b) = s?;
        total += a;
        count += b;
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agreement_hand_case_and_identities() {
        let p = Tensor::new(vec![1, 2], vec![0.75, 0.25]).unwrap();
        let q = Tensor::new(vec![1, 2], vec![0.25, 0.75]).unwrap();
        let v = agreement_loss(&p, &q, &[true]).unwrap();
        assert!((v - 0.5 * 3f64.ln()).abs() < 1e-12);
        assert_eq!(agreement_loss(&p, &p, &[true]).unwrap(), 0.0);
        assert_eq!(agreement_loss(&q, &p, &[true]).unwrap(), v);
        assert_eq!(agreement_loss(&p, &q, &[false]).unwrap(), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            dropout_rate: 1.5,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let neg = LossConfig {
            alpha: -1.0,
            ..LossConfig::default()
        };
        assert!(neg.validate().is_err());
    }
}
