use std::cmp::Ordering;

use super::forward::{decode_batch, project, EncoderOut, Noise};
use super::model::TransformerParams;
use super::vocab::{BOS, EOS, PAD};
use crate::adapter::Plugin;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Maximum number of output tokens, EOS included.
    pub max_len: usize,
}

impl BeamConfig {
    pub fn new(beam_size: usize, max_len: usize) -> Self {
        Self { beam_size, max_len }
    }
}

struct Hyp {
    prefix: Vec<u32>,
    score: f64,
}

struct Finished {
    tokens: Vec<u32>,
    normalized: f64,
    order: usize,
}

/// Length-normalized beam search.
///
/// `step` receives the live prefixes, each starting with BOS, and returns one
/// row of next-token log-probabilities per prefix. PAD and BOS are never
/// proposed. Candidate ties go to the lower token id; final ties to the
/// earlier completion. Hypotheses still live at `max_len` are completed as is.
pub fn beam_search<F>(cfg: &BeamConfig, mut step: F) -> Result<Vec<u32>>
where
    F: FnMut(&[Vec<u32>]) -> Result<Vec<Vec<f64>>>,
{
    if cfg.beam_size == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let b = cfg.beam_size;
    let mut live = vec![Hyp {
        prefix: vec![BOS],
        score: 0.0,
    }];
    let mut finished: Vec<Finished> = Vec::new();
    for t in 0..cfg.max_len {
        let prefixes: Vec<Vec<u32>> = live.iter().map(|h| h.prefix.clone()).collect();
        let rows = step(&prefixes)?;
        if rows.len() != live.len() {
            return Err(Error::Contract("step returned the wrong number of rows".into()));
        }
        let mut cands: Vec<(f64, u32, usize)> = Vec::new();
        for (hi, (h, row)) in live.iter().zip(&rows).enumerate() {
            for (tok, &lp) in row.iter().enumerate() {
                let tok = tok as u32;
                if tok == PAD || tok == BOS || lp == f64::NEG_INFINITY {
                    continue;
                }
                if lp.is_nan() {
                    return Err(Error::NonFinite("beam step produced NaN".into()));
                }
                cands.push((h.score + lp, tok, hi));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut next = Vec::with_capacity(b);
        for &(score, tok, hi) in cands.iter().take(2 * b) {
            if next.len() == b {
                break;
            }
            let mut prefix = live[hi].prefix.clone();
            if tok == EOS {
                let tokens = prefix[1..].to_vec();
                let order = finished.len();
                finished.push(Finished {
                    normalized: score / (tokens.len() + 1) as f64,
                    tokens,
                    order,
                });
            } else {
                prefix.push(tok);
                next.push(Hyp { prefix, score });
            }
        }
        live = next;
        if finished.len() >= b || live.is_empty() {
            break;
        }
        if t + 1 == cfg.max_len {
            for h in &live {
                let tokens = h.prefix[1..].to_vec();
                let order = finished.len();
                finished.push(Finished {
                    normalized: h.score / tokens.len() as f64,
                    tokens,
                    order,
                });
            }
        }
    }
    let best = finished.into_iter().min_by(|a, b| {
        b.normalized
            .partial_cmp(&a.normalized)
            .unwrap_or(Ordering::Equal)
            .then(a.order.cmp(&b.order))
    });
    Ok(best.map(|f| f.tokens).unwrap_or_default())
}

/// Incremental access to a model for one source sentence: the encoder runs
/// once, each step recomputes the decoder over all live prefixes.
pub struct Decoder<'m> {
    params: &'m TransformerParams,
    plugin: Plugin<'m>,
    enc: Tensor,
    key_mask: Vec<bool>,
}

/// Next-token log-probabilities and final decoder states for each prefix.
pub struct StepOutput {
    pub log_probs: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
}

impl<'m> Decoder<'m> {
    pub fn new(x: &[u32], params: &'m TransformerParams, plugin: Plugin<'m>) -> Result<Self> {
        plugin.check(params.config.d_model, params.config.layers)?;
        let mut tape = Tape::new();
        let mv = params.bind(&mut tape, false);
        let enc = super::forward::encode_batch(&mut tape, &mv, &params.config, &[x], &mut Noise::off())?;
        Ok(Self {
            params,
            plugin,
            enc: tape.value(enc.states).clone(),
            key_mask: enc.key_mask,
        })
    }

    pub fn step(&self, prefixes: &[Vec<u32>]) -> Result<StepOutput> {
        let mut tape = Tape::new();
        let mv = self.params.bind(&mut tape, false);
        let (pv, _) = self.plugin.bind(&mut tape, false)?;
        let enc = EncoderOut {
            states: tape.param(&self.enc, false),
            spans: vec![(0, self.enc.rows())],
            key_mask: self.key_mask.clone(),
        };
        let tgts: Vec<&[u32]> = prefixes.iter().map(Vec::as_slice).collect();
        let src_of = vec![0; tgts.len()];
        let dec = decode_batch(&mut tape, &mv, &self.params.config, &enc, &tgts, &src_of, &pv, &mut Noise::off())?;
        let last: Vec<usize> = dec.spans.iter().map(|&(s, n)| s + n - 1).collect();
        let states = tape.select_rows(dec.final_state(), &last)?;
        let logits = project(&mut tape, &mv, states)?;
        let logits = tape.value(logits);
        let mut log_probs = Vec::with_capacity(last.len());
        for r in 0..logits.rows() {
            let mut row = vec![0.0; logits.cols()];
            crate::tensor::log_softmax(logits.row(r), &mut row);
            log_probs.push(row);
        }
        let states = tape.value(states);
        Ok(StepOutput {
            log_probs,
            states: (0..states.rows()).map(|r| states.row(r).to_vec()).collect(),
        })
    }
}

/// Beam-search translation of one source sentence (EOS-terminated).
pub fn translate(x: &[u32], params: &TransformerParams, plugin: Plugin, cfg: &BeamConfig) -> Result<Vec<u32>> {
    let dec = Decoder::new(x, params, plugin)?;
    beam_search(cfg, |p| dec.step(p).map(|o| o.log_probs))
}
