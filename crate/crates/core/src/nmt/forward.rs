use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::model::{AttnVars, FfnVars, ModelVars, NormVars, TransformerConfig, TransformerParams};
use super::vocab::{BOS, PAD};
use crate::adapter::{GateTrace, Plugin, PluginVars, Site, SiteTraceVars};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{AttnLayout, Segment, Tape, Tensor, Var};

/// Inverted dropout on activations; inactive unless built with [`Noise::new`].
pub struct Noise<'r> {
    rate: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Noise<'r> {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: &'r mut ChaCha8Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => {
                let keep = 1.0 / (1.0 - self.rate);
                let mask = (0..tape.value(x).len())
                    .map(|_| if rng.random_bool(self.rate) { 0.0 } else { keep })
                    .collect();
                tape.dropout(x, mask)
            }
            _ => Ok(x),
        }
    }
}

/// Sinusoidal position encodings for the given positions, `[n×d]`.
pub fn positional_encoding(positions: &[usize], d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[positions.len(), d]);
    for (r, &pos) in positions.iter().enumerate() {
        let row = t.row_mut(r);
        for (i, x) in row.iter_mut().enumerate() {
            let freq = 10000f64.powf(-((i - i % 2) as f64) / d as f64);
            let angle = pos as f64 * freq;
            *x = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

/// `(start, len)` of each sequence when concatenated row-wise.
fn spans(seqs: &[&[u32]]) -> Vec<(usize, usize)> {
    let mut start = 0;
    seqs.iter()
        .map(|s| {
            let span = (start, s.len());
            start += s.len();
            span
        })
        .collect()
}

fn embed(
    tape: &mut Tape,
    table: Var,
    seqs: &[&[u32]],
    d: usize,
    noise: &mut Noise,
) -> Result<Var> {
    let ids: Vec<u32> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
    let positions: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
    let x = tape.gather(table, &ids)?;
    let x = tape.scale(x, (d as f64).sqrt());
    let pe = tape.constant(positional_encoding(&positions, d));
    let x = tape.add(x, pe)?;
    noise.apply(tape, x)
}

fn attend(tape: &mut Tape, w: &AttnVars, queries: Var, keys: Var, layout: AttnLayout) -> Result<Var> {
    let q = tape.matmul(queries, w.wq)?;
    let k = tape.matmul(keys, w.wk)?;
    let v = tape.matmul(keys, w.wv)?;
    let a = tape.attention(q, k, v, layout)?;
    tape.matmul(a, w.wo)
}

fn feed_forward(tape: &mut Tape, w: &FfnVars, x: Var) -> Result<Var> {
    let h = tape.matmul(x, w.w1)?;
    let h = tape.add_row(h, w.b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, w.w2)?;
    tape.add_row(o, w.b2)
}

fn add_norm(tape: &mut Tape, x: Var, residual: Var, ln: &NormVars) -> Result<Var> {
    let s = tape.add(x, residual)?;
    tape.layernorm(s, ln.gain, ln.bias)
}

/// Encoder output for a ragged batch of source sequences.
#[derive(Clone, Debug)]
pub struct EncoderOut {
    pub states: Var,
    pub spans: Vec<(usize, usize)>,
    /// `false` at PAD rows.
    pub key_mask: Vec<bool>,
}

/// Runs the encoder over every sequence of `srcs` at once.
pub fn encode_batch(
    tape: &mut Tape,
    mv: &ModelVars,
    cfg: &TransformerConfig,
    srcs: &[&[u32]],
    noise: &mut Noise,
) -> Result<EncoderOut> {
    check_ids(srcs, cfg.src_vocab, "source")?;
    let spans = spans(srcs);
    let key_mask: Vec<bool> = srcs.iter().flat_map(|s| s.iter().map(|&t| t != PAD)).collect();
    let segments: Vec<Segment> = spans
        .iter()
        .map(|&(s, n)| Segment {
            q_start: s,
            q_len: n,
            k_start: s,
            k_len: n,
        })
        .collect();
    let mut x = embed(tape, mv.src_embed, srcs, cfg.d_model, noise)?;
    for layer in &mv.encoder {
        let layout = AttnLayout {
            heads: cfg.heads,
            segments: segments.clone(),
            causal: false,
            key_mask: Some(key_mask.clone()),
        };
        let s = attend(tape, &layer.self_attn, x, x, layout)?;
        let s = noise.apply(tape, s)?;
        let x1 = add_norm(tape, x, s, &layer.ln1)?;
        let f = feed_forward(tape, &layer.ffn, x1)?;
        let f = noise.apply(tape, f)?;
        x = add_norm(tape, x1, f, &layer.ln2)?;
    }
    Ok(EncoderOut { states: x, spans, key_mask })
}

/// Handles of one decoder layer's intermediate values.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub s: Var,
    pub o1: Var,
    pub l1: Var,
    pub c: Var,
    pub o2: Var,
    pub l2: Var,
    pub d: Var,
    pub self_trace: Option<SiteTraceVars>,
    pub cross_trace: Option<SiteTraceVars>,
}

#[derive(Clone, Debug)]
pub struct DecoderOut {
    /// Embedded target input.
    pub d0: Var,
    pub layers: Vec<LayerVars>,
    pub spans: Vec<(usize, usize)>,
}

impl DecoderOut {
    /// Input to the output projection.
    pub fn final_state(&self) -> Var {
        self.layers.last().map_or(self.d0, |l| l.d)
    }
}

/// Runs the decoder over `tgts`; target `i` attends to encoder sequence `src_of[i]`.
#[allow(clippy::too_many_arguments)]
pub fn decode_batch(
    tape: &mut Tape,
    mv: &ModelVars,
    cfg: &TransformerConfig,
    enc: &EncoderOut,
    tgts: &[&[u32]],
    src_of: &[usize],
    plugin: &PluginVars,
    noise: &mut Noise,
) -> Result<DecoderOut> {
    check_ids(tgts, cfg.tgt_vocab, "target")?;
    if src_of.len() != tgts.len() || src_of.iter().any(|&i| i >= enc.spans.len()) {
        return Err(dim_err!("decoder: {} targets mapped onto {} sources", tgts.len(), enc.spans.len()));
    }
    let spans = spans(tgts);
    let self_segments: Vec<Segment> = spans
        .iter()
        .map(|&(s, n)| Segment {
            q_start: s,
            q_len: n,
            k_start: s,
            k_len: n,
        })
        .collect();
    let cross_segments: Vec<Segment> = spans
        .iter()
        .zip(src_of)
        .map(|(&(s, n), &j)| Segment {
            q_start: s,
            q_len: n,
            k_start: enc.spans[j].0,
            k_len: enc.spans[j].1,
        })
        .collect();
    let d0 = embed(tape, mv.tgt_embed, tgts, cfg.d_model, noise)?;
    let mut x = d0;
    let mut layers = Vec::with_capacity(mv.decoder.len());
    for (i, layer) in mv.decoder.iter().enumerate() {
        let self_layout = AttnLayout {
            heads: cfg.heads,
            segments: self_segments.clone(),
            causal: true,
            key_mask: None,
        };
        let s = attend(tape, &layer.self_attn, x, x, self_layout)?;
        let (o1, self_trace) = plugin.apply(tape, i, Site::SelfAttn, s, s)?;
        let o1n = noise.apply(tape, o1)?;
        let l1 = add_norm(tape, x, o1n, &layer.ln1)?;
        let cross_layout = AttnLayout {
            heads: cfg.heads,
            segments: cross_segments.clone(),
            causal: false,
            key_mask: Some(enc.key_mask.clone()),
        };
        let c = attend(tape, &layer.cross_attn, l1, enc.states, cross_layout)?;
        let (o2, cross_trace) = plugin.apply(tape, i, Site::CrossAttn, c, l1)?;
        let o2n = noise.apply(tape, o2)?;
        let l2 = add_norm(tape, l1, o2n, &layer.ln2)?;
        let f = feed_forward(tape, &layer.ffn, l2)?;
        let f = noise.apply(tape, f)?;
        let d = add_norm(tape, l2, f, &layer.ln3)?;
        layers.push(LayerVars {
            s,
            o1,
            l1,
            c,
            o2,
            l2,
            d,
            self_trace,
            cross_trace,
        });
        x = d;
    }
    Ok(DecoderOut { d0, layers, spans })
}

/// Output projection of decoder states to vocabulary logits.
pub fn project(tape: &mut Tape, mv: &ModelVars, states: Var) -> Result<Var> {
    let z = tape.matmul(states, mv.out_proj)?;
    tape.add_row(z, mv.out_bias)
}

fn check_ids(seqs: &[&[u32]], vocab: usize, side: &str) -> Result<()> {
    if seqs.is_empty() {
        return Err(Error::Contract(format!("empty {side} batch")));
    }
    for s in seqs {
        if s.is_empty() {
            return Err(Error::Contract(format!("empty {side} sequence")));
        }
        if let Some(&t) = s.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Contract(format!("{side} id {t} outside vocabulary of {vocab}")));
        }
    }
    Ok(())
}

/// Intermediate values of one decoder layer for a single sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerReps {
    /// Self-attention output.
    pub s: Tensor,
    /// Cross-attention output.
    pub c: Tensor,
    pub l1: Tensor,
    pub l2: Tensor,
    /// Layer output.
    pub d: Tensor,
}

/// Representations recorded during a teacher-forced pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CapturedReps {
    /// Encoder output `[|x|×d]`.
    pub e: Tensor,
    /// Embedded target input `[|y|×d]`.
    pub d0: Tensor,
    pub layers: Vec<LayerReps>,
}

/// Everything a single-sentence teacher-forced pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub reps: Option<CapturedReps>,
    /// `(layer, site, trace)` for every adapter site that read memory.
    pub traces: Vec<(usize, Site, GateTrace)>,
}

/// Encoder output for one source sentence.
pub fn encode(x: &[u32], params: &TransformerParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mv = params.bind(&mut tape, false);
    let enc = encode_batch(&mut tape, &mv, &params.config, &[x], &mut Noise::off())?;
    Ok(tape.value(enc.states).clone())
}

/// Teacher-forced pass of the plain base model. `y` is the decoder input and
/// starts with BOS.
pub fn forward_teacher_forced(
    x: &[u32],
    y: &[u32],
    params: &TransformerParams,
    capture: bool,
) -> Result<(Tensor, Option<CapturedReps>)> {
    let out = forward_with_plugin(x, y, params, &Plugin::None, capture)?;
    Ok((out.logits, out.reps))
}

/// Teacher-forced pass with an adapter plugin in the decoder.
pub fn forward_with_plugin(
    x: &[u32],
    y: &[u32],
    params: &TransformerParams,
    plugin: &Plugin,
    capture: bool,
) -> Result<ForwardOutput> {
    if y.first() != Some(&BOS) {
        return Err(Error::Contract("decoder input must start with BOS".into()));
    }
    plugin.check(params.config.d_model, params.config.layers)?;
    let mut tape = Tape::new();
    let mv = params.bind(&mut tape, false);
    let (pv, _) = plugin.bind(&mut tape, false)?;
    let mut noise = Noise::off();
    let enc = encode_batch(&mut tape, &mv, &params.config, &[x], &mut noise)?;
    let dec = decode_batch(&mut tape, &mv, &params.config, &enc, &[y], &[0], &pv, &mut noise)?;
    let logits = project(&mut tape, &mv, dec.final_state())?;
    let reps = capture.then(|| CapturedReps {
        e: tape.value(enc.states).clone(),
        d0: tape.value(dec.d0).clone(),
        layers: dec
            .layers
            .iter()
            .map(|l| LayerReps {
                s: tape.value(l.s).clone(),
                c: tape.value(l.c).clone(),
                l1: tape.value(l.l1).clone(),
                l2: tape.value(l.l2).clone(),
                d: tape.value(l.d).clone(),
            })
            .collect(),
    });
    let mut traces = Vec::new();
    for (i, l) in dec.layers.iter().enumerate() {
        for (site, t) in [(Site::SelfAttn, &l.self_trace), (Site::CrossAttn, &l.cross_trace)] {
            if let Some(t) = t {
                traces.push((i, site, GateTrace::from_vars(&tape, t)));
            }
        }
    }
    Ok(ForwardOutput {
        logits: tape.value(logits).clone(),
        reps,
        traces,
    })
}

/// Mean negative log-probability of `targets` over non-PAD positions.
pub fn nll_loss(logits: &Tensor, targets: &[u32]) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.param(logits, false);
    let (loss, count) = nll_on_tape(&mut tape, z, targets, 0.0)?;
    Ok(if count == 0 { 0.0 } else { tape.value(loss).data()[0] })
}

/// Summed label-smoothed cross-entropy over non-PAD targets divided by their
/// count, plus that count.
pub fn nll_on_tape(tape: &mut Tape, logits: Var, targets: &[u32], eps: f64) -> Result<(Var, usize)> {
    let t: Vec<Option<u32>> = targets.iter().map(|&t| (t != PAD).then_some(t)).collect();
    let count = t.iter().flatten().count();
    let sum = tape.cross_entropy(logits, &t, eps)?;
    Ok((tape.scale(sum, 1.0 / count.max(1) as f64), count))
}
