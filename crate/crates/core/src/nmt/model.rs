use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, MODEL_MAGIC};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Shape of a base Transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

impl TransformerConfig {
    /// d=32, two layers, two heads, FFN 64.
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            d_model: 32,
            layers: 2,
            heads: 2,
            ffn: 64,
            src_vocab,
            tgt_vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.d_model, self.layers, self.heads, self.ffn, self.src_vocab, self.tgt_vocab];
        if positive.contains(&0) {
            return Err(Error::Config(format!("all model sizes must be positive: {self:?}")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub self_attn: Attention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub ln1: LayerNorm,
    pub cross_attn: Attention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub ln3: LayerNorm,
}

/// Post-LN encoder–decoder weights. Biases are stored as `[1×n]` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerParams {
    pub config: TransformerConfig,
    pub src_embed: Tensor,
    pub tgt_embed: Tensor,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub out_proj: Tensor,
    pub out_bias: Tensor,
    /// A frozen model binds every tensor as a constant.
    pub frozen: bool,
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(&[rows, cols], limit, rng)
}

impl Attention {
    const NAMES: [&'static str; 4] = ["wq", "wk", "wv", "wo"];

    fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            wq: xavier(d, d, rng),
            wk: xavier(d, d, rng),
            wv: xavier(d, d, rng),
            wo: xavier(d, d, rng),
        }
    }

    fn refs(&self) -> [&Tensor; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    fn refs_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }
}

impl LayerNorm {
    const NAMES: [&'static str; 2] = ["gain", "bias"];

    fn init(d: usize) -> Self {
        Self {
            gain: Tensor::full(&[1, d], 1.0),
            bias: Tensor::zeros(&[1, d]),
        }
    }

    fn refs(&self) -> [&Tensor; 2] {
        [&self.gain, &self.bias]
    }

    fn refs_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.gain, &mut self.bias]
    }
}

impl FeedForward {
    const NAMES: [&'static str; 4] = ["w1", "b1", "w2", "b2"];

    fn init(d: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: xavier(d, ffn, rng),
            b1: Tensor::zeros(&[1, ffn]),
            w2: xavier(ffn, d, rng),
            b2: Tensor::zeros(&[1, d]),
        }
    }

    fn refs(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn refs_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

fn push_named<'s, const N: usize>(
    out: &mut Vec<(String, &'s Tensor)>,
    prefix: &str,
    names: [&str; N],
    refs: [&'s Tensor; N],
) {
    for (n, t) in names.iter().zip(refs) {
        out.push((format!("{prefix}.{n}"), t));
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: TransformerConfig,
    frozen: bool,
    manifest: Vec<ManifestEntry>,
}

impl TransformerParams {
    /// Xavier-uniform weights, `N(0, 1/d)` embeddings, unit gains, zero biases.
    pub fn init(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let emb_std = (d as f64).powf(-0.5);
        let src_embed = Tensor::randn(&[config.src_vocab, d], emb_std, &mut rng);
        let tgt_embed = Tensor::randn(&[config.tgt_vocab, d], emb_std, &mut rng);
        let encoder = (0..config.layers)
            .map(|_| EncoderLayer {
                self_attn: Attention::init(d, &mut rng),
                ln1: LayerNorm::init(d),
                ffn: FeedForward::init(d, config.ffn, &mut rng),
                ln2: LayerNorm::init(d),
            })
            .collect();
        let decoder = (0..config.layers)
            .map(|_| DecoderLayer {
                self_attn: Attention::init(d, &mut rng),
                ln1: LayerNorm::init(d),
                cross_attn: Attention::init(d, &mut rng),
                ln2: LayerNorm::init(d),
                ffn: FeedForward::init(d, config.ffn, &mut rng),
                ln3: LayerNorm::init(d),
            })
            .collect();
        let out_proj = xavier(d, config.tgt_vocab, &mut rng);
        let out_bias = Tensor::zeros(&[1, config.tgt_vocab]);
        Ok(Self {
            config,
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            out_proj,
            out_bias,
            frozen: false,
        })
    }

    /// Every tensor with a dotted name, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("src_embed".to_string(), &self.src_embed),
            ("tgt_embed".to_string(), &self.tgt_embed),
        ];
        for (i, l) in self.encoder.iter().enumerate() {
            push_named(&mut out, &format!("enc{i}.self"), Attention::NAMES, l.self_attn.refs());
            push_named(&mut out, &format!("enc{i}.ln1"), LayerNorm::NAMES, l.ln1.refs());
            push_named(&mut out, &format!("enc{i}.ffn"), FeedForward::NAMES, l.ffn.refs());
            push_named(&mut out, &format!("enc{i}.ln2"), LayerNorm::NAMES, l.ln2.refs());
        }
        for (i, l) in self.decoder.iter().enumerate() {
            push_named(&mut out, &format!("dec{i}.self"), Attention::NAMES, l.self_attn.refs());
            push_named(&mut out, &format!("dec{i}.ln1"), LayerNorm::NAMES, l.ln1.refs());
            push_named(&mut out, &format!("dec{i}.cross"), Attention::NAMES, l.cross_attn.refs());
            push_named(&mut out, &format!("dec{i}.ln2"), LayerNorm::NAMES, l.ln2.refs());
            push_named(&mut out, &format!("dec{i}.ffn"), FeedForward::NAMES, l.ffn.refs());
            push_named(&mut out, &format!("dec{i}.ln3"), LayerNorm::NAMES, l.ln3.refs());
        }
        out.push(("out_proj".to_string(), &self.out_proj));
        out.push(("out_bias".to_string(), &self.out_bias));
        out
    }

    /// Mutable tensors in the same order as [`named`](Self::named).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.src_embed, &mut self.tgt_embed];
        for l in &mut self.encoder {
            out.extend(l.self_attn.refs_mut());
            out.extend(l.ln1.refs_mut());
            out.extend(l.ffn.refs_mut());
            out.extend(l.ln2.refs_mut());
        }
        for l in &mut self.decoder {
            out.extend(l.self_attn.refs_mut());
            out.extend(l.ln1.refs_mut());
            out.extend(l.cross_attn.refs_mut());
            out.extend(l.ln2.refs_mut());
            out.extend(l.ffn.refs_mut());
            out.extend(l.ln3.refs_mut());
        }
        out.push(&mut self.out_proj);
        out.push(&mut self.out_bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rounds every value through f32 so the in-memory model equals its checkpoint.
    pub fn quantize(&mut self) {
        for t in self.tensors_mut() {
            container::quantize(t.data_mut());
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.named();
        let header = CheckpointHeader {
            config: self.config.clone(),
            frozen: self.frozen,
            manifest: named
                .iter()
                .map(|(n, t)| ManifestEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let payload = container::f32_bytes(named.iter().flat_map(|(_, t)| t.data()));
        container::encode(MODEL_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (CheckpointHeader, _) = container::decode(MODEL_MAGIC, bytes)?;
        header
            .config
            .validate()
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut params = Self::init(header.config, 0)?;
        params.frozen = header.frozen;
        let expected: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != header.manifest.len()
            || expected
                .iter()
                .zip(&header.manifest)
                .any(|((n, s), m)| *n != m.name || *s != m.shape)
        {
            return Err(Error::Format("checkpoint manifest does not match its config".into()));
        }
        let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let values = container::read_f32s(payload, total)?;
        let mut offset = 0;
        for t in params.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }

    /// Binds every tensor onto `tape`. Tensors are trainable only when
    /// `trainable` is set and the model is not frozen.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> ModelVars {
        let t = trainable && !self.frozen;
        let bind_attn = |tape: &mut Tape<'a>, a: &'a Attention| AttnVars {
            wq: tape.param(&a.wq, t),
            wk: tape.param(&a.wk, t),
            wv: tape.param(&a.wv, t),
            wo: tape.param(&a.wo, t),
        };
        let bind_ln = |tape: &mut Tape<'a>, l: &'a LayerNorm| NormVars {
            gain: tape.param(&l.gain, t),
            bias: tape.param(&l.bias, t),
        };
        let bind_ffn = |tape: &mut Tape<'a>, f: &'a FeedForward| FfnVars {
            w1: tape.param(&f.w1, t),
            b1: tape.param(&f.b1, t),
            w2: tape.param(&f.w2, t),
            b2: tape.param(&f.b2, t),
        };
        let src_embed = tape.param(&self.src_embed, t);
        let tgt_embed = tape.param(&self.tgt_embed, t);
        let encoder = self
            .encoder
            .iter()
            .map(|l| EncoderLayerVars {
                self_attn: bind_attn(tape, &l.self_attn),
                ln1: bind_ln(tape, &l.ln1),
                ffn: bind_ffn(tape, &l.ffn),
                ln2: bind_ln(tape, &l.ln2),
            })
            .collect();
        let decoder = self
            .decoder
            .iter()
            .map(|l| DecoderLayerVars {
                self_attn: bind_attn(tape, &l.self_attn),
                ln1: bind_ln(tape, &l.ln1),
                cross_attn: bind_attn(tape, &l.cross_attn),
                ln2: bind_ln(tape, &l.ln2),
                ffn: bind_ffn(tape, &l.ffn),
                ln3: bind_ln(tape, &l.ln3),
            })
            .collect();
        ModelVars {
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            out_proj: tape.param(&self.out_proj, t),
            out_bias: tape.param(&self.out_bias, t),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderLayerVars {
    pub self_attn: AttnVars,
    pub ln1: NormVars,
    pub ffn: FfnVars,
    pub ln2: NormVars,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerVars {
    pub self_attn: AttnVars,
    pub ln1: NormVars,
    pub cross_attn: AttnVars,
    pub ln2: NormVars,
    pub ffn: FfnVars,
    pub ln3: NormVars,
}

/// Tape handles mirroring [`TransformerParams`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub src_embed: Var,
    pub tgt_embed: Var,
    pub encoder: Vec<EncoderLayerVars>,
    pub decoder: Vec<DecoderLayerVars>,
    pub out_proj: Var,
    pub out_bias: Var,
}

impl ModelVars {
    /// Handles in the order of [`TransformerParams::tensors_mut`].
    pub fn all(&self) -> Vec<Var> {
        let attn = |a: &AttnVars| [a.wq, a.wk, a.wv, a.wo];
        let ln = |l: &NormVars| [l.gain, l.bias];
        let ffn = |f: &FfnVars| [f.w1, f.b1, f.w2, f.b2];
        let mut out = vec![self.src_embed, self.tgt_embed];
        for l in &self.encoder {
            out.extend(attn(&l.self_attn));
            out.extend(ln(&l.ln1));
            out.extend(ffn(&l.ffn));
            out.extend(ln(&l.ln2));
        }
        for l in &self.decoder {
            out.extend(attn(&l.self_attn));
            out.extend(ln(&l.ln1));
            out.extend(attn(&l.cross_attn));
            out.extend(ln(&l.ln2));
            out.extend(ffn(&l.ffn));
            out.extend(ln(&l.ln3));
        }
        out.push(self.out_proj);
        out.push(self.out_bias);
        out
    }
}
