use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bank::{BankLayer, MemoryBank, PhrasePair};
use crate::adapter::PluginVars;
use crate::error::{Error, Result};
use crate::nmt::{
    decode_batch, encode_batch, translate, BeamConfig, Noise, TransformerParams, Vocab, BOS, EOS, PAD,
};
use crate::par;
use crate::tensor::{Tape, Tensor};

/// Pairs each target phrase with the output of `back_translate`; phrases
/// whose translation is empty are dropped. Order follows the input.
pub fn pair_phrases_with<F>(target_phrases: &[Vec<u32>], back_translate: F) -> Result<Vec<PhrasePair>>
where
    F: Fn(&[u32]) -> Result<Vec<u32>> + Sync,
{
    let sources = par::map(target_phrases, |p| back_translate(p));
    let mut out = Vec::with_capacity(target_phrases.len());
    for (target, source) in target_phrases.iter().zip(sources) {
        let source = source?;
        if !source.is_empty() {
            out.push(PhrasePair {
                source,
                target: target.clone(),
                layer: 0,
            });
        }
    }
    Ok(out)
}

/// Back-translates target phrases with a target→source model.
pub fn pair_phrases(
    target_phrases: &[Vec<u32>],
    reverse_model: &TransformerParams,
    beam: &BeamConfig,
) -> Result<Vec<PhrasePair>> {
    pair_phrases_with(target_phrases, |p| {
        let x: Vec<u32> = p.iter().copied().chain([EOS]).collect();
        translate(&x, reverse_model, crate::adapter::Plugin::None, beam)
    })
}

/// Order in which length-sorted groups are handed to decoder layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionStrategy {
    ShortToLong,
    LongToShort,
    Random(u64),
}

/// Assigns pairs to decoder layers.
///
/// Pairs are sorted by target length, then by target string. `Random`
/// shuffles the sorted list with its seed. The list is cut into
/// `layers.len()` contiguous groups whose sizes differ by at most one, the
/// larger groups first. Group `g` goes to `layers[g]` (`LongToShort`:
/// `layers[k − 1 − g]`).
pub fn partition_phrases(
    mut pairs: Vec<PhrasePair>,
    tgt_vocab: &Vocab,
    layers: &[usize],
    strategy: PartitionStrategy,
) -> Result<Vec<PhrasePair>> {
    if layers.is_empty() {
        return Err(Error::Config("partition needs at least one layer".into()));
    }
    let mut sorted_layers = layers.to_vec();
    sorted_layers.sort_unstable();
    sorted_layers.dedup();
    if sorted_layers.len() != layers.len() {
        return Err(Error::Config(format!("duplicate layer in {layers:?}")));
    }
    pairs.sort_by_cached_key(|p| (p.target.len(), tgt_vocab.detokenize(&p.target)));
    if let PartitionStrategy::Random(seed) = strategy {
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let k = layers.len();
    let (base, extra) = (pairs.len() / k, pairs.len() % k);
    let mut out = Vec::with_capacity(pairs.len());
    let mut iter = pairs.into_iter();
    for g in 0..k {
        let size = base + usize::from(g < extra);
        let layer = match strategy {
            PartitionStrategy::LongToShort => layers[k - 1 - g],
            _ => layers[g],
        };
        out.extend(iter.by_ref().take(size).map(|mut p| {
            p.layer = layer;
            p
        }));
    }
    Ok(out)
}

const BUILD_CHUNK: usize = 64;

fn is_content(t: u32) -> bool {
    t != PAD && t != BOS && t != EOS
}

/// Source item: mean of the encoder rows of the phrase's source tokens.
/// Target item: mean of the layer's self-attention rows of its target tokens.
/// Both come from one teacher-forced pass over `(source + EOS, BOS + target)`.
/// Returns the bank and the number of pairs that had to be skipped.
pub fn build_memory(pairs: &[PhrasePair], model: &TransformerParams) -> Result<(MemoryBank, usize)> {
    let cfg = &model.config;
    let (d, num_layers) = (cfg.d_model, cfg.layers);
    if let Some(p) = pairs.iter().find(|p| p.layer >= num_layers) {
        return Err(Error::Config(format!("pair assigned to layer {} of {num_layers}", p.layer)));
    }
    let chunks: Vec<&[PhrasePair]> = pairs.chunks(BUILD_CHUNK).collect();
    let items = par::map(&chunks, |chunk| encode_chunk(chunk, model));
    let mut layers: Vec<(Vec<f64>, Vec<f64>, Vec<PhrasePair>)> =
        (0..num_layers).map(|_| (Vec::new(), Vec::new(), Vec::new())).collect();
    let mut skipped = 0;
    for (chunk, result) in chunks.iter().zip(items) {
        for (pair, item) in chunk.iter().zip(result?) {
            match item {
                Some((s, t)) => {
                    let l = &mut layers[pair.layer];
                    l.0.extend(s);
                    l.1.extend(t);
                    l.2.push(pair.clone());
                }
                None => skipped += 1,
            }
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} phrase pairs skipped while building memory");
    }
    let layers = layers
        .into_iter()
        .map(|(s, t, p)| {
            let n = p.len();
            Ok(BankLayer {
                source: Tensor::new(vec![n, d], s)?,
                target: Tensor::new(vec![n, d], t)?,
                pairs: p,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((MemoryBank::new(d, layers)?, skipped))
}

type Item = Option<(Vec<f64>, Vec<f64>)>;

fn encode_chunk(chunk: &[PhrasePair], model: &TransformerParams) -> Result<Vec<Item>> {
    let valid = |p: &PhrasePair| {
        p.source.iter().any(|&t| is_content(t))
            && p.target.iter().any(|&t| is_content(t))
            && p.source.iter().all(|&t| (t as usize) < model.config.src_vocab)
            && p.target.iter().all(|&t| (t as usize) < model.config.tgt_vocab)
    };
    let kept: Vec<&PhrasePair> = chunk.iter().filter(|p| valid(p)).collect();
    let mut out: Vec<Item> = vec![None; chunk.len()];
    if kept.is_empty() {
        return Ok(out);
    }
    let srcs: Vec<Vec<u32>> = kept.iter().map(|p| p.source.iter().copied().chain([EOS]).collect()).collect();
    let tgts: Vec<Vec<u32>> = kept.iter().map(|p| [BOS].into_iter().chain(p.target.iter().copied()).collect()).collect();
    let src_refs: Vec<&[u32]> = srcs.iter().map(Vec::as_slice).collect();
    let tgt_refs: Vec<&[u32]> = tgts.iter().map(Vec::as_slice).collect();
    let mut tape = Tape::new();
    let mv = model.bind(&mut tape, false);
    let mut noise = Noise::off();
    let enc = encode_batch(&mut tape, &mv, &model.config, &src_refs, &mut noise)?;
    let src_of: Vec<usize> = (0..kept.len()).collect();
    let dec = decode_batch(&mut tape, &mv, &model.config, &enc, &tgt_refs, &src_of, &PluginVars::None, &mut noise)?;
    let e = tape.value(enc.states);
    let mut k = 0;
    for (slot, pair) in out.iter_mut().zip(chunk) {
        if !valid(pair) {
            continue;
        }
        let (s0, _) = enc.spans[k];
        let (t0, _) = dec.spans[k];
        let src_rows: Vec<usize> = srcs[k]
            .iter()
            .enumerate()
            .filter(|(_, &t)| is_content(t))
            .map(|(j, _)| s0 + j)
            .collect();
        let tgt_rows: Vec<usize> = tgts[k]
            .iter()
            .enumerate()
            .filter(|(_, &t)| is_content(t))
            .map(|(j, _)| t0 + j)
            .collect();
        let s_layer = tape.value(dec.layers[pair.layer].s);
        let item = (e.mean_rows(&src_rows)?, s_layer.mean_rows(&tgt_rows)?);
        if item.0.iter().chain(&item.1).all(|x| x.is_finite()) {
            *slot = Some(item);
        }
        k += 1;
    }
    Ok(out)
}
