//! Token-level nearest-neighbor datastore and interpolated decoding.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::Plugin;
use crate::container::{self, DATASTORE_MAGIC};
use crate::error::{dim_err, Error, Result};
use crate::nmt::{beam_search, decode_batch, encode_batch, BeamConfig, Batch, Decoder, Noise, Pair, TransformerParams, PAD};
use crate::par;
use crate::tensor::{Tape, Tensor};

/// Keys are final decoder states, values the gold next tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Datastore {
    keys: Tensor,
    values: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnConfig {
    pub k: usize,
    /// Softmax temperature over negative squared distances.
    pub temperature: f64,
    /// Weight of the retrieved distribution.
    pub lambda: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 8,
            temperature: 10.0,
            lambda: 0.5,
        }
    }
}

impl KnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || !(self.temperature > 0.0) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("invalid kNN config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct DatastoreHeader {
    n: usize,
    d: usize,
}

const BUILD_CHUNK: usize = 32;

impl Datastore {
    pub fn new(keys: Tensor, values: Vec<u32>) -> Result<Self> {
        if keys.shape().len() != 2 || keys.rows() != values.len() {
            return Err(dim_err!("datastore: keys {:?} for {} values", keys.shape(), values.len()));
        }
        Ok(Self { keys, values })
    }

    /// One entry per target position (EOS included) under teacher forcing.
    pub fn build(model: &TransformerParams, plugin: &Plugin, pairs: &[Pair]) -> Result<Self> {
        plugin.check(model.config.d_model, model.config.layers)?;
        let d = model.config.d_model;
        let chunks: Vec<&[Pair]> = pairs.chunks(BUILD_CHUNK).collect();
        let parts = par::map(&chunks, |chunk| -> Result<(Vec<f64>, Vec<u32>)> {
            let batch = Batch::from_pairs(chunk.iter());
            let mut tape = Tape::new();
            let mv = model.bind(&mut tape, false);
            let (pv, _) = plugin.bind(&mut tape, false)?;
            let mut noise = Noise::off();
            let enc = encode_batch(&mut tape, &mv, &model.config, &batch.src_refs(), &mut noise)?;
            let src_of: Vec<usize> = (0..batch.len()).collect();
            let dec = decode_batch(&mut tape, &mv, &model.config, &enc, &batch.tgt_refs(), &src_of, &pv, &mut noise)?;
            let states = tape.value(dec.final_state());
            let mut keys = Vec::new();
            let mut values = Vec::new();
            for (r, t) in batch.targets().into_iter().enumerate() {
                if t != PAD {
                    keys.extend_from_slice(states.row(r));
                    values.push(t);
                }
            }
            Ok((keys, values))
        });
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for p in parts {
            let (k, v) = p?;
            keys.extend(k);
            values.extend(v);
        }
        Self::new(Tensor::new(vec![values.len(), d], keys)?, values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn d(&self) -> usize {
        self.keys.cols()
    }

    pub fn keys(&self) -> &Tensor {
        &self.keys
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    /// Indices and squared distances of the `k` nearest keys, nearest first;
    /// equal distances go to the lower index.
    pub fn nearest(&self, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if self.is_empty() {
            return Err(Error::Contract("query against an empty datastore".into()));
        }
        if query.len() != self.d() {
            return Err(dim_err!("query width {} vs datastore width {}", query.len(), self.d()));
        }
        let mut dist: Vec<(usize, f64)> = (0..self.len())
            .map(|i| {
                let d2 = self.keys.row(i).iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
                (i, d2)
            })
            .collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0));
        let k = k.min(dist.len());
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, cmp);
            dist.truncate(k);
        }
        dist.sort_by(cmp);
        Ok(dist)
    }

    /// Retrieved next-token distribution over a vocabulary of `vocab` ids.
    pub fn probability(&self, query: &[f64], cfg: &KnnConfig, vocab: usize) -> Result<Vec<f64>> {
        let nn = self.nearest(query, cfg.k)?;
        let mut logits: Vec<f64> = nn.iter().map(|&(_, d)| -d / cfg.temperature).collect();
        crate::tensor::softmax_in_place(&mut logits);
        let mut p = vec![0.0; vocab];
        for (&(i, _), w) in nn.iter().zip(logits) {
            let t = self.values[i] as usize;
            if t >= vocab {
                return Err(dim_err!("datastore token {t} outside vocabulary of {vocab}"));
            }
            p[t] += w;
        }
        Ok(p)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = DatastoreHeader {
            n: self.len(),
            d: self.d(),
        };
        let mut payload = container::f32_bytes(self.keys.data());
        payload.extend(self.values.iter().flat_map(|v| v.to_le_bytes()));
        container::encode(DATASTORE_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (DatastoreHeader, _) = container::decode(DATASTORE_MAGIC, bytes)?;
        let key_bytes = h.n * h.d * 4;
        if payload.len() != key_bytes + h.n * 4 {
            return Err(Error::Format(format!(
                "datastore payload holds {} bytes, expected {}",
                payload.len(),
                key_bytes + h.n * 4
            )));
        }
        let keys = container::read_f32s(&payload[..key_bytes], h.n * h.d)?;
        let values = payload[key_bytes..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(Tensor::new(vec![h.n, h.d], keys)?, values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}

/// `λ · p_knn + (1 − λ) · p_model`.
pub fn interpolate(p_model: &[f64], p_knn: &[f64], lambda: f64) -> Vec<f64> {
    p_model
        .iter()
        .zip(p_knn)
        .map(|(m, k)| lambda * k + (1.0 - lambda) * m)
        .collect()
}

/// Beam search over the interpolated distribution. With `λ = 0` the model's
/// own log-probabilities are used unchanged.
pub fn decode_with_knn(
    x: &[u32],
    model: &TransformerParams,
    plugin: Plugin,
    ds: &Datastore,
    cfg: &KnnConfig,
    beam: &BeamConfig,
) -> Result<Vec<u32>> {
    cfg.validate()?;
    let dec = Decoder::new(x, model, plugin)?;
    let vocab = model.config.tgt_vocab;
    beam_search(beam, |prefixes| {
        let out = dec.step(prefixes)?;
        if cfg.lambda == 0.0 {
            return Ok(out.log_probs);
        }
        out.log_probs
            .iter()
            .zip(&out.states)
            .map(|(lp, state)| {
                let pm: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
                let pk = ds.probability(state, cfg, vocab)?;
                Ok(interpolate(&pm, &pk, cfg.lambda).into_iter().map(f64::ln).collect())
            })
            .collect()
    })
}
