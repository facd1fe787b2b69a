use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, BANK_MAGIC};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// A target-language phrase and its source-language counterpart.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhrasePair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    /// Decoder layer that stores this pair.
    pub layer: usize,
}

impl PhrasePair {
    pub fn target_len(&self) -> usize {
        self.target.len()
    }
}

/// Memory items of one decoder layer. Row `j` of `source` and `target` both
/// come from `pairs[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BankLayer {
    pub source: Tensor,
    pub target: Tensor,
    pub pairs: Vec<PhrasePair>,
}

impl BankLayer {
    pub fn empty(d: usize) -> Self {
        Self {
            source: Tensor::zeros(&[0, d]),
            target: Tensor::zeros(&[0, d]),
            pairs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Per-layer paired source/target memory matrices. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    d: usize,
    layers: Vec<BankLayer>,
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    layers: usize,
    d: usize,
    counts: Vec<usize>,
    pairs: Vec<Vec<(Vec<u32>, Vec<u32>)>>,
}

impl MemoryBank {
    pub fn new(d: usize, layers: Vec<BankLayer>) -> Result<Self> {
        if d == 0 || layers.is_empty() {
            return Err(Error::Config("a bank needs d >= 1 and at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            let n = l.pairs.len();
            for (name, m) in [("source", &l.source), ("target", &l.target)] {
                if m.shape() != [n, d] {
                    return Err(dim_err!(
                        "layer {i} {name} items {:?}, expected [{n}, {d}]",
                        m.shape()
                    ));
                }
                if !m.is_finite() {
                    return Err(Error::NonFinite(format!("layer {i} {name} items")));
                }
            }
            if let Some(p) = l.pairs.iter().find(|p| p.layer != i) {
                return Err(Error::Contract(format!("pair assigned to layer {} stored at layer {i}", p.layer)));
            }
        }
        Ok(Self { d, layers })
    }

    pub fn empty(d: usize, layers: usize) -> Self {
        Self {
            d,
            layers: (0..layers).map(|_| BankLayer::empty(d)).collect(),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[BankLayer] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &BankLayer {
        &self.layers[i]
    }

    /// Total item count over all layers.
    pub fn len(&self) -> usize {
        self.layers.iter().map(BankLayer::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Errors unless the bank matches a model of width `d` with `layers` decoder layers.
    pub fn check_compatible(&self, d: usize, layers: usize) -> Result<()> {
        if self.d != d || self.layers.len() != layers {
            return Err(dim_err!(
                "bank has d={} and {} layers, model has d={d} and {layers} layers",
                self.d,
                self.layers.len()
            ));
        }
        Ok(())
    }

    /// A new bank keeping item `j` of layer `i` when `keep[i][j]`.
    pub fn retain(&self, keep: &[Vec<bool>]) -> Result<Self> {
        if keep.len() != self.layers.len()
            || keep.iter().zip(&self.layers).any(|(k, l)| k.len() != l.len())
        {
            return Err(dim_err!("retain mask does not match bank layout"));
        }
        let layers = self
            .layers
            .iter()
            .zip(keep)
            .map(|(l, k)| {
                if k.iter().all(|&b| b) {
                    return l.clone();
                }
                let idx: Vec<usize> = (0..l.len()).filter(|&j| k[j]).collect();
                BankLayer {
                    source: l.source.select_rows(&idx),
                    target: l.target.select_rows(&idx),
                    pairs: idx.iter().map(|&j| l.pairs[j].clone()).collect(),
                }
            })
            .collect();
        Ok(Self { d: self.d, layers })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = BankHeader {
            layers: self.layers.len(),
            d: self.d,
            counts: self.layers.iter().map(BankLayer::len).collect(),
            pairs: self
                .layers
                .iter()
                .map(|l| l.pairs.iter().map(|p| (p.source.clone(), p.target.clone())).collect())
                .collect(),
        };
        let payload = container::f32_bytes(
            self.layers
                .iter()
                .flat_map(|l| l.source.data().iter().chain(l.target.data())),
        );
        container::encode(BANK_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (BankHeader, _) = container::decode(BANK_MAGIC, bytes)?;
        if h.d == 0 || h.layers == 0 || h.counts.len() != h.layers || h.pairs.len() != h.layers {
            return Err(Error::Format("bank header layer counts are inconsistent".into()));
        }
        if h.pairs.iter().zip(&h.counts).any(|(p, &c)| p.len() != c) {
            return Err(Error::Format("bank manifest does not match item counts".into()));
        }
        let total: usize = h.counts.iter().sum::<usize>() * 2 * h.d;
        let values = container::read_f32s(payload, total)?;
        let mut offset = 0;
        let mut take = |n: usize| -> Result<Tensor> {
            let t = Tensor::new(vec![n, h.d], values[offset..offset + n * h.d].to_vec())?;
            offset += n * h.d;
            Ok(t)
        };
        let mut layers = Vec::with_capacity(h.layers);
        for (i, (pairs, &n)) in h.pairs.into_iter().zip(&h.counts).enumerate() {
            let source = take(n)?;
            let target = take(n)?;
            let pairs = pairs
                .into_iter()
                .map(|(source, target)| PhrasePair { source, target, layer: i })
                .collect();
            layers.push(BankLayer { source, target, pairs });
        }
        Self::new(h.d, layers).map_err(|e| Error::Format(format!("invalid bank: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}
