//! Memory-augmented adapters: retrieval attention over a per-layer memory,
//! fused with the frozen model's activation through a learned gate.
//!
//! At decoder layer `i` the self-attention output `S` reads the target-side
//! memory and the cross-attention output `C` (queried by `L₁`) reads the
//! source-side memory:
//!
//! ```text
//! R = softmax(Q W_q W_kᵀ Kᵀ / T) V W_v
//! λ = sigmoid(relu([A; R] W₁) W₂ + b₂)
//! O = λ A + (1 − λ) R
//! ```
//!
//! A layer or site with no memory items passes `A` through untouched.

mod bottleneck;
mod plugin;

pub use bottleneck::{BottleneckParams, BottleneckSite};
pub use plugin::{Plugin, PluginParams, PluginVars, SiteTraceVars};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, ADAPTER_MAGIC};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_GATE_OFFSET: f64 = 4.0;
const INIT_STD: f64 = 0.02;

/// The two attention sites of a decoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    SelfAttn,
    CrossAttn,
}

impl Site {
    pub const BOTH: [Site; 2] = [Site::SelfAttn, Site::CrossAttn];

    pub fn index(self) -> usize {
        match self {
            Site::SelfAttn => 0,
            Site::CrossAttn => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Site::SelfAttn => "self",
            Site::CrossAttn => "cross",
        }
    }
}

/// How the fusion weight is produced.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Learned,
    /// Constant `λ` at every position.
    Fixed(f64),
}

/// Which memories an adapter reads and how it fuses them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryUsage {
    pub use_source: bool,
    pub use_target: bool,
    pub gate: GateMode,
}

impl Default for MemoryUsage {
    fn default() -> Self {
        Self {
            use_source: true,
            use_target: true,
            gate: GateMode::Learned,
        }
    }
}

/// Weights of one adapter site.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    /// `[2d×d]`
    pub w1: Tensor,
    /// `[d×1]`
    pub w2: Tensor,
}

impl SiteParams {
    const NAMES: [&'static str; 5] = ["wq", "wk", "wv", "w1", "w2"];

    pub fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            wq: Tensor::randn(&[d, d], INIT_STD, rng),
            wk: Tensor::randn(&[d, d], INIT_STD, rng),
            wv: Tensor::zeros(&[d, d]),
            w1: Tensor::randn(&[2 * d, d], INIT_STD, rng),
            w2: Tensor::randn(&[d, 1], INIT_STD, rng),
        }
    }

    fn refs(&self) -> [&Tensor; 5] {
        [&self.wq, &self.wk, &self.wv, &self.w1, &self.w2]
    }

    fn refs_mut(&mut self) -> [&mut Tensor; 5] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.w1, &mut self.w2]
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> SiteVars {
        SiteVars {
            wq: tape.param(&self.wq, trainable),
            wk: tape.param(&self.wk, trainable),
            wv: tape.param(&self.wv, trainable),
            w1: tape.param(&self.w1, trainable),
            w2: tape.param(&self.w2, trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SiteVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub w1: Var,
    pub w2: Var,
}

impl SiteVars {
    fn all(&self) -> [Var; 5] {
        [self.wq, self.wk, self.wv, self.w1, self.w2]
    }
}

/// Per decoder layer, one [`SiteParams`] for self- and one for cross-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub d: usize,
    pub layers: Vec<[SiteParams; 2]>,
    pub temperature: f64,
    /// Scalar added inside the gate sigmoid.
    pub gate_offset: f64,
}

/// Handles of an [`AdapterParams`] bound on a tape.
#[derive(Clone, Debug)]
pub struct AdapterVars {
    pub layers: Vec<[SiteVars; 2]>,
}

impl AdapterVars {
    pub fn all(&self) -> Vec<Var> {
        self.layers.iter().flatten().flat_map(SiteVars::all).collect()
    }
}

#[derive(Serialize, Deserialize)]
pub(crate) struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

pub(crate) fn manifest(named: &[(String, &Tensor)]) -> Vec<ManifestEntry> {
    named
        .iter()
        .map(|(n, t)| ManifestEntry {
            name: n.clone(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

/// Checks a stored manifest against freshly initialized tensors and fills
/// them from the payload.
pub(crate) fn fill_from_payload(
    stored: &[ManifestEntry],
    expected: &[(String, Vec<usize>)],
    tensors: Vec<&mut Tensor>,
    payload: &[u8],
) -> Result<()> {
    if stored.len() != expected.len()
        || stored
            .iter()
            .zip(expected)
            .any(|(m, (n, s))| m.name != *n || m.shape != *s)
    {
        return Err(Error::Format("adapter manifest does not match its header".into()));
    }
    let total = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let values = container::read_f32s(payload, total)?;
    let mut offset = 0;
    for t in tensors {
        let n = t.len();
        t.data_mut().copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub(crate) enum AdapterHeader {
    Memory {
        d: usize,
        layers: usize,
        temperature: f64,
        gate_offset: f64,
        manifest: Vec<ManifestEntry>,
    },
    Bottleneck {
        d: usize,
        layers: usize,
        bottleneck: usize,
        manifest: Vec<ManifestEntry>,
    },
}

impl AdapterParams {
    /// `W_q, W_k, W₁, W₂ ~ N(0, 0.02²)`, `W_v = 0`, temperature 0.5.
    pub fn init(d: usize, layers: usize, seed: u64, gate_offset: f64) -> Result<Self> {
        if d == 0 || layers == 0 {
            return Err(Error::Config("adapter needs d >= 1 and at least one layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..layers)
            .map(|_| [SiteParams::init(d, &mut rng), SiteParams::init(d, &mut rng)])
            .collect();
        Ok(Self {
            d,
            layers,
            temperature: DEFAULT_TEMPERATURE,
            gate_offset,
        })
    }

    pub fn site(&self, layer: usize, site: Site) -> &SiteParams {
        &self.layers[layer][site.index()]
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for site in Site::BOTH {
                let p = &l[site.index()];
                for (n, t) in SiteParams::NAMES.iter().zip(p.refs()) {
                    out.push((format!("layer{i}.{}.{n}", site.name()), t));
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.iter_mut().flat_map(SiteParams::refs_mut))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> AdapterVars {
        AdapterVars {
            layers: self
                .layers
                .iter()
                .map(|l| [l[0].bind(tape, trainable), l[1].bind(tape, trainable)])
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.named();
        let header = AdapterHeader::Memory {
            d: self.d,
            layers: self.layers.len(),
            temperature: self.temperature,
            gate_offset: self.gate_offset,
            manifest: manifest(&named),
        };
        let payload = container::f32_bytes(named.iter().flat_map(|(_, t)| t.data()));
        container::encode(ADAPTER_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        match PluginParams::from_bytes(bytes)? {
            PluginParams::Memory(p) => Ok(p),
            PluginParams::Bottleneck(_) => Err(Error::Format("file holds a bottleneck adapter".into())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}

/// Trace of one adapter site: gate values and retrieval distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTrace {
    /// One gate value per query position.
    pub lambda: Vec<f64>,
    /// `[n×N]`, one distribution over memory items per query position.
    pub weights: Tensor,
}

impl GateTrace {
    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    pub(crate) fn from_vars(tape: &Tape, t: &SiteTraceVars) -> Self {
        Self {
            lambda: tape.value(t.lambda).data().to_vec(),
            weights: tape
                .retrieval_weights(t.retrieval)
                .expect("trace points at a retrieval node"),
        }
    }
}

/// Retrieval attention plus gated fusion, recorded on `tape`. Returns
/// `anchor` itself when the memory has no rows.
#[allow(clippy::too_many_arguments)]
pub fn memadapt_on_tape(
    tape: &mut Tape,
    site: &SiteVars,
    anchor: Var,
    query: Var,
    keys: Var,
    values: Var,
    temperature: f64,
    gate_offset: f64,
    gate: GateMode,
) -> Result<(Var, Option<SiteTraceVars>)> {
    let (n, d) = (tape.value(anchor).rows(), tape.value(anchor).cols());
    if tape.value(query).shape() != [n, d] || tape.value(keys).cols() != d || tape.value(values).cols() != d {
        return Err(dim_err!(
            "memadapt: anchor {:?}, query {:?}, keys {:?}, values {:?}",
            tape.value(anchor).shape(),
            tape.value(query).shape(),
            tape.value(keys).shape(),
            tape.value(values).shape()
        ));
    }
    if tape.value(keys).rows() == 0 {
        return Ok((anchor, None));
    }
    let qp = tape.matmul(query, site.wq)?;
    let qk = tape.matmul_bt(qp, site.wk)?;
    let retrieval = tape.retrieve(qk, keys, values, temperature)?;
    let r = tape.matmul(retrieval, site.wv)?;
    let lambda = match gate {
        GateMode::Learned => {
            let cat = tape.concat_cols(anchor, r)?;
            let h = tape.matmul(cat, site.w1)?;
            let h = tape.relu(h);
            let g = tape.matmul(h, site.w2)?;
            let g = tape.add_scalar(g, gate_offset);
            tape.sigmoid(g)
        }
        GateMode::Fixed(c) => tape.constant(Tensor::full(&[n, 1], c)),
    };
    let out = tape.lerp(anchor, r, lambda)?;
    Ok((out, Some(SiteTraceVars { lambda, retrieval })))
}

/// Stand-alone adapter evaluation on plain tensors.
pub fn memadapt(
    anchor: &Tensor,
    query: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    site: &SiteParams,
    temperature: f64,
    gate_offset: f64,
) -> Result<(Tensor, GateTrace)> {
    let mut tape = Tape::new();
    let vars = site.bind(&mut tape, false);
    let a = tape.param(anchor, false);
    let q = tape.param(query, false);
    let k = tape.param(keys, false);
    let v = tape.param(values, false);
    let (o, trace) = memadapt_on_tape(&mut tape, &vars, a, q, k, v, temperature, gate_offset, GateMode::Learned)?;
    let trace = match trace {
        Some(t) => GateTrace::from_vars(&tape, &t),
        None => GateTrace {
            lambda: Vec::new(),
            weights: Tensor::zeros(&[anchor.rows(), 0]),
        },
    };
    Ok((tape.value(o).clone(), trace))
}
