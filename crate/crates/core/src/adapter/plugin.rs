use std::path::Path;

use super::bottleneck::BottleneckSiteVars;
use super::{
    fill_from_payload, memadapt_on_tape, AdapterHeader, AdapterParams, AdapterVars, BottleneckParams, GateMode,
    MemoryUsage, Site, SiteVars,
};
use crate::container::{self, ADAPTER_MAGIC};
use crate::error::{dim_err, Error, Result};
use crate::memory::MemoryBank;
use crate::tensor::{Tape, Tensor, Var};

/// Tape handles of one adapter site's gate and retrieval distribution.
#[derive(Clone, Copy, Debug)]
pub struct SiteTraceVars {
    pub lambda: Var,
    pub retrieval: Var,
}

/// Trainable add-on module owned by a training run.
#[derive(Clone, Debug, PartialEq)]
pub enum PluginParams {
    Memory(AdapterParams),
    Bottleneck(BottleneckParams),
}

impl PluginParams {
    pub fn kind(&self) -> &'static str {
        match self {
            PluginParams::Memory(_) => "memory",
            PluginParams::Bottleneck(_) => "bottleneck",
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        match self {
            PluginParams::Memory(p) => p.named(),
            PluginParams::Bottleneck(p) => p.named(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            PluginParams::Memory(p) => p.tensors_mut(),
            PluginParams::Bottleneck(p) => p.tensors_mut(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn quantize(&mut self) {
        for t in self.tensors_mut() {
            container::quantize(t.data_mut());
        }
    }

    /// Borrowed view; `bank` is required by memory adapters and ignored otherwise.
    pub fn view<'a>(&'a self, bank: Option<&'a MemoryBank>, usage: MemoryUsage) -> Result<Plugin<'a>> {
        match self {
            PluginParams::Memory(adapter) => {
                let bank = bank.ok_or_else(|| Error::Contract("memory adapter used without a bank".into()))?;
                Ok(Plugin::Memory { adapter, bank, usage })
            }
            PluginParams::Bottleneck(p) => Ok(Plugin::Bottleneck(p)),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        match self {
            PluginParams::Memory(p) => p.to_bytes(),
            PluginParams::Bottleneck(p) => p.to_bytes(),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload): (AdapterHeader, _) = container::decode(ADAPTER_MAGIC, bytes)?;
        match header {
            AdapterHeader::Memory {
                d,
                layers,
                temperature,
                gate_offset,
                manifest,
            } => {
                if !(temperature > 0.0 && temperature.is_finite()) || !gate_offset.is_finite() {
                    return Err(Error::Format(format!("bad temperature {temperature} or gate offset {gate_offset}")));
                }
                let mut p = AdapterParams::init(d, layers, 0, gate_offset)
                    .map_err(|e| Error::Format(e.to_string()))?;
                p.temperature = temperature;
                let expected = shapes(&p.named());
                fill_from_payload(&manifest, &expected, p.tensors_mut(), payload)?;
                Ok(PluginParams::Memory(p))
            }
            AdapterHeader::Bottleneck {
                d,
                layers,
                bottleneck,
                manifest,
            } => {
                let mut p = BottleneckParams::init(d, layers, bottleneck, 0)
                    .map_err(|e| Error::Format(e.to_string()))?;
                let expected = shapes(&p.named());
                fill_from_payload(&manifest, &expected, p.tensors_mut(), payload)?;
                Ok(PluginParams::Bottleneck(p))
            }
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

fn shapes(named: &[(String, &Tensor)]) -> Vec<(String, Vec<usize>)> {
    named.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect()
}

/// What the decoder consults at its adapter sites.
#[derive(Clone, Copy, Debug)]
pub enum Plugin<'a> {
    None,
    Memory {
        adapter: &'a AdapterParams,
        bank: &'a MemoryBank,
        usage: MemoryUsage,
    },
    Bottleneck(&'a BottleneckParams),
}

#[derive(Clone, Copy, Debug)]
struct MemorySite {
    vars: SiteVars,
    memory: Var,
}

#[derive(Clone, Debug)]
pub struct MemoryPluginVars {
    sites: Vec<[Option<MemorySite>; 2]>,
    temperature: f64,
    gate_offset: f64,
    gate: GateMode,
}

/// A [`Plugin`] bound onto a tape.
#[derive(Clone, Debug)]
pub enum PluginVars {
    None,
    Memory(MemoryPluginVars),
    Bottleneck(Vec<[BottleneckSiteVars; 2]>),
}

impl PluginVars {
    /// Binds `bank` as constants next to already bound adapter weights.
    /// Sites whose memory is empty or disabled by `usage` pass through.
    pub fn memory<'a>(
        tape: &mut Tape<'a>,
        adapter: &AdapterParams,
        vars: &AdapterVars,
        bank: &'a MemoryBank,
        usage: MemoryUsage,
    ) -> Result<Self> {
        bank.check_compatible(adapter.d, adapter.layers.len())?;
        let sites = bank
            .layers()
            .iter()
            .zip(&vars.layers)
            .map(|(layer, v)| {
                let mut pick = |enabled: bool, items: &'a Tensor, site: Site| {
                    (enabled && items.rows() > 0).then(|| MemorySite {
                        vars: v[site.index()],
                        memory: tape.param(items, false),
                    })
                };
                [
                    pick(usage.use_target, &layer.target, Site::SelfAttn),
                    pick(usage.use_source, &layer.source, Site::CrossAttn),
                ]
            })
            .collect();
        Ok(PluginVars::Memory(MemoryPluginVars {
            sites,
            temperature: adapter.temperature,
            gate_offset: adapter.gate_offset,
            gate: usage.gate,
        }))
    }

    /// Output of the adapter at `(layer, site)` for the given anchor and query.
    pub fn apply(
        &self,
        tape: &mut Tape,
        layer: usize,
        site: Site,
        anchor: Var,
        query: Var,
    ) -> Result<(Var, Option<SiteTraceVars>)> {
        match self {
            PluginVars::None => Ok((anchor, None)),
            PluginVars::Memory(m) => {
                let slot = m
                    .sites
                    .get(layer)
                    .ok_or_else(|| dim_err!("no adapter for decoder layer {layer}"))?;
                match slot[site.index()] {
                    None => Ok((anchor, None)),
                    Some(s) => memadapt_on_tape(
                        tape,
                        &s.vars,
                        anchor,
                        query,
                        s.memory,
                        s.memory,
                        m.temperature,
                        m.gate_offset,
                        m.gate,
                    ),
                }
            }
            PluginVars::Bottleneck(layers) => {
                let l = layers
                    .get(layer)
                    .ok_or_else(|| dim_err!("no adapter for decoder layer {layer}"))?;
                Ok((l[site.index()].apply(tape, anchor)?, None))
            }
        }
    }
}

impl<'a> Plugin<'a> {
    /// Binds the plugin; the second value lists its weight handles in
    /// `tensors_mut` order.
    pub fn bind(&self, tape: &mut Tape<'a>, trainable: bool) -> Result<(PluginVars, Vec<Var>)> {
        match *self {
            Plugin::None => Ok((PluginVars::None, Vec::new())),
            Plugin::Memory { adapter, bank, usage } => {
                let vars = adapter.bind(tape, trainable);
                let all = vars.all();
                Ok((PluginVars::memory(tape, adapter, &vars, bank, usage)?, all))
            }
            Plugin::Bottleneck(p) => {
                let vars = p.bind(tape, trainable);
                let all = vars.iter().flatten().flat_map(|s| s.all()).collect();
                Ok((PluginVars::Bottleneck(vars), all))
            }
        }
    }

    /// Errors unless the plugin fits a decoder of width `d` with `layers` layers.
    pub fn check(&self, d: usize, layers: usize) -> Result<()> {
        let (pd, pl) = match *self {
            Plugin::None => return Ok(()),
            Plugin::Memory { adapter, bank, .. } => {
                bank.check_compatible(d, layers)?;
                (adapter.d, adapter.layers.len())
            }
            Plugin::Bottleneck(p) => (p.d, p.layers.len()),
        };
        if pd != d || pl != layers {
            return Err(dim_err!("plugin has d={pd} and {pl} layers, model has d={d} and {layers} layers"));
        }
        Ok(())
    }
}
