use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{manifest, AdapterHeader, Site};
use crate::container::{self, ADAPTER_MAGIC};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Residual down/up projection: `O = A + relu(A·down + b_down)·up + b_up`.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckSite {
    pub down: Tensor,
    pub down_bias: Tensor,
    pub up: Tensor,
    pub up_bias: Tensor,
}

impl BottleneckSite {
    const NAMES: [&'static str; 4] = ["down", "down_bias", "up", "up_bias"];

    fn init(d: usize, b: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            down: Tensor::randn(&[d, b], (1.0 / d as f64).sqrt(), rng),
            down_bias: Tensor::zeros(&[1, b]),
            up: Tensor::zeros(&[b, d]),
            up_bias: Tensor::zeros(&[1, d]),
        }
    }

    fn refs(&self) -> [&Tensor; 4] {
        [&self.down, &self.down_bias, &self.up, &self.up_bias]
    }

    fn refs_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.down, &mut self.down_bias, &mut self.up, &mut self.up_bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BottleneckSiteVars {
    down: Var,
    down_bias: Var,
    up: Var,
    up_bias: Var,
}

/// Bottleneck adapters at both decoder attention sites of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckParams {
    pub d: usize,
    pub bottleneck: usize,
    pub layers: Vec<[BottleneckSite; 2]>,
}

impl BottleneckParams {
    /// Gaussian down-projection, zero up-projection: the identity at init.
    pub fn init(d: usize, layers: usize, bottleneck: usize, seed: u64) -> Result<Self> {
        if d == 0 || layers == 0 || bottleneck == 0 {
            return Err(Error::Config("bottleneck adapter sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..layers)
            .map(|_| {
                [
                    BottleneckSite::init(d, bottleneck, &mut rng),
                    BottleneckSite::init(d, bottleneck, &mut rng),
                ]
            })
            .collect();
        Ok(Self { d, bottleneck, layers })
    }

    /// `sites · L · (2·d·b + d + b)` with two sites per layer.
    pub fn count_formula(d: usize, layers: usize, bottleneck: usize) -> usize {
        2 * layers * (2 * d * bottleneck + d + bottleneck)
    }

    /// Smallest bottleneck width whose parameter count reaches `target`.
    pub fn width_matching(d: usize, layers: usize, target: usize) -> usize {
        (1..)
            .find(|&b| Self::count_formula(d, layers, b) >= target)
            .expect("count grows without bound")
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for site in Site::BOTH {
                for (n, t) in BottleneckSite::NAMES.iter().zip(l[site.index()].refs()) {
                    out.push((format!("layer{i}.{}.{n}", site.name()), t));
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.iter_mut().flat_map(BottleneckSite::refs_mut))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> Vec<[BottleneckSiteVars; 2]> {
        let mut bind = |s: &'a BottleneckSite| BottleneckSiteVars {
            down: tape.param(&s.down, trainable),
            down_bias: tape.param(&s.down_bias, trainable),
            up: tape.param(&s.up, trainable),
            up_bias: tape.param(&s.up_bias, trainable),
        };
        self.layers.iter().map(|l| [bind(&l[0]), bind(&l[1])]).collect()
    }

    pub(crate) fn header(&self) -> AdapterHeader {
        AdapterHeader::Bottleneck {
            d: self.d,
            layers: self.layers.len(),
            bottleneck: self.bottleneck,
            manifest: manifest(&self.named()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = container::f32_bytes(self.named().iter().flat_map(|(_, t)| t.data()));
        container::encode(ADAPTER_MAGIC, &self.header(), &payload)
    }
}

impl BottleneckSiteVars {
    pub fn all(&self) -> [Var; 4] {
        [self.down, self.down_bias, self.up, self.up_bias]
    }

    pub fn apply(&self, tape: &mut Tape, anchor: Var) -> Result<Var> {
        let h = tape.matmul(anchor, self.down)?;
        let h = tape.add_row(h, self.down_bias)?;
        let h = tape.relu(h);
        let u = tape.matmul(h, self.up)?;
        let u = tape.add_row(u, self.up_bias)?;
        tape.add(anchor, u)
    }
}
