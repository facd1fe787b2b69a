use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{decode_batch, encode_batch, nll_on_tape, project, Noise};
use super::model::TransformerParams;
use super::vocab::{Pair, BOS, EOS};
use crate::adapter::PluginVars;
use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, InverseSqrtSchedule, Tape, Tensor};

/// Optimization settings for training the base model from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub warmup: usize,
    pub max_lr: f64,
    pub batch_tokens: usize,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            warmup: 200,
            max_lr: 7e-4,
            batch_tokens: 512,
            label_smoothing: 0.1,
            dropout: 0.1,
            seed: 0,
        }
    }
}

/// Model-ready sequences: source + EOS, BOS + target, target + EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub src: Vec<Vec<u32>>,
    pub tgt_in: Vec<Vec<u32>>,
    pub tgt_out: Vec<Vec<u32>>,
}

impl Batch {
    pub fn from_pairs<'p>(pairs: impl IntoIterator<Item = &'p Pair>) -> Self {
        let mut b = Batch {
            src: Vec::new(),
            tgt_in: Vec::new(),
            tgt_out: Vec::new(),
        };
        for p in pairs {
            b.src.push(p.src.iter().copied().chain([EOS]).collect());
            b.tgt_in.push([BOS].into_iter().chain(p.tgt.iter().copied()).collect());
            b.tgt_out.push(p.tgt.iter().copied().chain([EOS]).collect());
        }
        b
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn src_refs(&self) -> Vec<&[u32]> {
        self.src.iter().map(Vec::as_slice).collect()
    }

    pub fn tgt_refs(&self) -> Vec<&[u32]> {
        self.tgt_in.iter().map(Vec::as_slice).collect()
    }

    /// All output targets, concatenated in row order.
    pub fn targets(&self) -> Vec<u32> {
        self.tgt_out.iter().flatten().copied().collect()
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().map(Vec::len).sum()
    }
}

/// Shuffles `pairs` and packs them greedily into batches of at most
/// `batch_tokens` target tokens (a single longer pair forms its own batch).
pub fn make_batches(pairs: &[Pair], batch_tokens: usize, rng: &mut ChaCha8Rng) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    let mut current: Vec<&Pair> = Vec::new();
    let mut tokens = 0;
    for i in order {
        let n = pairs[i].tgt.len() + 1;
        if !current.is_empty() && tokens + n > batch_tokens {
            batches.push(Batch::from_pairs(current.drain(..)));
            tokens = 0;
        }
        current.push(&pairs[i]);
        tokens += n;
    }
    if !current.is_empty() {
        batches.push(Batch::from_pairs(current));
    }
    batches
}

/// Cycles over freshly shuffled epochs of batches.
pub(crate) struct BatchStream<'p> {
    pairs: &'p [Pair],
    batch_tokens: usize,
    rng: ChaCha8Rng,
    queue: std::vec::IntoIter<Batch>,
}

impl<'p> BatchStream<'p> {
    pub fn new(pairs: &'p [Pair], batch_tokens: usize, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Contract("training corpus is empty".into()));
        }
        Ok(Self {
            pairs,
            batch_tokens,
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: Vec::new().into_iter(),
        })
    }

    pub fn next_batch(&mut self) -> Batch {
        match self.queue.next() {
            Some(b) => b,
            None => {
                self.queue = make_batches(self.pairs, self.batch_tokens, &mut self.rng).into_iter();
                self.queue.next().expect("non-empty corpus yields a batch")
            }
        }
    }
}

/// Trains every base-model tensor with label-smoothed cross-entropy and
/// returns the per-step loss.
pub fn train_base(params: &mut TransformerParams, pairs: &[Pair], cfg: &BaseTrainConfig) -> Result<Vec<f64>> {
    if params.frozen {
        return Err(Error::Contract("cannot train a frozen model".into()));
    }
    if cfg.steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    let mut stream = BatchStream::new(pairs, cfg.batch_tokens, cfg.seed)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let schedule = InverseSqrtSchedule {
        max_lr: cfg.max_lr,
        warmup: cfg.warmup as u64,
    };
    let mut adam = AdamState::new(params.named().into_iter().map(|(_, t)| t), AdamConfig::default());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = stream.next_batch();
        let (loss, grads) = {
            let mut tape = Tape::new();
            let mv = params.bind(&mut tape, true);
            let mut noise = Noise::new(cfg.dropout, &mut noise_rng);
            let src_of: Vec<usize> = (0..batch.len()).collect();
            let enc = encode_batch(&mut tape, &mv, &params.config, &batch.src_refs(), &mut noise)?;
            let dec = decode_batch(
                &mut tape,
                &mv,
                &params.config,
                &enc,
                &batch.tgt_refs(),
                &src_of,
                &PluginVars::None,
                &mut noise,
            )?;
            let logits = project(&mut tape, &mv, dec.final_state())?;
            let (loss, _) = nll_on_tape(&mut tape, logits, &batch.targets(), cfg.label_smoothing)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("base loss {value}"),
                });
            }
            let g = tape.backward(loss)?;
            let grads: Vec<Option<Tensor>> = mv.all().into_iter().map(|v| g.get(v).cloned()).collect();
            (value, grads)
        };
        let refs: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
        adam.step(&mut params.tensors_mut(), &refs, schedule.lr(step as u64))?;
        losses.push(loss);
        if step % 100 == 0 {
            log::debug!("base step {step}: loss {loss:.4}");
        }
    }
    Ok(losses)
}
