//! Config-driven pipeline: data → base models → memory → plugins → decode → score.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use memplug::adapter::{AdapterParams, BottleneckParams, MemoryUsage, Plugin, PluginParams, DEFAULT_GATE_OFFSET};
use memplug::error::{Error, Result};
use memplug::knn::{decode_with_knn, Datastore, KnnConfig};
use memplug::memory::{
    build_memory, pair_phrases, parse_tree, partition_phrases, MemoryBank, PartitionStrategy, PhrasePair, PhraseSet,
};
use memplug::nmt::{train_base, translate, BaseTrainConfig, BeamConfig, Pair, TransformerConfig, TransformerParams, EOS};
use memplug::par;
use memplug::trainer::{evaluate_nll, train_adapters, LossConfig, TrainConfig, TrainLog};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::metrics::{bleu, style_marker_accuracy};
use crate::synth::{self, Corpora, SyntheticTaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Vanilla,
    Bottleneck,
    Memory,
    MemoryKnn,
}

impl System {
    pub fn name(self) -> &'static str {
        match self {
            System::Vanilla => "vanilla",
            System::Bottleneck => "bottleneck",
            System::Memory => "memory",
            System::MemoryKnn => "memory_knn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            d_model: 32,
            layers: 2,
            heads: 2,
            ffn: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryConfig {
    pub l_max: usize,
    /// Parses of the first this many customization sentences feed the memory.
    pub sentences: usize,
    pub strategy: PartitionStrategy,
    /// Decoder layers that receive phrases; `None` means all.
    pub layers: Option<Vec<usize>>,
    /// Keep only phrases of this target length.
    pub only_len: Option<usize>,
    /// Beam width for back-translating phrases.
    pub pair_beam: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            l_max: 6,
            sentences: 150,
            strategy: PartitionStrategy::ShortToLong,
            layers: None,
            only_len: None,
            pair_beam: 2,
        }
    }
}

/// Existing artifacts to load instead of building.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Artifacts {
    pub data_dir: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub reverse: Option<PathBuf>,
    pub bank: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: SyntheticTaskSpec,
    pub model: ModelShape,
    pub base_train: BaseTrainConfig,
    pub reverse_train: BaseTrainConfig,
    pub memory: MemoryConfig,
    pub adapter_train: TrainConfig,
    pub loss: LossConfig,
    pub usage: MemoryUsage,
    pub gate_offset: f64,
    pub knn: KnnConfig,
    /// Candidate interpolation weights; the one with the best validation
    /// style accuracy (ties: smaller λ) is used on the test set.
    pub knn_lambdas: Vec<f64>,
    pub beam_size: usize,
    /// Output length limit beyond the source length.
    pub max_len_extra: usize,
    pub seeds: Vec<u64>,
    pub systems: Vec<System>,
    pub artifacts: Artifacts,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: SyntheticTaskSpec::default(),
            model: ModelShape::default(),
            base_train: BaseTrainConfig {
                steps: 1500,
                warmup: 150,
                max_lr: 2e-3,
                batch_tokens: 512,
                label_smoothing: 0.1,
                dropout: 0.1,
                seed: 11,
            },
            reverse_train: BaseTrainConfig {
                steps: 1500,
                warmup: 150,
                max_lr: 2e-3,
                batch_tokens: 512,
                label_smoothing: 0.1,
                dropout: 0.1,
                seed: 12,
            },
            memory: MemoryConfig::default(),
            // Both plugins share this rate; the library default converges too slowly in 1000 steps.
            adapter_train: TrainConfig {
                max_lr: 3e-3,
                ..TrainConfig::default()
            },
            loss: LossConfig::default(),
            usage: MemoryUsage::default(),
            gate_offset: DEFAULT_GATE_OFFSET,
            knn: KnnConfig::default(),
            knn_lambdas: vec![0.0, 0.25, 0.5],
            beam_size: 4,
            max_len_extra: 5,
            seeds: vec![1, 2, 3],
            systems: vec![System::Vanilla, System::Bottleneck, System::Memory, System::MemoryKnn],
            artifacts: Artifacts::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = synth::read_text(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.adapter_train.validate()?;
        self.loss.validate()?;
        self.knn.validate()?;
        if self.seeds.is_empty() || self.systems.is_empty() {
            return Err(Error::Config("need at least one seed and one system".into()));
        }
        if self.beam_size == 0 || self.memory.l_max == 0 || self.memory.pair_beam == 0 {
            return Err(Error::Config("beam sizes and l_max must be positive".into()));
        }
        if self.knn_lambdas.is_empty() || self.knn_lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Config(format!("kNN lambdas {:?} must be non-empty and in [0, 1]", self.knn_lambdas)));
        }
        if let Some(layers) = &self.memory.layers {
            if layers.is_empty() || layers.iter().any(|&l| l >= self.model.layers) {
                return Err(Error::Config(format!("memory layers {layers:?} for {} layers", self.model.layers)));
            }
        }
        self.transformer_config(0, 0).validate()
    }

    pub fn transformer_config(&self, src_vocab: usize, tgt_vocab: usize) -> TransformerConfig {
        TransformerConfig {
            d_model: self.model.d_model,
            layers: self.model.layers,
            heads: self.model.heads,
            ffn: self.model.ffn,
            src_vocab: src_vocab.max(1),
            tgt_vocab: tgt_vocab.max(1),
        }
    }

    pub fn beam_for(&self, src_len: usize) -> BeamConfig {
        BeamConfig::new(self.beam_size, src_len + self.max_len_extra)
    }

    pub fn memory_layers(&self) -> Vec<usize> {
        self.memory.layers.clone().unwrap_or_else(|| (0..self.model.layers).collect())
    }
}

/// Shared inputs of every run: data, the frozen base model, and the
/// back-translated (not yet partitioned) phrase pairs.
pub struct Prepared {
    pub corpora: Corpora,
    pub base: TransformerParams,
    pub phrase_pairs: Vec<PhrasePair>,
}

fn swap(pairs: &[Pair]) -> Vec<Pair> {
    pairs
        .iter()
        .map(|p| Pair {
            src: p.tgt.clone(),
            tgt: p.src.clone(),
        })
        .collect()
}

fn load_or_train(
    path: Option<&PathBuf>,
    cfg: TransformerConfig,
    pairs: &[Pair],
    train: &BaseTrainConfig,
) -> Result<TransformerParams> {
    if let Some(p) = path {
        let m = TransformerParams::load(p)?;
        if m.config != cfg {
            return Err(Error::Config(format!("{} has config {:?}, expected {cfg:?}", p.display(), m.config)));
        }
        return Ok(m);
    }
    let mut m = TransformerParams::init(cfg, train.seed)?;
    train_base(&mut m, pairs, train)?;
    m.quantize();
    m.frozen = true;
    Ok(m)
}

/// Target phrases of the memory sentences, up to `l_max` tokens.
pub fn collect_phrases(corpora: &Corpora, mem: &MemoryConfig) -> Result<Vec<Vec<u32>>> {
    let mut set = PhraseSet::new();
    for (i, parse) in corpora.parses.iter().take(mem.sentences).enumerate() {
        set.add_tree(&parse_tree(parse, i + 1)?, mem.l_max);
    }
    Ok(set
        .into_phrases()
        .into_iter()
        .map(|p| p.iter().map(|t| corpora.tgt_vocab.id(t)).collect())
        .collect())
}

/// Loads or builds data and models. With `out`, built artifacts are written there.
pub fn prepare(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Prepared> {
    cfg.validate()?;
    let corpora = match &cfg.artifacts.data_dir {
        Some(dir) => synth::read_corpora(dir)?,
        None => synth::generate(&cfg.task)?,
    };
    let (sv, tv) = (corpora.src_vocab.len(), corpora.tgt_vocab.len());
    let base = load_or_train(
        cfg.artifacts.base.as_ref(),
        cfg.transformer_config(sv, tv),
        &corpora.general_train,
        &cfg.base_train,
    )?;
    let reverse = load_or_train(
        cfg.artifacts.reverse.as_ref(),
        cfg.transformer_config(tv, sv),
        &swap(&corpora.general_train),
        &cfg.reverse_train,
    )?;
    let phrases = collect_phrases(&corpora, &cfg.memory)?;
    let phrase_pairs = pair_phrases(&phrases, &reverse, &BeamConfig::new(cfg.memory.pair_beam, cfg.memory.l_max + 4))?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        if cfg.artifacts.data_dir.is_none() {
            synth::write_corpora(&corpora, &dir.join("data"))?;
        }
        if cfg.artifacts.base.is_none() {
            base.save(&dir.join("base.bin"))?;
        }
        if cfg.artifacts.reverse.is_none() {
            reverse.save(&dir.join("reverse.bin"))?;
        }
    }
    Ok(Prepared {
        corpora,
        base,
        phrase_pairs,
    })
}

/// Partitions the prepared phrase pairs per `mem` and encodes them with the base model.
pub fn build_bank(p: &Prepared, mem: &MemoryConfig, num_layers: usize) -> Result<MemoryBank> {
    let pairs: Vec<PhrasePair> = p
        .phrase_pairs
        .iter()
        .filter(|pp| mem.only_len.is_none_or(|n| pp.target_len() == n))
        .cloned()
        .collect();
    let layers = mem.layers.clone().unwrap_or_else(|| (0..num_layers).collect());
    let parted = partition_phrases(pairs, &p.corpora.tgt_vocab, &layers, mem.strategy)?;
    let (mut bank, _) = build_memory(&parted, &p.base)?;
    let bytes = bank.to_bytes()?;
    bank = MemoryBank::from_bytes(&bytes)?;
    Ok(bank)
}

pub fn load_or_build_bank(cfg: &ExperimentConfig, p: &Prepared) -> Result<MemoryBank> {
    match &cfg.artifacts.bank {
        Some(path) => MemoryBank::load(path),
        None => build_bank(p, &cfg.memory, cfg.model.layers),
    }
}

/// Scores of one system under one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemRun {
    pub system: System,
    pub seed: u64,
    pub bleu: f64,
    pub style_acc: f64,
    pub valid_nll: f64,
    pub wall_secs: f64,
    /// Interpolation weight chosen for kNN decoding.
    pub knn_lambda: Option<f64>,
    pub log: TrainLog,
    pub hypotheses: Vec<Vec<u32>>,
    pub plugin: Option<PluginParams>,
}

pub struct Scores {
    pub bleu: f64,
    pub style_acc: f64,
    pub hypotheses: Vec<Vec<u32>>,
}

/// Decodes `pairs` with `decode` and scores against their targets.
pub fn score<F>(pairs: &[Pair], styled: &HashSet<u32>, decode: F) -> Result<Scores>
where
    F: Fn(&[u32]) -> Result<Vec<u32>> + Sync,
{
    let hyps = par::map(pairs, |p| {
        let x: Vec<u32> = p.src.iter().copied().chain([EOS]).collect();
        decode(&x)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let refs: Vec<Vec<u32>> = pairs.iter().map(|p| p.tgt.clone()).collect();
    Ok(Scores {
        bleu: bleu(&hyps, &refs)?,
        style_acc: style_marker_accuracy(&hyps, &refs, styled),
        hypotheses: hyps,
    })
}

/// Trainable plugin for `system`, seeded with `seed`.
pub fn init_plugin(cfg: &ExperimentConfig, system: System, seed: u64) -> Result<Option<PluginParams>> {
    let (d, l) = (cfg.model.d_model, cfg.model.layers);
    let memory = || AdapterParams::init(d, l, seed, cfg.gate_offset);
    Ok(match system {
        System::Vanilla => None,
        System::Memory | System::MemoryKnn => Some(PluginParams::Memory(memory()?)),
        System::Bottleneck => {
            let target = PluginParams::Memory(memory()?).param_count();
            let width = BottleneckParams::width_matching(d, l, target);
            Some(PluginParams::Bottleneck(BottleneckParams::init(d, l, width, seed)?))
        }
    })
}

pub fn seeded(cfg: &ExperimentConfig, seed: u64) -> (TrainConfig, LossConfig) {
    let tc = TrainConfig {
        seed,
        ..cfg.adapter_train.clone()
    };
    let lc = LossConfig {
        seed,
        ..cfg.loss.clone()
    };
    (tc, lc)
}

/// Trains (if needed) and scores one system under one seed. A trained memory
/// plugin can be passed in to share it between `Memory` and `MemoryKnn`.
pub fn run_system(
    cfg: &ExperimentConfig,
    p: &Prepared,
    bank: &MemoryBank,
    system: System,
    seed: u64,
    trained: Option<(&PluginParams, &TrainLog)>,
    out: Option<&Path>,
) -> Result<SystemRun> {
    let start = Instant::now();
    let c = &p.corpora;
    let styled = c.style_ids();
    let (plugin, log) = match (trained, init_plugin(cfg, system, seed)?) {
        (Some((pl, lg)), _) => (Some(pl.clone()), lg.clone()),
        (None, None) => (None, TrainLog::default()),
        (None, Some(mut pl)) => {
            let (tc, lc) = seeded(cfg, seed);
            let bank_ref = matches!(pl, PluginParams::Memory(_)).then_some(bank);
            let log = train_adapters(&p.base, &mut pl, bank_ref, cfg.usage, &c.custom_train, &c.custom_valid, &tc, &lc, None)?;
            pl.quantize();
            (Some(pl), log)
        }
    };
    let view = match &plugin {
        None => Plugin::None,
        Some(pl) => pl.view(Some(bank), cfg.usage)?,
    };
    let valid_nll = match log.final_valid() {
        Some(v) => v,
        None => evaluate_nll(&p.base, &view, &c.custom_valid)?,
    };
    let mut knn_lambda = None;
    let scores = if system == System::MemoryKnn {
        let ds = Datastore::build(&p.base, &view, &c.custom_train)?;
        let mut best: Option<(f64, f64)> = None;
        for &lambda in &cfg.knn_lambdas {
            let kc = KnnConfig { lambda, ..cfg.knn };
            let s = score(&c.custom_valid, &styled, |x| {
                decode_with_knn(x, &p.base, view, &ds, &kc, &cfg.beam_for(x.len()))
            })?;
            if best.is_none_or(|(_, acc)| s.style_acc > acc) {
                best = Some((lambda, s.style_acc));
            }
        }
        let lambda = best.map_or(0.0, |b| b.0);
        knn_lambda = Some(lambda);
        let kc = KnnConfig { lambda, ..cfg.knn };
        if let Some(dir) = out {
            ds.save(&dir.join(format!("datastore_seed{seed}.bin")))?;
        }
        score(&c.custom_test, &styled, |x| {
            decode_with_knn(x, &p.base, view, &ds, &kc, &cfg.beam_for(x.len()))
        })?
    } else {
        score(&c.custom_test, &styled, |x| translate(x, &p.base, view, &cfg.beam_for(x.len())))?
    };
    if let (Some(dir), Some(pl)) = (out, &plugin) {
        if system != System::MemoryKnn {
            pl.save(&dir.join(format!("{}_seed{seed}.bin", system.name())))?;
            fs::write(dir.join(format!("{}_seed{seed}.train.csv", system.name())), log.to_csv())?;
            fs::write(dir.join(format!("{}_seed{seed}.valid.csv", system.name())), log.valid_csv())?;
        }
    }
    let run = SystemRun {
        system,
        seed,
        bleu: scores.bleu,
        style_acc: scores.style_acc,
        valid_nll,
        wall_secs: start.elapsed().as_secs_f64(),
        knn_lambda,
        log,
        hypotheses: scores.hypotheses,
        plugin,
    };
    if ![run.bleu, run.style_acc, run.valid_nll].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("{} seed {seed}", system.name())));
    }
    log::info!(
        "{} seed {seed}: bleu {:.2} style {:.4} valid_nll {:.4} ({:.1}s)",
        system.name(),
        run.bleu,
        run.style_acc,
        run.valid_nll,
        run.wall_secs
    );
    Ok(run)
}

/// One row per (system, seed), sorted by system then seed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentReport {
    pub runs: Vec<SystemRun>,
}

impl ExperimentReport {
    pub const HEADER: &'static str = "system,seed,bleu,style_acc,valid_nll,knn_lambda";

    pub fn sort(&mut self) {
        self.runs.sort_by_key(|r| (r.system, r.seed));
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.runs {
            let lam = r.knn_lambda.map(|l| l.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{},{}", r.system.name(), r.seed, r.bleu, r.style_acc, r.valid_nll, lam);
        }
        s
    }

    /// Wall-clock times, kept apart from the reproducible report.
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("system,seed,wall_secs\n");
        for r in &self.runs {
            let _ = writeln!(s, "{},{},{:.3}", r.system.name(), r.seed, r.wall_secs);
        }
        s
    }

    pub fn get(&self, system: System, seed: u64) -> Option<&SystemRun> {
        self.runs.iter().find(|r| r.system == system && r.seed == seed)
    }

    pub fn mean(&self, system: System, f: impl Fn(&SystemRun) -> f64) -> Option<f64> {
        let v: Vec<f64> = self.runs.iter().filter(|r| r.system == system).map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Runs every configured system for every seed on prepared inputs. kNN
/// decoding reuses the memory adapter trained for the same seed.
pub fn run_systems(cfg: &ExperimentConfig, p: &Prepared, bank: &MemoryBank, out: Option<&Path>) -> Result<ExperimentReport> {
    let mut systems = cfg.systems.clone();
    systems.sort();
    systems.dedup();
    let mut report = ExperimentReport::default();
    for &seed in &cfg.seeds {
        let mut memory: Option<(PluginParams, TrainLog)> = None;
        for &system in &systems {
            let shared = match (system, &memory) {
                (System::MemoryKnn, Some((pl, lg))) => Some((pl, lg)),
                _ => None,
            };
            let run = run_system(cfg, p, bank, system, seed, shared, out)?;
            if system == System::Memory {
                memory = run.plugin.clone().map(|pl| (pl, run.log.clone()));
            }
            report.runs.push(run);
        }
    }
    report.sort();
    Ok(report)
}

/// SHA-256 of a file, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = memplug::container::read_file(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub version: String,
    /// Path relative to the output directory → SHA-256.
    pub files: BTreeMap<String, String>,
}

/// Hashes every file under `dir` except the provenance record itself.
pub fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let path = e.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if path.file_name().is_some_and(|n| n != PROVENANCE) {
                let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
                out.insert(rel, file_sha256(&path)?);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

pub const PROVENANCE: &str = "provenance.json";
pub const REPORT: &str = "report.csv";

pub fn write_provenance(dir: &Path, config: &impl Serialize, seeds: &[u64]) -> Result<Provenance> {
    let prov = Provenance {
        config: serde_json::to_value(config)?,
        seeds: seeds.to_vec(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        files: hash_tree(dir)?,
    };
    fs::write(dir.join(PROVENANCE), serde_json::to_string_pretty(&prov)?)?;
    Ok(prov)
}

/// Full pipeline. Writes artifacts, `report.csv`, `timing.csv`, and
/// `provenance.json` into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    let p = prepare(cfg, Some(out))?;
    let bank = load_or_build_bank(cfg, &p)?;
    if cfg.artifacts.bank.is_none() {
        bank.save(&out.join("bank.bin"))?;
    }
    let runs = out.join("runs");
    fs::create_dir_all(&runs)?;
    let report = run_systems(cfg, &p, &bank, Some(&runs))?;
    fs::write(out.join(REPORT), report.to_csv())?;
    fs::write(out.join("timing.csv"), report.timing_csv())?;
    write_provenance(out, cfg, &cfg.seeds)?;
    Ok(report)
}
