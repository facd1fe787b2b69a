//! Adapter training against a frozen base: contracts, determinism, and capacity.

use memplug::adapter::{AdapterParams, BottleneckParams, MemoryUsage, Plugin, PluginParams};
use memplug::knn::{decode_with_knn, Datastore, KnnConfig};
use memplug::memory::{build_memory, partition_phrases, MemoryBank, PartitionStrategy, PhrasePair};
use memplug::nmt::{translate, BeamConfig, Pair, TransformerConfig, TransformerParams, Vocab, EOS, train_base, BaseTrainConfig};
use memplug::trainer::{train_adapters, LossConfig, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 16;
const LAYERS: usize = 2;

fn base() -> TransformerParams {
    let cfg = TransformerConfig {
        d_model: D,
        layers: LAYERS,
        heads: 2,
        ffn: 32,
        src_vocab: 14,
        tgt_vocab: 14,
    };
    let mut p = TransformerParams::init(cfg, 8).unwrap();
    p.quantize();
    p.frozen = true;
    p
}

/// Token-by-token translation; `styled` rewrites ids 4..7 to 11..14.
fn corpus(n: usize, seed: u64, styled: bool) -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let src: Vec<u32> = (0..rng.random_range(2..6)).map(|_| rng.random_range(4..14)).collect();
            let tgt = src
                .iter()
                .map(|&t| {
                    let n = 4 + (t + 3) % 10;
                    if styled && n < 7 { n + 7 } else { n }
                })
                .collect();
            Pair { src, tgt }
        })
        .collect()
}

fn pretrained() -> TransformerParams {
    let cfg = TransformerConfig {
        d_model: D,
        layers: LAYERS,
        heads: 2,
        ffn: 32,
        src_vocab: 14,
        tgt_vocab: 14,
    };
    let mut p = TransformerParams::init(cfg, 8).unwrap();
    let train = BaseTrainConfig {
        steps: 300,
        warmup: 30,
        max_lr: 5e-3,
        batch_tokens: 256,
        label_smoothing: 0.0,
        dropout: 0.0,
        seed: 1,
    };
    train_base(&mut p, &corpus(400, 9, false), &train).unwrap();
    p.quantize();
    p.frozen = true;
    p
}

fn bank_for(pairs: &[Pair], model: &TransformerParams) -> MemoryBank {
    let vocab = Vocab::new((4..14).map(|i| format!("w{i}"))).unwrap();
    let phrases = pairs
        .iter()
        .map(|p| PhrasePair {
            source: p.src.clone(),
            target: p.tgt.clone(),
            layer: 0,
        })
        .collect();
    let layers: Vec<usize> = (0..LAYERS).collect();
    let parted = partition_phrases(phrases, &vocab, &layers, PartitionStrategy::ShortToLong).unwrap();
    build_memory(&parted, model).unwrap().0
}

fn train_cfg(steps: usize, lr: f64, smoothing: f64) -> TrainConfig {
    TrainConfig {
        steps,
        warmup: 10,
        max_lr: lr,
        batch_tokens: 4096,
        label_smoothing: smoothing,
        seed: 3,
        checkpoint_every: 0,
        validate_every: 0,
    }
}

#[test]
fn training_leaves_base_bytes_and_plain_decoding_unchanged() {
    let model = base();
    let before = model.to_bytes().unwrap();
    let pairs = corpus(16, 1, true);
    let bank = bank_for(&pairs, &model);
    let beam = BeamConfig::new(3, 10);
    let plain: Vec<Vec<u32>> = pairs.iter().map(|p| translate(&p.src, &model, Plugin::None, &beam).unwrap()).collect();
    let mut plugin = PluginParams::Memory(AdapterParams::init(D, LAYERS, 2, 4.0).unwrap());
    train_adapters(&model, &mut plugin, Some(&bank), MemoryUsage::default(), &pairs, &[], &train_cfg(30, 3e-3, 0.1), &LossConfig::default(), None)
        .unwrap();
    assert_eq!(model.to_bytes().unwrap(), before);
    let after: Vec<Vec<u32>> = pairs.iter().map(|p| translate(&p.src, &model, Plugin::None, &beam).unwrap()).collect();
    assert_eq!(after, plain);
}

#[test]
fn same_seed_gives_identical_logs_and_parameters() {
    let model = base();
    let pairs = corpus(16, 1, true);
    let bank = bank_for(&pairs, &model);
    let run = || {
        let mut plugin = PluginParams::Memory(AdapterParams::init(D, LAYERS, 2, 4.0).unwrap());
        let log = train_adapters(
            &model,
            &mut plugin,
            Some(&bank),
            MemoryUsage::default(),
            &pairs,
            &pairs[..4],
            &train_cfg(20, 3e-3, 0.1),
            &LossConfig::default(),
            None,
        )
        .unwrap();
        (log.to_csv(), log.valid_csv(), plugin.to_bytes().unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn memory_adapter_overfits_sixteen_pairs() {
    let model = pretrained();
    let pairs = corpus(16, 1, true);
    let bank = bank_for(&pairs, &model);
    let mut plugin = PluginParams::Memory(AdapterParams::init(D, LAYERS, 2, 4.0).unwrap());
    let log = train_adapters(
        &model,
        &mut plugin,
        Some(&bank),
        MemoryUsage::default(),
        &pairs,
        &[],
        &train_cfg(200, 3e-2, 0.0),
        &LossConfig::default(),
        None,
    )
    .unwrap();
    let first = log.rows[0].parts.nll_full;
    let last = log.rows.last().unwrap().parts.nll_full;
    assert!(last < 0.1 * first, "NLL {first} -> {last}");
}

#[test]
fn bottleneck_adapter_overfits_sixteen_pairs() {
    let model = pretrained();
    let pairs = corpus(16, 1, true);
    let mut plugin = PluginParams::Bottleneck(BottleneckParams::init(D, LAYERS, 16, 2).unwrap());
    let log = train_adapters(&model, &mut plugin, None, MemoryUsage::default(), &pairs, &[], &train_cfg(500, 1e-2, 0.0), &LossConfig::default(), None)
        .unwrap();
    let first = log.rows[0].parts.nll_full;
    let last = log.rows.last().unwrap().parts.nll_full;
    assert!(last < 0.1 * first, "NLL {first} -> {last}");
}

#[test]
fn single_pair_datastore_reproduces_its_target() {
    let model = base();
    let pair = Pair {
        src: vec![5, 9, 7],
        tgt: vec![11, 4, 8, 6],
    };
    let ds = Datastore::build(&model, &Plugin::None, std::slice::from_ref(&pair)).unwrap();
    assert_eq!(ds.len(), pair.tgt.len() + 1);
    let cfg = KnnConfig {
        k: 1,
        temperature: 10.0,
        lambda: 1.0,
    };
    let x: Vec<u32> = pair.src.iter().copied().chain([EOS]).collect();
    let out = decode_with_knn(&x, &model, Plugin::None, &ds, &cfg, &BeamConfig::new(4, 12)).unwrap();
    assert_eq!(out, pair.tgt);
}

#[test]
fn zero_lambda_decoding_equals_plain_beam() {
    let model = base();
    let pairs = corpus(12, 5, true);
    let bank = bank_for(&pairs, &model);
    let mut adapter = AdapterParams::init(D, LAYERS, 4, 4.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for t in adapter.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
    let plugin = PluginParams::Memory(adapter);
    let view = plugin.view(Some(&bank), MemoryUsage::default()).unwrap();
    let ds = Datastore::build(&model, &view, &pairs).unwrap();
    let cfg = KnnConfig {
        lambda: 0.0,
        ..KnnConfig::default()
    };
    let beam = BeamConfig::new(4, 10);
    for p in &pairs {
        assert_eq!(
            decode_with_knn(&p.src, &model, view, &ds, &cfg, &beam).unwrap(),
            translate(&p.src, &model, view, &beam).unwrap()
        );
    }
}
