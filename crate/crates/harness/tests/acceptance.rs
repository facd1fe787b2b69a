//! Acceptance run over the desk-scale setup. Prints one PASS/FAIL line per
//! criterion and exits nonzero when a hard criterion fails.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use harness::ablation::{AblationReport, AblationRow, Suite};
use harness::pipeline::{build_bank, prepare, run_system, run_systems, ExperimentConfig, ExperimentReport, Prepared, System, SystemRun};
use memplug::adapter::{memadapt, AdapterParams, MemoryUsage, Plugin, PluginParams, SiteParams};
use memplug::error::Error;
use memplug::knn::{decode_with_knn, Datastore, KnnConfig};
use memplug::memory::{build_memory, partition_phrases, BankLayer, MemoryBank, PartitionStrategy, PhrasePair};
use memplug::nmt::{forward_teacher_forced, forward_with_plugin, translate, Batch, Pair, TransformerConfig, TransformerParams, Vocab, BOS, EOS};
use memplug::tensor::Tensor;
use memplug::trainer::{agreement_loss, loss_and_grads, memory_dropout, train_adapters, DropoutLevel, LossConfig, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = memplug::Result<(bool, String)>;

struct Outcome {
    id: usize,
    name: &'static str,
    soft: bool,
    pass: bool,
    detail: String,
    secs: f64,
}

fn run(id: usize, name: &'static str, soft: bool, f: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    let o = Outcome {
        id,
        name,
        soft,
        pass,
        detail,
        secs: start.elapsed().as_secs_f64(),
    };
    print_line(&o);
    o
}

fn print_line(o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    let soft = if o.soft { " (soft)" } else { "" };
    println!("[{tag}] {:>2} {}{soft}: {} ({:.1}s)", o.id, o.name, o.detail, o.secs);
}

fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn random_site(d: usize, scale: f64, rng: &mut ChaCha8Rng) -> SiteParams {
    SiteParams {
        wq: random(&[d, d], scale, rng),
        wk: random(&[d, d], scale, rng),
        wv: random(&[d, d], scale, rng),
        w1: random(&[2 * d, d], scale, rng),
        w2: random(&[d, 1], scale, rng),
    }
}

fn toy_model(seed: u64) -> TransformerParams {
    let cfg = TransformerConfig {
        d_model: 8,
        layers: 2,
        heads: 2,
        ffn: 16,
        src_vocab: 10,
        tgt_vocab: 9,
    };
    let mut p = TransformerParams::init(cfg, seed).unwrap();
    p.frozen = true;
    p
}

fn random_bank(d: usize, per_layer: usize, rng: &mut ChaCha8Rng) -> MemoryBank {
    let layers = (0..2)
        .map(|i| BankLayer {
            source: random(&[per_layer, d], 1.0, rng),
            target: random(&[per_layer, d], 1.0, rng),
            pairs: (0..per_layer)
                .map(|j| PhrasePair {
                    source: vec![4 + j as u32],
                    target: vec![5 + j as u32],
                    layer: i,
                })
                .collect(),
        })
        .collect();
    MemoryBank::new(d, layers).unwrap()
}

fn toy_batch() -> Batch {
    let pairs = [
        Pair { src: vec![4, 7, 5], tgt: vec![6, 4, 8] },
        Pair { src: vec![9, 6], tgt: vec![5, 7] },
    ];
    Batch::from_pairs(pairs.iter())
}

fn c1_gradients() -> Check {
    let model = toy_model(21);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bank = random_bank(8, 3, &mut rng);
    let mut adapter = AdapterParams::init(8, 2, 3, 0.0).unwrap();
    for t in adapter.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
    let cfg = LossConfig {
        alpha: 5.0,
        beta: 5.0,
        dropout_rate: 0.1,
        dropout_level: DropoutLevel::Item,
        seed: 0,
    };
    let mut drop_rng = ChaCha8Rng::seed_from_u64(1);
    let dropped = (0..100)
        .map(|_| memory_dropout(&bank, &cfg, &mut drop_rng))
        .collect::<memplug::Result<Vec<_>>>()?
        .into_iter()
        .find(|d| d.len() < bank.len() && !d.is_empty())
        .ok_or_else(|| Error::Contract("no mask dropped an item".into()))?;
    let b = toy_batch();
    let usage = MemoryUsage::default();
    let mut p = PluginParams::Memory(adapter);
    let (_, grads) = loss_and_grads(&model, &p, Some(&bank), Some(&dropped), usage, &b, &cfg, 0.1)?;
    let h = 1e-5;
    let (mut worst, mut checked) = (0.0f64, 0usize);
    for ti in 0..p.tensors_mut().len() {
        for j in 0..p.tensors_mut()[ti].len() {
            let orig = p.tensors_mut()[ti].data()[j];
            let mut eval = |v: f64| -> memplug::Result<f64> {
                p.tensors_mut()[ti].data_mut()[j] = v;
                Ok(loss_and_grads(&model, &p, Some(&bank), Some(&dropped), usage, &b, &cfg, 0.1)?.0.total)
            };
            let numeric = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
            p.tensors_mut()[ti].data_mut()[j] = orig;
            let analytic = grads[ti].as_ref().map_or(0.0, |g| g.data()[j]);
            let scale = analytic.abs().max(numeric.abs());
            // Below this scale both sides are differencing noise; compare absolutely.
            let err = if scale > 1e-6 { (analytic - numeric).abs() / scale } else { (analytic - numeric).abs() * 1e4 };
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok((worst < 1e-4, format!("{checked} parameters, worst relative error {worst:.2e}")))
}

fn c3_transparency() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let d = 32;
        let adapter = AdapterParams::init(d, 2, case, 4.0)?;
        let n = rng.random_range(1..10);
        let items = rng.random_range(1..60);
        let scale = rng.random_range(0.1..5.0);
        let a = random(&[n, d], scale, &mut rng);
        let q = random(&[n, d], scale, &mut rng);
        let m = random(&[items, d], scale, &mut rng);
        for site in adapter.layers.iter().flatten() {
            let (o, _) = memadapt(&a, &q, &m, &m, site, adapter.temperature, adapter.gate_offset)?;
            for (x, y) in o.data().iter().zip(a.data()) {
                worst = worst.max((x - y).abs() / y.abs().max(1.0));
            }
        }
    }
    Ok((worst <= 0.02, format!("worst |O-A|/max(1,|A|) = {worst:.4} over 100 inputs")))
}

fn phrase_set(rng: &mut ChaCha8Rng) -> Vec<PhrasePair> {
    let n = rng.random_range(0..80);
    (0..n)
        .map(|_| PhrasePair {
            source: (0..rng.random_range(1..=6)).map(|_| rng.random_range(4..10)).collect(),
            target: (0..rng.random_range(1..=6)).map(|_| rng.random_range(4..10)).collect(),
            layer: usize::MAX,
        })
        .collect()
}

fn c4_structure() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut worst_row, mut gate_ok) = (0.0f64, true);
    for _ in 0..1000 {
        let (n, d, items) = (rng.random_range(1..6), rng.random_range(1..9), rng.random_range(1..30));
        let site = random_site(d, 0.5, &mut rng);
        let a = random(&[n, d], 2.0, &mut rng);
        let q = random(&[n, d], 2.0, &mut rng);
        let m = random(&[items, d], 2.0, &mut rng);
        let temperature = rng.random_range(0.05..5.0);
        let (_, trace) = memadapt(&a, &q, &m, &m, &site, temperature, rng.random_range(-4.0..4.0))?;
        for i in 0..n {
            worst_row = worst_row.max((trace.weights.row(i).iter().sum::<f64>() - 1.0).abs());
        }
        gate_ok &= trace.lambda.iter().all(|&l| l > 0.0 && l < 1.0);
    }

    let vocab = Vocab::new((0..6).map(|i| format!("t{i}")))?;
    let mut partition_ok = true;
    for case in 0..1000 {
        let pairs = phrase_set(&mut rng);
        let layers: Vec<usize> = (0..4).filter(|_| rng.random_bool(0.6)).collect();
        let layers = if layers.is_empty() { vec![case % 4] } else { layers };
        let out = partition_phrases(pairs.clone(), &vocab, &layers, PartitionStrategy::ShortToLong)?;
        let key = |v: &[PhrasePair]| {
            let mut k: Vec<_> = v.iter().map(|p| (p.source.clone(), p.target.clone())).collect();
            k.sort();
            k
        };
        partition_ok &= key(&out) == key(&pairs);
        let rank = |p: &PhrasePair| layers.iter().position(|&l| l == p.layer);
        partition_ok &= out.iter().all(|p| rank(p).is_some());
        for a in &out {
            for b in &out {
                if rank(a) < rank(b) {
                    partition_ok &= a.target_len() <= b.target_len();
                }
            }
        }
    }

    let mut passthrough_ok = true;
    for seed in 0..50 {
        let d = 1 + seed as usize % 8;
        let site = random_site(d, 0.5, &mut rng);
        let a = random(&[3, d], 3.0, &mut rng);
        let empty = Tensor::zeros(&[0, d]);
        let (o, _) = memadapt(&a, &a, &empty, &empty, &site, 0.5, 4.0)?;
        passthrough_ok &= o.data() == a.data();
        let model = toy_model(seed);
        let mut adapter = AdapterParams::init(8, 2, seed, 4.0)?;
        for t in adapter.tensors_mut() {
            *t = random(t.shape(), 1.0, &mut rng);
        }
        let plugin = PluginParams::Memory(adapter);
        let bank = MemoryBank::empty(8, 2);
        let (x, y) = ([5, 7, 4, 2], [BOS, 6, 8, 4]);
        let with = forward_with_plugin(&x, &y, &model, &plugin.view(Some(&bank), MemoryUsage::default())?, false)?;
        let without = forward_with_plugin(&x, &y, &model, &Plugin::None, false)?;
        passthrough_ok &= with.logits.data() == without.logits.data();
    }
    let pass = worst_row <= 1e-6 && gate_ok && partition_ok && passthrough_ok;
    Ok((
        pass,
        format!("row-sum error {worst_row:.1e}, gate in (0,1): {gate_ok}, partition (1000 sets): {partition_ok}, empty pass-through: {passthrough_ok}"),
    ))
}

fn oracle_knn(keys: &Tensor, values: &[u32], query: &[f64], cfg: &KnnConfig, vocab: usize) -> (Vec<(usize, f64)>, Vec<f64>) {
    let mut all: Vec<(usize, f64)> = (0..keys.rows())
        .map(|i| (i, keys.row(i).iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum()))
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(cfg.k);
    let top = all.iter().map(|&(_, d)| -d / cfg.temperature).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = all.iter().map(|&(_, d)| (-d / cfg.temperature - top).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut p = vec![0.0; vocab];
    for (&(i, _), wi) in all.iter().zip(&w) {
        p[values[i] as usize] += wi / z;
    }
    (all, p)
}

fn mean_rows(t: &Tensor, rows: std::ops::Range<usize>) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut acc = vec![0.0; t.cols()];
    for r in rows {
        acc.iter_mut().zip(t.row(r)).for_each(|(a, v)| *a += v);
    }
    acc.iter().map(|v| v / n).collect()
}

fn c5_oracles(p: &Prepared, bank: &MemoryBank) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut argmax_ok = true;
    let mut checked = 0;
    while checked < 100 {
        let d = rng.random_range(1..8);
        let items = rng.random_range(2..20);
        let site = random_site(d, 1.0, &mut rng);
        let q = random(&[1, d], 1.0, &mut rng);
        let m = random(&[items, d], 1.0, &mut rng);
        let qp = q.matmul(&site.wq)?.matmul(&site.wk.transpose()?)?;
        let scores: Vec<f64> = (0..items).map(|j| qp.row(0).iter().zip(m.row(j)).map(|(x, y)| x * y).sum()).collect();
        let mut order: Vec<usize> = (0..items).collect();
        order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
        // A near-tie has no well-defined argmax at finite temperature.
        if scores[order[0]] - scores[order[1]] < 1e-2 {
            continue;
        }
        let (_, trace) = memadapt(&q, &q, &m, &m, &site, 1e-4, 4.0)?;
        let w = trace.weights.row(0);
        let best = (0..items).max_by(|&i, &j| w[i].total_cmp(&w[j])).unwrap_or(0);
        argmax_ok &= best == order[0] && w[best] > 1.0 - 1e-9;
        checked += 1;
    }

    let mut knn_ok = true;
    let vocab = 50;
    for case in 0..60 {
        let n = if case == 0 { 1000 } else { rng.random_range(1..=1000) };
        let d = rng.random_range(1..33);
        let coarse = case % 3 == 0;
        let keys = Tensor::new(
            vec![n, d],
            (0..n * d)
                .map(|_| {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    if coarse { (v * 2.0).round() / 2.0 } else { v }
                })
                .collect(),
        )?;
        let values: Vec<u32> = (0..n).map(|_| rng.random_range(0..vocab as u32)).collect();
        let query: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = KnnConfig {
            k: rng.random_range(1..20),
            temperature: rng.random_range(0.1..20.0),
            ..KnnConfig::default()
        };
        let ds = Datastore::new(keys.clone(), values.clone())?;
        let (want_nn, want_p) = oracle_knn(&keys, &values, &query, &cfg, vocab);
        let got_nn = ds.nearest(&query, cfg.k)?;
        knn_ok &= got_nn.len() == want_nn.len() && got_nn.iter().zip(&want_nn).all(|(g, w)| g.0 == w.0 && (g.1 - w.1).abs() < 1e-12);
        knn_ok &= ds.probability(&query, &cfg, vocab)?.iter().zip(&want_p).all(|(g, w)| (g - w).abs() < 1e-12);
    }

    // The desk bank went through its f32 file format; re-encode its pairs at full precision.
    let pairs: Vec<PhrasePair> = bank.layers().iter().flat_map(|l| l.pairs.clone()).collect();
    let (raw, _) = build_memory(&pairs, &p.base)?;
    let mut worst_item = 0.0f64;
    for (l, layer) in raw.layers().iter().enumerate() {
        for (row, pair) in layer.pairs.iter().enumerate() {
            let x = with_eos(&pair.source);
            let y: Vec<u32> = [BOS].into_iter().chain(pair.target.iter().copied()).collect();
            let (_, reps) = forward_teacher_forced(&x, &y, &p.base, true)?;
            let reps = reps.ok_or_else(|| Error::Contract("no captured representations".into()))?;
            let src = mean_rows(&reps.e, 0..pair.source.len());
            let tgt = mean_rows(&reps.layers[l].s, 1..y.len());
            for (a, b) in layer.source.row(row).iter().zip(&src).chain(layer.target.row(row).iter().zip(&tgt)) {
                worst_item = worst_item.max((a - b).abs());
            }
        }
    }
    Ok((
        argmax_ok && knn_ok && worst_item <= 1e-12,
        format!(
            "T->0 argmax (100): {argmax_ok}, kNN vs full sort (N<=1000): {knn_ok}, {} bank items worst |diff| {worst_item:.1e}",
            bank.len()
        ),
    ))
}

fn distributions(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let w: Vec<f64> = (0..cols).map(|_| rng.random_range(0.01..1.0)).collect();
        let z: f64 = w.iter().sum();
        data.extend(w.iter().map(|v| v / z));
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn c6_loss_identities() -> Check {
    let model = toy_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut adapter = AdapterParams::init(8, 2, 1, 4.0)?;
    for t in adapter.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.4..0.4));
    }
    let plugin = PluginParams::Memory(adapter);
    let bank = random_bank(8, 4, &mut rng);
    let cfg = LossConfig {
        dropout_rate: 0.0,
        ..LossConfig::default()
    };
    let dropped = memory_dropout(&bank, &cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let (parts, _) = loss_and_grads(&model, &plugin, Some(&bank), Some(&dropped), MemoryUsage::default(), &toy_batch(), &cfg, 0.1)?;
    let p0 = (parts.total - (1.0 + cfg.alpha) * parts.nll_full).abs() < 1e-12 && cfg.beta * parts.dist < 1e-6;

    let (mut zero, mut sym) = (true, 0.0f64);
    for _ in 0..200 {
        let (rows, cols) = (rng.random_range(1..8), rng.random_range(2..50));
        let flags = vec![true; rows];
        let p = distributions(rows, cols, &mut rng);
        let q = distributions(rows, cols, &mut rng);
        zero &= agreement_loss(&p, &p, &flags)? == 0.0;
        sym = sym.max((agreement_loss(&p, &q, &flags)? - agreement_loss(&q, &p, &flags)?).abs());
    }
    let hand = agreement_loss(
        &Tensor::from_rows(&[vec![0.75, 0.25]])?,
        &Tensor::from_rows(&[vec![0.25, 0.75]])?,
        &[true],
    )?;
    let hand_err = (hand - 0.5 * 3f64.ln()).abs();
    Ok((
        p0 && zero && sym <= 1e-12 && hand_err <= 1e-9,
        format!("p=0 identity: {p0}, L(p,p)=0: {zero}, asymmetry {sym:.1e}, hand case error {hand_err:.1e}"),
    ))
}

fn with_eos(src: &[u32]) -> Vec<u32> {
    src.iter().copied().chain([EOS]).collect()
}

fn c2_frozen_base(cfg: &ExperimentConfig, p: &Prepared, bank: &MemoryBank, vanilla: &SystemRun, dir: &Path) -> Check {
    let path = dir.join("frozen_base.bin");
    let copy = dir.join("frozen_base.pre.bin");
    p.base.save(&path)?;
    fs::copy(&path, &copy)?;
    let base = TransformerParams::load(&path)?;
    let mut plugin = PluginParams::Memory(AdapterParams::init(cfg.model.d_model, cfg.model.layers, 1, cfg.gate_offset)?);
    let tc = TrainConfig {
        steps: 500,
        validate_every: 0,
        seed: 1,
        ..cfg.adapter_train.clone()
    };
    let c = &p.corpora;
    train_adapters(&base, &mut plugin, Some(bank), cfg.usage, &c.custom_train, &c.custom_valid, &tc, &cfg.loss, None)?;
    let file_same = fs::read(&path)? == fs::read(&copy)?;
    let memory_same = base.to_bytes()? == fs::read(&copy)?;
    let mut decode_same = true;
    for (pair, hyp) in c.custom_test.iter().zip(&vanilla.hypotheses) {
        let x = with_eos(&pair.src);
        decode_same &= &translate(&x, &base, Plugin::None, &cfg.beam_for(x.len()))? == hyp;
    }
    Ok((
        file_same && memory_same && decode_same,
        format!("checkpoint unchanged: {file_same}, in-memory unchanged: {memory_same}, disabled decoding == vanilla: {decode_same}"),
    ))
}

fn c7_learning(cfg: &ExperimentConfig, report: &ExperimentReport, secs: f64) -> Check {
    let style = |s: System| report.mean(s, |r| r.style_acc).unwrap_or(f64::NAN);
    let (van, bot, mem) = (style(System::Vanilla), style(System::Bottleneck), style(System::Memory));
    let nll_wins = cfg
        .seeds
        .iter()
        .filter(|&&s| match (report.get(System::Memory, s), report.get(System::Vanilla, s)) {
            (Some(m), Some(v)) => m.valid_nll < v.valid_nll,
            _ => false,
        })
        .count();
    let params = |s: System| report.get(s, cfg.seeds[0]).and_then(|r| r.plugin.as_ref()).map_or(0, |p| p.param_count());
    let pass = mem > bot && bot > van && nll_wins == cfg.seeds.len() && secs < 600.0;
    Ok((
        pass,
        format!(
            "mean style memory {mem:.4} / bottleneck {bot:.4} / vanilla {van:.4}; params {} vs {}; memory NLL < vanilla in {nll_wins}/{}",
            params(System::Memory),
            params(System::Bottleneck),
            cfg.seeds.len()
        ),
    ))
}

fn c8_knn(cfg: &ExperimentConfig, p: &Prepared, bank: &MemoryBank, memory: &[SystemRun], knn: &[SystemRun]) -> Check {
    let not_worse = memory.iter().zip(knn).filter(|(m, k)| k.style_acc >= m.style_acc).count();
    let first = &memory[0];
    let plugin = first.plugin.as_ref().ok_or_else(|| Error::Contract("memory run kept no plugin".into()))?;
    let view = plugin.view(Some(bank), cfg.usage)?;
    let ds = Datastore::build(&p.base, &view, &p.corpora.custom_train)?;
    let kc = KnnConfig { lambda: 0.0, ..cfg.knn };
    let mut same = true;
    for (pair, hyp) in p.corpora.custom_test.iter().zip(&first.hypotheses) {
        let x = with_eos(&pair.src);
        let beam = cfg.beam_for(x.len());
        let plain = translate(&x, &p.base, view, &beam)?;
        same &= decode_with_knn(&x, &p.base, view, &ds, &kc, &beam)? == plain && &plain == hyp;
    }
    let pairs: Vec<String> = memory
        .iter()
        .zip(knn)
        .map(|(m, k)| format!("{:.3}->{:.3} (lambda {})", m.style_acc, k.style_acc, k.knn_lambda.unwrap_or(f64::NAN)))
        .collect();
    Ok((
        not_worse * 3 >= memory.len() * 2 && same,
        format!("style not decreased in {not_worse}/{} seeds [{}]; lambda=0 == plain beam: {same}", memory.len(), pairs.join(", ")),
    ))
}

fn ablation_row(variant: &str, run: &SystemRun, items: usize) -> AblationRow {
    AblationRow {
        variant: variant.to_string(),
        seed: run.seed,
        valid_nll: run.valid_nll,
        bleu: run.bleu,
        style_acc: run.style_acc,
        memory_items: items,
        curve: run.log.valid.clone(),
    }
}

fn variant(suite: Suite, cfg: &ExperimentConfig, name: &str) -> ExperimentConfig {
    suite.variants(cfg).into_iter().find(|v| v.0 == name).expect("known variant").1
}

fn c9_ablations(cfg: &ExperimentConfig, p: &Prepared, bank: &MemoryBank, memory: &[SystemRun], dir: &Path) -> Check {
    let mut order = AblationReport {
        suite: Suite::GranularityOrder,
        rows: memory.iter().map(|r| ablation_row("short_to_long", r, bank.len())).collect(),
        diffs: Vec::new(),
    };
    let mut dropout = AblationReport {
        suite: Suite::DropoutLevel,
        rows: memory.iter().map(|r| ablation_row("item", r, bank.len())).collect(),
        diffs: Vec::new(),
    };
    for (suite, name) in [(Suite::GranularityOrder, "long_to_short"), (Suite::DropoutLevel, "none"), (Suite::DropoutLevel, "layer")] {
        let vcfg = variant(suite, cfg, name);
        let vbank = if vcfg.memory == cfg.memory { bank.clone() } else { build_bank(p, &vcfg.memory, vcfg.model.layers)? };
        let report = if suite == Suite::GranularityOrder { &mut order } else { &mut dropout };
        for &seed in &cfg.seeds {
            let r = run_system(&vcfg, p, &vbank, System::Memory, seed, None, None)?;
            report.rows.push(ablation_row(name, &r, vbank.len()));
        }
    }
    for r in [&order, &dropout] {
        fs::write(dir.join(format!("ablation_{}.csv", r.suite.name())), r.to_csv())?;
        fs::write(dir.join(format!("ablation_{}_curves.csv", r.suite.name())), r.curves_csv())?;
    }
    let need = (2 * cfg.seeds.len()).div_ceil(3);
    let s2l = order.count_le("short_to_long", "long_to_short");
    let layer = dropout.count_le("layer", "none");
    let finals = |r: &AblationReport, v: &str| -> String {
        r.rows.iter().filter(|x| x.variant == v).map(|x| format!("{:.4}", x.valid_nll)).collect::<Vec<_>>().join("/")
    };
    Ok((
        s2l >= need && layer >= need,
        format!(
            "s2l <= l2s in {s2l}/{n} ({} vs {}); layer <= none in {layer}/{n} ({} vs {}); curves in {}",
            finals(&order, "short_to_long"),
            finals(&order, "long_to_short"),
            finals(&dropout, "layer"),
            finals(&dropout, "none"),
            dir.display(),
            n = cfg.seeds.len()
        ),
    ))
}

fn c10_data_scale(cfg: &ExperimentConfig, p: &Prepared, bank: &MemoryBank, report: &ExperimentReport) -> Check {
    let small = Prepared {
        corpora: p.corpora.with_custom_size(250),
        base: p.base.clone(),
        phrase_pairs: p.phrase_pairs.clone(),
    };
    let mut wins = 0;
    let mut detail = Vec::new();
    for &seed in &cfg.seeds {
        let m = run_system(cfg, &small, bank, System::Memory, seed, None, None)?;
        let v = report.get(System::Vanilla, seed).ok_or_else(|| Error::Contract("missing vanilla run".into()))?;
        wins += usize::from(m.style_acc > v.style_acc);
        detail.push(format!("{:.3} vs {:.3}", m.style_acc, v.style_acc));
    }
    Ok((
        wins * 3 >= cfg.seeds.len() * 2,
        format!("memory > vanilla in {wins}/{} seeds at 250 sentences [{}]", cfg.seeds.len(), detail.join(", ")),
    ))
}

type Loader = fn(&Path) -> memplug::Result<Vec<u8>>;

fn c11_formats(p: &Prepared, bank: &MemoryBank, report: &ExperimentReport, ds: &Datastore, dir: &Path) -> Check {
    let plugin_of = |s: System| report.runs.iter().find(|r| r.system == s).and_then(|r| r.plugin.clone());
    let memory = plugin_of(System::Memory).ok_or_else(|| Error::Contract("no memory plugin".into()))?;
    let bottleneck = plugin_of(System::Bottleneck).ok_or_else(|| Error::Contract("no bottleneck plugin".into()))?;
    let artifacts: Vec<(&str, Vec<u8>, Loader)> = vec![
        ("model", p.base.to_bytes()?, |f| TransformerParams::load(f)?.to_bytes()),
        ("memory adapter", memory.to_bytes()?, |f| PluginParams::load(f)?.to_bytes()),
        ("bottleneck adapter", bottleneck.to_bytes()?, |f| PluginParams::load(f)?.to_bytes()),
        ("bank", bank.to_bytes()?, |f| MemoryBank::load(f)?.to_bytes()),
        ("datastore", ds.to_bytes()?, |f| Datastore::load(f)?.to_bytes()),
    ];
    let mut failures = Vec::new();
    for (name, bytes, load) in artifacts {
        let path = dir.join("artifact.bin");
        fs::write(&path, &bytes)?;
        let again = load(&path)?;
        fs::write(&path, &again)?;
        if load(&path)? != bytes {
            failures.push(format!("{name} roundtrip"));
        }
        let mut flipped = bytes.clone();
        flipped[0] ^= 0xff;
        let mut trailing = bytes.clone();
        trailing.extend_from_slice(&[1, 2, 3]);
        for (how, damaged) in [("magic", flipped), ("truncated", bytes[..bytes.len() / 2].to_vec()), ("trailing", trailing)] {
            fs::write(&path, damaged)?;
            if !matches!(load(&path), Err(Error::Format(_))) {
                failures.push(format!("{name} {how}"));
            }
        }
    }
    Ok((
        failures.is_empty(),
        if failures.is_empty() { "5 artifact kinds byte-stable, 15 corruptions rejected".into() } else { format!("failed: {}", failures.join(", ")) },
    ))
}

fn main() {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&dir).expect("output directory");
    let mut outcomes = vec![run(1, "gradient correctness", false, c1_gradients)];
    outcomes.push(run(3, "near-transparency at init", false, c3_transparency));
    outcomes.push(run(4, "structural invariants", false, || {
        let start = Instant::now();
        let (pass, detail) = c4_structure()?;
        let secs = start.elapsed().as_secs_f64();
        Ok((pass && secs < 60.0, detail))
    }));
    outcomes.push(run(6, "loss identities", false, c6_loss_identities));

    let mut cfg = ExperimentConfig::default();
    cfg.systems = vec![System::Vanilla, System::Bottleneck, System::Memory];
    let start = Instant::now();
    let desk = prepare(&cfg, Some(&dir)).and_then(|p| build_bank(&p, &cfg.memory, cfg.model.layers).map(|b| (p, b)));
    let (p, bank) = match desk {
        Ok(v) => v,
        Err(e) => {
            println!("[FAIL] desk setup: {e}");
            std::process::exit(1);
        }
    };
    println!("desk setup: {} phrase pairs, {} bank items ({:.1}s)", p.phrase_pairs.len(), bank.len(), start.elapsed().as_secs_f64());

    let mut report = ExperimentReport::default();
    outcomes.push(run(7, "desk-scale learning", false, || {
        report = run_systems(&cfg, &p, &bank, None)?;
        fs::write(dir.join("report.csv"), report.to_csv())?;
        c7_learning(&cfg, &report, start.elapsed().as_secs_f64())
    }));
    let memory: Vec<SystemRun> = report.runs.iter().filter(|r| r.system == System::Memory).cloned().collect();
    let vanilla = report.runs.iter().find(|r| r.system == System::Vanilla).cloned();

    outcomes.push(run(5, "oracle equivalences", false, || c5_oracles(&p, &bank)));
    outcomes.push(run(2, "frozen-base contract", false, || match &vanilla {
        Some(v) => c2_frozen_base(&cfg, &p, &bank, v, &dir),
        None => Ok((false, "no vanilla run to compare against".into())),
    }));

    let mut knn = Vec::new();
    outcomes.push(run(8, "kNN-decoding extension", false, || {
        if memory.is_empty() {
            return Ok((false, "no memory runs".into()));
        }
        for m in &memory {
            let trained = m.plugin.as_ref().map(|pl| (pl, &m.log));
            knn.push(run_system(&cfg, &p, &bank, System::MemoryKnn, m.seed, trained, Some(&dir))?);
        }
        c8_knn(&cfg, &p, &bank, &memory, &knn)
    }));

    outcomes.push(run(9, "ablation direction", true, || {
        if memory.len() != cfg.seeds.len() {
            return Ok((false, "memory runs missing".into()));
        }
        c9_ablations(&cfg, &p, &bank, &memory, &dir)
    }));
    outcomes.push(run(10, "data-scale sweep", false, || c10_data_scale(&cfg, &p, &bank, &report)));
    outcomes.push(run(11, "format roundtrips", false, || {
        let ds = match knn.first() {
            Some(k) => Datastore::load(&dir.join(format!("datastore_seed{}.bin", k.seed)))?,
            None => Datastore::build(&p.base, &Plugin::None, &p.corpora.custom_train)?,
        };
        c11_formats(&p, &bank, &report, &ds, &dir)
    }));

    let mut summary: HashMap<bool, usize> = HashMap::new();
    outcomes.sort_by_key(|o| o.id);
    println!("\nsummary");
    for o in &outcomes {
        print_line(o);
        *summary.entry(o.pass).or_default() += 1;
    }
    let hard_failures = outcomes.iter().filter(|o| !o.pass && !o.soft).count();
    println!(
        "{} passed, {} failed ({hard_failures} hard); artifacts in {}",
        summary.get(&true).unwrap_or(&0),
        summary.get(&false).unwrap_or(&0),
        dir.display()
    );
    if hard_failures > 0 {
        std::process::exit(1);
    }
}
