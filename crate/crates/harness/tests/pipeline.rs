//! End-to-end pipeline and ablation runs on a tiny configuration.

mod common;

use std::collections::BTreeSet;
use std::fs;

use common::tiny_config;
use harness::ablation::{json_diff, run_ablation, Suite};
use harness::pipeline::{build_bank, file_sha256, prepare, run_experiment, Provenance, System, PROVENANCE, REPORT};
use memplug::adapter::{AdapterParams, GateMode, MemoryUsage, PluginParams, Site};
use memplug::error::Error;
use memplug::memory::MemoryBank;
use memplug::nmt::{forward_with_plugin, BOS};

#[test]
fn reruns_are_identical_and_provenance_matches_files() {
    let cfg = tiny_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_experiment(&cfg, a.path()).unwrap();
    run_experiment(&cfg, b.path()).unwrap();
    let csv = fs::read(a.path().join(REPORT)).unwrap();
    assert_eq!(csv, fs::read(b.path().join(REPORT)).unwrap());

    let keys: BTreeSet<(System, u64)> = ra.runs.iter().map(|r| (r.system, r.seed)).collect();
    assert_eq!(keys.len(), ra.runs.len());
    assert_eq!(keys.len(), cfg.systems.len() * cfg.seeds.len());
    for r in &ra.runs {
        assert!((0.0..=100.0).contains(&r.bleu) && (0.0..=1.0).contains(&r.style_acc) && r.valid_nll.is_finite());
    }

    let prov: Provenance = serde_json::from_str(&fs::read_to_string(a.path().join(PROVENANCE)).unwrap()).unwrap();
    assert!(prov.files.contains_key(REPORT) && prov.files.contains_key("bank.bin"));
    for (rel, hash) in &prov.files {
        assert_eq!(&file_sha256(&a.path().join(rel)).unwrap(), hash, "{rel}");
    }
    let prov_b: Provenance = serde_json::from_str(&fs::read_to_string(b.path().join(PROVENANCE)).unwrap()).unwrap();
    // Everything but the wall-clock timings is reproducible.
    let stable = |p: &Provenance| {
        let mut f = p.files.clone();
        f.remove("timing.csv");
        f
    };
    assert_eq!(stable(&prov), stable(&prov_b));
    assert_eq!(prov.config, serde_json::to_value(&cfg).unwrap());
}

#[test]
fn missing_artifacts_are_named() {
    let mut cfg = tiny_config();
    cfg.artifacts.base = Some("/nonexistent/base.bin".into());
    let err = prepare(&cfg, None).err().unwrap();
    assert!(matches!(err, Error::Missing(_)));
    assert!(err.to_string().contains("/nonexistent/base.bin"));

    let mut cfg = tiny_config();
    cfg.artifacts.data_dir = Some("/nonexistent/data".into());
    let err = prepare(&cfg, None).err().unwrap();
    assert!(err.to_string().contains("/nonexistent/data"), "{err}");
}

#[test]
fn ablation_variants_do_what_they_claim() {
    let cfg = tiny_config();
    let p = prepare(&cfg, None).unwrap();
    let n_layers = cfg.model.layers;

    // Only-1 keeps single-token targets only.
    let only1 = Suite::GranularityMix.variants(&cfg).into_iter().find(|v| v.0 == "only_1").unwrap().1;
    let bank = build_bank(&p, &only1.memory, n_layers).unwrap();
    assert!(!bank.is_empty());
    assert!(bank.layers().iter().flat_map(|l| &l.pairs).all(|pp| pp.target_len() == 1));

    // Last layer only: every phrase lands there and only that layer adapts.
    let full = build_bank(&p, &cfg.memory, n_layers).unwrap();
    let last_cfg = Suite::Layers.variants(&cfg).into_iter().find(|v| v.0 == "last").unwrap().1;
    let last = build_bank(&p, &last_cfg.memory, n_layers).unwrap();
    assert_eq!(last.len(), full.len());
    assert_eq!(last.layer(n_layers - 1).len(), full.len());

    let mut adapter = AdapterParams::init(cfg.model.d_model, n_layers, 1, cfg.gate_offset).unwrap();
    for t in adapter.tensors_mut() {
        t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = ((i % 7) as f64 - 3.0) * 0.05);
    }
    let plugin = PluginParams::Memory(adapter);
    let x = p.corpora.custom_test[0].src.clone();
    let y: Vec<u32> = [BOS].into_iter().chain(p.corpora.custom_test[0].tgt.clone()).collect();
    let traced = |bank: &MemoryBank, usage: MemoryUsage| {
        let out = forward_with_plugin(&x, &y, &p.base, &plugin.view(Some(bank), usage).unwrap(), false).unwrap();
        out.traces.iter().map(|(l, s, _)| (*l, *s)).collect::<Vec<_>>()
    };
    let sites = traced(&last, last_cfg.usage);
    assert!(!sites.is_empty() && sites.iter().all(|(l, _)| *l == n_layers - 1));

    // Without source memory, cross sites pass through everywhere.
    let no_src = Suite::MemoryUsage.variants(&cfg).into_iter().find(|v| v.0 == "no_source_memory").unwrap().1;
    let sites = traced(&full, no_src.usage);
    assert!(sites.iter().all(|(_, s)| *s == Site::SelfAttn));
    assert_eq!(sites.len(), (0..n_layers).filter(|&l| !full.layer(l).is_empty()).count());

    let fixed = Suite::MemoryUsage.variants(&cfg).into_iter().find(|v| v.0 == "no_gated_fusion").unwrap().1;
    assert_eq!(fixed.usage, MemoryUsage { gate: GateMode::Fixed(0.5), ..MemoryUsage::default() });
}

#[test]
fn ablation_report_covers_variants_and_diffs_stay_in_knobs() {
    let cfg = tiny_config();
    let p = prepare(&cfg, None).unwrap();
    let report = run_ablation(Suite::DropoutLevel, &cfg, &p).unwrap();
    assert_eq!(report.rows.len(), 3 * cfg.seeds.len());
    let base = serde_json::to_value(&cfg).unwrap();
    for (name, v) in Suite::DropoutLevel.variants(&cfg) {
        let d = json_diff(&base, &serde_json::to_value(&v).unwrap());
        let recorded = &report.diffs.iter().find(|x| x.0 == name).unwrap().1;
        assert_eq!(&d, recorded);
        assert!(d.iter().all(|k| k.starts_with("loss.")));
    }
    assert!(report.rows.iter().all(|r| !r.curve.is_empty() && r.curve.last().unwrap().1 == r.valid_nll));
    assert!(report.curves_csv().lines().count() > report.rows.len());
}
