//! Ablation suites: each variant changes one knob of the memory adapter pipeline.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use memplug::adapter::GateMode;
use memplug::error::{Error, Result};
use memplug::memory::PartitionStrategy;
use memplug::trainer::DropoutLevel;
use serde::Serialize;
use serde_json::Value;

use crate::pipeline::{build_bank, run_system, write_provenance, ExperimentConfig, Prepared, System};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    GranularityOrder,
    DropoutLevel,
    MemoryUsage,
    Layers,
    GranularityMix,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::GranularityOrder,
        Suite::DropoutLevel,
        Suite::MemoryUsage,
        Suite::Layers,
        Suite::GranularityMix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::GranularityOrder => "granularity_order",
            Suite::DropoutLevel => "dropout_level",
            Suite::MemoryUsage => "memory_usage",
            Suite::Layers => "layers",
            Suite::GranularityMix => "granularity_mix",
        }
    }

    /// Config paths a variant of this suite may change.
    pub fn knobs(self) -> &'static [&'static str] {
        match self {
            Suite::GranularityOrder => &["memory.strategy"],
            Suite::DropoutLevel => &["loss.dropout_rate", "loss.dropout_level"],
            Suite::MemoryUsage => &["usage.gate", "usage.use_source", "usage.use_target"],
            Suite::Layers => &["memory.layers"],
            Suite::GranularityMix => &["memory.only_len"],
        }
    }

    /// Named configs; the first is the unablated pipeline.
    pub fn variants(self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        let named = |n: &str, c: ExperimentConfig| (n.to_string(), c);
        match self {
            Suite::GranularityOrder => vec![
                named("short_to_long", with(&|c| c.memory.strategy = PartitionStrategy::ShortToLong)),
                named("random", with(&|c| c.memory.strategy = PartitionStrategy::Random(0))),
                named("long_to_short", with(&|c| c.memory.strategy = PartitionStrategy::LongToShort)),
            ],
            Suite::DropoutLevel => vec![
                named("item", with(&|c| c.loss.dropout_level = DropoutLevel::Item)),
                named("none", with(&|c| c.loss.dropout_rate = 0.0)),
                named("layer", with(&|c| c.loss.dropout_level = DropoutLevel::Layer)),
            ],
            Suite::MemoryUsage => vec![
                named("full", base.clone()),
                named("no_gated_fusion", with(&|c| c.usage.gate = GateMode::Fixed(0.5))),
                named("no_source_memory", with(&|c| c.usage.use_source = false)),
                named("no_target_memory", with(&|c| c.usage.use_target = false)),
            ],
            Suite::Layers => {
                let last = base.model.layers - 1;
                let mut v = vec![named("all", with(&|c| c.memory.layers = None))];
                v.push(named("first", with(&|c| c.memory.layers = Some(vec![0]))));
                if last > 0 {
                    v.push(named("last", with(&|c| c.memory.layers = Some(vec![last]))));
                }
                v
            }
            Suite::GranularityMix => {
                let mut v = vec![named("mixed", with(&|c| c.memory.only_len = None))];
                for n in 1..=base.memory.l_max.min(3) {
                    v.push((format!("only_{n}"), with(&|c| c.memory.only_len = Some(n))));
                }
                v
            }
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation suite {s:?}")))
    }
}

/// Dotted paths of leaves that differ between two JSON values.
pub fn json_diff(a: &Value, b: &Value) -> Vec<String> {
    fn walk(a: &Value, b: &Value, path: &str, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    match (x.get(k), y.get(k)) {
                        (Some(u), Some(v)) => walk(u, v, &p, out),
                        _ => out.push(p),
                    }
                }
            }
            _ if a != b => out.push(path.to_string()),
            _ => {}
        }
    }
    let mut out = Vec::new();
    walk(a, b, "", &mut out);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub valid_nll: f64,
    pub bleu: f64,
    pub style_acc: f64,
    pub memory_items: usize,
    pub curve: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub suite: Suite,
    pub rows: Vec<AblationRow>,
    /// Config paths each variant changes relative to the input config.
    pub diffs: Vec<(String, Vec<String>)>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("suite,variant,seed,final_valid_nll,bleu,style_acc,memory_items\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                self.suite.name(),
                r.variant,
                r.seed,
                r.valid_nll,
                r.bleu,
                r.style_acc,
                r.memory_items
            );
        }
        s
    }

    pub fn curves_csv(&self) -> String {
        let mut s = String::from("variant,seed,step,valid_nll\n");
        for r in &self.rows {
            for (step, v) in &r.curve {
                let _ = writeln!(s, "{},{},{step},{v}", r.variant, r.seed);
            }
        }
        s
    }

    pub fn get(&self, variant: &str, seed: u64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    /// Seeds where `variant_a` has final validation NLL ≤ `variant_b`'s.
    pub fn count_le(&self, variant_a: &str, variant_b: &str) -> usize {
        self.rows
            .iter()
            .filter(|r| r.variant == variant_a)
            .filter(|r| self.get(variant_b, r.seed).is_some_and(|b| r.valid_nll <= b.valid_nll))
            .count()
    }
}

/// Runs every variant of `suite` with the memory adapter for each configured seed.
pub fn run_ablation(suite: Suite, cfg: &ExperimentConfig, p: &Prepared) -> Result<AblationReport> {
    let base_json = serde_json::to_value(cfg)?;
    let mut rows = Vec::new();
    let mut diffs = Vec::new();
    for (name, vcfg) in suite.variants(cfg) {
        vcfg.validate()?;
        let diff = json_diff(&base_json, &serde_json::to_value(&vcfg)?);
        if let Some(extra) = diff.iter().find(|d| !suite.knobs().iter().any(|k| d.starts_with(k))) {
            return Err(Error::Contract(format!("variant {name} changes {extra} outside its suite")));
        }
        diffs.push((name.clone(), diff));
        let bank = build_bank(p, &vcfg.memory, vcfg.model.layers)?;
        for &seed in &cfg.seeds {
            let run = run_system(&vcfg, p, &bank, System::Memory, seed, None, None)?;
            log::info!("{} / {name} seed {seed}: valid_nll {:.4}", suite.name(), run.valid_nll);
            rows.push(AblationRow {
                variant: name.clone(),
                seed,
                valid_nll: run.valid_nll,
                bleu: run.bleu,
                style_acc: run.style_acc,
                memory_items: bank.len(),
                curve: run.log.valid.clone(),
            });
        }
    }
    Ok(AblationReport { suite, rows, diffs })
}

#[derive(Serialize)]
struct AblationRecord<'a> {
    suite: Suite,
    config: &'a ExperimentConfig,
    variant_diffs: &'a [(String, Vec<String>)],
}

/// Writes `ablation_<suite>.csv`, its curves, and a provenance record into `out`.
pub fn write_ablation(report: &AblationReport, cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let name = report.suite.name();
    fs::write(out.join(format!("ablation_{name}.csv")), report.to_csv())?;
    fs::write(out.join(format!("ablation_{name}_curves.csv")), report.curves_csv())?;
    let record = AblationRecord {
        suite: report.suite,
        config: cfg,
        variant_diffs: &report.diffs,
    };
    write_provenance(out, &record, &cfg.seeds)?;
    Ok(())
}
