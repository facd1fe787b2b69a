use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use harness::ablation::{run_ablation, write_ablation, Suite};
use harness::metrics::{bleu, style_marker_accuracy};
use harness::pipeline::{
    collect_phrases, init_plugin, prepare, run_experiment, seeded, write_provenance, ExperimentConfig,
    System,
};
use harness::synth::{self, Corpora};
use memplug::adapter::{Plugin, PluginParams};
use memplug::error::{Error, Result};
use memplug::knn::{decode_with_knn, Datastore};
use memplug::memory::{pair_phrases, partition_phrases, MemoryBank};
use memplug::nmt::{translate, BeamConfig, TransformerParams, EOS};
use memplug::trainer::train_adapters;

#[derive(Parser)]
#[command(name = "memplug", about = "Memory-augmented adapters for a frozen translation model")]
struct Cli {
    /// Experiment config (JSON); defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Data seed for gen-data, run seed elsewhere.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Workspace directory holding data and artifacts.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PluginKind {
    Memory,
    Bottleneck,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpora into <out>/data.
    GenData,
    /// Train the forward and reverse base models on the general corpus.
    TrainBase,
    /// Extract, back-translate, partition, and encode phrases into <out>/bank.bin.
    BuildMemory,
    /// Train a plugin against the frozen base model.
    TrainAdapter {
        #[arg(long, value_enum, default_value = "memory")]
        kind: PluginKind,
    },
    /// Build a kNN datastore from the customization corpus.
    BuildDatastore {
        /// Plugin active while collecting decoder states.
        #[arg(long)]
        plugin: Option<PathBuf>,
    },
    /// Translate whitespace-tokenized source lines.
    Translate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        plugin: Option<PathBuf>,
        /// Interpolate with this datastore.
        #[arg(long)]
        datastore: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score hypotheses against references: BLEU and style-marker accuracy.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Run an ablation suite with the memory adapter.
    Ablate {
        #[arg(long)]
        suite: String,
    },
    /// Run the full pipeline for every configured system and seed.
    Report,
}

struct Ctx {
    cfg: ExperimentConfig,
    seed: Option<u64>,
    out: PathBuf,
}

impl Ctx {
    fn data_dir(&self) -> PathBuf {
        self.cfg.artifacts.data_dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    fn corpora(&self) -> Result<Corpora> {
        synth::read_corpora(&self.data_dir())
    }

    fn model(&self, name: &str, over: &Option<PathBuf>) -> Result<TransformerParams> {
        TransformerParams::load(&over.clone().unwrap_or_else(|| self.out.join(name)))
    }

    fn base(&self) -> Result<TransformerParams> {
        self.model("base.bin", &self.cfg.artifacts.base)
    }

    fn bank(&self) -> Result<MemoryBank> {
        MemoryBank::load(&self.cfg.artifacts.bank.clone().unwrap_or_else(|| self.out.join("bank.bin")))
    }

    fn run_seed(&self) -> u64 {
        self.seed.unwrap_or(self.cfg.seeds[0])
    }

    /// Config with data, models, and bank pointing at this workspace.
    fn with_workspace_artifacts(&self) -> ExperimentConfig {
        let mut c = self.cfg.clone();
        let a = &mut c.artifacts;
        a.data_dir.get_or_insert_with(|| self.out.join("data"));
        a.base.get_or_insert_with(|| self.out.join("base.bin"));
        a.reverse.get_or_insert_with(|| self.out.join("reverse.bin"));
        c
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?.lines().map(str::to_string).collect())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut s = lines.join("\n");
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    let ctx = Ctx {
        cfg,
        seed: cli.seed,
        out: cli.out,
    };
    fs::create_dir_all(&ctx.out)?;
    let out = &ctx.out;
    match cli.command {
        Command::GenData => {
            let mut task = ctx.cfg.task.clone();
            if let Some(s) = ctx.seed {
                task.seed = s;
            }
            let c = synth::generate(&task)?;
            synth::write_corpora(&c, &out.join("data"))?;
            write_provenance(&out.join("data"), &task, &[task.seed])?;
        }
        Command::TrainBase => {
            let mut cfg = ctx.cfg.clone();
            cfg.artifacts.data_dir = Some(ctx.data_dir());
            cfg.memory.sentences = 0;
            prepare(&cfg, Some(out))?;
        }
        Command::BuildMemory => {
            let c = ctx.corpora()?;
            let base = ctx.base()?;
            let reverse = ctx.model("reverse.bin", &ctx.cfg.artifacts.reverse)?;
            let mem = &ctx.cfg.memory;
            let phrases = collect_phrases(&c, mem)?;
            let pairs = pair_phrases(&phrases, &reverse, &BeamConfig::new(mem.pair_beam, mem.l_max + 4))?;
            let pairs: Vec<_> = pairs
                .into_iter()
                .filter(|p| mem.only_len.is_none_or(|n| p.target_len() == n))
                .collect();
            let parted = partition_phrases(pairs, &c.tgt_vocab, &ctx.cfg.memory_layers(), mem.strategy)?;
            let (bank, skipped) = memplug::memory::build_memory(&parted, &base)?;
            bank.save(&out.join("bank.bin"))?;
            println!("memory items: {} (skipped {skipped})", bank.len());
        }
        Command::TrainAdapter { kind } => {
            let c = ctx.corpora()?;
            let base = ctx.base()?;
            let seed = ctx.run_seed();
            let system = match kind {
                PluginKind::Memory => System::Memory,
                PluginKind::Bottleneck => System::Bottleneck,
            };
            let mut plugin = init_plugin(&ctx.cfg, system, seed)?.expect("trainable system");
            let bank = match system {
                System::Memory => Some(ctx.bank()?),
                _ => None,
            };
            let (tc, lc) = seeded(&ctx.cfg, seed);
            let log = train_adapters(
                &base,
                &mut plugin,
                bank.as_ref(),
                ctx.cfg.usage,
                &c.custom_train,
                &c.custom_valid,
                &tc,
                &lc,
                Some(out),
            )?;
            plugin.quantize();
            let stem = format!("{}_seed{seed}", system.name());
            plugin.save(&out.join(format!("{stem}.bin")))?;
            fs::write(out.join(format!("{stem}.train.csv")), log.to_csv())?;
            fs::write(out.join(format!("{stem}.valid.csv")), log.valid_csv())?;
            println!("trainable parameters: {}", plugin.param_count());
        }
        Command::BuildDatastore { plugin } => {
            let c = ctx.corpora()?;
            let base = ctx.base()?;
            let (pl, bank) = load_plugin(&ctx, &plugin)?;
            let view = view(&pl, &bank, &ctx)?;
            let ds = Datastore::build(&base, &view, &c.custom_train)?;
            ds.save(&out.join("datastore.bin"))?;
            println!("datastore entries: {}", ds.len());
        }
        Command::Translate {
            input,
            plugin,
            datastore,
            output,
        } => {
            let c = ctx.corpora()?;
            let base = ctx.base()?;
            let (pl, bank) = load_plugin(&ctx, &plugin)?;
            let view = view(&pl, &bank, &ctx)?;
            let ds = datastore.as_deref().map(Datastore::load).transpose()?;
            let mut lines = Vec::new();
            for line in read_lines(&input)? {
                let x: Vec<u32> = c.src_vocab.tokenize(&line).into_iter().chain([EOS]).collect();
                let beam = ctx.cfg.beam_for(x.len());
                let y = match &ds {
                    Some(ds) => decode_with_knn(&x, &base, view, ds, &ctx.cfg.knn, &beam)?,
                    None => translate(&x, &base, view, &beam)?,
                };
                lines.push(c.tgt_vocab.detokenize(&y));
            }
            match output {
                Some(p) => write_lines(&p, &lines)?,
                None => lines.iter().for_each(|l| println!("{l}")),
            }
        }
        Command::Evaluate { hyp, reference } => {
            let c = ctx.corpora()?;
            let hyps = read_lines(&hyp)?;
            let refs = read_lines(&reference)?;
            let ids = |v: &[String]| -> Vec<Vec<u32>> { v.iter().map(|s| c.tgt_vocab.tokenize(s)).collect() };
            let (h, r) = (ids(&hyps), ids(&refs));
            println!("bleu,style_acc");
            println!("{},{}", bleu(&h, &r)?, style_marker_accuracy(&h, &r, &c.style_ids()));
        }
        Command::Ablate { suite } => {
            let suite: Suite = suite.parse()?;
            let cfg = ctx.with_workspace_artifacts();
            let p = prepare(&cfg, None)?;
            let report = run_ablation(suite, &cfg, &p)?;
            write_ablation(&report, &cfg, out)?;
            print!("{}", report.to_csv());
        }
        Command::Report => {
            let report = run_experiment(&ctx.cfg, out)?;
            print!("{}", report.to_csv());
        }
    }
    Ok(())
}

fn load_plugin(ctx: &Ctx, path: &Option<PathBuf>) -> Result<(Option<PluginParams>, Option<MemoryBank>)> {
    let Some(path) = path else { return Ok((None, None)) };
    let pl = PluginParams::load(path)?;
    let bank = match pl {
        PluginParams::Memory(_) => Some(ctx.bank()?),
        PluginParams::Bottleneck(_) => None,
    };
    Ok((Some(pl), bank))
}

fn view<'a>(pl: &'a Option<PluginParams>, bank: &'a Option<MemoryBank>, ctx: &Ctx) -> Result<Plugin<'a>> {
    match pl {
        None => Ok(Plugin::None),
        Some(p) => p.view(bank.as_ref(), ctx.cfg.usage),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
