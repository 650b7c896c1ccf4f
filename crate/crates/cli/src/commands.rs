//! Subcommand definitions and their implementations.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lads_core::augnet::{load_augnet, save_augnet, AugNetParams};
use lads_core::eval::{accuracy, evaluate_pipeline, nn_scores, AugmentedQueries, Classifier};
use lads_core::probe::{assemble_training_set, load_probe, save_probe, train_probe, LinearProbe};
use lads_core::store::{load_bundle, load_prompt_bank, save_bundle, save_prompt_bank, EmbeddingBundle, Split};
use lads_core::synth::{generate_world, world_summary, WorldConfig};
use lads_core::zeroshot::{build_head, HeadMode};
use serde::Serialize;

use crate::config::{ExperimentConfig, Method, Mode, SweepGrid};
use crate::error::{CliError, Context, Result};
use crate::experiment::{load_inputs, read_json, run_experiment, sweep, write_json};
use crate::pipeline::{augment_all, resolve_domains, train_augmenters};

#[derive(Debug, Parser)]
#[command(name = "lads", version, about = "Latent domain augmentation over joint image/text embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world: bundle, prompt bank and ground truth.
    SynthGen(SynthGenArgs),
    /// Zero-shot accuracy per split and per domain.
    Zeroshot(ZeroshotArgs),
    /// Train the augmentation networks described by an experiment config.
    TrainAug(TrainAugArgs),
    /// Train a linear probe on original plus augmented training rows.
    TrainProbe(TrainProbeArgs),
    /// Evaluate a probe or zero-shot head on the test split.
    Eval(EvalArgs),
    /// Run every configured method over every seed.
    Run(RunArgs),
    /// Run a hyperparameter grid and select by validation accuracy.
    Sweep(SweepArgs),
    /// Nearest-neighbour domain-alignment and class-consistency scores.
    NnScore(NnScoreArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum HeadArg {
    Generic,
    Adaptive,
}

impl From<HeadArg> for HeadMode {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Generic => HeadMode::Generic,
            HeadArg::Adaptive => HeadMode::Adaptive,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Standard,
    Bias,
}

/// Experiment config plus command-line overrides.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub train_domain: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub unseen_domains: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub id_domains: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub extended_weight: Option<f64>,
    #[arg(long)]
    pub wise_mix: Option<f64>,
    #[arg(long)]
    pub nn_sample_size: Option<usize>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = &self.bundle {
            c.bundle = v.clone();
        }
        if let Some(v) = &self.prompts {
            c.prompts = v.clone();
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        if let Some(m) = self.mode {
            c.mode = match m {
                ModeArg::Standard => Mode::Standard,
                ModeArg::Bias => Mode::Bias,
            };
        }
        if let Some(v) = &self.train_domain {
            c.train_domain = v.clone();
        }
        if let Some(v) = &self.unseen_domains {
            c.unseen_domains = v.clone();
        }
        if let Some(v) = &self.id_domains {
            c.id_domains = Some(v.clone());
        }
        if let Some(v) = &self.methods {
            c.methods = v
                .iter()
                .map(|s| Method::parse(s).ok_or_else(|| CliError::config("methods", format!("unknown method `{s}`"))))
                .collect::<Result<_>>()?;
        }
        if let Some(v) = &self.seeds {
            c.seeds = v.clone();
        }
        if let Some(v) = self.alpha {
            c.aug.alpha = v;
        }
        if let Some(v) = self.extended_weight {
            c.extended_weight = v;
        }
        if let Some(v) = self.wise_mix {
            c.wise_mix = v;
        }
        if let Some(v) = self.nn_sample_size {
            c.nn_sample_size = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct SynthGenArgs {
    /// JSON world config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub domains: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub n_per_class: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ZeroshotArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long, value_enum, default_value = "generic")]
    pub head: HeadArg,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainAugArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Training seed; defaults to the first configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainProbeArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Augmentation networks whose outputs join the training rows.
    #[arg(long = "augnet")]
    pub augnets: Vec<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Probe file; without it a zero-shot head is scored.
    #[arg(long)]
    pub probe: Option<PathBuf>,
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "generic")]
    pub head: HeadArg,
    /// Bundle domains scored as in-domain.
    #[arg(long, value_delimiter = ',', required = true)]
    pub id_domains: Vec<String>,
    #[arg(long, default_value_t = 0.5)]
    pub extended_weight: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// JSON grid: lists for alpha, aug_lr, aug_weight_decay, probe_lr, probe_weight_decay.
    #[arg(long)]
    pub grid: PathBuf,
}

#[derive(Debug, Args)]
pub struct NnScoreArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Augmentation network files; each is applied to every training row.
    #[arg(long = "augnet", required = true)]
    pub augnets: Vec<PathBuf>,
    /// Target domain, for networks whose file does not record one.
    #[arg(long)]
    pub target_domain: Option<String>,
    #[arg(long, default_value_t = 1000)]
    pub sample_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            let text = serde_json::to_string_pretty(value).map_err(|e| CliError::core("json", e.into()))?;
            match writeln!(std::io::stdout().lock(), "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::io(Path::new("<stdout>"), e)),
                _ => Ok(()),
            }
        }
    }
}

fn synth_gen(a: &SynthGenArgs) -> Result<()> {
    let mut cfg: WorldConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => WorldConfig::default(),
    };
    if let Some(v) = a.dim {
        cfg.dim = v;
    }
    if let Some(v) = a.classes {
        cfg.classes = v;
    }
    if let Some(v) = a.domains {
        cfg.domains = v;
    }
    if let Some(v) = a.noise_sigma {
        cfg.noise_sigma = v;
    }
    if let Some(v) = a.n_per_class {
        cfg.n_per_class_per_domain = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let world = generate_world(&cfg).ctx("world config")?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(&a.out_dir, e))?;
    let bundle_path = a.out_dir.join("bundle.emb");
    save_bundle(&world.bundle, &bundle_path).ctx(bundle_path.display().to_string())?;
    let bank_path = a.out_dir.join("prompts.bank");
    save_prompt_bank(&world.bank, &bank_path).ctx(bank_path.display().to_string())?;
    write_json(&a.out_dir.join("truth.json"), &world.truth)?;
    let summary = world_summary(&world).ctx("world summary")?;
    write_json(&a.out_dir.join("summary.json"), &summary)?;
    emit(&summary, None)
}

#[derive(Debug, Serialize)]
struct ZeroshotReport {
    head: HeadMode,
    split_acc: BTreeMap<String, f64>,
    /// Accuracy per domain over all rows.
    domain_acc: BTreeMap<String, f64>,
}

fn zeroshot(a: &ZeroshotArgs) -> Result<()> {
    let bundle = load_bundle(&a.bundle).ctx(a.bundle.display().to_string())?;
    let bank = load_prompt_bank(&a.prompts).ctx(a.prompts.display().to_string())?;
    let head = build_head(&bank, a.head.into()).ctx("prompts")?;
    let preds = head.predict_rows(bundle.rows()).ctx("zeroshot")?;
    let labels = bundle.class_labels();
    let score = |idx: &[usize]| -> Result<f64> {
        let p: Vec<usize> = idx.iter().map(|&i| preds[i]).collect();
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        accuracy(&p, &y).ctx("zeroshot")
    };
    let mut split_acc = BTreeMap::new();
    for s in [Split::Train, Split::Val, Split::Test] {
        let idx = bundle.split_indices(s);
        if !idx.is_empty() {
            split_acc.insert(s.as_str().to_string(), score(&idx)?);
        }
    }
    let mut domain_acc = BTreeMap::new();
    if let Some(d) = bundle.domain_labels() {
        for (k, name) in bundle.domain_names().iter().enumerate() {
            let idx: Vec<usize> = (0..bundle.len()).filter(|&i| d[i] == k).collect();
            if !idx.is_empty() {
                domain_acc.insert(name.clone(), score(&idx)?);
            }
        }
    }
    emit(&ZeroshotReport { head: head.mode(), split_acc, domain_acc }, a.out.as_deref())
}

/// Trains the augmentation networks of `cfg` for one seed.
fn train_aug(a: &TrainAugArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let seed = a.seed.unwrap_or(cfg.seeds[0]);
    let (bundle, bank) = load_inputs(&cfg)?;
    let train = bundle.split(Split::Train).ctx("bundle")?;
    let dom = resolve_domains(&cfg, &bundle, &bank)?;
    let nets = train_augmenters(&cfg, &dom, &train, &bank, seed)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| CliError::io(&a.out_dir, e))?;
    for (k, aug) in nets.iter().enumerate() {
        let path = a.out_dir.join(format!("augnet_{k}.bin"));
        save_augnet(&aug.params, &aug.meta, &path).ctx(path.display().to_string())?;
        write_json(&a.out_dir.join(format!("augnet_{k}_log.json")), &aug.log)?;
    }
    Ok(())
}

fn load_nets(paths: &[PathBuf]) -> Result<Vec<(AugNetParams, lads_core::augnet::AugNetMeta)>> {
    paths
        .iter()
        .map(|p| load_augnet(p).ctx(p.display().to_string()))
        .collect()
}

fn train_probe_cmd(a: &TrainProbeArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let (bundle, bank) = load_inputs(&cfg)?;
    let train = bundle.split(Split::Train).ctx("bundle")?;
    let nets: Vec<AugNetParams> = load_nets(&a.augnets)?.into_iter().map(|(p, _)| p).collect();
    let (x, y) = assemble_training_set(train.rows(), train.class_labels(), &nets).ctx("augnet")?;
    let head = build_head(&bank, HeadMode::Generic).ctx("prompts")?;
    let mut pc = cfg.probe.clone();
    pc.seed = a.seed.unwrap_or(cfg.seeds[0]);
    let (probe, log) = train_probe(x.view(), &y, bundle.num_classes(), &pc, Some(&head)).ctx("probe")?;
    save_probe(&probe, &a.out).ctx(a.out.display().to_string())?;
    write_json(&a.out.with_extension("log.json"), &log)
}

fn domain_indices(bundle: &EmbeddingBundle, names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| bundle.domain_index(n).ctx("id_domains"))
        .collect()
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let bundle = load_bundle(&a.bundle).ctx(a.bundle.display().to_string())?;
    let test = bundle.split(Split::Test).ctx("bundle")?;
    let id = domain_indices(&bundle, &a.id_domains)?;
    let report = match (&a.probe, &a.prompts) {
        (Some(p), _) => {
            let probe: LinearProbe = load_probe(p).ctx(p.display().to_string())?;
            evaluate_pipeline(&probe, &test, &id, a.extended_weight).ctx("eval")?
        }
        (None, Some(pp)) => {
            let bank = load_prompt_bank(pp).ctx(pp.display().to_string())?;
            let head = build_head(&bank, a.head.into()).ctx("prompts")?;
            evaluate_pipeline(&head, &test, &id, a.extended_weight).ctx("eval")?
        }
        (None, None) => return Err(CliError::config("probe", "give --probe or --prompts")),
    };
    emit(&report, a.out.as_deref())
}

fn nn_score_cmd(a: &NnScoreArgs) -> Result<()> {
    let bundle = load_bundle(&a.bundle).ctx(a.bundle.display().to_string())?;
    let train = bundle.split(Split::Train).ctx("bundle")?;
    let test = bundle.split(Split::Test).ctx("bundle")?;
    let nets = load_nets(&a.augnets)?;
    let mut targets = Vec::new();
    for (params, meta) in &nets {
        let name = meta
            .target_domain
            .clone()
            .or_else(|| a.target_domain.clone())
            .ok_or_else(|| CliError::config("target_domain", "network records no target domain"))?;
        let t = bundle.domain_index(&name).ctx("target_domain")?;
        targets.extend(std::iter::repeat_n(t, train.len()));
        if params.dim() != bundle.dim() {
            return Err(CliError::core("augnet", lads_core::Error::DimMismatch { expected: bundle.dim(), actual: params.dim() }));
        }
    }
    let params: Vec<AugNetParams> = nets.into_iter().map(|(p, _)| p).collect();
    let rows = augment_all(train.rows(), &params)?;
    let classes: Vec<usize> = train.class_labels().iter().copied().cycle().take(rows.nrows()).collect();
    let k = a.sample_size.min(rows.nrows());
    let scores = nn_scores(
        AugmentedQueries { rows: rows.view(), target_domains: &targets, source_classes: &classes },
        &test,
        k,
        a.seed,
    )
    .ctx("nn-score")?;
    emit(&scores, a.out.as_deref())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::SynthGen(a) => synth_gen(a),
        Command::Zeroshot(a) => zeroshot(a),
        Command::TrainAug(a) => train_aug(a),
        Command::TrainProbe(a) => train_probe_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Run(a) => {
            let cfg = a.cfg.resolve()?;
            let agg = run_experiment(&cfg)?;
            emit(&agg, None)
        }
        Command::Sweep(a) => {
            let cfg = a.cfg.resolve()?;
            let grid: SweepGrid = read_json(&a.grid)?;
            let report = sweep(&cfg, &grid)?;
            emit(&report, None)
        }
        Command::NnScore(a) => nn_score_cmd(a),
    }
}
