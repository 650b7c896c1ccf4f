//! One seed of the full experiment, entirely in memory.

use lads_core::augnet::{train_augnet, AugNetMeta, AugNetParams, AugTrainConfig, DomainPair, TrainLog};
use lads_core::eval::{
    class_balanced_accuracy, evaluate_pipeline, nn_scores, AugmentedQueries, Classifier, EvalReport,
};
use lads_core::probe::{assemble_training_set, train_probe, wise_ensemble, LinearProbe, ProbeInit, ProbeLog};
use lads_core::store::{EmbeddingBundle, PromptBank, Split};
use lads_core::zeroshot::{assign_domains, build_head, HeadMode, ZeroShotHead};
use lads_core::Error;
use ndarray::{concatenate, Array2, Axis};

use crate::config::{ExperimentConfig, Method, Mode};
use crate::error::{CliError, Context, Result};

/// Domain names from the config resolved against the bank and bundle.
#[derive(Debug, Clone)]
pub struct Domains {
    /// Bank index of the training domain.
    pub train: usize,
    /// Bank indices of the unseen domains.
    pub unseen: Vec<usize>,
    /// Bundle indices treated as in-domain at evaluation.
    pub id_bundle: Vec<usize>,
    /// Bundle index for each bank domain, when the bundle has it.
    pub bank_to_bundle: Vec<Option<usize>>,
}

pub fn resolve_domains(cfg: &ExperimentConfig, bundle: &EmbeddingBundle, bank: &PromptBank) -> Result<Domains> {
    let train = bank.domain_index(&cfg.train_domain).ctx("train_domain")?;
    let unseen = cfg
        .unseen_domains
        .iter()
        .map(|d| bank.domain_index(d))
        .collect::<lads_core::Result<Vec<_>>>()
        .ctx("unseen_domains")?;
    let id_bundle = cfg
        .id_domain_names()
        .iter()
        .map(|d| bundle.domain_index(d))
        .collect::<lads_core::Result<Vec<_>>>()
        .ctx("id_domains")?;
    let bank_to_bundle = bank.domain_names().iter().map(|n| bundle.domain_index(n).ok()).collect();
    Ok(Domains { train, unseen, id_bundle, bank_to_bundle })
}

/// A trained augmentation network with the target domain of every
/// training row it was fit on.
#[derive(Debug, Clone)]
pub struct TrainedAugmenter {
    pub params: AugNetParams,
    pub meta: AugNetMeta,
    pub log: TrainLog,
    /// Bank domain index each training row was pushed toward.
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    /// In config method order.
    pub reports: Vec<(Method, EvalReport)>,
    pub probes: Vec<(Method, LinearProbe, Option<ProbeLog>)>,
    pub augmenters: Vec<TrainedAugmenter>,
}

impl SeedRun {
    pub fn report(&self, m: Method) -> Option<&EvalReport> {
        self.reports.iter().find(|(k, _)| *k == m).map(|(_, r)| r)
    }
}

/// Per-row (source, target) pairs for every augmentation network.
///
/// Standard mode has one network per unseen domain. Bias mode assigns each
/// row a source among the candidate domains (training domain first) and
/// network `j` targets the candidate `j` places after it, cyclically.
fn augmentation_plan(
    cfg: &ExperimentConfig,
    dom: &Domains,
    train: &EmbeddingBundle,
    bank: &PromptBank,
) -> Result<Vec<(Vec<DomainPair>, AugNetMeta)>> {
    let n = train.len();
    match cfg.mode {
        Mode::Standard => Ok(dom
            .unseen
            .iter()
            .map(|&k| {
                let meta = AugNetMeta {
                    source_domain: Some(bank.domain_names()[dom.train].clone()),
                    target_domain: Some(bank.domain_names()[k].clone()),
                };
                (vec![DomainPair::new(dom.train, k); n], meta)
            })
            .collect()),
        Mode::Bias => {
            let candidates: Vec<usize> = std::iter::once(dom.train).chain(dom.unseen.iter().copied()).collect();
            let assigned = assign_domains(train, bank, &candidates).ctx("bias-mode domain assignment")?;
            let k = candidates.len();
            let pos = |d: usize| candidates.iter().position(|&c| c == d).expect("assigned from candidates");
            Ok((1..k)
                .map(|j| {
                    let pairs = assigned
                        .iter()
                        .map(|&a| DomainPair::new(a, candidates[(pos(a) + j) % k]))
                        .collect();
                    (pairs, AugNetMeta::default())
                })
                .collect())
        }
    }
}

/// Trains every augmentation network for `seed` on the training rows.
pub fn train_augmenters(
    cfg: &ExperimentConfig,
    dom: &Domains,
    train: &EmbeddingBundle,
    bank: &PromptBank,
    seed: u64,
) -> Result<Vec<TrainedAugmenter>> {
    let aug_cfg = AugTrainConfig { seed, ..cfg.aug.clone() };
    augmentation_plan(cfg, dom, train, bank)?
        .into_iter()
        .map(|(pairs, meta)| {
            let (params, log) = train_augnet(train.rows(), train.class_labels(), &pairs, bank, &aug_cfg).ctx("aug")?;
            let targets = pairs.iter().map(|p| p.target).collect();
            Ok(TrainedAugmenter { params, meta, log, targets })
        })
        .collect()
}

fn with_val(
    model: &impl Classifier,
    test: &EmbeddingBundle,
    val: Option<&EmbeddingBundle>,
    dom: &Domains,
    w: f64,
) -> Result<EvalReport> {
    let mut r = evaluate_pipeline(model, test, &dom.id_bundle, w).ctx("evaluation")?;
    if let Some(val) = val {
        let preds = model.predict_rows(val.rows()).ctx("validation")?;
        r.val_balanced_acc = Some(
            class_balanced_accuracy(&preds, val.class_labels(), val.num_classes())
                .ctx("validation")?
                .value,
        );
    }
    Ok(r)
}

/// Runs every configured method for one seed.
pub fn run_seed(cfg: &ExperimentConfig, bundle: &EmbeddingBundle, bank: &PromptBank, seed: u64) -> Result<SeedRun> {
    if bundle.num_classes() != bank.num_classes() {
        return Err(CliError::core(
            "prompts",
            Error::Shape(format!(
                "bundle has {} classes, prompt bank {}",
                bundle.num_classes(),
                bank.num_classes()
            )),
        ));
    }
    if bundle.dim() != bank.dim() {
        return Err(CliError::core(
            "prompts",
            Error::DimMismatch { expected: bundle.dim(), actual: bank.dim() },
        ));
    }
    let dom = resolve_domains(cfg, bundle, bank)?;
    let train = bundle.split(Split::Train).ctx("bundle")?;
    let test = bundle.split(Split::Test).ctx("bundle")?;
    let val = bundle.split(Split::Val).ok();
    let c = bundle.num_classes();
    let w = cfg.extended_weight;

    let generic = build_head(bank, HeadMode::Generic).ctx("prompts")?;
    let mut probe_cfg = cfg.probe.clone();
    probe_cfg.seed = seed;

    let fit = |x: ndarray::ArrayView2<f64>, y: &[usize], init: ProbeInit| -> Result<(LinearProbe, ProbeLog)> {
        let pc = lads_core::probe::ProbeConfig { init, ..probe_cfg.clone() };
        train_probe(x, y, c, &pc, Some(&generic)).ctx("probe")
    };

    let mut run = SeedRun { seed, reports: Vec::new(), probes: Vec::new(), augmenters: Vec::new() };
    let mut zs_init: Option<(LinearProbe, ProbeLog)> = None;

    for &method in &cfg.methods {
        let report = match method {
            Method::ZsGeneric => with_val(&generic, &test, val.as_ref(), &dom, w)?,
            Method::ZsAdaptive => {
                let head: ZeroShotHead = build_head(bank, HeadMode::Adaptive).ctx("prompts")?;
                with_val(&head, &test, val.as_ref(), &dom, w)?
            }
            Method::Lp => {
                let (p, log) = fit(train.rows(), train.class_labels(), ProbeInit::Zeros)?;
                let r = with_val(&p, &test, val.as_ref(), &dom, w)?;
                run.probes.push((method, p, Some(log)));
                r
            }
            Method::LpZsInit | Method::Wise => {
                if zs_init.is_none() {
                    zs_init = Some(fit(train.rows(), train.class_labels(), ProbeInit::ZeroShot)?);
                }
                let (p, log) = zs_init.clone().expect("just trained");
                let (p, log) = if method == Method::Wise {
                    (wise_ensemble(&p, &generic, cfg.wise_mix).ctx("wise_mix")?, None)
                } else {
                    (p, Some(log))
                };
                let r = with_val(&p, &test, val.as_ref(), &dom, w)?;
                run.probes.push((method, p, log));
                r
            }
            Method::Lads => {
                let nets = train_augmenters(cfg, &dom, &train, bank, seed)?;
                let params: Vec<AugNetParams> = nets.iter().map(|n| n.params.clone()).collect();
                let (x, y) = assemble_training_set(train.rows(), train.class_labels(), &params).ctx("aug")?;
                let (p, log) = fit(x.view(), &y, cfg.probe.init)?;
                let mut r = with_val(&p, &test, val.as_ref(), &dom, w)?;

                let aug_rows = x.slice(ndarray::s![train.len().., ..]);
                if let Some(scores) = augmentation_scores(aug_rows, &nets, train.class_labels(), &test, &dom, cfg, seed)? {
                    r.da_score = Some(scores.0);
                    r.cc_score = Some(scores.1);
                }
                run.probes.push((method, p, Some(log)));
                run.augmenters = nets;
                r
            }
        };
        run.reports.push((method, report));
    }
    Ok(run)
}

/// NN-based DA/CC scores of the augmented rows; `None` when a target domain
/// is absent from the test bundle.
fn augmentation_scores(
    aug_rows: ndarray::ArrayView2<f64>,
    nets: &[TrainedAugmenter],
    source_classes: &[usize],
    test: &EmbeddingBundle,
    dom: &Domains,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Option<(f64, f64)>> {
    if nets.is_empty() {
        return Ok(None);
    }
    let mut targets = Vec::with_capacity(aug_rows.nrows());
    for net in nets {
        for &t in &net.targets {
            match dom.bank_to_bundle[t] {
                Some(b) => targets.push(b),
                None => return Ok(None),
            }
        }
    }
    let classes: Vec<usize> = source_classes.iter().copied().cycle().take(aug_rows.nrows()).collect();
    let k = cfg.nn_sample_size.min(aug_rows.nrows());
    let s = nn_scores(
        AugmentedQueries { rows: aug_rows, target_domains: &targets, source_classes: &classes },
        test,
        k,
        seed,
    )
    .ctx("nn_sample_size")?;
    Ok(Some((s.da_score, s.cc_score)))
}

/// Stacked outputs of every network on `rows`, for external scoring.
pub fn augment_all(rows: ndarray::ArrayView2<f64>, nets: &[AugNetParams]) -> Result<Array2<f64>> {
    let outs = nets
        .iter()
        .map(|n| n.forward_batch(rows))
        .collect::<lads_core::Result<Vec<_>>>()
        .ctx("aug")?;
    let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| CliError::core("aug", Error::Shape(e.to_string())))
}
