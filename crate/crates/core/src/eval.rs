//! Accuracy metrics and nearest-neighbour augmentation scores.

use std::collections::BTreeMap;

use ndarray::{ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::LinearProbe;
use crate::store::{check_dim, l2_norm, EmbeddingBundle, EPS_NORM};
use crate::zeroshot::ZeroShotHead;

fn check_pair(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput("no predictions to score".into()));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Accuracy within each group `0..groups`; `None` for groups with no rows.
fn grouped_accuracy(preds: &[usize], labels: &[usize], group: &[usize], groups: usize) -> Result<Vec<Option<f64>>> {
    check_pair(preds, labels)?;
    if group.len() != preds.len() {
        return Err(Error::Shape(format!("{} group tags for {} predictions", group.len(), preds.len())));
    }
    let mut hits = vec![0usize; groups];
    let mut counts = vec![0usize; groups];
    for ((p, y), &g) in preds.iter().zip(labels).zip(group) {
        if g >= groups {
            return Err(Error::Label(format!("group {g} >= {groups}")));
        }
        counts[g] += 1;
        hits[g] += usize::from(p == y);
    }
    Ok(hits
        .iter()
        .zip(&counts)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect())
}

pub fn per_class_accuracy(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Option<f64>>> {
    grouped_accuracy(preds, labels, labels, num_classes)
}

pub fn per_domain_accuracy(
    preds: &[usize],
    labels: &[usize],
    domains: &[usize],
    num_domains: usize,
) -> Result<Vec<Option<f64>>> {
    grouped_accuracy(preds, labels, domains, num_domains)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedAccuracy {
    pub value: f64,
    /// Classes with no rows; they are left out of the mean.
    pub missing_classes: Vec<usize>,
}

/// Unweighted mean of per-class accuracies over the classes that occur.
pub fn class_balanced_accuracy(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<BalancedAccuracy> {
    let per = per_class_accuracy(preds, labels, num_classes)?;
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    Ok(BalancedAccuracy {
        value: present.iter().sum::<f64>() / present.len() as f64,
        missing_classes: per.iter().enumerate().filter(|(_, a)| a.is_none()).map(|(c, _)| c).collect(),
    })
}

/// `w·id + (1 − w)·ood`.
pub fn extended_accuracy(id_acc: f64, ood_acc: f64, weight: f64) -> Result<f64> {
    for (name, v) in [("id_acc", id_acc), ("ood_acc", ood_acc), ("weight", weight)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Range(format!("{name} {v} outside [0, 1]")));
        }
    }
    Ok(weight * id_acc + (1.0 - weight) * ood_acc)
}

/// `k` distinct indices from `0..n`, drawn with a seeded generator.
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k > n {
        return Err(Error::Range(format!("sample size {k} exceeds {n} available rows")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, n, k).into_vec())
}

/// Augmented embeddings tagged with the domain they were pushed toward and
/// the class of the row they came from.
#[derive(Debug, Clone, Copy)]
pub struct AugmentedQueries<'a> {
    pub rows: ArrayView2<'a, f64>,
    pub target_domains: &'a [usize],
    pub source_classes: &'a [usize],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NnScores {
    pub da_score: f64,
    pub cc_score: f64,
    pub sample_size: usize,
}

/// Index of the cosine-nearest test row; ties go to the lowest index.
pub fn nearest_neighbor(query: ArrayView1<f64>, test_rows: ArrayView2<f64>, test_norms: &[f64]) -> Result<usize> {
    let nq = l2_norm(query);
    if !(nq > EPS_NORM) {
        return Err(Error::ZeroVector { norm: nq });
    }
    let mut best = 0;
    let mut best_cos = f64::NEG_INFINITY;
    for (j, t) in test_rows.axis_iter(Axis(0)).enumerate() {
        let cos = query.dot(&t) / (nq * test_norms[j]);
        if cos > best_cos {
            best = j;
            best_cos = cos;
        }
    }
    Ok(best)
}

/// Domain-alignment and class-consistency scores of a seeded sample of
/// augmented rows, judged by their exact cosine nearest neighbour in `test`.
pub fn nn_scores(queries: AugmentedQueries, test: &EmbeddingBundle, sample_size: usize, seed: u64) -> Result<NnScores> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let test_domains = test.domain_labels().ok_or(Error::MissingDomainLabels)?;
    check_dim(test.dim(), queries.rows.ncols())?;
    let n = queries.rows.nrows();
    if queries.target_domains.len() != n || queries.source_classes.len() != n {
        return Err(Error::Shape(format!(
            "{n} augmented rows but {} domain tags and {} class tags",
            queries.target_domains.len(),
            queries.source_classes.len()
        )));
    }
    if sample_size == 0 {
        return Err(Error::Range("sample size must be positive".into()));
    }
    let picks = sample_indices(n, sample_size, seed)?;
    let test_rows = test.rows();
    let norms: Vec<f64> = test_rows.axis_iter(Axis(0)).map(l2_norm).collect();
    let neighbors = picks
        .par_iter()
        .map(|&i| nearest_neighbor(queries.rows.row(i), test_rows, &norms))
        .collect::<Result<Vec<usize>>>()?;
    let (mut da, mut cc) = (0usize, 0usize);
    for (&i, &j) in picks.iter().zip(&neighbors) {
        da += usize::from(test_domains[j] == queries.target_domains[i]);
        cc += usize::from(test.class_labels()[j] == queries.source_classes[i]);
    }
    Ok(NnScores {
        da_score: da as f64 / sample_size as f64,
        cc_score: cc as f64 / sample_size as f64,
        sample_size,
    })
}

/// Anything that labels a batch of embeddings.
pub trait Classifier {
    fn predict_rows(&self, xs: ArrayView2<f64>) -> Result<Vec<usize>>;
}

impl Classifier for LinearProbe {
    fn predict_rows(&self, xs: ArrayView2<f64>) -> Result<Vec<usize>> {
        self.predict_batch(xs)
    }
}

impl Classifier for ZeroShotHead {
    fn predict_rows(&self, xs: ArrayView2<f64>) -> Result<Vec<usize>> {
        LinearProbe::from_head(self).predict_batch(xs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub id_acc: f64,
    /// Mean of the per-domain accuracies over every non-ID domain present.
    pub ood_acc: f64,
    pub extended_acc: f64,
    pub extended_weight: f64,
    /// Class-balanced accuracy on the ID rows.
    pub class_balanced_acc: f64,
    /// Class-balanced accuracy on the validation split, used for selection.
    pub val_balanced_acc: Option<f64>,
    pub per_domain_acc: BTreeMap<String, f64>,
    /// Per-class accuracy on the ID rows.
    pub per_class_acc: BTreeMap<String, f64>,
    pub da_score: Option<f64>,
    pub cc_score: Option<f64>,
    pub sample_counts: BTreeMap<String, usize>,
}

/// Scores `model` on every row of `test`. Rows whose domain is listed in
/// `id_domains` are in-domain; each other domain present counts once
/// toward the OOD mean.
pub fn evaluate_pipeline(
    model: &impl Classifier,
    test: &EmbeddingBundle,
    id_domains: &[usize],
    extended_weight: f64,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let domains = test.domain_labels().ok_or(Error::MissingDomainLabels)?;
    let k = test.domain_names().len();
    if let Some(&d) = id_domains.iter().find(|&&d| d >= k) {
        return Err(Error::UnknownDomain(format!("domain index {d} (bundle has {k})")));
    }
    let preds = model.predict_rows(test.rows())?;
    let labels = test.class_labels();
    let per_domain = per_domain_accuracy(&preds, labels, domains, k)?;

    let id_rows: Vec<usize> = (0..test.len()).filter(|&i| id_domains.contains(&domains[i])).collect();
    if id_rows.is_empty() {
        return Err(Error::EmptyInput("no in-domain rows in the test set".into()));
    }
    let ood: Vec<f64> = per_domain
        .iter()
        .enumerate()
        .filter(|(d, _)| !id_domains.contains(d))
        .filter_map(|(_, a)| *a)
        .collect();
    if ood.is_empty() {
        return Err(Error::EmptyInput("no unseen-domain rows in the test set".into()));
    }
    let id_preds: Vec<usize> = id_rows.iter().map(|&i| preds[i]).collect();
    let id_labels: Vec<usize> = id_rows.iter().map(|&i| labels[i]).collect();
    let id_acc = accuracy(&id_preds, &id_labels)?;
    let ood_acc = ood.iter().sum::<f64>() / ood.len() as f64;

    let names = test.domain_names();
    let per_domain_acc = per_domain
        .iter()
        .zip(names)
        .filter_map(|(a, n)| a.map(|a| (n.clone(), a)))
        .collect();
    let per_class_acc = per_class_accuracy(&id_preds, &id_labels, test.num_classes())?
        .iter()
        .zip(test.class_names())
        .filter_map(|(a, n)| a.map(|a| (n.clone(), a)))
        .collect();
    let mut sample_counts = BTreeMap::new();
    sample_counts.insert("id".to_string(), id_rows.len());
    sample_counts.insert("ood".to_string(), test.len() - id_rows.len());
    sample_counts.insert("total".to_string(), test.len());

    Ok(EvalReport {
        id_acc,
        ood_acc,
        extended_acc: extended_accuracy(id_acc, ood_acc, extended_weight)?,
        extended_weight,
        class_balanced_acc: class_balanced_accuracy(&id_preds, &id_labels, test.num_classes())?.value,
        val_balanced_acc: None,
        per_domain_acc,
        per_class_acc,
        da_score: None,
        cc_score: None,
        sample_counts,
    })
}
