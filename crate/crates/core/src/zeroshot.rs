//! Zero-shot classification from text embeddings and per-example domain
//! assignment for dataset-bias mode.

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{check_dim, normalize_in_place, EmbeddingBundle, PromptBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Bare class-name prompts.
    Generic,
    /// Class prompts averaged over every domain in the bank.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotHead {
    weights: Array2<f64>,
    mode: HeadMode,
}

impl ZeroShotHead {
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn mode(&self) -> HeadMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> Result<usize> {
        check_dim(self.dim(), x.len())?;
        Ok(argmax(self.weights.axis_iter(Axis(0)).map(|w| w.dot(&x))))
    }
}

pub fn build_head(bank: &PromptBank, mode: HeadMode) -> Result<ZeroShotHead> {
    let weights = match mode {
        HeadMode::Generic => bank.class_rows().to_owned(),
        HeadMode::Adaptive => {
            if bank.num_domains() == 0 {
                return Err(Error::Config("adaptive head needs at least one domain".into()));
            }
            let mut w = Array2::<f64>::zeros((bank.num_classes(), bank.dim()));
            for d in 0..bank.num_domains() {
                w += &bank.domain_rows(d);
            }
            w /= bank.num_domains() as f64;
            for row in w.axis_iter_mut(Axis(0)) {
                normalize_in_place(row)?;
            }
            w
        }
    };
    Ok(ZeroShotHead { weights, mode })
}

/// Index of the largest score; the lowest index wins ties.
pub fn argmax(scores: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, s) in scores.into_iter().enumerate() {
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

pub fn zero_shot_predict(head: &ZeroShotHead, x: ArrayView1<f64>) -> Result<usize> {
    head.predict(x)
}

/// For each row, picks the candidate domain whose `domain ∘ class` prompt is
/// most similar to the image. The result holds bank domain indices.
pub fn assign_domains(
    bundle: &EmbeddingBundle,
    bank: &PromptBank,
    candidate_domains: &[usize],
) -> Result<Vec<usize>> {
    check_dim(bank.dim(), bundle.dim())?;
    if candidate_domains.is_empty() {
        return Err(Error::Config("no candidate domains".into()));
    }
    for &d in candidate_domains {
        bank.check_domain(d)?;
    }
    if bundle.num_classes() > bank.num_classes() {
        return Err(Error::Label(format!(
            "bundle has {} classes but prompt bank only {}",
            bundle.num_classes(),
            bank.num_classes()
        )));
    }
    Ok(bundle
        .class_labels()
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let x = bundle.row(i);
            let pick = argmax(candidate_domains.iter().map(|&d| x.dot(&bank.domain_class(d, y))));
            candidate_domains[pick]
        })
        .collect())
}
