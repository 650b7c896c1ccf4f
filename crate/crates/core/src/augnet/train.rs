use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{lads_loss, lads_loss_and_grad, AugBatch};
use super::{AugNetParams, AugTrainConfig, DomainPair};
use crate::error::{Error, Result};
use crate::store::{check_dim, PromptBank};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Row-weighted mean of the mini-batch losses seen during the epoch.
    pub train_loss: f64,
    pub train_da: f64,
    pub train_cc: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub train_rows: usize,
    pub val_rows: usize,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned; 0 means the initialization.
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
}

/// Seeded split of `0..n` into (train, val) index lists, both sorted.
///
/// At least one row always stays in the training part.
pub fn holdout_split<R: Rng>(n: usize, val_fraction: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64 * val_fraction).round() as usize).min(n.saturating_sub(1));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

fn gather(rows: ArrayView2<f64>, labels: &[usize], pairs: &[DomainPair], idx: &[usize]) -> (ndarray::Array2<f64>, Vec<usize>, Vec<DomainPair>) {
    (
        rows.select(Axis(0), idx),
        idx.iter().map(|&i| labels[i]).collect(),
        idx.iter().map(|&i| pairs[i]).collect(),
    )
}

/// Trains one augmentation network with mini-batch SGD and decoupled weight
/// decay, keeping the parameters of the epoch with the lowest validation loss.
///
/// `pairs[i]` gives the source and target domain for row `i`. When the
/// holdout would be empty the validation loss is taken on the training rows.
pub fn train_augnet(
    rows: ArrayView2<f64>,
    labels: &[usize],
    pairs: &[DomainPair],
    bank: &PromptBank,
    cfg: &AugTrainConfig,
) -> Result<(AugNetParams, TrainLog)> {
    cfg.validate()?;
    let n = rows.nrows();
    if n == 0 {
        return Err(Error::EmptyInput("no training rows for the augmentation network".into()));
    }
    if labels.len() != n || pairs.len() != n {
        return Err(Error::Shape(format!(
            "{n} rows but {} labels and {} domain pairs",
            labels.len(),
            pairs.len()
        )));
    }
    check_dim(bank.dim(), rows.ncols())?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = rows.ncols();
    let mut params = AugNetParams::init(dim, cfg.hidden_for(dim), cfg.activation, cfg.normalize_output, &mut rng);
    let (mut train_idx, val_idx) = holdout_split(n, cfg.val_fraction, &mut rng);
    let monitor_idx = if val_idx.is_empty() { train_idx.clone() } else { val_idx.clone() };
    let (vx, vy, vp) = gather(rows, labels, pairs, &monitor_idx);
    let val_batch = AugBatch::new(vx.view(), &vy, &vp)?;

    let mut log = TrainLog {
        train_rows: train_idx.len(),
        val_rows: val_idx.len(),
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        best_val_loss: None,
    };
    let mut best = params.clone();

    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let (mut sum, mut sum_da, mut sum_cc) = (0.0, 0.0, 0.0);
        for chunk in train_idx.chunks(cfg.batch_size) {
            let (bx, by, bp) = gather(rows, labels, pairs, chunk);
            let batch = AugBatch::new(bx.view(), &by, &bp)?;
            let (loss, grads) = lads_loss_and_grad(&params, &batch, bank, cfg)?;
            if !loss.total.is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite(format!(
                    "augmentation loss became {} at epoch {epoch}",
                    loss.total
                )));
            }
            let m = chunk.len() as f64;
            sum += loss.total * m;
            sum_da += loss.domain_alignment * m;
            sum_cc += loss.class_consistency * m;

            let (lr, wd) = (cfg.lr, cfg.weight_decay);
            params.w1.zip_mut_with(&grads.w1, |p, &g| *p -= lr * (g + wd * *p));
            params.b1.zip_mut_with(&grads.b1, |p, &g| *p -= lr * (g + wd * *p));
            params.w2.zip_mut_with(&grads.w2, |p, &g| *p -= lr * (g + wd * *p));
            params.b2.zip_mut_with(&grads.b2, |p, &g| *p -= lr * (g + wd * *p));
        }
        let val = lads_loss(&params, &val_batch, bank, cfg)?.total;
        if !val.is_finite() {
            return Err(Error::NonFinite(format!("validation loss became {val} at epoch {epoch}")));
        }
        let t = train_idx.len() as f64;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: sum / t,
            train_da: sum_da / t,
            train_cc: sum_cc / t,
            val_loss: val,
        });
        if log.best_val_loss.is_none_or(|b| val < b) {
            log.best_val_loss = Some(val);
            log.best_epoch = epoch;
            best = params.clone();
        }
    }
    Ok((best, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augnet::Activation;
    use ndarray::{Array2, Array3};

    fn toy() -> (Array2<f64>, Vec<usize>, PromptBank) {
        // Two classes on e0/e1, two domains shifting along e2/e3.
        let mut dc = Array3::<f64>::zeros((2, 2, 4));
        for d in 0..2 {
            for c in 0..2 {
                dc[[d, c, c]] = 1.0;
                dc[[d, c, 2 + d]] = 1.0;
            }
        }
        let mut ct = Array2::<f64>::zeros((2, 4));
        ct[[0, 0]] = 1.0;
        ct[[1, 1]] = 1.0;
        let bank = PromptBank::new(dc, ct, vec!["a".into(), "b".into()], vec!["x".into(), "y".into()]).unwrap();
        let rows = Array2::from_shape_fn((20, 4), |(i, j)| {
            let c = i % 2;
            let s = 1.0 / 2f64.sqrt();
            if j == c || j == 2 {
                s + 0.01 * (i as f64)
            } else {
                0.0
            }
        });
        let labels = (0..20).map(|i| i % 2).collect();
        (rows, labels, bank)
    }

    #[test]
    fn holdout_sizes_and_disjointness() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (t, v) = holdout_split(100, 0.1, &mut rng);
        assert_eq!((t.len(), v.len()), (90, 10));
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let (t, v) = holdout_split(1, 0.5, &mut rng);
        assert_eq!((t.len(), v.len()), (1, 0));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (rows, labels, bank) = toy();
        let pairs = vec![DomainPair::new(0, 1); 20];
        let cfg = AugTrainConfig { epochs: 0, hidden_dim: Some(3), seed: 9, ..Default::default() };
        let (p, log) = train_augnet(rows.view(), &labels, &pairs, &bank, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let init = AugNetParams::init(4, 3, Activation::Relu, true, &mut rng);
        assert_eq!(p, init);
        assert_eq!(log.best_epoch, 0);
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_lowers_loss() {
        let (rows, labels, bank) = toy();
        let pairs = vec![DomainPair::new(0, 1); 20];
        let cfg = AugTrainConfig {
            epochs: 30,
            lr: 0.05,
            batch_size: 4,
            temperature: 10.0,
            ..Default::default()
        };
        let (a, log_a) = train_augnet(rows.view(), &labels, &pairs, &bank, &cfg).unwrap();
        let (b, log_b) = train_augnet(rows.view(), &labels, &pairs, &bank, &cfg).unwrap();
        assert_eq!(a.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(log_a, log_b);
        let first = log_a.epochs.first().unwrap().train_loss;
        let last = log_a.epochs.last().unwrap().train_loss;
        assert!(last < first, "{last} !< {first}");
        let best = log_a.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(log_a.best_val_loss, Some(best));
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let (rows, labels, bank) = toy();
        let pairs = vec![DomainPair::new(0, 1); 3];
        let err = train_augnet(rows.view(), &labels, &pairs, &bank, &AugTrainConfig::default());
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let (rows, labels, bank) = toy();
        let pairs = vec![DomainPair::new(0, 1); 20];
        let cfg = AugTrainConfig {
            epochs: 50,
            lr: 1e200,
            normalize_output: false,
            ..Default::default()
        };
        let err = train_augnet(rows.view(), &labels, &pairs, &bank, &cfg);
        assert!(matches!(err, Err(Error::NonFinite(_))), "{err:?}");
    }
}
