//! Stage-2 multinomial logistic regression on frozen embeddings.

use std::path::Path;

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augnet::AugNetParams;
use crate::container::{self, PayloadReader, PayloadWriter};
use crate::error::{Error, Result};
use crate::store::check_dim;
use crate::zeroshot::{argmax, ZeroShotHead};

pub const PROBE_MAGIC: &[u8; 8] = b"LINPRB01";

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `C × D`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LinearProbe {
    pub fn zeros(num_classes: usize, dim: usize) -> Self {
        Self {
            w: Array2::zeros((num_classes, dim)),
            b: Array1::zeros(num_classes),
        }
    }

    /// Weights equal to the head's text rows, zero bias.
    pub fn from_head(head: &ZeroShotHead) -> Self {
        Self {
            w: head.weights().clone(),
            b: Array1::zeros(head.num_classes()),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.w.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.b).all(|v| v.is_finite())
    }

    pub fn logits(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(self.w.dot(&x) + &self.b)
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> Result<usize> {
        Ok(argmax(self.logits(x)?))
    }

    pub fn predict_batch(&self, xs: ArrayView2<f64>) -> Result<Vec<usize>> {
        check_dim(self.dim(), xs.ncols())?;
        let logits = xs.dot(&self.w.t()) + &self.b;
        Ok(logits.axis_iter(Axis(0)).map(|r| argmax(r.iter().copied())).collect())
    }
}

pub fn predict(probe: &LinearProbe, x: ArrayView1<f64>) -> Result<usize> {
    probe.predict(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbeInit {
    #[default]
    Zeros,
    /// Rows start at the generic zero-shot class text embeddings.
    ZeroShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub init: ProbeInit,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            weight_decay: 0.05,
            epochs: 400,
            batch_size: 512,
            init: ProbeInit::Zeros,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Range(format!("probe lr {} must be positive", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Range(format!("probe weight_decay {} must be non-negative", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Range("probe batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeLog {
    /// Full-data cross-entropy after each epoch, starting with the initial value.
    pub loss: Vec<f64>,
}

/// Stacks the original rows with each network's output on every row.
/// Labels are repeated once per network.
pub fn assemble_training_set(
    rows: ArrayView2<f64>,
    labels: &[usize],
    nets: &[AugNetParams],
) -> Result<(Array2<f64>, Vec<usize>)> {
    if labels.len() != rows.nrows() {
        return Err(Error::Shape(format!("{} rows but {} labels", rows.nrows(), labels.len())));
    }
    let mut blocks = vec![rows.to_owned()];
    for net in nets {
        check_dim(rows.ncols(), net.dim())?;
        blocks.push(net.forward_batch(rows)?);
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let x = concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
    let y = labels.iter().copied().cycle().take(labels.len() * (1 + nets.len())).collect();
    Ok((x, y))
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= num_classes) {
        Some(y) => Err(Error::Label(format!("label {y} >= {num_classes} classes"))),
        None => Ok(()),
    }
}

/// Mean softmax cross-entropy and its gradients `(loss, dW, db)`.
fn loss_and_grad(probe: &LinearProbe, x: ArrayView2<f64>, labels: &[usize]) -> (f64, Array2<f64>, Array1<f64>) {
    let m = x.nrows() as f64;
    let mut g = x.dot(&probe.w.t()) + &probe.b;
    let mut loss = 0.0;
    for (mut row, &y) in g.axis_iter_mut(Axis(0)).zip(labels) {
        let mx = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let shifted_y = row[y] - mx;
        row.mapv_inplace(|l| (l - mx).exp());
        let z = row.sum();
        loss += z.ln() - shifted_y;
        row.mapv_inplace(|e| e / z / m);
        row[y] -= 1.0 / m;
    }
    let gw = g.t().dot(&x);
    let gb = g.sum_axis(Axis(0));
    (loss / m, gw, gb)
}

/// Mean softmax cross-entropy of the probe over `x`.
pub fn probe_loss(probe: &LinearProbe, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    check_dim(probe.dim(), x.ncols())?;
    check_labels(labels, probe.num_classes())?;
    if x.nrows() == 0 || labels.len() != x.nrows() {
        return Err(Error::Shape(format!("{} rows but {} labels", x.nrows(), labels.len())));
    }
    let logits = x.dot(&probe.w.t()) + &probe.b;
    let total: f64 = logits
        .axis_iter(Axis(0))
        .zip(labels)
        .map(|(l, &y)| crate::augnet::cc_loss_from_logits(l, y))
        .sum();
    Ok(total / x.nrows() as f64)
}

/// Fits a probe by seeded mini-batch SGD with decoupled weight decay.
///
/// `zs_head` is required for zero-shot initialization and fixes the class
/// count to the head's.
pub fn train_probe(
    x: ArrayView2<f64>,
    labels: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
    zs_head: Option<&ZeroShotHead>,
) -> Result<(LinearProbe, ProbeLog)> {
    cfg.validate()?;
    if x.nrows() == 0 {
        return Err(Error::EmptyInput("no rows to train the probe on".into()));
    }
    if labels.len() != x.nrows() {
        return Err(Error::Shape(format!("{} rows but {} labels", x.nrows(), labels.len())));
    }
    check_labels(labels, num_classes)?;
    let mut probe = match cfg.init {
        ProbeInit::Zeros => LinearProbe::zeros(num_classes, x.ncols()),
        ProbeInit::ZeroShot => {
            let head = zs_head.ok_or_else(|| Error::Config("zero-shot init needs a prompt bank".into()))?;
            if head.num_classes() != num_classes {
                return Err(Error::Shape(format!(
                    "zero-shot head has {} classes, data has {num_classes}",
                    head.num_classes()
                )));
            }
            check_dim(head.dim(), x.ncols())?;
            LinearProbe::from_head(head)
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut log = ProbeLog { loss: vec![loss_and_grad(&probe, x, labels).0] };
    let (lr, wd) = (cfg.lr, cfg.weight_decay);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let bx = x.select(Axis(0), chunk);
            let by: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (_, gw, gb) = loss_and_grad(&probe, bx.view(), &by);
            probe.w.zip_mut_with(&gw, |p, &g| *p -= lr * (g + wd * *p));
            probe.b.zip_mut_with(&gb, |p, &g| *p -= lr * (g + wd * *p));
        }
        let loss = loss_and_grad(&probe, x, labels).0;
        if !loss.is_finite() || !probe.is_finite() {
            return Err(Error::NonFinite(format!("probe loss became {loss} at epoch {epoch}")));
        }
        log.loss.push(loss);
    }
    Ok((probe, log))
}

/// Interpolates probe weights toward a zero-shot head, which counts as a
/// probe with zero bias.
pub fn wise_ensemble(probe: &LinearProbe, head: &ZeroShotHead, mix: f64) -> Result<LinearProbe> {
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::Range(format!("wise mix {mix} outside [0, 1]")));
    }
    check_dim(probe.dim(), head.dim())?;
    if probe.num_classes() != head.num_classes() {
        return Err(Error::Shape(format!(
            "probe has {} classes, head has {}",
            probe.num_classes(),
            head.num_classes()
        )));
    }
    Ok(LinearProbe {
        w: &probe.w * mix + head.weights() * (1.0 - mix),
        b: &probe.b * mix,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ProbeHeader {
    version: u32,
    dim: usize,
    num_classes: usize,
    dtype: String,
}

pub fn probe_to_bytes(probe: &LinearProbe) -> Result<Vec<u8>> {
    let header = ProbeHeader {
        version: 1,
        dim: probe.dim(),
        num_classes: probe.num_classes(),
        dtype: "f64".into(),
    };
    let mut w = PayloadWriter::new();
    w.f64s(probe.w.iter().copied()).f64s(probe.b.iter().copied());
    container::encode(PROBE_MAGIC, &header, &w.into_bytes())
}

pub fn probe_from_bytes(bytes: &[u8]) -> Result<LinearProbe> {
    let (h, payload): (ProbeHeader, _) = container::decode(bytes, PROBE_MAGIC)?;
    if h.version != 1 || h.dtype != "f64" {
        return Err(Error::Format(format!("unsupported version {} / dtype {}", h.version, h.dtype)));
    }
    let mut r = PayloadReader::new(payload);
    let w = r.f64s(h.num_classes * h.dim, "probe weights")?;
    let b = r.f64s(h.num_classes, "probe bias")?;
    r.finish()?;
    let probe = LinearProbe {
        w: Array2::from_shape_vec((h.num_classes, h.dim), w).map_err(|e| Error::Shape(e.to_string()))?,
        b: Array1::from(b),
    };
    if !probe.is_finite() {
        return Err(Error::NonFinite("probe file holds non-finite weights".into()));
    }
    Ok(probe)
}

pub fn save_probe(probe: &LinearProbe, path: impl AsRef<Path>) -> Result<()> {
    container::write_file(path.as_ref(), &probe_to_bytes(probe)?)
}

pub fn load_probe(path: impl AsRef<Path>) -> Result<LinearProbe> {
    probe_from_bytes(&container::read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augnet::Activation;
    use crate::store::{l2_normalize, PromptBank};
    use crate::zeroshot::{build_head, HeadMode};
    use ndarray::{array, Array3};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_head(rng: &mut ChaCha8Rng, c: usize, d: usize) -> ZeroShotHead {
        let ct = Array2::from_shape_fn((c, d), |_| rng.random_range(-1.0..1.0));
        let bank = PromptBank::new(
            Array3::ones((1, c, d)),
            ct,
            vec!["d".into()],
            (0..c).map(|i| format!("c{i}")).collect(),
        )
        .unwrap();
        build_head(&bank, HeadMode::Generic).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
        l2_normalize(Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0)).view()).unwrap()
    }

    /// Separable 2-D toy set: class by the sign of the first coordinate.
    fn toy() -> (Array2<f64>, Vec<usize>) {
        let pts = [
            (1.0, 0.2), (0.8, -0.5), (0.5, 0.9), (0.3, -0.1), (1.2, 1.0),
            (-1.0, 0.3), (-0.7, -0.8), (-0.4, 0.6), (-0.2, 0.0), (-1.1, -1.2),
        ];
        let x = Array2::from_shape_fn((10, 2), |(i, j)| if j == 0 { pts[i].0 } else { pts[i].1 });
        let y = (0..10).map(|i| usize::from(i >= 5)).collect();
        (x, y)
    }

    #[test]
    fn zero_epochs_zero_init() {
        let (x, y) = toy();
        let cfg = ProbeConfig { epochs: 0, ..Default::default() };
        let (p, _) = train_probe(x.view(), &y, 2, &cfg, None).unwrap();
        assert_eq!(p, LinearProbe::zeros(2, 2));
    }

    #[test]
    fn zero_epochs_zero_shot_init_matches_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = random_head(&mut rng, 4, 6);
        let x = Array2::from_shape_fn((3, 6), |_| rng.random_range(-1.0..1.0));
        let cfg = ProbeConfig { epochs: 0, init: ProbeInit::ZeroShot, ..Default::default() };
        let (p, _) = train_probe(x.view(), &[0, 1, 2], 4, &cfg, Some(&head)).unwrap();
        for _ in 0..200 {
            let v = random_unit(&mut rng, 6);
            assert_eq!(p.predict(v.view()).unwrap(), head.predict(v.view()).unwrap());
        }
        let no_head = train_probe(x.view(), &[0, 1, 2], 4, &cfg, None);
        assert!(matches!(no_head, Err(Error::Config(_))));
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let (x, y) = toy();
        let cfg = ProbeConfig { lr: 0.5, weight_decay: 0.0, epochs: 500, batch_size: 4, ..Default::default() };
        let (p, _) = train_probe(x.view(), &y, 2, &cfg, None).unwrap();
        assert_eq!(p.predict_batch(x.view()).unwrap(), y);
    }

    #[test]
    fn full_batch_loss_is_non_increasing() {
        let (x, y) = toy();
        let cfg = ProbeConfig { lr: 0.1, weight_decay: 0.0, epochs: 300, batch_size: 10, ..Default::default() };
        let (_, log) = train_probe(x.view(), &y, 2, &cfg, None).unwrap();
        for w in log.loss.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "{} > {}", w[1], w[0]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probe = LinearProbe {
            w: Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0)),
            b: Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0)),
        };
        let x = Array2::from_shape_fn((7, 5), |_| rng.random_range(-1.0..1.0));
        let y: Vec<usize> = (0..7).map(|i| i % 3).collect();
        let (_, gw, gb) = loss_and_grad(&probe, x.view(), &y);
        let h = 1e-5;
        for c in 0..3 {
            for j in 0..5 {
                let (mut p, mut m) = (probe.clone(), probe.clone());
                p.w[[c, j]] += h;
                m.w[[c, j]] -= h;
                let fd = (probe_loss(&p, x.view(), &y).unwrap() - probe_loss(&m, x.view(), &y).unwrap()) / (2.0 * h);
                assert!((fd - gw[[c, j]]).abs() < 1e-8);
            }
            let (mut p, mut m) = (probe.clone(), probe.clone());
            p.b[c] += h;
            m.b[c] -= h;
            let fd = (probe_loss(&p, x.view(), &y).unwrap() - probe_loss(&m, x.view(), &y).unwrap()) / (2.0 * h);
            assert!((fd - gb[c]).abs() < 1e-8);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (x, y) = toy();
        let cfg = ProbeConfig { lr: 0.3, epochs: 20, batch_size: 3, seed: 5, ..Default::default() };
        let (a, _) = train_probe(x.view(), &y, 2, &cfg, None).unwrap();
        let (b, _) = train_probe(x.view(), &y, 2, &cfg, None).unwrap();
        assert_eq!(probe_to_bytes(&a).unwrap(), probe_to_bytes(&b).unwrap());
    }

    #[test]
    fn rejects_bad_labels() {
        let (x, _) = toy();
        let err = train_probe(x.view(), &[0, 1, 2, 0, 0, 0, 0, 0, 0, 0], 2, &ProbeConfig::default(), None);
        assert!(matches!(err, Err(Error::Label(_))));
    }

    #[test]
    fn predict_examples() {
        let mut p = LinearProbe::zeros(3, 3);
        p.w = Array2::eye(3);
        assert_eq!(p.predict(array![0.0, 0.0, 1.0].view()).unwrap(), 2);
        assert_eq!(LinearProbe::zeros(3, 3).predict(array![0.3, 0.1, 0.2].view()).unwrap(), 0);
        assert!(matches!(p.predict(array![1.0].view()), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn predict_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let p = LinearProbe {
                w: Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0)),
                b: Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0)),
            };
            let x = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
            let scores: Vec<f64> = (0..4)
                .map(|c| p.b[c] + (0..3).map(|j| p.w[[c, j]] * x[j]).sum::<f64>())
                .collect();
            let mut best = 0;
            for c in 1..4 {
                if scores[c] > scores[best] {
                    best = c;
                }
            }
            assert_eq!(p.predict(x.view()).unwrap(), best);
            assert_eq!(p.predict_batch(x.view().insert_axis(Axis(0))).unwrap(), vec![best]);
        }
    }

    proptest! {
        #[test]
        fn bias_shift_leaves_predictions_unchanged(seed in 0u64..500, shift in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = LinearProbe {
                w: Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0)),
                b: Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0)),
            };
            // Shift by a dyadic amount so the addition itself is exact enough
            // not to reorder close logits.
            let shift = (shift * 8.0).round() / 8.0;
            let q = LinearProbe { w: p.w.clone(), b: &p.b + shift };
            let x = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
            let (lp, lq) = (p.logits(x.view()).unwrap(), q.logits(x.view()).unwrap());
            let gap = {
                let mut s: Vec<f64> = lp.to_vec();
                s.sort_by(|a, b| b.partial_cmp(a).unwrap());
                s[0] - s[1]
            };
            prop_assume!(gap > 1e-9);
            prop_assert_eq!(argmax(lp), argmax(lq));
        }
    }

    #[test]
    fn wise_endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = random_head(&mut rng, 3, 4);
        let p = LinearProbe {
            w: Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0)),
            b: Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0)),
        };
        assert_eq!(wise_ensemble(&p, &head, 1.0).unwrap(), p);
        let zs = wise_ensemble(&p, &head, 0.0).unwrap();
        assert_eq!(&zs.w, head.weights());
        assert!(zs.b.iter().all(|&v| v == 0.0));
        let mid = wise_ensemble(&p, &head, 0.5).unwrap();
        for c in 0..3 {
            for j in 0..4 {
                assert!((mid.w[[c, j]] - (p.w[[c, j]] + head.weights()[[c, j]]) / 2.0).abs() < 1e-15);
            }
            assert!((mid.b[c] - p.b[c] / 2.0).abs() < 1e-15);
        }
        assert!(matches!(wise_ensemble(&p, &head, 1.5), Err(Error::Range(_))));
    }

    #[test]
    fn assemble_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = Array2::from_shape_fn((5, 4), |_| rng.random_range(0.1..1.0));
        let labels = vec![0, 1, 2, 1, 0];
        let (x, y) = assemble_training_set(rows.view(), &labels, &[]).unwrap();
        assert_eq!(x, rows);
        assert_eq!(y, labels);

        let net = AugNetParams::init(4, 2, Activation::Relu, false, &mut rng);
        let (x, y) = assemble_training_set(rows.view(), &labels, std::slice::from_ref(&net)).unwrap();
        assert_eq!(x.nrows(), 10);
        assert_eq!(y, [labels.clone(), labels.clone()].concat());
        assert_eq!(x.row(7), net.forward(rows.row(2)).unwrap());

        let nets = vec![net.clone(), net.clone(), net];
        let (x, y) = assemble_training_set(rows.view(), &labels, &nets).unwrap();
        assert_eq!((x.nrows(), y.len()), (20, 20));

        let wrong = AugNetParams::zeros(3, 2, Activation::Relu, false);
        assert!(matches!(
            assemble_training_set(rows.view(), &labels, &[wrong]),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn file_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = LinearProbe {
            w: Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0)),
            b: Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0)),
        };
        let bytes = probe_to_bytes(&p).unwrap();
        assert_eq!(probe_from_bytes(&bytes).unwrap(), p);
        assert!(matches!(probe_from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Shape(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(probe_from_bytes(&bad), Err(Error::Format(_))));
    }
}
