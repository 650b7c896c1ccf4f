use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{AugNetParams, AugTrainConfig, DomainPair};
use crate::error::{Error, Result};
use crate::store::{check_dim, l2_norm, PromptBank, EPS_NORM};

/// A batch of training rows with their labels and per-row domain pairs.
#[derive(Debug, Clone, Copy)]
pub struct AugBatch<'a> {
    pub x: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
    pub pairs: &'a [DomainPair],
}

impl<'a> AugBatch<'a> {
    pub fn new(x: ArrayView2<'a, f64>, labels: &'a [usize], pairs: &'a [DomainPair]) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::EmptyInput("empty batch".into()));
        }
        if labels.len() != x.nrows() || pairs.len() != x.nrows() {
            return Err(Error::Shape(format!(
                "batch has {} rows, {} labels, {} domain pairs",
                x.nrows(),
                labels.len(),
                pairs.len()
            )));
        }
        Ok(Self { x, labels, pairs })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Batch-mean loss and its two components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub domain_alignment: f64,
    pub class_consistency: f64,
}

/// Gradient of the batch loss, shaped like [`AugNetParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct AugNetGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl AugNetGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .copied()
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|v| v.is_finite())
    }
}

/// Normalized text delta `T(target ∘ y) - T(source ∘ y)`.
pub fn text_direction(bank: &PromptBank, pair: DomainPair, class: usize, eps_dir: f64) -> Result<Array1<f64>> {
    bank.check_domain(pair.source)?;
    bank.check_domain(pair.target)?;
    if class >= bank.num_classes() {
        return Err(Error::Label(format!("class {class} >= {}", bank.num_classes())));
    }
    let delta = &bank.domain_class(pair.target, class) - &bank.domain_class(pair.source, class);
    let n = l2_norm(delta.view());
    if !(n > EPS_NORM) {
        return Err(Error::DegenerateText {
            source_domain: pair.source,
            target_domain: pair.target,
            class,
        });
    }
    Ok(delta / (n + eps_dir))
}

/// `1 - cos(out - x, text)` with `eps_dir` in the image-delta denominator;
/// `text_dir` is expected to come from [`text_direction`].
pub fn da_loss_from_output(out: ArrayView1<f64>, x: ArrayView1<f64>, text_dir: ArrayView1<f64>, eps_dir: f64) -> f64 {
    let d = &out - &x;
    let n = l2_norm(d.view());
    1.0 - d.dot(&text_dir) / (n + eps_dir)
}

/// Cross-entropy of `softmax(logits)` against `label`, max-shifted.
pub fn cc_loss_from_logits(logits: ArrayView1<f64>, label: usize) -> f64 {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Class-consistency loss of an arbitrary embedding (e.g. an unaugmented row).
pub fn cc_loss_for_output(out: ArrayView1<f64>, label: usize, bank: &PromptBank, temperature: f64) -> Result<f64> {
    check_dim(bank.dim(), out.len())?;
    if label >= bank.num_classes() {
        return Err(Error::Label(format!("class {label} >= {}", bank.num_classes())));
    }
    let logits = bank.class_rows().dot(&out) * temperature;
    Ok(cc_loss_from_logits(logits.view(), label))
}

pub fn domain_alignment_loss(
    params: &AugNetParams,
    x: ArrayView1<f64>,
    label: usize,
    bank: &PromptBank,
    pair: DomainPair,
    eps_dir: f64,
) -> Result<f64> {
    check_dim(bank.dim(), x.len())?;
    let t = text_direction(bank, pair, label, eps_dir)?;
    let out = params.forward(x)?;
    Ok(da_loss_from_output(out.view(), x, t.view(), eps_dir))
}

pub fn class_consistency_loss(
    params: &AugNetParams,
    x: ArrayView1<f64>,
    label: usize,
    bank: &PromptBank,
    temperature: f64,
) -> Result<f64> {
    let out = params.forward(x)?;
    cc_loss_for_output(out.view(), label, bank, temperature)
}

fn check_batch(params: &AugNetParams, batch: &AugBatch, bank: &PromptBank) -> Result<()> {
    check_dim(params.dim(), batch.x.ncols())?;
    check_dim(bank.dim(), batch.x.ncols())?;
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= bank.num_classes()) {
        return Err(Error::Label(format!("class {y} >= {}", bank.num_classes())));
    }
    Ok(())
}

/// Per-row loss terms and the gradient of the weighted batch mean w.r.t.
/// the network output.
fn output_terms(
    out: ArrayView2<f64>,
    batch: &AugBatch,
    bank: &PromptBank,
    cfg: &AugTrainConfig,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Array2<f64>>)> {
    let b = batch.len() as f64;
    let alpha = cfg.alpha;
    let tau = cfg.temperature;
    let eps = cfg.eps_dir;
    let class_rows = bank.class_rows();
    let mut g_out = want_grad.then(|| Array2::<f64>::zeros(out.raw_dim()));
    let (mut da_sum, mut cc_sum) = (0.0, 0.0);

    for i in 0..batch.len() {
        let x = batch.x.row(i);
        let o = out.row(i);
        let y = batch.labels[i];
        let t = text_direction(bank, batch.pairs[i], y, eps)?;

        let d = &o - &x;
        let n = l2_norm(d.view());
        let dt = d.dot(&t);
        let da = 1.0 - dt / (n + eps);

        let logits = class_rows.dot(&o) * tau;
        let m = logits.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let exps = logits.mapv(|l| (l - m).exp());
        let z = exps.sum();
        let cc = m + z.ln() - logits[y];

        da_sum += da;
        cc_sum += cc;

        if let Some(g) = g_out.as_mut() {
            // d(1 - d·t/(|d|+eps))/dd
            let mut g_da = &t * (-1.0 / (n + eps));
            if n > 0.0 {
                g_da.scaled_add(dt / (n * (n + eps) * (n + eps)), &d);
            }
            // tau * Tᵀ (softmax - onehot)
            let mut p = exps / z;
            p[y] -= 1.0;
            let g_cc = class_rows.t().dot(&p) * tau;

            let mut row = g.row_mut(i);
            row.scaled_add(alpha / b, &g_da);
            row.scaled_add((1.0 - alpha) / b, &g_cc);
        }
    }

    let da = da_sum / b;
    let cc = cc_sum / b;
    let breakdown = LossBreakdown {
        total: alpha * da + (1.0 - alpha) * cc,
        domain_alignment: da,
        class_consistency: cc,
    };
    Ok((breakdown, g_out))
}

/// Batch mean of `alpha * L_DA + (1 - alpha) * L_CC`.
pub fn lads_loss(params: &AugNetParams, batch: &AugBatch, bank: &PromptBank, cfg: &AugTrainConfig) -> Result<LossBreakdown> {
    check_batch(params, batch, bank)?;
    let cache = params.forward_batch_cached(batch.x)?;
    Ok(output_terms(cache.out.view(), batch, bank, cfg, false)?.0)
}

pub fn lads_grad(params: &AugNetParams, batch: &AugBatch, bank: &PromptBank, cfg: &AugTrainConfig) -> Result<AugNetGrads> {
    Ok(lads_loss_and_grad(params, batch, bank, cfg)?.1)
}

/// Loss and analytic gradient in one forward/backward pass.
pub fn lads_loss_and_grad(
    params: &AugNetParams,
    batch: &AugBatch,
    bank: &PromptBank,
    cfg: &AugTrainConfig,
) -> Result<(LossBreakdown, AugNetGrads)> {
    check_batch(params, batch, bank)?;
    let cache = params.forward_batch_cached(batch.x)?;
    let (loss, g_out) = output_terms(cache.out.view(), batch, bank, cfg, true)?;
    let g_out = g_out.expect("gradient requested");

    // Through the output normalization: g_raw = (g - o (o·g)) / |raw|.
    let g_raw = if params.normalize_output {
        let mut g = g_out;
        for (i, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
            let o = cache.out.row(i);
            let proj = o.dot(&row);
            row.scaled_add(-proj, &o);
            row.mapv_inplace(|v| v / cache.raw_norms[i]);
        }
        g
    } else {
        g_out
    };

    let gw2 = g_raw.t().dot(&cache.hidden);
    let gb2 = g_raw.sum_axis(Axis(0));
    let mut g_pre = g_raw.dot(&params.w2);
    let act = params.activation;
    ndarray::Zip::from(&mut g_pre)
        .and(&cache.pre)
        .and(&cache.hidden)
        .for_each(|g, &z, &a| *g *= act.derivative(z, a));
    let gw1 = g_pre.t().dot(&batch.x);
    let gb1 = g_pre.sum_axis(Axis(0));

    Ok((
        loss,
        AugNetGrads {
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augnet::Activation;
    use ndarray::{array, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_domain_bank() -> PromptBank {
        // Domain delta for the only class is e1 - e0 (before normalization).
        let dc = Array3::from_shape_vec((2, 1, 3), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        PromptBank::new(dc, array![[0.0, 0.0, 1.0]], vec!["a".into(), "b".into()], vec!["c".into()]).unwrap()
    }

    /// A network whose output is the constant `b2` (all weights zero).
    fn constant_net(b2: Array1<f64>) -> AugNetParams {
        let mut p = AugNetParams::zeros(b2.len(), 2, Activation::Relu, false);
        p.b2 = b2;
        p
    }

    #[test]
    fn da_parallel_antiparallel_orthogonal() {
        let bank = two_domain_bank();
        let pair = DomainPair::new(0, 1);
        let x = array![0.0, 0.0, 1.0];
        let s = 1.0 / 2f64.sqrt();
        let cases = [
            (array![-s, s, 1.0], 0.0),
            (array![s, -s, 1.0], 2.0),
            (array![0.0, 0.0, 2.0], 1.0),
        ];
        for (out, expected) in cases {
            let p = constant_net(out);
            let l = domain_alignment_loss(&p, x.view(), 0, &bank, pair, 1e-8).unwrap();
            assert!((l - expected).abs() < 1e-7, "{l} vs {expected}");
        }
    }

    #[test]
    fn da_identical_prompts_is_degenerate() {
        let dc = Array3::from_shape_vec((2, 1, 2), vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let bank = PromptBank::new(dc, array![[1.0, 0.0]], vec!["a".into(), "b".into()], vec!["c".into()]).unwrap();
        let p = constant_net(array![0.0, 1.0]);
        let err = domain_alignment_loss(&p, array![1.0, 0.0].view(), 0, &bank, DomainPair::new(0, 1), 1e-8);
        assert!(matches!(err, Err(Error::DegenerateText { .. })));
    }

    #[test]
    fn da_identity_map_is_finite() {
        let bank = two_domain_bank();
        let mut p = AugNetParams::zeros(3, 3, Activation::Relu, false);
        p.w1 = Array2::eye(3);
        p.w2 = Array2::eye(3);
        let x = array![0.0, 0.0, 1.0];
        let l = domain_alignment_loss(&p, x.view(), 0, &bank, DomainPair::new(0, 1), 1e-8).unwrap();
        assert_eq!(l, 1.0);
    }

    #[test]
    fn cc_single_class_is_zero() {
        assert_eq!(cc_loss_from_logits(array![3.7].view(), 0), 0.0);
    }

    #[test]
    fn cc_equal_logits_is_ln2() {
        let l = cc_loss_from_logits(array![0.4, 0.4].view(), 1);
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cc_explicit_logits() {
        // Direct evaluation of -ln(e^2 / (e^2 + e + 1)).
        let e = std::f64::consts::E;
        let expected = -(e * e / (e * e + e + 1.0)).ln();
        let l = cc_loss_from_logits(array![2.0, 1.0, 0.0].view(), 0);
        assert!((l - expected).abs() < 1e-14);
        assert!((l - 0.4076).abs() < 1e-4);
    }

    #[test]
    fn cc_is_stable_for_large_logits() {
        let l = cc_loss_from_logits(array![1000.0, 0.0].view(), 1);
        assert!((l - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn cc_decreases_with_true_logit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let logits = Array1::from_shape_fn(4, |_| rng.random_range(-5.0..5.0));
            let y = rng.random_range(0..4);
            let mut bumped = logits.clone();
            bumped[y] += rng.random_range(0.01..2.0);
            let a = cc_loss_from_logits(logits.view(), y);
            let b = cc_loss_from_logits(bumped.view(), y);
            assert!(a >= 0.0 && b < a);
        }
    }

    #[test]
    fn cc_through_network_uses_class_text() {
        let bank = two_domain_bank();
        let p = constant_net(array![0.0, 0.0, 1.0]);
        let l = class_consistency_loss(&p, array![1.0, 0.0, 0.0].view(), 0, &bank, 100.0).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn batch_validation() {
        let x = Array2::<f64>::zeros((2, 3));
        let labels = [0usize];
        let pairs = [DomainPair::new(0, 1); 2];
        assert!(matches!(AugBatch::new(x.view(), &labels, &pairs), Err(Error::Shape(_))));
        let empty = Array2::<f64>::zeros((0, 3));
        assert!(matches!(AugBatch::new(empty.view(), &[], &[]), Err(Error::EmptyInput(_))));
    }
}
