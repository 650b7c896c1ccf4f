//! The latent augmentation network and its training objective.
//!
//! A network maps a training-domain image embedding `x` to
//! `W2 · act(W1 · x + b1) + b2`, optionally re-normalized onto the unit
//! sphere. It is trained with a mix of a domain-alignment term (the image
//! delta should point along the text delta between the two domain prompts)
//! and a class-consistency term (zero-shot cross-entropy of the output
//! against the true label).

mod loss;
mod train;

pub use loss::{
    class_consistency_loss, cc_loss_from_logits, cc_loss_for_output, da_loss_from_output,
    domain_alignment_loss, lads_grad, lads_loss, lads_loss_and_grad, text_direction, AugBatch,
    AugNetGrads, LossBreakdown,
};
pub use train::{holdout_split, train_augnet, EpochRecord, TrainLog};

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, PayloadReader, PayloadWriter};
use crate::error::{Error, Result};
use crate::store::{check_dim, l2_norm, EPS_NORM};

pub const AUGNET_MAGIC: &[u8; 8] = b"AUGNET01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub(crate) fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    pub(crate) fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// One source/target domain pair used by the alignment loss for a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DomainPair {
    pub source: usize,
    pub target: usize,
}

impl DomainPair {
    pub fn new(source: usize, target: usize) -> Self {
        Self { source, target }
    }
}

/// Stage-1 training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugTrainConfig {
    /// Weight of the alignment term; `1 - alpha` weights class consistency.
    pub alpha: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Inverse temperature applied to image-text cosines in the CE term.
    pub temperature: f64,
    /// Added to direction-norm denominators in the alignment term.
    pub eps_dir: f64,
    pub seed: u64,
    pub normalize_output: bool,
    /// Hidden width; defaults to half the embedding width.
    pub hidden_dim: Option<usize>,
    pub activation: Activation,
    /// Fraction of training rows held out for checkpoint selection.
    pub val_fraction: f64,
}

impl Default for AugTrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lr: 0.001,
            weight_decay: 0.05,
            epochs: 200,
            batch_size: 512,
            temperature: 100.0,
            eps_dir: 1e-8,
            seed: 0,
            normalize_output: true,
            hidden_dim: None,
            activation: Activation::Relu,
            val_fraction: 0.1,
        }
    }
}

impl AugTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Range(msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.eps_dir >= 0.0) {
            return bad(format!("eps_dir {} must be non-negative", self.eps_dir));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.hidden_dim == Some(0) {
            return bad("hidden_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        Ok(())
    }

    pub fn hidden_for(&self, dim: usize) -> usize {
        self.hidden_dim.unwrap_or((dim / 2).max(1))
    }
}

/// Weights of one augmentation network.
#[derive(Debug, Clone, PartialEq)]
pub struct AugNetParams {
    /// `H × D`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `D × H`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub activation: Activation,
    pub normalize_output: bool,
}

/// Intermediate values of a batched forward pass.
pub(crate) struct ForwardCache {
    pub pre: Array2<f64>,
    pub hidden: Array2<f64>,
    /// Norms of the second-layer output before any normalization.
    pub raw_norms: Array1<f64>,
    pub out: Array2<f64>,
}

impl AugNetParams {
    pub fn zeros(dim: usize, hidden: usize, activation: Activation, normalize_output: bool) -> Self {
        Self {
            w1: Array2::zeros((hidden, dim)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((dim, hidden)),
            b2: Array1::zeros(dim),
            activation,
            normalize_output,
        }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
    pub fn init<R: Rng>(dim: usize, hidden: usize, activation: Activation, normalize_output: bool, rng: &mut R) -> Self {
        let a1 = 1.0 / (dim as f64).sqrt();
        let a2 = 1.0 / (hidden as f64).sqrt();
        let w1 = Array2::from_shape_fn((hidden, dim), |_| rng.random_range(-a1..a1));
        let w2 = Array2::from_shape_fn((dim, hidden), |_| rng.random_range(-a2..a2));
        Self {
            w1,
            b1: Array1::zeros(hidden),
            w2,
            b2: Array1::zeros(dim),
            activation,
            normalize_output,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|v| v.is_finite())
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        check_dim(self.dim(), x.len())?;
        let xs = x.insert_axis(Axis(0));
        let cache = self.forward_batch_cached(xs)?;
        Ok(cache.out.row(0).to_owned())
    }

    /// Applies the network to every row of `xs`.
    pub fn forward_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim(self.dim(), xs.ncols())?;
        Ok(self.forward_batch_cached(xs)?.out)
    }

    pub(crate) fn forward_batch_cached(&self, xs: ArrayView2<f64>) -> Result<ForwardCache> {
        let pre = xs.dot(&self.w1.t()) + &self.b1;
        let act = self.activation;
        let hidden = pre.mapv(|z| act.apply(z));
        let raw = hidden.dot(&self.w2.t()) + &self.b2;
        let raw_norms: Array1<f64> = raw.axis_iter(Axis(0)).map(l2_norm).collect();
        let out = if self.normalize_output {
            let mut out = raw.clone();
            for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
                let n = raw_norms[i];
                if !(n > EPS_NORM) {
                    return Err(Error::ZeroVector { norm: n });
                }
                row.mapv_inplace(|v| v / n);
            }
            out
        } else {
            raw
        };
        Ok(ForwardCache {
            pre,
            hidden,
            raw_norms,
            out,
        })
    }

    /// Flattened parameter vector in `w1, b1, w2, b2` order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .copied()
            .collect()
    }

    /// Inverse of [`AugNetParams::to_flat`] for a network of the same shape.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut out = self.clone();
        let mut it = flat.iter().copied();
        for v in out
            .w1
            .iter_mut()
            .chain(out.b1.iter_mut())
            .chain(out.w2.iter_mut())
            .chain(out.b2.iter_mut())
        {
            *v = it.next().unwrap();
        }
        out
    }
}

/// Descriptive metadata stored alongside a parameter file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AugNetMeta {
    /// Prompt-bank name of the fixed source domain, absent in bias mode.
    pub source_domain: Option<String>,
    /// Prompt-bank name of the fixed target domain, absent in bias mode.
    pub target_domain: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AugNetHeader {
    version: u32,
    dim: usize,
    hidden: usize,
    activation: Activation,
    normalize_output: bool,
    dtype: String,
    #[serde(flatten)]
    meta: AugNetMeta,
}

pub fn augnet_to_bytes(params: &AugNetParams, meta: &AugNetMeta) -> Result<Vec<u8>> {
    let header = AugNetHeader {
        version: 1,
        dim: params.dim(),
        hidden: params.hidden(),
        activation: params.activation,
        normalize_output: params.normalize_output,
        dtype: "f64".into(),
        meta: meta.clone(),
    };
    let mut w = PayloadWriter::new();
    w.f64s(params.to_flat());
    container::encode(AUGNET_MAGIC, &header, &w.into_bytes())
}

pub fn augnet_from_bytes(bytes: &[u8]) -> Result<(AugNetParams, AugNetMeta)> {
    let (h, payload): (AugNetHeader, _) = container::decode(bytes, AUGNET_MAGIC)?;
    if h.version != 1 || h.dtype != "f64" {
        return Err(Error::Format(format!("unsupported version {} / dtype {}", h.version, h.dtype)));
    }
    if h.dim == 0 || h.hidden == 0 {
        return Err(Error::Shape("zero-sized network".into()));
    }
    let template = AugNetParams::zeros(h.dim, h.hidden, h.activation, h.normalize_output);
    let mut r = PayloadReader::new(payload);
    let flat = r.f64s(template.num_params(), "parameters")?;
    r.finish()?;
    let params = template.with_flat(&flat);
    if !params.is_finite() {
        return Err(Error::NonFinite("parameter file holds non-finite weights".into()));
    }
    Ok((params, h.meta))
}

pub fn save_augnet(params: &AugNetParams, meta: &AugNetMeta, path: impl AsRef<Path>) -> Result<()> {
    container::write_file(path.as_ref(), &augnet_to_bytes(params, meta)?)
}

pub fn load_augnet(path: impl AsRef<Path>) -> Result<(AugNetParams, AugNetMeta)> {
    augnet_from_bytes(&container::read_file(path.as_ref())?)
}
