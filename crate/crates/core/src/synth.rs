//! Synthetic joint embedding worlds where every domain shift is one shared
//! direction in both modalities.
//!
//! Class prototypes `p_c`, domain offsets `o_d` and class cues `r_c` are
//! orthonormal. For class `c` in domain `d` the text embedding is
//! `normalize(m·p_c + s·o_d + q·r_{(c+d) mod C})` and images add isotropic
//! Gaussian noise before normalizing. The cue term ties each class to a
//! different auxiliary direction in each domain, so a probe fit on the
//! training domain can lean on a feature that does not transfer.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{cosine_similarity, l2_norm, EmbeddingBundle, PromptBank, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub dim: usize,
    pub classes: usize,
    pub domains: usize,
    pub train_domain: usize,
    /// Scale of the class prototype term.
    pub class_margin: f64,
    pub domain_offset_scale: f64,
    /// Scale of the domain-dependent class cue; 0 disables it.
    pub domain_cue_scale: f64,
    pub noise_sigma: f64,
    pub n_per_class_per_domain: usize,
    /// Fractions of each training-domain class sent to train and val; the
    /// rest is test.
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            classes: 10,
            domains: 2,
            train_domain: 0,
            class_margin: 1.0,
            domain_offset_scale: 1.0,
            domain_cue_scale: 1.0,
            noise_sigma: 0.1,
            n_per_class_per_domain: 100,
            train_fraction: 0.6,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl WorldConfig {
    fn num_directions(&self) -> usize {
        let cues = if self.domain_cue_scale > 0.0 { self.classes } else { 0 };
        self.classes + self.domains + cues
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.domains < 2 {
            return bad(format!("need at least 2 domains, got {}", self.domains));
        }
        if self.train_domain >= self.domains {
            return bad(format!("train_domain {} >= domains {}", self.train_domain, self.domains));
        }
        if self.dim < self.num_directions() {
            return bad(format!(
                "dim {} cannot hold {} orthogonal directions",
                self.dim,
                self.num_directions()
            ));
        }
        for (name, v) in [
            ("class_margin", self.class_margin),
            ("domain_offset_scale", self.domain_offset_scale),
            ("domain_cue_scale", self.domain_cue_scale),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if self.class_margin == 0.0 {
            return bad("class_margin must be positive".into());
        }
        if self.n_per_class_per_domain == 0 {
            return bad("n_per_class_per_domain must be positive".into());
        }
        let (t, v) = (self.train_fraction, self.val_fraction);
        if !(t > 0.0 && v >= 0.0 && t + v <= 1.0) {
            return bad(format!("split fractions train={t} val={v} are invalid"));
        }
        if self.split_sizes().0 == 0 {
            return bad("train split would be empty".into());
        }
        Ok(())
    }

    /// Per-class (train, val, test) counts in the training domain.
    fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.n_per_class_per_domain;
        let t = ((n as f64) * self.train_fraction).round() as usize;
        let v = (((n as f64) * self.val_fraction).round() as usize).min(n - t.min(n));
        (t.min(n), v, n - t.min(n) - v)
    }
}

/// Generating directions, one row each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: WorldConfig,
    pub prototypes: Vec<Vec<f64>>,
    pub domain_offsets: Vec<Vec<f64>>,
    pub class_cues: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct World {
    pub bundle: EmbeddingBundle,
    pub bank: PromptBank,
    pub truth: GroundTruth,
}

/// `n` orthonormal rows from seeded Gaussian draws by modified Gram–Schmidt.
fn orthonormal_rows(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((n, dim));
    let mut i = 0;
    while i < n {
        let mut v = Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng));
        for j in 0..i {
            let qj = q.row(j);
            let p = v.dot(&qj);
            v.scaled_add(-p, &qj);
        }
        let norm = l2_norm(v.view());
        // A near-dependent draw is simply redrawn.
        if norm > 1e-6 {
            q.row_mut(i).assign(&(v / norm));
            i += 1;
        }
    }
    q
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let (c_n, k_n, dim) = (cfg.classes, cfg.domains, cfg.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let basis = orthonormal_rows(cfg.num_directions(), dim, &mut rng);
    let protos = basis.slice(ndarray::s![..c_n, ..]).to_owned();
    let offsets = basis.slice(ndarray::s![c_n..c_n + k_n, ..]).to_owned();
    let cues = basis.slice(ndarray::s![c_n + k_n.., ..]).to_owned();

    let clean = |d: usize, c: usize| -> Array1<f64> {
        let mut v = &protos.row(c) * cfg.class_margin;
        v.scaled_add(cfg.domain_offset_scale, &offsets.row(d));
        if cues.nrows() > 0 {
            v.scaled_add(cfg.domain_cue_scale, &cues.row((c + d) % c_n));
        }
        v
    };

    let mut dc = Array3::<f64>::zeros((k_n, c_n, dim));
    for d in 0..k_n {
        for c in 0..c_n {
            dc.slice_mut(ndarray::s![d, c, ..]).assign(&clean(d, c));
        }
    }
    let domain_names: Vec<String> = (0..k_n).map(|d| format!("domain{d}")).collect();
    let class_names: Vec<String> = (0..c_n).map(|c| format!("class{c}")).collect();
    let bank = PromptBank::new(dc, protos.clone(), domain_names.clone(), class_names.clone())?;

    let n = cfg.n_per_class_per_domain;
    let total = n * c_n * k_n;
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rows = Array2::<f64>::zeros((total, dim));
    let mut class_labels = Vec::with_capacity(total);
    let mut domain_labels = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);
    let (n_train, n_val, _) = cfg.split_sizes();
    let mut r = 0;
    for d in 0..k_n {
        for c in 0..c_n {
            let base = clean(d, c);
            let mut tags: Vec<Split> = if d == cfg.train_domain {
                (0..n)
                    .map(|i| match i {
                        i if i < n_train => Split::Train,
                        i if i < n_train + n_val => Split::Val,
                        _ => Split::Test,
                    })
                    .collect()
            } else {
                vec![Split::Test; n]
            };
            tags.shuffle(&mut rng);
            for tag in tags {
                let mut row = rows.row_mut(r);
                row.assign(&base);
                if cfg.noise_sigma > 0.0 {
                    row.mapv_inplace(|v| v + noise.sample(&mut rng));
                }
                class_labels.push(c);
                domain_labels.push(d);
                splits.push(tag);
                r += 1;
            }
        }
    }
    let bundle = EmbeddingBundle::new(rows, class_labels, Some(domain_labels), splits, class_names, domain_names)?;

    let to_vecs = |a: &Array2<f64>| a.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
    let truth = GroundTruth {
        config: cfg.clone(),
        prototypes: to_vecs(&protos),
        domain_offsets: to_vecs(&offsets),
        class_cues: to_vecs(&cues),
    };
    Ok(World { bundle, bank, truth })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSummary {
    /// `1 - max cos` between training-domain class centroids of distinct classes.
    pub min_class_margin: f64,
    /// Mean cosine between the image-centroid shift and the text shift, over
    /// classes and unseen domains.
    pub mean_shift_alignment: f64,
    pub split_counts: BTreeMap<String, usize>,
    pub domain_counts: BTreeMap<String, usize>,
}

fn centroids(world: &World, domain: usize) -> Array2<f64> {
    let b = &world.bundle;
    let c_n = world.bank.num_classes();
    let mut sums = Array2::<f64>::zeros((c_n, b.dim()));
    let labels = b.domain_labels().expect("synthetic bundles carry domain labels");
    for i in 0..b.len() {
        if labels[i] == domain {
            let mut row = sums.row_mut(b.class_labels()[i]);
            row += &b.row(i);
        }
    }
    sums
}

pub fn world_summary(world: &World) -> Result<WorldSummary> {
    let train = world.truth.config.train_domain;
    let bank = &world.bank;
    let base = centroids(world, train);
    let c_n = bank.num_classes();

    let mut max_cos = f64::NEG_INFINITY;
    for a in 0..c_n {
        for b in a + 1..c_n {
            max_cos = max_cos.max(cosine_similarity(base.row(a), base.row(b))?);
        }
    }

    let mut align = Vec::new();
    for k in (0..bank.num_domains()).filter(|&k| k != train) {
        let other = centroids(world, k);
        for c in 0..c_n {
            let img = &other.row(c) - &base.row(c);
            let txt = &bank.domain_class(k, c) - &bank.domain_class(train, c);
            align.push(cosine_similarity(img.view(), txt.view())?);
        }
    }

    let bundle = &world.bundle;
    let mut split_counts = BTreeMap::new();
    for s in [Split::Train, Split::Val, Split::Test] {
        split_counts.insert(s.as_str().to_string(), bundle.split_indices(s).len());
    }
    let mut domain_counts = BTreeMap::new();
    for (name, d) in bundle.domain_names().iter().zip(0..) {
        let n = bundle.domain_labels().unwrap_or(&[]).iter().filter(|&&l| l == d).count();
        domain_counts.insert(name.clone(), n);
    }
    Ok(WorldSummary {
        min_class_margin: 1.0 - max_cos,
        mean_shift_alignment: align.iter().sum::<f64>() / align.len() as f64,
        split_counts,
        domain_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augnet::{da_loss_from_output, text_direction, DomainPair};
    use crate::zeroshot::{assign_domains, build_head, HeadMode};

    fn noiseless() -> WorldConfig {
        WorldConfig { noise_sigma: 0.0, n_per_class_per_domain: 10, ..Default::default() }
    }

    #[test]
    fn basis_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = orthonormal_rows(22, 64, &mut rng);
        let g = q.dot(&q.t());
        for i in 0..22 {
            for j in 0..22 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_images_equal_text() {
        let w = generate_world(&noiseless()).unwrap();
        let dl = w.bundle.domain_labels().unwrap();
        for i in 0..w.bundle.len() {
            let t = w.bank.domain_class(dl[i], w.bundle.class_labels()[i]);
            assert_eq!(w.bundle.row(i), t);
        }
    }

    #[test]
    fn noiseless_true_shift_has_zero_alignment_loss() {
        let w = generate_world(&noiseless()).unwrap();
        let pair = DomainPair::new(0, 1);
        for c in 0..10 {
            let x = w.bank.domain_class(0, c);
            let shifted = w.bank.domain_class(1, c);
            let t = text_direction(&w.bank, pair, c, 1e-8).unwrap();
            let l = da_loss_from_output(shifted, x, t.view(), 1e-8);
            assert!(l.abs() < 1e-7, "class {c}: {l}");
        }
        let s = world_summary(&w).unwrap();
        assert!((s.mean_shift_alignment - 1.0).abs() < 1e-7);
    }

    #[test]
    fn noiseless_domain_assignment_is_exact() {
        let w = generate_world(&noiseless()).unwrap();
        assert_eq!(assign_domains(&w.bundle, &w.bank, &[0, 1]).unwrap(), w.bundle.domain_labels().unwrap());
    }

    #[test]
    fn default_world_is_zero_shot_separable() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let head = build_head(&w.bank, HeadMode::Generic).unwrap();
        let dl = w.bundle.domain_labels().unwrap();
        let idx: Vec<usize> = (0..w.bundle.len()).filter(|&i| dl[i] == 0).collect();
        let correct = idx
            .iter()
            .filter(|&&i| head.predict(w.bundle.row(i)).unwrap() == w.bundle.class_labels()[i])
            .count();
        assert!(correct as f64 / idx.len() as f64 >= 0.99);
    }

    #[test]
    fn counts_follow_config() {
        let w = generate_world(&WorldConfig::default()).unwrap();
        let s = world_summary(&w).unwrap();
        assert_eq!(s.split_counts["train"], 600);
        assert_eq!(s.split_counts["val"], 200);
        assert_eq!(s.split_counts["test"], 200 + 1000);
        assert_eq!(s.domain_counts["domain0"], 1000);
        assert_eq!(s.domain_counts["domain1"], 1000);
        // Only the training domain appears in train and val.
        let dl = w.bundle.domain_labels().unwrap();
        for (i, s) in w.bundle.splits().iter().enumerate() {
            if *s != Split::Test {
                assert_eq!(dl[i], 0);
            }
        }
    }

    #[test]
    fn margin_matches_brute_force() {
        let w = generate_world(&WorldConfig { n_per_class_per_domain: 20, ..Default::default() }).unwrap();
        let b = &w.bundle;
        let dl = b.domain_labels().unwrap();
        let mut cents = vec![vec![0.0; b.dim()]; 10];
        for i in 0..b.len() {
            if dl[i] == 0 {
                for j in 0..b.dim() {
                    cents[b.class_labels()[i]][j] += b.rows()[[i, j]];
                }
            }
        }
        let cos = |a: &[f64], c: &[f64]| {
            let dot: f64 = a.iter().zip(c).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nc: f64 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nc)
        };
        let mut best = f64::NEG_INFINITY;
        for a in 0..10 {
            for c in 0..10 {
                if a != c {
                    best = best.max(cos(&cents[a], &cents[c]));
                }
            }
        }
        let s = world_summary(&w).unwrap();
        assert!((s.min_class_margin - (1.0 - best)).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = WorldConfig { n_per_class_per_domain: 5, ..Default::default() };
        let a = generate_world(&cfg).unwrap();
        let b = generate_world(&cfg).unwrap();
        assert_eq!(a.bundle.to_bytes().unwrap(), b.bundle.to_bytes().unwrap());
        assert_eq!(a.bank.to_bytes().unwrap(), b.bank.to_bytes().unwrap());
        let c = generate_world(&WorldConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.bundle.to_bytes().unwrap(), c.bundle.to_bytes().unwrap());
    }

    #[test]
    fn too_small_dimension_is_a_config_error() {
        let cfg = WorldConfig { dim: 21, ..Default::default() };
        assert!(matches!(generate_world(&cfg), Err(Error::Config(_))));
        let cfg = WorldConfig { dim: 12, domain_cue_scale: 0.0, ..Default::default() };
        assert!(generate_world(&cfg).is_ok());
        let cfg = WorldConfig { classes: 1, ..Default::default() };
        assert!(matches!(generate_world(&cfg), Err(Error::Config(_))));
    }
}
