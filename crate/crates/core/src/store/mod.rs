//! Embedding data model, on-disk formats and elementary vector geometry.

mod bundle;
mod prompts;

pub use bundle::{load_bundle, save_bundle, EmbeddingBundle, Split, BUNDLE_MAGIC};
pub use prompts::{load_prompt_bank, save_prompt_bank, PromptBank, PROMPT_MAGIC};

use ndarray::{Array1, ArrayView1, ArrayViewMut1};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero vectors.
pub const EPS_NORM: f64 = 1e-12;

/// Tolerance on `| ||row|| - 1 |` for stored embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-5;

pub fn l2_norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub fn l2_normalize(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    let n = l2_norm(v);
    if !(n > EPS_NORM) {
        return Err(Error::ZeroVector { norm: n });
    }
    Ok(&v / n)
}

pub(crate) fn normalize_in_place(mut v: ArrayViewMut1<f64>) -> Result<()> {
    let n = l2_norm(v.view());
    if !(n > EPS_NORM) {
        return Err(Error::ZeroVector { norm: n });
    }
    v.mapv_inplace(|x| x / n);
    Ok(())
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if !(na > EPS_NORM) {
        return Err(Error::ZeroVector { norm: na });
    }
    if !(nb > EPS_NORM) {
        return Err(Error::ZeroVector { norm: nb });
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Rounds every entry through `f32` so in-memory values equal stored values.
pub(crate) fn round_to_f32<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) {
    a.mapv_inplace(|x| x as f32 as f64);
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimMismatch { expected, actual });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn normalize_three_four() {
        let v = l2_normalize(array![3.0, 4.0].view()).unwrap();
        assert_abs_diff_eq!(v[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn normalize_unit_is_identity() {
        let u = array![0.0, 1.0, 0.0];
        assert_eq!(l2_normalize(u.view()).unwrap(), u);
    }

    #[test]
    fn normalize_zero_fails() {
        assert!(matches!(
            l2_normalize(array![0.0, 0.0].view()),
            Err(Error::ZeroVector { .. })
        ));
    }

    #[test]
    fn cosine_examples() {
        let e0 = array![1.0, 0.0];
        let e1 = array![0.0, 1.0];
        let m0 = array![-1.0, 0.0];
        assert_eq!(cosine_similarity(e0.view(), e0.view()).unwrap(), 1.0);
        assert_eq!(cosine_similarity(e0.view(), e1.view()).unwrap(), 0.0);
        assert_eq!(cosine_similarity(e0.view(), m0.view()).unwrap(), -1.0);
        assert!(cosine_similarity(e0.view(), array![0.0, 0.0].view()).is_err());
        assert!(cosine_similarity(e0.view(), array![1.0].view()).is_err());
    }

    proptest! {
        #[test]
        fn self_cosine_is_one(v in proptest::collection::vec(-10.0f64..10.0, 1..32)) {
            let a = Array1::from(v);
            prop_assume!(l2_norm(a.view()) > 1e-6);
            let c = cosine_similarity(a.view(), a.view()).unwrap();
            prop_assert!((c - 1.0).abs() < 1e-6);
        }

        #[test]
        fn normalize_gives_unit_norm(v in proptest::collection::vec(-10.0f64..10.0, 1..32)) {
            let a = Array1::from(v);
            prop_assume!(l2_norm(a.view()) > 1e-6);
            let u = l2_normalize(a.view()).unwrap();
            prop_assert!((l2_norm(u.view()) - 1.0).abs() < 1e-12);
            prop_assert!(cosine_similarity(a.view(), u.view()).unwrap() > 1.0 - 1e-9);
        }
    }
}
