use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{l2_norm, normalize_in_place, round_to_f32, UNIT_NORM_TOL};
use crate::container::{self, PayloadReader, PayloadWriter};
use crate::error::{Error, Result};

pub const BUNDLE_MAGIC: &[u8; 8] = b"EMBNDL01";
const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn code(self) -> i32 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    fn from_code(code: i32) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// A labelled set of unit-norm image embeddings.
///
/// Rows are held as `f64` but every value is exactly representable in `f32`,
/// which is how they are stored on disk; saving and loading is therefore
/// bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    rows: Array2<f64>,
    class_labels: Vec<usize>,
    domain_labels: Option<Vec<usize>>,
    splits: Vec<Split>,
    class_names: Vec<String>,
    domain_names: Vec<String>,
    model: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleHeader {
    version: u32,
    dim: usize,
    n: usize,
    num_classes: usize,
    num_domains: usize,
    class_names: Vec<String>,
    domain_names: Vec<String>,
    has_domain_labels: bool,
    normalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<String>,
}

impl EmbeddingBundle {
    /// Builds a bundle, L2-normalizing every row.
    pub fn new(
        mut rows: Array2<f64>,
        class_labels: Vec<usize>,
        domain_labels: Option<Vec<usize>>,
        splits: Vec<Split>,
        class_names: Vec<String>,
        domain_names: Vec<String>,
    ) -> Result<Self> {
        for row in rows.axis_iter_mut(Axis(0)) {
            normalize_in_place(row)?;
        }
        round_to_f32(&mut rows);
        let bundle = Self {
            rows,
            class_labels,
            domain_labels,
            splits,
            class_names,
            domain_names,
            model: None,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = Some(model.into());
        self
    }

    fn validate(&self) -> Result<()> {
        let (n, dim) = self.rows.dim();
        if dim == 0 {
            return Err(Error::Shape("dim must be positive".into()));
        }
        if n == 0 {
            return Err(Error::Shape("bundle has no rows".into()));
        }
        if self.class_labels.len() != n {
            return Err(Error::Shape(format!(
                "{} class labels for {n} rows",
                self.class_labels.len()
            )));
        }
        if self.splits.len() != n {
            return Err(Error::Shape(format!("{} split tags for {n} rows", self.splits.len())));
        }
        if self.class_names.is_empty() {
            return Err(Error::Shape("no class names".into()));
        }
        let c = self.class_names.len();
        if let Some((i, &y)) = self.class_labels.iter().enumerate().find(|(_, &y)| y >= c) {
            return Err(Error::Label(format!("row {i}: class label {y} >= {c} classes")));
        }
        if let Some(domains) = &self.domain_labels {
            if domains.len() != n {
                return Err(Error::Shape(format!("{} domain labels for {n} rows", domains.len())));
            }
            let k = self.domain_names.len();
            if let Some((i, &d)) = domains.iter().enumerate().find(|(_, &d)| d >= k) {
                return Err(Error::Label(format!("row {i}: domain label {d} >= {k} domains")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.rows.row(i)
    }

    pub fn class_labels(&self) -> &[usize] {
        &self.class_labels
    }

    pub fn domain_labels(&self) -> Option<&[usize]> {
        self.domain_labels.as_deref()
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn domain_names(&self) -> &[String] {
        &self.domain_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn model(&self) -> Option<&str> {
        self.model.as_deref()
    }

    pub fn domain_index(&self, name: &str) -> Result<usize> {
        self.domain_names
            .iter()
            .position(|d| d == name)
            .ok_or_else(|| Error::UnknownDomain(name.to_string()))
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Row-subset with labels carried along; names are kept whole.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("subset of zero rows".into()));
        }
        Ok(Self {
            rows: self.rows.select(Axis(0), indices),
            class_labels: indices.iter().map(|&i| self.class_labels[i]).collect(),
            domain_labels: self
                .domain_labels
                .as_ref()
                .map(|d| indices.iter().map(|&i| d[i]).collect()),
            splits: indices.iter().map(|&i| self.splits[i]).collect(),
            class_names: self.class_names.clone(),
            domain_names: self.domain_names.clone(),
            model: self.model.clone(),
        })
    }

    pub fn split(&self, split: Split) -> Result<Self> {
        self.subset(&self.split_indices(split)).map_err(|_| match split {
            Split::Test => Error::EmptyTestSet,
            _ => Error::EmptyInput(format!("no rows in split {}", split.as_str())),
        })
    }

    /// Largest deviation of any row norm from one.
    pub fn max_norm_deviation(&self) -> f64 {
        self.rows
            .axis_iter(Axis(0))
            .map(|r| (l2_norm(r) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = BundleHeader {
            version: BUNDLE_VERSION,
            dim: self.dim(),
            n: self.len(),
            num_classes: self.class_names.len(),
            num_domains: self.domain_names.len(),
            class_names: self.class_names.clone(),
            domain_names: self.domain_names.clone(),
            has_domain_labels: self.domain_labels.is_some(),
            normalized: true,
            model: self.model.clone(),
        };
        let mut w = PayloadWriter::new();
        w.f32s(self.rows.iter().map(|&x| x as f32));
        w.i32s(self.class_labels.iter().map(|&y| y as i32));
        if let Some(d) = &self.domain_labels {
            w.i32s(d.iter().map(|&x| x as i32));
        }
        w.i32s(self.splits.iter().map(|s| s.code()));
        container::encode(BUNDLE_MAGIC, &header, &w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (BundleHeader, _) = container::decode(bytes, BUNDLE_MAGIC)?;
        if h.version != BUNDLE_VERSION {
            return Err(Error::Format(format!("unsupported header version {}", h.version)));
        }
        if h.class_names.len() != h.num_classes || h.domain_names.len() != h.num_domains {
            return Err(Error::Format("name lists disagree with declared counts".into()));
        }
        if h.dim == 0 || h.n == 0 {
            return Err(Error::Shape(format!("invalid shape {}x{}", h.n, h.dim)));
        }
        let mut r = PayloadReader::new(payload);
        let floats = r.f32s(
            h.n.checked_mul(h.dim)
                .ok_or_else(|| Error::Shape("row payload size overflows".into()))?,
            "rows",
        )?;
        let classes = to_labels(r.i32s(h.n, "class labels")?, "class")?;
        let domains = if h.has_domain_labels {
            Some(to_labels(r.i32s(h.n, "domain labels")?, "domain")?)
        } else {
            None
        };
        let splits = r
            .i32s(h.n, "split tags")?
            .into_iter()
            .enumerate()
            .map(|(i, code)| {
                Split::from_code(code)
                    .ok_or_else(|| Error::Label(format!("row {i}: invalid split tag {code}")))
            })
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;

        let rows = Array2::from_shape_vec((h.n, h.dim), floats.into_iter().map(f64::from).collect())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let mut bundle = Self {
            rows,
            class_labels: classes,
            domain_labels: domains,
            splits,
            class_names: h.class_names,
            domain_names: h.domain_names,
            model: h.model,
        };
        bundle.validate()?;
        if h.normalized {
            let dev = bundle.max_norm_deviation();
            if dev >= UNIT_NORM_TOL {
                return Err(Error::Format(format!(
                    "header claims normalized rows but a row norm deviates by {dev:e}"
                )));
            }
        } else {
            for row in bundle.rows.axis_iter_mut(Axis(0)) {
                normalize_in_place(row)?;
            }
            round_to_f32(&mut bundle.rows);
        }
        Ok(bundle)
    }

    /// Copy of row `i` as an owned vector.
    pub fn row_owned(&self, i: usize) -> Array1<f64> {
        self.rows.row(i).to_owned()
    }
}

fn to_labels(raw: Vec<i32>, what: &str) -> Result<Vec<usize>> {
    raw.into_iter()
        .enumerate()
        .map(|(i, v)| {
            usize::try_from(v).map_err(|_| Error::Label(format!("row {i}: negative {what} label {v}")))
        })
        .collect()
}

pub fn save_bundle(bundle: &EmbeddingBundle, path: impl AsRef<Path>) -> Result<()> {
    container::write_file(path.as_ref(), &bundle.to_bytes()?)
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<EmbeddingBundle> {
    EmbeddingBundle::from_bytes(&container::read_file(path.as_ref())?)
}
