use std::path::Path;

use ndarray::{Array2, Array3, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{l2_norm, normalize_in_place, round_to_f32, UNIT_NORM_TOL};
use crate::container::{self, PayloadReader, PayloadWriter};
use crate::error::{Error, Result};

pub const PROMPT_MAGIC: &[u8; 8] = b"PRMBNK01";
const PROMPT_VERSION: u32 = 1;

/// Text embeddings of every `domain ∘ class` prompt plus class-only prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    /// `K × C × D`
    domain_class_text: Array3<f64>,
    /// `C × D`
    class_text: Array2<f64>,
    domain_names: Vec<String>,
    class_names: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PromptHeader {
    version: u32,
    dim: usize,
    num_domains: usize,
    num_classes: usize,
    domain_names: Vec<String>,
    class_names: Vec<String>,
    normalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    model: Option<String>,
}

impl PromptBank {
    /// Builds a bank, L2-normalizing every text row.
    pub fn new(
        mut domain_class_text: Array3<f64>,
        mut class_text: Array2<f64>,
        domain_names: Vec<String>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        for mut per_domain in domain_class_text.axis_iter_mut(Axis(0)) {
            for row in per_domain.axis_iter_mut(Axis(0)) {
                normalize_in_place(row)?;
            }
        }
        for row in class_text.axis_iter_mut(Axis(0)) {
            normalize_in_place(row)?;
        }
        round_to_f32(&mut domain_class_text);
        round_to_f32(&mut class_text);
        let bank = Self {
            domain_class_text,
            class_text,
            domain_names,
            class_names,
        };
        bank.validate()?;
        Ok(bank)
    }

    fn validate(&self) -> Result<()> {
        let (k, c, d) = self.domain_class_text.dim();
        let (c2, d2) = self.class_text.dim();
        if d == 0 || d2 == 0 {
            return Err(Error::Shape("dim must be positive".into()));
        }
        if c == 0 {
            return Err(Error::Shape("prompt bank has no classes".into()));
        }
        if c != c2 || d != d2 {
            return Err(Error::Shape(format!(
                "domain-class text is {k}x{c}x{d} but class text is {c2}x{d2}"
            )));
        }
        if self.domain_names.len() != k || self.class_names.len() != c {
            return Err(Error::Shape("name lists disagree with tensor shape".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.class_text.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_text.nrows()
    }

    pub fn num_domains(&self) -> usize {
        self.domain_class_text.len_of(Axis(0))
    }

    pub fn domain_names(&self) -> &[String] {
        &self.domain_names
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Text embedding of `domain ∘ class`.
    pub fn domain_class(&self, domain: usize, class: usize) -> ArrayView1<'_, f64> {
        self.domain_class_text.slice(ndarray::s![domain, class, ..])
    }

    /// `C × D` view of every class prompt under `domain`.
    pub fn domain_rows(&self, domain: usize) -> ArrayView2<'_, f64> {
        self.domain_class_text.index_axis(Axis(0), domain)
    }

    /// Text embedding of the bare class name.
    pub fn class(&self, class: usize) -> ArrayView1<'_, f64> {
        self.class_text.row(class)
    }

    pub fn class_rows(&self) -> ArrayView2<'_, f64> {
        self.class_text.view()
    }

    pub fn domain_index(&self, name: &str) -> Result<usize> {
        self.domain_names
            .iter()
            .position(|d| d == name)
            .ok_or_else(|| Error::UnknownDomain(name.to_string()))
    }

    pub fn check_domain(&self, domain: usize) -> Result<()> {
        if domain >= self.num_domains() {
            return Err(Error::UnknownDomain(format!(
                "domain index {domain} (bank has {})",
                self.num_domains()
            )));
        }
        Ok(())
    }

    pub fn max_norm_deviation(&self) -> f64 {
        let dc = self
            .domain_class_text
            .lanes(Axis(2))
            .into_iter()
            .map(|r| (l2_norm(r) - 1.0).abs());
        let c = self.class_text.axis_iter(Axis(0)).map(|r| (l2_norm(r) - 1.0).abs());
        dc.chain(c).fold(0.0, f64::max)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = PromptHeader {
            version: PROMPT_VERSION,
            dim: self.dim(),
            num_domains: self.num_domains(),
            num_classes: self.num_classes(),
            domain_names: self.domain_names.clone(),
            class_names: self.class_names.clone(),
            normalized: true,
            model: None,
        };
        let mut w = PayloadWriter::new();
        w.f32s(self.domain_class_text.iter().map(|&x| x as f32));
        w.f32s(self.class_text.iter().map(|&x| x as f32));
        container::encode(PROMPT_MAGIC, &header, &w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (PromptHeader, _) = container::decode(bytes, PROMPT_MAGIC)?;
        if h.version != PROMPT_VERSION {
            return Err(Error::Format(format!("unsupported header version {}", h.version)));
        }
        if h.domain_names.len() != h.num_domains || h.class_names.len() != h.num_classes {
            return Err(Error::Format("name lists disagree with declared counts".into()));
        }
        let (k, c, d) = (h.num_domains, h.num_classes, h.dim);
        let mut r = PayloadReader::new(payload);
        let dc = r.f32s(k * c * d, "domain-class text")?;
        let ct = r.f32s(c * d, "class text")?;
        r.finish()?;
        let mut bank = Self {
            domain_class_text: Array3::from_shape_vec((k, c, d), dc.into_iter().map(f64::from).collect())
                .map_err(|e| Error::Shape(e.to_string()))?,
            class_text: Array2::from_shape_vec((c, d), ct.into_iter().map(f64::from).collect())
                .map_err(|e| Error::Shape(e.to_string()))?,
            domain_names: h.domain_names,
            class_names: h.class_names,
        };
        bank.validate()?;
        if h.normalized {
            let dev = bank.max_norm_deviation();
            if dev >= UNIT_NORM_TOL {
                return Err(Error::Format(format!(
                    "header claims normalized rows but a row norm deviates by {dev:e}"
                )));
            }
        } else {
            bank = Self::new(bank.domain_class_text, bank.class_text, bank.domain_names, bank.class_names)?;
        }
        Ok(bank)
    }
}

pub fn save_prompt_bank(bank: &PromptBank, path: impl AsRef<Path>) -> Result<()> {
    container::write_file(path.as_ref(), &bank.to_bytes()?)
}

pub fn load_prompt_bank(path: impl AsRef<Path>) -> Result<PromptBank> {
    PromptBank::from_bytes(&container::read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn bank() -> PromptBank {
        let dc = Array3::from_shape_vec(
            (2, 2, 3),
            vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0],
        )
        .unwrap();
        let ct = array![[1.0, 0.0, 1.0], [0.0, 3.0, 0.0]];
        PromptBank::new(dc, ct, vec!["photo".into(), "painting".into()], vec!["a".into(), "b".into()])
            .unwrap()
    }

    #[test]
    fn rows_are_unit() {
        assert!(bank().max_norm_deviation() < 1e-7);
    }

    #[test]
    fn roundtrip() {
        let b = bank();
        assert_eq!(PromptBank::from_bytes(&b.to_bytes().unwrap()).unwrap(), b);
    }

    #[test]
    fn truncated() {
        let bytes = bank().to_bytes().unwrap();
        assert!(matches!(
            PromptBank::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn shape_mismatch() {
        let err = PromptBank::new(
            Array3::ones((1, 2, 3)),
            Array2::ones((3, 3)),
            vec!["d".into()],
            vec!["a".into(), "b".into()],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn lookup() {
        let b = bank();
        assert_eq!(b.domain_index("painting").unwrap(), 1);
        assert!(matches!(b.domain_index("sketch"), Err(Error::UnknownDomain(_))));
        assert!((b.class(1)[1] - 1.0).abs() < 1e-12);
    }
}
