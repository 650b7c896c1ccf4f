use std::path::{Path, PathBuf};

use lads_core::augnet::AugTrainConfig;
use lads_core::probe::ProbeConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ZsGeneric,
    ZsAdaptive,
    Lp,
    LpZsInit,
    Wise,
    Lads,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::ZsGeneric,
        Method::ZsAdaptive,
        Method::Lp,
        Method::LpZsInit,
        Method::Wise,
        Method::Lads,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ZsGeneric => "zs_generic",
            Method::ZsAdaptive => "zs_adaptive",
            Method::Lp => "lp",
            Method::LpZsInit => "lp_zs_init",
            Method::Wise => "wise",
            Method::Lads => "lads",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Every training row has the same source domain.
    #[default]
    Standard,
    /// Each training row's source domain is assigned zero-shot (dataset bias).
    Bias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub bundle: PathBuf,
    pub prompts: PathBuf,
    pub output_dir: PathBuf,
    pub mode: Mode,
    /// Prompt-bank domain of the labelled data. In bias mode it is just one
    /// of the candidate domains.
    pub train_domain: String,
    pub unseen_domains: Vec<String>,
    /// Bundle domains scored as in-domain; defaults to `[train_domain]`.
    pub id_domains: Option<Vec<String>>,
    pub aug: AugTrainConfig,
    pub probe: ProbeConfig,
    pub methods: Vec<Method>,
    /// Each seed overrides `aug.seed` and `probe.seed` for its run.
    pub seeds: Vec<u64>,
    pub extended_weight: f64,
    pub wise_mix: f64,
    pub nn_sample_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            bundle: PathBuf::from("bundle.emb"),
            prompts: PathBuf::from("prompts.bank"),
            output_dir: PathBuf::from("runs"),
            mode: Mode::Standard,
            train_domain: String::new(),
            unseen_domains: Vec::new(),
            id_domains: None,
            aug: AugTrainConfig::default(),
            probe: ProbeConfig::default(),
            methods: Method::ALL.to_vec(),
            seeds: vec![0],
            extended_weight: 0.5,
            wise_mix: 0.5,
            nn_sample_size: 1000,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Checks fields that need no data files.
    pub fn validate(&self) -> Result<()> {
        self.aug.validate().map_err(|e| CliError::core("aug", e))?;
        self.probe.validate().map_err(|e| CliError::core("probe", e))?;
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds", "at least one seed is required"));
        }
        if self.methods.is_empty() {
            return Err(CliError::config("methods", "at least one method is required"));
        }
        if self.train_domain.is_empty() {
            return Err(CliError::config("train_domain", "must name a prompt-bank domain"));
        }
        if self.unseen_domains.is_empty() && self.methods.contains(&Method::Lads) {
            return Err(CliError::config("unseen_domains", "lads needs at least one unseen domain"));
        }
        if self.unseen_domains.contains(&self.train_domain) {
            return Err(CliError::config("unseen_domains", "must not contain train_domain"));
        }
        if !(0.0..=1.0).contains(&self.extended_weight) {
            return Err(CliError::config("extended_weight", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.wise_mix) {
            return Err(CliError::config("wise_mix", "must lie in [0, 1]"));
        }
        if self.nn_sample_size == 0 {
            return Err(CliError::config("nn_sample_size", "must be positive"));
        }
        Ok(())
    }

    pub fn id_domain_names(&self) -> Vec<String> {
        self.id_domains.clone().unwrap_or_else(|| vec![self.train_domain.clone()])
    }
}

/// Values to try for each swept field; an empty list keeps the config value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub alpha: Vec<f64>,
    pub aug_lr: Vec<f64>,
    pub aug_weight_decay: Vec<f64>,
    pub probe_lr: Vec<f64>,
    pub probe_weight_decay: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    pub aug_lr: f64,
    pub aug_weight_decay: f64,
    pub probe_lr: f64,
    pub probe_weight_decay: f64,
}

impl GridPoint {
    pub fn apply(&self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        c.aug.alpha = self.alpha;
        c.aug.lr = self.aug_lr;
        c.aug.weight_decay = self.aug_weight_decay;
        c.probe.lr = self.probe_lr;
        c.probe.weight_decay = self.probe_weight_decay;
        c
    }
}

impl SweepGrid {
    /// Cartesian product in field order, the last field varying fastest.
    pub fn points(&self, base: &ExperimentConfig) -> Vec<GridPoint> {
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let mut out = Vec::new();
        for &alpha in &or(&self.alpha, base.aug.alpha) {
            for &aug_lr in &or(&self.aug_lr, base.aug.lr) {
                for &aug_weight_decay in &or(&self.aug_weight_decay, base.aug.weight_decay) {
                    for &probe_lr in &or(&self.probe_lr, base.probe.lr) {
                        for &probe_weight_decay in &or(&self.probe_weight_decay, base.probe.weight_decay) {
                            out.push(GridPoint {
                                alpha,
                                aug_lr,
                                aug_weight_decay,
                                probe_lr,
                                probe_weight_decay,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_json(r#"{"train_domian": "photo"}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = ExperimentConfig::from_json(r#"{"aug": {"alpah": 0.1}}"#);
        assert!(err.is_err());
    }

    #[test]
    fn defaults_fill_missing_fields() {
        let c = ExperimentConfig::from_json(r#"{"train_domain": "photo", "unseen_domains": ["painting"]}"#).unwrap();
        assert_eq!(c.aug.epochs, 200);
        assert_eq!(c.probe.epochs, 400);
        assert_eq!(c.methods.len(), 6);
        assert_eq!(c.id_domain_names(), vec!["photo".to_string()]);
        c.validate().unwrap();
    }

    #[test]
    fn validation_names_the_key() {
        let c = ExperimentConfig { train_domain: "a".into(), unseen_domains: vec!["b".into()], seeds: vec![], ..Default::default() };
        assert!(c.validate().unwrap_err().to_string().contains("seeds"));
        let c = ExperimentConfig { train_domain: "a".into(), unseen_domains: vec!["a".into()], ..Default::default() };
        assert!(c.validate().unwrap_err().to_string().contains("unseen_domains"));
    }

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()), Some(m));
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
    }

    #[test]
    fn grid_product() {
        let base = ExperimentConfig::default();
        let g = SweepGrid { alpha: vec![0.0, 1.0], probe_lr: vec![0.1, 0.01, 0.001], ..Default::default() };
        let pts = g.points(&base);
        assert_eq!(pts.len(), 6);
        assert_eq!((pts[0].alpha, pts[0].probe_lr), (0.0, 0.1));
        assert_eq!((pts[1].alpha, pts[1].probe_lr), (0.0, 0.01));
        assert!(pts.iter().all(|p| p.aug_lr == base.aug.lr));
        assert_eq!(SweepGrid::default().points(&base).len(), 1);
    }
}
