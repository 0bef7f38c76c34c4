//! Experiment orchestration: the base-seed × explanation-seed protocol,
//! sweeps, the low-resource study, significance tests and reports.

mod pipeline;
mod report;
mod stats;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datamodel::{read_dataset, QaInstance};
use crate::models::{EncoderStyle, ModelConfig, SalLoss, TrainConfig};
use crate::saliency::{AttributionMethod, DEFAULT_K, DEFAULT_T};
use crate::salkg::GateConfig;
use crate::synthdata::{generate_dataset, mix_seed, GenConfig, PerturbMode, SyntheticSplits};
use crate::{Error, Result};

pub use pipeline::{
    low_resource_study, sweep, Pipeline, SweepParam, SweepResult, KG_SALT, LABEL_SALT, NOKG_SALT,
};
pub use report::{dump_case_studies, emit_report, read_report_csv, Cell, ReportRow, ReportTable};
pub use stats::{
    accuracy, mean_std, welch_ttest, ResultStore, ResultTable, RunRecord, TTest, VariantSummary,
};

/// Env var that overrides the output directory of an experiment.
pub const OUT_DIR_ENV: &str = "KGSAL_OUT_DIR";

pub const T_SWEEP: [f64; 5] = [0.01, 0.02, 0.03, 0.04, 0.05];
pub const K_SWEEP: [f64; 4] = [5.0, 10.0, 30.0, 50.0];
pub const LAMBDA_SWEEP: [f64; 3] = [0.1, 1.0, 10.0];
pub const LOW_RESOURCE_FRACTIONS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 1.0];

/// Which base seeds the explanation variants run on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Every base seed × every explanation seed.
    Full,
    /// Only the base seed whose KG model has the best dev accuracy.
    BestBase,
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Protocol::Full),
            "best-base" => Ok(Protocol::BestBase),
            _ => Err(Error::Config(format!("unknown protocol {s:?}"))),
        }
    }
}

/// A named model configuration in a result table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    NoKg,
    Kg,
    Ensemble,
    OracleCoarse,
    OracleFine(Method),
    OracleHybrid(Method),
    SalkgCoarse,
    SalkgFine(Method),
    SalkgHybrid(Method),
    RandomCoarse,
    RandomFine,
    RandomHybrid,
    HeuristicCoarse,
    HeuristicFine,
    HeuristicHybrid,
    RandomPrune,
    HeuristicPrune,
}

/// Fine attribution method, ordered for stable table layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Grad,
    Occl,
}

impl From<Method> for AttributionMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Grad => AttributionMethod::Grad,
            Method::Occl => AttributionMethod::Occl,
        }
    }
}

impl From<AttributionMethod> for Method {
    fn from(m: AttributionMethod) -> Self {
        match m {
            AttributionMethod::Grad => Method::Grad,
            AttributionMethod::Occl => Method::Occl,
        }
    }
}

impl Variant {
    /// Variants that need no explanation seed.
    pub fn is_base_level(self) -> bool {
        matches!(
            self,
            Variant::NoKg | Variant::Kg | Variant::Ensemble | Variant::OracleCoarse
        )
    }

    pub fn uses_kg(self) -> bool {
        self != Variant::NoKg
    }

    /// The fine model a hybrid gates over.
    pub fn fine_part(self) -> Option<Variant> {
        match self {
            Variant::OracleHybrid(m) => Some(Variant::OracleFine(m)),
            Variant::SalkgHybrid(m) => Some(Variant::SalkgFine(m)),
            Variant::RandomHybrid => Some(Variant::RandomFine),
            Variant::HeuristicHybrid => Some(Variant::HeuristicFine),
            _ => None,
        }
    }

    /// The default line-up: bases, oracles, SalKG and Random, both methods.
    pub fn standard() -> Vec<Variant> {
        let mut v = vec![
            Variant::NoKg,
            Variant::Kg,
            Variant::Ensemble,
            Variant::OracleCoarse,
        ];
        for m in [Method::Grad, Method::Occl] {
            v.extend([Variant::OracleFine(m), Variant::OracleHybrid(m)]);
        }
        v.push(Variant::SalkgCoarse);
        for m in [Method::Grad, Method::Occl] {
            v.extend([Variant::SalkgFine(m), Variant::SalkgHybrid(m)]);
        }
        v.extend([
            Variant::RandomCoarse,
            Variant::RandomFine,
            Variant::RandomHybrid,
        ]);
        v
    }

    pub fn all() -> Vec<Variant> {
        let mut v = Variant::standard();
        v.extend([
            Variant::HeuristicCoarse,
            Variant::HeuristicFine,
            Variant::HeuristicHybrid,
            Variant::RandomPrune,
            Variant::HeuristicPrune,
        ]);
        v
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = |m: &Method| match m {
            Method::Grad => "Grad",
            Method::Occl => "Occl",
        };
        match self {
            Variant::NoKg => write!(f, "No-KG"),
            Variant::Kg => write!(f, "KG"),
            Variant::Ensemble => write!(f, "No-KG+KG"),
            Variant::OracleCoarse => write!(f, "Oracle-Coarse"),
            Variant::OracleFine(x) => write!(f, "Oracle-Fine-{}", m(x)),
            Variant::OracleHybrid(x) => write!(f, "Oracle-Hybrid-{}", m(x)),
            Variant::SalkgCoarse => write!(f, "SalKG-Coarse"),
            Variant::SalkgFine(x) => write!(f, "SalKG-Fine-{}", m(x)),
            Variant::SalkgHybrid(x) => write!(f, "SalKG-Hybrid-{}", m(x)),
            Variant::RandomCoarse => write!(f, "Random-Coarse"),
            Variant::RandomFine => write!(f, "Random-Fine"),
            Variant::RandomHybrid => write!(f, "Random-Hybrid"),
            Variant::HeuristicCoarse => write!(f, "Heuristic-Coarse"),
            Variant::HeuristicFine => write!(f, "Heuristic-Fine"),
            Variant::HeuristicHybrid => write!(f, "Heuristic-Hybrid"),
            Variant::RandomPrune => write!(f, "Random-Prune"),
            Variant::HeuristicPrune => write!(f, "Heuristic-Prune"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::all()
            .into_iter()
            .find(|v| v.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> Self {
        v.to_string()
    }
}

/// Every hyperparameter and seed of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub data: GenConfig,
    /// Read `train.jsonl`, `dev.jsonl`, `test.jsonl` from here instead of
    /// generating data.
    pub dataset_dir: Option<PathBuf>,
    /// KG model architecture; `graph` must be set.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gate: GateConfig,
    pub t: f64,
    pub k: f64,
    pub lambda: f64,
    pub sal_loss: SalLoss,
    pub base_seeds: Vec<u64>,
    pub expl_seeds: Vec<String>,
    pub protocol: Protocol,
    pub variants: Vec<Variant>,
    /// Test-time KG perturbation evaluated alongside the clean test set.
    pub perturb: Option<PerturbMode>,
    pub perturb_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "b0".into(),
            data: GenConfig::default(),
            dataset_dir: None,
            model: ModelConfig::kg(EncoderStyle::PathAttn, 64),
            train: TrainConfig::default(),
            gate: GateConfig::default(),
            t: DEFAULT_T,
            k: DEFAULT_K,
            lambda: 1.0,
            sal_loss: SalLoss::Kl,
            base_seeds: vec![1, 2, 3],
            expl_seeds: vec!["A".into(), "B".into(), "C".into()],
            protocol: Protocol::Full,
            variants: Variant::standard(),
            perturb: Some(PerturbMode::Relation),
            perturb_seed: 17,
        }
    }
}

impl ExperimentConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        if self.model.graph.is_none() {
            return Err(Error::Config("model.graph must name a KG encoder".into()));
        }
        if self.base_seeds.is_empty() || self.expl_seeds.is_empty() {
            return Err(Error::Config(
                "need at least one base and one explanation seed".into(),
            ));
        }
        let mut names = self.expl_seeds.clone();
        names.sort();
        names.dedup();
        if names.len() != self.expl_seeds.len() {
            return Err(Error::Config(
                "explanation seed names must be distinct".into(),
            ));
        }
        // s_c is a probability difference, so T >= 1 would label nothing.
        if !(0.0..1.0).contains(&self.t) {
            return Err(Error::Config(format!("T = {} must lie in [0, 1)", self.t)));
        }
        if !(self.k > 0.0 && self.k <= 100.0) {
            return Err(Error::Config(format!(
                "k = {} must lie in (0, 100]",
                self.k
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "λ = {} must be non-negative",
                self.lambda
            )));
        }
        Ok(())
    }

    /// `$KGSAL_OUT_DIR` if set, else `runs/<name>`.
    pub fn out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) => PathBuf::from(dir),
            None => Path::new("runs").join(&self.name),
        }
    }

    pub fn nokg_config(&self) -> ModelConfig {
        ModelConfig {
            graph: None,
            ..self.model.clone()
        }
    }
}

/// Seed value behind an explanation-seed name such as `"A"`.
pub fn expl_seed_value(name: &str) -> u64 {
    name.bytes()
        .fold(0xE5EE_D000, |acc, b| mix_seed(acc, u64::from(b)))
}

/// The three splits an experiment runs on.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<QaInstance>,
    pub dev: Vec<QaInstance>,
    pub test: Vec<QaInstance>,
}

impl From<SyntheticSplits> for Dataset {
    fn from(s: SyntheticSplits) -> Self {
        Dataset {
            train: s.train,
            dev: s.dev,
            test: s.test,
        }
    }
}

impl Dataset {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        match &cfg.dataset_dir {
            Some(dir) => Dataset::read(dir),
            None => Ok(generate_dataset(&cfg.data)?.into()),
        }
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let split = |name: &str| {
            let path = dir.join(format!("{name}.jsonl"));
            if !path.exists() {
                return Err(Error::MissingArtifact(path.display().to_string()));
            }
            read_dataset(&path)
        };
        Ok(Dataset {
            train: split("train")?,
            dev: split("dev")?,
            test: split("test")?,
        })
    }

    /// Train, dev and test in that order.
    pub fn all(&self) -> Vec<QaInstance> {
        self.train
            .iter()
            .chain(&self.dev)
            .chain(&self.test)
            .cloned()
            .collect()
    }
}
