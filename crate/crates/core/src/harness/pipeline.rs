use std::collections::BTreeMap;

use serde::Serialize;

use super::stats::{mean_std, ResultStore, ResultTable, RunRecord};
use super::{
    expl_seed_value, Dataset, ExperimentConfig, Method, Protocol, Variant, LOW_RESOURCE_FRACTIONS,
};
use crate::datamodel::{ExplanationCache, Granularity, QaInstance};
use crate::models::{train_task_model, LossSpec, Model, ModelConfig, TrainOutcome, Vocab};
use crate::oracle::{
    oracle_coarse_eval, oracle_fine_eval, oracle_hybrid_eval, probs_of, train_oracle_fine,
    Evaluation,
};
use crate::saliency::{build_coarse_cache, build_fine_cache};
use crate::salkg::{
    hard_prune, make_heuristic_labels, make_random_labels, mean_ensemble_eval, mean_qa_nodes,
    train_salkg_coarse, train_salkg_fine, train_salkg_hybrid,
};
use crate::synthdata::{mix_seed, perturb_kg, subsample_train};
use crate::{Error, Result};

pub const NOKG_SALT: u64 = 0x0B;
pub const KG_SALT: u64 = 0x0C;
pub const LABEL_SALT: u64 = 0x1A;

/// Trained base models of one base seed and the explanations derived from
/// them, keyed by threshold.
pub struct Bases {
    pub nokg: Model,
    pub kg: Model,
    coarse: Vec<(f64, ExplanationCache)>,
    fine: Vec<((Method, f64), ExplanationCache)>,
}

/// Runs variants under the seed protocol, memoizing base models and caches
/// so sweeps and repeated calls only train what changed.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub data: Dataset,
    pub vocab: Vocab,
    all: Vec<QaInstance>,
    perturbed_test: Option<Vec<QaInstance>>,
    bases: BTreeMap<u64, Bases>,
    /// Progress messages; silent by default.
    pub log: fn(&str),
}

fn silent(_: &str) {}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, data: Dataset) -> Result<Self> {
        cfg.validate()?;
        if data.train.is_empty() || data.dev.is_empty() || data.test.is_empty() {
            return Err(Error::Config("every split must be non-empty".into()));
        }
        let vocab = Vocab::build(&data.train);
        let perturbed_test = cfg
            .perturb
            .map(|mode| perturb_kg(&data.test, mode, cfg.perturb_seed));
        Ok(Pipeline {
            all: data.all(),
            cfg,
            data,
            vocab,
            perturbed_test,
            bases: BTreeMap::new(),
            log: silent,
        })
    }

    /// Uses externally trained base models for `seed`.
    pub fn insert_bases(&mut self, seed: u64, nokg: Model, kg: Model) -> Result<()> {
        if nokg.is_kg() || !kg.is_kg() {
            return Err(Error::Mismatch("expected a No-KG and a KG model".into()));
        }
        self.bases.insert(
            seed,
            Bases {
                nokg,
                kg,
                coarse: Vec::new(),
                fine: Vec::new(),
            },
        );
        Ok(())
    }

    /// Trains F_No-KG and F_KG for `seed` unless already present.
    pub fn bases(&mut self, seed: u64) -> Result<&Bases> {
        if !self.bases.contains_key(&seed) {
            (self.log)(&format!("training base models, seed {seed}"));
            let (nokg, _) = self.train_base(self.cfg.nokg_config(), mix_seed(seed, NOKG_SALT))?;
            let (kg, _) = self.train_base(self.cfg.model.clone(), mix_seed(seed, KG_SALT))?;
            self.insert_bases(seed, nokg, kg)?;
        }
        Ok(&self.bases[&seed])
    }

    pub fn train_base(&self, config: ModelConfig, seed: u64) -> Result<(Model, TrainOutcome)> {
        let mut m = Model::new(config, self.vocab.clone(), seed)?;
        let (tr, dv) = (m.encode_all(&self.data.train), m.encode_all(&self.data.dev));
        let out = train_task_model(&mut m, &tr, &dv, &LossSpec::default(), &self.cfg.train)?;
        Ok((m, out))
    }

    /// Coarse explanations over all splits at threshold `t`.
    pub fn coarse_cache(&mut self, seed: u64, t: f64) -> Result<&ExplanationCache> {
        self.bases(seed)?;
        let all = &self.all;
        let b = self.bases.get_mut(&seed).unwrap();
        let i = match b.coarse.iter().position(|(x, _)| *x == t) {
            Some(i) => i,
            None => {
                let cache = build_coarse_cache(&b.kg, &b.nokg, all, t)?;
                b.coarse.push((t, cache));
                b.coarse.len() - 1
            }
        };
        Ok(&b.coarse[i].1)
    }

    /// Fine explanations of F_KG over all splits at top-`k`%.
    pub fn fine_cache(&mut self, seed: u64, method: Method, k: f64) -> Result<&ExplanationCache> {
        self.bases(seed)?;
        let all = &self.all;
        let log = self.log;
        let b = self.bases.get_mut(&seed).unwrap();
        let i = match b.fine.iter().position(|(x, _)| *x == (method, k)) {
            Some(i) => i,
            None => {
                log(&format!(
                    "explaining F_KG of seed {seed} with {method:?}, k = {k}"
                ));
                let cache = build_fine_cache(&b.kg, all, method.into(), k)?;
                b.fine.push(((method, k), cache));
                b.fine.len() - 1
            }
        };
        Ok(&b.fine[i].1)
    }

    /// Base seeds that explanation variants run on.
    pub fn explanation_base_seeds(&mut self) -> Result<Vec<u64>> {
        let seeds = self.cfg.base_seeds.clone();
        match self.cfg.protocol {
            Protocol::Full => Ok(seeds),
            Protocol::BestBase => {
                let mut best: Option<(f64, u64)> = None;
                for &s in &seeds {
                    self.bases(s)?;
                    let acc = probs_acc(&self.bases[&s].kg, &self.data.dev)?;
                    if best.is_none_or(|(a, _)| acc > a) {
                        best = Some((acc, s));
                    }
                }
                Ok(vec![best.unwrap().1])
            }
        }
    }

    /// Trains and evaluates `variants` under the configured protocol.
    pub fn run(&mut self, variants: &[Variant]) -> Result<ResultStore> {
        let mut store = ResultStore::default();
        let (base, explained): (Vec<Variant>, Vec<Variant>) =
            variants.iter().partition(|v| v.is_base_level());
        if !base.is_empty() {
            for seed in self.cfg.base_seeds.clone() {
                self.run_base(seed, &base, &mut store)?;
            }
        }
        if !explained.is_empty() {
            for seed in self.explanation_base_seeds()? {
                for name in self.cfg.expl_seeds.clone() {
                    self.run_explained(seed, &name, &explained, &mut store)?;
                }
            }
        }
        Ok(store)
    }

    pub fn run_config_variants(&mut self) -> Result<ResultStore> {
        let variants = self.cfg.variants.clone();
        self.run(&variants)
    }

    fn record(
        &self,
        store: &mut ResultStore,
        variant: Variant,
        seed: u64,
        expl: &str,
        eval: &dyn Fn(&[QaInstance]) -> Result<Evaluation>,
    ) -> Result<()> {
        let perturbed = match (&self.perturbed_test, variant.uses_kg()) {
            (Some(p), true) => Some(eval(p)?.accuracy),
            _ => None,
        };
        let rec = RunRecord {
            variant,
            base_seed: seed,
            expl_seed: expl.to_string(),
            dev_accuracy: eval(&self.data.dev)?.accuracy,
            test_accuracy: eval(&self.data.test)?.accuracy,
            perturbed_accuracy: perturbed,
        };
        (self.log)(&format!("{} test {:.4}", rec.key(), rec.test_accuracy));
        store.push(rec)
    }

    fn run_base(&mut self, seed: u64, variants: &[Variant], store: &mut ResultStore) -> Result<()> {
        let t = self.cfg.t;
        self.bases(seed)?;
        if variants.contains(&Variant::OracleCoarse) {
            self.coarse_cache(seed, t)?;
        }
        let b = &self.bases[&seed];
        for &v in variants {
            match v {
                Variant::NoKg => self.record(store, v, seed, "", &|d| eval_model(&b.nokg, d))?,
                Variant::Kg => self.record(store, v, seed, "", &|d| eval_model(&b.kg, d))?,
                Variant::Ensemble => self.record(store, v, seed, "", &|d| {
                    mean_ensemble_eval(&b.kg, &b.nokg, d)
                })?,
                Variant::OracleCoarse => {
                    let cache = coarse_of(b, t);
                    self.record(store, v, seed, "", &|d| {
                        oracle_coarse_eval(&b.kg, &b.nokg, cache, d)
                    })?
                }
                _ => unreachable!("{v} is not a base-level variant"),
            }
        }
        Ok(())
    }

    fn run_explained(
        &mut self,
        seed: u64,
        name: &str,
        variants: &[Variant],
        store: &mut ResultStore,
    ) -> Result<()> {
        let (t, k) = (self.cfg.t, self.cfg.k);
        let methods: Vec<Method> = variants
            .iter()
            .filter_map(|v| match v.fine_part().unwrap_or(*v) {
                Variant::OracleFine(m) | Variant::SalkgFine(m) => Some(m),
                _ => None,
            })
            .collect();
        for m in methods {
            self.fine_cache(seed, m, k)?;
        }
        if variants.contains(&Variant::SalkgCoarse) {
            self.coarse_cache(seed, t)?;
        }
        let s = mix_seed(seed, expl_seed_value(name));
        let cfg = &self.cfg;
        let (train, dev) = (&self.data.train, &self.data.dev);
        let b = &self.bases[&seed];
        let kind = b.kg.unit_kind().unwrap();
        let random_fine = || {
            make_random_labels(
                &self.all,
                Granularity::Fine,
                kind,
                k,
                mix_seed(s, LABEL_SALT),
            )
        };
        let heuristic_fine = || make_heuristic_labels(&self.all, Granularity::Fine, kind, 0.0);

        // Fine models are shared with the hybrids built on top of them.
        let mut fine_models: BTreeMap<Variant, Model> = BTreeMap::new();
        let mut fine_model = |v: Variant| -> Result<Model> {
            if let Some(m) = fine_models.get(&v) {
                return Ok(m.clone());
            }
            let salkg_fine = |cache: &ExplanationCache| {
                train_salkg_fine(
                    &cfg.model,
                    &self.vocab,
                    Some(cache),
                    train,
                    dev,
                    cfg.lambda,
                    cfg.sal_loss,
                    s,
                    &cfg.train,
                )
            };
            let (m, _) = match v {
                Variant::OracleFine(m) => train_oracle_fine(
                    &cfg.model,
                    &self.vocab,
                    fine_of(b, m, k),
                    train,
                    dev,
                    s,
                    &cfg.train,
                )?,
                Variant::SalkgFine(m) => salkg_fine(fine_of(b, m, k))?,
                Variant::RandomFine => salkg_fine(&random_fine())?,
                Variant::HeuristicFine => salkg_fine(&heuristic_fine())?,
                _ => unreachable!(),
            };
            fine_models.insert(v, m.clone());
            Ok(m)
        };

        for &v in variants {
            (self.log)(&format!("training {v}, seed {seed}{name}"));
            match v {
                Variant::OracleFine(m) => {
                    let f = fine_model(v)?;
                    let cache = fine_of(b, m, k);
                    self.record(store, v, seed, name, &|d| oracle_fine_eval(&f, cache, d))?;
                }
                Variant::OracleHybrid(m) => {
                    let f = fine_model(Variant::OracleFine(m))?;
                    let cache = fine_of(b, m, k);
                    self.record(store, v, seed, name, &|d| {
                        oracle_hybrid_eval(&f, cache, &b.nokg, d, t)
                    })?;
                }
                Variant::SalkgFine(_) | Variant::RandomFine | Variant::HeuristicFine => {
                    let f = fine_model(v)?;
                    self.record(store, v, seed, name, &|d| eval_model(&f, d))?;
                }
                Variant::SalkgHybrid(_) | Variant::RandomHybrid | Variant::HeuristicHybrid => {
                    let f = fine_model(v.fine_part().unwrap())?;
                    let (g, _) = train_salkg_hybrid(
                        &f, &b.nokg, train, dev, t, cfg.lambda, s, &cfg.gate, &cfg.train,
                    )?;
                    self.record(store, v, seed, name, &|d| g.evaluate(d))?;
                }
                Variant::SalkgCoarse | Variant::RandomCoarse | Variant::HeuristicCoarse => {
                    let labels;
                    let cache = match v {
                        Variant::SalkgCoarse => coarse_of(b, t),
                        Variant::RandomCoarse => {
                            labels = make_random_labels(
                                &self.all,
                                Granularity::Coarse,
                                kind,
                                k,
                                mix_seed(s, LABEL_SALT),
                            );
                            &labels
                        }
                        _ => {
                            labels = make_heuristic_labels(
                                &self.all,
                                Granularity::Coarse,
                                kind,
                                mean_qa_nodes(train),
                            );
                            &labels
                        }
                    };
                    let (g, _) = train_salkg_coarse(
                        &b.kg, &b.nokg, cache, train, dev, cfg.lambda, s, &cfg.gate, &cfg.train,
                    )?;
                    self.record(store, v, seed, name, &|d| g.evaluate(d))?;
                }
                Variant::RandomPrune | Variant::HeuristicPrune => {
                    let labels = if v == Variant::RandomPrune {
                        random_fine()
                    } else {
                        heuristic_fine()
                    };
                    let mut m = Model::new(cfg.model.clone(), self.vocab.clone(), s)?;
                    let (tr, dv) = (hard_prune(train, &labels)?, hard_prune(dev, &labels)?);
                    let (tr, dv) = (m.encode_all(&tr), m.encode_all(&dv));
                    train_task_model(&mut m, &tr, &dv, &LossSpec::default(), &cfg.train)?;
                    self.record(store, v, seed, name, &|d| {
                        eval_model(&m, &hard_prune(d, &labels)?)
                    })?;
                }
                _ => unreachable!("{v} is a base-level variant"),
            }
        }
        Ok(())
    }
}

fn coarse_of(b: &Bases, t: f64) -> &ExplanationCache {
    &b.coarse
        .iter()
        .find(|(x, _)| *x == t)
        .expect("coarse cache built")
        .1
}

fn fine_of(b: &Bases, m: Method, k: f64) -> &ExplanationCache {
    &b.fine
        .iter()
        .find(|(x, _)| *x == (m, k))
        .expect("fine cache built")
        .1
}

fn eval_model(m: &Model, data: &[QaInstance]) -> Result<Evaluation> {
    Ok(Evaluation::from_values(probs_of(m, data, None)?, data))
}

fn probs_acc(m: &Model, data: &[QaInstance]) -> Result<f64> {
    Ok(eval_model(m, data)?.accuracy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SweepParam {
    T,
    K,
    Lambda,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t" => Ok(SweepParam::T),
            "k" => Ok(SweepParam::K),
            "lambda" | "λ" => Ok(SweepParam::Lambda),
            _ => Err(Error::Config(format!("cannot sweep {s:?}"))),
        }
    }
}

impl SweepParam {
    pub fn defaults(self) -> Vec<f64> {
        match self {
            SweepParam::T => super::T_SWEEP.to_vec(),
            SweepParam::K => super::K_SWEEP.to_vec(),
            SweepParam::Lambda => super::LAMBDA_SWEEP.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub param: SweepParam,
    pub variant: Variant,
    /// Ascending.
    pub values: Vec<f64>,
    pub dev_mean: Vec<f64>,
    pub test_mean: Vec<f64>,
    /// Highest mean dev accuracy; the smaller value wins a tie.
    pub best: f64,
}

/// One protocol run of `variant` per value of `param`.
pub fn sweep(
    p: &mut Pipeline,
    param: SweepParam,
    values: &[f64],
    variant: Variant,
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut values = values.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let saved = p.cfg.clone();
    let mut dev_mean = Vec::new();
    let mut test_mean = Vec::new();
    for &x in &values {
        match param {
            SweepParam::T => p.cfg.t = x,
            SweepParam::K => p.cfg.k = x,
            SweepParam::Lambda => p.cfg.lambda = x,
        }
        let outcome = p.cfg.validate().and_then(|_| p.run(&[variant]));
        let store = match outcome {
            Ok(s) => s,
            Err(e) => {
                p.cfg = saved;
                return Err(e);
            }
        };
        let recs = &store.records;
        dev_mean.push(mean_std(&recs.iter().map(|r| r.dev_accuracy).collect::<Vec<_>>()).0);
        test_mean.push(mean_std(&recs.iter().map(|r| r.test_accuracy).collect::<Vec<_>>()).0);
    }
    p.cfg = saved;
    let mut best = 0;
    for i in 1..values.len() {
        if dev_mean[i] > dev_mean[best] {
            best = i;
        }
    }
    Ok(SweepResult {
        param,
        variant,
        best: values[best],
        values,
        dev_mean,
        test_mean,
    })
}

/// The protocol on nested training subsamples, one table per fraction.
pub fn low_resource_study(
    cfg: &ExperimentConfig,
    data: &Dataset,
    variants: &[Variant],
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<(f64, usize, ResultTable)>> {
    let mut out = Vec::new();
    for &f in fractions {
        if !LOW_RESOURCE_FRACTIONS.contains(&f) {
            return Err(Error::Config(format!(
                "fraction {f} is not one of {LOW_RESOURCE_FRACTIONS:?}"
            )));
        }
        let sub = Dataset {
            train: subsample_train(&data.train, f, seed)?,
            ..data.clone()
        };
        let n = sub.train.len();
        let mut p = Pipeline::new(cfg.clone(), sub)?;
        let store = p.run(variants)?;
        out.push((f, n, ResultTable::from_store(&store)));
    }
    Ok(out)
}
