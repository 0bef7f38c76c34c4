//! `kgsal`: generate data, train base models, explain them, train Oracle
//! and SalKG models, and run the seed protocol end to end.
//!
//! Every subcommand reads one JSON experiment config (`--config`, defaults
//! otherwise) and works inside its output directory, which
//! `KGSAL_OUT_DIR` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use kgsal::datamodel::{serialize_dataset, ExplanationCache, Granularity};
use kgsal::harness::{
    dump_case_studies, emit_report, expl_seed_value, low_resource_study, sweep, welch_ttest,
    Dataset, ExperimentConfig, Method, Pipeline, Protocol, ReportTable, ResultStore, ResultTable,
    SweepParam, Variant, KG_SALT, LABEL_SALT, LOW_RESOURCE_FRACTIONS, NOKG_SALT,
};
use kgsal::models::{argmax, Checkpoint, Model};
use kgsal::oracle::{probs_of, train_oracle_fine};
use kgsal::saliency::{build_coarse_cache, build_fine_cache};
use kgsal::salkg::{
    make_heuristic_labels, make_random_labels, mean_qa_nodes, train_salkg_coarse, train_salkg_fine,
    train_salkg_hybrid,
};
use kgsal::synthdata::{generate_dataset, mix_seed};

#[derive(Parser)]
#[command(
    name = "kgsal",
    version,
    about = "Saliency explanations for KG-augmented QA models"
)]
struct Cli {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Gran {
    Coarse,
    Fine,
}

#[derive(Clone, Copy, ValueEnum)]
enum Attr {
    Grad,
    Occl,
}

impl From<Attr> for Method {
    fn from(a: Attr) -> Self {
        match a {
            Attr::Grad => Method::Grad,
            Attr::Occl => Method::Occl,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelKind {
    Random,
    Heuristic,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic splits (or copy in a JSONL dataset).
    GenData,
    /// Train F_No-KG and F_KG.
    TrainBase {
        /// Base seeds; all configured seeds when omitted.
        #[arg(long)]
        seed: Vec<u64>,
    },
    /// Build a coarse or fine explanation cache from trained base models.
    Explain {
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum)]
        granularity: Gran,
        #[arg(long, value_enum, default_value = "grad")]
        method: Attr,
    },
    /// Build Random or Heuristic explanation labels.
    MakeLabels {
        #[arg(long, value_enum)]
        kind: LabelKind,
        #[arg(long, value_enum)]
        granularity: Gran,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train Oracle-Fine on a fine cache.
    TrainOracle {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "A")]
        expl: String,
        #[arg(long, value_enum, default_value = "grad")]
        method: Attr,
    },
    /// Train a SalKG, Random or Heuristic variant for one seed pair.
    TrainSalkg {
        /// e.g. SalKG-Coarse, SalKG-Fine-Grad, Random-Hybrid.
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "A")]
        expl: String,
    },
    /// Run the seed protocol for the configured variants.
    Evaluate {
        #[arg(long)]
        protocol: Option<Protocol>,
        /// Overrides the configured variant list.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
    },
    /// Sweep T, k or λ and report dev accuracy per value.
    Sweep {
        #[arg(long)]
        param: SweepParam,
        /// Defaults to the standard grid of the parameter.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Run the protocol on nested fractions of the training set.
    LowResource {
        #[arg(long, value_delimiter = ',')]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render results/runs.csv as report.csv and report.md.
    Report,
    /// Dump top and bottom units of sampled test instances.
    CaseStudy {
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value = "grad")]
        method: Attr,
        #[arg(short, long, default_value_t = 3)]
        n: usize,
    },
    /// Welch t-test between two variants of results/runs.csv.
    Ttest {
        #[arg(long)]
        a: Variant,
        #[arg(long)]
        b: Variant,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, parts: &[&str]) -> PathBuf {
        parts.iter().fold(self.out.clone(), |p, s| p.join(s))
    }

    /// Fails with the command that produces a missing artifact.
    fn need(&self, path: PathBuf, produced_by: &str, needed_by: &str) -> Result<PathBuf> {
        if !path.exists() {
            bail!(
                "missing artifact {} (needed by {needed_by}; produced by `kgsal {produced_by}`)",
                path.display()
            );
        }
        Ok(path)
    }

    fn dataset(&self, needed_by: &str) -> Result<Dataset> {
        let dir = self.path(&["data"]);
        self.need(dir.join("train.jsonl"), "gen-data", needed_by)?;
        Ok(Dataset::read(&dir)?)
    }

    fn base_dir(&self, seed: u64) -> PathBuf {
        self.path(&["base", &format!("seed{seed}")])
    }

    fn bases(&self, seed: u64, needed_by: &str) -> Result<(Model, Model)> {
        let produce = format!("train-base --seed {seed}");
        let dir = self.base_dir(seed);
        let nokg = Checkpoint::read(&self.need(dir.join("nokg.json"), &produce, needed_by)?)?;
        let kg = Checkpoint::read(&self.need(dir.join("kg.json"), &produce, needed_by)?)?;
        Ok((nokg, kg))
    }

    fn cache(
        &self,
        seed: u64,
        gran: Gran,
        method: Attr,
        needed_by: &str,
    ) -> Result<ExplanationCache> {
        let (name, flag) = match gran {
            Gran::Coarse => (
                format!("coarse_t{}.jsonl", self.cfg.t),
                "coarse".to_string(),
            ),
            Gran::Fine => {
                let m = Method::from(method);
                (
                    format!("fine_{}_k{}.jsonl", method_name(m), self.cfg.k),
                    format!("fine --method {}", method_name(m)),
                )
            }
        };
        let path = self.path(&["explain", &format!("seed{seed}"), &name]);
        let produce = format!("explain --seed {seed} --granularity {flag}");
        Ok(ExplanationCache::read(
            &self.need(path, &produce, needed_by)?,
        )?)
    }

    /// A pipeline that reuses checkpoints from `train-base` where present.
    fn pipeline(&self, data: Dataset) -> Result<Pipeline> {
        let mut p = Pipeline::new(self.cfg.clone(), data)?;
        p.log = |m| eprintln!("{m}");
        for &seed in &self.cfg.base_seeds {
            let dir = self.base_dir(seed);
            if dir.join("kg.json").exists() && dir.join("nokg.json").exists() {
                let (nokg, kg) = self.bases(seed, "evaluate")?;
                p.insert_bases(seed, nokg, kg)?;
            }
        }
        Ok(p)
    }
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Grad => "grad",
        Method::Occl => "occl",
    }
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn print_table(table: &ResultTable) {
    println!(
        "{:<20} {:>5} {:>18} {:>18} {:>10}",
        "variant", "runs", "dev", "test", "perturbed"
    );
    for r in &table.rows {
        let cell = |(m, s): (f64, f64)| format!("{:.2} (±{:.2})", 100.0 * m, 100.0 * s);
        println!(
            "{:<20} {:>5} {:>18} {:>18} {:>10}",
            r.variant.to_string(),
            r.runs,
            cell(r.dev),
            cell(r.test),
            r.perturbed
                .map_or("-".to_string(), |p| format!("{:.2}", 100.0 * p.0))
        );
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(p) => {
            ExperimentConfig::read(p).with_context(|| format!("reading config {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    let out = cfg.out_dir();
    let ctx = Ctx { cfg, out };
    mkdir(&ctx.out)?;

    match cli.cmd {
        Cmd::GenData => {
            let dir = ctx.path(&["data"]);
            mkdir(&dir)?;
            let data = match &ctx.cfg.dataset_dir {
                Some(src) => Dataset::read(src)?,
                None => {
                    let splits = generate_dataset(&ctx.cfg.data)?;
                    write_json(&dir.join("tags.json"), &splits.tags)?;
                    splits.into()
                }
            };
            for (name, split) in [
                ("train", &data.train),
                ("dev", &data.dev),
                ("test", &data.test),
            ] {
                serialize_dataset(split, &dir.join(format!("{name}.jsonl")))?;
            }
            println!(
                "wrote {} / {} / {} instances to {}",
                data.train.len(),
                data.dev.len(),
                data.test.len(),
                dir.display()
            );
        }

        Cmd::TrainBase { seed } => {
            let data = ctx.dataset("train-base")?;
            let seeds = if seed.is_empty() {
                ctx.cfg.base_seeds.clone()
            } else {
                seed
            };
            let p = Pipeline::new(ctx.cfg.clone(), data)?;
            for s in seeds {
                let dir = ctx.base_dir(s);
                mkdir(&dir)?;
                for (name, config, salt) in [
                    ("nokg", ctx.cfg.nokg_config(), NOKG_SALT),
                    ("kg", ctx.cfg.model.clone(), KG_SALT),
                ] {
                    let (m, outcome) = p.train_base(config, mix_seed(s, salt))?;
                    let hash = Checkpoint::write(&m, &dir.join(format!("{name}.json")))?;
                    outcome.write_log(&dir.join(format!("{name}_log.csv")))?;
                    println!(
                        "seed {s} {name}: best epoch {}, dev {:.4}, params {}",
                        outcome.best_epoch,
                        outcome.best_dev_acc,
                        &hash[..12]
                    );
                }
            }
        }

        Cmd::Explain {
            seed,
            granularity,
            method,
        } => {
            let data = ctx.dataset("explain")?;
            let (nokg, kg) = ctx.bases(seed, "explain")?;
            let dir = ctx.path(&["explain", &format!("seed{seed}")]);
            mkdir(&dir)?;
            let all = data.all();
            let (cache, name) = match granularity {
                Gran::Coarse => (
                    build_coarse_cache(&kg, &nokg, &all, ctx.cfg.t)?,
                    format!("coarse_t{}.jsonl", ctx.cfg.t),
                ),
                Gran::Fine => {
                    let m = Method::from(method);
                    (
                        build_fine_cache(&kg, &all, m.into(), ctx.cfg.k)?,
                        format!("fine_{}_k{}.jsonl", method_name(m), ctx.cfg.k),
                    )
                }
            };
            let positives = cache
                .records
                .values()
                .flatten()
                .filter(|r| r.positive())
                .count();
            let units: usize = cache.records.values().map(Vec::len).sum();
            cache.write(&dir.join(&name))?;
            println!("{name}: {positives} of {units} units positive");
        }

        Cmd::MakeLabels {
            kind,
            granularity,
            seed,
        } => {
            let data = ctx.dataset("make-labels")?;
            let unit_kind = ctx
                .cfg
                .model
                .unit_kind()
                .context("config model has no KG encoder")?;
            let g = match granularity {
                Gran::Coarse => Granularity::Coarse,
                Gran::Fine => Granularity::Fine,
            };
            let all = data.all();
            let (cache, name) = match kind {
                LabelKind::Random => (
                    make_random_labels(&all, g, unit_kind, ctx.cfg.k, seed),
                    format!("random_{seed}"),
                ),
                LabelKind::Heuristic => (
                    make_heuristic_labels(&all, g, unit_kind, mean_qa_nodes(&data.train)),
                    "heuristic".to_string(),
                ),
            };
            let dir = ctx.path(&["labels"]);
            mkdir(&dir)?;
            let gname = if g == Granularity::Coarse {
                "coarse"
            } else {
                "fine"
            };
            let path = dir.join(format!("{name}_{gname}.jsonl"));
            cache.write(&path)?;
            println!("wrote {}", path.display());
        }

        Cmd::TrainOracle { seed, expl, method } => {
            let data = ctx.dataset("train-oracle")?;
            let cache = ctx.cache(seed, Gran::Fine, method, "train-oracle")?;
            let vocab = kgsal::models::Vocab::build(&data.train);
            let s = mix_seed(seed, expl_seed_value(&expl));
            let (m, outcome) = train_oracle_fine(
                &ctx.cfg.model,
                &vocab,
                &cache,
                &data.train,
                &data.dev,
                s,
                &ctx.cfg.train,
            )?;
            let dir = ctx.path(&["models", &format!("seed{seed}{expl}")]);
            mkdir(&dir)?;
            let name = format!("Oracle-Fine-{}", method_name(method.into()));
            Checkpoint::write(&m, &dir.join(format!("{name}.json")))?;
            outcome.write_log(&dir.join(format!("{name}_log.csv")))?;
            println!("{name} seed {seed}{expl}: dev {:.4}", outcome.best_dev_acc);
        }

        Cmd::TrainSalkg {
            variant,
            seed,
            expl,
        } => train_salkg_cmd(&ctx, variant, seed, &expl)?,

        Cmd::Evaluate { protocol, variants } => {
            let data = ctx.dataset("evaluate")?;
            let mut p = ctx.pipeline(data)?;
            if let Some(pr) = protocol {
                p.cfg.protocol = pr;
            }
            let variants = if variants.is_empty() {
                ctx.cfg.variants.clone()
            } else {
                variants
            };
            let store = p.run(&variants)?;
            let dir = ctx.path(&["results"]);
            mkdir(&dir)?;
            store.write_csv(&dir.join("runs.csv"))?;
            print_table(&ResultTable::from_store(&store));
        }

        Cmd::Sweep {
            param,
            values,
            variant,
        } => {
            let data = ctx.dataset("sweep")?;
            let mut p = ctx.pipeline(data)?;
            let values = if values.is_empty() {
                param.defaults()
            } else {
                values
            };
            let variant = variant.unwrap_or(match param {
                SweepParam::K => Variant::SalkgFine(Method::Grad),
                _ => Variant::SalkgCoarse,
            });
            let r = sweep(&mut p, param, &values, variant)?;
            for i in 0..r.values.len() {
                println!(
                    "{:?} = {:<6} dev {:.4}  test {:.4}",
                    param, r.values[i], r.dev_mean[i], r.test_mean[i]
                );
            }
            println!("best {:?} = {}", param, r.best);
            let dir = ctx.path(&["results"]);
            mkdir(&dir)?;
            write_json(
                &dir.join(format!("sweep_{param:?}.json").to_lowercase()),
                &r,
            )?;
        }

        Cmd::LowResource {
            fractions,
            variants,
            seed,
        } => {
            let data = ctx.dataset("low-resource")?;
            let fractions = if fractions.is_empty() {
                LOW_RESOURCE_FRACTIONS.to_vec()
            } else {
                fractions
            };
            let variants = if variants.is_empty() {
                ctx.cfg.variants.clone()
            } else {
                variants
            };
            let rows = low_resource_study(&ctx.cfg, &data, &variants, &fractions, seed)?;
            let mut tables = Vec::new();
            for (f, n, table) in &rows {
                println!("== {:.0}% of train ({n} instances)", 100.0 * f);
                print_table(table);
                tables.push(ReportTable::from_results(
                    &format!("{:.0}% training data", 100.0 * f),
                    table,
                ));
            }
            emit_report(&tables, &ctx.path(&["report", "low_resource"]))?;
        }

        Cmd::Report => {
            let src = ctx.need(ctx.path(&["results", "runs.csv"]), "evaluate", "report")?;
            let store = ResultStore::read_csv(&src)?;
            let table = ReportTable::from_results(&ctx.cfg.name, &ResultTable::from_store(&store));
            let dest = ctx.path(&["report"]);
            emit_report(std::slice::from_ref(&table), &dest)?;
            print!("{}", table.render());
        }

        Cmd::CaseStudy { seed, method, n } => {
            let data = ctx.dataset("case-study")?;
            let (_, kg) = ctx.bases(seed, "case-study")?;
            let cache = ctx.cache(seed, Gran::Fine, method, "case-study")?;
            let preds: Vec<usize> = probs_of(&kg, &data.test, None)?
                .iter()
                .map(|p| argmax(p))
                .collect();
            let text = dump_case_studies(&cache, &data.test, &preds, n, seed)?;
            let path = ctx.path(&["report", &format!("case_studies_seed{seed}.txt")]);
            mkdir(path.parent().unwrap())?;
            std::fs::write(&path, &text)?;
            print!("{text}");
        }

        Cmd::Ttest { a, b } => {
            let src = ctx.need(ctx.path(&["results", "runs.csv"]), "evaluate", "ttest")?;
            let store = ResultStore::read_csv(&src)?;
            let (xa, xb) = (store.accuracies(a), store.accuracies(b));
            let r = welch_ttest(&xa, &xb)
                .with_context(|| format!("{a}: {} runs, {b}: {} runs", xa.len(), xb.len()))?;
            println!(
                "{a} vs {b}: t = {:.4}, dof = {:.2}, p = {:.4}",
                r.t, r.dof, r.p
            );
        }
    }
    Ok(())
}

fn train_salkg_cmd(ctx: &Ctx, variant: Variant, seed: u64, expl: &str) -> Result<()> {
    let needed_by = "train-salkg";
    let data = ctx.dataset(needed_by)?;
    let (nokg, kg) = ctx.bases(seed, needed_by)?;
    let cfg = &ctx.cfg;
    let s = mix_seed(seed, expl_seed_value(expl));
    let unit_kind = kg.unit_kind().context("F_KG has no graph encoder")?;
    let all = data.all();
    let dir = ctx.path(&["models", &format!("seed{seed}{expl}")]);
    mkdir(&dir)?;
    let (train, dev) = (&data.train, &data.dev);
    let random = |g| make_random_labels(&all, g, unit_kind, cfg.k, mix_seed(s, LABEL_SALT));
    let heuristic = |g| make_heuristic_labels(&all, g, unit_kind, mean_qa_nodes(train));

    let fine_labels = |v: Variant| -> Result<ExplanationCache> {
        Ok(match v {
            Variant::SalkgFine(m) | Variant::SalkgHybrid(m) => {
                ctx.cache(seed, Gran::Fine, attr(m), needed_by)?
            }
            Variant::RandomFine | Variant::RandomHybrid => random(Granularity::Fine),
            Variant::HeuristicFine | Variant::HeuristicHybrid => heuristic(Granularity::Fine),
            _ => unreachable!(),
        })
    };
    let (checkpoint, outcome) = match variant {
        Variant::SalkgCoarse | Variant::RandomCoarse | Variant::HeuristicCoarse => {
            let cache = match variant {
                Variant::SalkgCoarse => ctx.cache(seed, Gran::Coarse, Attr::Grad, needed_by)?,
                Variant::RandomCoarse => random(Granularity::Coarse),
                _ => heuristic(Granularity::Coarse),
            };
            let (g, out) = train_salkg_coarse(
                &kg, &nokg, &cache, train, dev, cfg.lambda, s, &cfg.gate, &cfg.train,
            )?;
            (g.gate, out)
        }
        Variant::SalkgFine(_) | Variant::RandomFine | Variant::HeuristicFine => {
            let cache = fine_labels(variant)?;
            train_salkg_fine(
                &cfg.model,
                &kg.vocab,
                Some(&cache),
                train,
                dev,
                cfg.lambda,
                cfg.sal_loss,
                s,
                &cfg.train,
            )?
        }
        Variant::SalkgHybrid(_) | Variant::RandomHybrid | Variant::HeuristicHybrid => {
            let fine_variant = variant.fine_part().unwrap();
            let fine_path = ctx.need(
                dir.join(format!("{fine_variant}.json")),
                &format!("train-salkg --variant {fine_variant} --seed {seed} --expl {expl}"),
                needed_by,
            )?;
            let fine = Checkpoint::read(&fine_path)?;
            let (g, out) = train_salkg_hybrid(
                &fine, &nokg, train, dev, cfg.t, cfg.lambda, s, &cfg.gate, &cfg.train,
            )?;
            (g.gate, out)
        }
        other => bail!("{other} is not trained by train-salkg"),
    };
    Checkpoint::write(&checkpoint, &dir.join(format!("{variant}.json")))?;
    outcome.write_log(&dir.join(format!("{variant}_log.csv")))?;
    println!(
        "{variant} seed {seed}{expl}: dev {:.4} (epoch {})",
        outcome.best_dev_acc, outcome.best_epoch
    );
    Ok(())
}

fn attr(m: Method) -> Attr {
    match m {
        Method::Grad => Attr::Grad,
        Method::Occl => Attr::Occl,
    }
}
