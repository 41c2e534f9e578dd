//! Command-line harness: reproducible experiment stages (`gen`, `train`,
//! `probe`, `steer`, `sample-eval`, `report`) and the single end-to-end
//! `repro` pipeline that regenerates every headline number and grades it.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use latentlm::analysis::{
    class_mean, eval_probe, fit_probe, oracle_accuracy, steer_and_sample, zero_steering,
    Aggregation, ClassSelector, ExperimentReport, FractionRow, ProbeFitConfig, ProbeReport,
    ProbeTarget,
};
use latentlm::corpus::{
    generate_bdi, generate_encyclopedia, load_corpus, save_corpus, Corpus, Desire, Scenario,
};
use latentlm::harness::{run_repro, ReproConfig};
use latentlm::train::{
    atomic_write, content_hash, load_checkpoint, train, CheckpointMeta, LmDims,
    TrainConfig,
};
use latentlm::world::{AgentType, BdiPrior, World, WorldSpec};
use latentlm::{Error, LmParams, Result};

#[derive(Parser)]
#[command(name = "latentlm", version, about = "Latent-author language model testbed")]
struct Cli {
    /// Worker cap for intra-stage parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Force ordered reductions (bitwise-reproducible runs).
    #[arg(long, global = true, default_value_t = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct WorldArgs {
    #[arg(long, default_value_t = 50)]
    atoms: u32,
    /// Fraction of atoms the archetypes disagree on. Defaults to 1.0 for
    /// the encyclopedia scenario and 0.5 for BDI.
    #[arg(long)]
    contested_fraction: Option<f64>,
    #[arg(long, default_value = "atomic")]
    tokenization: String,
    /// World config file (key=value); overrides the flags above.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl WorldArgs {
    fn build(&self, scenario: Scenario, seed: u64) -> Result<World> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            return World::build(WorldSpec::from_config(&text)?);
        }
        let f = self.contested_fraction.unwrap_or(match scenario {
            Scenario::Encyclopedia => 1.0,
            Scenario::Bdi => 0.5,
        });
        World::build(WorldSpec {
            atoms: self.atoms,
            contested_fraction: f,
            tokenization: self.tokenization.parse()?,
            seed,
        })
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a world manifest and a labeled corpus.
    Gen {
        #[arg(long, default_value = "encyclopedia")]
        scenario: String,
        #[arg(long, default_value_t = 10_000)]
        docs: u64,
        #[arg(long, default_value_t = 10)]
        len: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        world: WorldArgs,
        #[arg(long, default_value = "corpus.jsonl")]
        out: PathBuf,
        #[arg(long, default_value = "world.txt")]
        world_out: PathBuf,
    },
    /// Train the LSTM on a corpus (latent labels are never read).
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long, default_value = "checkpoint.bin")]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        embed: usize,
        #[arg(long, default_value_t = 512)]
        hidden: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Training config file (key=value); flag overrides still apply.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        log_out: Option<PathBuf>,
    },
    /// Fit a linear probe and evaluate on a fresh corpus.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 5)]
        position: usize,
        #[arg(long, default_value = "author-type")]
        target: String,
        #[arg(long, default_value_t = 1e-3)]
        l2: f64,
        #[arg(long, default_value_t = 2000)]
        eval_docs: u64,
        #[arg(long, default_value_t = 7777)]
        eval_seed: u64,
        #[arg(long, default_value = "probe_report.json")]
        out: PathBuf,
    },
    /// Steer generation with a centered class-mean offset and grade samples.
    Steer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Steering class: A | B | O | inform | deceive | grand-mean.
        #[arg(long)]
        class: String,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 4242)]
        seed: u64,
        #[arg(long, default_value = "all")]
        aggregation: String,
        #[arg(long, default_value = "steer_report.json")]
        out: PathBuf,
    },
    /// Unconditioned (zero initial state) sampling evaluation.
    SampleEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 4242)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        len: usize,
        #[arg(long, default_value = "sample_report.json")]
        out: PathBuf,
    },
    /// Merge stage reports into one bundle, refusing unbound inputs.
    Report {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Stage report JSON files to merge.
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Full pipeline: gen → train → sample-eval → probe → steer, graded.
    Repro {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "encyclopedia")]
        scenario: String,
        #[arg(long, default_value = "repro_out")]
        out: PathBuf,
        #[arg(long)]
        docs: Option<u64>,
        #[arg(long)]
        len: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        embed: Option<usize>,
        #[arg(long)]
        atoms: Option<u32>,
        #[arg(long)]
        contested_fraction: Option<f64>,
        #[arg(long)]
        n_samples: Option<usize>,
        #[arg(long)]
        eval_docs: Option<u64>,
        #[arg(long)]
        position: Option<usize>,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Binding(_) => 2,
        Error::Numerical(_) => 3,
        _ => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

fn load_bound_inputs(
    world_path: &PathBuf,
    checkpoint_path: &PathBuf,
    corpus_path: Option<&PathBuf>,
) -> Result<(World, LmParams, CheckpointMeta, Option<Corpus>)> {
    let world = World::from_manifest(&std::fs::read_to_string(world_path)?)?;
    let (params, meta) = load_checkpoint(checkpoint_path)?;
    if meta.world_hash != world.hash() {
        return Err(Error::Binding(format!(
            "checkpoint bound to world {} but given world {}",
            meta.world_hash,
            world.hash()
        )));
    }
    let corpus = match corpus_path {
        Some(p) => {
            let c = load_corpus(p)?;
            c.bind(&world)?;
            Some(c)
        }
        None => None,
    };
    Ok((world, params, meta, corpus))
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Gen {
            scenario,
            docs,
            len,
            seed,
            world,
            out,
            world_out,
        } => {
            let scenario: Scenario = scenario.parse()?;
            let w = world.build(scenario, seed)?;
            let corpus = match scenario {
                Scenario::Encyclopedia => generate_encyclopedia(&w, docs, len, seed)?,
                Scenario::Bdi => generate_bdi(&w, docs, len, seed, &BdiPrior::default())?,
            };
            atomic_write(&world_out, w.manifest().as_bytes())?;
            save_corpus(&corpus, &out)?;
            println!(
                "wrote {} documents to {} (world {})",
                corpus.documents.len(),
                out.display(),
                &w.hash()[..12]
            );
            Ok(0)
        }
        Cmd::Train {
            corpus,
            world,
            out,
            embed,
            hidden,
            epochs,
            learning_rate,
            batch_size,
            seed,
            config,
            log_out,
        } => {
            let w = World::from_manifest(&std::fs::read_to_string(&world)?)?;
            let c = load_corpus(&corpus)?;
            c.bind(&w)?;
            let mut cfg = match config {
                Some(path) => TrainConfig::from_config(&std::fs::read_to_string(path)?)?,
                None => TrainConfig::default(),
            };
            cfg.seed = seed;
            cfg.deterministic = cli.deterministic;
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(lr) = learning_rate {
                cfg.learning_rate = lr;
            }
            if let Some(b) = batch_size {
                cfg.batch_size = b;
            }
            let docs = c.token_sequences();
            let (params, log) = train::<f64>(
                &docs,
                LmDims {
                    vocab: w.vocab().size(),
                    embed,
                    hidden,
                },
                &cfg,
            )?;
            let meta = CheckpointMeta {
                world_hash: w.hash().to_string(),
                train_config: Some(cfg),
            };
            latentlm::train::save_checkpoint(&params, &meta, &out)?;
            print!("{}", log.to_table());
            if let Some(p) = log_out {
                atomic_write(&p, log.to_table().as_bytes())?;
            }
            println!("wrote checkpoint to {}", out.display());
            Ok(0)
        }
        Cmd::Probe {
            checkpoint,
            world,
            corpus,
            position,
            target,
            l2,
            eval_docs,
            eval_seed,
            out,
        } => {
            let target: ProbeTarget = target.parse()?;
            let (w, params, _, c) = load_bound_inputs(&world, &checkpoint, Some(&corpus))?;
            let c = c.unwrap();
            let fit_cfg = ProbeFitConfig {
                l2,
                ..ProbeFitConfig::default()
            };
            let probe = fit_probe(&params, &w, &c, position, target, &fit_cfg, None)?;
            let train_eval = eval_probe(&probe, &params, &w, &c)?;
            let eval_corpus = match c.config.scenario {
                Scenario::Encyclopedia => {
                    generate_encyclopedia(&w, eval_docs, c.config.len, eval_seed)?
                }
                Scenario::Bdi => {
                    generate_bdi(&w, eval_docs, c.config.len, eval_seed, &BdiPrior::default())?
                }
            };
            let heldout = eval_probe(&probe, &params, &w, &eval_corpus)?;
            let control = fit_probe(&params, &w, &c, position, target, &fit_cfg, Some(eval_seed ^ 0x5eed))?;
            let control_eval = eval_probe(&control, &params, &w, &eval_corpus)?;
            let ceiling = oracle_accuracy(&w, &eval_corpus, position, target)?;
            let ckpt_hash = content_hash(&std::fs::read(&checkpoint)?);
            let mut report =
                ExperimentReport::new(&c.config.scenario.to_string(), w.hash(), &ckpt_hash);
            report.seeds.insert("eval".into(), eval_seed);
            report.probes.push(ProbeReport {
                target,
                position,
                train_accuracy: train_eval.accuracy,
                heldout_accuracy: heldout.accuracy,
                shuffled_control_accuracy: control_eval.accuracy,
                oracle_ceiling: ceiling.accuracy,
                confusion: heldout.confusion,
            });
            atomic_write(&out, report.to_json()?.as_bytes())?;
            println!(
                "held-out accuracy {:.4} (control {:.4}, oracle ceiling {:.4})",
                heldout.accuracy, control_eval.accuracy, ceiling.accuracy
            );
            Ok(0)
        }
        Cmd::Steer {
            checkpoint,
            world,
            corpus,
            class,
            n,
            temperature,
            seed,
            aggregation,
            out,
        } => {
            let (w, params, _, c) = load_bound_inputs(&world, &checkpoint, Some(&corpus))?;
            let c = c.unwrap();
            let aggregation = match aggregation.as_str() {
                "all" => Aggregation::AllPositions,
                "final" => Aggregation::FinalPosition,
                other => {
                    return Err(Error::Config(format!(
                        "unknown aggregation {other:?} (expected all|final)"
                    )))
                }
            };
            let selector = match class.to_ascii_lowercase().as_str() {
                "a" => ClassSelector::Author(AgentType::A),
                "b" => ClassSelector::Author(AgentType::B),
                "o" => ClassSelector::Author(AgentType::O),
                "inform" => ClassSelector::Desire(Desire::Inform),
                "deceive" => ClassSelector::Desire(Desire::Deceive),
                "grand-mean" => ClassSelector::All,
                other => {
                    return Err(Error::Config(format!("unknown steering class {other:?}")))
                }
            };
            let sv = class_mean(&params, &c, selector, aggregation)?;
            let max_len = 4 * c.config.len + 4;
            let table = steer_and_sample(
                &params,
                &w,
                &sv,
                n,
                max_len,
                temperature,
                seed,
                Some(c.config.len),
            )?;
            let ckpt_hash = content_hash(&std::fs::read(&checkpoint)?);
            let mut report =
                ExperimentReport::new(&c.config.scenario.to_string(), w.hash(), &ckpt_hash);
            report.seeds.insert("steer".into(), seed);
            report
                .class_fractions
                .push(FractionRow::from_table(&format!("steer_{}", sv.label), &table));
            report.validate()?;
            atomic_write(&out, report.to_json()?.as_bytes())?;
            for (label, frac) in ["A_CONSISTENT", "B_CONSISTENT", "BOTH_AB", "O_ONLY", "ILL_FORMED"]
                .iter()
                .zip(table.fractions())
            {
                println!("{label}\t{frac:.4}");
            }
            Ok(0)
        }
        Cmd::SampleEval {
            checkpoint,
            world,
            n,
            temperature,
            seed,
            len,
            out,
        } => {
            let (w, params, _, _) = load_bound_inputs(&world, &checkpoint, None)?;
            let table = steer_and_sample(
                &params,
                &w,
                &zero_steering(params.hidden),
                n,
                4 * len + 4,
                temperature,
                seed,
                Some(len),
            )?;
            let ckpt_hash = content_hash(&std::fs::read(&checkpoint)?);
            let mut report = ExperimentReport::new("sample-eval", w.hash(), &ckpt_hash);
            report.seeds.insert("sample".into(), seed);
            report
                .class_fractions
                .push(FractionRow::from_table("unconditioned", &table));
            report.validate()?;
            atomic_write(&out, report.to_json()?.as_bytes())?;
            for (label, frac) in ["A_CONSISTENT", "B_CONSISTENT", "BOTH_AB", "O_ONLY", "ILL_FORMED"]
                .iter()
                .zip(table.fractions())
            {
                println!("{label}\t{frac:.4}");
            }
            Ok(0)
        }
        Cmd::Report {
            world,
            checkpoint,
            inputs,
            out,
        } => {
            let w = World::from_manifest(&std::fs::read_to_string(&world)?)?;
            let ckpt_hash = content_hash(&std::fs::read(&checkpoint)?);
            let mut merged: Option<ExperimentReport> = None;
            for path in &inputs {
                let part = ExperimentReport::from_json(&std::fs::read_to_string(path)?)?;
                if part.world_hash != w.hash() {
                    return Err(Error::Binding(format!(
                        "report {} bound to world {} but given world {}",
                        path.display(),
                        part.world_hash,
                        w.hash()
                    )));
                }
                if part.checkpoint_hash != ckpt_hash {
                    return Err(Error::Binding(format!(
                        "report {} bound to a different checkpoint",
                        path.display()
                    )));
                }
                match &mut merged {
                    None => merged = Some(part),
                    Some(m) => {
                        m.class_fractions.extend(part.class_fractions);
                        m.probes.extend(part.probes);
                        m.metrics.extend(part.metrics);
                        m.seeds.extend(part.seeds);
                    }
                }
            }
            let merged = merged.ok_or_else(|| Error::Config("no input reports".into()))?;
            merged.validate()?;
            atomic_write(&out, merged.to_json()?.as_bytes())?;
            let csv_path = out.with_extension("csv");
            atomic_write(&csv_path, merged.to_csv().as_bytes())?;
            println!("wrote merged report to {}", out.display());
            Ok(0)
        }
        Cmd::Repro {
            seed,
            scenario,
            out,
            docs,
            len,
            epochs,
            hidden,
            embed,
            atoms,
            contested_fraction,
            n_samples,
            eval_docs,
            position,
        } => {
            let scenario: Scenario = scenario.parse()?;
            let mut cfg = ReproConfig::defaults(scenario, seed, out);
            cfg.deterministic = cli.deterministic;
            if let Some(v) = docs {
                cfg.docs = v;
            }
            if let Some(v) = len {
                cfg.doc_len = v;
            }
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = hidden {
                cfg.hidden = v;
            }
            if let Some(v) = embed {
                cfg.embed = v;
            }
            if let Some(v) = atoms {
                cfg.atoms = v;
            }
            if let Some(v) = contested_fraction {
                cfg.contested_fraction = v;
            }
            if let Some(v) = n_samples {
                cfg.n_samples = v;
            }
            if let Some(v) = eval_docs {
                cfg.eval_docs = v;
            }
            if let Some(v) = position {
                cfg.probe_position = v;
            }
            let outcome = run_repro(&cfg)?;
            for v in &outcome.verdicts {
                println!("{}", v.line());
            }
            if outcome.all_pass() {
                println!("all checks passed");
                Ok(0)
            } else {
                println!("some checks failed");
                Ok(4)
            }
        }
    }
}
