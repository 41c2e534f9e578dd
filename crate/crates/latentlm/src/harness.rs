//! End-to-end experiment pipeline: generate → train → sample-eval →
//! probe (+ shuffled control) → steer, with every stage seeded from one
//! master seed and every artifact written atomically and hash-bound to
//! its inputs. `run_repro` also grades the run against the built-in
//! acceptance checks and emits one PASS/FAIL verdict per check.

use std::path::{Path, PathBuf};

use crate::analysis::{
    class_mean, eval_probe, fit_probe, generated_flip_rate, oracle_accuracy, steer_and_sample,
    steered_samples, zero_steering, Aggregation, ClassSelector, ExperimentReport, FractionRow,
    ProbeFitConfig, ProbeReport, ProbeTarget,
};
use crate::corpus::{
    generate_bdi, generate_encyclopedia, save_corpus, Corpus, Desire, Scenario,
};
use crate::train::{
    atomic_write, checkpoint_bytes, content_hash, train, unigram_entropy, CheckpointMeta, LmDims,
    TrainConfig, TrainLog,
};
use crate::world::{AgentType, BdiPrior, DocLabel, Tokenization, World, WorldSpec};
use crate::{Error, LmParams, Result};

#[derive(Debug, Clone)]
pub struct ReproConfig {
    pub scenario: Scenario,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub atoms: u32,
    pub contested_fraction: f64,
    pub tokenization: Tokenization,
    pub docs: u64,
    pub doc_len: usize,
    pub embed: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub n_samples: usize,
    pub eval_docs: u64,
    pub probe_position: usize,
    pub temperature: f64,
    pub deterministic: bool,
}

impl ReproConfig {
    pub fn defaults(scenario: Scenario, seed: u64, out_dir: PathBuf) -> Self {
        let train = TrainConfig::default();
        ReproConfig {
            scenario,
            seed,
            out_dir,
            atoms: 50,
            contested_fraction: match scenario {
                Scenario::Encyclopedia => 1.0,
                Scenario::Bdi => 0.5,
            },
            tokenization: Tokenization::Atomic,
            docs: 10_000,
            doc_len: 10,
            embed: 64,
            hidden: 512,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            n_samples: 1000,
            eval_docs: 2000,
            probe_position: 5,
            temperature: 1.0,
            deterministic: true,
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed.wrapping_add(2),
            deterministic: self.deterministic,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    fn new(name: &str, pass: bool, detail: String) -> Self {
        Verdict {
            name: name.to_string(),
            pass,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {} — {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

pub struct ReproOutcome {
    pub report: ExperimentReport,
    pub train_log: TrainLog,
    pub verdicts: Vec<Verdict>,
}

impl ReproOutcome {
    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }
}

/// Everything produced while the pipeline stages run, before grading.
pub struct PipelineArtifacts {
    pub world: World,
    pub corpus: Corpus,
    pub params: LmParams,
    pub train_log: TrainLog,
    pub eval_corpus: Corpus,
    pub checkpoint_hash: String,
}

/// Run gen → train and the shared artifact writes; scenario-specific
/// evaluation continues in `run_repro`.
pub fn run_pipeline(cfg: &ReproConfig) -> Result<PipelineArtifacts> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let world = World::build(WorldSpec {
        atoms: cfg.atoms,
        contested_fraction: cfg.contested_fraction,
        tokenization: cfg.tokenization,
        seed: cfg.seed,
    })?;
    atomic_write(&cfg.out_dir.join("world.txt"), world.manifest().as_bytes())?;

    let corpus = match cfg.scenario {
        Scenario::Encyclopedia => {
            generate_encyclopedia(&world, cfg.docs, cfg.doc_len, cfg.seed.wrapping_add(1))?
        }
        Scenario::Bdi => generate_bdi(
            &world,
            cfg.docs,
            cfg.doc_len,
            cfg.seed.wrapping_add(1),
            &BdiPrior::default(),
        )?,
    };
    save_corpus(&corpus, &cfg.out_dir.join("corpus.jsonl"))?;

    let train_cfg = cfg.train_config();
    let docs = corpus.token_sequences();
    let (params, train_log) = train::<f64>(
        &docs,
        LmDims {
            vocab: world.vocab().size(),
            embed: cfg.embed,
            hidden: cfg.hidden,
        },
        &train_cfg,
    )?;
    let meta = CheckpointMeta {
        world_hash: world.hash().to_string(),
        train_config: Some(train_cfg),
    };
    let ckpt_bytes = checkpoint_bytes(&params, &meta)?;
    atomic_write(&cfg.out_dir.join("checkpoint.bin"), &ckpt_bytes)?;
    atomic_write(
        &cfg.out_dir.join("train_log.tsv"),
        train_log.to_table().as_bytes(),
    )?;
    let checkpoint_hash = content_hash(&ckpt_bytes);

    let eval_corpus = match cfg.scenario {
        Scenario::Encyclopedia => {
            generate_encyclopedia(&world, cfg.eval_docs, cfg.doc_len, cfg.seed.wrapping_add(3))?
        }
        Scenario::Bdi => generate_bdi(
            &world,
            cfg.eval_docs,
            cfg.doc_len,
            cfg.seed.wrapping_add(3),
            &BdiPrior::default(),
        )?,
    };

    Ok(PipelineArtifacts {
        world,
        corpus,
        params,
        train_log,
        eval_corpus,
        checkpoint_hash,
    })
}

fn probe_report(
    art: &PipelineArtifacts,
    cfg: &ReproConfig,
    target: ProbeTarget,
) -> Result<ProbeReport> {
    let fit_cfg = ProbeFitConfig::default();
    let probe = fit_probe(
        &art.params,
        &art.world,
        &art.corpus,
        cfg.probe_position,
        target,
        &fit_cfg,
        None,
    )?;
    let train_eval = eval_probe(&probe, &art.params, &art.world, &art.corpus)?;
    let heldout = eval_probe(&probe, &art.params, &art.world, &art.eval_corpus)?;
    let control = fit_probe(
        &art.params,
        &art.world,
        &art.corpus,
        cfg.probe_position,
        target,
        &fit_cfg,
        Some(cfg.seed.wrapping_add(4)),
    )?;
    let control_eval = eval_probe(&control, &art.params, &art.world, &art.eval_corpus)?;
    let ceiling = oracle_accuracy(&art.world, &art.eval_corpus, cfg.probe_position, target)?;
    Ok(ProbeReport {
        target,
        position: cfg.probe_position,
        train_accuracy: train_eval.accuracy,
        heldout_accuracy: heldout.accuracy,
        shuffled_control_accuracy: control_eval.accuracy,
        oracle_ceiling: ceiling.accuracy,
        confusion: heldout.confusion,
    })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn max_len_for(cfg: &ReproConfig) -> usize {
    match cfg.tokenization {
        Tokenization::Atomic => 2 * cfg.doc_len + 4,
        Tokenization::Surface => 4 * cfg.doc_len + 4,
    }
}

fn run_encyclopedia(cfg: &ReproConfig, art: &PipelineArtifacts) -> Result<ReproOutcome> {
    let mut report = ExperimentReport::new("encyclopedia", art.world.hash(), &art.checkpoint_hash);
    report.seeds.insert("master".into(), cfg.seed);
    let max_len = max_len_for(cfg);
    let expected = Some(cfg.doc_len);
    let mut verdicts = Vec::new();

    // Unconditioned sampling split.
    let uncond = steer_and_sample(
        &art.params,
        &art.world,
        &zero_steering(cfg.hidden),
        cfg.n_samples,
        max_len,
        cfg.temperature,
        cfg.seed.wrapping_add(5),
        expected,
    )?;
    report
        .class_fractions
        .push(FractionRow::from_table("unconditioned", &uncond));
    let fa = uncond.fraction(DocLabel::AConsistent);
    let fb = uncond.fraction(DocLabel::BConsistent);
    let fo = uncond.fraction(DocLabel::OOnly);
    let fi = uncond.fraction(DocLabel::IllFormed);
    verdicts.push(Verdict::new(
        "sampling-split",
        fi <= 0.01 && (0.26..=0.40).contains(&fa) && (0.26..=0.40).contains(&fb) && (0.28..=0.44).contains(&fo),
        format!("A={fa:.3} B={fb:.3} O={fo:.3} ill={fi:.3} (need A,B in [0.26,0.40], O in [0.28,0.44], ill <= 0.01)"),
    ));

    // Probe + shuffled control + oracle ceiling.
    let probe = probe_report(art, cfg, ProbeTarget::AuthorType)?;
    verdicts.push(Verdict::new(
        "probe-accuracy",
        probe.heldout_accuracy >= 0.95,
        format!(
            "held-out accuracy {:.4} (need >= 0.95), train {:.4}",
            probe.heldout_accuracy, probe.train_accuracy
        ),
    ));
    verdicts.push(Verdict::new(
        "probe-control",
        (0.25..=0.42).contains(&probe.shuffled_control_accuracy),
        format!(
            "shuffled-label control {:.4} (need in [0.25,0.42])",
            probe.shuffled_control_accuracy
        ),
    ));
    verdicts.push(Verdict::new(
        "probe-ceiling",
        probe.heldout_accuracy <= probe.oracle_ceiling + 0.02,
        format!(
            "probe {:.4} vs oracle ceiling {:.4} (probe must not exceed ceiling + 0.02)",
            probe.heldout_accuracy, probe.oracle_ceiling
        ),
    ));
    report.probes.push(probe);

    // Class-mean steering, both directions, plus the grand-mean control.
    let mean_a = class_mean(
        &art.params,
        &art.corpus,
        ClassSelector::Author(AgentType::A),
        Aggregation::AllPositions,
    )?;
    let mean_b = class_mean(
        &art.params,
        &art.corpus,
        ClassSelector::Author(AgentType::B),
        Aggregation::AllPositions,
    )?;
    let sep = cosine(&mean_a.h, &mean_b.h);
    report.metrics.insert("steering_mean_cosine".into(), sep);

    let steer_a = steer_and_sample(
        &art.params,
        &art.world,
        &mean_a,
        cfg.n_samples,
        max_len,
        cfg.temperature,
        cfg.seed.wrapping_add(6),
        expected,
    )?;
    let steer_b = steer_and_sample(
        &art.params,
        &art.world,
        &mean_b,
        cfg.n_samples,
        max_len,
        cfg.temperature,
        cfg.seed.wrapping_add(7),
        expected,
    )?;
    report
        .class_fractions
        .push(FractionRow::from_table("steer_A", &steer_a));
    report
        .class_fractions
        .push(FractionRow::from_table("steer_B", &steer_b));

    let grand = class_mean(
        &art.params,
        &art.corpus,
        ClassSelector::All,
        Aggregation::AllPositions,
    )?;
    let grand_table = steer_and_sample(
        &art.params,
        &art.world,
        &grand,
        cfg.n_samples,
        max_len,
        cfg.temperature,
        cfg.seed.wrapping_add(8),
        expected,
    )?;
    report
        .class_fractions
        .push(FractionRow::from_table("steer_grand_mean", &grand_table));

    let sa = steer_a.fraction(DocLabel::AConsistent);
    let sab = steer_a.fraction(DocLabel::BConsistent);
    let sb = steer_b.fraction(DocLabel::BConsistent);
    let sba = steer_b.fraction(DocLabel::AConsistent);
    verdicts.push(Verdict::new(
        "steering-a",
        sa >= 0.80 && sab <= 0.05,
        format!("A-mean steering: A={sa:.3} B={sab:.3} (need A >= 0.80, B <= 0.05)"),
    ));
    verdicts.push(Verdict::new(
        "steering-b",
        sb >= 0.80 && sba <= 0.05,
        format!("B-mean steering: B={sb:.3} A={sba:.3} (need B >= 0.80, A <= 0.05)"),
    ));

    // Training sanity: beat the unigram baseline.
    let baseline = unigram_entropy(&art.corpus);
    let final_val = art
        .train_log
        .epochs
        .last()
        .map(|e| e.val_loss)
        .unwrap_or(f64::INFINITY);
    report.metrics.insert("unigram_entropy".into(), baseline);
    report.metrics.insert("final_val_loss".into(), final_val);
    verdicts.push(Verdict::new(
        "training-sanity",
        final_val < baseline,
        format!("final validation loss {final_val:.4} vs unigram entropy {baseline:.4}"),
    ));

    report.validate()?;
    Ok(ReproOutcome {
        report,
        train_log: art.train_log.clone(),
        verdicts,
    })
}

fn run_bdi(cfg: &ReproConfig, art: &PipelineArtifacts) -> Result<ReproOutcome> {
    let mut report = ExperimentReport::new("bdi", art.world.hash(), &art.checkpoint_hash);
    report.seeds.insert("master".into(), cfg.seed);
    let max_len = max_len_for(cfg);
    let mut verdicts = Vec::new();

    let desire = probe_report(art, cfg, ProbeTarget::BdiDesire)?;
    let belief = probe_report(art, cfg, ProbeTarget::BdiBelief)?;
    verdicts.push(Verdict::new(
        "bdi-desire-probe",
        desire.oracle_ceiling < 0.90 || desire.heldout_accuracy >= 0.75,
        format!(
            "desire probe held-out {:.4}, oracle ceiling {:.4} (need >= 0.75 when ceiling >= 0.90)",
            desire.heldout_accuracy, desire.oracle_ceiling
        ),
    ));
    verdicts.push(Verdict::new(
        "bdi-belief-probe",
        belief.heldout_accuracy >= 0.75,
        format!(
            "belief probe held-out {:.4} (need >= 0.75)",
            belief.heldout_accuracy
        ),
    ));
    report.probes.push(desire);
    report.probes.push(belief);

    let mean_inform = class_mean(
        &art.params,
        &art.corpus,
        ClassSelector::Desire(Desire::Inform),
        Aggregation::AllPositions,
    )?;
    let mean_deceive = class_mean(
        &art.params,
        &art.corpus,
        ClassSelector::Desire(Desire::Deceive),
        Aggregation::AllPositions,
    )?;
    let inform_samples = steered_samples(
        &art.params,
        &mean_inform,
        cfg.n_samples,
        max_len,
        cfg.temperature,
        cfg.seed.wrapping_add(6),
    )?;
    let deceive_samples = steered_samples(
        &art.params,
        &mean_deceive,
        cfg.n_samples,
        max_len,
        cfg.temperature,
        cfg.seed.wrapping_add(7),
    )?;
    let (inform_rate, inform_n) = generated_flip_rate(&art.world, &inform_samples);
    let (deceive_rate, deceive_n) = generated_flip_rate(&art.world, &deceive_samples);
    report.metrics.insert("inform_flip_rate".into(), inform_rate);
    report.metrics.insert("deceive_flip_rate".into(), deceive_rate);
    verdicts.push(Verdict::new(
        "bdi-steering-gap",
        deceive_rate - inform_rate >= 0.30,
        format!(
            "flip rate DECEIVE {deceive_rate:.3} ({deceive_n} assertions) vs INFORM {inform_rate:.3} ({inform_n}); need a gap >= 0.30"
        ),
    ));

    // Outcome tables for the steered runs, graded by the consistency
    // oracle (diagnostic rows; the archetype labels are not the BDI
    // latent but show what the steering does to surface consistency).
    let classify_batch = |samples: &[Vec<u32>], name: &str, report: &mut ExperimentReport| {
        let mut counts = [0usize; 5];
        let mut oow = 0usize;
        for s in samples {
            let c = art.world.classify(s, Some(cfg.doc_len));
            counts[c.label.index()] += 1;
            if c.out_of_world {
                oow += 1;
            }
        }
        report.class_fractions.push(FractionRow {
            name: name.to_string(),
            fractions: counts.map(|c| c as f64 / samples.len() as f64),
            out_of_world: oow as f64 / samples.len() as f64,
            n: samples.len(),
        });
    };
    classify_batch(&inform_samples, "steer_INFORM", &mut report);
    classify_batch(&deceive_samples, "steer_DECEIVE", &mut report);

    // Baseline sanity also holds for the BDI run.
    let baseline = unigram_entropy(&art.corpus);
    let final_val = art
        .train_log
        .epochs
        .last()
        .map(|e| e.val_loss)
        .unwrap_or(f64::INFINITY);
    report.metrics.insert("unigram_entropy".into(), baseline);
    report.metrics.insert("final_val_loss".into(), final_val);
    verdicts.push(Verdict::new(
        "training-sanity",
        final_val < baseline,
        format!("final validation loss {final_val:.4} vs unigram entropy {baseline:.4}"),
    ));

    report.validate()?;
    Ok(ReproOutcome {
        report,
        train_log: art.train_log.clone(),
        verdicts,
    })
}

/// Full pipeline plus acceptance grading. Writes world manifest, corpus,
/// checkpoint, train log, report (JSON and CSV), and the verdict list into
/// `out_dir`.
pub fn run_repro(cfg: &ReproConfig) -> Result<ReproOutcome> {
    if cfg.epochs == 0 && cfg.docs == 0 {
        return Err(Error::Config("repro needs documents and epochs".into()));
    }
    let art = run_pipeline(cfg)?;
    let outcome = match cfg.scenario {
        Scenario::Encyclopedia => run_encyclopedia(cfg, &art)?,
        Scenario::Bdi => run_bdi(cfg, &art)?,
    };
    write_outcome(&cfg.out_dir, &outcome)?;
    Ok(outcome)
}

pub fn write_outcome(out_dir: &Path, outcome: &ReproOutcome) -> Result<()> {
    atomic_write(
        &out_dir.join("report.json"),
        outcome.report.to_json()?.as_bytes(),
    )?;
    atomic_write(
        &out_dir.join("report.csv"),
        outcome.report.to_csv().as_bytes(),
    )?;
    let verdict_text: String = outcome
        .verdicts
        .iter()
        .map(|v| format!("{}\n", v.line()))
        .collect();
    atomic_write(&out_dir.join("verdicts.txt"), verdict_text.as_bytes())?;
    Ok(())
}
