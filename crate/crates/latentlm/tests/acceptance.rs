//! Acceptance suite: one PASS/FAIL line per criterion, asserted together at
//! the end so a failing run still reports every criterion's status.
//!
//! Criteria 1–3 and 7 share one full-size encyclopedia pipeline; criterion 8
//! runs the full-size BDI pipeline; criteria 4 and 5 are fast exact-oracle
//! checks (brute-force enumeration and finite differences, re-derived here
//! independently of the library's closed forms); criterion 6 runs the CLI
//! twice at a reduced scale and compares artifact bytes.

use std::collections::HashMap;
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use latentlm::corpus::Scenario;
use latentlm::harness::{run_repro, ReproConfig, Verdict};
use latentlm::lm::{backward, loss, LmParamsOf};
use latentlm::world::{
    AgentType, Atom, BdiPrior, Proposition, Tokenization, World, WorldSpec,
};

struct Tally {
    lines: Vec<String>,
    failures: Vec<String>,
}

impl Tally {
    fn new() -> Self {
        Tally {
            lines: Vec::new(),
            failures: Vec::new(),
        }
    }

    fn record(&mut self, criterion: &str, pass: bool, detail: &str) {
        let line = format!(
            "{} {} — {}",
            if pass { "PASS" } else { "FAIL" },
            criterion,
            detail
        );
        println!("{line}");
        if !pass {
            self.failures.push(criterion.to_string());
        }
        self.lines.push(line);
    }

    fn record_verdict(&mut self, criterion: &str, v: &Verdict) {
        self.record(criterion, v.pass, &v.detail);
    }
}

fn verdict<'a>(vs: &'a [Verdict], name: &str) -> &'a Verdict {
    vs.iter()
        .find(|v| v.name == name)
        .unwrap_or_else(|| panic!("pipeline produced no verdict named {name:?}"))
}

fn cap_workers() {
    // The runtime contract assumes a desktop-class core budget.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(8).build_global();
}

// ---------------------------------------------------------------------------
// Criterion 4 oracle: posterior by brute-force enumeration of complete
// documents, summing joint probabilities over every document extending the
// queried prefix. Shares no code with World::posterior / bdi_posterior.

fn ordered_subsets<T: Copy>(items: &[T], len: usize) -> Vec<Vec<T>> {
    if len == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for (i, &x) in items.iter().enumerate() {
        let mut rest = items.to_vec();
        rest.remove(i);
        for mut tail in ordered_subsets(&rest, len - 1) {
            tail.insert(0, x);
            out.push(tail);
        }
    }
    out
}

fn check_encyclopedia_posteriors(world: &World, doc_len: usize, tally_err: &mut f64) -> usize {
    // All (latent, complete document) pairs with their joint probabilities.
    let mut docs_by_latent: Vec<(AgentType, Vec<(Vec<Proposition>, f64)>)> = Vec::new();
    for t in [AgentType::A, AgentType::B, AgentType::O] {
        let set = world.proposition_set(t);
        let n = set.len();
        let mut docs = Vec::new();
        for seq in ordered_subsets(&set, doc_len) {
            let mut p = 1.0 / 3.0;
            for i in 0..doc_len {
                p /= (n - i) as f64;
            }
            docs.push((seq, p));
        }
        docs_by_latent.push((t, docs));
    }

    // Every realizable prefix of every document.
    let mut prefixes: Vec<Vec<Proposition>> = Vec::new();
    for (_, docs) in &docs_by_latent {
        for (doc, _) in docs {
            for m in 1..=doc.len() {
                let pre = doc[..m].to_vec();
                if !prefixes.contains(&pre) {
                    prefixes.push(pre);
                }
            }
        }
    }

    let mut checked = 0;
    for pre in &prefixes {
        let mut brute = [0.0f64; 3];
        for (t, docs) in &docs_by_latent {
            for (doc, p) in docs {
                if doc.len() >= pre.len() && doc[..pre.len()] == pre[..] {
                    brute[t.index()] += p;
                }
            }
        }
        let total: f64 = brute.iter().sum();
        let brute = brute.map(|w| w / total);
        let exact = world.posterior(pre).expect("realizable prefix");
        for k in 0..3 {
            let err = (exact[k] - brute[k]).abs();
            if err > *tally_err {
                *tally_err = err;
            }
        }
        checked += 1;
    }
    checked
}

fn check_bdi_posteriors(world: &World, doc_len: usize, tally_err: &mut f64) -> usize {
    let prior = BdiPrior::default();
    let k = world.spec().atoms as usize;
    let atoms: Vec<usize> = (0..k).collect();
    let latents = [
        (AgentType::A, false),
        (AgentType::A, true),
        (AgentType::B, false),
        (AgentType::B, true),
    ];
    let total_prior: f64 = prior.weights.iter().sum();

    // All (latent, document) pairs: ordered distinct atoms, polarity fixed
    // by (belief, desire).
    let mut docs_by_latent: Vec<Vec<(Vec<Proposition>, f64)>> = Vec::new();
    for (idx, (belief, deceive)) in latents.into_iter().enumerate() {
        let set = world.belief_set(belief).unwrap();
        let mut docs = Vec::new();
        for seq in ordered_subsets(&atoms, doc_len) {
            let props: Vec<Proposition> = seq
                .into_iter()
                .map(|a| Proposition {
                    atom: Atom(a as u32),
                    polarity: set.polarity_of(Atom(a as u32)) ^ deceive,
                })
                .collect();
            let mut p = prior.weights[idx] / total_prior;
            for i in 0..doc_len {
                p /= (k - i) as f64;
            }
            docs.push((props, p));
        }
        docs_by_latent.push(docs);
    }

    let mut prefixes: Vec<Vec<Proposition>> = Vec::new();
    for docs in &docs_by_latent {
        for (doc, _) in docs {
            for m in 1..=doc.len() {
                let pre = doc[..m].to_vec();
                if !prefixes.contains(&pre) {
                    prefixes.push(pre);
                }
            }
        }
    }

    let mut checked = 0;
    for pre in &prefixes {
        let mut brute = [0.0f64; 4];
        for (idx, docs) in docs_by_latent.iter().enumerate() {
            for (doc, p) in docs {
                if doc.len() >= pre.len() && doc[..pre.len()] == pre[..] {
                    brute[idx] += p;
                }
            }
        }
        let total: f64 = brute.iter().sum();
        let brute = brute.map(|w| w / total);
        let exact = world.bdi_posterior(pre, &prior).expect("realizable prefix");
        for k in 0..4 {
            let err = (exact[k] - brute[k]).abs();
            if err > *tally_err {
                *tally_err = err;
            }
        }
        checked += 1;
    }
    checked
}

fn criterion_bayes_oracle(tally: &mut Tally) {
    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    for atoms in 2..=4u32 {
        for &f in &[0.5, 1.0] {
            let world = World::build(WorldSpec {
                atoms,
                contested_fraction: f,
                tokenization: Tokenization::Atomic,
                seed: 100 + atoms as u64,
            })
            .unwrap();
            for doc_len in 1..=3usize.min(atoms as usize) {
                checked += check_encyclopedia_posteriors(&world, doc_len, &mut max_err);
                if f < 1.0 {
                    checked += check_bdi_posteriors(&world, doc_len, &mut max_err);
                }
            }
        }
    }
    tally.record(
        "criterion-4-bayes-oracle",
        max_err <= 1e-9,
        &format!("{checked} prefixes vs brute-force enumeration, max abs error {max_err:.3e} (need <= 1e-9)"),
    );
}

fn criterion_gradient_check(tally: &mut Tally) {
    let (vocab, embed, hidden) = (8usize, 4usize, 6usize);
    let params = LmParamsOf::<f64>::init(vocab, embed, hidden, 33);
    let mut rng = ChaCha12Rng::seed_from_u64(34);
    let tokens: Vec<u32> = std::iter::once(0)
        .chain((0..11).map(|_| rng.gen_range(0..vocab as u32)))
        .collect();
    let (_, grad) = backward(&params, &tokens).unwrap();
    let n = params.num_params();
    let step = 1e-5;
    let mut max_rel = 0.0f64;
    let mut coords = 0usize;
    while coords < 100 {
        let flat = rng.gen_range(0..n);
        // Map the flat index into (block, offset).
        let (mut blk, mut off) = (0usize, flat);
        loop {
            let len = params.blocks()[blk].len();
            if off < len {
                break;
            }
            off -= len;
            blk += 1;
        }
        let analytic = grad.blocks()[blk][off];
        let mut plus = params.clone();
        plus.blocks_mut()[blk][off] += step;
        let mut minus = params.clone();
        minus.blocks_mut()[blk][off] -= step;
        let fd = (loss(&plus, &tokens).unwrap() - loss(&minus, &tokens).unwrap()) / (2.0 * step);
        let denom = analytic.abs().max(fd.abs());
        if denom < 1e-8 {
            // Both effectively zero (e.g. an embedding row for an unused
            // token); counts as agreement.
            coords += 1;
            continue;
        }
        let rel = (analytic - fd).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
        coords += 1;
    }
    tally.record(
        "criterion-5-gradient-check",
        max_rel < 1e-4,
        &format!("{coords} random coordinates, max relative error {max_rel:.3e} vs central differences (need < 1e-4)"),
    );
}

fn criterion_determinism(tally: &mut Tally) {
    let bin = env!("CARGO_BIN_EXE_latentlm");
    let base = tempfile::tempdir().unwrap();
    let mut outputs: Vec<HashMap<&str, Vec<u8>>> = Vec::new();
    let mut run_ok = true;
    for run in 0..2 {
        let out = base.path().join(format!("run{run}"));
        let status = Command::new(bin)
            .args([
                "--deterministic",
                "repro",
                "--seed",
                "11",
                "--scenario",
                "encyclopedia",
                "--docs",
                "500",
                "--len",
                "6",
                "--epochs",
                "2",
                "--hidden",
                "64",
                "--embed",
                "32",
                "--n-samples",
                "50",
                "--eval-docs",
                "200",
                "--position",
                "3",
                "--out",
            ])
            .arg(&out)
            .status()
            .unwrap();
        // The reduced-scale model need not pass the statistical checks
        // (exit 4); only a hard error invalidates the determinism run.
        run_ok &= matches!(status.code(), Some(0) | Some(4));
        let mut files = HashMap::new();
        for name in ["corpus.jsonl", "checkpoint.bin", "report.json", "report.csv", "verdicts.txt"] {
            files.insert(name, std::fs::read(out.join(name)).unwrap_or_default());
        }
        outputs.push(files);
    }
    let mut mismatched: Vec<&str> = Vec::new();
    for (name, bytes) in &outputs[0] {
        if bytes.is_empty() || outputs[1][name] != *bytes {
            mismatched.push(name);
        }
    }
    tally.record(
        "criterion-6-determinism",
        run_ok && mismatched.is_empty(),
        &if mismatched.is_empty() && run_ok {
            "two seeded repro runs produced byte-identical corpus, checkpoint, and report bundle".to_string()
        } else {
            format!("mismatched or missing artifacts: {mismatched:?} (runs ok: {run_ok})")
        },
    );
}

#[test]
fn acceptance_criteria() {
    cap_workers();
    let mut tally = Tally::new();

    // Fast exact-oracle criteria first so their lines appear even if the
    // long pipelines abort.
    criterion_bayes_oracle(&mut tally);
    criterion_gradient_check(&mut tally);
    criterion_determinism(&mut tally);

    // Criteria 1–3 and 7: one full-size encyclopedia pipeline.
    let enc_dir = tempfile::tempdir().unwrap();
    let enc = run_repro(&ReproConfig::defaults(
        Scenario::Encyclopedia,
        1,
        enc_dir.path().to_path_buf(),
    ))
    .expect("encyclopedia pipeline");
    tally.record_verdict(
        "criterion-1-sampling-split",
        verdict(&enc.verdicts, "sampling-split"),
    );
    let probe = verdict(&enc.verdicts, "probe-accuracy");
    let control = verdict(&enc.verdicts, "probe-control");
    let ceiling = verdict(&enc.verdicts, "probe-ceiling");
    tally.record(
        "criterion-2-probe",
        probe.pass && control.pass && ceiling.pass,
        &format!("{}; {}; {}", probe.detail, control.detail, ceiling.detail),
    );
    let steer_a = verdict(&enc.verdicts, "steering-a");
    let steer_b = verdict(&enc.verdicts, "steering-b");
    tally.record(
        "criterion-3-steering",
        steer_a.pass && steer_b.pass,
        &format!("{}; {}", steer_a.detail, steer_b.detail),
    );
    tally.record_verdict(
        "criterion-7-training-sanity",
        verdict(&enc.verdicts, "training-sanity"),
    );

    // Criterion 8: full-size BDI pipeline.
    let bdi_dir = tempfile::tempdir().unwrap();
    let bdi = run_repro(&ReproConfig::defaults(
        Scenario::Bdi,
        1,
        bdi_dir.path().to_path_buf(),
    ))
    .expect("BDI pipeline");
    let desire = verdict(&bdi.verdicts, "bdi-desire-probe");
    let belief = verdict(&bdi.verdicts, "bdi-belief-probe");
    let gap = verdict(&bdi.verdicts, "bdi-steering-gap");
    tally.record(
        "criterion-8-bdi-properties",
        desire.pass && belief.pass && gap.pass,
        &format!("{}; {}; {}", desire.detail, belief.detail, gap.detail),
    );

    assert!(
        tally.failures.is_empty(),
        "acceptance criteria failed: {:?}\n{}",
        tally.failures,
        tally.lines.join("\n")
    );
}
