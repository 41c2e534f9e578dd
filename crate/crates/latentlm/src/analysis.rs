//! Probing and steering: the operational form of the two claims under
//! test. A linear probe from a frozen model's hidden state to the latent
//! label (plus a shuffled-label control) measures what the state encodes;
//! injecting a centered class-mean state offset during sampling and
//! grading the samples with the world oracle measures whether that
//! encoding causally controls generation.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::corpus::{Archetype, Corpus, Desire, Latent};
use crate::lm::{forward_from, sample, sample_biased, Decode, HiddenStateOf, LmParamsOf};
use crate::scalar::Scalar;
use crate::world::{AgentType, DocLabel, World};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    AuthorType,
    BdiBelief,
    BdiDesire,
}

impl ProbeTarget {
    pub fn num_classes(self) -> usize {
        match self {
            ProbeTarget::AuthorType => 3,
            ProbeTarget::BdiBelief | ProbeTarget::BdiDesire => 2,
        }
    }

    pub fn class_name(self, idx: usize) -> &'static str {
        match (self, idx) {
            (ProbeTarget::AuthorType, 0) => "A",
            (ProbeTarget::AuthorType, 1) => "B",
            (ProbeTarget::AuthorType, 2) => "O",
            (ProbeTarget::BdiBelief, 0) => "A",
            (ProbeTarget::BdiBelief, 1) => "B",
            (ProbeTarget::BdiDesire, 0) => "INFORM",
            (ProbeTarget::BdiDesire, 1) => "DECEIVE",
            _ => "?",
        }
    }

    /// Class index of a stored latent, or an error when the latent kind
    /// does not carry this target.
    pub fn label_of(self, latent: &Latent) -> Result<usize> {
        match (self, latent) {
            (ProbeTarget::AuthorType, Latent::Author(t)) => Ok(t.index()),
            (ProbeTarget::BdiBelief, Latent::Bdi(b)) => Ok(match b.belief {
                Archetype::A => 0,
                Archetype::B => 1,
            }),
            (ProbeTarget::BdiDesire, Latent::Bdi(b)) => Ok(match b.desire {
                Desire::Inform => 0,
                Desire::Deceive => 1,
            }),
            _ => Err(Error::Input(format!(
                "latent does not carry probe target {self:?}"
            ))),
        }
    }
}

impl std::str::FromStr for ProbeTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "author-type" => Ok(ProbeTarget::AuthorType),
            "bdi-belief" | "belief" => Ok(ProbeTarget::BdiBelief),
            "bdi-desire" | "desire" => Ok(ProbeTarget::BdiDesire),
            _ => Err(Error::Config(format!("unknown probe target {s:?}"))),
        }
    }
}

/// Multinomial logistic probe from the hidden state at a fixed proposition
/// position to a latent class.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModelOf<F> {
    pub weights: Vec<F>, // num_classes x hidden, row-major
    pub bias: Vec<F>,
    pub probe_position: usize,
    pub target: ProbeTarget,
}

impl<F: Scalar> ProbeModelOf<F> {
    pub fn hidden(&self) -> usize {
        self.weights.len() / self.bias.len()
    }

    pub fn predict(&self, state: &[F]) -> usize {
        let c = self.bias.len();
        let h = state.len();
        let mut best = 0usize;
        let mut best_score = F::neg_infinity();
        for k in 0..c {
            let mut s = self.bias[k];
            for (w, x) in self.weights[k * h..(k + 1) * h].iter().zip(state) {
                s += *w * *x;
            }
            if s > best_score {
                best_score = s;
                best = k;
            }
        }
        best
    }
}

/// Hidden state (h) after the model has consumed BOS plus the first
/// `position` proposition tokens of the document, via a forced forward
/// pass. In surface mode a proposition spans two tokens; the state is
/// taken after its final token.
pub fn state_at_position<F: Scalar>(
    params: &LmParamsOf<F>,
    world: &World,
    tokens: &[u32],
    position: usize,
) -> Result<Vec<F>> {
    let tokens_per_prop = match world.spec().tokenization {
        crate::world::Tokenization::Atomic => 1,
        crate::world::Tokenization::Surface => 2,
    };
    let consumed = 1 + position * tokens_per_prop; // BOS + propositions
    if tokens.len() < consumed {
        return Err(Error::Input(format!(
            "document too short for probe position {position}"
        )));
    }
    let trace = forward_from(
        params,
        &HiddenStateOf::zeros(params.hidden),
        &tokens[..consumed],
    )?;
    Ok(trace.states.last().unwrap().h.clone())
}

/// Probe-position hidden states for every document, in corpus order.
pub fn extract_states<F: Scalar>(
    params: &LmParamsOf<F>,
    world: &World,
    corpus: &Corpus,
    position: usize,
) -> Result<Vec<Vec<F>>> {
    corpus
        .documents
        .par_iter()
        .map(|d| state_at_position(params, world, &d.tokens, position))
        .collect()
}

pub fn labels_for<F>(corpus: &Corpus, target: ProbeTarget) -> Result<Vec<usize>> {
    corpus
        .documents
        .iter()
        .map(|d| target.label_of(&d.latent))
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct ProbeFitConfig {
    pub l2: f64,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for ProbeFitConfig {
    fn default() -> Self {
        ProbeFitConfig {
            l2: 1e-3,
            learning_rate: 0.05,
            max_iters: 10_000,
            grad_tol: 1e-6,
        }
    }
}

/// Fit the probe by full-batch adaptive gradient descent on the L2-penalized
/// multinomial logistic loss, stopping at the gradient-norm tolerance or
/// the iteration cap.
pub fn fit_probe_on_states<F: Scalar>(
    states: &[Vec<F>],
    labels: &[usize],
    target: ProbeTarget,
    probe_position: usize,
    cfg: &ProbeFitConfig,
) -> Result<ProbeModelOf<F>> {
    let n = states.len();
    if n == 0 || labels.len() != n {
        return Err(Error::Fit("empty or mismatched probe training set".into()));
    }
    let c = target.num_classes();
    let h = states[0].len();
    for k in 0..c {
        if !labels.contains(&k) {
            return Err(Error::Fit(format!(
                "degenerate split: class {} absent from probe training labels",
                target.class_name(k)
            )));
        }
    }

    let mut w = vec![0.0f64; c * h];
    let mut b = vec![0.0f64; c];
    let mut mw = vec![0.0f64; c * h];
    let mut vw = vec![0.0f64; c * h];
    let mut mb = vec![0.0f64; c];
    let mut vb = vec![0.0f64; c];
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8f64);

    let chunk = n.div_ceil(8).max(1);
    let mut prev_loss = f64::INFINITY;
    let mut flat_iters = 0usize;
    for iter in 1..=cfg.max_iters {
        // Per-chunk partial gradients (and data loss), reduced in order.
        let partials: Vec<(Vec<f64>, Vec<f64>, f64)> = states
            .par_chunks(chunk)
            .zip(labels.par_chunks(chunk))
            .map(|(sx, sy)| {
                let mut gw = vec![0.0f64; c * h];
                let mut gb = vec![0.0f64; c];
                let mut loss = 0.0f64;
                let mut logits = vec![0.0f64; c];
                for (s, &y) in sx.iter().zip(sy) {
                    for k in 0..c {
                        let mut acc = b[k];
                        for (wk, xi) in w[k * h..(k + 1) * h].iter().zip(s) {
                            acc += wk * xi.into_f64();
                        }
                        logits[k] = acc;
                    }
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let target_logit = logits[y];
                    let mut z = 0.0;
                    for l in logits.iter_mut() {
                        *l = (*l - max).exp();
                        z += *l;
                    }
                    loss -= target_logit - max - z.ln();
                    for k in 0..c {
                        let d = logits[k] / z - if k == y { 1.0 } else { 0.0 };
                        gb[k] += d;
                        for (g, xi) in gw[k * h..(k + 1) * h].iter_mut().zip(s) {
                            *g += d * xi.into_f64();
                        }
                    }
                }
                (gw, gb, loss)
            })
            .collect();
        let mut gw = vec![0.0f64; c * h];
        let mut gb = vec![0.0f64; c];
        let mut data_loss = 0.0f64;
        for (pw, pb, pl) in partials {
            for (g, p) in gw.iter_mut().zip(pw) {
                *g += p;
            }
            for (g, p) in gb.iter_mut().zip(pb) {
                *g += p;
            }
            data_loss += pl;
        }
        let inv_n = 1.0 / n as f64;
        let mut norm_sq = 0.0;
        for (g, &wk) in gw.iter_mut().zip(w.iter()) {
            *g = *g * inv_n + cfg.l2 * wk;
            norm_sq += *g * *g;
        }
        for g in gb.iter_mut() {
            *g *= inv_n;
            norm_sq += *g * *g;
        }
        if norm_sq.sqrt() < cfg.grad_tol {
            break;
        }
        // Plateau stop: the penalized objective has stopped moving.
        let total_loss = data_loss / n as f64
            + 0.5 * cfg.l2 * w.iter().map(|x| x * x).sum::<f64>();
        if (prev_loss - total_loss).abs() < 1e-10 * total_loss.abs().max(1.0) {
            flat_iters += 1;
            if flat_iters >= 25 {
                break;
            }
        } else {
            flat_iters = 0;
        }
        prev_loss = total_loss;
        let bc1 = 1.0 - beta1.powi(iter as i32);
        let bc2 = 1.0 - beta2.powi(iter as i32);
        for i in 0..c * h {
            mw[i] = beta1 * mw[i] + (1.0 - beta1) * gw[i];
            vw[i] = beta2 * vw[i] + (1.0 - beta2) * gw[i] * gw[i];
            w[i] -= cfg.learning_rate * (mw[i] / bc1) / ((vw[i] / bc2).sqrt() + eps);
        }
        for k in 0..c {
            mb[k] = beta1 * mb[k] + (1.0 - beta1) * gb[k];
            vb[k] = beta2 * vb[k] + (1.0 - beta2) * gb[k] * gb[k];
            b[k] -= cfg.learning_rate * (mb[k] / bc1) / ((vb[k] / bc2).sqrt() + eps);
        }
    }

    Ok(ProbeModelOf {
        weights: w.into_iter().map(F::from_f64).collect(),
        bias: b.into_iter().map(F::from_f64).collect(),
        probe_position,
        target,
    })
}

/// Fit against the stored latents. With `shuffle_labels_seed` set, the
/// labels are permuted before fitting — the control whose held-out
/// accuracy must collapse to chance if the probe's signal is real.
pub fn fit_probe<F: Scalar>(
    params: &LmParamsOf<F>,
    world: &World,
    corpus: &Corpus,
    probe_position: usize,
    target: ProbeTarget,
    cfg: &ProbeFitConfig,
    shuffle_labels_seed: Option<u64>,
) -> Result<ProbeModelOf<F>> {
    let states = extract_states(params, world, corpus, probe_position)?;
    let mut labels = labels_for::<F>(corpus, target)?;
    if let Some(seed) = shuffle_labels_seed {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for i in (1..labels.len()).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            labels.swap(i, j);
        }
    }
    fit_probe_on_states(&states, &labels, target, probe_position, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// confusion[true][predicted]
    pub confusion: Vec<Vec<usize>>,
    pub n: usize,
}

pub fn score_predictions(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<EvalResult> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Input(
            "cannot score an empty or mismatched evaluation set".into(),
        ));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    let mut correct = 0usize;
    for (&p, &y) in preds.iter().zip(labels) {
        confusion[y][p] += 1;
        if p == y {
            correct += 1;
        }
    }
    Ok(EvalResult {
        accuracy: correct as f64 / preds.len() as f64,
        confusion,
        n: preds.len(),
    })
}

/// Accuracy and confusion of the probe on a corpus (the corpus should be
/// drawn with seeds disjoint from training and fitting).
pub fn eval_probe<F: Scalar>(
    probe: &ProbeModelOf<F>,
    params: &LmParamsOf<F>,
    world: &World,
    corpus: &Corpus,
) -> Result<EvalResult> {
    if corpus.documents.is_empty() {
        return Err(Error::Input("cannot evaluate a probe on an empty corpus".into()));
    }
    corpus.bind(world)?;
    let states = extract_states(params, world, corpus, probe.probe_position)?;
    let labels = labels_for::<F>(corpus, probe.target)?;
    let preds: Vec<usize> = states.iter().map(|s| probe.predict(s)).collect();
    score_predictions(&preds, &labels, probe.target.num_classes())
}

/// Exact-posterior predictions at the probe position: the ceiling no probe
/// can beat (beyond sampling noise).
pub fn oracle_predictions(world: &World, corpus: &Corpus, position: usize, target: ProbeTarget) -> Result<Vec<usize>> {
    corpus
        .documents
        .iter()
        .map(|d| {
            let body = &d.tokens[1..d.tokens.len() - 1];
            let props = world
                .vocab()
                .parse_body(body)
                .ok_or_else(|| Error::Input("unparseable document in oracle evaluation".into()))?;
            if props.len() < position {
                return Err(Error::Input(format!(
                    "document too short for oracle position {position}"
                )));
            }
            let prefix = &props[..position];
            let argmax = |v: &[f64]| {
                v.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            };
            Ok(match target {
                ProbeTarget::AuthorType => argmax(&world.posterior(prefix)?),
                ProbeTarget::BdiBelief => {
                    let p = world.bdi_posterior(prefix, &crate::world::BdiPrior::default())?;
                    argmax(&[p[0] + p[1], p[2] + p[3]])
                }
                ProbeTarget::BdiDesire => {
                    let p = world.bdi_posterior(prefix, &crate::world::BdiPrior::default())?;
                    argmax(&[p[0] + p[2], p[1] + p[3]])
                }
            })
        })
        .collect()
}

pub fn oracle_accuracy(world: &World, corpus: &Corpus, position: usize, target: ProbeTarget) -> Result<EvalResult> {
    let preds = oracle_predictions(world, corpus, position, target)?;
    let labels = labels_for::<f64>(corpus, target)?;
    score_predictions(&preds, &labels, target.num_classes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    AllPositions,
    FinalPosition,
}

/// Which documents a steering mean is computed over.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassSelector {
    Author(AgentType),
    Belief(Archetype),
    Desire(Desire),
    /// Grand mean over every document (control run).
    All,
}

impl ClassSelector {
    fn matches(&self, latent: &Latent) -> bool {
        match (self, latent) {
            (ClassSelector::All, _) => true,
            (ClassSelector::Author(t), Latent::Author(l)) => t == l,
            (ClassSelector::Belief(a), Latent::Bdi(b)) => *a == b.belief,
            (ClassSelector::Desire(d), Latent::Bdi(b)) => *d == b.desire,
            _ => false,
        }
    }

    pub fn label(&self) -> String {
        match self {
            ClassSelector::Author(t) => format!("author_{t}"),
            ClassSelector::Belief(Archetype::A) => "belief_A".into(),
            ClassSelector::Belief(Archetype::B) => "belief_B".into(),
            ClassSelector::Desire(Desire::Inform) => "desire_INFORM".into(),
            ClassSelector::Desire(Desire::Deceive) => "desire_DECEIVE".into(),
            ClassSelector::All => "all".into(),
        }
    }
}

/// A centered class-mean state offset: the mean (h, c) over class-labeled
/// documents minus the mean over the whole corpus. Centering removes the
/// components every document shares — most importantly the model's
/// position/coverage bookkeeping — and leaves the direction that encodes
/// the latent class itself, so it can be injected during sampling without
/// derailing generation.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVectorOf<F> {
    pub label: String,
    pub h: Vec<F>,
    pub c: Vec<F>,
    pub aggregation: Aggregation,
    pub sample_count: usize,
}

/// Centered class mean: the arithmetic mean of (h, c) over body-token
/// positions of the documents matching the class (every position with
/// ALL_POSITIONS, the last one with FINAL_POSITION), minus the same mean
/// taken over every document in the corpus. The grand mean itself
/// (`ClassSelector::All`) therefore centers to exactly zero — steering
/// with it reproduces unconditioned sampling.
pub fn class_mean<F: Scalar>(
    params: &LmParamsOf<F>,
    corpus: &Corpus,
    class: ClassSelector,
    aggregation: Aggregation,
) -> Result<SteeringVectorOf<F>> {
    let docs = &corpus.documents;
    if !docs.iter().any(|d| class.matches(&d.latent)) {
        return Err(Error::Input(format!(
            "no documents of class {} in corpus",
            class.label()
        )));
    }
    let hidden = params.hidden;
    struct Sums {
        cls_h: Vec<f64>,
        cls_c: Vec<f64>,
        cls_n: usize,
        all_h: Vec<f64>,
        all_c: Vec<f64>,
        all_n: usize,
    }
    let partials: Vec<Result<Sums>> = docs
        .par_chunks(docs.len().div_ceil(8).max(1))
        .map(|chunk| {
            let mut s = Sums {
                cls_h: vec![0.0; hidden],
                cls_c: vec![0.0; hidden],
                cls_n: 0,
                all_h: vec![0.0; hidden],
                all_c: vec![0.0; hidden],
                all_n: 0,
            };
            for d in chunk {
                let in_class = class.matches(&d.latent);
                let trace = forward_from(params, &HiddenStateOf::zeros(hidden), &d.tokens)?;
                // States after body tokens: indices 2..=len-1 (after BOS is
                // index 1; the EOS state is excluded).
                let last_body = d.tokens.len() - 1;
                let range = match aggregation {
                    Aggregation::AllPositions => 2..=last_body,
                    Aggregation::FinalPosition => last_body..=last_body,
                };
                for i in range {
                    let st = &trace.states[i];
                    for j in 0..hidden {
                        let (h, c) = (st.h[j].into_f64(), st.c[j].into_f64());
                        s.all_h[j] += h;
                        s.all_c[j] += c;
                        if in_class {
                            s.cls_h[j] += h;
                            s.cls_c[j] += c;
                        }
                    }
                    s.all_n += 1;
                    if in_class {
                        s.cls_n += 1;
                    }
                }
            }
            Ok(s)
        })
        .collect();
    let mut total = Sums {
        cls_h: vec![0.0; hidden],
        cls_c: vec![0.0; hidden],
        cls_n: 0,
        all_h: vec![0.0; hidden],
        all_c: vec![0.0; hidden],
        all_n: 0,
    };
    for p in partials {
        let s = p?;
        for j in 0..hidden {
            total.cls_h[j] += s.cls_h[j];
            total.cls_c[j] += s.cls_c[j];
            total.all_h[j] += s.all_h[j];
            total.all_c[j] += s.all_c[j];
        }
        total.cls_n += s.cls_n;
        total.all_n += s.all_n;
    }
    let cls_inv = 1.0 / total.cls_n as f64;
    let all_inv = 1.0 / total.all_n as f64;
    let center = |cls: &[f64], all: &[f64]| -> Vec<F> {
        cls.iter()
            .zip(all)
            .map(|(&c, &a)| F::from_f64(c * cls_inv - a * all_inv))
            .collect()
    };
    Ok(SteeringVectorOf {
        label: class.label(),
        h: center(&total.cls_h, &total.all_h),
        c: center(&total.cls_c, &total.all_c),
        aggregation,
        sample_count: total.cls_n,
    })
}

/// Outcome-class counts over a batch of generated samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTable {
    pub counts: [usize; 5],
    pub out_of_world: usize,
    pub n: usize,
}

impl OutcomeTable {
    pub fn fraction(&self, label: DocLabel) -> f64 {
        self.counts[label.index()] as f64 / self.n as f64
    }

    pub fn fractions(&self) -> [f64; 5] {
        self.counts.map(|c| c as f64 / self.n as f64)
    }
}

/// Draw `n` ancestral samples with the steering offset added to the
/// output-facing hidden state at every step, and grade each sample with
/// the consistency oracle. The recurrent trajectory itself is left
/// unmodified — replacing it outright destroys the model's position and
/// coverage bookkeeping and yields truncated, ill-formed documents.
/// Per-sample RNG streams make the table order-independent.
pub fn steer_and_sample<F: Scalar>(
    params: &LmParamsOf<F>,
    world: &World,
    steering: &SteeringVectorOf<F>,
    n: usize,
    max_len: usize,
    temperature: f64,
    seed: u64,
    expected_len: Option<usize>,
) -> Result<OutcomeTable> {
    if steering.h.len() != params.hidden || steering.c.len() != params.hidden {
        return Err(Error::Input(format!(
            "steering dimension {} does not match hidden size {}",
            steering.h.len(),
            params.hidden
        )));
    }
    let zeros = HiddenStateOf::zeros(params.hidden);
    let labels: Vec<Result<(DocLabel, bool)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let tokens = sample_biased(
                params,
                &zeros,
                Some(&steering.h),
                max_len,
                Decode::Temperature(temperature),
                &mut rng,
            )?;
            let c = world.classify(&tokens, expected_len);
            Ok((c.label, c.out_of_world))
        })
        .collect();
    let mut table = OutcomeTable {
        counts: [0; 5],
        out_of_world: 0,
        n,
    };
    for l in labels {
        let (label, oow) = l?;
        table.counts[label.index()] += 1;
        if oow {
            table.out_of_world += 1;
        }
    }
    Ok(table)
}

/// The zero steering vector: unconditioned sampling.
pub fn zero_steering<F: Scalar>(hidden: usize) -> SteeringVectorOf<F> {
    SteeringVectorOf {
        label: "unconditioned".into(),
        h: vec![F::zero(); hidden],
        c: vec![F::zero(); hidden],
        aggregation: Aggregation::AllPositions,
        sample_count: 0,
    }
}

/// Fraction of well-formed generated documents whose assertions on agreed
/// atoms flip the shared polarity — the observable trace of a deceiving
/// author. Returns (rate, assertions counted).
pub fn generated_flip_rate(world: &World, samples: &[Vec<u32>]) -> (f64, usize) {
    let mut flips = 0usize;
    let mut total = 0usize;
    for tokens in samples {
        if tokens.len() < 2 {
            continue;
        }
        let Some(props) = world.vocab().parse_body(&tokens[1..tokens.len() - 1]) else {
            continue;
        };
        for p in props {
            if world.is_contested(p.atom) {
                continue;
            }
            total += 1;
            let shared = world.belief_set(AgentType::A).unwrap().polarity_of(p.atom);
            if p.polarity != shared {
                flips += 1;
            }
        }
    }
    if total == 0 {
        (0.0, 0)
    } else {
        (flips as f64 / total as f64, total)
    }
}

/// Draw steered samples and return the raw token sequences (for metrics
/// beyond the class table, e.g. flip rates).
pub fn steered_samples<F: Scalar>(
    params: &LmParamsOf<F>,
    steering: &SteeringVectorOf<F>,
    n: usize,
    max_len: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<Vec<u32>>> {
    let init = HiddenStateOf {
        h: steering.h.clone(),
        c: steering.c.clone(),
    };
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            sample(params, &init, max_len, Decode::Temperature(temperature), &mut rng)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub target: ProbeTarget,
    pub position: usize,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub shuffled_control_accuracy: f64,
    pub oracle_ceiling: f64,
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionRow {
    pub name: String,
    pub fractions: [f64; 5],
    pub out_of_world: f64,
    pub n: usize,
}

impl FractionRow {
    pub fn from_table(name: &str, t: &OutcomeTable) -> Self {
        FractionRow {
            name: name.to_string(),
            fractions: t.fractions(),
            out_of_world: t.out_of_world as f64 / t.n as f64,
            n: t.n,
        }
    }
}

/// Structured result bundle for one experiment. Serializes to JSON
/// (machine-readable) and to a flat CSV table for plotting; every report
/// embeds the hashes and seeds that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: String,
    pub world_hash: String,
    pub checkpoint_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub class_fractions: Vec<FractionRow>,
    pub probes: Vec<ProbeReport>,
    pub metrics: BTreeMap<String, f64>,
}

impl ExperimentReport {
    pub fn new(scenario: &str, world_hash: &str, checkpoint_hash: &str) -> Self {
        ExperimentReport {
            scenario: scenario.to_string(),
            world_hash: world_hash.to_string(),
            checkpoint_hash: checkpoint_hash.to_string(),
            seeds: BTreeMap::new(),
            class_fractions: Vec::new(),
            probes: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    /// Every fraction row must sum to 1 over the five outcome classes.
    pub fn validate(&self) -> Result<()> {
        for row in &self.class_fractions {
            let s: f64 = row.fractions.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Numerical(format!(
                    "fraction row {:?} sums to {s}, expected 1",
                    row.name
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Input(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: 1,
            msg: format!("bad report: {e}"),
        })
    }

    /// Flat comma-separated table of the class-fraction rows.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("row,a_consistent,b_consistent,both_ab,o_only,ill_formed,out_of_world,n\n");
        for row in &self.class_fractions {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
                row.name,
                row.fractions[0],
                row.fractions[1],
                row.fractions[2],
                row.fractions[3],
                row.fractions[4],
                row.out_of_world,
                row.n
            ));
        }
        out
    }
}
