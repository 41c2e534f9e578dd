//! From-scratch single-layer LSTM language model.
//!
//! Embedding lookup, one LSTM cell (gate block order: input, forget, cell,
//! output), and a softmax output projection. Forward evaluation captures
//! the full per-position (h, c) trace; `backward` computes exact gradients
//! by backpropagation through time; `sample` does ancestral decoding from
//! an arbitrary initial state and an optional persistent output-state
//! bias, which is the hook used for steering.
//!
//! Everything is generic over [`Scalar`]; the default pipeline runs f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::scalar::Scalar;
use crate::world::BOS;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateOf<F> {
    pub h: Vec<F>,
    pub c: Vec<F>,
}

impl<F: Scalar> HiddenStateOf<F> {
    pub fn zeros(hidden: usize) -> Self {
        HiddenStateOf {
            h: vec![F::zero(); hidden],
            c: vec![F::zero(); hidden],
        }
    }
}

/// All model parameters. Block order (also the checkpoint serialization
/// order): embedding (V×E), wx (4H×E), wh (4H×H), b (4H), wo (V×H), bo (V).
#[derive(Debug, Clone, PartialEq)]
pub struct LmParamsOf<F> {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub embedding: Vec<F>,
    pub wx: Vec<F>,
    pub wh: Vec<F>,
    pub b: Vec<F>,
    pub wo: Vec<F>,
    pub bo: Vec<F>,
}

pub type GradientsOf<F> = LmParamsOf<F>;

impl<F: Scalar> LmParamsOf<F> {
    pub fn zeros(vocab: usize, embed: usize, hidden: usize) -> Self {
        LmParamsOf {
            vocab,
            embed,
            hidden,
            embedding: vec![F::zero(); vocab * embed],
            wx: vec![F::zero(); 4 * hidden * embed],
            wh: vec![F::zero(); 4 * hidden * hidden],
            b: vec![F::zero(); 4 * hidden],
            wo: vec![F::zero(); vocab * hidden],
            bo: vec![F::zero(); vocab],
        }
    }

    /// Seeded init: weights uniform in [-1/sqrt(H), 1/sqrt(H)], biases zero
    /// except the forget-gate bias, which starts at 1.
    pub fn init(vocab: usize, embed: usize, hidden: usize, seed: u64) -> Self {
        let mut p = Self::zeros(vocab, embed, hidden);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let scale = 1.0 / (hidden as f64).sqrt();
        let mut fill = |v: &mut [F]| {
            for x in v.iter_mut() {
                *x = F::from_f64(rng.gen_range(-scale..scale));
            }
        };
        fill(&mut p.embedding);
        fill(&mut p.wx);
        fill(&mut p.wh);
        fill(&mut p.wo);
        for i in hidden..2 * hidden {
            p.b[i] = F::one();
        }
        p
    }

    pub fn blocks(&self) -> [&[F]; 6] {
        [
            &self.embedding,
            &self.wx,
            &self.wh,
            &self.b,
            &self.wo,
            &self.bo,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<F>; 6] {
        [
            &mut self.embedding,
            &mut self.wx,
            &mut self.wh,
            &mut self.b,
            &mut self.wo,
            &mut self.bo,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn global_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .map(|x| {
                let v = x.into_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn add_scaled(&mut self, other: &Self, factor: F) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += *s * factor;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for blk in self.blocks_mut() {
            for x in blk.iter_mut() {
                *x *= factor;
            }
        }
    }
}

/// y += M x for a row-major (rows × cols) matrix. The dot product uses a
/// fixed 8-lane accumulation (combined in a fixed order) so the compiler can
/// vectorize it without the result depending on anything but the inputs.
fn matvec<F: Scalar>(m: &[F], rows: usize, cols: usize, x: &[F], y: &mut [F]) {
    debug_assert_eq!(m.len(), rows * cols);
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        let mut lanes = [F::zero(); 8];
        let mut rc = row.chunks_exact(8);
        let mut xc = x.chunks_exact(8);
        for (a, b) in (&mut rc).zip(&mut xc) {
            for i in 0..8 {
                lanes[i] += a[i] * b[i];
            }
        }
        let mut acc = F::zero();
        for (a, b) in rc.remainder().iter().zip(xc.remainder()) {
            acc += *a * *b;
        }
        for lane in lanes {
            acc += lane;
        }
        y[r] += acc;
    }
}

/// y += M^T v.
fn matvec_t<F: Scalar>(m: &[F], rows: usize, cols: usize, v: &[F], y: &mut [F]) {
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        let s = v[r];
        if s == F::zero() {
            continue;
        }
        for (yc, a) in y.iter_mut().zip(row.iter()) {
            *yc += s * *a;
        }
    }
}

/// m += a v^T (outer product accumulation).
fn outer_acc<F: Scalar>(m: &mut [F], a: &[F], v: &[F]) {
    let cols = v.len();
    for (r, &ar) in a.iter().enumerate() {
        if ar == F::zero() {
            continue;
        }
        let row = &mut m[r * cols..(r + 1) * cols];
        for (mc, &vc) in row.iter_mut().zip(v.iter()) {
            *mc += ar * vc;
        }
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Next-token distribution read off an output-facing hidden vector.
fn output_probs<F: Scalar>(params: &LmParamsOf<F>, h: &[F]) -> Vec<F> {
    let mut logits = params.bo.clone();
    matvec(&params.wo, params.vocab, params.hidden, h, &mut logits);
    softmax_in_place(&mut logits);
    logits
}

fn softmax_in_place<F: Scalar>(logits: &mut [F]) {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for x in logits.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in logits.iter_mut() {
        *x /= total;
    }
}

/// Internal per-step activations retained for backpropagation.
struct StepCache<F> {
    token: usize,
    gates: Vec<F>, // 4H after nonlinearity, [i f g o]
    c: Vec<F>,
    h: Vec<F>,
    tanh_c: Vec<F>,
}

/// One LSTM step: consume `token` from `state`, return the new state and
/// the next-token distribution.
pub fn lstm_step<F: Scalar>(
    params: &LmParamsOf<F>,
    state: &HiddenStateOf<F>,
    token: u32,
) -> Result<(HiddenStateOf<F>, Vec<F>)> {
    let (cache, probs) = step_with_cache(params, state, token)?;
    Ok((
        HiddenStateOf {
            h: cache.h,
            c: cache.c,
        },
        probs,
    ))
}

fn step_with_cache<F: Scalar>(
    params: &LmParamsOf<F>,
    state: &HiddenStateOf<F>,
    token: u32,
) -> Result<(StepCache<F>, Vec<F>)> {
    let h = params.hidden;
    let tok = token as usize;
    if tok >= params.vocab {
        return Err(Error::Input(format!(
            "token id {tok} out of range for vocab {}",
            params.vocab
        )));
    }
    let x = &params.embedding[tok * params.embed..(tok + 1) * params.embed];

    let mut pre = params.b.clone();
    matvec(&params.wx, 4 * h, params.embed, x, &mut pre);
    matvec(&params.wh, 4 * h, h, &state.h, &mut pre);

    let mut gates = vec![F::zero(); 4 * h];
    for j in 0..h {
        gates[j] = sigmoid(pre[j]); // input
        gates[h + j] = sigmoid(pre[h + j]); // forget
        gates[2 * h + j] = pre[2 * h + j].tanh(); // cell candidate
        gates[3 * h + j] = sigmoid(pre[3 * h + j]); // output
    }
    let mut c = vec![F::zero(); h];
    let mut tanh_c = vec![F::zero(); h];
    let mut h_new = vec![F::zero(); h];
    for j in 0..h {
        c[j] = gates[h + j] * state.c[j] + gates[j] * gates[2 * h + j];
        tanh_c[j] = c[j].tanh();
        h_new[j] = gates[3 * h + j] * tanh_c[j];
    }

    let logits = output_probs(params, &h_new);

    Ok((
        StepCache {
            token: tok,
            gates,
            c,
            h: h_new,
            tanh_c,
        },
        logits,
    ))
}

/// Forward trace: one next-token distribution per consumed token, and the
/// state sequence (initial state first, then one state per token).
pub struct ForwardTrace<F> {
    pub probs: Vec<Vec<F>>,
    pub states: Vec<HiddenStateOf<F>>,
}

pub fn forward<F: Scalar>(params: &LmParamsOf<F>, tokens: &[u32]) -> Result<ForwardTrace<F>> {
    forward_from(params, &HiddenStateOf::zeros(params.hidden), tokens)
}

pub fn forward_from<F: Scalar>(
    params: &LmParamsOf<F>,
    init: &HiddenStateOf<F>,
    tokens: &[u32],
) -> Result<ForwardTrace<F>> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if init.h.len() != params.hidden || init.c.len() != params.hidden {
        return Err(Error::Input(format!(
            "initial state dimension {} does not match hidden size {}",
            init.h.len(),
            params.hidden
        )));
    }
    let mut states = Vec::with_capacity(tokens.len() + 1);
    states.push(init.clone());
    let mut probs = Vec::with_capacity(tokens.len());
    for &t in tokens {
        let (state, p) = lstm_step(params, states.last().unwrap(), t)?;
        states.push(state);
        probs.push(p);
    }
    Ok(ForwardTrace { probs, states })
}

/// Mean next-token negative log-likelihood of `tokens[1..]` given prefixes.
pub fn loss<F: Scalar>(params: &LmParamsOf<F>, tokens: &[u32]) -> Result<F> {
    Ok(backward_impl(params, tokens, false)?.0)
}

/// Exact gradient of [`loss`] with respect to every parameter, via
/// backpropagation through time.
pub fn backward<F: Scalar>(params: &LmParamsOf<F>, tokens: &[u32]) -> Result<(F, GradientsOf<F>)> {
    let (l, g) = backward_impl(params, tokens, true)?;
    Ok((l, g.unwrap()))
}

fn backward_impl<F: Scalar>(
    params: &LmParamsOf<F>,
    tokens: &[u32],
    want_grad: bool,
) -> Result<(F, Option<GradientsOf<F>>)> {
    let n = tokens.len();
    if n < 2 {
        return Err(Error::Input(
            "loss requires at least two tokens (one prediction)".into(),
        ));
    }
    let h = params.hidden;
    let init = HiddenStateOf::zeros(h);

    // Forward pass with caches. The last token's distribution predicts
    // nothing and is skipped.
    let mut caches: Vec<StepCache<F>> = Vec::with_capacity(n);
    let mut probs: Vec<Vec<F>> = Vec::with_capacity(n - 1);
    let mut total = F::zero();
    let weight = F::from_f64(1.0 / (n - 1) as f64);
    for (t, &tok) in tokens.iter().enumerate() {
        let prev_state = if t == 0 {
            init.clone()
        } else {
            HiddenStateOf {
                h: caches[t - 1].h.clone(),
                c: caches[t - 1].c.clone(),
            }
        };
        let (cache, p) = step_with_cache(params, &prev_state, tok)?;
        if t + 1 < n {
            let target = tokens[t + 1] as usize;
            if target >= params.vocab {
                return Err(Error::Input(format!(
                    "token id {target} out of range for vocab {}",
                    params.vocab
                )));
            }
            total += -(p[target].ln()) * weight;
            probs.push(p);
        }
        caches.push(cache);
    }
    if !want_grad {
        return Ok((total, None));
    }

    let mut grads = GradientsOf::zeros(params.vocab, params.embed, params.hidden);
    let mut dh = vec![F::zero(); h];
    let mut dc = vec![F::zero(); h];
    let mut da = vec![F::zero(); 4 * h];
    let mut dx = vec![F::zero(); params.embed];

    for t in (0..n).rev() {
        let cache = &caches[t];
        // Output-layer contribution (steps 0..n-1 predict the next token).
        if t + 1 < n {
            let target = tokens[t + 1] as usize;
            let mut dlogits = probs[t].clone();
            dlogits[target] -= F::one();
            for d in dlogits.iter_mut() {
                *d *= weight;
            }
            outer_acc(&mut grads.wo, &dlogits, &cache.h);
            for (g, d) in grads.bo.iter_mut().zip(dlogits.iter()) {
                *g += *d;
            }
            matvec_t(&params.wo, params.vocab, h, &dlogits, &mut dh);
        }

        let (prev_h, prev_c): (&[F], &[F]) = if t == 0 {
            (&init.h, &init.c)
        } else {
            (&caches[t - 1].h, &caches[t - 1].c)
        };

        for j in 0..h {
            let i_g = cache.gates[j];
            let f_g = cache.gates[h + j];
            let g_g = cache.gates[2 * h + j];
            let o_g = cache.gates[3 * h + j];
            let tc = cache.tanh_c[j];

            let do_ = dh[j] * tc;
            let dcj = dc[j] + dh[j] * o_g * (F::one() - tc * tc);

            let di = dcj * g_g;
            let df = dcj * prev_c[j];
            let dg = dcj * i_g;
            dc[j] = dcj * f_g; // becomes dc for t-1

            da[j] = di * i_g * (F::one() - i_g);
            da[h + j] = df * f_g * (F::one() - f_g);
            da[2 * h + j] = dg * (F::one() - g_g * g_g);
            da[3 * h + j] = do_ * o_g * (F::one() - o_g);
        }

        let x = &params.embedding[cache.token * params.embed..(cache.token + 1) * params.embed];
        outer_acc(&mut grads.wx, &da, x);
        outer_acc(&mut grads.wh, &da, prev_h);
        for (g, d) in grads.b.iter_mut().zip(da.iter()) {
            *g += *d;
        }

        for v in dx.iter_mut() {
            *v = F::zero();
        }
        matvec_t(&params.wx, 4 * h, params.embed, &da, &mut dx);
        let emb_row =
            &mut grads.embedding[cache.token * params.embed..(cache.token + 1) * params.embed];
        for (g, d) in emb_row.iter_mut().zip(dx.iter()) {
            *g += *d;
        }

        for v in dh.iter_mut() {
            *v = F::zero();
        }
        matvec_t(&params.wh, 4 * h, h, &da, &mut dh);
    }

    Ok((total, Some(grads)))
}

/// Number of documents the lockstep training path processes at once. The
/// corpus length is uniform within a scenario, so training batches are
/// rectangular and the recurrence can run over `LANES` documents in
/// parallel lanes — the recurrent matrix is then read once per time step
/// per group instead of once per document. All lane reductions use a fixed
/// order, so results stay bitwise reproducible.
pub const LANES: usize = 8;

#[inline(always)]
fn lane_sum<F: Scalar>(a: [F; LANES]) -> F {
    // Fixed-shape reduction tree: deterministic and cheap to vectorize.
    let mut buf = a;
    let mut w = LANES;
    while w > 1 {
        w /= 2;
        for i in 0..w {
            buf[i] = buf[i] + buf[i + w];
        }
    }
    buf[0]
}

struct LaneCache<F> {
    tokens: [usize; LANES],
    gates: Vec<[F; LANES]>,
    c: Vec<[F; LANES]>,
    h: Vec<[F; LANES]>,
    tanh_c: Vec<[F; LANES]>,
}

/// Sum of per-document losses over exactly [`LANES`] equal-length
/// documents, with the summed gradient added into `grads`. Produces the
/// same per-document forward probabilities as [`backward`]; only the
/// gradient summation order differs (still fixed, hence reproducible).
pub fn lane_backward<F: Scalar>(
    params: &LmParamsOf<F>,
    docs: &[&[u32]],
    grads: &mut GradientsOf<F>,
) -> Result<F> {
    lane_impl(params, docs, Some(grads))
}

/// Forward-only companion to [`lane_backward`].
pub fn lane_loss<F: Scalar>(params: &LmParamsOf<F>, docs: &[&[u32]]) -> Result<F> {
    lane_impl(params, docs, None)
}

fn lane_impl<F: Scalar>(
    params: &LmParamsOf<F>,
    docs: &[&[u32]],
    mut grads: Option<&mut GradientsOf<F>>,
) -> Result<F> {
    if docs.len() != LANES {
        return Err(Error::Input(format!(
            "lockstep path needs exactly {LANES} documents, got {}",
            docs.len()
        )));
    }
    let n = docs[0].len();
    if n < 2 || docs.iter().any(|d| d.len() != n) {
        return Err(Error::Input(
            "lockstep path needs equal-length documents of at least two tokens".into(),
        ));
    }
    let h = params.hidden;
    let e_dim = params.embed;
    let v_dim = params.vocab;
    for d in docs {
        for &t in *d {
            if t as usize >= v_dim {
                return Err(Error::Input(format!(
                    "token id {t} out of range for vocab {v_dim}"
                )));
            }
        }
    }

    let zero = [F::zero(); LANES];
    let weight = F::from_f64(1.0 / (n - 1) as f64);
    let want_grad = grads.is_some();

    let mut caches: Vec<LaneCache<F>> = Vec::with_capacity(if want_grad { n } else { 0 });
    let mut probs: Vec<Vec<[F; LANES]>> = Vec::with_capacity(if want_grad { n - 1 } else { 0 });
    let mut prev_h = vec![zero; h];
    let mut prev_c = vec![zero; h];
    let mut total = F::zero();
    let mut x = vec![zero; e_dim];

    for t in 0..n {
        let mut tokens = [0usize; LANES];
        for l in 0..LANES {
            tokens[l] = docs[l][t] as usize;
        }
        for (ei, xe) in x.iter_mut().enumerate() {
            for l in 0..LANES {
                xe[l] = params.embedding[tokens[l] * e_dim + ei];
            }
        }
        let mut pre: Vec<[F; LANES]> = params.b.iter().map(|&b| [b; LANES]).collect();
        for (r, pr) in pre.iter_mut().enumerate() {
            let mut acc = zero;
            for (w, xe) in params.wx[r * e_dim..(r + 1) * e_dim].iter().zip(x.iter()) {
                for l in 0..LANES {
                    acc[l] += *w * xe[l];
                }
            }
            for (w, hp) in params.wh[r * h..(r + 1) * h].iter().zip(prev_h.iter()) {
                for l in 0..LANES {
                    acc[l] += *w * hp[l];
                }
            }
            for l in 0..LANES {
                pr[l] += acc[l];
            }
        }
        let mut gates = vec![zero; 4 * h];
        for j in 0..h {
            for l in 0..LANES {
                gates[j][l] = sigmoid(pre[j][l]);
                gates[h + j][l] = sigmoid(pre[h + j][l]);
                gates[2 * h + j][l] = pre[2 * h + j][l].tanh();
                gates[3 * h + j][l] = sigmoid(pre[3 * h + j][l]);
            }
        }
        let mut c = vec![zero; h];
        let mut tanh_c = vec![zero; h];
        let mut h_new = vec![zero; h];
        for j in 0..h {
            for l in 0..LANES {
                c[j][l] = gates[h + j][l] * prev_c[j][l] + gates[j][l] * gates[2 * h + j][l];
                tanh_c[j][l] = c[j][l].tanh();
                h_new[j][l] = gates[3 * h + j][l] * tanh_c[j][l];
            }
        }
        if t + 1 < n {
            let mut logits: Vec<[F; LANES]> = params.bo.iter().map(|&b| [b; LANES]).collect();
            for (v, lg) in logits.iter_mut().enumerate() {
                let mut acc = zero;
                for (w, hn) in params.wo[v * h..(v + 1) * h].iter().zip(h_new.iter()) {
                    for l in 0..LANES {
                        acc[l] += *w * hn[l];
                    }
                }
                for l in 0..LANES {
                    lg[l] += acc[l];
                }
            }
            for l in 0..LANES {
                let mut max = F::neg_infinity();
                for lg in logits.iter() {
                    max = max.max(lg[l]);
                }
                let mut sum = F::zero();
                for lg in logits.iter_mut() {
                    lg[l] = (lg[l] - max).exp();
                    sum += lg[l];
                }
                for lg in logits.iter_mut() {
                    lg[l] /= sum;
                }
                let target = docs[l][t + 1] as usize;
                total += -(logits[target][l].ln()) * weight;
            }
            if want_grad {
                probs.push(logits);
            }
        }
        if want_grad {
            caches.push(LaneCache {
                tokens,
                gates,
                c: c.clone(),
                h: h_new.clone(),
                tanh_c,
            });
        }
        prev_h = h_new;
        prev_c = c;
    }

    let Some(grads) = grads.as_deref_mut() else {
        return Ok(total);
    };

    // Phase 1 (reverse time): run the dh/dc recurrence and store the
    // per-step gate and logit deltas. Weight-gradient accumulation is
    // deferred to phase 2 so the large gradient buffers are touched once
    // per group rather than once per time step.
    let mut dh = vec![zero; h];
    let mut dc = vec![zero; h];
    let mut dx = vec![zero; e_dim];
    let init_lane = vec![zero; h];
    let mut da_all: Vec<Vec<[F; LANES]>> = vec![Vec::new(); n];
    let mut dlogits_all: Vec<Vec<[F; LANES]>> = Vec::new();

    for t in (0..n).rev() {
        let cache = &caches[t];
        if t + 1 < n {
            let mut dlogits = probs[t].clone();
            for l in 0..LANES {
                let target = docs[l][t + 1] as usize;
                dlogits[target][l] -= F::one();
            }
            for d in dlogits.iter_mut() {
                for l in 0..LANES {
                    d[l] *= weight;
                }
            }
            for (v, d) in dlogits.iter().enumerate() {
                for (w, dhj) in params.wo[v * h..(v + 1) * h].iter().zip(dh.iter_mut()) {
                    for l in 0..LANES {
                        dhj[l] += *w * d[l];
                    }
                }
            }
            dlogits_all.push(dlogits);
        }
        let prev_c_s = if t == 0 { &init_lane } else { &caches[t - 1].c };
        let mut da = vec![zero; 4 * h];
        for j in 0..h {
            for l in 0..LANES {
                let i_g = cache.gates[j][l];
                let f_g = cache.gates[h + j][l];
                let g_g = cache.gates[2 * h + j][l];
                let o_g = cache.gates[3 * h + j][l];
                let tc = cache.tanh_c[j][l];

                let do_ = dh[j][l] * tc;
                let dcj = dc[j][l] + dh[j][l] * o_g * (F::one() - tc * tc);

                let di = dcj * g_g;
                let df = dcj * prev_c_s[j][l];
                let dg = dcj * i_g;
                dc[j][l] = dcj * f_g;

                da[j][l] = di * i_g * (F::one() - i_g);
                da[h + j][l] = df * f_g * (F::one() - f_g);
                da[2 * h + j][l] = dg * (F::one() - g_g * g_g);
                da[3 * h + j][l] = do_ * o_g * (F::one() - o_g);
            }
        }
        for v in dx.iter_mut() {
            *v = zero;
        }
        for (r, d) in da.iter().enumerate() {
            for (w, dxe) in params.wx[r * e_dim..(r + 1) * e_dim].iter().zip(dx.iter_mut()) {
                for l in 0..LANES {
                    dxe[l] += *w * d[l];
                }
            }
        }
        for (ei, dxe) in dx.iter().enumerate() {
            for l in 0..LANES {
                grads.embedding[cache.tokens[l] * e_dim + ei] += dxe[l];
            }
        }
        for v in dh.iter_mut() {
            *v = zero;
        }
        for (r, d) in da.iter().enumerate() {
            for (w, dhj) in params.wh[r * h..(r + 1) * h].iter().zip(dh.iter_mut()) {
                for l in 0..LANES {
                    dhj[l] += *w * d[l];
                }
            }
        }
        da_all[t] = da;
    }

    // Phase 2: weight gradients, summed over time in descending t to match
    // the per-document accumulation direction.
    for (i, dlogits) in dlogits_all.iter().enumerate() {
        let t = n - 2 - i;
        let hn = &caches[t].h;
        for (v, d) in dlogits.iter().enumerate() {
            for (g, hv) in grads.wo[v * h..(v + 1) * h].iter_mut().zip(hn.iter()) {
                let mut m = zero;
                for l in 0..LANES {
                    m[l] = d[l] * hv[l];
                }
                *g += lane_sum(m);
            }
            grads.bo[v] += lane_sum(*d);
        }
    }
    for t in (0..n).rev() {
        let da = &da_all[t];
        let cache = &caches[t];
        for (ei, xe) in x.iter_mut().enumerate() {
            for l in 0..LANES {
                xe[l] = params.embedding[cache.tokens[l] * e_dim + ei];
            }
        }
        for (r, d) in da.iter().enumerate() {
            for (g, xe) in grads.wx[r * e_dim..(r + 1) * e_dim].iter_mut().zip(x.iter()) {
                let mut m = zero;
                for l in 0..LANES {
                    m[l] = d[l] * xe[l];
                }
                *g += lane_sum(m);
            }
            grads.b[r] += lane_sum(*d);
        }
    }
    for r in 0..4 * h {
        let grow = &mut grads.wh[r * h..(r + 1) * h];
        for (hh, g) in grow.iter_mut().enumerate() {
            let mut acc = F::zero();
            for t in (1..n).rev() {
                let mut m = zero;
                let d = &da_all[t][r];
                let hp = &caches[t - 1].h[hh];
                for l in 0..LANES {
                    m[l] = d[l] * hp[l];
                }
                acc += lane_sum(m);
            }
            // t == 0 contributes nothing: the previous hidden state is zero.
            *g += acc;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decode {
    /// Argmax decoding; deterministic, needs no RNG.
    Greedy,
    Temperature(f64),
}

/// Ancestral sampling from `init`: BOS is fed first, generation stops at
/// EOS or after `max_len` generated tokens. The returned sequence includes
/// the leading BOS (and EOS when emitted).
pub fn sample<F: Scalar, R: Rng>(
    params: &LmParamsOf<F>,
    init: &HiddenStateOf<F>,
    max_len: usize,
    decode: Decode,
    rng: &mut R,
) -> Result<Vec<u32>> {
    sample_biased(params, init, None, max_len, decode, rng)
}

/// Ancestral sampling with a persistent additive bias on the output-facing
/// hidden state: every next-token distribution is read from `h_t + bias`
/// while the recurrent trajectory itself evolves unmodified, so the
/// model's own sequential bookkeeping (position, coverage) stays intact.
/// With `bias = None` this is exactly `sample`.
pub fn sample_biased<F: Scalar, R: Rng>(
    params: &LmParamsOf<F>,
    init: &HiddenStateOf<F>,
    bias: Option<&[F]>,
    max_len: usize,
    decode: Decode,
    rng: &mut R,
) -> Result<Vec<u32>> {
    if max_len == 0 {
        return Err(Error::Input("max_len must be at least 1".into()));
    }
    if let Decode::Temperature(t) = decode {
        if !(t > 0.0) {
            return Err(Error::Input(format!("temperature must be positive, got {t}")));
        }
    }
    if let Some(b) = bias {
        if b.len() != params.hidden {
            return Err(Error::Input(format!(
                "bias dimension {} does not match hidden size {}",
                b.len(),
                params.hidden
            )));
        }
    }
    let mut out = vec![BOS];
    let mut state = init.clone();
    let mut next_in = BOS;
    for _ in 0..max_len {
        let (new_state, probs) = lstm_step(params, &state, next_in)?;
        state = new_state;
        let probs = match bias {
            None => probs,
            Some(b) => {
                let mut biased = state.h.clone();
                for (x, d) in biased.iter_mut().zip(b) {
                    *x += *d;
                }
                output_probs(params, &biased)
            }
        };
        let tok = match decode {
            Decode::Greedy => {
                let mut best = 0usize;
                let mut best_p = F::neg_infinity();
                for (i, &p) in probs.iter().enumerate() {
                    if p > best_p {
                        best_p = p;
                        best = i;
                    }
                }
                best as u32
            }
            Decode::Temperature(temp) => {
                let logp: Vec<f64> = probs.iter().map(|p| p.into_f64().max(1e-300).ln()).collect();
                let scaled: Vec<f64> = logp.iter().map(|l| l / temp).collect();
                let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scaled.iter().map(|l| (l - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                let mut chosen = exps.len() - 1;
                for (i, &e) in exps.iter().enumerate() {
                    if u < e {
                        chosen = i;
                        break;
                    }
                    u -= e;
                }
                chosen as u32
            }
        };
        out.push(tok);
        if tok == crate::world::EOS {
            break;
        }
        next_in = tok;
    }
    Ok(out)
}

/// Shannon entropy (nats) of a distribution; used by tests and diagnostics.
pub fn entropy<F: Scalar>(p: &[F]) -> f64 {
    p.iter()
        .map(|&x| {
            let v = x.into_f64();
            if v > 0.0 {
                -v * v.ln()
            } else {
                0.0
            }
        })
        .sum()
}
