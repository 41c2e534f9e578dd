//! Mini-batch Adam training of the LSTM, plus the checkpoint format.
//!
//! Training sees token sequences only — the corpus latents are stripped by
//! the caller's type signature, so the optimizer cannot condition on
//! author identity even by accident.
//!
//! Per-batch gradients are accumulated over a fixed number of chunks and
//! reduced in chunk order, so results are bitwise reproducible for a given
//! (corpus, config) regardless of worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::corpus::Corpus;
use crate::lm::{backward, lane_backward, lane_loss, loss, GradientsOf, LmParamsOf, LANES};
use crate::scalar::Scalar;
use crate::{Error, Result};

const CHECKPOINT_HEADER: &str = "latentlm-checkpoint v1";
/// Fixed reduction width: batch gradients are accumulated over this many
/// ordered chunks independent of how many workers execute them.
const REDUCE_CHUNKS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            epochs: 15,
            clip_norm: 1.0,
            val_fraction: 0.1,
            seed: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0
            || self.beta1 <= 0.0
            || self.beta2 <= 0.0
            || self.epsilon <= 0.0
            || self.batch_size == 0
            || self.clip_norm <= 0.0
        {
            return Err(Error::Config("training hyperparameters must be positive".into()));
        }
        if !(0.0 < self.val_fraction && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction must lie in (0,1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }

    pub fn from_config(text: &str) -> Result<Self> {
        let kv = crate::config::KvConfig::parse(text)?;
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            learning_rate: kv.get_or("learning_rate", d.learning_rate)?,
            beta1: kv.get_or("beta1", d.beta1)?,
            beta2: kv.get_or("beta2", d.beta2)?,
            epsilon: kv.get_or("epsilon", d.epsilon)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            clip_norm: kv.get_or("clip_norm", d.clip_norm)?,
            val_fraction: kv.get_or("val_fraction", d.val_fraction)?,
            seed: kv.get_or("seed", d.seed)?,
            deterministic: kv.get_or("deterministic", d.deterministic)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_secs: f64,
    pub param_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Flat text table, one row per epoch.
    pub fn to_table(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tval_loss\twall_secs\tparam_norm\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.3}\t{:.6}\n",
                r.epoch, r.train_loss, r.val_loss, r.wall_secs, r.param_norm
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LmDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

struct AdamState<F> {
    m: GradientsOf<F>,
    v: GradientsOf<F>,
    step: u64,
}

impl<F: Scalar> AdamState<F> {
    fn new(dims: LmDims) -> Self {
        AdamState {
            m: GradientsOf::zeros(dims.vocab, dims.embed, dims.hidden),
            v: GradientsOf::zeros(dims.vocab, dims.embed, dims.hidden),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut LmParamsOf<F>, grads: &GradientsOf<F>, cfg: &TrainConfig) {
        self.step += 1;
        let b1 = F::from_f64(cfg.beta1);
        let b2 = F::from_f64(cfg.beta2);
        let one = F::one();
        let lr = F::from_f64(cfg.learning_rate);
        let eps = F::from_f64(cfg.epsilon);
        let bc1 = F::from_f64(1.0 - cfg.beta1.powi(self.step as i32));
        let bc2 = F::from_f64(1.0 - cfg.beta2.powi(self.step as i32));
        for (((pb, gb), mb), vb) in params
            .blocks_mut()
            .into_iter()
            .zip(grads.blocks())
            .zip(self.m.blocks_mut())
            .zip(self.v.blocks_mut())
        {
            for (((p, &g), m), v) in pb.iter_mut().zip(gb.iter()).zip(mb.iter_mut()).zip(vb.iter_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Scale the gradient so its global norm never exceeds `clip_norm`.
/// Returns the pre-clip norm.
fn clip_global_norm<F: Scalar>(grads: &mut GradientsOf<F>, clip_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > clip_norm {
        grads.scale(F::from_f64(clip_norm / norm));
    }
    norm
}

/// Mean loss and gradient over a batch of documents. Chunked accumulation
/// with an ordered reduction keeps the result independent of scheduling.
fn batch_grad<F: Scalar>(
    params: &LmParamsOf<F>,
    docs: &[&[u32]],
) -> Result<(f64, GradientsOf<F>)> {
    let chunk = docs.len().div_ceil(REDUCE_CHUNKS).max(1);
    let partials: Vec<Result<(f64, GradientsOf<F>)>> = docs
        .par_chunks(chunk)
        .map(|chunk_docs| {
            let mut acc = GradientsOf::zeros(params.vocab, params.embed, params.hidden);
            let mut total = 0.0;
            for group in chunk_docs.chunks(LANES) {
                if group.len() == LANES
                    && group.iter().all(|d| d.len() == group[0].len() && d.len() >= 2)
                {
                    total += lane_backward(params, group, &mut acc)?.into_f64();
                } else {
                    for &doc in group {
                        let (l, g) = backward(params, doc)?;
                        total += l.into_f64();
                        acc.add_scaled(&g, F::one());
                    }
                }
            }
            Ok((total, acc))
        })
        .collect();
    let mut grad = GradientsOf::zeros(params.vocab, params.embed, params.hidden);
    let mut total = 0.0;
    for p in partials {
        let (l, g) = p?;
        total += l;
        grad.add_scaled(&g, F::one());
    }
    let scale = 1.0 / docs.len() as f64;
    grad.scale(F::from_f64(scale));
    Ok((total * scale, grad))
}

fn mean_loss<F: Scalar>(params: &LmParamsOf<F>, docs: &[&[u32]]) -> Result<f64> {
    if docs.is_empty() {
        return Ok(f64::NAN);
    }
    let chunk = docs.len().div_ceil(REDUCE_CHUNKS).max(1);
    let partials: Vec<Result<f64>> = docs
        .par_chunks(chunk)
        .map(|chunk_docs| {
            let mut total = 0.0;
            for group in chunk_docs.chunks(LANES) {
                if group.len() == LANES
                    && group.iter().all(|d| d.len() == group[0].len() && d.len() >= 2)
                {
                    total += lane_loss(params, group)?.into_f64();
                } else {
                    for &doc in group {
                        total += loss(params, doc)?.into_f64();
                    }
                }
            }
            Ok(total)
        })
        .collect();
    let mut total = 0.0;
    for p in partials {
        total += p?;
    }
    Ok(total / docs.len() as f64)
}

/// Train from a fresh seeded initialization. The input is token sequences
/// only; latent labels are not reachable from here.
pub fn train<F: Scalar>(
    docs: &[&[u32]],
    dims: LmDims,
    cfg: &TrainConfig,
) -> Result<(LmParamsOf<F>, TrainLog)> {
    cfg.validate()?;
    if docs.is_empty() {
        return Err(Error::Config("cannot train on an empty corpus".into()));
    }
    let mut params = LmParamsOf::<F>::init(dims.vocab, dims.embed, dims.hidden, cfg.seed);
    let log = train_from(&mut params, docs, cfg)?;
    Ok((params, log))
}

/// Optimize `params` in place; returns the per-epoch log.
pub fn train_from<F: Scalar>(
    params: &mut LmParamsOf<F>,
    docs: &[&[u32]],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let n = docs.len();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

    // Seeded validation split.
    let mut order: Vec<usize> = (0..n).collect();
    shuffle(&mut order, &mut rng);
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).min(n.saturating_sub(1));
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_docs: Vec<&[u32]> = val_idx.iter().map(|&i| docs[i]).collect();
    let mut train_order: Vec<usize> = train_idx.to_vec();

    let mut adam = AdamState::new(LmDims {
        vocab: params.vocab,
        embed: params.embed,
        hidden: params.hidden,
    });
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        shuffle(&mut train_order, &mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_no, batch) in train_order.chunks(cfg.batch_size).enumerate() {
            let batch_docs: Vec<&[u32]> = batch.iter().map(|&i| docs[i]).collect();
            let (l, mut grads) = batch_grad(params, &batch_docs)?;
            if !l.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss {l} at epoch {epoch}, batch {batch_no}"
                )));
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam.update(params, &grads, cfg);
            epoch_loss += l;
            batches += 1;
        }
        let val_loss = mean_loss(params, &val_docs)?;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_loss,
            wall_secs: start.elapsed().as_secs_f64(),
            param_norm: params.global_norm(),
        });
    }
    Ok(log)
}

fn shuffle<R: Rng>(v: &mut [usize], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// Entropy (nats) of the corpus's unigram next-token distribution, counted
/// over predicted positions (everything after BOS). A trained model's
/// validation loss must beat this context-free baseline.
pub fn unigram_entropy(corpus: &Corpus) -> f64 {
    let mut counts: std::collections::BTreeMap<u32, u64> = Default::default();
    let mut total = 0u64;
    for doc in &corpus.documents {
        for &t in &doc.tokens[1..] {
            *counts.entry(t).or_insert(0) += 1;
            total += 1;
        }
    }
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub world_hash: String,
    pub train_config: Option<TrainConfig>,
}

/// Serialize: text header, then the raw little-endian f64 parameter blocks
/// in declared order.
pub fn checkpoint_bytes(params: &LmParamsOf<f64>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    writeln!(out, "{CHECKPOINT_HEADER}")?;
    writeln!(out, "vocab={}", params.vocab)?;
    writeln!(out, "embed={}", params.embed)?;
    writeln!(out, "hidden={}", params.hidden)?;
    writeln!(out, "world={}", meta.world_hash)?;
    writeln!(
        out,
        "meta={}",
        serde_json::to_string(&meta.train_config).map_err(|e| Error::Input(e.to_string()))?
    )?;
    writeln!(out, "blocks=embedding,wx,wh,b,wo,bo")?;
    writeln!(out, "data")?;
    for block in params.blocks() {
        for &x in block {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(params: &LmParamsOf<f64>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    atomic_write(path, &checkpoint_bytes(params, meta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(LmParamsOf<f64>, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(LmParamsOf<f64>, CheckpointMeta)> {
    let marker = b"\ndata\n";
    let data_at = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: "checkpoint has no data section".into(),
        })?;
    let header = std::str::from_utf8(&bytes[..data_at]).map_err(|_| Error::Parse {
        line: 1,
        msg: "checkpoint header is not UTF-8".into(),
    })?;
    let mut lines = header.lines();
    let first = lines.next().unwrap_or("");
    if first != CHECKPOINT_HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("bad checkpoint header {first:?}"),
        });
    }
    let kv = crate::config::KvConfig::parse(&header[first.len()..])?;
    let vocab: usize = kv.require("vocab")?;
    let embed: usize = kv.require("embed")?;
    let hidden: usize = kv.require("hidden")?;
    let world_hash: String = kv.require("world")?;
    let train_config: Option<TrainConfig> = match kv.get("meta") {
        Some(raw) => serde_json::from_str(raw).map_err(|e| Error::Parse {
            line: 1,
            msg: format!("bad checkpoint meta: {e}"),
        })?,
        None => None,
    };
    let blocks: String = kv.require("blocks")?;
    if blocks != "embedding,wx,wh,b,wo,bo" {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported block order {blocks:?}"),
        });
    }

    let mut params = LmParamsOf::<f64>::zeros(vocab, embed, hidden);
    let expected = params.num_params() * 8;
    let data = &bytes[data_at + marker.len()..];
    if data.len() != expected {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "checkpoint data length {} does not match dims vocab={vocab} embed={embed} hidden={hidden} (expected {expected} bytes)",
                data.len()
            ),
        });
    }
    let mut offset = 0usize;
    for block in params.blocks_mut() {
        for x in block.iter_mut() {
            *x = f64::from_le_bytes(data[offset..offset + 8].try_into().unwrap());
            offset += 8;
        }
    }
    Ok((
        params,
        CheckpointMeta {
            world_hash,
            train_config,
        },
    ))
}

/// SHA-256 of an artifact's bytes, for binding reports to their inputs.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Write via a sibling temp file and rename, so an interrupted run never
/// leaves a partial artifact at the final path.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_encyclopedia;
    use crate::world::{World, WorldSpec};

    fn tiny_corpus() -> (World, Corpus) {
        let world = World::build(WorldSpec {
            atoms: 6,
            ..WorldSpec::default()
        })
        .unwrap();
        let corpus = generate_encyclopedia(&world, 300, 4, 5).unwrap();
        (world, corpus)
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (_, corpus) = tiny_corpus();
        let docs = corpus.token_sequences();
        let dims = LmDims {
            vocab: 14,
            embed: 8,
            hidden: 16,
        };
        let (params, log) = train::<f64>(&docs, dims, &tiny_cfg(0)).unwrap();
        assert!(log.epochs.is_empty());
        let init = LmParamsOf::<f64>::init(14, 8, 16, tiny_cfg(0).seed);
        assert_eq!(params, init);
    }

    #[test]
    fn training_beats_unigram_baseline() {
        let (_, corpus) = tiny_corpus();
        let docs = corpus.token_sequences();
        let dims = LmDims {
            vocab: 14,
            embed: 8,
            hidden: 32,
        };
        let (_, log) = train::<f64>(&docs, dims, &tiny_cfg(6)).unwrap();
        let baseline = unigram_entropy(&corpus);
        let final_val = log.epochs.last().unwrap().val_loss;
        assert!(
            final_val < baseline,
            "validation loss {final_val} did not beat unigram entropy {baseline}"
        );
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let (_, corpus) = tiny_corpus();
        let docs = corpus.token_sequences();
        let dims = LmDims {
            vocab: 14,
            embed: 8,
            hidden: 16,
        };
        let (p1, l1) = train::<f64>(&docs, dims, &tiny_cfg(2)).unwrap();
        let (p2, l2) = train::<f64>(&docs, dims, &tiny_cfg(2)).unwrap();
        assert_eq!(p1, p2);
        // Everything but wall time must match bit for bit.
        for (a, b) in l1.epochs.iter().zip(l2.epochs.iter()) {
            assert_eq!(
                (a.epoch, a.train_loss, a.val_loss, a.param_norm),
                (b.epoch, b.train_loss, b.val_loss, b.param_norm)
            );
        }
        let meta = CheckpointMeta {
            world_hash: "w".into(),
            train_config: Some(tiny_cfg(2)),
        };
        assert_eq!(
            checkpoint_bytes(&p1, &meta).unwrap(),
            checkpoint_bytes(&p2, &meta).unwrap()
        );
    }

    #[test]
    fn moving_average_train_loss_non_increasing() {
        let (_, corpus) = tiny_corpus();
        let docs = corpus.token_sequences();
        let dims = LmDims {
            vocab: 14,
            embed: 8,
            hidden: 32,
        };
        let (_, log) = train::<f64>(&docs, dims, &tiny_cfg(8)).unwrap();
        let losses: Vec<f64> = log.epochs.iter().map(|e| e.train_loss).collect();
        let window = 5usize.min(losses.len());
        let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        for i in window..losses.len() {
            assert!(
                avg(&losses[i + 1 - window..=i]) <= avg(&losses[i - window..i]) + 1e-9,
                "moving average increased at epoch {i}"
            );
        }
    }

    #[test]
    fn clipping_scales_to_exactly_unit_norm() {
        let mut g = GradientsOf::<f64>::zeros(4, 3, 2);
        for (i, blk) in g.blocks_mut().into_iter().enumerate() {
            for (j, x) in blk.iter_mut().enumerate() {
                *x = (i + 1) as f64 * 0.37 + j as f64 * 0.11;
            }
        }
        assert!(g.global_norm() > 1.0);
        clip_global_norm(&mut g, 1.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);

        let mut small = GradientsOf::<f64>::zeros(4, 3, 2);
        small.embedding[0] = 0.5;
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small.embedding[0], 0.5);
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let params = LmParamsOf::<f64>::init(14, 8, 16, 42);
        let meta = CheckpointMeta {
            world_hash: "abc123".into(),
            train_config: Some(TrainConfig::default()),
        };
        let bytes = checkpoint_bytes(&params, &meta).unwrap();
        let (back, meta2) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(params, back);
        assert_eq!(meta, meta2);
        assert_eq!(bytes, checkpoint_bytes(&back, &meta2).unwrap());
    }

    #[test]
    fn checkpoint_dim_mismatch_rejected() {
        let params = LmParamsOf::<f64>::init(14, 8, 16, 42);
        let meta = CheckpointMeta {
            world_hash: "abc123".into(),
            train_config: None,
        };
        let bytes = checkpoint_bytes(&params, &meta).unwrap();
        let text = String::from_utf8_lossy(&bytes[..bytes.len().min(200)]).to_string();
        assert!(text.contains("hidden=16"));
        let tampered = {
            let mut b = bytes.clone();
            let pos = b.windows(9).position(|w| w == b"hidden=16").unwrap();
            b[pos + 7] = b'3';
            b[pos + 8] = b'2';
            b
        };
        let err = checkpoint_from_bytes(&tampered).unwrap_err();
        assert!(err.to_string().contains("hidden=32"));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.val_fraction = 1.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::default();
        cfg.learning_rate = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn train_config_from_kv() {
        let cfg = TrainConfig::from_config("epochs=3\nlearning_rate=0.01\nseed=9\n").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.learning_rate, 0.01);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);
    }
}
