//! Corpus generation and serialization.
//!
//! Two generative processes produce labeled training corpora: the
//! encyclopedia mixture (a uniform draw over the three author types, then
//! distinct propositions sampled uniformly without replacement from that
//! type's set) and a belief/desire/intention pipeline in which an agent's
//! archetype belief and an inform/deceive desire determine the asserted
//! polarity of each proposition.
//!
//! Latent labels are stored with every document but are never consumed by
//! training; they exist for probing and for grading oracles.
//!
//! Document streams are split from the master seed by fixing the ChaCha
//! stream id to `doc_index + 1`, so generation is order-independent and
//! embarrassingly parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::world::{AgentType, Atom, BdiPrior, Proposition, World, BOS, EOS};
use crate::{Error, Result};

const CORPUS_FORMAT: &str = "latentlm-corpus.v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Encyclopedia,
    Bdi,
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "encyclopedia" => Ok(Scenario::Encyclopedia),
            "bdi" => Ok(Scenario::Bdi),
            _ => Err(Error::Config(format!("unknown scenario {s:?}"))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scenario::Encyclopedia => write!(f, "encyclopedia"),
            Scenario::Bdi => write!(f, "bdi"),
        }
    }
}

/// Which archetype belief set a BDI agent holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Archetype {
    A,
    B,
}

impl Archetype {
    pub fn agent_type(self) -> AgentType {
        match self {
            Archetype::A => AgentType::A,
            Archetype::B => AgentType::B,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Desire {
    Inform,
    Deceive,
}

/// Latent state of a BDI author: the held belief set, the desire, and the
/// realized intention (ordered assertion plan). INFORM asserts the
/// believed polarity of every chosen atom; DECEIVE flips it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BdiLatent {
    pub belief: Archetype,
    pub desire: Desire,
    pub intention: Vec<Proposition>,
}

impl BdiLatent {
    /// Index into the canonical 4-way latent order
    /// (A,INFORM), (A,DECEIVE), (B,INFORM), (B,DECEIVE).
    pub fn class_index(&self) -> usize {
        let b = match self.belief {
            Archetype::A => 0,
            Archetype::B => 2,
        };
        let d = match self.desire {
            Desire::Inform => 0,
            Desire::Deceive => 1,
        };
        b + d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Latent {
    Author(AgentType),
    Bdi(BdiLatent),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_index: u64,
    pub tokens: Vec<u32>,
    pub latent: Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub scenario: Scenario,
    pub docs: u64,
    pub len: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bdi_prior: Option<BdiPrior>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub world_hash: String,
    pub config: GenConfig,
    pub documents: Vec<Document>,
}

impl Corpus {
    /// Refuse to pair this corpus with a world it was not generated from.
    pub fn bind(&self, world: &World) -> Result<()> {
        if self.world_hash != world.hash() {
            return Err(Error::Binding(format!(
                "corpus bound to world {} but given world {}",
                self.world_hash,
                world.hash()
            )));
        }
        Ok(())
    }

    pub fn token_sequences(&self) -> Vec<&[u32]> {
        self.documents.iter().map(|d| d.tokens.as_slice()).collect()
    }
}

/// Per-document RNG stream: same master seed, stream id `doc_index + 1`.
/// Stream 0 is reserved for corpus-level draws.
fn doc_rng(master_seed: u64, doc_index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(doc_index + 1);
    rng
}

/// First `k` elements of a seeded uniform permutation (partial
/// Fisher-Yates): an exact ordered sample without replacement.
fn sample_distinct<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        ids.swap(i, j);
    }
    ids.truncate(k);
    ids
}

fn realize_document(world: &World, props: &[Proposition]) -> Vec<u32> {
    let mut tokens = vec![BOS];
    for &p in props {
        tokens.extend(world.vocab().realize(p));
    }
    tokens.push(EOS);
    tokens
}

/// Sample an encyclopedia corpus: per document, a uniform author type,
/// then `doc_len` distinct propositions from that type's set, emitted in
/// sampled order and delimited with BOS/EOS.
pub fn generate_encyclopedia(
    world: &World,
    doc_count: u64,
    doc_len: usize,
    seed: u64,
) -> Result<Corpus> {
    if doc_len > world.set_size(AgentType::A) {
        return Err(Error::Config(format!(
            "doc_len {} exceeds archetype set size {}",
            doc_len,
            world.set_size(AgentType::A)
        )));
    }
    let documents: Vec<Document> = (0..doc_count)
        .into_par_iter()
        .map(|i| {
            let mut rng = doc_rng(seed, i);
            let author = AgentType::ALL[rng.gen_range(0..3)];
            let set = world.proposition_set(author);
            let props: Vec<Proposition> = sample_distinct(&mut rng, set.len(), doc_len)
                .into_iter()
                .map(|j| set[j])
                .collect();
            Document {
                doc_index: i,
                tokens: realize_document(world, &props),
                latent: Latent::Author(author),
            }
        })
        .collect();
    Ok(Corpus {
        world_hash: world.hash().to_string(),
        config: GenConfig {
            scenario: Scenario::Encyclopedia,
            docs: doc_count,
            len: doc_len,
            seed,
            bdi_prior: None,
        },
        documents,
    })
}

/// Sample a BDI corpus: per document, a (belief, desire) pair from the
/// prior, then an intention of `doc_len` distinct atoms whose asserted
/// polarities follow the desire. Requires agreed atoms to exist —
/// with every atom contested, flipping one archetype's polarities yields
/// exactly the other and deception is unidentifiable.
pub fn generate_bdi(
    world: &World,
    doc_count: u64,
    doc_len: usize,
    seed: u64,
    prior: &BdiPrior,
) -> Result<Corpus> {
    let spec = world.spec();
    if spec.contested_count() >= spec.atoms {
        return Err(Error::Config(
            "BDI generation requires contested_fraction < 1 (agreed atoms must exist)".into(),
        ));
    }
    if doc_len > spec.atoms as usize {
        return Err(Error::Config(format!(
            "doc_len {} exceeds atom count {}",
            doc_len, spec.atoms
        )));
    }
    prior.validate()?;
    let total: f64 = prior.weights.iter().sum();
    let cumulative: Vec<f64> = prior
        .weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / total;
            Some(*acc)
        })
        .collect();

    let documents: Vec<Document> = (0..doc_count)
        .into_par_iter()
        .map(|i| {
            let mut rng = doc_rng(seed, i);
            let u: f64 = rng.gen();
            let class = cumulative.iter().position(|&c| u < c).unwrap_or(3);
            let belief = if class < 2 { Archetype::A } else { Archetype::B };
            let desire = if class % 2 == 0 {
                Desire::Inform
            } else {
                Desire::Deceive
            };
            let set = world.belief_set(belief.agent_type()).unwrap();
            let flip = desire == Desire::Deceive;
            let intention: Vec<Proposition> =
                sample_distinct(&mut rng, spec.atoms as usize, doc_len)
                    .into_iter()
                    .map(|a| {
                        let atom = Atom(a as u32);
                        Proposition {
                            atom,
                            polarity: set.polarity_of(atom) ^ flip,
                        }
                    })
                    .collect();
            Document {
                doc_index: i,
                tokens: realize_document(world, &intention),
                latent: Latent::Bdi(BdiLatent {
                    belief,
                    desire,
                    intention,
                }),
            }
        })
        .collect();
    Ok(Corpus {
        world_hash: world.hash().to_string(),
        config: GenConfig {
            scenario: Scenario::Bdi,
            docs: doc_count,
            len: doc_len,
            seed,
            bdi_prior: Some(*prior),
        },
        documents,
    })
}

/// Fraction of a BDI document's assertions whose polarity contradicts the
/// stored belief archetype. Exactly 0 for INFORM, exactly 1 for DECEIVE.
pub fn flipped_assertion_rate(world: &World, doc: &Document) -> Option<f64> {
    let Latent::Bdi(latent) = &doc.latent else {
        return None;
    };
    let set = world.belief_set(latent.belief.agent_type()).unwrap();
    let flips = latent
        .intention
        .iter()
        .filter(|p| p.polarity != set.polarity_of(p.atom))
        .count();
    Some(flips as f64 / latent.intention.len().max(1) as f64)
}

#[derive(Serialize, Deserialize)]
struct CorpusManifest {
    format: String,
    world_hash: String,
    config: GenConfig,
}

/// One manifest record, then one record per document, as JSON lines.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    write_corpus(corpus, &mut out)?;
    crate::train::atomic_write(path, &out)
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut w: W) -> Result<()> {
    let manifest = CorpusManifest {
        format: CORPUS_FORMAT.to_string(),
        world_hash: corpus.world_hash.clone(),
        config: corpus.config.clone(),
    };
    writeln!(
        w,
        "{}",
        serde_json::to_string(&manifest).map_err(|e| Error::Input(e.to_string()))?
    )?;
    for doc in &corpus.documents {
        writeln!(
            w,
            "{}",
            serde_json::to_string(doc).map_err(|e| Error::Input(e.to_string()))?
        )?;
    }
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    read_corpus(std::io::BufReader::new(file))
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<Corpus> {
    let mut lines = r.lines();
    let first = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty corpus file".into(),
    })??;
    let manifest: CorpusManifest = serde_json::from_str(&first).map_err(|e| Error::Parse {
        line: 1,
        msg: format!("bad corpus manifest: {e}"),
    })?;
    if manifest.format != CORPUS_FORMAT {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported corpus format {:?}", manifest.format),
        });
    }
    let mut documents = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 2,
            msg: format!("bad document record: {e}"),
        })?;
        documents.push(doc);
    }
    if documents.len() as u64 != manifest.config.docs {
        return Err(Error::Parse {
            line: documents.len() + 1,
            msg: format!(
                "corpus truncated: manifest declares {} documents, found {}",
                manifest.config.docs,
                documents.len()
            ),
        });
    }
    Ok(Corpus {
        world_hash: manifest.world_hash,
        config: manifest.config,
        documents,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{DocLabel, Tokenization, WorldSpec};

    fn default_world() -> World {
        World::build(WorldSpec::default()).unwrap()
    }

    fn half_world(k: u32, seed: u64) -> World {
        World::build(WorldSpec {
            atoms: k,
            contested_fraction: 0.5,
            tokenization: Tokenization::Atomic,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn encyclopedia_corpus_shape() {
        let w = default_world();
        let c = generate_encyclopedia(&w, 200, 10, 1).unwrap();
        assert_eq!(c.documents.len(), 200);
        for d in &c.documents {
            assert_eq!(d.tokens.len(), 12);
            assert_eq!(d.tokens[0], BOS);
            assert_eq!(*d.tokens.last().unwrap(), EOS);
        }
    }

    #[test]
    fn empty_corpus_is_valid() {
        let w = default_world();
        let c = generate_encyclopedia(&w, 0, 10, 1).unwrap();
        assert!(c.documents.is_empty());
        let mut buf = Vec::new();
        write_corpus(&c, &mut buf).unwrap();
        let back = read_corpus(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn doc_len_too_large_rejected() {
        let w = default_world();
        assert!(generate_encyclopedia(&w, 1, 51, 1).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let w = default_world();
        let c1 = generate_encyclopedia(&w, 50, 10, 3).unwrap();
        let c2 = generate_encyclopedia(&w, 50, 10, 3).unwrap();
        assert_eq!(c1, c2);
        let mut b1 = Vec::new();
        let mut b2 = Vec::new();
        write_corpus(&c1, &mut b1).unwrap();
        write_corpus(&c2, &mut b2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn classification_never_contradicts_latent() {
        let w = default_world();
        let c = generate_encyclopedia(&w, 500, 10, 7).unwrap();
        for d in &c.documents {
            let label = w.classify(&d.tokens, Some(10)).label;
            match d.latent {
                Latent::Author(AgentType::A) => {
                    assert!(matches!(label, DocLabel::AConsistent | DocLabel::BothAb))
                }
                Latent::Author(AgentType::B) => {
                    assert!(matches!(label, DocLabel::BConsistent | DocLabel::BothAb))
                }
                Latent::Author(AgentType::O) => assert!(matches!(
                    label,
                    DocLabel::OOnly
                        | DocLabel::AConsistent
                        | DocLabel::BConsistent
                        | DocLabel::BothAb
                )),
                _ => panic!("unexpected latent"),
            }
        }
    }

    #[test]
    fn latent_frequencies_near_uniform() {
        let w = default_world();
        let c = generate_encyclopedia(&w, 10_000, 10, 11).unwrap();
        let mut counts = [0usize; 3];
        for d in &c.documents {
            if let Latent::Author(t) = d.latent {
                counts[t.index()] += 1;
            }
        }
        for n in counts {
            let f = n as f64 / 10_000.0;
            assert!((0.31..=0.36).contains(&f), "frequency {f} out of band");
        }
    }

    #[test]
    fn o_docs_rarely_single_type_consistent() {
        // An O-authored length-10 document is all-A with probability
        // prod_{i<10} (50-i)/(100-i) = C(50,10)/C(100,10) ~ 5.9e-4.
        // Monte Carlo over 10^6 draws agrees with the closed form.
        let w = default_world();
        let mut closed_form = 1.0;
        for i in 0..10u32 {
            closed_form *= (50 - i) as f64 / (100 - i) as f64;
        }
        let union = w.proposition_set(AgentType::O);
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let trials = 1_000_000usize;
        let mut all_a = 0usize;
        for _ in 0..trials {
            let ids = sample_distinct(&mut rng, union.len(), 10);
            if ids
                .iter()
                .all(|&j| w.belief_set(AgentType::A).unwrap().contains(union[j]))
            {
                all_a += 1;
            }
        }
        let mc = all_a as f64 / trials as f64;
        // 3-sigma band around the closed form.
        let sigma = (closed_form * (1.0 - closed_form) / trials as f64).sqrt();
        assert!(
            (mc - closed_form).abs() < 3.0 * sigma + 1e-6,
            "Monte Carlo {mc} vs closed form {closed_form}"
        );
    }

    #[test]
    fn bdi_requires_agreed_atoms() {
        let w = default_world(); // f = 1
        assert!(generate_bdi(&w, 10, 5, 1, &BdiPrior::default()).is_err());
    }

    #[test]
    fn bdi_inform_and_deceive_polarities() {
        let w = half_world(50, 5);
        let c = generate_bdi(&w, 300, 10, 9, &BdiPrior::default()).unwrap();
        for d in &c.documents {
            let rate = flipped_assertion_rate(&w, d).unwrap();
            let Latent::Bdi(latent) = &d.latent else {
                unreachable!()
            };
            match latent.desire {
                Desire::Inform => assert_eq!(rate, 0.0),
                Desire::Deceive => assert_eq!(rate, 1.0),
            }
            // Tokens re-parse to the stored intention.
            let body = &d.tokens[1..d.tokens.len() - 1];
            assert_eq!(w.vocab().parse_body(body).unwrap(), latent.intention);
        }
    }

    #[test]
    fn corpus_round_trip_is_byte_identical() {
        let w = half_world(8, 2);
        let c = generate_bdi(&w, 3, 4, 13, &BdiPrior::default()).unwrap();
        let mut b1 = Vec::new();
        write_corpus(&c, &mut b1).unwrap();
        let back = read_corpus(std::io::Cursor::new(b1.clone())).unwrap();
        assert_eq!(back, c);
        let mut b2 = Vec::new();
        write_corpus(&back, &mut b2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn truncated_corpus_names_failing_record() {
        let w = default_world();
        let c = generate_encyclopedia(&w, 5, 10, 1).unwrap();
        let mut buf = Vec::new();
        write_corpus(&c, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let truncated: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        let err = read_corpus(std::io::Cursor::new(truncated.into_bytes())).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn corrupt_record_names_line() {
        let w = default_world();
        let c = generate_encyclopedia(&w, 3, 10, 1).unwrap();
        let mut buf = Vec::new();
        write_corpus(&c, &mut buf).unwrap();
        let mut text = String::from_utf8(buf).unwrap();
        text = text.replacen("\"tokens\"", "\"tokenz\"", 1);
        let err = read_corpus(std::io::Cursor::new(text.into_bytes())).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn world_binding_enforced() {
        let w1 = default_world();
        let w2 = World::build(WorldSpec {
            seed: 1,
            ..WorldSpec::default()
        })
        .unwrap();
        let c = generate_encyclopedia(&w1, 2, 10, 1).unwrap();
        assert!(c.bind(&w1).is_ok());
        assert!(matches!(c.bind(&w2), Err(Error::Binding(_))));
    }
}
