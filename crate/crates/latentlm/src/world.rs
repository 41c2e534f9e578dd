//! The toy universe: atoms, propositions, archetype belief sets, the token
//! vocabulary, and two oracles that ground every downstream measurement —
//! a deterministic document-consistency classifier and exact Bayesian
//! posteriors over latent author state.
//!
//! Three author archetypes exist. A-type and B-type authors each hold a
//! consistent polarity assignment over all atoms; they disagree on a
//! configurable "contested" fraction of atoms. O-type authors assert
//! anything either archetype believes, contradictions included.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::KvConfig;
use crate::{Error, Result};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;

/// An indivisible fact slot; ids are dense in `0..K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Atom(pub u32);

/// An atom plus an asserted polarity. A K-atom world has exactly 2K
/// distinct propositions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Proposition {
    pub atom: Atom,
    pub polarity: bool,
}

/// Latent author class of the encyclopedia mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentType {
    A,
    B,
    O,
}

impl AgentType {
    pub const ALL: [AgentType; 3] = [AgentType::A, AgentType::B, AgentType::O];

    pub fn index(self) -> usize {
        match self {
            AgentType::A => 0,
            AgentType::B => 1,
            AgentType::O => 2,
        }
    }
}

impl std::fmt::Display for AgentType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AgentType::A => write!(f, "A"),
            AgentType::B => write!(f, "B"),
            AgentType::O => write!(f, "O"),
        }
    }
}

impl std::str::FromStr for AgentType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(AgentType::A),
            "B" | "b" => Ok(AgentType::B),
            "O" | "o" => Ok(AgentType::O),
            _ => Err(Error::Config(format!("unknown agent type {s:?}"))),
        }
    }
}

/// A consistent polarity assignment over all K atoms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BeliefSet {
    polarity: Vec<bool>,
}

impl BeliefSet {
    pub fn polarity_of(&self, atom: Atom) -> bool {
        self.polarity[atom.0 as usize]
    }

    pub fn contains(&self, p: Proposition) -> bool {
        self.polarity[p.atom.0 as usize] == p.polarity
    }

    pub fn len(&self) -> usize {
        self.polarity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.polarity.is_empty()
    }

    /// All propositions asserted by this belief set, in atom order.
    pub fn propositions(&self) -> Vec<Proposition> {
        self.polarity
            .iter()
            .enumerate()
            .map(|(i, &pol)| Proposition {
                atom: Atom(i as u32),
                polarity: pol,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tokenization {
    /// One token per proposition; a length-n document is n+2 tokens.
    Atomic,
    /// Templated surface form: each proposition is `SUBJ_k IS` / `SUBJ_k IS_NOT`.
    Surface,
}

impl std::str::FromStr for Tokenization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "atomic" => Ok(Tokenization::Atomic),
            "surface" => Ok(Tokenization::Surface),
            _ => Err(Error::Config(format!("unknown tokenization {s:?}"))),
        }
    }
}

impl std::fmt::Display for Tokenization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Tokenization::Atomic => write!(f, "atomic"),
            Tokenization::Surface => write!(f, "surface"),
        }
    }
}

/// Parameters fully determining a world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    /// Atom count K.
    pub atoms: u32,
    /// Fraction of atoms on which the two archetypes disagree.
    pub contested_fraction: f64,
    pub tokenization: Tokenization,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            atoms: 50,
            contested_fraction: 1.0,
            tokenization: Tokenization::Atomic,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn contested_count(&self) -> u32 {
        (self.contested_fraction * self.atoms as f64).round() as u32
    }

    pub fn validate(&self) -> Result<()> {
        if self.atoms == 0 {
            return Err(Error::Config("atom count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.contested_fraction) {
            return Err(Error::Config(format!(
                "contested_fraction must lie in [0,1], got {}",
                self.contested_fraction
            )));
        }
        if self.contested_fraction > 0.0 && self.contested_count() == 0 {
            return Err(Error::Config(format!(
                "contested_fraction {} rounds to zero contested atoms for K={}",
                self.contested_fraction, self.atoms
            )));
        }
        Ok(())
    }

    /// Load from a `key=value` config file (keys: atoms, contested_fraction,
    /// tokenization, seed).
    pub fn from_config(text: &str) -> Result<Self> {
        let kv = KvConfig::parse(text)?;
        let spec = WorldSpec {
            atoms: kv.require("atoms")?,
            contested_fraction: kv.require("contested_fraction")?,
            tokenization: kv.get_or("tokenization", Tokenization::Atomic)?,
            seed: kv.require("seed")?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_config_string(&self) -> String {
        format!(
            "atoms={}\ncontested_fraction={}\ntokenization={}\nseed={}\n",
            self.atoms, self.contested_fraction, self.tokenization, self.seed
        )
    }
}

/// Token table derived from a world spec. Ids are dense; BOS=0 and EOS=1
/// in both modes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokenization: Tokenization,
    atoms: u32,
}

// Surface-mode fixed token ids.
const SURFACE_IS: u32 = 2;
const SURFACE_IS_NOT: u32 = 3;
const SURFACE_SUBJ_BASE: u32 = 4;

impl Vocabulary {
    pub fn new(tokenization: Tokenization, atoms: u32) -> Self {
        Vocabulary { tokenization, atoms }
    }

    pub fn size(&self) -> usize {
        match self.tokenization {
            Tokenization::Atomic => 2 + 2 * self.atoms as usize,
            Tokenization::Surface => 4 + self.atoms as usize,
        }
    }

    pub fn tokenization(&self) -> Tokenization {
        self.tokenization
    }

    pub fn token_name(&self, id: u32) -> String {
        match id {
            BOS => "<s>".into(),
            EOS => "</s>".into(),
            _ => match self.tokenization {
                Tokenization::Atomic => {
                    let p = id - 2;
                    let atom = p / 2;
                    if p % 2 == 0 {
                        format!("P{atom}+")
                    } else {
                        format!("P{atom}-")
                    }
                }
                Tokenization::Surface => match id {
                    SURFACE_IS => "IS".into(),
                    SURFACE_IS_NOT => "IS_NOT".into(),
                    _ => format!("SUBJ_{}", id - SURFACE_SUBJ_BASE),
                },
            },
        }
    }

    /// Token realization of a proposition (1 token in atomic mode, 2 in
    /// surface mode). Realization is invertible.
    pub fn realize(&self, p: Proposition) -> Vec<u32> {
        match self.tokenization {
            Tokenization::Atomic => {
                vec![2 + 2 * p.atom.0 + if p.polarity { 0 } else { 1 }]
            }
            Tokenization::Surface => vec![
                SURFACE_SUBJ_BASE + p.atom.0,
                if p.polarity { SURFACE_IS } else { SURFACE_IS_NOT },
            ],
        }
    }

    /// Parse a delimiter-free token body back into propositions. `None`
    /// means the body is not a well-formed proposition sequence.
    pub fn parse_body(&self, body: &[u32]) -> Option<Vec<Proposition>> {
        match self.tokenization {
            Tokenization::Atomic => {
                let mut props = Vec::with_capacity(body.len());
                for &t in body {
                    if t < 2 || t >= self.size() as u32 {
                        return None;
                    }
                    let p = t - 2;
                    props.push(Proposition {
                        atom: Atom(p / 2),
                        polarity: p % 2 == 0,
                    });
                }
                Some(props)
            }
            Tokenization::Surface => {
                if body.len() % 2 != 0 {
                    return None;
                }
                let mut props = Vec::with_capacity(body.len() / 2);
                for pair in body.chunks_exact(2) {
                    let subj = pair[0];
                    let cop = pair[1];
                    if subj < SURFACE_SUBJ_BASE || subj >= self.size() as u32 {
                        return None;
                    }
                    let polarity = match cop {
                        SURFACE_IS => true,
                        SURFACE_IS_NOT => false,
                        _ => return None,
                    };
                    props.push(Proposition {
                        atom: Atom(subj - SURFACE_SUBJ_BASE),
                        polarity,
                    });
                }
                Some(props)
            }
        }
    }
}

/// Outcome of the document-consistency oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DocLabel {
    AConsistent,
    BConsistent,
    /// Every proposition lies in the A/B intersection (unreachable when
    /// every atom is contested).
    BothAb,
    /// Consistent with the union but with neither archetype alone.
    OOnly,
    IllFormed,
}

impl DocLabel {
    pub const ALL: [DocLabel; 5] = [
        DocLabel::AConsistent,
        DocLabel::BConsistent,
        DocLabel::BothAb,
        DocLabel::OOnly,
        DocLabel::IllFormed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DocLabel::AConsistent => "A_CONSISTENT",
            DocLabel::BConsistent => "B_CONSISTENT",
            DocLabel::BothAb => "BOTH_AB",
            DocLabel::OOnly => "O_ONLY",
            DocLabel::IllFormed => "ILL_FORMED",
        }
    }

    pub fn index(self) -> usize {
        match self {
            DocLabel::AConsistent => 0,
            DocLabel::BConsistent => 1,
            DocLabel::BothAb => 2,
            DocLabel::OOnly => 3,
            DocLabel::IllFormed => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Classification {
    pub label: DocLabel,
    /// Set only on O_ONLY: some proposition asserts a polarity held by
    /// neither archetype (possible only when agreed atoms exist).
    pub out_of_world: bool,
}

/// Prior over the four BDI latent combinations, in the order
/// (A,INFORM), (A,DECEIVE), (B,INFORM), (B,DECEIVE).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BdiPrior {
    pub weights: [f64; 4],
}

impl Default for BdiPrior {
    fn default() -> Self {
        BdiPrior {
            weights: [0.25; 4],
        }
    }
}

impl BdiPrior {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("BDI prior weights must be non-negative".into()));
        }
        if self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("BDI prior weights must not all be zero".into()));
        }
        Ok(())
    }
}

/// A fully built world: the spec, the two archetype belief sets, the
/// contested-atom mask, the vocabulary, and a content hash binding
/// downstream artifacts to this exact world.
#[derive(Debug, Clone)]
pub struct World {
    spec: WorldSpec,
    belief_a: BeliefSet,
    belief_b: BeliefSet,
    contested: Vec<bool>,
    vocab: Vocabulary,
    hash: String,
}

impl World {
    /// Construct the world deterministically from its spec: A's polarities
    /// are drawn uniformly per atom from the seeded stream; B equals A with
    /// polarity flipped on exactly the contested atoms.
    pub fn build(spec: WorldSpec) -> Result<World> {
        spec.validate()?;
        let k = spec.atoms as usize;
        let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
        let polarity_a: Vec<bool> = (0..k).map(|_| rng.gen::<bool>()).collect();

        // Contested subset via partial Fisher-Yates over atom ids.
        let n_contested = spec.contested_count() as usize;
        let mut ids: Vec<usize> = (0..k).collect();
        for i in 0..n_contested {
            let j = rng.gen_range(i..k);
            ids.swap(i, j);
        }
        let mut contested = vec![false; k];
        for &id in &ids[..n_contested] {
            contested[id] = true;
        }

        let polarity_b: Vec<bool> = polarity_a
            .iter()
            .zip(&contested)
            .map(|(&p, &c)| p ^ c)
            .collect();

        let mut world = World {
            vocab: Vocabulary::new(spec.tokenization, spec.atoms),
            belief_a: BeliefSet { polarity: polarity_a },
            belief_b: BeliefSet { polarity: polarity_b },
            contested,
            spec,
            hash: String::new(),
        };
        world.hash = world.compute_hash();
        Ok(world)
    }

    fn compute_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.manifest_body().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn belief_set(&self, which: AgentType) -> Option<&BeliefSet> {
        match which {
            AgentType::A => Some(&self.belief_a),
            AgentType::B => Some(&self.belief_b),
            AgentType::O => None,
        }
    }

    pub fn is_contested(&self, atom: Atom) -> bool {
        self.contested[atom.0 as usize]
    }

    /// Does the given author type assert this proposition?
    pub fn asserts(&self, t: AgentType, p: Proposition) -> bool {
        match t {
            AgentType::A => self.belief_a.contains(p),
            AgentType::B => self.belief_b.contains(p),
            AgentType::O => self.belief_a.contains(p) || self.belief_b.contains(p),
        }
    }

    /// The proposition set of an author type, in canonical (atom, polarity)
    /// order. |A| = |B| = K; |A∪B| = K + #contested.
    pub fn proposition_set(&self, t: AgentType) -> Vec<Proposition> {
        let k = self.spec.atoms;
        let mut props = Vec::new();
        for atom in 0..k {
            for polarity in [true, false] {
                let p = Proposition {
                    atom: Atom(atom),
                    polarity,
                };
                if self.asserts(t, p) {
                    props.push(p);
                }
            }
        }
        props
    }

    pub fn set_size(&self, t: AgentType) -> usize {
        let k = self.spec.atoms as usize;
        match t {
            AgentType::A | AgentType::B => k,
            AgentType::O => k + self.spec.contested_count() as usize,
        }
    }

    /// Deterministic consistency oracle over arbitrary token sequences.
    /// Total function: every failure mode is a label. When `expected_len`
    /// is given, a well-formed body must contain exactly that many
    /// propositions.
    pub fn classify(&self, tokens: &[u32], expected_len: Option<usize>) -> Classification {
        let ill = Classification {
            label: DocLabel::IllFormed,
            out_of_world: false,
        };
        if tokens.len() < 2 || tokens[0] != BOS || *tokens.last().unwrap() != EOS {
            return ill;
        }
        let body = &tokens[1..tokens.len() - 1];
        if body.contains(&BOS) || body.contains(&EOS) {
            return ill;
        }
        let props = match self.vocab.parse_body(body) {
            Some(p) => p,
            None => return ill,
        };
        if let Some(n) = expected_len {
            if props.len() != n {
                return ill;
            }
        }
        let in_a = props.iter().all(|&p| self.belief_a.contains(p));
        let in_b = props.iter().all(|&p| self.belief_b.contains(p));
        let label = match (in_a, in_b) {
            (true, true) => DocLabel::BothAb,
            (true, false) => DocLabel::AConsistent,
            (false, true) => DocLabel::BConsistent,
            (false, false) => DocLabel::OOnly,
        };
        let out_of_world = label == DocLabel::OOnly
            && props
                .iter()
                .any(|&p| !self.belief_a.contains(p) && !self.belief_b.contains(p));
        Classification { label, out_of_world }
    }

    /// Exact posterior P(author type | prefix) under the uniform type prior
    /// and uniform-without-replacement document sampling. Components are in
    /// [A, B, O] order and sum to 1.
    pub fn posterior(&self, prefix: &[Proposition]) -> Result<[f64; 3]> {
        let m = prefix.len();
        // A repeated proposition is impossible under without-replacement
        // sampling for every author type.
        for i in 0..m {
            for j in 0..i {
                if prefix[i] == prefix[j] {
                    return Err(Error::Input(
                        "prefix repeats a proposition; impossible under every author type".into(),
                    ));
                }
            }
        }
        let mut weights = [0.0f64; 3];
        for t in AgentType::ALL {
            let n = self.set_size(t);
            if m > n || !prefix.iter().all(|&p| self.asserts(t, p)) {
                continue;
            }
            // Ordered-prefix likelihood: product of 1/(n - i).
            let mut log_w = 0.0;
            for i in 0..m {
                log_w -= ((n - i) as f64).ln();
            }
            weights[t.index()] = log_w.exp() / 3.0;
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Input(
                "prefix impossible under all three author types".into(),
            ));
        }
        Ok(weights.map(|w| w / total))
    }

    /// Exact posterior over the four BDI latents given a prefix of asserted
    /// propositions, in (A,INFORM), (A,DECEIVE), (B,INFORM), (B,DECEIVE)
    /// order. The intention draws doc-length distinct atoms uniformly, so
    /// the atom-sequence likelihood is latent-independent and the posterior
    /// reduces to the prior restricted to consistent latents.
    pub fn bdi_posterior(&self, prefix: &[Proposition], prior: &BdiPrior) -> Result<[f64; 4]> {
        prior.validate()?;
        let m = prefix.len();
        for i in 0..m {
            for j in 0..i {
                if prefix[i].atom == prefix[j].atom {
                    return Err(Error::Input(
                        "prefix repeats an atom; impossible under every BDI latent".into(),
                    ));
                }
            }
        }
        if m > self.spec.atoms as usize {
            return Err(Error::Input("prefix longer than the atom universe".into()));
        }
        let mut weights = [0.0f64; 4];
        for (idx, (belief, deceive)) in [
            (AgentType::A, false),
            (AgentType::A, true),
            (AgentType::B, false),
            (AgentType::B, true),
        ]
        .into_iter()
        .enumerate()
        {
            let set = self.belief_set(belief).unwrap();
            let consistent = prefix
                .iter()
                .all(|&p| p.polarity == (set.polarity_of(p.atom) ^ deceive));
            if consistent {
                weights[idx] = prior.weights[idx];
            }
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Input(
                "prefix impossible under all four BDI latents".into(),
            ));
        }
        Ok(weights.map(|w| w / total))
    }

    fn manifest_body(&self) -> String {
        let bits = |v: &[bool]| -> String {
            v.iter().map(|&b| if b { '1' } else { '0' }).collect()
        };
        format!(
            "latentlm-world v1\natoms={}\ncontested_fraction={}\ntokenization={}\nseed={}\ncontested={}\nbelief_a={}\nbelief_b={}\n",
            self.spec.atoms,
            self.spec.contested_fraction,
            self.spec.tokenization,
            self.spec.seed,
            bits(&self.contested),
            bits(&self.belief_a.polarity),
            bits(&self.belief_b.polarity),
        )
    }

    /// Structured text manifest including the content hash.
    pub fn manifest(&self) -> String {
        format!("{}hash={}\n", self.manifest_body(), self.hash)
    }

    pub fn from_manifest(text: &str) -> Result<World> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != "latentlm-world v1" {
            return Err(Error::Parse {
                line: 1,
                msg: format!("bad world manifest header {header:?}"),
            });
        }
        let kv = KvConfig::parse(&text[header.len()..])?;
        let spec = WorldSpec {
            atoms: kv.require("atoms")?,
            contested_fraction: kv.require("contested_fraction")?,
            tokenization: kv.require("tokenization")?,
            seed: kv.require("seed")?,
        };
        let parse_bits = |key: &str| -> Result<Vec<bool>> {
            let raw = kv
                .get(key)
                .ok_or_else(|| Error::Config(format!("missing manifest key {key:?}")))?;
            if raw.len() != spec.atoms as usize {
                return Err(Error::Config(format!(
                    "manifest key {key:?} has length {}, expected {}",
                    raw.len(),
                    spec.atoms
                )));
            }
            Ok(raw.chars().map(|c| c == '1').collect())
        };
        let mut world = World {
            vocab: Vocabulary::new(spec.tokenization, spec.atoms),
            belief_a: BeliefSet {
                polarity: parse_bits("belief_a")?,
            },
            belief_b: BeliefSet {
                polarity: parse_bits("belief_b")?,
            },
            contested: parse_bits("contested")?,
            spec,
            hash: String::new(),
        };
        world.hash = world.compute_hash();
        let declared: String = kv.require("hash")?;
        if declared != world.hash {
            return Err(Error::Binding(format!(
                "world manifest hash mismatch: declared {declared}, computed {}",
                world.hash
            )));
        }
        Ok(world)
    }
}
