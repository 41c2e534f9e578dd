//! A testbed for studying how a small language model trained on synthetic
//! corpora comes to encode, and be steerable by, the latent state of the
//! agent that "wrote" each document.
//!
//! The pipeline: [`world`] defines a toy universe of propositions and exact
//! Bayesian oracles over latent author state; [`corpus`] samples labeled
//! training corpora from two generative processes (an author mixture and a
//! belief/desire/intention pipeline); [`lm`] is a from-scratch LSTM language
//! model with exact backpropagation-through-time gradients; [`train`]
//! optimizes it with Adam; [`analysis`] fits linear probes on hidden states
//! and performs class-mean steering interventions graded by the world oracle.

pub mod analysis;
pub mod config;
pub mod corpus;
pub mod harness;
pub mod lm;
pub mod scalar;
pub mod train;
pub mod world;

pub use scalar::Scalar;

/// Concrete 64-bit instantiations of the scalar-generic core. All training
/// and analysis paths use these; f32 variants exist for experimentation.
pub type LmParams = lm::LmParamsOf<f64>;
pub type HiddenState = lm::HiddenStateOf<f64>;
pub type Gradients = lm::GradientsOf<f64>;
pub type ProbeModel = analysis::ProbeModelOf<f64>;
pub type SteeringVector = analysis::SteeringVectorOf<f64>;

pub type LmParamsF32 = lm::LmParamsOf<f32>;
pub type HiddenStateF32 = lm::HiddenStateOf<f32>;

/// Crate-wide error type. Variants map onto the CLI exit statuses:
/// configuration/usage problems, data-binding (hash) mismatches, and
/// numerical failures are distinguished so the harness can report them.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("binding error: {0}")]
    Binding(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
