//! Iterative differential diagnosis with a driver that coordinates a
//! history-taking simulator, a knowledge retrieval agent and a diagnosis
//! strategy agent.
//!
//! Metrics are generic over [`Scalar`] and embedding math over [`Real`]; the
//! aliases below fix the common choices.

pub mod error;
pub mod history;
pub mod ingest;
pub mod llm;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod prompts;
pub mod retrieval;
pub mod runner;
pub mod scalar;
pub mod scenario;
pub mod strategy;
pub mod trace;

pub use error::{Error, Result};
pub use scalar::{Rational, Real, Scalar};

pub type Report = metrics::RunReport<f64>;
pub type Report32 = metrics::RunReport<f32>;
pub type ExactReport = metrics::RunReport<Rational>;

pub type Embedding = llm::EmbeddingVector<f64>;
pub type Embedding32 = llm::EmbeddingVector<f32>;

pub type ExampleStore = strategy::ExampleStore<f64>;
pub type ExampleStore32 = strategy::ExampleStore<f32>;
