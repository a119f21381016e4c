//! Cost-aware allocation of extractive-QA queries between a main model and
//! a pool of experts.
//!
//! A two-headed rejector scores every agent for the start and end token of
//! the answer span. It is trained offline on logs of precomputed agent
//! predictions by minimizing a cost-weighted comp-sum surrogate, and at
//! inference time routes each query to the agent with the best score.
//!
//! The [`oracle`] module carries finite synthetic worlds with exact
//! conditional error tables, so the Bayes rule, the learned rejector and the
//! surrogate consistency bound can all be checked without estimation error.

// `!(x >= 0.0)` deliberately rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod oracle;
pub mod par;
pub mod rejector;
pub mod training;
pub mod types;

pub use error::{Error, Result};
pub use par::Execution;
pub use types::{AgentId, AgentPredictionRecord, CostParams, CostVector, Head, SpanPair, ValidationMode};
