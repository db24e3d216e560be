//! Supply-chain analytics for residential mortgage-backed securities.
//!
//! The crate covers the full path from prospectus text to performance models:
//!
//! * [`extraction`] pulls `(role, institution)` pairs out of prospectus summaries,
//! * [`corpus`] turns those pairs into a filtered, weighted, year-sliced corpus,
//! * [`topics`] fits static LDA and the dynamic topic model over the slices,
//! * [`performance`] labels securities from basis-point payment summaries,
//! * [`features`] builds the security, prospectus and topic feature tiers,
//! * [`lasso`] fits L1-penalized logistic models with prospectus-grouped CV,
//! * [`toxicity`] labels institutions and communities from curated evidence,
//! * [`synth`] generates corpora and outcomes with planted ground truth,
//! * [`pipeline`] wires the stages together behind a single config.

pub mod corpus;
pub mod error;
pub mod extraction;
pub mod features;
pub mod lasso;
pub mod performance;
pub mod pipeline;
pub mod synth;
pub mod topics;
pub mod toxicity;

pub use error::{Error, Result};
