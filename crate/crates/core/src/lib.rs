//! Item-to-item collaborative filtering from implicit binary feedback.
//!
//! The model has two parts: per-item marginal like-probabilities with
//! Beta posteriors, and pairwise associations measured as weights of
//! evidence with discretized posteriors inferred from 2x2 contingency
//! counts. Training compiles both into compact per-item top-f lists
//! that answer "likely items" and "similar items" queries; an
//! evaluation harness scores ranked lists with a half-life utility
//! metric.

pub mod corpus;
pub mod evaluator;
pub mod marginals;
pub mod model;
pub mod recommender;
pub mod trainer;
pub mod woe;

pub use corpus::{load_dataset, PreferenceDataset, SplitSpec, UserRecord};
pub use evaluator::{cfaccuracy, run_protocol, EvalConfig, EvalReport};
pub use marginals::{beta_median, count_marginals, MarginalTable};
pub use model::{load_model, save_model, Association, CfwModel};
pub use recommender::{recommend, similar_items, Algorithm, Query};
pub use trainer::{build_model, TrainConfig};
pub use woe::{approximate_posterior, ContingencyTable, DiscretePosterior};
