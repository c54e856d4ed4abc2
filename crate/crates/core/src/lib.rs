//! Privacy-aware feature transformation.
//!
//! The pipeline runs in two phases:
//!
//! 1. [`search`]: three cascading value-learning agents (head feature, operator,
//!    tail feature) grow a feature set one transformation at a time, rewarded by
//!    downstream utility gain. Every episode's final feature set is serialized
//!    as a reverse-Polish token string ([`expr`]) and scored for utility and
//!    sensitive-attribute leakage ([`eval`]), producing a knowledge base.
//! 2. [`gen`]: a sequence-to-sequence variational autoencoder with a latent
//!    split into a utility half and a privacy half is trained on that knowledge
//!    base. New feature sets are decoded from the utility half only.
//!
//! [`data`] holds the tabular dataset type and its loader.

pub mod data;
pub mod eval;
pub mod expr;
pub mod gen;
pub mod optim;
pub mod search;

pub(crate) mod util;

pub use data::{Dataset, SplitPair, TaskKind};
pub use expr::{FeatureExpr, FeatureSetSequence, OperatorKind};
