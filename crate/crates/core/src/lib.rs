//! Word-level Integrated Gradients attribution for essay scoring models, plus
//! a battery of attribution-guided perturbation tests and robustness metrics.

pub mod attribution;
pub mod cli;
pub mod corpus;
pub mod embedding;
pub mod metrics;
pub mod perturb;
pub mod report;
pub mod scorer;
pub mod synthetic;
