//! End-to-end engine for imputing missing values in mixed-type tabular data.
//!
//! The pipeline represents a table as a bipartite sample-feature graph,
//! refines node and edge embeddings by message passing, learns a variational
//! posterior over sample latents with a dual decoder (adjacency + features),
//! and imputes missing cells as edge-wise regressions. Alongside the model
//! live the experiment tools needed to validate it: mechanism-controlled
//! missingness injection (MCAR/MAR/MNAR), mean/mode and KNN baselines, and
//! per-column error reporting.

pub mod baselines;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod init;
pub mod metrics;
pub mod missing;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vgae;

pub use error::{Error, Result};
