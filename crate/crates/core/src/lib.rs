//! Shift-robust node classification on graphs.
//!
//! The library couples a classification GCN with an unsupervised
//! modularity-clustering GCN. The two are trained jointly in an episode
//! loop: the cluster model is regularized toward the labeled source
//! distribution, the classifier is refit on pseudo-labeled samples drawn
//! from the cluster model, and the loop stops when validation micro-F1
//! stalls. Open-set shift (unseen classes at test time) and close-set
//! shift (label drift between source and target graphs) are both covered
//! by the same machinery.
//!
//! Module map:
//! - [`graphstore`]: graph data model, on-disk formats, adjacency
//!   normalization, shift-scenario construction (open-set masks, temporal
//!   splits, synthetic SBM drift).
//! - [`autodiff`]: reverse-mode tape over dense matrices and sparse-dense
//!   products, with a finite-difference checker.
//! - [`gnn`]: 2-layer GCN parameters, forward pass, Adam optimizer.
//! - [`clustering`]: exact modularity and its differentiable relaxation.
//! - [`alignment`]: KL cost matrix between classes and clusters, rectangular
//!   linear sum assignment, pseudo-label mapping.
//! - [`trainer`]: pretraining, episode updates, the full optimization loop
//!   and its ablations.
//! - [`evalbench`]: metrics, benchmark runners, reports, embedding export.

pub mod alignment;
pub mod autodiff;
pub mod clustering;
pub mod error;

pub mod gnn;
pub mod graphstore;
pub mod linalg;


pub use error::{Error, Result};
