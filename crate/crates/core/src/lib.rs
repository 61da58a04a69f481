//! Hierarchy-constrained node classification on k-nearest-neighbor graphs.
//!
//! A graph-attention network scores every class for every node; a max
//! constraint layer then lifts each class score to the maximum over its
//! subtree, so predictions never rank a class above one of its ancestors.

pub mod autodiff;
pub mod cli;
pub mod constraint;
pub mod dataio;
pub mod error;
pub mod gat;
pub mod hierarchy;
pub mod knngraph;
pub mod metrics;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use hierarchy::{ClassId, Hierarchy};
