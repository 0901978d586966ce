mod binfmt;
pub mod cli;
pub mod data;
pub mod error;
pub mod gbp;
pub mod gradcheck;
pub mod kmeans;
pub mod linalg;
pub mod nn;
pub mod pca;
pub mod report;
pub mod trainer;
pub mod tree;
pub mod tsne;

pub use error::{Error, Result};
