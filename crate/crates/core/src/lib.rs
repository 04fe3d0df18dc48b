//! Low-dimensional state and action representations for Markov decision
//! processes, learned by low-Tucker-rank estimation of a kernelized
//! transition tensor, plus the clustering machinery that turns those
//! representations into discrete state/action abstractions.
//!
//! Module map:
//!
//! * [`tensor`] – dense `Matrix`/`Tensor3` and the multilinear primitives.
//! * [`linalg`] – Jacobi eigensolver and matrix functions.
//! * [`decomposition`] – truncated SVD, HOSVD, HOOI, factor extraction.
//! * [`features`] – Gaussian kernel, random Fourier features, whitening.
//! * [`measure`] – reference measures and behavior policies.
//! * [`mdp`] – tabular block MDPs, the controlled SDE, trajectories, exact tensors.
//! * [`embedding`] – importance-weighted mean embedding and the embedding model.
//! * [`abstraction`] – weighted k-means, partition loss, misclassification,
//!   discrete MDP fitting and policy-evaluation gap.
//! * [`baselines`] – vanilla and top-r covariance estimators.
//! * [`io`] – binary model/reference files.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod abstraction;
pub mod baselines;
pub mod decomposition;
pub mod embedding;
pub mod error;
pub mod features;
pub mod io;
pub mod linalg;
pub mod mdp;
pub mod measure;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Matrix, Mode, SpectralNormOptions, Tensor3};
