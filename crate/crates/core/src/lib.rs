//! Structurally regularized dynamic dictionary learning (sr-DDL) with a
//! recurrent attention predictor.
//!
//! The library factorizes per-subject sequences of dynamic functional
//! correlation matrices into a shared orthonormal basis and nonnegative
//! time-varying loadings, regularized by anatomical graph Laplacians, while
//! jointly training an LSTM + attention network that maps the loading
//! trajectories to multidimensional clinical scores. A synthetic generative
//! benchmark, convex-QP inference for unseen subjects, cross-validation
//! harness and a CLI sit on top.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod predictor;
pub mod optimizer;
pub mod qp;
pub mod srddl;
pub mod synth;
pub mod linalg;

pub use error::{Error, Result};
