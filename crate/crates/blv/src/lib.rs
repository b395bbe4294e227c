//! Time-dependent beta latent variable (BLV) models for bounded panel data.
//!
//! This crate fits low-dimensional latent factor models to panels of
//! proportions such as age-specific mortality rates. Each observed value
//! `q_{x,i,t}` in `(0,1)` is modelled with a beta distribution parameterised
//! by its mean and a common precision, where the logit mean is a linear
//! function of a country-level latent state that evolves over time as a
//! stationary AR(1) process. The crate provides:
//!
//! * panel loading, validation and exploratory summaries ([`data`]),
//! * the beta-proportion likelihood and the special functions behind it
//!   ([`betaprop`], [`special`]),
//! * posterior density and analytic gradients for the BLV model and a
//!   Gaussian factor baseline ([`model`], [`bfa`]),
//! * a self-contained No-U-Turn sampler with adaptive step size and
//!   diagonal mass matrix ([`sampler`], [`nuts`], [`diagnostics`]),
//! * rotation/sign identification of factor draws and posterior summaries
//!   ([`postprocess`]),
//! * marginal-likelihood model selection and fit evaluation ([`selection`]),
//! * a synthetic-panel simulator and recovery-study harness ([`simulator`]),
//! * run archives and the command-line front end ([`archive`], [`cli`]).
//!
//! All randomness flows through explicitly seeded ChaCha generators, so
//! every operation is reproducible given the seed recorded in run manifests.

pub mod archive;
pub mod bfa;
pub mod betaprop;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod nuts;
pub mod postprocess;
pub mod sampler;
pub mod selection;
pub mod simulator;
pub mod special;

pub use error::{Error, Result};
