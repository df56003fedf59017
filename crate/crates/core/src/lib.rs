//! Linear-Gaussian β-VAE and λβ-VAE toolkit.
//!
//! The crate covers the closed-form generative model ([`gaussian`]), the
//! stationarity fixed-point dynamics and their collapse diagnostics
//! ([`stationarity`]), closed-form objectives with analytic gradients and an
//! AdamW driver ([`objective`], [`optim`]), analytic SAP / MIG / I_m scores
//! ([`metrics`], [`assignment`]), a seeded (β, λ) sweep harness ([`sweep`])
//! and augmented Tchebycheff selection over sweep aggregates ([`select`]).

pub mod assignment;
pub mod error;
pub mod gaussian;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod seed;
pub mod select;
pub mod spd;
pub mod spectral;
pub mod stationarity;
pub mod sweep;

pub use error::{Error, Result};
pub use gaussian::{GenerativeConfig, JointCovariance, ModelParams, MutualInformation};
pub use metrics::MetricReport;
pub use spd::SpdMatrix;

pub type Matrix = nalgebra::DMatrix<f64>;
