//! Estimation of population average treatment effects by combining a
//! randomized trial with a design-weighted real-world covariate sample.
//!
//! The trial identifies treatment effects internally but its participants
//! rarely resemble the target population; the real-world sample represents
//! the population (through its survey design weights) but lacks randomized
//! treatment. This crate reweights trial subjects so their covariate
//! moments match the design-weighted population moments (calibration
//! weighting), optionally augments the weighting with outcome regressions
//! for double robustness, and supports penalized sieve bases whose active
//! terms are selected by cross-validation. Variance comes from a two-sample
//! bootstrap or a kernel-based plug-in formula, and a Monte Carlo harness
//! reproduces the estimators' operating characteristics under controlled
//! misspecification.

pub mod basis;
pub mod calibration;
pub mod data;
pub mod error;
pub mod estimators;
pub mod exec;
pub mod linalg;
pub mod regression;
pub mod rng;
pub mod simulation;
pub mod variance;

pub use error::{Error, Result};
