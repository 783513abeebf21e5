//! Scenario-tree quantization of continuous-state stochastic processes.
//!
//! The crate builds finite scenario trees for Gaussian and lognormal
//! processes (Monte Carlo, stage-wise optimal, and joint forward-backward
//! quantization), computes the nested (process) distance between finite
//! trees exactly, evaluates computable lower/upper bounds on it, and
//! benchmarks the resulting trees on a multistage inventory-control problem
//! with closed-form reference solutions.

pub mod lp;
pub mod models;
pub mod nested;
pub mod normal;
pub mod inventory;
pub mod quantize;
pub mod rng;
pub mod transport;
pub mod tree;
