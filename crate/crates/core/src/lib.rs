//! Heterogeneous-model dataset condensation: synthesize a small learnable
//! image set whose training gradients match real data under two structurally
//! different models at once, balanced by a gradient-magnitude accumulator
//! and tied together by mutual distillation over spatially and semantically
//! aligned features.

pub mod artifact;
pub mod commands;
pub mod condense;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gbm;
pub mod models;
pub mod ssd;
