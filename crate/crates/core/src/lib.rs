//! Few-shot node classification with dual-level mixup.
//!
//! The pipeline: a parameter-free propagation `P = Ă^ℓ Z` ([`graph`]), a
//! trainable linear head refined by a degree prior ([`encoder`]), episodic
//! N-way K-shot sampling ([`episodes`]), within-task and across-task mixup
//! ([`mixup`]), and prototype-based training and evaluation ([`protonet`]).
//! [`theory`] evaluates the generalization quantities of the method
//! numerically. [`data`] handles the on-disk formats and synthetic
//! benchmarks, and [`pipeline`] wires a [`config::RunConfig`] into full
//! train, evaluate and verify runs.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod graph;
pub mod mixup;
pub mod pipeline;
pub mod protonet;
pub mod seed;
pub mod theory;

pub use error::{Error, Result};
