//! Similarity-matching networks with local learning rules.
//!
//! This crate implements nonnegative similarity matching (NSM): neural
//! network layers whose activities solve a per-sample nonnegative quadratic
//! program and whose weights learn through Hebbian/anti-Hebbian updates that
//! only ever touch quantities local to a synapse. On top of the core layer it
//! provides convolutional weight sharing, supervised/semi-supervised stacking
//! of layers, linear and k-means readouts for evaluating learned features,
//! and an experiment that transplants similarity-matched filters into a small
//! backprop-trained convolutional classifier.
//!
//! The `simatch` binary drives training, evaluation, pre-training, and
//! benchmarking from flat key=value config files; see the crate README.

pub mod config;
pub mod conv;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod layer;
pub mod linalg;
pub mod pretrain;
pub mod readout;
pub mod stack;

pub mod checkpoint;
pub mod commands;

pub use error::{Error, Result};
