//! Single-scale grid object detector for cars, people and drivers.
//!
//! The crate is CPU-only and deterministic. It provides the layer stack,
//! box encoding, label-smoothed detection loss, hard example mining, a
//! desk-scale trainer and the evaluation metrics, plus PPM/annotation I/O
//! and a command-line front end.

pub mod boxes;
pub mod cli;
pub mod eval;
pub mod io;
pub mod loss;
pub mod mining;
pub mod network;
pub mod tensor;
pub mod trainer;
