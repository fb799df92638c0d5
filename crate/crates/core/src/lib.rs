//! Cough-audio TB screening pipeline.
//!
//! The crate covers the full experimental loop: acoustic feature extraction
//! (mel / linear filterbank / MFCC), a reverse-mode autodiff substrate, three
//! classifiers (logistic regression, BiLSTM, BiLSTM with attention), a
//! combined weighted cross-entropy + GE2E training objective, patient-wise
//! cross-validation with EER thresholding and fold ensembling, greedy
//! sequential forward search over frequency bins, and model introspection
//! via idealized inputs and attention traces.
//!
//! A synthetic corpus generator with planted, recoverable class signal makes
//! the whole pipeline testable end to end without any clinical data.

pub mod dataset;
pub mod dsp;
pub mod error;
pub mod harness;
pub mod introspection;
pub mod models;
pub mod objectives;
pub mod rng;
pub mod selection;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Bindings, EvalMode, Graph, Tensor};
