//! Shortcut identification and debiased training for small text classifiers.
//!
//! The pipeline: train a plain classifier, attribute its predictions to
//! tokens with Integrated Gradients, score each example's reliance on its
//! top tokens with a bias-only model, then retrain with those tokens masked
//! in proportion to that score under a Jensen–Shannon consistency penalty.

pub mod analysis;
pub mod attribution;
pub mod dataset;
pub mod masking;
pub mod models;
pub mod shortcut;
pub mod tensor;
pub mod training;
