//! Complex event processing of streaming ECG and blood-pressure samples.
//!
//! Samples travel as line-delimited JSON through an embedded topic broker,
//! are grouped into event-time windows, and feed two continuous jobs: a
//! naive Bayes heart-failure risk score and a stepped stress index driven by
//! heart-rate variability.

pub mod broker;
pub mod config;
pub mod delineate;
pub mod dsp;
pub mod risk;
pub mod runtime;
pub mod stress;
pub mod synth;
pub mod windowing;
pub mod wire;
