//! Landmark-task multi-task learning for cross-lingual acoustic model
//! adaptation.
//!
//! The pipeline turns phone alignments into per-frame acoustic landmark
//! labels, trains a feedforward network with a phone head and a landmark head
//! on a source language, runs the landmark head over a target language to
//! produce confidence-scored pseudo-labels, and adapts the network to the
//! target language with the confidence-weighted multi-task loss.

pub mod cascade;
pub mod corpus;
pub mod experiment;
pub mod features;
pub mod landmarks;
pub mod net;
pub mod synth;
