//! Emotional-support dialogue pipeline: discourse windows, bidirectional
//! cognitive knowledge extraction, special-token linearization, prompted
//! generation and automatic evaluation.

pub mod backend;
pub mod bck;
pub mod corpus;
pub mod discourse;
pub mod linearize;
pub mod metrics;
pub mod runner;
