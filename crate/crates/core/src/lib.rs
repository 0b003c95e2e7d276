//! Core library for parrotgate: a memorization probe for generative
//! models of parametric sketches.
//!
//! The toolkit deliberately overfits a small masked autoencoder on a
//! training corpus, calibrates a reconstruction-loss threshold on that
//! corpus, and then flags any sample whose loss falls at or below the
//! threshold as likely regurgitated training content.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod loss;
pub mod mae;
pub mod pipeline;
pub mod rng;
pub mod sketch;
pub mod tensor;
pub mod train;
