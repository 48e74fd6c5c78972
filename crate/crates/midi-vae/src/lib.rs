//! Multi-track symbolic music autoencoder with a shared latent space and
//! a latent style head.
//!
//! The crate is organized as a pipeline:
//!
//! * [`midi_io`] — Standard MIDI File parsing and writing
//! * [`roll_codec`] — pitch/velocity/instrument roll representation
//! * [`nn`] — differentiable compute core (GRUs, losses, ADAM)
//! * [`model`] — the three-stream recurrent VAE and its training loop
//! * [`style_ops`] — latent style swap, interpolation, medleys, mixtures
//! * [`eval`] — independent style classifiers and transfer reports
//! * [`checkpoint`] — binary container for trained weights

pub mod checkpoint;
pub mod eval;
pub mod midi_io;
pub mod model;
pub mod nn;
pub mod rng;
pub mod roll_codec;
pub mod style_ops;
