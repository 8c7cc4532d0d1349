//! Segmentation straight from sparse k-space samples.
//!
//! The pipeline is: synthetic cine phantoms ([`phantom`]) are pushed through
//! an MR forward model and undersampled line by line ([`kspace`]); the kept
//! samples form an unordered set that a latent-bottleneck encoder compresses
//! and a coordinate decoder turns into class probabilities ([`model`]).
//! [`train`] and [`metrics`] hold the losses, optimizer, training loop and
//! evaluation; [`io`], [`config`], [`viz`] and [`cli`] are the command-line
//! surface.

pub mod cli;
pub mod config;
pub mod io;
pub mod kspace;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod tensor;
pub mod train;
pub mod viz;
