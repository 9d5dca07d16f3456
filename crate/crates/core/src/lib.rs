//! Keypoint-based sign language translation.
//!
//! The pipeline turns pose-estimator keypoints into normalized per-frame
//! features ([`keypoints`]), samples fixed-length frame subsequences
//! ([`sampler`]), and translates them with recurrent or Transformer
//! encoder-decoders ([`models`]) built on a small reverse-mode autodiff engine
//! ([`autodiff`]). [`trainer`] holds the optimization recipe, [`metrics`] the
//! translation scores and [`corpus`] the synthetic data generator and loaders.

pub mod autodiff;
pub mod corpus;
pub mod keypoints;
pub mod metrics;
pub mod models;
pub mod sampler;
pub mod trainer;
