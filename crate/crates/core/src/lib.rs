//! Face-recognition attendance engine.

pub mod attendance;
pub mod classifier;
pub mod config;
pub mod demo;
pub mod docstore;
pub mod engine;
pub mod enrollment;
pub mod error;
pub mod haar;
pub mod image;
pub mod models;
pub mod neural;
pub mod siamese;
pub mod synth;
