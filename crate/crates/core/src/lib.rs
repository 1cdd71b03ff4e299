//! Multimodal visual question answering on synthetic scenes: encoders,
//! query alignment, selective-state-space fusion, multi-task heads, data
//! generation and the training/evaluation harness.

pub mod cifr;
pub mod config;
pub mod data;
pub mod encoders;
mod error;
pub mod ffae;
pub mod fvta;
pub mod harness;
pub mod model;
pub mod nn;
pub mod par;
pub mod params;

pub use config::{ModelConfig, PartnerMix, Precision, Toggles, TrainConfig};
pub use error::{Error, Result};
