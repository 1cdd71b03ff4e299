//! Training, evaluation, checkpoints and experiment drivers.

pub mod checkpoint;
pub mod eval;
pub mod experiments;
pub mod flops;
pub mod gradcam;
pub mod gradsuite;
pub mod train;

pub use eval::{evaluate, format_table, parse_table, MetricsReport};
pub use train::{train, TrainOptions, TrainReport, Trained};
