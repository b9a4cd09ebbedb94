//! Hierarchical coarse-to-fine sign spotting.
//!
//! The crate covers the full pipeline: a small reverse-mode tensor engine, a
//! 3D CNN feature pyramid, the hierarchical temporal head, the training
//! objective and window sampler, decoding of per-frame probabilities into
//! sign intervals, and the IoU-matched F1 metric.
//!
//! ```
//! use hsi3d::metric::{evaluate, MetricConfig};
//! use hsi3d::SignInterval;
//!
//! let gt = vec![SignInterval::new("v", 0, 10, 20)];
//! let pred = vec![SignInterval::new("v", 0, 15, 25)];
//! let report = evaluate(&pred, &gt, &MetricConfig::default());
//! assert!((report.f1 - 3.0 / 13.0).abs() < 1e-12);
//! ```

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod graph;
pub mod head;
pub mod kernels;
pub mod metric;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod video;

pub use error::{Error, Result};
pub use head::{Level, LevelLogits};
pub use metric::{SignInterval, SpottingReport};
pub use tensor::{Parameter, Real, Tensor};
