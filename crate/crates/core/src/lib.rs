//! One-stage deep clustering with a stable cluster-discrimination loss.
//!
//! An MLP encoder maps instances to unit-norm embeddings; one or more heads
//! keep unit-norm cluster centers and hard assignments. Training alternates
//! representation updates against frozen centers with constrained online
//! assignment and center updates that only look at each cluster's own
//! instances.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod centers;
pub mod checkpoint;
pub mod data_io;
pub mod discrimination;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod probes;
pub mod toy;
pub mod trainer;

pub use assignment::{AssignmentState, ConstraintConfig, ConstraintMode, ScoreKind};
pub use centers::{CenterAccumulator, ClusterCenters, SeedMethod};
pub use data_io::{AugmentConfig, Dataset};
pub use discrimination::{Prediction, SoftLabel, Temperature};
pub use encoder::{EncoderMlp, LrSchedule};
pub use error::{Result, SecuError};
pub use metrics::MetricsReport;
pub use numerics::Mat;
pub use trainer::{CenterMode, EpochLog, Model, TrainConfig};
