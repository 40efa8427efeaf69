//! Goal-conditioned GRU encoder-decoder trajectory prediction with online
//! per-agent adaptation of a single layer.

pub mod dataio;
pub mod edn;
pub mod geom;
pub mod goalgen;
pub mod mekf;
pub mod metrics;
pub mod nn;
pub mod numkit;
pub mod runner;

pub use dataio::{Sample, ScenarioSpec, ScenarioTag, Trajectory};
pub use edn::{EdnParams, PredictionContext, PredictedTrajectory};
pub use goalgen::GoalProvider;
pub use mekf::{AdaptConfig, AdaptState, InnovationRecord};
pub use metrics::{AdeReport, SummaryRow};
pub use nn::LayerId;
pub use numkit::Mat;
