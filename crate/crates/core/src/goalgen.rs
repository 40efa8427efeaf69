//! Goal-state providers. The decoder consumes a 2-D ego-frame goal position;
//! these strategies supply it in place of a learned intention model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Sample, DT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalProvider {
    /// Ground-truth ego-frame position at `t + T_f`.
    Oracle,
    /// Current velocity extrapolated over the horizon.
    ConstVelocity,
    Zero,
}

#[derive(Debug, Error, PartialEq)]
pub enum GoalError {
    #[error("oracle goal needs future ground truth")]
    NoFuture,
    #[error("const-velocity goal needs a velocity in the history")]
    NoVelocity,
}

impl GoalProvider {
    pub fn name(self) -> &'static str {
        match self {
            GoalProvider::Oracle => "oracle",
            GoalProvider::ConstVelocity => "const_velocity",
            GoalProvider::Zero => "zero",
        }
    }

    /// Goal for `sample` with a prediction horizon of `horizon` steps.
    pub fn goal(self, sample: &Sample, horizon: usize) -> Result<[f64; 2], GoalError> {
        match self {
            GoalProvider::Oracle => {
                if sample.future.rows() < horizon || horizon == 0 {
                    return Err(GoalError::NoFuture);
                }
                let last = sample.future.row(horizon - 1);
                Ok([last[0], last[1]])
            }
            GoalProvider::ConstVelocity => {
                if sample.history.rows() == 0 || sample.history.cols() < 4 {
                    return Err(GoalError::NoVelocity);
                }
                let cur = sample.history.row(sample.history.rows() - 1);
                let seconds = horizon as f64 * DT;
                Ok([cur[2] * seconds, cur[3] * seconds])
            }
            GoalProvider::Zero => Ok([0.0, 0.0]),
        }
    }

    /// Fills the `goal` field of every sample.
    pub fn fill(self, samples: &mut [Sample], horizon: usize) -> Result<(), GoalError> {
        for s in samples.iter_mut() {
            s.goal = self.goal(s, horizon)?;
        }
        Ok(())
    }
}

impl fmt::Display for GoalProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GoalProvider {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(GoalProvider::Oracle),
            "const_velocity" => Ok(GoalProvider::ConstVelocity),
            "zero" => Ok(GoalProvider::Zero),
            _ => Err(format!("unknown goal provider '{s}'")),
        }
    }
}
