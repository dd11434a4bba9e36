//! Toy manipulation tasks with scripted experts.
//!
//! Every task uses planar velocity actions: the first two action dimensions
//! are a displacement for the agent, clipped to [`MAX_SPEED`] per step.
//! Experts change their commanded velocity by at most [`MAX_ACCEL`] per step,
//! so consecutive expert actions satisfy a single consistency bound on the
//! continuous dimensions.

mod dataset;
mod geometry;
mod pick;
mod push;
mod reach;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use dataset::{
    dataset_consistency_report, generate_demos, scale_dataset_discrete, ConsistencyReport, Dataset,
    DatasetMeta, Normalizer, Sample,
};
pub use pick::PickDiscrete;
pub use push::PushL;
pub use reach::Reach2dBimodal;

use crate::chunk::ActionChunk;
use crate::error::{Error, Result};

/// Per-step displacement ceiling for the agent.
pub const MAX_SPEED: f64 = 0.05;
/// Per-step change of the expert's commanded velocity. This is the
/// consistency bound of generated data on the continuous dimensions.
pub const MAX_ACCEL: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvName {
    #[serde(rename = "reach2d_bimodal")]
    Reach2dBimodal,
    #[serde(rename = "pushL")]
    PushL,
    #[serde(rename = "pick_discrete")]
    PickDiscrete,
}

impl EnvName {
    pub const ALL: [EnvName; 3] = [EnvName::Reach2dBimodal, EnvName::PushL, EnvName::PickDiscrete];

    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::Reach2dBimodal => "reach2d_bimodal",
            EnvName::PushL => "pushL",
            EnvName::PickDiscrete => "pick_discrete",
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reach2d_bimodal" | "reach2d" => Ok(EnvName::Reach2dBimodal),
            "pushL" | "push_l" | "pushl" => Ok(EnvName::PushL),
            "pick_discrete" | "pick" => Ok(EnvName::PickDiscrete),
            other => Err(Error::invalid(format!("unknown environment `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub values: Vec<f64>,
    pub t: usize,
}

/// A simulated task. Stepping is deterministic given the state and action;
/// all randomness is drawn at `reset` from the episode seed.
pub trait Environment: Send {
    fn name(&self) -> EnvName;
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn discrete_mask(&self) -> Vec<bool>;
    fn episode_cap(&self) -> usize;

    fn reset(&mut self, seed: u64) -> Observation;
    fn observe(&self) -> Observation;
    fn step(&mut self, action: &[f64]) -> Observation;

    /// Task score in `[0, 1]` for the current state.
    fn score(&self) -> f64;

    /// Whether the scripted expert considers the task finished.
    fn solved(&self) -> bool {
        self.score() >= 1.0
    }

    /// Scripted expert action for the current state.
    fn expert_action(&self) -> Vec<f64>;

    /// Behavioral mode a predicted chunk (environment units) commits to,
    /// for tasks that have discrete modes.
    fn mode_of(&self, _chunk: &ActionChunk) -> Option<usize> {
        None
    }
}

pub fn make_env(name: EnvName, seed: u64) -> Box<dyn Environment> {
    let mut env: Box<dyn Environment> = match name {
        EnvName::Reach2dBimodal => Box::new(Reach2dBimodal::new()),
        EnvName::PushL => Box::new(PushL::new()),
        EnvName::PickDiscrete => Box::new(PickDiscrete::new()),
    };
    env.reset(seed);
    env
}

/// Scales `v` down to norm `max` if it is longer.
pub(crate) fn clip_norm(v: [f64; 2], max: f64) -> [f64; 2] {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if n > max {
        [v[0] * max / n, v[1] * max / n]
    } else {
        v
    }
}

/// Acceleration-limited velocity command: move `current` towards `desired`
/// by at most [`MAX_ACCEL`].
pub(crate) fn accel_limited(current: [f64; 2], desired: [f64; 2]) -> [f64; 2] {
    let d = clip_norm([desired[0] - current[0], desired[1] - current[1]], MAX_ACCEL);
    clip_norm([current[0] + d[0], current[1] + d[1]], MAX_SPEED)
}

/// Desired velocity that reaches `target` and stops there without
/// overshooting under the acceleration limit.
pub(crate) fn braking_velocity(from: [f64; 2], target: [f64; 2]) -> [f64; 2] {
    let e = [target[0] - from[0], target[1] - from[1]];
    let dist = (e[0] * e[0] + e[1] * e[1]).sqrt();
    if dist < 1e-9 {
        return [0.0, 0.0];
    }
    let speed = MAX_SPEED.min((2.0 * MAX_ACCEL * dist).sqrt() * 0.9).min(dist);
    [e[0] / dist * speed, e[1] / dist * speed]
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
