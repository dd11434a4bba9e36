use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{accel_limited, braking_velocity, clip_norm, dist, EnvName, Environment, Observation, MAX_SPEED};
use crate::chunk::ActionChunk;

pub const GOALS: [[f64; 2]; 2] = [[-0.6, 0.6], [0.6, 0.6]];
pub const GOAL_RADIUS: f64 = 0.1;
const START: [f64; 2] = [0.0, -0.6];
const START_JITTER: f64 = 0.05;
const EPISODE_CAP: usize = 60;

/// Point agent that must end the episode at one of two goals. The expert
/// commits to either goal with equal probability, so demonstrations are
/// bimodal.
#[derive(Debug, Clone)]
pub struct Reach2dBimodal {
    pos: [f64; 2],
    vel: [f64; 2],
    expert_goal: usize,
    t: usize,
}

impl Reach2dBimodal {
    pub fn new() -> Self {
        Reach2dBimodal {
            pos: START,
            vel: [0.0; 2],
            expert_goal: 0,
            t: 0,
        }
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    pub fn nearest_goal(&self) -> usize {
        if dist(self.pos, GOALS[0]) <= dist(self.pos, GOALS[1]) {
            0
        } else {
            1
        }
    }
}

impl Default for Reach2dBimodal {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for Reach2dBimodal {
    fn name(&self) -> EnvName {
        EnvName::Reach2dBimodal
    }

    fn obs_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn discrete_mask(&self) -> Vec<bool> {
        vec![false, false]
    }

    fn episode_cap(&self) -> usize {
        EPISODE_CAP
    }

    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.pos = [
            START[0] + rng.random_range(-START_JITTER..START_JITTER),
            START[1] + rng.random_range(-START_JITTER..START_JITTER),
        ];
        self.vel = [0.0; 2];
        self.expert_goal = usize::from(rng.random_bool(0.5));
        self.t = 0;
        self.observe()
    }

    fn observe(&self) -> Observation {
        Observation {
            values: self.pos.to_vec(),
            t: self.t,
        }
    }

    fn step(&mut self, action: &[f64]) -> Observation {
        let d = clip_norm([action[0], action[1]], MAX_SPEED);
        self.pos = [self.pos[0] + d[0], self.pos[1] + d[1]];
        self.vel = d;
        self.t += 1;
        self.observe()
    }

    fn score(&self) -> f64 {
        if GOALS.iter().any(|&g| dist(self.pos, g) <= GOAL_RADIUS) {
            1.0
        } else {
            0.0
        }
    }

    fn solved(&self) -> bool {
        dist(self.pos, GOALS[self.expert_goal]) < 0.01 && self.vel[0].hypot(self.vel[1]) < 1e-3
    }

    fn expert_action(&self) -> Vec<f64> {
        let desired = braking_velocity(self.pos, GOALS[self.expert_goal]);
        accel_limited(self.vel, desired).to_vec()
    }

    /// Goal the summed displacement of the chunk heads towards; a chunk
    /// that barely moves commits to the nearest goal.
    fn mode_of(&self, chunk: &ActionChunk) -> Option<usize> {
        let mut h = [0.0; 2];
        for row in chunk.rows() {
            let d = clip_norm([row[0], row[1]], MAX_SPEED);
            h[0] += d[0];
            h[1] += d[1];
        }
        if h[0].hypot(h[1]) < 0.02 {
            return Some(self.nearest_goal());
        }
        let cos = |g: [f64; 2]| {
            let e = [g[0] - self.pos[0], g[1] - self.pos[1]];
            (e[0] * h[0] + e[1] * h[1]) / (e[0].hypot(e[1]).max(1e-9) * h[0].hypot(h[1]))
        };
        Some(if cos(GOALS[0]) >= cos(GOALS[1]) { 0 } else { 1 })
    }
}
