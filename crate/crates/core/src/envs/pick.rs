use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{accel_limited, braking_velocity, clip_norm, dist, EnvName, Environment, Observation, MAX_SPEED};

pub const GOAL: [f64; 2] = [0.6, 0.6];
pub const GOAL_RADIUS: f64 = 0.08;
/// The gripper catches the object only if it closes this close to it.
pub const GRASP_RADIUS: f64 = 0.05;
const WORKSPACE: f64 = 1.0;
const EPISODE_CAP: usize = 100;
/// Expert closes or opens the gripper once within this distance.
const ACT_DIST: f64 = 0.02;

/// Carry an object to a goal with a binary gripper. Action is
/// `(vx, vy, grip)` where `grip > 0` commands a closed gripper. A grasp
/// happens on an open-to-closed transition within [`GRASP_RADIUS`];
/// opening releases the object where the agent stands.
#[derive(Debug, Clone)]
pub struct PickDiscrete {
    agent: [f64; 2],
    vel: [f64; 2],
    object: [f64; 2],
    closed: bool,
    holding: bool,
    t: usize,
}

impl PickDiscrete {
    pub fn new() -> Self {
        PickDiscrete {
            agent: [0.0; 2],
            vel: [0.0; 2],
            object: [-0.5, -0.5],
            closed: false,
            holding: false,
            t: 0,
        }
    }

    pub fn holding(&self) -> bool {
        self.holding
    }

    fn delivered(&self) -> bool {
        !self.holding && dist(self.object, GOAL) <= GOAL_RADIUS
    }
}

impl Default for PickDiscrete {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for PickDiscrete {
    fn name(&self) -> EnvName {
        EnvName::PickDiscrete
    }

    fn obs_dim(&self) -> usize {
        5
    }

    fn action_dim(&self) -> usize {
        3
    }

    fn discrete_mask(&self) -> Vec<bool> {
        vec![false, false, true]
    }

    fn episode_cap(&self) -> usize {
        EPISODE_CAP
    }

    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.agent = [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)];
        loop {
            self.object = [rng.random_range(-0.7..0.5), rng.random_range(-0.7..0.5)];
            if dist(self.object, GOAL) >= 0.5 && dist(self.object, self.agent) >= 0.3 {
                break;
            }
        }
        self.vel = [0.0; 2];
        self.closed = false;
        self.holding = false;
        self.t = 0;
        self.observe()
    }

    fn observe(&self) -> Observation {
        Observation {
            values: vec![
                self.agent[0],
                self.agent[1],
                self.object[0],
                self.object[1],
                if self.closed { 1.0 } else { -1.0 },
            ],
            t: self.t,
        }
    }

    fn step(&mut self, action: &[f64]) -> Observation {
        let d = clip_norm([action[0], action[1]], MAX_SPEED);
        let next = [
            (self.agent[0] + d[0]).clamp(-WORKSPACE, WORKSPACE),
            (self.agent[1] + d[1]).clamp(-WORKSPACE, WORKSPACE),
        ];
        self.vel = [next[0] - self.agent[0], next[1] - self.agent[1]];
        self.agent = next;
        if self.holding {
            self.object = self.agent;
        }
        let close = action[2] > 0.0;
        if close && !self.closed && !self.holding && dist(self.agent, self.object) <= GRASP_RADIUS {
            self.holding = true;
            self.object = self.agent;
        } else if !close && self.holding {
            self.holding = false;
        }
        self.closed = close;
        self.t += 1;
        self.observe()
    }

    fn score(&self) -> f64 {
        if self.delivered() {
            1.0
        } else {
            0.0
        }
    }

    fn expert_action(&self) -> Vec<f64> {
        let (target, grip) = if self.holding {
            let release = dist(self.agent, GOAL) < ACT_DIST;
            (GOAL, if release { -1.0 } else { 1.0 })
        } else if self.delivered() {
            (self.agent, -1.0)
        } else {
            let grasp = dist(self.agent, self.object) < ACT_DIST;
            (self.object, if grasp { 1.0 } else { -1.0 })
        };
        let v = accel_limited(self.vel, braking_velocity(self.agent, target));
        vec![v[0], v[1], grip]
    }
}
