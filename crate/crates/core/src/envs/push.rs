use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::geometry::LShape;
use super::{accel_limited, braking_velocity, clip_norm, dist, EnvName, Environment, Observation, MAX_SPEED};

pub const GOAL: [f64; 2] = [0.3, 0.3];
pub const AGENT_RADIUS: f64 = 0.05;
/// Coverage at which the score saturates at 1.
pub const FULL_COVERAGE: f64 = 0.9;
const WORKSPACE: f64 = 1.2;
const EPISODE_CAP: usize = 150;
/// Per-axis placement tolerance of the expert.
const AXIS_TOL: f64 = 0.01;
const REVERSE_TOL: f64 = 0.025;
/// Gap between the staging point and the contact position.
const STAGING: f64 = 0.15;
/// Lateral slack around the pushing lane.
const LANE_TOL: f64 = 0.04;
/// Motion within this cosine of the inward contact normal drags the block
/// along; shallower contacts slide.
const STICK_COS: f64 = 0.5;

/// Disk agent pushing an L-shaped block onto a fixed target region. The
/// block translates quasi-statically: when the agent would penetrate it,
/// the block is displaced along the agent's motion until contact resolves.
#[derive(Debug, Clone)]
pub struct PushL {
    shape: LShape,
    agent: [f64; 2],
    vel: [f64; 2],
    block: [f64; 2],
    t: usize,
}

impl PushL {
    pub fn new() -> Self {
        PushL {
            shape: LShape::standard(),
            agent: [0.0, -0.9],
            vel: [0.0; 2],
            block: [-0.4, 0.3],
            t: 0,
        }
    }

    pub fn block(&self) -> [f64; 2] {
        self.block
    }

    pub fn agent(&self) -> [f64; 2] {
        self.agent
    }

    pub fn coverage(&self) -> f64 {
        self.shape.overlap(self.block, GOAL) / self.shape.area()
    }

    fn clearance(&self, p: [f64; 2]) -> f64 {
        self.shape.sdf(self.block, p)
    }

    /// Unit gradient of the clearance at `p`, pointing away from the block.
    fn outward_normal(&self, p: [f64; 2]) -> [f64; 2] {
        let h = 1e-7;
        let gx = self.clearance([p[0] + h, p[1]]) - self.clearance([p[0] - h, p[1]]);
        let gy = self.clearance([p[0], p[1] + h]) - self.clearance([p[0], p[1] - h]);
        let n = gx.hypot(gy);
        if n > 0.0 {
            [gx / n, gy / n]
        } else {
            [0.0, 0.0]
        }
    }

    fn segment_clear(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        (0..=20).all(|i| {
            let f = i as f64 / 20.0;
            let p = [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])];
            self.clearance(p) >= AGENT_RADIUS + 0.01
        })
    }

    /// Axis the expert is currently pushing along and the signed distance
    /// left. Overshoot is only corrected past a wider tolerance.
    fn expert_axis(&self) -> Option<(usize, f64)> {
        (0..2).find_map(|axis| {
            let d = GOAL[axis] - self.block[axis];
            (d > AXIS_TOL || d < -REVERSE_TOL).then_some((axis, d))
        })
    }

    /// The expert pushes along x against the left face, then along y
    /// against the bottom face. Both faces are flat, so a straight push
    /// moves the block exactly along the axis.
    fn expert_velocity(&self) -> [f64; 2] {
        let c = self.block;
        let (lo, hi) = self.shape.extent();
        let Some((axis, remaining)) = self.expert_axis() else {
            return [0.0, 0.0];
        };
        let other = 1 - axis;
        let sign = remaining.signum();
        // Face the agent pushes on, as an offset from the centroid.
        let face = if sign > 0.0 { lo[axis] } else { hi[axis] };
        let contact = c[axis] + face - sign * AGENT_RADIUS;
        let span = self.shape.face_span(axis, sign);
        let lane = c[other] + 0.5 * (span.0 + span.1);

        let behind = (self.agent[axis] - contact) * sign;
        let off_lane = lane - self.agent[other];
        let on_face = self.agent[other] > c[other] + span.0 + 0.03 && self.agent[other] < c[other] + span.1 - 0.03;
        let near = behind > -0.03 && on_face;
        let lined_up = off_lane.abs() < LANE_TOL && behind > -STAGING - 0.05;
        if behind < 0.01 && (near || lined_up) {
            let mut v = [0.0; 2];
            let gap = (-behind).max(0.0);
            v[axis] = braking_velocity([0.0, 0.0], [remaining.abs() + gap, 0.0])[0] * sign;
            if !near {
                v[other] = 0.5 * off_lane;
            }
            return v;
        }
        let mut staging = [0.0; 2];
        staging[axis] = contact - sign * STAGING;
        staging[other] = lane;
        if self.segment_clear(self.agent, staging) {
            return braking_velocity(self.agent, staging);
        }
        // Circle around the block towards the staging point.
        let rel = [self.agent[0] - c[0], self.agent[1] - c[1]];
        let ring = self.shape.radius() + AGENT_RADIUS + 0.06;
        let phi_p = rel[1].atan2(rel[0]);
        let phi_q = (staging[1] - c[1]).atan2(staging[0] - c[0]);
        let mut delta = phi_q - phi_p;
        while delta > PI {
            delta -= 2.0 * PI;
        }
        while delta < -PI {
            delta += 2.0 * PI;
        }
        let phi_w = phi_p + delta.signum() * delta.abs().min(0.5);
        let w = [c[0] + ring * phi_w.cos(), c[1] + ring * phi_w.sin()];
        let to_w = [w[0] - self.agent[0], w[1] - self.agent[1]];
        let n = to_w[0].hypot(to_w[1]).max(1e-9);
        [to_w[0] / n * MAX_SPEED, to_w[1] / n * MAX_SPEED]
    }
}

impl Default for PushL {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for PushL {
    fn name(&self) -> EnvName {
        EnvName::PushL
    }

    fn obs_dim(&self) -> usize {
        4
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
        loop {
            let r = rng.random_range(0.6..0.8);
            let theta = rng.random_range(PI..1.5 * PI);
            self.block = [GOAL[0] + r * theta.cos(), GOAL[1] + r * theta.sin()];
            if self.coverage() == 0.0 {
                break;
            }
        }
        loop {
            self.agent = [rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)];
            if self.clearance(self.agent) > AGENT_RADIUS + 0.1 {
                break;
            }
        }
        self.vel = [0.0; 2];
        self.t = 0;
        self.observe()
    }

    fn observe(&self) -> Observation {
        Observation {
            values: vec![self.agent[0], self.agent[1], self.block[0], self.block[1]],
            t: self.t,
        }
    }

    fn step(&mut self, action: &[f64]) -> Observation {
        let d = clip_norm([action[0], action[1]], MAX_SPEED);
        let next = [
            (self.agent[0] + d[0]).clamp(-WORKSPACE, WORKSPACE),
            (self.agent[1] + d[1]).clamp(-WORKSPACE, WORKSPACE),
        ];
        let moved = dist(next, self.agent);
        if self.clearance(next) < AGENT_RADIUS && moved > 0.0 {
            let dir = [(next[0] - self.agent[0]) / moved, (next[1] - self.agent[1]) / moved];
            let n = self.outward_normal(next);
            if -(n[0] * dir[0] + n[1] * dir[1]) > STICK_COS {
                // Sticking contact: the block travels along the agent's motion.
                let penetrates = |t: f64| {
                    let b = [self.block[0] + t * dir[0], self.block[1] + t * dir[1]];
                    self.shape.sdf(b, next) < AGENT_RADIUS
                };
                let (mut lo, mut hi) = (0.0, (moved + AGENT_RADIUS) / STICK_COS);
                for _ in 0..50 {
                    let mid = 0.5 * (lo + hi);
                    if penetrates(mid) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                self.block = [self.block[0] + hi * dir[0], self.block[1] + hi * dir[1]];
            } else {
                // Sliding contact: the block is pushed out along the normal.
                for _ in 0..8 {
                    let depth = AGENT_RADIUS - self.clearance(next);
                    if depth <= 0.0 {
                        break;
                    }
                    let n = self.outward_normal(next);
                    self.block = [self.block[0] - n[0] * (depth + 1e-9), self.block[1] - n[1] * (depth + 1e-9)];
                }
            }
        }
        self.vel = [next[0] - self.agent[0], next[1] - self.agent[1]];
        self.agent = next;
        self.t += 1;
        self.observe()
    }

    fn score(&self) -> f64 {
        (self.coverage() / FULL_COVERAGE).min(1.0)
    }

    fn solved(&self) -> bool {
        self.expert_axis().is_none()
    }

    fn expert_action(&self) -> Vec<f64> {
        accel_limited(self.vel, self.expert_velocity()).to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_action_scores_zero() {
        let mut env = PushL::new();
        env.reset(4);
        for _ in 0..EPISODE_CAP {
            env.step(&[0.0, 0.0]);
        }
        assert_eq!(env.score(), 0.0);
    }

    #[test]
    fn pushing_moves_block_along_motion() {
        let mut env = PushL::new();
        env.reset(0);
        env.block = [0.0, 0.0];
        // Agent just left of the long bar, moving right.
        env.agent = [-0.193_75 - AGENT_RADIUS - 0.01, -0.1];
        for _ in 0..4 {
            env.step(&[0.05, 0.0]);
        }
        assert!(env.block[0] > 0.1 && env.block[1] == 0.0, "{:?}", env.block);
        assert!(env.clearance(env.agent) >= AGENT_RADIUS - 1e-9);
    }

    #[test]
    fn expert_mostly_succeeds() {
        let mut env = PushL::new();
        let mut ok = 0;
        for seed in 0..40 {
            env.reset(seed);
            for _ in 0..EPISODE_CAP {
                let a = env.expert_action();
                env.step(&a);
            }
            if env.score() >= 1.0 {
                ok += 1;
            }
        }
        assert!(ok >= 38, "{ok}/40");
    }
}
