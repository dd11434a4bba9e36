//! DDPM forward/reverse steps, full and truncated denoising, and the
//! closed-loop rollouts: warm-started real-time iteration (RTI) and the
//! chunked diffusion-policy baseline.
//!
//! Forward: `A_k = sqrt(abar_k) A_0 + sqrt(1 - abar_k) eps`.
//! Reverse: `A_{k-1} = (A_k - beta_k / sqrt(1 - abar_k) eps_theta) / sqrt(alpha_k) + sigma_k Y`.

use std::collections::VecDeque;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::chunk::ActionChunk;
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::net::{DenoiserModel, Scratch};
use crate::policy::Policy;
use crate::schedule::NoiseSchedule;

pub const DEFAULT_DISCRETE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Reverse steps applied to the warm-start guess, strictly descending.
    pub rti_steps: Vec<usize>,
    /// Skip `sigma_k Y` on the last listed step.
    pub deterministic_final: bool,
    /// Forward-noise the guess to the first listed step before denoising.
    pub renoise: bool,
    /// Divide discrete dimensions of the guess by `discrete_factor`.
    pub scale_guess: bool,
    pub discrete_factor: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            rti_steps: vec![3, 2, 1],
            deterministic_final: true,
            renoise: false,
            scale_guess: false,
            discrete_factor: DEFAULT_DISCRETE_FACTOR,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        validate_steps(&self.rti_steps, total_steps)?;
        if !(self.discrete_factor > 0.0) || !self.discrete_factor.is_finite() {
            return Err(Error::invalid("discrete_factor must be positive"));
        }
        Ok(())
    }

    /// Short stable digest of every field.
    pub fn hash(&self) -> String {
        short_hash(&format!("{self:?}"))
    }
}

pub fn short_hash(s: &str) -> String {
    hex::encode(&Sha256::digest(s.as_bytes())[..8])
}

/// `[k, k-1, ..., 1]`.
pub fn steps_from(k: usize) -> Vec<usize> {
    (1..=k).rev().collect()
}

pub fn validate_steps(steps: &[usize], total_steps: usize) -> Result<()> {
    if steps.is_empty() {
        return Err(Error::invalid("step list is empty"));
    }
    if steps.iter().any(|&k| k == 0 || k > total_steps) {
        return Err(Error::invalid(format!("step list {steps:?} leaves 1..={total_steps}")));
    }
    if steps.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::invalid(format!("step list {steps:?} is not strictly descending")));
    }
    Ok(())
}

/// Supplier of the reverse-step noise `Y`.
pub trait NoiseSource {
    fn fill(&mut self, k: usize, out: &mut [f64]);
}

/// Standard normal draws from an RNG.
pub struct Gaussian<'a, R: ?Sized>(pub &'a mut R);

impl<R: Rng + ?Sized> NoiseSource for Gaussian<'_, R> {
    fn fill(&mut self, _k: usize, out: &mut [f64]) {
        for v in out {
            *v = self.0.sample(StandardNormal);
        }
    }
}

/// Wraps a source and keeps every draw, keyed by step.
pub struct Recorder<N> {
    pub inner: N,
    pub draws: Vec<(usize, Vec<f64>)>,
}

impl<N: NoiseSource> NoiseSource for Recorder<N> {
    fn fill(&mut self, k: usize, out: &mut [f64]) {
        self.inner.fill(k, out);
        self.draws.push((k, out.to_vec()));
    }
}

/// Replays recorded draws; steps without a recording get zero noise.
pub struct Replay<'a>(pub &'a [(usize, Vec<f64>)]);

impl NoiseSource for Replay<'_> {
    fn fill(&mut self, k: usize, out: &mut [f64]) {
        match self.0.iter().find(|(s, _)| *s == k) {
            Some((_, y)) => out.copy_from_slice(y),
            None => out.fill(0.0),
        }
    }
}

/// Anything that predicts the noise in a chunk at step `k`.
pub trait NoisePredictor {
    fn chunk_len(&self) -> usize;
    fn total_steps(&self) -> usize;
    fn predict(&self, chunk: &[f64], k: usize, obs: &[f64], scratch: &mut Scratch, out: &mut [f64]) -> Result<()>;
}

impl NoisePredictor for DenoiserModel {
    fn chunk_len(&self) -> usize {
        self.layout().chunk_len()
    }

    fn total_steps(&self) -> usize {
        self.layout().total_steps
    }

    fn predict(&self, chunk: &[f64], k: usize, obs: &[f64], scratch: &mut Scratch, out: &mut [f64]) -> Result<()> {
        self.forward_into(chunk, k, obs, scratch, out)
    }
}

/// Reverse-chain runner with reusable buffers.
pub struct Denoiser<'a> {
    model: &'a dyn NoisePredictor,
    schedule: &'a NoiseSchedule,
    scratch: Scratch,
    eps: Vec<f64>,
    noise: Vec<f64>,
}

impl<'a> Denoiser<'a> {
    pub fn new(model: &'a dyn NoisePredictor, schedule: &'a NoiseSchedule) -> Result<Self> {
        if model.total_steps() != schedule.total_steps() {
            return Err(Error::invalid(format!(
                "model expects {} steps, schedule has {}",
                model.total_steps(),
                schedule.total_steps()
            )));
        }
        let n = model.chunk_len();
        Ok(Denoiser {
            model,
            schedule,
            scratch: Scratch::default(),
            eps: vec![0.0; n],
            noise: vec![0.0; n],
        })
    }

    /// One reverse step in place. `y = None` means zero noise.
    pub fn step(&mut self, state: &mut [f64], k: usize, obs: &[f64], y: Option<&[f64]>) -> Result<()> {
        self.schedule.check_step(k)?;
        self.model.predict(state, k, obs, &mut self.scratch, &mut self.eps)?;
        let s = self.schedule;
        let inv_sqrt_alpha = 1.0 / s.alpha(k).sqrt();
        let eps_coef = s.beta(k) / (1.0 - s.alpha_bar(k)).sqrt();
        for (a, e) in state.iter_mut().zip(&self.eps) {
            *a = (*a - eps_coef * e) * inv_sqrt_alpha;
        }
        if let Some(y) = y {
            let sigma = s.sigma(k);
            for (a, n) in state.iter_mut().zip(y) {
                *a += sigma * n;
            }
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite chunk after reverse step {k}")));
        }
        Ok(())
    }

    /// Applies the reverse step at every `k` in `steps`, drawing `Y` from
    /// `noise` wherever `sigma_k > 0`. `trace` receives the state after each
    /// step.
    pub fn run(
        &mut self,
        state: &mut [f64],
        obs: &[f64],
        steps: &[usize],
        deterministic_final: bool,
        noise: &mut dyn NoiseSource,
        mut trace: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<()> {
        validate_steps(steps, self.schedule.total_steps())?;
        if state.len() != self.eps.len() {
            return Err(Error::invalid("state has wrong length"));
        }
        for (i, &k) in steps.iter().enumerate() {
            let last = i + 1 == steps.len();
            let inject = !(last && deterministic_final) && self.schedule.sigma(k) > 0.0;
            if inject {
                let mut y = std::mem::take(&mut self.noise);
                noise.fill(k, &mut y);
                let r = self.step(state, k, obs, Some(&y));
                self.noise = y;
                r?;
            } else {
                self.step(state, k, obs, None)?;
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(state.to_vec());
            }
        }
        Ok(())
    }
}

pub fn forward_noise(a0: &ActionChunk, k: usize, eps: &ActionChunk, schedule: &NoiseSchedule) -> Result<ActionChunk> {
    if k > schedule.total_steps() {
        return Err(Error::invalid(format!("step {k} outside 0..={}", schedule.total_steps())));
    }
    if !a0.same_shape(eps) {
        return Err(Error::invalid("noise shape differs from chunk shape"));
    }
    if !eps.is_finite() {
        return Err(Error::invalid("noise is not finite"));
    }
    let ab = schedule.alpha_bar(k);
    let (signal, spread) = (ab.sqrt(), (1.0 - ab).sqrt());
    let values = a0
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(a, e)| signal * a + spread * e)
        .collect();
    ActionChunk::from_vec(a0.horizon(), a0.dim(), values)
}

pub fn reverse_step(
    model: &DenoiserModel,
    a_k: &ActionChunk,
    k: usize,
    obs: &[f64],
    schedule: &NoiseSchedule,
    y: &ActionChunk,
) -> Result<ActionChunk> {
    if !a_k.same_shape(y) {
        return Err(Error::invalid("noise shape differs from chunk shape"));
    }
    let mut out = a_k.clone();
    Denoiser::new(model, schedule)?.step(out.as_mut_slice(), k, obs, Some(y.as_slice()))?;
    Ok(out)
}

fn gaussian_chunk<R: Rng + ?Sized>(horizon: usize, dim: usize, rng: &mut R) -> ActionChunk {
    let values = (0..horizon * dim).map(|_| rng.sample(StandardNormal)).collect();
    ActionChunk::from_vec(horizon, dim, values).expect("positive shape")
}

/// Denoises from `G ~ N(0, I)` through every step `K..1`.
pub fn full_denoise<R: Rng + ?Sized>(
    model: &DenoiserModel,
    obs: &[f64],
    schedule: &NoiseSchedule,
    deterministic_final: bool,
    rng: &mut R,
) -> Result<ActionChunk> {
    let l = model.layout();
    let guess = gaussian_chunk(l.horizon, l.action_dim, rng);
    truncated_denoise(model, obs, &guess, &steps_from(schedule.total_steps()), schedule, deterministic_final, rng)
}

/// Runs the reverse steps in `steps` starting from `guess` as the state at
/// the first listed step.
pub fn truncated_denoise<R: Rng + ?Sized>(
    model: &DenoiserModel,
    obs: &[f64],
    guess: &ActionChunk,
    steps: &[usize],
    schedule: &NoiseSchedule,
    deterministic_final: bool,
    rng: &mut R,
) -> Result<ActionChunk> {
    if !guess.is_finite() {
        return Err(Error::invalid("initial guess is not finite"));
    }
    let mut state = guess.clone();
    Denoiser::new(model, schedule)?.run(
        state.as_mut_slice(),
        obs,
        steps,
        deterministic_final,
        &mut Gaussian(rng),
        None,
    )?;
    Ok(state)
}

/// Drops the first action and repeats the last one.
pub fn shift_guess(chunk: &ActionChunk) -> ActionChunk {
    let (t, d) = (chunk.horizon(), chunk.dim());
    let mut values = Vec::with_capacity(t * d);
    values.extend_from_slice(&chunk.as_slice()[d.min(t * d - d)..]);
    if t > 1 {
        values.extend_from_slice(chunk.last());
    }
    ActionChunk::from_vec(t, d, values).expect("shape preserved")
}

pub fn scale_discrete_guess(guess: &ActionChunk, factor: f64, discrete_mask: &[bool]) -> Result<ActionChunk> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::invalid(format!("scale factor must be positive, got {factor}")));
    }
    if !discrete_mask.is_empty() && discrete_mask.len() != guess.dim() {
        return Err(Error::invalid("discrete mask length differs from action dim"));
    }
    let mut out = guess.clone();
    if discrete_mask.is_empty() {
        return Ok(out);
    }
    for t in 0..out.horizon() {
        for (v, &m) in out.row_mut(t).iter_mut().zip(discrete_mask) {
            if m {
                *v /= factor;
            }
        }
    }
    Ok(out)
}

/// How predictions are consumed during a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    /// Predict every step from the shifted previous chunk; execute only the
    /// first action.
    Rti,
    /// Full denoising, then execute the first `executed` actions open loop.
    Chunked { executed: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyStats {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

/// Nearest-rank percentile of sorted values; 0 when empty.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub fn latency_stats(values: &[f64]) -> LatencyStats {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mean = if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    LatencyStats {
        mean,
        median: percentile(&v, 0.5),
        p95: percentile(&v, 0.95),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub episode_id: usize,
    pub env_seed: u64,
    pub score: f64,
    pub n_predictions: usize,
    pub env_steps: usize,
    /// Wall-clock of every prediction in microseconds, the initial one first.
    pub latencies_us: Vec<f64>,
    /// Behavioral mode of each prediction, where the task defines modes.
    pub modes: Vec<usize>,
    pub mode_switches: usize,
    /// Executed actions in environment units.
    pub actions: Vec<Vec<f64>>,
}

impl EpisodeResult {
    /// Latency summary, optionally leaving out the initial full denoise.
    pub fn latency(&self, include_initial: bool) -> LatencyStats {
        let skip = usize::from(!include_initial && self.latencies_us.len() > 1);
        latency_stats(&self.latencies_us[skip..])
    }

    /// Consecutive prediction pairs with a defined mode.
    pub fn mode_pairs(&self) -> usize {
        self.modes.len().saturating_sub(1)
    }
}

pub const EPISODE_CSV_HEADER: [&str; 8] = [
    "episode_id",
    "score",
    "n_predictions",
    "latency_us_mean",
    "latency_us_median",
    "latency_us_p95",
    "mode_switches",
    "config_hash",
];

/// Episode rows; latency columns exclude the initial full denoise.
pub fn write_episode_csv<W: Write>(out: W, results: &[EpisodeResult], config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EPISODE_CSV_HEADER)?;
    for r in results {
        let lat = r.latency(false);
        w.write_record([
            r.episode_id.to_string(),
            r.score.to_string(),
            r.n_predictions.to_string(),
            format!("{:.3}", lat.mean),
            format!("{:.3}", lat.median),
            format!("{:.3}", lat.p95),
            r.mode_switches.to_string(),
            config_hash.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Seed of the sampler stream for one episode.
pub fn episode_stream_seed(sampler_seed: u64, env_seed: u64) -> u64 {
    let mut z = sampler_seed ^ env_seed.rotate_left(29) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Warm-started closed loop: one prediction and one executed action per
/// step. A step list that starts at the top step `K` is a full chain and
/// begins from Gaussian noise regardless of the guess.
pub fn rti_rollout(
    env: &mut dyn Environment,
    policy: &Policy,
    config: &SamplerConfig,
    episode_id: usize,
    env_seed: u64,
) -> Result<EpisodeResult> {
    rollout(env, policy, config, Execution::Rti, episode_id, env_seed)
}

/// Chunked baseline: full denoising, execute `executed` actions, re-predict.
pub fn dp_rollout(
    env: &mut dyn Environment,
    policy: &Policy,
    config: &SamplerConfig,
    executed: usize,
    episode_id: usize,
    env_seed: u64,
) -> Result<EpisodeResult> {
    rollout(env, policy, config, Execution::Chunked { executed }, episode_id, env_seed)
}

pub fn rollout(
    env: &mut dyn Environment,
    policy: &Policy,
    config: &SamplerConfig,
    execution: Execution,
    episode_id: usize,
    env_seed: u64,
) -> Result<EpisodeResult> {
    let schedule = &policy.schedule;
    let total = schedule.total_steps();
    config.validate(total)?;
    let layout = *policy.layout();
    if env.obs_dim() != layout.obs_dim || env.action_dim() != layout.action_dim {
        return Err(Error::invalid(format!(
            "policy for {} does not fit environment {}",
            policy.env,
            env.name()
        )));
    }
    if let Execution::Chunked { executed } = execution {
        if executed == 0 || executed > layout.horizon {
            return Err(Error::invalid(format!(
                "executed prefix {executed} outside 1..={}",
                layout.horizon
            )));
        }
    }
    let full_steps = steps_from(total);
    let warm_start = execution == Execution::Rti && config.rti_steps[0] < total;
    let mask = policy.normalizer.discrete_mask.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(episode_stream_seed(config.seed, env_seed));
    let mut denoiser = Denoiser::new(&policy.model, schedule)?;

    let first = env.reset(env_seed);
    let mut history: VecDeque<Vec<f64>> = std::iter::repeat_n(first.values, layout.obs_history).collect();
    let cond_of = |h: &VecDeque<Vec<f64>>| policy.normalizer.normalize_obs(&h.iter().flatten().copied().collect::<Vec<_>>());

    // Warm-up pass so the first timed prediction does not pay for cold caches.
    {
        let mut probe = vec![0.0; layout.chunk_len()];
        denoiser.step(&mut probe, 1, &cond_of(&history), None)?;
    }

    let mut result = EpisodeResult {
        episode_id,
        env_seed,
        score: 0.0,
        n_predictions: 0,
        env_steps: 0,
        latencies_us: Vec::new(),
        modes: Vec::new(),
        mode_switches: 0,
        actions: Vec::new(),
    };
    let mut plan: Option<ActionChunk> = None;
    let mut next = 0usize;
    for _ in 0..env.episode_cap() {
        let cond = cond_of(&history);
        let predict = match execution {
            Execution::Rti => true,
            Execution::Chunked { executed } => plan.is_none() || next >= executed,
        };
        if predict {
            let start = Instant::now();
            let chunk = match (&plan, warm_start) {
                (Some(prev), true) => {
                    let mut guess = shift_guess(prev);
                    if config.scale_guess {
                        guess = scale_discrete_guess(&guess, config.discrete_factor, &mask)?;
                    }
                    if config.renoise {
                        let eps = gaussian_chunk(layout.horizon, layout.action_dim, &mut rng);
                        guess = forward_noise(&guess, config.rti_steps[0], &eps, schedule)?;
                    }
                    denoiser.run(
                        guess.as_mut_slice(),
                        &cond,
                        &config.rti_steps,
                        config.deterministic_final,
                        &mut Gaussian(&mut rng),
                        None,
                    )?;
                    guess
                }
                _ => {
                    let mut g = gaussian_chunk(layout.horizon, layout.action_dim, &mut rng);
                    denoiser.run(
                        g.as_mut_slice(),
                        &cond,
                        &full_steps,
                        config.deterministic_final,
                        &mut Gaussian(&mut rng),
                        None,
                    )?;
                    g
                }
            };
            result.latencies_us.push(start.elapsed().as_secs_f64() * 1e6);
            result.n_predictions += 1;
            let env_chunk = to_env_chunk(policy, &chunk)?;
            if let Some(m) = env.mode_of(&env_chunk) {
                if result.modes.last().is_some_and(|&p| p != m) {
                    result.mode_switches += 1;
                }
                result.modes.push(m);
            }
            plan = Some(chunk);
            next = 0;
        }
        let row = plan.as_ref().expect("prediction made").row(next);
        let action = policy.normalizer.to_env_action(row);
        next += 1;
        let obs = env.step(&action);
        result.actions.push(action);
        result.env_steps += 1;
        history.pop_front();
        history.push_back(obs.values);
    }
    result.score = env.score();
    Ok(result)
}

/// Converts a normalized chunk into environment units.
pub fn to_env_chunk(policy: &Policy, chunk: &ActionChunk) -> Result<ActionChunk> {
    let mut values = Vec::with_capacity(chunk.len());
    for row in chunk.rows() {
        values.extend(policy.normalizer.to_env_action(row));
    }
    ActionChunk::from_vec(chunk.horizon(), chunk.dim(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, ModelLayout};
    use crate::schedule::ScheduleKind;

    fn layout(total_steps: usize) -> ModelLayout {
        ModelLayout {
            horizon: 3,
            action_dim: 2,
            obs_dim: 2,
            obs_history: 2,
            step_embed_dim: 4,
            total_steps,
        }
    }

    fn random_model(total_steps: usize, seed: u64) -> DenoiserModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenoiserModel::new(layout(total_steps), &[16, 16], Activation::Tanh, &mut rng).unwrap()
    }

    fn chunk(values: &[f64]) -> ActionChunk {
        ActionChunk::from_vec(values.len() / 2, 2, values.to_vec()).unwrap()
    }

    #[test]
    fn forward_noise_edges() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 4).unwrap();
        let a0 = chunk(&[1.0, -2.0]);
        let zero = chunk(&[0.0, 0.0]);
        let eps = chunk(&[0.5, 0.25]);
        assert_eq!(forward_noise(&a0, 0, &eps, &s).unwrap(), a0);
        let ab = s.alpha_bar(2);
        assert_eq!(forward_noise(&a0, 2, &zero, &s).unwrap().as_slice(), &[ab.sqrt(), -2.0 * ab.sqrt()]);
        assert_eq!(
            forward_noise(&zero, 2, &eps, &s).unwrap().as_slice(),
            &[0.5 * (1.0 - ab).sqrt(), 0.25 * (1.0 - ab).sqrt()]
        );
        assert!(forward_noise(&a0, 5, &eps, &s).is_err());
    }

    #[test]
    fn forward_noise_scalar_value() {
        // abar_2 = (1 - 1e-4)(1 - (1e-4 + 0.0199/3)); 0.8 sqrt(abar_2) + 0.3 sqrt(1 - abar_2).
        let s = NoiseSchedule::new(ScheduleKind::Linear, 4).unwrap();
        let out = forward_noise(&chunk(&[0.8, 0.8]), 2, &chunk(&[0.3, 0.3]), &s).unwrap();
        assert!((out.as_slice()[0] - 0.822_060_223_149_325).abs() < 1e-15, "{}", out.as_slice()[0]);
    }

    #[test]
    fn zero_predictor_reverse_step_rescales() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 4).unwrap();
        let model = DenoiserModel::zeros(layout(4), &[8], Activation::Relu).unwrap();
        let a = chunk(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = chunk(&[0.0; 6]);
        let out = reverse_step(&model, &a, 3, &[0.0; 4], &s, &y).unwrap();
        for (o, x) in out.as_slice().iter().zip(a.as_slice()) {
            assert_eq!(*o, x / s.alpha(3).sqrt());
        }
    }

    #[test]
    fn reverse_step_matches_scalar_recomputation() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 4).unwrap();
        let model = random_model(4, 2);
        let a = chunk(&[0.3, -0.1, 0.7, 0.2, -0.5, 0.05]);
        let y = chunk(&[0.1, 0.2, -0.3, 0.4, 0.0, -1.0]);
        let obs = [0.1, 0.2, 0.3, 0.4];
        let eps = model.forward(a.as_slice(), 2, &obs).unwrap();
        let out = reverse_step(&model, &a, 2, &obs, &s, &y).unwrap();
        let (b, al, ab, sg) = (s.betas()[1], s.alphas()[1], s.alpha_bars()[1], s.sigmas()[1]);
        for i in 0..6 {
            let expect = (a.as_slice()[i] - b / (1.0 - ab).sqrt() * eps[i]) / al.sqrt() + sg * y.as_slice()[i];
            assert!((out.as_slice()[i] - expect).abs() < 1e-15);
        }
    }

    /// Ideal predictor for a single clean chunk: solves the forward
    /// equation for the noise at the current state.
    struct Oracle<'a> {
        a0: &'a [f64],
        schedule: &'a NoiseSchedule,
    }

    impl NoisePredictor for Oracle<'_> {
        fn chunk_len(&self) -> usize {
            self.a0.len()
        }

        fn total_steps(&self) -> usize {
            self.schedule.total_steps()
        }

        fn predict(&self, chunk: &[f64], k: usize, _obs: &[f64], _s: &mut Scratch, out: &mut [f64]) -> Result<()> {
            let ab = self.schedule.alpha_bar(k);
            for ((o, x), c) in out.iter_mut().zip(chunk).zip(self.a0) {
                *o = (x - ab.sqrt() * c) / (1.0 - ab).sqrt();
            }
            Ok(())
        }
    }

    #[test]
    fn oracle_noise_recovers_clean_chunk() {
        let s = NoiseSchedule::new(ScheduleKind::SquaredCosine, 100).unwrap();
        let a0 = [0.5, -0.3, 0.8, 0.1, -0.7, 0.2];
        let eps = chunk(&[0.3, -1.2, 0.7, 0.05, -0.4, 1.1]);
        let mut a = forward_noise(&chunk(&a0), 100, &eps, &s).unwrap();
        let oracle = Oracle { a0: &a0, schedule: &s };
        let mut d = Denoiser::new(&oracle, &s).unwrap();
        d.run(a.as_mut_slice(), &[], &steps_from(100), false, &mut Replay(&[]), None).unwrap();
        // The reference run in plain double precision ends at 0 error.
        assert!(a.distance(&chunk(&a0)) < 1e-12, "{}", a.distance(&chunk(&a0)));
    }

    #[test]
    fn full_denoise_is_truncated_denoise_over_all_steps() {
        let s = NoiseSchedule::new(ScheduleKind::SquaredCosine, 30).unwrap();
        let model = random_model(30, 1);
        let obs = [0.5, -0.5, 0.25, 0.0];
        let a = full_denoise(&model, &obs, &s, true, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = gaussian_chunk(3, 2, &mut rng);
        let b = truncated_denoise(&model, &obs, &g, &steps_from(30), &s, true, &mut rng).unwrap();
        assert_eq!(a, b);
        let again = full_denoise(&model, &obs, &s, true, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn shift_examples() {
        let a = chunk(&[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        assert_eq!(shift_guess(&a).as_slice(), &[2.0, 2.0, 3.0, 3.0, 3.0, 3.0]);
        let one = chunk(&[4.0, 5.0]);
        assert_eq!(shift_guess(&one), one);
        let c = ActionChunk::constant(5, &[0.1, 0.2]);
        let mut g = c.clone();
        for _ in 0..5 {
            g = shift_guess(&g);
        }
        assert_eq!(g, c);
    }

    #[test]
    fn discrete_guess_scaling() {
        let g = ActionChunk::from_vec(2, 3, vec![0.5, 0.5, 1.0, -0.5, 0.5, -1.0]).unwrap();
        let s = scale_discrete_guess(&g, 10.0, &[false, false, true]).unwrap();
        assert_eq!(s.as_slice(), &[0.5, 0.5, 0.1, -0.5, 0.5, -0.1]);
        assert_eq!(scale_discrete_guess(&g, 10.0, &[]).unwrap(), g);
        assert_eq!(scale_discrete_guess(&g, 1.0, &[false, false, true]).unwrap(), g);
        assert!(scale_discrete_guess(&g, 0.0, &[]).is_err());
    }

    #[test]
    fn step_lists_are_validated() {
        assert!(validate_steps(&[3, 2, 1], 10).is_ok());
        assert!(validate_steps(&[10, 5, 1], 10).is_ok());
        assert!(validate_steps(&[], 10).is_err());
        assert!(validate_steps(&[2, 3], 10).is_err());
        assert!(validate_steps(&[11, 1], 10).is_err());
        assert!(validate_steps(&[1, 0], 10).is_err());
    }

    #[test]
    fn exploding_chain_reports_step() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 4).unwrap();
        let mut model = random_model(4, 0);
        let last = model.num_params() - 1;
        model.set_param(last, f64::INFINITY);
        let g = chunk(&[1.0; 6]);
        let err = truncated_denoise(&model, &[1.0; 4], &g, &[2, 1], &s, true, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err();
        assert!(matches!(err, Error::Numerical(ref m) if m.contains("step 2")), "{err}");
    }

    #[test]
    fn percentiles() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 10.0);
        assert_eq!(percentile(&v, 0.95), 19.0);
        assert_eq!(percentile(&[], 0.5), 0.0);
    }
}
