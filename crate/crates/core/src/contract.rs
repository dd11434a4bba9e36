//! Error propagation through the reverse chain: sampled Lipschitz constants
//! of the noise predictor, the analytic per-step factors `c_k` and their
//! products `C(K')`, measured contraction of initialization errors, and the
//! offline choice of the warm-start step `K'`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::Dataset;
use crate::error::{Error, Result};
use crate::net::DenoiserModel;
use crate::policy::Policy;
use crate::sampler::{shift_guess, steps_from, Denoiser, Gaussian, Recorder, Replay};
use crate::schedule::NoiseSchedule;
use crate::ActionChunk;

/// Power-iteration rounds spent on each refined probe.
const REFINE_ITERS: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContractConfig {
    /// Random perturbation pairs for the Lipschitz estimate.
    pub lipschitz_pairs: usize,
    /// Norm of each Lipschitz probe perturbation.
    pub perturbation: f64,
    /// Leading pairs refined by power iteration on `J^T J`.
    pub refine_pairs: usize,
    pub kprimes: Vec<usize>,
    pub delta_norms: Vec<f64>,
    pub trials: usize,
    /// Candidate warm-start steps for the `K'` estimate.
    pub candidates: Vec<usize>,
    /// Prefer the smallest candidate whose mean deviation is within this
    /// much of the minimum.
    pub tolerance: f64,
    pub transitions: usize,
    pub seed: u64,
}

impl Default for ContractConfig {
    fn default() -> Self {
        ContractConfig {
            lipschitz_pairs: 2000,
            perturbation: 1e-3,
            refine_pairs: 8,
            kprimes: vec![1, 3, 5, 10],
            delta_norms: vec![0.01, 0.05, 0.1],
            trials: 40,
            candidates: vec![1, 2, 3, 5, 10],
            tolerance: 0.0,
            transitions: 200,
            seed: 0,
        }
    }
}

impl ContractConfig {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if self.lipschitz_pairs == 0 || self.trials == 0 || self.transitions == 0 {
            return Err(Error::invalid("lipschitz_pairs, trials and transitions must be positive"));
        }
        if !(self.perturbation > 0.0) || !self.perturbation.is_finite() {
            return Err(Error::invalid("perturbation must be positive"));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::invalid("tolerance must be non-negative"));
        }
        if self.delta_norms.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::invalid("delta norms must be finite and non-negative"));
        }
        for &k in self.kprimes.iter().chain(&self.candidates) {
            if k == 0 || k > total_steps {
                return Err(Error::invalid(format!("step {k} outside 1..={total_steps}")));
            }
        }
        Ok(())
    }
}

/// Where the Lipschitz probes are taken.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub chunk: Vec<f64>,
    pub obs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzEstimate {
    /// Largest sampled ratio; a lower bound on the true constant.
    pub global: f64,
    /// Largest sampled ratio per step `k = 1..=K`; `None` where unsampled.
    pub per_step: Vec<Option<f64>>,
    pub pairs: usize,
    pub skipped: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn ratio(model: &DenoiserModel, probe: &Probe, k: usize, u: &[f64], base: &[f64]) -> Result<Option<f64>> {
    let un = norm(u);
    if un == 0.0 {
        return Ok(None);
    }
    let moved: Vec<f64> = probe.chunk.iter().zip(u).map(|(a, d)| a + d).collect();
    let out = model.forward(&moved, k, &probe.obs)?;
    let diff: f64 = out.iter().zip(base).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(Some(diff / un))
}

/// Max of `||eps(A + u) - eps(A)|| / ||u||` over `pairs` random probes,
/// each with a random step and a random direction scaled to `scale`. The
/// first `refine` pairs additionally run power iteration on `J^T J` and
/// probe along the resulting direction. Pairs are drawn in a fixed order
/// from `rng`, so more pairs never lower the estimate.
pub fn estimate_lipschitz<R: Rng + ?Sized>(
    model: &DenoiserModel,
    probes: &[Probe],
    pairs: usize,
    scale: f64,
    refine: usize,
    rng: &mut R,
) -> Result<LipschitzEstimate> {
    if probes.is_empty() {
        return Err(Error::invalid("no probe points"));
    }
    let total = model.layout().total_steps;
    let n = model.layout().chunk_len();
    let mut est = LipschitzEstimate {
        global: 0.0,
        per_step: vec![None; total],
        pairs: 0,
        skipped: 0,
    };
    let record = |est: &mut LipschitzEstimate, k: usize, r: f64| {
        est.global = est.global.max(r);
        let slot = &mut est.per_step[k - 1];
        *slot = Some(slot.map_or(r, |v: f64| v.max(r)));
    };
    for i in 0..pairs {
        let probe = &probes[i % probes.len()];
        let k = rng.random_range(1..=total);
        let dir: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let dn = norm(&dir);
        let u: Vec<f64> = if dn > 0.0 { dir.iter().map(|d| d * scale / dn).collect() } else { dir };
        let base = model.forward(&probe.chunk, k, &probe.obs)?;
        match ratio(model, probe, k, &u, &base)? {
            Some(r) => {
                est.pairs += 1;
                record(&mut est, k, r);
            }
            None => {
                est.skipped += 1;
                continue;
            }
        }
        if i < refine {
            let mut v = u.clone();
            for _ in 0..REFINE_ITERS {
                // J v by a central difference, then J^T (J v) exactly.
                let vn = norm(&v);
                if vn == 0.0 {
                    break;
                }
                let h = scale / vn;
                let plus: Vec<f64> = probe.chunk.iter().zip(&v).map(|(a, d)| a + h * d).collect();
                let minus: Vec<f64> = probe.chunk.iter().zip(&v).map(|(a, d)| a - h * d).collect();
                let fp = model.forward(&plus, k, &probe.obs)?;
                let fm = model.forward(&minus, k, &probe.obs)?;
                let jv: Vec<f64> = fp.iter().zip(&fm).map(|(p, m)| (p - m) / (2.0 * h)).collect();
                v = model.chunk_vjp(&probe.chunk, k, &probe.obs, &jv)?;
            }
            let vn = norm(&v);
            if vn > 0.0 {
                let u: Vec<f64> = v.iter().map(|d| d * scale / vn).collect();
                if let Some(r) = ratio(model, probe, k, &u, &base)? {
                    est.pairs += 1;
                    record(&mut est, k, r);
                }
            }
        }
    }
    Ok(est)
}

/// `c_k = (sqrt((1 - abar_k) alpha_k) + sqrt(abar_k) beta_k L) / sqrt((1 - abar_k) alpha_k)`.
pub fn compute_ck(schedule: &NoiseSchedule, lipschitz: f64, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("c_k is undefined at k = 0"));
    }
    schedule.check_step(k)?;
    if !(lipschitz >= 0.0) || !lipschitz.is_finite() {
        return Err(Error::invalid(format!("Lipschitz constant must be finite and >= 0, got {lipschitz}")));
    }
    let ab = schedule.alpha_bar(k);
    let denom = ((1.0 - ab) * schedule.alpha(k)).sqrt();
    Ok((denom + ab.sqrt() * schedule.beta(k) * lipschitz) / denom)
}

/// `C(K') = c_1 c_2 ... c_K'`.
pub fn compute_c(schedule: &NoiseSchedule, lipschitz: f64, kprime: usize) -> Result<f64> {
    if kprime == 0 {
        return Err(Error::invalid("K' must be at least 1"));
    }
    (1..=kprime).try_fold(1.0, |acc, k| Ok(acc * compute_ck(schedule, lipschitz, k)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayRow {
    pub kprime: usize,
    pub delta: f64,
    pub trials: usize,
    pub median_error: f64,
    pub max_error: f64,
    pub median_ratio: f64,
    pub max_ratio: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Perturbs the reference chain at step `K'` by a random `delta` of the given
/// norm and finishes both chains with the same noise draws. Ratios are
/// `||A~_0 - A_0|| / ||delta||`, reported as 0 when `delta = 0`.
#[allow(clippy::too_many_arguments)]
pub fn empirical_contraction<R: Rng + ?Sized>(
    model: &DenoiserModel,
    observations: &[Vec<f64>],
    schedule: &NoiseSchedule,
    kprimes: &[usize],
    delta_norms: &[f64],
    trials: usize,
    deterministic_final: bool,
    rng: &mut R,
) -> Result<Vec<DecayRow>> {
    if observations.is_empty() {
        return Err(Error::invalid("no observations"));
    }
    let total = schedule.total_steps();
    let n = model.layout().chunk_len();
    let full = steps_from(total);
    let mut denoiser = Denoiser::new(model, schedule)?;
    let mut rows = Vec::new();
    for &kp in kprimes {
        if kp == 0 || kp > total {
            return Err(Error::invalid(format!("K' = {kp} outside 1..={total}")));
        }
        for &delta in delta_norms {
            let mut errors = Vec::with_capacity(trials);
            let mut ratios = Vec::with_capacity(trials);
            for trial in 0..trials {
                let obs = &observations[trial % observations.len()];
                let mut state: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let mut trace = vec![state.clone()];
                let mut recorder = Recorder {
                    inner: Gaussian(&mut *rng),
                    draws: Vec::new(),
                };
                denoiser.run(&mut state, obs, &full, deterministic_final, &mut recorder, Some(&mut trace))?;
                let draws = recorder.draws;
                // trace[i] is the state entering step K - i.
                let mut perturbed = trace[total - kp].clone();
                let dir: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let dn = norm(&dir);
                for (p, d) in perturbed.iter_mut().zip(&dir) {
                    *p += delta * d / dn;
                }
                denoiser.run(
                    &mut perturbed,
                    obs,
                    &steps_from(kp),
                    deterministic_final,
                    &mut Replay(&draws),
                    None,
                )?;
                let err = perturbed.iter().zip(&state).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                errors.push(err);
                ratios.push(if delta > 0.0 { err / delta } else { 0.0 });
            }
            rows.push(DecayRow {
                kprime: kp,
                delta,
                trials,
                max_error: errors.iter().copied().fold(0.0, f64::max),
                max_ratio: ratios.iter().copied().fold(0.0, f64::max),
                median_error: median(&mut errors),
                median_ratio: median(&mut ratios),
            });
        }
    }
    Ok(rows)
}

/// A pair of normalized conditioning vectors from consecutive time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub previous: Vec<f64>,
    pub current: Vec<f64>,
}

/// Up to `count` consecutive-step transitions spread evenly over the dataset.
pub fn dataset_transitions(policy: &Policy, dataset: &Dataset, count: usize) -> Vec<Transition> {
    let pairs: Vec<usize> = (1..dataset.samples.len())
        .filter(|&i| {
            let (a, b) = (&dataset.samples[i - 1], &dataset.samples[i]);
            a.episode == b.episode && a.t + 1 == b.t
        })
        .collect();
    let take = count.min(pairs.len());
    (0..take)
        .map(|j| {
            let i = pairs[j * pairs.len() / take];
            Transition {
                previous: policy.normalizer.normalize_obs(&dataset.samples[i - 1].cond),
                current: policy.normalizer.normalize_obs(&dataset.samples[i].cond),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KprimeEstimate {
    pub chosen: usize,
    /// `(k, mean ||G - sqrt(abar_k) A_0||)` per candidate, in the given order.
    pub curve: Vec<(usize, f64)>,
}

/// Picks the candidate minimizing the mean of `||G - sqrt(abar_k) A_0||`,
/// the distance between the shifted previous prediction `G` and the forward
/// diffusion mean of the current full-denoise prediction `A_0`.
pub fn kprime_from_pairs(schedule: &NoiseSchedule, pairs: &[(ActionChunk, ActionChunk)], candidates: &[usize], tolerance: f64) -> Result<KprimeEstimate> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate steps"));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("no transitions"));
    }
    let mut curve = Vec::with_capacity(candidates.len());
    for &k in candidates {
        schedule.check_step(k)?;
        let s = schedule.alpha_bar(k).sqrt();
        let mean = pairs
            .iter()
            .map(|(g, a0)| g.as_slice().iter().zip(a0.as_slice()).map(|(g, a)| (g - s * a).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / pairs.len() as f64;
        curve.push((k, mean));
    }
    let best = curve.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let chosen = curve
        .iter()
        .filter(|c| c.1 <= best + tolerance)
        .map(|c| c.0)
        .min()
        .expect("the minimum is within tolerance of itself");
    Ok(KprimeEstimate { chosen, curve })
}

/// Full-denoises both ends of every transition and compares the shifted
/// earlier prediction with the later one.
pub fn estimate_kprime<R: Rng + ?Sized>(
    policy: &Policy,
    transitions: &[Transition],
    candidates: &[usize],
    tolerance: f64,
    deterministic_final: bool,
    rng: &mut R,
) -> Result<KprimeEstimate> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate steps"));
    }
    let l = *policy.layout();
    let full = steps_from(policy.schedule.total_steps());
    let mut denoiser = Denoiser::new(&policy.model, &policy.schedule)?;
    let mut sample = |obs: &[f64], rng: &mut R| -> Result<ActionChunk> {
        let mut state: Vec<f64> = (0..l.chunk_len()).map(|_| rng.sample(StandardNormal)).collect();
        denoiser.run(&mut state, obs, &full, deterministic_final, &mut Gaussian(&mut *rng), None)?;
        ActionChunk::from_vec(l.horizon, l.action_dim, state)
    };
    let mut pairs = Vec::with_capacity(transitions.len());
    for tr in transitions {
        let prev = sample(&tr.previous, rng)?;
        let cur = sample(&tr.current, rng)?;
        pairs.push((shift_guess(&prev), cur));
    }
    kprime_from_pairs(&policy.schedule, &pairs, candidates, tolerance)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractivityReport {
    pub lipschitz: LipschitzEstimate,
    /// `c_k` for `k = 1..=K`.
    pub c_k: Vec<f64>,
    /// `C(K')` for `K' = 1..=K`.
    pub c_of_kprime: Vec<f64>,
    pub decay: Vec<DecayRow>,
    pub kprime: Option<KprimeEstimate>,
}

impl ContractivityReport {
    pub fn new(schedule: &NoiseSchedule, lipschitz: LipschitzEstimate, decay: Vec<DecayRow>, kprime: Option<KprimeEstimate>) -> Result<Self> {
        let l = lipschitz.global;
        let c_k = (1..=schedule.total_steps())
            .map(|k| compute_ck(schedule, l, k))
            .collect::<Result<Vec<_>>>()?;
        let c_of_kprime = c_k
            .iter()
            .scan(1.0, |acc, c| {
                *acc *= c;
                Some(*acc)
            })
            .collect();
        Ok(ContractivityReport {
            lipschitz,
            c_k,
            c_of_kprime,
            decay,
            kprime,
        })
    }

    /// Analytic bound `C(K')` for a row of the decay table.
    pub fn bound(&self, kprime: usize) -> f64 {
        self.c_of_kprime[kprime - 1]
    }

    pub fn write_constants_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "c_k", "C", "lipschitz_k"])?;
        for (i, (c, big)) in self.c_k.iter().zip(&self.c_of_kprime).enumerate() {
            let lk = self.lipschitz.per_step[i].map(|v| v.to_string()).unwrap_or_default();
            w.write_record([(i + 1).to_string(), c.to_string(), big.to_string(), lk])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn write_decay_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["kprime", "delta", "trials", "median_error", "max_error", "median_ratio", "max_ratio", "bound_C"])?;
        for r in &self.decay {
            w.write_record([
                r.kprime.to_string(),
                r.delta.to_string(),
                r.trials.to_string(),
                r.median_error.to_string(),
                r.max_error.to_string(),
                r.median_ratio.to_string(),
                r.max_ratio.to_string(),
                self.bound(r.kprime).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "estimated L = {:.6} (max over {} sampled pairs; {} zero perturbations skipped)\n",
            self.lipschitz.global, self.lipschitz.pairs, self.lipschitz.skipped
        );
        let below_one = self.c_k.iter().filter(|c| **c < 1.0).count();
        s += &format!(
            "c_k from the closed form: min {:.6}, max {:.6}; {} of {} steps have c_k < 1\n",
            self.c_k.iter().copied().fold(f64::INFINITY, f64::min),
            self.c_k.iter().copied().fold(0.0, f64::max),
            below_one,
            self.c_k.len()
        );
        s += "measured vs analytic (K', |delta|, median ratio, max ratio, C(K')):\n";
        for r in &self.decay {
            s += &format!(
                "  {:>4} {:>8.4} {:>12.6} {:>12.6} {:>14.6}{}\n",
                r.kprime,
                r.delta,
                r.median_ratio,
                r.max_ratio,
                self.bound(r.kprime),
                if r.max_ratio > self.bound(r.kprime) { "  exceeds bound" } else { "" }
            );
        }
        if let Some(k) = &self.kprime {
            s += &format!("chosen K' = {}\n", k.chosen);
            for (k, d) in &k.curve {
                s += &format!("  k = {k:>4}: mean deviation {d:.6}\n");
            }
        }
        s
    }
}

/// Probes for the Lipschitz estimate: noised dataset chunks at their
/// conditioning, spread evenly over the dataset.
pub fn dataset_probes(policy: &Policy, dataset: &Dataset, count: usize, seed: u64) -> Vec<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = count.min(dataset.samples.len());
    (0..take)
        .map(|j| {
            let s = &dataset.samples[j * dataset.samples.len() / take];
            let clean = policy.normalizer.normalize_actions(&s.chunk);
            let noisy = clean.iter().map(|a| a + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
            Probe {
                chunk: noisy,
                obs: policy.normalizer.normalize_obs(&s.cond),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, ModelLayout};
    use crate::schedule::ScheduleKind;

    fn layout(total_steps: usize) -> ModelLayout {
        ModelLayout {
            horizon: 4,
            action_dim: 2,
            obs_dim: 2,
            obs_history: 1,
            step_embed_dim: 4,
            total_steps,
        }
    }

    fn probes(n: usize, rng: &mut ChaCha8Rng) -> Vec<Probe> {
        (0..n)
            .map(|_| Probe {
                chunk: (0..8).map(|_| rng.sample(StandardNormal)).collect(),
                obs: (0..2).map(|_| rng.sample(StandardNormal)).collect(),
            })
            .collect()
    }

    #[test]
    fn zero_model_has_zero_lipschitz() {
        let model = DenoiserModel::zeros(layout(10), &[6], Activation::Tanh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = probes(3, &mut rng);
        let est = estimate_lipschitz(&model, &p, 50, 1e-3, 2, &mut rng).unwrap();
        assert_eq!(est.global, 0.0);
        assert!(est.pairs >= 50);
    }

    #[test]
    fn zero_scale_probes_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = DenoiserModel::new(layout(10), &[6], Activation::Tanh, &mut rng).unwrap();
        let p = probes(2, &mut rng);
        let est = estimate_lipschitz(&model, &p, 20, 0.0, 0, &mut rng).unwrap();
        assert_eq!((est.pairs, est.skipped, est.global), (0, 20, 0.0));
    }

    #[test]
    fn linear_model_matches_largest_singular_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = DenoiserModel::new(layout(10), &[], Activation::Tanh, &mut rng).unwrap();
        // Largest singular value of the chunk block of the single weight
        // matrix, by power iteration on W^T W.
        let w = &model.layers()[0];
        let n = 8;
        let mut v = vec![1.0; n];
        let mut sigma = 0.0;
        for _ in 0..500 {
            let wv: Vec<f64> = (0..w.out_dim).map(|o| (0..n).map(|i| w.weights[o * w.in_dim + i] * v[i]).sum()).collect();
            let mut wtwv: Vec<f64> = (0..n).map(|i| (0..w.out_dim).map(|o| w.weights[o * w.in_dim + i] * wv[o]).sum()).collect();
            let nn = norm(&wtwv);
            wtwv.iter_mut().for_each(|x| *x /= nn);
            v = wtwv;
            sigma = nn.sqrt();
        }
        let p = probes(4, &mut rng);
        let est = estimate_lipschitz(&model, &p, 2000, 1e-3, 4, &mut rng).unwrap();
        assert!((est.global - sigma).abs() <= 0.05 * sigma, "{} vs {sigma}", est.global);
        assert!(est.global <= sigma * (1.0 + 1e-9));
    }

    #[test]
    fn more_pairs_never_lower_the_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = DenoiserModel::new(layout(10), &[8, 8], Activation::Tanh, &mut rng).unwrap();
        let p = probes(5, &mut rng);
        let mut last = 0.0;
        for pairs in [10, 40, 160] {
            let est = estimate_lipschitz(&model, &p, pairs, 1e-3, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            assert!(est.global >= last);
            last = est.global;
        }
    }

    #[test]
    fn ck_identities() {
        let s = NoiseSchedule::new(ScheduleKind::SquaredCosine, 100).unwrap();
        for k in 1..=100 {
            assert_eq!(compute_ck(&s, 0.0, k).unwrap(), 1.0);
            let c1 = compute_ck(&s, 1.5, k).unwrap() - 1.0;
            let c2 = compute_ck(&s, 3.0, k).unwrap() - 1.0;
            assert!((c2 - 2.0 * c1).abs() <= 1e-12 * c2.abs().max(1.0));
        }
        assert!(compute_ck(&s, 1.0, 0).is_err());
        assert!(compute_ck(&s, 1.0, 101).is_err());
        assert!(compute_ck(&s, -1.0, 3).is_err());
        assert_eq!(compute_c(&s, 0.0, 37).unwrap(), 1.0);
        assert_eq!(compute_c(&s, 2.0, 1).unwrap(), compute_ck(&s, 2.0, 1).unwrap());
        let prod: f64 = (1..=3).map(|k| compute_ck(&s, 2.0, k).unwrap()).product();
        assert!((compute_c(&s, 2.0, 3).unwrap() - prod).abs() <= 1e-12 * prod);
    }

    #[test]
    fn ck_hand_value_at_midpoint() {
        // K = 100 cosine schedule, L = 1, k = 50, from the stored arrays.
        let s = NoiseSchedule::new(ScheduleKind::SquaredCosine, 100).unwrap();
        let (ab, a, b) = (s.alpha_bar(50), s.alpha(50), s.beta(50));
        let hand = 1.0 + ab.sqrt() * b / ((1.0 - ab) * a).sqrt();
        assert!((compute_ck(&s, 1.0, 50).unwrap() - hand).abs() < 1e-14);
        assert!((compute_ck(&s, 1.0, 50).unwrap() - 1.030_691_853_990_256).abs() < 1e-12);
    }

    #[test]
    fn zero_perturbation_gives_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = DenoiserModel::new(layout(20), &[8], Activation::Tanh, &mut rng).unwrap();
        let s = NoiseSchedule::new(ScheduleKind::SquaredCosine, 20).unwrap();
        let obs = vec![vec![0.1, -0.2], vec![0.4, 0.0]];
        for det in [true, false] {
            let rows = empirical_contraction(&model, &obs, &s, &[1, 3, 20], &[0.0, 0.1], 4, det, &mut rng).unwrap();
            for r in rows.iter().filter(|r| r.delta == 0.0) {
                assert_eq!((r.max_error, r.max_ratio), (0.0, 0.0));
            }
            for r in rows.iter().filter(|r| r.delta > 0.0) {
                assert!(r.max_ratio.is_finite() && r.max_ratio > 0.0);
            }
        }
    }

    #[test]
    fn kprime_trivial_extremes() {
        let s = NoiseSchedule::new(ScheduleKind::SquaredCosine, 100).unwrap();
        let a0 = ActionChunk::from_vec(2, 2, vec![0.5, -0.3, 0.2, 0.9]).unwrap();
        let candidates: Vec<usize> = (1..=100).collect();
        let same = kprime_from_pairs(&s, &[(a0.clone(), a0.clone())], &candidates, 0.0).unwrap();
        assert_eq!(same.chosen, 1);
        let zero = ActionChunk::zeros(2, 2);
        let far = kprime_from_pairs(&s, &[(zero, a0.clone())], &candidates, 0.0).unwrap();
        assert_eq!(far.chosen, 100);
        // Monotone curves on both extremes.
        assert!(same.curve.windows(2).all(|w| w[0].1 <= w[1].1));
        assert!(far.curve.windows(2).all(|w| w[0].1 >= w[1].1));
        assert!(kprime_from_pairs(&s, &[(a0.clone(), a0)], &[], 0.0).is_err());
    }

    #[test]
    fn tolerance_prefers_fewer_steps() {
        let s = NoiseSchedule::new(ScheduleKind::SquaredCosine, 100).unwrap();
        let a0 = ActionChunk::from_vec(1, 1, vec![1.0]).unwrap();
        let g = ActionChunk::from_vec(1, 1, vec![s.alpha_bar(5).sqrt()]).unwrap();
        let exact = kprime_from_pairs(&s, &[(g.clone(), a0.clone())], &[1, 2, 3, 5, 10], 0.0).unwrap();
        assert_eq!(exact.chosen, 5);
        let loose = kprime_from_pairs(&s, &[(g, a0)], &[1, 2, 3, 5, 10], 1.0).unwrap();
        assert_eq!(loose.chosen, 1);
    }
}
