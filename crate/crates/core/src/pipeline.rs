//! Dataset generation and policy training driven by a [`RunConfig`].

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rayon::prelude::*;

use crate::bench::Variant;
use crate::config::RunConfig;
use crate::contract::{
    dataset_probes, dataset_transitions, empirical_contraction, estimate_kprime, estimate_lipschitz, ContractivityReport,
    KprimeEstimate,
};
use crate::envs::{generate_demos, make_env, scale_dataset_discrete, Dataset, EnvName};
use crate::error::{Error, Result};
use crate::net::{train, DenoiserModel, ModelLayout, TrainConfig, TrainReport};
use crate::policy::Policy;
use crate::sampler::{rollout, EpisodeResult};
use crate::schedule::NoiseSchedule;

/// Probe points drawn from the dataset for the Lipschitz estimate.
const PROBES: usize = 256;
/// Conditioning observations cycled through by the contraction trials.
const CONTRACTION_OBS: usize = 32;

/// Expert demonstrations for the configured environment, with discrete
/// dimensions divided by `discrete_scale` unless it is 1.
pub fn build_dataset(cfg: &RunConfig, discrete_scale: f64) -> Result<Dataset> {
    let e = &cfg.env;
    let ds = generate_demos(e.name, e.demos, e.seed, e.horizon, e.obs_history)?;
    if discrete_scale == 1.0 {
        Ok(ds)
    } else {
        scale_dataset_discrete(&ds, discrete_scale)
    }
}

/// Initializes and trains a policy on `dataset`; `seed` drives both the
/// weight initialization and the minibatch stream.
pub fn train_policy(cfg: &RunConfig, dataset: &Dataset, seed: u64) -> Result<(Policy, TrainReport)> {
    let schedule = NoiseSchedule::new(cfg.schedule.kind, cfg.schedule.steps)?;
    let m = &dataset.meta;
    let layout = ModelLayout {
        horizon: m.horizon,
        action_dim: m.action_dim,
        obs_dim: m.obs_dim,
        obs_history: m.obs_history,
        step_embed_dim: cfg.model.step_embed_dim,
        total_steps: cfg.schedule.steps,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = DenoiserModel::new(layout, &cfg.model.hidden(), cfg.model.activation, &mut rng)?;
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
    let report = train(&mut model, &dataset.training_data(), &schedule, &train_cfg)?;
    Ok((Policy::new(m.env, model, schedule, dataset.normalizer.clone())?, report))
}

/// `<dir>/<env>-seed<N>.ckpt`, or `<env>-x<scale>-seed<N>.ckpt` for a
/// dataset with scaled discrete dimensions.
pub fn checkpoint_path(dir: &Path, env: EnvName, discrete_scale: f64, seed: u64) -> PathBuf {
    if discrete_scale == 1.0 {
        dir.join(format!("{env}-seed{seed}.ckpt"))
    } else {
        dir.join(format!("{env}-x{discrete_scale}-seed{seed}.ckpt"))
    }
}

/// Per-epoch losses as CSV.
pub fn write_loss_csv<W: std::io::Write>(out: W, report: &TrainReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_loss", "eval_loss"])?;
    for (i, (t, e)) in report.loss_curve.iter().zip(&report.eval_curve).enumerate() {
        w.write_record([i.to_string(), t.to_string(), e.to_string()])?;
    }
    w.flush().map_err(|e| crate::Error::io("<csv>", e))?;
    Ok(())
}

/// Lipschitz estimate, `c_k`/`C(K')` tables, empirical contraction and the
/// K' estimate for `policy`, probing at the conditioning of `dataset`.
pub fn contract_report(cfg: &RunConfig, policy: &Policy, dataset: &Dataset) -> Result<ContractivityReport> {
    let c = &cfg.contract;
    c.validate(policy.schedule.total_steps())?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let probes = dataset_probes(policy, dataset, PROBES, c.seed);
    let lipschitz = estimate_lipschitz(&policy.model, &probes, c.lipschitz_pairs, c.perturbation, c.refine_pairs, &mut rng)?;
    let observations: Vec<Vec<f64>> = probes.iter().take(CONTRACTION_OBS).map(|p| p.obs.clone()).collect();
    let decay = empirical_contraction(
        &policy.model,
        &observations,
        &policy.schedule,
        &c.kprimes,
        &c.delta_norms,
        c.trials,
        cfg.sampler.deterministic_final,
        &mut rng,
    )?;
    let kprime = kprime_estimate(cfg, policy, dataset)?;
    ContractivityReport::new(&policy.schedule, lipschitz, decay, Some(kprime))
}

/// K' chosen from consecutive dataset transitions.
pub fn kprime_estimate(cfg: &RunConfig, policy: &Policy, dataset: &Dataset) -> Result<KprimeEstimate> {
    let c = &cfg.contract;
    let transitions = dataset_transitions(policy, dataset, c.transitions);
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ 0x6b70);
    estimate_kprime(policy, &transitions, &c.candidates, c.tolerance, cfg.sampler.deterministic_final, &mut rng)
}

/// Rolls out `episodes` paired episodes of one variant on up to `threads`
/// workers; episode `i` uses environment seed `bench.env_seed + i`.
pub fn rollout_episodes(cfg: &RunConfig, policy: &Policy, variant: Variant, episodes: usize, threads: usize) -> Result<Vec<EpisodeResult>> {
    let sampler = variant.sampler(&cfg.sampler);
    let execution = variant.execution(cfg.bench.executed);
    let env_seed = cfg.bench.env_seed;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start {threads} worker threads: {e}")))?;
    pool.install(|| {
        (0..episodes)
            .into_par_iter()
            .map(|i| {
                let mut env = make_env(policy.env, 0);
                rollout(env.as_mut(), policy, &sampler, execution, i, env_seed + i as u64)
            })
            .collect()
    })
}
