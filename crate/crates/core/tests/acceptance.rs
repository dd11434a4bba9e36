//! Acceptance run: trains the policies each check needs once, then prints
//! one PASS/FAIL line per criterion. Exits nonzero on any failure.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rtidp::bench::{prepare_policies, run_bench, thread_count, BenchReport, SeedPolicies, Variant};
use rtidp::config::RunConfig;
use rtidp::contract::{compute_c, compute_ck};
use rtidp::envs::{make_env, Dataset, EnvName};
use rtidp::net::{Activation, DenoiserModel, ModelLayout};
use rtidp::pipeline::{build_dataset, contract_report, kprime_estimate, rollout_episodes};
use rtidp::sampler::{full_denoise, steps_from, to_env_chunk, truncated_denoise};
use rtidp::{ActionChunk, NoiseSchedule, Policy, ScheduleKind};

const TRAINING_SEEDS: [u64; 3] = [0, 1, 2];
const EPISODES: usize = 100;
const ENV_BUDGET_S: f64 = 600.0;

struct Check {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
}

struct Suite {
    checks: Vec<Check>,
}

impl Suite {
    fn record(&mut self, id: u32, name: &'static str, pass: bool, detail: String, secs: f64) {
        println!("{} {id:>2}. {name} ({secs:.1} s): {detail}", if pass { "PASS" } else { "FAIL" });
        self.checks.push(Check {
            id,
            name,
            pass,
            detail,
            secs,
        });
    }
}

fn config(env: EnvName, variants: &[Variant]) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.env.name = env;
    if env == EnvName::PushL {
        // Long episodes give pushL the most samples per demo; 200 demos
        // keep three trainings inside the time budget on one core.
        cfg.env.demos = 200;
    }
    cfg.bench.episodes = EPISODES;
    cfg.bench.training_seeds = TRAINING_SEEDS.to_vec();
    cfg.bench.variants = variants.to_vec();
    cfg
}

fn small_model(rng: &mut ChaCha8Rng, total_steps: usize) -> DenoiserModel {
    let layout = ModelLayout {
        horizon: 8,
        action_dim: 2,
        obs_dim: 2,
        obs_history: 2,
        step_embed_dim: 16,
        total_steps,
    };
    DenoiserModel::new(layout, &[64, 64], Activation::Relu, rng).unwrap()
}

fn reduction_identity() -> (bool, String) {
    let schedule = NoiseSchedule::new(ScheduleKind::SquaredCosine, 100).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = small_model(&mut rng, 100);
    let mut mismatches = 0;
    for seed in 0..20u64 {
        let obs: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        for det in [false, true] {
            let mut a = ChaCha8Rng::seed_from_u64(seed);
            let full = full_denoise(&model, &obs, &schedule, det, &mut a).unwrap();
            let mut b = ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<f64> = (0..16).map(|_| b.sample(StandardNormal)).collect();
            let guess = ActionChunk::from_vec(8, 2, g).unwrap();
            let trunc = truncated_denoise(&model, &obs, &guess, &steps_from(100), &schedule, det, &mut b).unwrap();
            let same = full.as_slice().iter().zip(trunc.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits());
            mismatches += usize::from(!same);
        }
    }
    (mismatches == 0, format!("{mismatches} of 40 chains differ bitwise"))
}

fn schedule_identities() -> (bool, String) {
    let mut worst_product: f64 = 0.0;
    let mut worst_c: f64 = 0.0;
    let mut ck_zero_ok = true;
    for kind in [ScheduleKind::SquaredCosine, ScheduleKind::Linear] {
        let s = NoiseSchedule::new(kind, 100).unwrap();
        let mut prod = 1.0;
        for k in 1..=100 {
            prod *= s.alpha(k);
            worst_product = worst_product.max((prod - s.alpha_bar(k)).abs());
            ck_zero_ok &= compute_ck(&s, 0.0, k).unwrap() == 1.0;
        }
        for l in [0.3, 1.0, 7.5] {
            let mut running = 1.0;
            for kp in 1..=100 {
                running *= compute_ck(&s, l, kp).unwrap();
                let c = compute_c(&s, l, kp).unwrap();
                worst_c = worst_c.max((c - running).abs() / running);
            }
        }
    }
    let pass = worst_product <= 1e-12 && worst_c <= 1e-12 && ck_zero_ok;
    (
        pass,
        format!("max |prod alpha - abar| {worst_product:.1e}, max rel |C - prod c_k| {worst_c:.1e}, c_k(L=0) == 1: {ck_zero_ok}"),
    )
}

fn gradient_check(policy: &Policy, dataset: &Dataset) -> (bool, String) {
    let model = &policy.model;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let data = dataset.training_data();
    let pairs: Vec<(&[f64], &[f64])> = (0..8).map(|i| data.pair(i * data.len() / 8)).collect();
    let batch = model.draw_noised_batch(&pairs, &policy.schedule, &mut rng).unwrap();
    let (_, grads) = model.loss_and_grad_on(&batch);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut failed = 0;
    for _ in 0..20 {
        let idx = rng.random_range(0..model.num_params());
        let mut plus = model.clone();
        plus.set_param(idx, model.param(idx) + h);
        let mut minus = model.clone();
        minus.set_param(idx, model.param(idx) - h);
        let fd = (plus.batch_loss(&batch) - minus.batch_loss(&batch)) / (2.0 * h);
        let an = grads.get(idx);
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
        failed += usize::from(rel >= 1e-4);
    }
    (failed == 0, format!("{failed} of 20 parameters off, worst relative error {worst:.2e}"))
}

fn serialization(policy: &Policy, dataset: &Dataset) -> (bool, String) {
    let db = dataset.to_bytes().unwrap();
    let ds_same = Dataset::from_bytes(&db).unwrap().to_bytes().unwrap() == db;
    let pb = policy.to_bytes().unwrap();
    let p_same = Policy::from_bytes(&pb).unwrap().to_bytes().unwrap() == pb;
    let mut bad_d = db.clone();
    bad_d[0] ^= 0xff;
    let mut bad_p = pb.clone();
    bad_p[1] ^= 0xff;
    let rejected = Dataset::from_bytes(&bad_d).is_err() && Policy::from_bytes(&bad_p).is_err();
    (
        ds_same && p_same && rejected,
        format!("dataset identical: {ds_same}, checkpoint identical: {p_same}, bad magic rejected: {rejected}"),
    )
}

/// Fraction of full-denoise samples committing to goal 0, one sample per
/// episode start.
fn mode_frequency(cfg: &RunConfig, policy: &Policy, samples: usize) -> f64 {
    let mut env = make_env(EnvName::Reach2dBimodal, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut zeros = 0;
    for i in 0..samples {
        let first = env.reset(20_000 + i as u64).values;
        let raw: Vec<f64> = first.iter().copied().cycle().take(first.len() * policy.layout().obs_history).collect();
        let cond = policy.normalizer.normalize_obs(&raw);
        let chunk = full_denoise(&policy.model, &cond, &policy.schedule, cfg.sampler.deterministic_final, &mut rng).unwrap();
        let env_chunk = to_env_chunk(policy, &chunk).unwrap();
        zeros += usize::from(env.mode_of(&env_chunk) == Some(0));
    }
    zeros as f64 / samples as f64
}

fn latency_ratio(report: &BenchReport) -> f64 {
    report.summary(Variant::Rti).unwrap().latency_us_median / report.full_latency_us
}

fn score_line(report: &BenchReport, v: Variant) -> String {
    let s = report.summary(v).unwrap();
    let seeds: Vec<String> = s.seed_scores.iter().map(|x| format!("{x:.2}")).collect();
    format!("{v} {:.3} [{}]", s.avg_score, seeds.join(" "))
}

fn contraction(cfg: &RunConfig, policy: &Policy) -> (bool, String) {
    let mut c = cfg.clone();
    c.contract.kprimes = vec![3];
    c.contract.delta_norms = vec![0.01, 0.05, 0.1];
    let dataset = build_dataset(&c, 1.0).unwrap();
    let report = contract_report(&c, policy, &dataset).unwrap();
    let bound = report.bound(3);
    let mut pass = true;
    let mut parts = Vec::new();
    for row in &report.decay {
        pass &= row.median_ratio < 1.0 && row.max_ratio <= bound;
        parts.push(format!("|d|={} median {:.3} max {:.3}", row.delta, row.median_ratio, row.max_ratio));
    }
    (
        pass,
        format!("{}: L {:.2}, C(3) {:.3}; {}", cfg.env.name, report.lipschitz.global, bound, parts.join(", ")),
    )
}

fn bench_env(cfg: &RunConfig, dir: &Path, threads: usize) -> (Vec<SeedPolicies>, BenchReport) {
    let policies = prepare_policies(cfg, dir).unwrap();
    let report = run_bench(cfg, &policies, threads).unwrap();
    print!("{}", rtidp::bench::report_table(&report));
    (policies, report)
}

fn main() -> ExitCode {
    let threads = thread_count().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut suite = Suite { checks: Vec::new() };
    let mut latency = Vec::new();

    let t = Instant::now();
    let (pass, detail) = reduction_identity();
    let secs = t.elapsed().as_secs_f64();
    suite.record(1, "reduction identity", pass && secs < 1.0, detail, secs);

    let t = Instant::now();
    let (pass, detail) = schedule_identities();
    let secs = t.elapsed().as_secs_f64();
    suite.record(8, "schedule identities", pass && secs < 1.0, detail, secs);

    // reach2d_bimodal
    let t = Instant::now();
    let reach = config(EnvName::Reach2dBimodal, &[Variant::DpFullChunked, Variant::Rti]);
    let (reach_policies, report) = bench_env(&reach, dir.path(), threads);
    let secs = t.elapsed().as_secs_f64();
    let gap = report.summary(Variant::Rti).unwrap().avg_score - report.summary(Variant::DpFullChunked).unwrap().avg_score;
    suite.record(
        3,
        "performance retention, reach2d_bimodal",
        gap.abs() <= 0.05 && secs <= ENV_BUDGET_S,
        format!("{} vs {}, gap {gap:+.3}", score_line(&report, Variant::Rti), score_line(&report, Variant::DpFullChunked)),
        secs,
    );
    latency.push((EnvName::Reach2dBimodal, latency_ratio(&report)));

    let t = Instant::now();
    let freqs: Vec<f64> = reach_policies.iter().map(|p| mode_frequency(&reach, &p.plain, 200)).collect();
    let rti = report.summary(Variant::Rti).unwrap();
    let stay = 1.0 - rti.mode_switches as f64 / rti.mode_pairs.max(1) as f64;
    let pass = freqs.iter().all(|f| (f - 0.5).abs() <= 0.1) && stay >= 0.95;
    let f: Vec<String> = freqs.iter().map(|x| format!("{x:.3}")).collect();
    suite.record(
        5,
        "multimodality",
        pass,
        format!("goal-0 frequency per seed [{}], RTI same-mode pairs {stay:.4}", f.join(" ")),
        t.elapsed().as_secs_f64(),
    );

    let t = Instant::now();
    let reach_data = build_dataset(&reach, 1.0).unwrap();
    let (pass, detail) = gradient_check(&reach_policies[0].plain, &reach_data);
    let secs = t.elapsed().as_secs_f64();
    suite.record(7, "gradient check", pass && secs < 60.0, detail, secs);

    let t = Instant::now();
    let (pass, detail) = serialization(&reach_policies[0].plain, &reach_data);
    let secs = t.elapsed().as_secs_f64();
    suite.record(10, "serialization", pass && secs < 1.0, detail, secs);

    let t = Instant::now();
    let (reach_pass, reach_detail) = contraction(&reach, &reach_policies[0].plain);
    let reach_contract_secs = t.elapsed().as_secs_f64();

    // pushL
    let t_push = Instant::now();
    let push = config(EnvName::PushL, &[Variant::DpFullChunked, Variant::Rti]);
    let (push_policies, report) = bench_env(&push, dir.path(), threads);
    let secs = t_push.elapsed().as_secs_f64();
    let gap = report.summary(Variant::Rti).unwrap().avg_score - report.summary(Variant::DpFullChunked).unwrap().avg_score;
    suite.record(
        3,
        "performance retention, pushL",
        gap.abs() <= 0.05 && secs <= ENV_BUDGET_S,
        format!("{} vs {}, gap {gap:+.3}", score_line(&report, Variant::Rti), score_line(&report, Variant::DpFullChunked)),
        secs,
    );
    latency.push((EnvName::PushL, latency_ratio(&report)));

    let t = Instant::now();
    let (push_pass, push_detail) = contraction(&push, &push_policies[0].plain);
    let secs = reach_contract_secs + t.elapsed().as_secs_f64();
    suite.record(6, "contractivity", reach_pass && push_pass, format!("{reach_detail}; {push_detail}"), secs);

    // K' selection against a grid of warm-started step counts.
    let t = Instant::now();
    let push_data = build_dataset(&push, 1.0).unwrap();
    let grid = [1, 2, 3, 5, 10];
    let mut grid_scores = Vec::new();
    for &k in &grid {
        let mut c = push.clone();
        c.sampler.rti_steps = steps_from(k);
        let mut total = 0.0;
        for sp in &push_policies {
            let results = rollout_episodes(&c, &sp.plain, Variant::Rti, EPISODES, threads).unwrap();
            total += results.iter().map(|r| r.score).sum::<f64>() / results.len() as f64;
        }
        grid_scores.push(total / push_policies.len() as f64);
    }
    let best = grid_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut chosen = Vec::new();
    let mut worst_loss: f64 = 0.0;
    for sp in &push_policies {
        let k = kprime_estimate(&push, &sp.plain, &push_data).unwrap().chosen;
        let mut c = push.clone();
        c.sampler.rti_steps = steps_from(k);
        let results = rollout_episodes(&c, &sp.plain, Variant::Rti, EPISODES, threads).unwrap();
        let score = results.iter().map(|r| r.score).sum::<f64>() / results.len() as f64;
        worst_loss = worst_loss.max(best - score);
        chosen.push(format!("K'={k} {score:.3}"));
    }
    let g: Vec<String> = grid.iter().zip(&grid_scores).map(|(k, s)| format!("{k}:{s:.3}")).collect();
    suite.record(
        9,
        "K' estimation, pushL",
        worst_loss <= 0.05,
        format!("chosen per seed [{}], grid [{}], worst loss {worst_loss:.3}", chosen.join(", "), g.join(" ")),
        t.elapsed().as_secs_f64(),
    );

    // pick_discrete
    let t = Instant::now();
    let pick = config(EnvName::PickDiscrete, &[Variant::DpFullChunked, Variant::Rti, Variant::RtiClip, Variant::RtiScale]);
    let (_, report) = bench_env(&pick, dir.path(), threads);
    let secs = t.elapsed().as_secs_f64();
    let avg = |v| report.summary(v).unwrap().avg_score;
    let degrade = avg(Variant::RtiScale) - avg(Variant::Rti);
    let scale_gap = avg(Variant::RtiScale) - avg(Variant::DpFullChunked);
    suite.record(
        4,
        "discrete actions, pick_discrete",
        degrade >= 0.10 && scale_gap.abs() <= 0.05 && secs <= ENV_BUDGET_S,
        format!(
            "{}, {}, {}, {}; RTI-scale minus RTI {degrade:+.3}, RTI-scale minus DP {scale_gap:+.3}",
            score_line(&report, Variant::Rti),
            score_line(&report, Variant::RtiClip),
            score_line(&report, Variant::RtiScale),
            score_line(&report, Variant::DpFullChunked)
        ),
        secs,
    );
    latency.push((EnvName::PickDiscrete, latency_ratio(&report)));

    let (lo, hi) = (0.03 * 0.75, 0.03 * 1.25);
    let pass = latency.iter().all(|(_, r)| (lo..=hi).contains(r));
    let parts: Vec<String> = latency.iter().map(|(e, r)| format!("{e} {r:.4}")).collect();
    suite.record(
        2,
        "speed scaling",
        pass,
        format!("RTI / full median latency: {} (band [{lo:.4}, {hi:.4}])", parts.join(", ")),
        0.0,
    );

    suite.checks.sort_by_key(|c| c.id);
    println!("\nsummary");
    let mut failed = 0;
    for c in &suite.checks {
        failed += usize::from(!c.pass);
        let status = if c.pass { "PASS" } else { "FAIL" };
        println!("{status} {:>2}. {} ({:.1} s): {}", c.id, c.name, c.secs, c.detail);
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
