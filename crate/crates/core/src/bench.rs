//! Paired evaluation of policy variants across training seeds. Scores come
//! from parallel rollouts, latency from a separate single-threaded pass.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::envs::{make_env, EnvName};
use crate::error::{Error, Result};
use crate::pipeline::{build_dataset, checkpoint_path, rollout_episodes, train_policy};
use crate::policy::Policy;
use crate::sampler::{latency_stats, rollout, short_hash, Execution, SamplerConfig};

/// Environment variable capping the number of parallel rollouts.
pub const THREADS_ENV: &str = "RTIDP_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Full denoising, first `executed` actions run open loop.
    #[serde(rename = "DP-full-chunked")]
    DpFullChunked,
    /// Full denoising every step, first action executed.
    #[serde(rename = "DP-full-per-step")]
    DpFullPerStep,
    #[serde(rename = "RTI")]
    Rti,
    /// RTI on the unscaled policy with the discrete guess divided by the
    /// factor.
    #[serde(rename = "RTI-clip")]
    RtiClip,
    /// RTI on a policy trained with discrete dimensions divided by the
    /// factor.
    #[serde(rename = "RTI-scale")]
    RtiScale,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::DpFullChunked,
        Variant::DpFullPerStep,
        Variant::Rti,
        Variant::RtiClip,
        Variant::RtiScale,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::DpFullChunked => "DP-full-chunked",
            Variant::DpFullPerStep => "DP-full-per-step",
            Variant::Rti => "RTI",
            Variant::RtiClip => "RTI-clip",
            Variant::RtiScale => "RTI-scale",
        }
    }

    pub fn is_full(self) -> bool {
        matches!(self, Variant::DpFullChunked | Variant::DpFullPerStep)
    }

    pub fn execution(self, executed: usize) -> Execution {
        match self {
            Variant::DpFullChunked => Execution::Chunked { executed },
            Variant::DpFullPerStep => Execution::Chunked { executed: 1 },
            _ => Execution::Rti,
        }
    }

    pub fn sampler(self, base: &SamplerConfig) -> SamplerConfig {
        SamplerConfig {
            scale_guess: self == Variant::RtiClip,
            ..base.clone()
        }
    }

    /// Descriptor of the reverse steps each warm-started prediction runs.
    pub fn steps_label(self, sampler: &SamplerConfig, total_steps: usize) -> String {
        if self.is_full() || sampler.rti_steps[0] == total_steps {
            format!("{total_steps}..1")
        } else {
            sampler.rti_steps.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.as_str()).collect();
                Error::invalid(format!("unknown variant {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointMode {
    /// Train and save any checkpoint that is not on disk yet.
    Train,
    /// Require every checkpoint to exist.
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub episodes: usize,
    pub training_seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Open-loop prefix of the chunked baseline.
    pub executed: usize,
    /// Episode `i` resets the environment with seed `env_seed + i`.
    pub env_seed: u64,
    /// Episodes per variant and checkpoint in the single-threaded latency
    /// pass.
    pub latency_episodes: usize,
    /// Count the initial full denoise of warm-started rollouts in latency.
    pub include_initial: bool,
    pub checkpoints: CheckpointMode,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            episodes: 100,
            training_seeds: vec![0, 1, 2],
            variants: Variant::ALL.to_vec(),
            executed: 4,
            env_seed: 10_000,
            latency_episodes: 3,
            include_initial: false,
            checkpoints: CheckpointMode::Train,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.episodes == 0 || self.latency_episodes == 0 {
            return Err(Error::invalid("bench.episodes and bench.latency_episodes must be at least 1"));
        }
        if self.training_seeds.is_empty() || self.variants.is_empty() {
            return Err(Error::invalid("bench.training_seeds and bench.variants must be non-empty"));
        }
        if self.executed == 0 || self.executed > horizon {
            return Err(Error::invalid(format!("bench.executed must lie in 1..={horizon}")));
        }
        Ok(())
    }
}

/// Checkpoints of one training seed.
#[derive(Debug, Clone)]
pub struct SeedPolicies {
    pub seed: u64,
    pub plain: Policy,
    /// Trained on discrete dimensions divided by the sampler's factor; only
    /// present for environments with discrete dimensions.
    pub scaled: Option<Policy>,
}

impl SeedPolicies {
    pub fn for_variant(&self, v: Variant) -> &Policy {
        match (v, &self.scaled) {
            (Variant::RtiScale, Some(p)) => p,
            _ => &self.plain,
        }
    }
}

/// Loads or trains the checkpoints of every training seed in `dir`.
pub fn prepare_policies(cfg: &RunConfig, dir: &Path) -> Result<Vec<SeedPolicies>> {
    let env = make_env(cfg.env.name, 0);
    let discrete = env.discrete_mask().iter().any(|&m| m);
    let needs_scaled = discrete && cfg.bench.variants.contains(&Variant::RtiScale);
    let factor = cfg.sampler.discrete_factor;
    let mut scales = vec![1.0];
    if needs_scaled {
        scales.push(factor);
    }
    let mut datasets: Vec<Option<crate::envs::Dataset>> = vec![None; scales.len()];
    let mut out = Vec::new();
    for &seed in &cfg.bench.training_seeds {
        let mut policies = Vec::new();
        for (i, &scale) in scales.iter().enumerate() {
            let path = checkpoint_path(dir, cfg.env.name, scale, seed);
            let policy = if path.exists() || cfg.bench.checkpoints == CheckpointMode::Load {
                Policy::load(&path)?
            } else {
                if datasets[i].is_none() {
                    datasets[i] = Some(build_dataset(cfg, scale)?);
                }
                let (p, report) = train_policy(cfg, datasets[i].as_ref().expect("built above"), seed)?;
                log::info!(
                    "trained {} seed {seed}: final loss {:.4}",
                    path.display(),
                    report.loss_curve.last().copied().unwrap_or(f64::NAN)
                );
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                p.save(&path)?;
                // Evaluate exactly what a later run will load.
                Policy::load(&path)?
            };
            if policy.env != cfg.env.name {
                return Err(Error::invalid(format!(
                    "{} holds a {} policy, expected {}",
                    path.display(),
                    policy.env,
                    cfg.env.name
                )));
            }
            policies.push(policy);
        }
        let scaled = if needs_scaled { policies.pop() } else { None };
        out.push(SeedPolicies {
            seed,
            plain: policies.pop().expect("plain policy"),
            scaled,
        });
    }
    Ok(out)
}

/// Parallelism for score rollouts: `RTIDP_THREADS` if set, otherwise the
/// available cores.
pub fn thread_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::invalid(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: Variant,
    pub env: EnvName,
    /// Training seed of the checkpoint.
    pub seed: u64,
    pub episode: usize,
    pub score: f64,
    pub n_predictions: usize,
    pub latency_us_median: f64,
    pub latency_us_p95: f64,
    pub rti_steps: String,
    pub speedup_vs_full: f64,
    pub config_hash: String,
    pub checkpoint_hash: String,
}

pub const CSV_HEADER: [&str; 12] = [
    "variant",
    "env",
    "seed",
    "episode",
    "score",
    "n_predictions",
    "latency_us_median",
    "latency_us_p95",
    "rti_steps",
    "speedup_vs_full",
    "config_hash",
    "checkpoint_hash",
];

#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    /// Mean episode score per training seed, in seed order.
    pub seed_scores: Vec<f64>,
    pub max_score: f64,
    pub avg_score: f64,
    /// Pooled per-prediction latency of the single-threaded pass.
    pub latency_us_median: f64,
    pub latency_us_p95: f64,
    /// Full-denoise median latency over this variant's median latency.
    pub speedup_vs_full: f64,
    pub mode_switches: usize,
    pub mode_pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub env: EnvName,
    pub rows: Vec<BenchRow>,
    pub summaries: Vec<VariantSummary>,
    /// Median per-prediction latency of full denoising, single-threaded.
    pub full_latency_us: f64,
    pub config_hash: String,
    pub host: String,
}

impl BenchReport {
    pub fn summary(&self, v: Variant) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == v)
    }
}

/// Short description of the machine the latencies were measured on.
pub fn host_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{} {} / {cpu} / {cores} cores", std::env::consts::OS, std::env::consts::ARCH)
}

/// Runs every configured variant on every checkpoint over the same
/// environment seeds.
pub fn run_bench(cfg: &RunConfig, policies: &[SeedPolicies], threads: usize) -> Result<BenchReport> {
    cfg.validate()?;
    let b = &cfg.bench;
    let env_name = cfg.env.name;
    let config_hash = short_hash(&cfg.to_toml());
    let include = b.include_initial;

    // Single-threaded latency pass, including the full-denoise reference.
    // The first measured prediction is a warm-up and is dropped.
    let latency_pass = |policy: &Policy, sampler: &SamplerConfig, execution: Execution| -> Result<Vec<f64>> {
        let mut env = make_env(env_name, 0);
        let mut pooled = Vec::new();
        for i in 0..b.latency_episodes {
            let r = rollout(env.as_mut(), policy, sampler, execution, i, b.env_seed + i as u64)?;
            let skip = usize::from(!include && r.latencies_us.len() > 1 && execution == Execution::Rti);
            pooled.extend_from_slice(&r.latencies_us[skip..]);
        }
        if pooled.len() > 1 {
            pooled.remove(0);
        }
        Ok(pooled)
    };
    let mut full_pool = Vec::new();
    for sp in policies {
        full_pool.extend(latency_pass(&sp.plain, &cfg.sampler, Execution::Chunked { executed: b.executed })?);
    }
    let full_latency = latency_stats(&full_pool).median;

    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for &variant in &b.variants {
        let sampler = variant.sampler(&cfg.sampler);
        let execution = variant.execution(b.executed);
        let mut seed_scores = Vec::new();
        let mut lat_pool = Vec::new();
        let (mut switches, mut pairs) = (0, 0);
        let mut variant_rows = Vec::new();
        for sp in policies {
            let policy = sp.for_variant(variant);
            let checkpoint_hash = policy.content_hash()?;
            let steps_label = variant.steps_label(&sampler, policy.schedule.total_steps());
            let results = rollout_episodes(cfg, policy, variant, b.episodes, threads)?;
            lat_pool.extend(latency_pass(policy, &sampler, execution)?);
            seed_scores.push(results.iter().map(|r| r.score).sum::<f64>() / results.len() as f64);
            for r in &results {
                switches += r.mode_switches;
                pairs += r.mode_pairs();
                let lat = if execution == Execution::Rti { r.latency(include) } else { r.latency(true) };
                variant_rows.push(BenchRow {
                    variant,
                    env: env_name,
                    seed: sp.seed,
                    episode: r.episode_id,
                    score: r.score,
                    n_predictions: r.n_predictions,
                    latency_us_median: lat.median,
                    latency_us_p95: lat.p95,
                    rti_steps: steps_label.clone(),
                    speedup_vs_full: 0.0,
                    config_hash: config_hash.clone(),
                    checkpoint_hash: checkpoint_hash.clone(),
                });
            }
        }
        let lat = latency_stats(&lat_pool);
        let speedup = if lat.median > 0.0 { full_latency / lat.median } else { 0.0 };
        for r in &mut variant_rows {
            r.speedup_vs_full = speedup;
        }
        rows.extend(variant_rows);
        summaries.push(VariantSummary {
            variant,
            max_score: seed_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            avg_score: seed_scores.iter().sum::<f64>() / seed_scores.len() as f64,
            seed_scores,
            latency_us_median: lat.median,
            latency_us_p95: lat.p95,
            speedup_vs_full: speedup,
            mode_switches: switches,
            mode_pairs: pairs,
        });
    }
    Ok(BenchReport {
        env: env_name,
        rows,
        summaries,
        full_latency_us: full_latency,
        config_hash,
        host: host_descriptor(),
    })
}

/// Writes one CSV row per episode; an empty slice yields only the header.
pub fn write_rows_csv<W: Write>(out: W, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.variant.to_string(),
            r.env.to_string(),
            r.seed.to_string(),
            r.episode.to_string(),
            r.score.to_string(),
            r.n_predictions.to_string(),
            r.latency_us_median.to_string(),
            r.latency_us_p95.to_string(),
            r.rti_steps.clone(),
            r.speedup_vs_full.to_string(),
            r.config_hash.clone(),
            r.checkpoint_hash.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Parses rows written by [`write_rows_csv`].
pub fn read_rows_csv<R: Read>(input: R) -> Result<Vec<BenchRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::invalid(format!("unexpected bench CSV header: {header:?}")));
    }
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |col: &str| Error::invalid(format!("row {}: bad {col} {:?}", line + 1, rec.get(CSV_HEADER.iter().position(|c| c == &col).unwrap_or(0))));
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(CSV_HEADER[i]));
        rows.push(BenchRow {
            variant: rec[0].parse()?,
            env: rec[1].parse()?,
            seed: rec[2].parse().map_err(|_| bad("seed"))?,
            episode: rec[3].parse().map_err(|_| bad("episode"))?,
            score: num(4)?,
            n_predictions: rec[5].parse().map_err(|_| bad("n_predictions"))?,
            latency_us_median: num(6)?,
            latency_us_p95: num(7)?,
            rti_steps: rec[8].to_string(),
            speedup_vs_full: num(9)?,
            config_hash: rec[10].to_string(),
            checkpoint_hash: rec[11].to_string(),
        });
    }
    Ok(rows)
}

/// Plain-text table of the per-variant summaries.
pub fn report_table(report: &BenchReport) -> String {
    let mut s = format!(
        "env {}  config {}  host {}\nfull-denoise latency (median) {:.1} us\n",
        report.env, report.config_hash, report.host, report.full_latency_us
    );
    s += &format!(
        "{:<18} {:>9} {:>9} {:>12} {:>12} {:>9} {:>14}\n",
        "variant", "max", "average", "median_us", "p95_us", "speedup", "mode_switches"
    );
    for v in &report.summaries {
        s += &format!(
            "{:<18} {:>9.3} {:>9.3} {:>12.1} {:>12.1} {:>9.2} {:>14}\n",
            v.variant.as_str(),
            v.max_score,
            v.avg_score,
            v.latency_us_median,
            v.latency_us_p95,
            v.speedup_vs_full,
            format!("{}/{}", v.mode_switches, v.mode_pairs)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: Variant) -> BenchRow {
        BenchRow {
            variant: v,
            env: EnvName::PushL,
            seed: 2,
            episode: 7,
            score: 0.812_345_678_901_234_5,
            n_predictions: 150,
            latency_us_median: 171.333_333_333_333_3,
            latency_us_p95: 190.1,
            rti_steps: "3;2;1".into(),
            speedup_vs_full: 33.1,
            config_hash: "00ff00ff00ff00ff".into(),
            checkpoint_hash: "ab".repeat(32),
        }
    }

    #[test]
    fn empty_csv_is_header_only() {
        let mut buf = Vec::new();
        write_rows_csv(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), CSV_HEADER.join(",") + "\n");
    }

    #[test]
    fn csv_parses_back_identically() {
        let rows: Vec<_> = Variant::ALL.into_iter().map(row).collect();
        let mut buf = Vec::new();
        write_rows_csv(&mut buf, &rows[..1]).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 2);
        buf.clear();
        write_rows_csv(&mut buf, &rows).unwrap();
        assert_eq!(read_rows_csv(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("rti-scale".parse::<Variant>().unwrap(), Variant::RtiScale);
        assert!("DP".parse::<Variant>().is_err());
    }

    #[test]
    fn missing_checkpoint_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.bench.checkpoints = CheckpointMode::Load;
        let err = prepare_policies(&cfg, dir.path()).unwrap_err();
        let expected = checkpoint_path(dir.path(), cfg.env.name, 1.0, 0);
        assert!(err.to_string().contains(&expected.display().to_string()), "{err}");
    }
}
