//! `rtidp`: data generation, training, rollouts, benchmarks and
//! contractivity diagnostics for warm-started diffusion policies.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rtidp::bench::{self, Variant};
use rtidp::config::{RunConfig, DEFAULT_CONFIG_TOML};
use rtidp::envs::{Dataset, EnvName};
use rtidp::pipeline;
use rtidp::sampler::{short_hash, write_episode_csv};
use rtidp::Policy;

#[derive(Parser)]
#[command(name = "rtidp", version, about = "Warm-started diffusion policy toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record expert demonstrations (`--seed` sets env.seed).
    GenData(GenData),
    /// Train a policy checkpoint (`--seed` sets train.seed).
    Train(Train),
    /// Roll out one variant of a checkpoint (`--seed` sets sampler.seed).
    Rollout(Rollout),
    /// Benchmark variants across training seeds (`--seed` sets sampler.seed).
    Bench(Bench),
    /// Lipschitz estimate, contraction factors and decay (`--seed` sets contract.seed).
    Contract(Contract),
    /// Choose the number of warm-started steps (`--seed` sets contract.seed).
    EstimateKprime(EstimateKprime),
    /// Print the bundled default configuration.
    DefaultConfig,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; missing keys take the bundled defaults
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed override for this subcommand [default: 0, env.seed 1]
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR", default_value = "runs")]
    out: PathBuf,
    /// Environment: reach2d_bimodal, pushL or pick_discrete [default: reach2d_bimodal]
    #[arg(long, value_name = "NAME")]
    env: Option<EnvName>,
    /// Warm-started reverse steps, comma-separated and descending [default: 3,2,1]
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    steps: Option<Vec<usize>>,
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    /// Dataset written by gen-data; generated from the config when absent
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct Rollout {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// DP-full-chunked, DP-full-per-step, RTI, RTI-clip or RTI-scale
    #[arg(long, value_name = "NAME", default_value = "RTI")]
    variant: Variant,
    /// Episodes to run [default: bench.episodes, 100]
    #[arg(long, value_name = "N")]
    episodes: Option<usize>,
}

#[derive(Args)]
struct Bench {
    #[command(flatten)]
    common: Common,
    /// Checkpoint directory; missing checkpoints are trained there unless
    /// bench.checkpoints = "load" [default: the output directory]
    #[arg(long, value_name = "DIR")]
    checkpoints: Option<PathBuf>,
    /// Benchmark only this variant [default: every variant in bench.variants]
    #[arg(long, value_name = "NAME")]
    variant: Option<Variant>,
    /// Episodes per variant and seed [default: bench.episodes, 100]
    #[arg(long, value_name = "N")]
    episodes: Option<usize>,
}

#[derive(Args)]
struct Contract {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Dataset to probe at; generated from the config when absent
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateKprime {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Dataset to draw transitions from; generated from the config when absent
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
}

/// Which configuration field `--seed` overrides.
enum SeedTarget {
    Env,
    Train,
    Sampler,
    Contract,
}

impl Common {
    /// Defaults, then the config file, then flags.
    fn config(&self, seed_target: SeedTarget) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::from_toml(DEFAULT_CONFIG_TOML)?,
        };
        if let Some(env) = self.env {
            cfg.env.name = env;
        }
        if let Some(steps) = &self.steps {
            cfg.sampler.rti_steps = steps.clone();
        }
        if let Some(seed) = self.seed {
            match seed_target {
                SeedTarget::Env => cfg.env.seed = seed,
                SeedTarget::Train => cfg.train.seed = seed,
                SeedTarget::Sampler => cfg.sampler.seed = seed,
                SeedTarget::Contract => cfg.contract.seed = seed,
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Creates the output directory and records the effective config in it.
    fn prepare_out(&self, cfg: &RunConfig) -> Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("cannot create {}", self.out.display()))?;
        write_file(&self.out.join("config.toml"), cfg.to_toml().as_bytes())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot write {}", path.display()))?))
}

fn dataset_for(cfg: &RunConfig, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(path) => Ok(Dataset::load(path)?),
        None => Ok(pipeline::build_dataset(cfg, cfg.env.discrete_scale)?),
    }
}

/// Loads a checkpoint and aligns the config's environment with it.
fn load_policy(cfg: &mut RunConfig, path: &Path) -> Result<Policy> {
    let policy = Policy::load(path)?;
    cfg.env.name = policy.env;
    if policy.schedule.total_steps() != cfg.schedule.steps {
        bail!(
            "{} was trained with {} diffusion steps but schedule.steps is {}",
            path.display(),
            policy.schedule.total_steps(),
            cfg.schedule.steps
        );
    }
    Ok(policy)
}

fn gen_data(args: &GenData) -> Result<()> {
    let cfg = args.common.config(SeedTarget::Env)?;
    args.common.prepare_out(&cfg)?;
    let ds = pipeline::build_dataset(&cfg, cfg.env.discrete_scale)?;
    let path = args.common.out.join(format!("{}.data", cfg.env.name));
    ds.save(&path)?;
    println!(
        "{}: {} samples from {} episodes ({} discarded)",
        path.display(),
        ds.len(),
        ds.episodes_kept,
        ds.episodes_discarded
    );
    Ok(())
}

fn train(args: &Train) -> Result<()> {
    let mut cfg = args.common.config(SeedTarget::Train)?;
    let ds = dataset_for(&cfg, args.data.as_deref())?;
    cfg.env.name = ds.meta.env;
    args.common.prepare_out(&cfg)?;
    let (policy, report) = pipeline::train_policy(&cfg, &ds, cfg.train.seed)?;
    let path = pipeline::checkpoint_path(&args.common.out, cfg.env.name, cfg.env.discrete_scale, cfg.train.seed);
    policy.save(&path)?;
    let loss_path = path.with_extension("loss.csv");
    pipeline::write_loss_csv(create(&loss_path)?, &report)?;
    println!(
        "{}: final loss {:.5} (eval {:.5})",
        path.display(),
        report.loss_curve.last().copied().unwrap_or(f64::NAN),
        report.eval_curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn rollout(args: &Rollout) -> Result<()> {
    let mut cfg = args.common.config(SeedTarget::Sampler)?;
    let policy = load_policy(&mut cfg, &args.checkpoint)?;
    args.common.prepare_out(&cfg)?;
    let episodes = args.episodes.unwrap_or(cfg.bench.episodes);
    let results = pipeline::rollout_episodes(&cfg, &policy, args.variant, episodes, bench::thread_count()?)?;
    let path = args.common.out.join(format!("rollout-{}-{}.csv", cfg.env.name, args.variant));
    write_episode_csv(create(&path)?, &results, &short_hash(&cfg.to_toml()))?;
    let mean = results.iter().map(|r| r.score).sum::<f64>() / results.len().max(1) as f64;
    println!("{}: {} episodes, mean score {mean:.3}", path.display(), results.len());
    Ok(())
}

fn run_bench(args: &Bench) -> Result<()> {
    let mut cfg = args.common.config(SeedTarget::Sampler)?;
    if let Some(v) = args.variant {
        cfg.bench.variants = vec![v];
    }
    if let Some(n) = args.episodes {
        cfg.bench.episodes = n;
    }
    cfg.validate()?;
    args.common.prepare_out(&cfg)?;
    let dir = args.checkpoints.as_deref().unwrap_or(&args.common.out);
    let policies = bench::prepare_policies(&cfg, dir)?;
    let report = bench::run_bench(&cfg, &policies, bench::thread_count()?)?;
    let csv_path = args.common.out.join(format!("bench-{}.csv", cfg.env.name));
    bench::write_rows_csv(create(&csv_path)?, &report.rows)?;
    let table = bench::report_table(&report);
    write_file(&args.common.out.join(format!("bench-{}.txt", cfg.env.name)), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn contract(args: &Contract) -> Result<()> {
    let mut cfg = args.common.config(SeedTarget::Contract)?;
    let policy = load_policy(&mut cfg, &args.checkpoint)?;
    let ds = dataset_for(&cfg, args.data.as_deref())?;
    args.common.prepare_out(&cfg)?;
    let report = pipeline::contract_report(&cfg, &policy, &ds)?;
    let out = &args.common.out;
    report.write_constants_csv(create(&out.join("contract-constants.csv"))?)?;
    report.write_decay_csv(create(&out.join("contract-decay.csv"))?)?;
    let summary = report.summary();
    write_file(&out.join("contract-summary.txt"), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

fn estimate_kprime(args: &EstimateKprime) -> Result<()> {
    let mut cfg = args.common.config(SeedTarget::Contract)?;
    let policy = load_policy(&mut cfg, &args.checkpoint)?;
    let ds = dataset_for(&cfg, args.data.as_deref())?;
    args.common.prepare_out(&cfg)?;
    let est = pipeline::kprime_estimate(&cfg, &policy, &ds)?;
    let mut csv = String::from("k,mean_deviation,chosen\n");
    for (k, d) in &est.curve {
        csv += &format!("{k},{d},{}\n", u8::from(*k == est.chosen));
    }
    write_file(&args.common.out.join("kprime.csv"), csv.as_bytes())?;
    println!("K' = {}", est.chosen);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Rollout(a) => rollout(a),
        Command::Bench(a) => run_bench(a),
        Command::Contract(a) => contract(a),
        Command::EstimateKprime(a) => estimate_kprime(a),
        Command::DefaultConfig => {
            print!("{DEFAULT_CONFIG_TOML}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
