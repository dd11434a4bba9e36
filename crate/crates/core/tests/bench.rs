use rtidp::bench::{prepare_policies, read_rows_csv, run_bench, write_rows_csv, BenchRow, Variant};
use rtidp::config::RunConfig;
use rtidp::envs::EnvName;
use rtidp::sampler::steps_from;

fn tiny(env: EnvName) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.env.name = env;
    cfg.env.demos = 8;
    cfg.model.hidden_width = 24;
    cfg.model.hidden_layers = 2;
    cfg.schedule.steps = 20;
    cfg.train.epochs = 3;
    cfg.bench.episodes = 4;
    cfg.bench.training_seeds = vec![0, 1];
    cfg.bench.latency_episodes = 1;
    cfg
}

fn masked(rows: &[BenchRow]) -> Vec<BenchRow> {
    rows.iter()
        .map(|r| BenchRow {
            latency_us_median: 0.0,
            latency_us_p95: 0.0,
            speedup_vs_full: 0.0,
            ..r.clone()
        })
        .collect()
}

#[test]
fn reruns_reproduce_every_non_timing_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(EnvName::PickDiscrete);
    let first = run_bench(&cfg, &prepare_policies(&cfg, dir.path()).unwrap(), 2).unwrap();
    // The second run loads the checkpoints the first one saved.
    let second = run_bench(&cfg, &prepare_policies(&cfg, dir.path()).unwrap(), 1).unwrap();
    assert_eq!(first.rows.len(), Variant::ALL.len() * 2 * 4);
    assert_eq!(masked(&first.rows), masked(&second.rows));

    let write = |rows: &[BenchRow]| {
        let mut buf = Vec::new();
        write_rows_csv(&mut buf, &masked(rows)).unwrap();
        buf
    };
    assert_eq!(write(&first.rows), write(&second.rows));
    assert_eq!(read_rows_csv(&write(&first.rows)[..]).unwrap(), masked(&first.rows));

    for s in &first.summaries {
        assert!(s.seed_scores.iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(s.latency_us_median > 0.0 && s.latency_us_p95 >= s.latency_us_median);
    }
    // Pick has a discrete gripper, so RTI-scale runs its own checkpoint.
    let hash = |v: Variant| first.rows.iter().find(|r| r.variant == v).unwrap().checkpoint_hash.clone();
    assert_ne!(hash(Variant::Rti), hash(Variant::RtiScale));
    assert_eq!(hash(Variant::Rti), hash(Variant::RtiClip));
}

#[test]
fn rti_over_all_steps_is_per_step_full_denoising() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(EnvName::Reach2dBimodal);
    cfg.sampler.rti_steps = steps_from(cfg.schedule.steps);
    cfg.bench.variants = vec![Variant::DpFullPerStep, Variant::Rti];
    let report = run_bench(&cfg, &prepare_policies(&cfg, dir.path()).unwrap(), 1).unwrap();
    let scores = |v: Variant| -> Vec<f64> { report.rows.iter().filter(|r| r.variant == v).map(|r| r.score).collect() };
    assert_eq!(scores(Variant::DpFullPerStep), scores(Variant::Rti));
    let ratio = report.summary(Variant::Rti).unwrap().latency_us_median
        / report.summary(Variant::DpFullPerStep).unwrap().latency_us_median;
    assert!((0.5..2.0).contains(&ratio), "latency ratio {ratio}");
}

#[test]
fn continuous_tasks_share_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(EnvName::Reach2dBimodal);
    cfg.bench.training_seeds = vec![4];
    let policies = prepare_policies(&cfg, dir.path()).unwrap();
    assert!(policies[0].scaled.is_none());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}
