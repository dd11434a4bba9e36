use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{make_env, EnvName};
use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::net::TrainingData;

const DATA_MAGIC: &[u8] = b"RTIDPDATA";
const DATA_VERSION: u32 = 1;
/// Steps recorded after the expert reports the task finished.
const TAIL_STEPS: usize = 8;
/// A discrete dimension is flagged when its largest jump exceeds the
/// continuous bound by more than this factor.
pub const FLAG_SLACK: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub env: EnvName,
    pub horizon: usize,
    pub action_dim: usize,
    pub obs_dim: usize,
    pub obs_history: usize,
    pub discrete_mask: Vec<bool>,
}

impl DatasetMeta {
    pub fn chunk_len(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn cond_len(&self) -> usize {
        self.obs_history * self.obs_dim
    }
}

/// One training pair in environment units: the observation history ending
/// at step `t` (oldest first) and the `horizon` expert actions from `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub episode: u32,
    pub t: u32,
    pub cond: Vec<f64>,
    pub chunk: Vec<f64>,
}

/// Min/max normalization to `[-1, 1]`. Discrete action dimensions pass
/// through unchanged; `discrete_scale` is the factor they were divided by in
/// the dataset and is undone when actions go back to the environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub action_lo: Vec<f64>,
    pub action_hi: Vec<f64>,
    pub obs_lo: Vec<f64>,
    pub obs_hi: Vec<f64>,
    pub discrete_mask: Vec<bool>,
    pub discrete_scale: f64,
}

fn to_unit(x: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        2.0 * (x - lo) / (hi - lo) - 1.0
    } else {
        0.0
    }
}

fn from_unit(n: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        lo + 0.5 * (n + 1.0) * (hi - lo)
    } else {
        lo
    }
}

impl Normalizer {
    pub fn fit(meta: &DatasetMeta, samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("cannot fit a normalizer on an empty dataset"));
        }
        let (d, o) = (meta.action_dim, meta.obs_dim);
        let mut n = Normalizer {
            action_lo: vec![f64::INFINITY; d],
            action_hi: vec![f64::NEG_INFINITY; d],
            obs_lo: vec![f64::INFINITY; o],
            obs_hi: vec![f64::NEG_INFINITY; o],
            discrete_mask: meta.discrete_mask.clone(),
            discrete_scale: 1.0,
        };
        for s in samples {
            for row in s.chunk.chunks_exact(d) {
                for (j, &v) in row.iter().enumerate() {
                    n.action_lo[j] = n.action_lo[j].min(v);
                    n.action_hi[j] = n.action_hi[j].max(v);
                }
            }
            for row in s.cond.chunks_exact(o) {
                for (j, &v) in row.iter().enumerate() {
                    n.obs_lo[j] = n.obs_lo[j].min(v);
                    n.obs_hi[j] = n.obs_hi[j].max(v);
                }
            }
        }
        Ok(n)
    }

    pub fn action_dim(&self) -> usize {
        self.action_lo.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_lo.len()
    }

    /// Continuous action dimensions with zero range; they normalize to 0.
    pub fn degenerate_dims(&self) -> Vec<usize> {
        (0..self.action_dim())
            .filter(|&j| !self.discrete_mask[j] && self.action_hi[j] <= self.action_lo[j])
            .collect()
    }

    /// Normalizes a row-major block of actions.
    pub fn normalize_actions(&self, raw: &[f64]) -> Vec<f64> {
        let d = self.action_dim();
        raw.iter()
            .enumerate()
            .map(|(i, &x)| {
                let j = i % d;
                if self.discrete_mask[j] {
                    x
                } else {
                    to_unit(x, self.action_lo[j], self.action_hi[j])
                }
            })
            .collect()
    }

    pub fn denormalize_actions(&self, norm: &[f64]) -> Vec<f64> {
        let d = self.action_dim();
        norm.iter()
            .enumerate()
            .map(|(i, &x)| {
                let j = i % d;
                if self.discrete_mask[j] {
                    x
                } else {
                    from_unit(x, self.action_lo[j], self.action_hi[j])
                }
            })
            .collect()
    }

    /// Converts one normalized model action into the action the environment
    /// executes: continuous dims are denormalized and discrete dims rescaled.
    pub fn to_env_action(&self, norm: &[f64]) -> Vec<f64> {
        let mut a = self.denormalize_actions(norm);
        for (j, v) in a.iter_mut().enumerate() {
            if self.discrete_mask[j] {
                *v *= self.discrete_scale;
            }
        }
        a
    }

    /// Normalizes observations; `raw` may hold several stacked frames.
    pub fn normalize_obs(&self, raw: &[f64]) -> Vec<f64> {
        let o = self.obs_dim();
        raw.iter()
            .enumerate()
            .map(|(i, &x)| to_unit(x, self.obs_lo[i % o], self.obs_hi[i % o]))
            .collect()
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.flags(&self.discrete_mask);
        w.f32(self.discrete_scale);
        w.f32s(&self.action_lo);
        w.f32s(&self.action_hi);
        w.f32s(&self.obs_lo);
        w.f32s(&self.obs_hi);
    }

    pub(crate) fn read(r: &mut Reader<'_>, action_dim: usize, obs_dim: usize) -> Result<Self> {
        let discrete_mask = r.flags(action_dim, "discrete mask")?;
        let at = r.offset();
        let discrete_scale = r.f32("discrete scale")?;
        if !(discrete_scale > 0.0) || !discrete_scale.is_finite() {
            return Err(Error::Format {
                offset: at,
                message: format!("discrete scale must be positive, got {discrete_scale}"),
            });
        }
        Ok(Normalizer {
            discrete_mask,
            discrete_scale,
            action_lo: r.f32s(action_dim, "action minimum")?,
            action_hi: r.f32s(action_dim, "action maximum")?,
            obs_lo: r.f32s(obs_dim, "observation minimum")?,
            obs_hi: r.f32s(obs_dim, "observation maximum")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub normalizer: Normalizer,
    pub samples: Vec<Sample>,
    pub episodes_kept: usize,
    pub episodes_discarded: usize,
}

/// Rolls out the scripted expert for `episodes` episodes and slices each
/// successful one into overlapping chunks. Failed demonstrations are
/// dropped and counted.
pub fn generate_demos(
    env_name: EnvName,
    episodes: usize,
    seed: u64,
    horizon: usize,
    obs_history: usize,
) -> Result<Dataset> {
    if episodes == 0 || horizon == 0 || obs_history == 0 {
        return Err(Error::invalid("episodes, horizon and obs_history must be positive"));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut env = make_env(env_name, 0);
    let meta = DatasetMeta {
        env: env_name,
        horizon,
        action_dim: env.action_dim(),
        obs_dim: env.obs_dim(),
        obs_history,
        discrete_mask: env.discrete_mask(),
    };
    let mut samples = Vec::new();
    let mut kept = 0usize;
    let mut discarded = 0usize;
    for _ in 0..episodes {
        let ep_seed = master.next_u64();
        let mut obs = vec![env.reset(ep_seed).values];
        let mut actions = Vec::new();
        let mut finished_at = None;
        for t in 0..env.episode_cap() {
            let a = env.expert_action();
            actions.push(a.clone());
            let o = env.step(&a).values;
            if finished_at.is_none() && env.solved() {
                finished_at = Some(t);
            }
            if finished_at.is_some_and(|f| t >= f + TAIL_STEPS) {
                break;
            }
            obs.push(o);
        }
        if env.score() < 1.0 {
            discarded += 1;
            continue;
        }
        let episode = kept as u32;
        kept += 1;
        let len = actions.len();
        for t in 0..len {
            let mut cond = Vec::with_capacity(meta.cond_len());
            for h in (0..obs_history).rev() {
                cond.extend_from_slice(&obs[t.saturating_sub(h)]);
            }
            let mut chunk = Vec::with_capacity(meta.chunk_len());
            for i in 0..horizon {
                chunk.extend_from_slice(&actions[(t + i).min(len - 1)]);
            }
            samples.push(Sample {
                episode,
                t: t as u32,
                cond,
                chunk,
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::invalid(format!(
            "expert failed all {episodes} episodes of {env_name}"
        )));
    }
    let normalizer = Normalizer::fit(&meta, &samples)?;
    log::info!("{env_name}: kept {kept} episodes, discarded {discarded}, {} samples", samples.len());
    Ok(Dataset {
        meta,
        normalizer,
        samples,
        episodes_kept: kept,
        episodes_discarded: discarded,
    })
}

/// Divides the discrete action dimensions by `factor` and records the
/// factor so executed actions are rescaled before reaching the environment.
pub fn scale_dataset_discrete(dataset: &Dataset, factor: f64) -> Result<Dataset> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::invalid(format!("discrete scale factor must be positive, got {factor}")));
    }
    let mut out = dataset.clone();
    let d = out.meta.action_dim;
    let mask = out.meta.discrete_mask.clone();
    for s in &mut out.samples {
        for (i, v) in s.chunk.iter_mut().enumerate() {
            if mask[i % d] {
                *v /= factor;
            }
        }
    }
    for j in 0..d {
        if mask[j] {
            out.normalizer.action_lo[j] /= factor;
            out.normalizer.action_hi[j] /= factor;
        }
    }
    out.normalizer.discrete_scale *= factor;
    Ok(out)
}

/// Step-to-step changes of the executed (first) action of consecutive
/// samples, measured in normalized action space.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub per_dim_max: Vec<f64>,
    pub per_dim_mean: Vec<f64>,
    /// Largest Euclidean change over the continuous dimensions.
    pub continuous_max: f64,
    pub continuous_mean: f64,
    /// Discrete dimensions whose jumps exceed the continuous bound.
    pub flagged: Vec<usize>,
    /// Continuous dimensions with zero range.
    pub degenerate: Vec<usize>,
    pub transitions: usize,
}

impl ConsistencyReport {
    pub fn to_text(&self) -> String {
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
        format!(
            "transitions={}\ncontinuous_max={:.6}\ncontinuous_mean={:.6}\nper_dim_max={}\nper_dim_mean={}\nflagged={:?}\ndegenerate={:?}\n",
            self.transitions,
            self.continuous_max,
            self.continuous_mean,
            fmt(&self.per_dim_max),
            fmt(&self.per_dim_mean),
            self.flagged,
            self.degenerate
        )
    }
}

pub fn dataset_consistency_report(dataset: &Dataset) -> ConsistencyReport {
    let d = dataset.meta.action_dim;
    let mask = &dataset.meta.discrete_mask;
    let norm = &dataset.normalizer;
    let mut per_dim_max = vec![0.0f64; d];
    let mut per_dim_sum = vec![0.0f64; d];
    let mut cont_max = 0.0f64;
    let mut cont_sum = 0.0;
    let mut n = 0usize;
    for pair in dataset.samples.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.episode != b.episode || b.t != a.t + 1 {
            continue;
        }
        let x = norm.normalize_actions(&a.chunk[..d]);
        let y = norm.normalize_actions(&b.chunk[..d]);
        let mut sq = 0.0;
        for j in 0..d {
            let diff = (y[j] - x[j]).abs();
            per_dim_max[j] = per_dim_max[j].max(diff);
            per_dim_sum[j] += diff;
            if !mask[j] {
                sq += diff * diff;
            }
        }
        cont_max = cont_max.max(sq.sqrt());
        cont_sum += sq.sqrt();
        n += 1;
    }
    let denom = n.max(1) as f64;
    let flagged = (0..d)
        .filter(|&j| mask[j] && per_dim_max[j] > FLAG_SLACK * cont_max)
        .collect();
    ConsistencyReport {
        per_dim_mean: per_dim_sum.iter().map(|s| s / denom).collect(),
        per_dim_max,
        continuous_max: cont_max,
        continuous_mean: cont_sum / denom,
        flagged,
        degenerate: norm.degenerate_dims(),
        transitions: n,
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Normalized pairs ready for training.
    pub fn training_data(&self) -> TrainingData {
        let mut chunks = Vec::with_capacity(self.len() * self.meta.chunk_len());
        let mut conds = Vec::with_capacity(self.len() * self.meta.cond_len());
        for s in &self.samples {
            chunks.extend(self.normalizer.normalize_actions(&s.chunk));
            conds.extend(self.normalizer.normalize_obs(&s.cond));
        }
        TrainingData {
            chunk_len: self.meta.chunk_len(),
            cond_len: self.meta.cond_len(),
            chunks,
            conds,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.meta;
        let mut w = Writer::new(DATA_MAGIC, DATA_VERSION);
        w.str(m.env.as_str())?;
        w.usize(m.horizon)?;
        w.usize(m.action_dim)?;
        w.usize(m.obs_dim)?;
        w.usize(m.obs_history)?;
        self.normalizer.write(&mut w);
        w.usize(self.episodes_kept)?;
        w.usize(self.episodes_discarded)?;
        w.usize(self.samples.len())?;
        for s in &self.samples {
            w.u32(s.episode);
            w.u32(s.t);
            w.f32s(&s.cond);
            w.f32s(&s.chunk);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, version) = Reader::open(bytes, DATA_MAGIC)?;
        if version != DATA_VERSION {
            return Err(Error::Format {
                offset: DATA_MAGIC.len() as u64,
                message: format!("unsupported dataset version {version}"),
            });
        }
        let at = r.offset();
        let env: EnvName = r.str("environment name")?.parse().map_err(|e| Error::Format {
            offset: at,
            message: format!("{e}"),
        })?;
        let at = r.offset();
        let horizon = r.usize("horizon")?;
        let action_dim = r.usize("action dim")?;
        let obs_dim = r.usize("obs dim")?;
        let obs_history = r.usize("obs history")?;
        if horizon == 0 || action_dim == 0 || obs_dim == 0 || obs_history == 0 {
            return Err(Error::Format {
                offset: at,
                message: "dataset dimensions must be positive".into(),
            });
        }
        let normalizer = Normalizer::read(&mut r, action_dim, obs_dim)?;
        let meta = DatasetMeta {
            env,
            horizon,
            action_dim,
            obs_dim,
            obs_history,
            discrete_mask: normalizer.discrete_mask.clone(),
        };
        let episodes_kept = r.usize("episode count")?;
        let episodes_discarded = r.usize("discarded count")?;
        let n = r.usize("sample count")?;
        let mut samples = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            samples.push(Sample {
                episode: r.u32("episode id")?,
                t: r.u32("time index")?,
                cond: r.f32s(meta.cond_len(), "observations")?,
                chunk: r.f32s(meta.chunk_len(), "actions")?,
            });
        }
        r.finish()?;
        Ok(Dataset {
            meta,
            normalizer,
            samples,
            episodes_kept,
            episodes_discarded,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// One row per sample: episode, t, observation history, action chunk.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::invalid(format!("{other:?}")),
        })?;
        let m = &self.meta;
        let mut header = vec!["episode".to_string(), "t".to_string()];
        for h in 0..m.obs_history {
            for j in 0..m.obs_dim {
                header.push(format!("obs{h}_{j}"));
            }
        }
        for i in 0..m.horizon {
            for j in 0..m.action_dim {
                header.push(format!("act{i}_{j}"));
            }
        }
        w.write_record(&header)?;
        for s in &self.samples {
            let mut rec = vec![s.episode.to_string(), s.t.to_string()];
            rec.extend(s.cond.iter().chain(&s.chunk).map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}
