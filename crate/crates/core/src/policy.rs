//! A trained policy (network, schedule, normalizer) and its checkpoint file.
//!
//! Layout, all little-endian: magic `RTIDPCKPT`, `u32` version, environment
//! name, schedule kind and step count, the four schedule arrays as `f32`,
//! model layout and activation, layer sizes, normalizer, then every layer's
//! weights followed by its bias as `f32`. Parameters live in memory as
//! `f64`; a load/save cycle reproduces the file byte for byte.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::codec::{read_file, write_file, Reader, Writer};
use crate::envs::{EnvName, Normalizer};
use crate::error::{Error, Result};
use crate::net::{Activation, DenoiserModel, Dense, ModelLayout};
use crate::schedule::{NoiseSchedule, ScheduleKind};

const MAGIC: &[u8] = b"RTIDPCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub env: EnvName,
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
    pub normalizer: Normalizer,
}

impl Policy {
    pub fn new(env: EnvName, model: DenoiserModel, schedule: NoiseSchedule, normalizer: Normalizer) -> Result<Self> {
        let l = model.layout();
        if l.total_steps != schedule.total_steps() {
            return Err(Error::invalid(format!(
                "model expects {} steps, schedule has {}",
                l.total_steps,
                schedule.total_steps()
            )));
        }
        if l.action_dim != normalizer.action_dim() || l.obs_dim != normalizer.obs_dim() {
            return Err(Error::invalid("normalizer dimensions do not match the model"));
        }
        Ok(Policy {
            env,
            model,
            schedule,
            normalizer,
        })
    }

    pub fn layout(&self) -> &ModelLayout {
        self.model.layout()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.str(self.env.as_str())?;
        w.u32(self.schedule.kind().code());
        w.usize(self.schedule.total_steps())?;
        w.f32s(self.schedule.betas());
        w.f32s(self.schedule.alphas());
        w.f32s(self.schedule.alpha_bars());
        w.f32s(self.schedule.sigmas());
        let l = self.model.layout();
        for v in [l.horizon, l.action_dim, l.obs_dim, l.obs_history, l.step_embed_dim] {
            w.usize(v)?;
        }
        w.u32(self.model.activation().code());
        let sizes = self.model.layer_sizes();
        w.usize(sizes.len())?;
        for s in sizes {
            w.usize(s)?;
        }
        self.normalizer.write(&mut w);
        for layer in self.model.layers() {
            w.f32s(&layer.weights);
            w.f32s(&layer.bias);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, version) = Reader::open(bytes, MAGIC)?;
        if version != VERSION {
            return Err(Error::Format {
                offset: MAGIC.len() as u64,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let at = r.offset();
        let env: EnvName = r
            .str("environment name")?
            .parse()
            .map_err(|e| Error::Format { offset: at, message: format!("{e}") })?;

        let at = r.offset();
        let kind_code = r.u32("schedule kind")?;
        let kind = ScheduleKind::from_code(kind_code)
            .ok_or_else(|| Error::Format { offset: at, message: format!("unknown schedule kind {kind_code}") })?;
        let at = r.offset();
        let steps = r.usize("schedule steps")?;
        let schedule = NoiseSchedule::new(kind, steps)
            .map_err(|e| Error::Format { offset: at, message: format!("{e}") })?;
        let expected = [
            ("beta", schedule.betas()),
            ("alpha", schedule.alphas()),
            ("alpha_bar", schedule.alpha_bars()),
            ("sigma", schedule.sigmas()),
        ];
        for (name, values) in expected {
            let at = r.offset();
            let stored = r.f32s(steps, name)?;
            if let Some(i) = stored.iter().zip(values).position(|(s, v)| *s != (*v as f32) as f64) {
                return Err(Error::Format {
                    offset: at + 4 * i as u64,
                    message: format!("stored {name}[{}] disagrees with the {kind} schedule", i + 1),
                });
            }
        }

        let at = r.offset();
        let layout = ModelLayout {
            horizon: r.usize("horizon")?,
            action_dim: r.usize("action dim")?,
            obs_dim: r.usize("obs dim")?,
            obs_history: r.usize("obs history")?,
            step_embed_dim: r.usize("step embedding dim")?,
            total_steps: steps,
        };
        let act_at = r.offset();
        let act_code = r.u32("activation")?;
        let activation = Activation::from_code(act_code)
            .ok_or_else(|| Error::Format { offset: act_at, message: format!("unknown activation {act_code}") })?;
        let n_sizes = r.usize("layer count")?;
        if n_sizes < 2 || n_sizes > 64 {
            return Err(r.error(format!("implausible layer count {n_sizes}")));
        }
        let sizes: Vec<usize> = (0..n_sizes).map(|_| r.usize("layer size")).collect::<Result<_>>()?;
        if sizes[0] != layout.input_dim() || sizes[n_sizes - 1] != layout.chunk_len() {
            return Err(Error::Format {
                offset: at,
                message: format!("layer sizes {sizes:?} do not match layout {layout:?}"),
            });
        }
        let normalizer = Normalizer::read(&mut r, layout.action_dim, layout.obs_dim)?;
        let mut layers = Vec::with_capacity(n_sizes - 1);
        for w in sizes.windows(2) {
            let (in_dim, out_dim) = (w[0], w[1]);
            let weights = r.f32s(in_dim * out_dim, "weights")?;
            let bias = r.f32s(out_dim, "bias")?;
            layers.push(Dense {
                in_dim,
                out_dim,
                weights,
                bias,
            });
        }
        r.finish()?;
        let model = DenoiserModel::from_layers(layout, activation, layers)
            .map_err(|e| Error::Format { offset: at, message: format!("{e}") })?;
        Policy::new(env, model, schedule, normalizer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate_demos, scale_dataset_discrete};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy() -> Policy {
        let ds = scale_dataset_discrete(&generate_demos(EnvName::PickDiscrete, 3, 2, 4, 2).unwrap(), 10.0).unwrap();
        let layout = ModelLayout {
            horizon: 4,
            action_dim: 3,
            obs_dim: 5,
            obs_history: 2,
            step_embed_dim: 8,
            total_steps: 20,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = DenoiserModel::new(layout, &[12, 10], Activation::Tanh, &mut rng).unwrap();
        let schedule = NoiseSchedule::new(ScheduleKind::SquaredCosine, 20).unwrap();
        Policy::new(EnvName::PickDiscrete, model, schedule, ds.normalizer).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let p = policy();
        let first = p.to_bytes().unwrap();
        let loaded = Policy::from_bytes(&first).unwrap();
        assert_eq!(loaded.to_bytes().unwrap(), first);
        assert_eq!(loaded.normalizer.discrete_scale, 10.0);
        assert_eq!(loaded.model.layer_sizes(), p.model.layer_sizes());
        for i in 0..p.model.num_params() {
            assert_eq!(loaded.model.param(i), p.model.param(i) as f32 as f64);
        }
    }

    #[test]
    fn corrupted_schedule_is_reported_with_offset() {
        let p = policy();
        let mut bytes = p.to_bytes().unwrap();
        // magic 9 + version 4 + name (4 + 13) + kind 4 + steps 4 = 38; beta[3] at +12.
        let off = 38 + 12;
        bytes[off] ^= 0x40;
        match Policy::from_bytes(&bytes).unwrap_err() {
            Error::Format { offset, message } => {
                assert_eq!(offset, off as u64, "{message}");
                assert!(message.contains("beta[4]"), "{message}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn truncation_and_magic_are_detected() {
        let bytes = policy().to_bytes().unwrap();
        assert!(matches!(Policy::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        assert!(matches!(Policy::from_bytes(b"RTIDPDATA..."), Err(Error::Format { offset: 0, .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Policy::from_bytes(&extra), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_names_path() {
        let err = Policy::load(Path::new("/nonexistent/model.ckpt")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/model.ckpt"));
    }
}
