//! Real-time iteration for diffusion policies: a small DDPM action-chunk
//! policy, toy manipulation tasks, and the warm-started truncated sampler
//! with its contractivity diagnostics.

mod codec;

pub mod chunk;
pub mod bench;
pub mod config;
pub mod contract;
pub mod envs;
pub mod error;
pub mod kernels;
pub mod net;
pub mod pipeline;
pub mod policy;
pub mod sampler;
pub mod schedule;

pub use chunk::ActionChunk;
pub use error::{Error, Result};
pub use policy::Policy;
pub use schedule::{NoiseSchedule, ScheduleKind};
