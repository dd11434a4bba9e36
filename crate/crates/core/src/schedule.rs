//! DDPM noise schedules.
//!
//! Steps are 1-based: `k = 1..=K` index the stored arrays, and `k = 0` is the
//! clean boundary with `alpha_bar(0) = 1`, so forward noising at step 0 is the
//! identity and the posterior noise scale at `k = 1` vanishes.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset `s` of the squared-cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clamp applied to every beta of the squared-cosine schedule.
pub const MAX_BETA: f64 = 0.999;
/// Endpoints of the linear schedule.
pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    SquaredCosine,
}

impl ScheduleKind {
    pub fn code(self) -> u32 {
        match self {
            ScheduleKind::Linear => 0,
            ScheduleKind::SquaredCosine => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(ScheduleKind::Linear),
            1 => Some(ScheduleKind::SquaredCosine),
            _ => None,
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::SquaredCosine => "squared_cosine",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "squared_cosine" | "squaredcos_cap_v2" | "cosine" => Ok(ScheduleKind::SquaredCosine),
            other => Err(Error::invalid(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Per-step constants of a DDPM chain. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, total_steps: usize) -> Result<Self> {
        if total_steps < 2 {
            return Err(Error::invalid(format!(
                "schedule needs at least 2 steps, got {total_steps}"
            )));
        }
        let betas = match kind {
            ScheduleKind::Linear => linear_betas(total_steps),
            ScheduleKind::SquaredCosine => cosine_betas(total_steps),
        };
        Ok(Self::from_betas(kind, betas))
    }

    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                let variance = (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i];
                variance.max(0.0).sqrt()
            })
            .collect();
        NoiseSchedule {
            kind,
            betas,
            alphas,
            alpha_bars,
            sigmas,
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    fn index(&self, k: usize) -> Result<usize> {
        if k == 0 || k > self.total_steps() {
            return Err(Error::invalid(format!(
                "step {k} outside 1..={}",
                self.total_steps()
            )));
        }
        Ok(k - 1)
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k - 1]
    }

    /// Cumulative product up to `k`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bars[k - 1]
        }
    }

    /// Standard deviation of the noise injected by the reverse step at `k`:
    /// the square root of the posterior variance
    /// `(1 - alpha_bar(k-1)) / (1 - alpha_bar(k)) * beta(k)`.
    pub fn sigma(&self, k: usize) -> f64 {
        self.sigmas[k - 1]
    }

    /// Checked variant of [`NoiseSchedule::sigma`].
    pub fn posterior_sigma(&self, k: usize) -> Result<f64> {
        self.index(k).map(|i| self.sigmas[i])
    }

    pub fn check_step(&self, k: usize) -> Result<()> {
        self.index(k).map(|_| ())
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Writes `k,beta,alpha,alpha_bar,sigma` rows. `sigma` is a standard
    /// deviation, which the header comment records.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# kind={} sigma=posterior_std", self.kind)?;
        writeln!(w, "k,beta,alpha,alpha_bar,sigma")?;
        for k in 1..=self.total_steps() {
            writeln!(
                w,
                "{},{},{},{},{}",
                k,
                self.beta(k),
                self.alpha(k),
                self.alpha_bar(k),
                self.sigma(k)
            )?;
        }
        Ok(())
    }
}

fn linear_betas(total: usize) -> Vec<f64> {
    let span = LINEAR_BETA_END - LINEAR_BETA_START;
    (0..total)
        .map(|i| LINEAR_BETA_START + span * i as f64 / (total - 1) as f64)
        .collect()
}

/// Unnormalized squared-cosine curve at fractional step `t / total`.
pub fn cosine_curve(t: f64, total: usize) -> f64 {
    let phase = (t / total as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
    phase.cos().powi(2)
}

fn cosine_betas(total: usize) -> Vec<f64> {
    let f0 = cosine_curve(0.0, total);
    let bar = |k: usize| cosine_curve(k as f64, total) / f0;
    (1..=total)
        .map(|k| (1.0 - bar(k) / bar(k - 1)).clamp(f64::MIN_POSITIVE, MAX_BETA))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_lengths() {
        assert!(matches!(
            NoiseSchedule::new(ScheduleKind::Linear, 1),
            Err(Error::InvalidArgument(_))
        ));
        assert!(NoiseSchedule::new(ScheduleKind::SquaredCosine, 0).is_err());
        assert!("quadratic".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn linear_two_steps_is_the_product() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 2).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(2), 0.02);
        assert_eq!(s.alpha_bar(2), (1.0 - 1e-4) * (1.0 - 0.02));
        assert_eq!(s.alpha_bar(1), s.alpha(1));
    }

    #[test]
    fn cosine_invariants() {
        let s = NoiseSchedule::new(ScheduleKind::SquaredCosine, 100).unwrap();
        for k in 1..=100 {
            assert!(s.beta(k) > 0.0 && s.beta(k) <= MAX_BETA);
            assert_eq!(s.alpha(k), 1.0 - s.beta(k));
            assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
            assert!(s.alpha_bar(k) > 0.0);
            assert!(s.sigma(k).is_finite() && s.sigma(k) >= 0.0);
        }
        assert!(s.alpha_bar(100) < 1e-2);
    }

    #[test]
    fn cosine_midpoint_matches_closed_form() {
        // Closed form evaluated independently of the stored arrays.
        let s = NoiseSchedule::new(ScheduleKind::SquaredCosine, 100).unwrap();
        let direct = {
            let c = |x: f64| ((x + 0.008) / 1.008 * std::f64::consts::PI / 2.0).cos().powi(2);
            c(0.5) / c(0.0)
        };
        assert!((direct - 0.493_843_590_440_637_75).abs() < 1e-15, "{direct}");
        assert!((s.alpha_bar(50) - direct).abs() / direct < 1e-12);
    }

    #[test]
    fn sigma_boundary_and_hand_value() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 4).unwrap();
        assert_eq!(s.posterior_sigma(1).unwrap(), 0.0);
        assert!(s.posterior_sigma(0).is_err());
        assert!(s.posterior_sigma(5).is_err());
        // beta = [1e-4, 0.0067, 0.0133.., 0.02]; hand evaluation for k = 3.
        let b: [f64; 3] = [1e-4, 1e-4 + 0.0199 / 3.0, 1e-4 + 2.0 * 0.0199 / 3.0];
        let ab2 = (1.0 - b[0]) * (1.0 - b[1]);
        let ab3 = ab2 * (1.0 - b[2]);
        let expected = ((1.0 - ab2) / (1.0 - ab3) * b[2]).sqrt();
        assert!((s.posterior_sigma(3).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.067_394_128_341_835_03).abs() < 1e-12, "{expected}");
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 3).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[1], "k,beta,alpha,alpha_bar,sigma");
        assert_eq!(lines.len(), 5);
        assert!(lines[2].starts_with("1,0.0001,0.9999,0.9999,0"));
    }
}
