//! Timestep ladder and cumulative signal coefficients.
//!
//! A schedule has `T + 1` levels. Level `t` carries an integer label `τ_t`
//! (a training timestep) and the cumulative signal coefficient `ᾱ(τ_t)`.
//! Level 0 is the clean state with `ᾱ = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of training timesteps the linear-beta ladder is defined over.
pub const TRAIN_HORIZON: u32 = 1000;

/// Upper bound on `ᾱ(τ_T)`; terminal latents must be noise dominated.
pub const MAX_TERMINAL_ALPHA_BAR: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    taus: Vec<u32>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit labels and coefficients, checking every
    /// ladder invariant.
    pub fn from_parts(taus: Vec<u32>, alpha_bar: Vec<f64>) -> Result<Self> {
        if taus.len() != alpha_bar.len() {
            return Err(Error::Parameter(format!(
                "{} labels but {} coefficients",
                taus.len(),
                alpha_bar.len()
            )));
        }
        if taus.len() < 3 {
            return Err(Error::Parameter("schedule needs at least 2 steps".into()));
        }
        if taus[0] != 0 || alpha_bar[0] != 1.0 {
            return Err(Error::Parameter("level 0 must be τ=0 with ᾱ=1".into()));
        }
        if taus.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter("labels must be strictly increasing".into()));
        }
        if alpha_bar
            .windows(2)
            .any(|w| !w[1].is_finite() || w[1] >= w[0] || w[1] <= 0.0)
        {
            return Err(Error::Parameter(
                "ᾱ must be strictly decreasing and positive".into(),
            ));
        }
        let terminal = *alpha_bar.last().expect("non-empty");
        if terminal >= MAX_TERMINAL_ALPHA_BAR {
            return Err(Error::Parameter(format!(
                "ᾱ(τ_T) = {terminal} is not noise dominated (must be < {MAX_TERMINAL_ALPHA_BAR})"
            )));
        }
        Ok(Self { taus, alpha_bar })
    }

    /// Number of denoising steps `T`.
    pub fn steps(&self) -> usize {
        self.taus.len() - 1
    }

    pub fn tau(&self, level: usize) -> u32 {
        self.taus[level]
    }

    pub fn taus(&self) -> &[u32] {
        &self.taus
    }

    pub fn alpha_bar(&self, level: usize) -> f64 {
        self.alpha_bar[level]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Linear-beta ladder with `steps` levels over [`TRAIN_HORIZON`] training
/// timesteps: `β` is linearly spaced over the horizon, `ᾱ(τ) = ∏_{s≤τ}(1−β_s)`
/// and `τ_t = ⌊t · horizon / T⌋`.
pub fn build_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    build_schedule_with_horizon(steps, beta_min, beta_max, TRAIN_HORIZON)
}

pub fn build_schedule_with_horizon(
    steps: usize,
    beta_min: f64,
    beta_max: f64,
    horizon: u32,
) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Parameter(format!("T = {steps}, need T ≥ 2")));
    }
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::Parameter(format!(
            "need 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    if steps as u64 > u64::from(horizon) {
        return Err(Error::Parameter(format!(
            "T = {steps} exceeds the training horizon {horizon}"
        )));
    }

    let h = horizon as usize;
    let mut cumulative = Vec::with_capacity(h + 1);
    cumulative.push(1.0f64);
    let mut acc = 1.0f64;
    for s in 0..h {
        let beta = if h == 1 {
            beta_min
        } else {
            beta_min + (beta_max - beta_min) * s as f64 / (h - 1) as f64
        };
        acc *= 1.0 - beta;
        cumulative.push(acc);
    }

    let taus: Vec<u32> = (0..=steps)
        .map(|t| (t as u64 * u64::from(horizon) / steps as u64) as u32)
        .collect();
    let alpha_bar = taus.iter().map(|&tau| cumulative[tau as usize]).collect();
    NoiseSchedule::from_parts(taus, alpha_bar)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_single_step_and_bad_bounds() {
        assert!(build_schedule(1, 1e-4, 2e-2).is_err());
        assert!(build_schedule(8, 2e-2, 1e-4).is_err());
        assert!(build_schedule(8, 0.0, 2e-2).is_err());
        assert!(build_schedule(8, 1e-4, 1.0).is_err());
        assert!(build_schedule(1001, 1e-4, 2e-2).is_err());
    }

    #[test]
    fn two_steps_has_three_levels() {
        let s = build_schedule(2, 1e-4, 2e-2).unwrap();
        assert_eq!(s.alpha_bars().len(), 3);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.taus(), &[0, 500, 1000]);
    }

    #[test]
    fn terminal_coefficient_matches_direct_product() {
        // Direct product of 1000 linearly spaced (1 - β) factors, evaluated
        // independently in float64.
        let golden = 4.035_829_765_375_676e-5;
        let s = build_schedule(64, 1e-4, 2e-2).unwrap();
        assert_eq!(s.tau(64), 1000);
        assert!((s.alpha_bar(64) - golden).abs() < 1e-15);
        assert!(s.alpha_bar(64) < MAX_TERMINAL_ALPHA_BAR);
    }

    #[test]
    fn ladder_labels_for_sixty_four_steps() {
        let s = build_schedule(64, 1e-4, 2e-2).unwrap();
        assert_eq!(s.tau(1), 15);
        assert_eq!(s.tau(51), 796);
        assert_eq!(s.tau(63), 984);
    }

    #[test]
    fn from_parts_rejects_non_noise_dominated_terminal() {
        let err = NoiseSchedule::from_parts(vec![0, 1, 2], vec![1.0, 0.9, 0.5]);
        assert!(err.is_err());
        let ok = NoiseSchedule::from_parts(vec![0, 1, 2], vec![1.0, 0.5, 0.01]);
        assert!(ok.is_ok());
    }

    proptest::proptest! {
        #[test]
        fn monotone_for_any_step_count(steps in 2usize..=1000) {
            let s = build_schedule(steps, 1e-4, 2e-2).unwrap();
            proptest::prop_assert_eq!(s.steps(), steps);
            proptest::prop_assert!(s.taus().windows(2).all(|w| w[0] < w[1]));
            proptest::prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        }
    }
}
