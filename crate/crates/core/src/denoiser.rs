//! Noise-prediction contract and analytic toy denoisers.
//!
//! The scheduler only ever talks to a [`Denoiser`]. The toy implementations
//! here invert the forward process toward a known [`TargetSequence`], so a
//! generation run with [`PerfectTargetDenoiser`] must reproduce the targets
//! exactly whatever the scheduling mode.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionId;
use crate::error::{DenoiseError, Error, Result};
use crate::latent::FrameLatent;
use crate::rng::{NoiseKey, Purpose};
use crate::schedule::NoiseSchedule;

/// One denoiser call: a window of latents (each with its own level and global
/// frame index) and the condition for each of them.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseRequest<'a> {
    pub latents: &'a [FrameLatent],
    pub conditions: &'a [ConditionId],
}

/// Pure noise predictor `ε_θ(latents, timesteps, condition)`.
///
/// Implementations must return one prediction per input latent with the same
/// length, and identical requests must yield bit-identical predictions.
pub trait Denoiser: Send + Sync {
    /// Widest window the model accepts (`f0`).
    fn max_window(&self) -> usize;

    fn predict(&self, request: &DenoiseRequest<'_>) -> Result<Vec<Vec<f32>>, DenoiseError>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn max_window(&self) -> usize {
        (**self).max_window()
    }

    fn predict(&self, request: &DenoiseRequest<'_>) -> Result<Vec<Vec<f32>>, DenoiseError> {
        (**self).predict(request)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Arc<D> {
    fn max_window(&self) -> usize {
        (**self).max_window()
    }

    fn predict(&self, request: &DenoiseRequest<'_>) -> Result<Vec<Vec<f32>>, DenoiseError> {
        (**self).predict(request)
    }
}

/// Parameters of the synthetic latent family.
///
/// Frame 1 is a channel-coherent pattern: every token shares a per-channel
/// mean `channel_scale·μ_c` plus token jitter of relative size
/// `token_jitter`. Later frames follow a random walk whose per-frame step has
/// expected norm `walk_ratio·‖x₁‖`; a discontinuity adds an offset of norm
/// `jump_ratio·‖x₁‖` in a random direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetFamily {
    pub l: usize,
    pub d: usize,
    pub channel_scale: f64,
    pub token_jitter: f64,
    pub walk_ratio: f64,
    pub jump_ratio: f64,
}

impl Default for TargetFamily {
    fn default() -> Self {
        Self {
            l: 16,
            d: 8,
            channel_scale: 16.0,
            token_jitter: 0.3,
            walk_ratio: 0.05,
            jump_ratio: 3.0,
        }
    }
}

/// Clean per-frame targets (`x0*_i`) a toy denoiser steers toward.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSequence {
    frames: Vec<Vec<f32>>,
    l: usize,
    d: usize,
    discontinuities: Vec<usize>,
}

impl TargetSequence {
    pub fn from_frames(frames: Vec<Vec<f32>>, l: usize, d: usize) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Parameter("target sequence is empty".into()));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.len() != l * d {
                return Err(Error::Shape(format!(
                    "target frame {} has {} values, expected {}",
                    i + 1,
                    f.len(),
                    l * d
                )));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parameter(format!("target frame {} is not finite", i + 1)));
            }
        }
        Ok(Self {
            frames,
            l,
            d,
            discontinuities: Vec::new(),
        })
    }

    /// Random-walk sequence of `n_frames` with jumps entering at the listed
    /// 1-based frame indices.
    pub fn synthetic(
        family: &TargetFamily,
        n_frames: usize,
        discontinuities: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if n_frames == 0 {
            return Err(Error::Parameter("target sequence is empty".into()));
        }
        let mut jumps = discontinuities.to_vec();
        jumps.sort_unstable();
        jumps.dedup();
        if jumps.iter().any(|&j| j < 2 || j > n_frames) {
            return Err(Error::Parameter(format!(
                "discontinuities must lie in [2, {n_frames}], got {jumps:?}"
            )));
        }
        let (l, d) = (family.l, family.d);
        let len = l * d;

        let first = NoiseKey::new(seed, 0, Purpose::Targets).gaussian(d + len);
        let (mu, jitter) = first.split_at(d);
        let x1: Vec<f64> = (0..len)
            .map(|i| {
                family.channel_scale
                    * (f64::from(mu[i % d]) + family.token_jitter * f64::from(jitter[i]))
            })
            .collect();
        let norm1 = x1.iter().map(|v| v * v).sum::<f64>().sqrt();
        let walk = family.walk_ratio * norm1 / (len as f64).sqrt();
        let jump = family.jump_ratio * norm1;

        let mut frames = Vec::with_capacity(n_frames);
        let mut current = x1;
        frames.push(current.iter().map(|&v| v as f32).collect::<Vec<f32>>());
        let mut next_jump = jumps.iter().peekable();
        for frame in 2..=n_frames {
            let draws = NoiseKey::new(seed, frame as u64, Purpose::Targets).gaussian(2 * len);
            let (g, u) = draws.split_at(len);
            for (c, &gi) in current.iter_mut().zip(g) {
                *c += walk * f64::from(gi);
            }
            if next_jump.peek() == Some(&&frame) {
                next_jump.next();
                let un = u.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
                for (c, &ui) in current.iter_mut().zip(u) {
                    *c += jump * f64::from(ui) / un;
                }
            }
            frames.push(current.iter().map(|&v| v as f32).collect());
        }
        Ok(Self {
            frames,
            l,
            d,
            discontinuities: jumps,
        })
    }

    /// Sequence number `trial` of a benchmark family: `n_frames` frames with
    /// one jump placed uniformly in the middle half.
    pub fn jump_trial(family: &TargetFamily, n_frames: usize, seed: u64, trial: u64) -> Result<Self> {
        if n_frames < 4 {
            return Err(Error::Parameter(format!("need at least 4 frames, got {n_frames}")));
        }
        let u = NoiseKey::new(seed, trial, Purpose::JumpSite).uniform();
        let jump = n_frames / 4 + 1 + (u * (n_frames / 2) as f64) as usize;
        let sequence_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(trial);
        Self::synthetic(family, n_frames, &[jump], sequence_seed)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.l, self.d)
    }

    pub fn discontinuities(&self) -> &[usize] {
        &self.discontinuities
    }

    /// Target for a 1-based frame index.
    pub fn frame(&self, frame_index: usize) -> Option<&[f32]> {
        frame_index
            .checked_sub(1)
            .and_then(|i| self.frames.get(i))
            .map(Vec::as_slice)
    }

    pub fn frames(&self) -> &[Vec<f32>] {
        &self.frames
    }

    pub fn mean_frame_norm(&self) -> f64 {
        let total: f64 = self
            .frames
            .iter()
            .map(|f| f.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt())
            .sum();
        total / self.frames.len() as f64
    }

    /// Clean latents for the given frames.
    pub fn latents(&self, frame_indices: impl IntoIterator<Item = usize>) -> Result<Vec<FrameLatent>> {
        frame_indices
            .into_iter()
            .map(|i| {
                self.frame(i)
                    .map(|f| FrameLatent::new(f.to_vec(), i, 0))
                    .ok_or_else(|| Error::Index(format!("no target frame {i}")))
            })
            .collect()
    }
}

/// ε̂ that makes `x̂₀` equal `target` exactly: `(z − √ᾱ·x*)/√(1−ᾱ)`.
fn noise_toward(schedule: &NoiseSchedule, latent: &FrameLatent, target: impl Fn(usize) -> f64) -> Vec<f32> {
    if latent.level == 0 {
        return vec![0.0; latent.data.len()];
    }
    let a = schedule.alpha_bar(latent.level);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    latent
        .data
        .iter()
        .enumerate()
        .map(|(i, &z)| ((f64::from(z) - sa * target(i)) / sn) as f32)
        .collect()
}

fn check_request(request: &DenoiseRequest<'_>, max_window: usize, len: usize) -> Result<(), DenoiseError> {
    if request.latents.len() > max_window {
        return Err(DenoiseError::TooWide {
            got: request.latents.len(),
            max: max_window,
        });
    }
    if let Some(bad) = request.latents.iter().find(|f| f.data.len() != len) {
        return Err(DenoiseError::Shape {
            got: bad.data.len(),
            expected: len,
        });
    }
    Ok(())
}

/// Analytic inverse of the forward process toward a [`TargetSequence`].
#[derive(Debug, Clone)]
pub struct PerfectTargetDenoiser {
    targets: Arc<TargetSequence>,
    schedule: NoiseSchedule,
    max_window: usize,
}

impl PerfectTargetDenoiser {
    pub fn new(targets: Arc<TargetSequence>, schedule: NoiseSchedule, max_window: usize) -> Self {
        Self {
            targets,
            schedule,
            max_window,
        }
    }

    pub fn targets(&self) -> &TargetSequence {
        &self.targets
    }

    fn target(&self, frame_index: usize) -> Result<&[f32], DenoiseError> {
        self.targets.frame(frame_index).ok_or(DenoiseError::FrameIndex {
            frame_index,
            available: self.targets.len(),
        })
    }
}

impl Denoiser for PerfectTargetDenoiser {
    fn max_window(&self) -> usize {
        self.max_window
    }

    fn predict(&self, request: &DenoiseRequest<'_>) -> Result<Vec<Vec<f32>>, DenoiseError> {
        let (l, d) = self.targets.dims();
        check_request(request, self.max_window, l * d)?;
        request
            .latents
            .iter()
            .map(|z| {
                let target = self.target(z.frame_index)?;
                Ok(noise_toward(&self.schedule, z, |i| f64::from(target[i])))
            })
            .collect()
    }
}

/// Perfect-target denoiser that, for a seeded random subset of frames,
/// steers toward `x0*_i + drift_scale·u` with a fixed unit vector `u`.
#[derive(Debug, Clone)]
pub struct DriftDenoiser {
    inner: PerfectTargetDenoiser,
    drift_prob: f64,
    drift_scale: f64,
    seed: u64,
    direction: Vec<f64>,
}

impl DriftDenoiser {
    pub fn new(
        targets: Arc<TargetSequence>,
        schedule: NoiseSchedule,
        max_window: usize,
        drift_prob: f64,
        drift_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&drift_prob) {
            return Err(Error::Parameter(format!(
                "drift probability {drift_prob} outside [0, 1]"
            )));
        }
        let (l, d) = targets.dims();
        let raw = NoiseKey::new(seed, 0, Purpose::DriftDirection).gaussian(l * d);
        let norm = raw.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        let direction = raw.iter().map(|&v| f64::from(v) / norm).collect();
        Ok(Self {
            inner: PerfectTargetDenoiser::new(targets, schedule, max_window),
            drift_prob,
            drift_scale,
            seed,
            direction,
        })
    }

    pub fn is_drifted(&self, frame_index: usize) -> bool {
        self.drift_prob > 0.0
            && NoiseKey::new(self.seed, frame_index as u64, Purpose::DriftDraw).uniform() < self.drift_prob
    }

    pub fn drifted_frames(&self, up_to: usize) -> Vec<usize> {
        (1..=up_to).filter(|&i| self.is_drifted(i)).collect()
    }

    pub fn direction(&self) -> &[f64] {
        &self.direction
    }
}

impl Denoiser for DriftDenoiser {
    fn max_window(&self) -> usize {
        self.inner.max_window
    }

    fn predict(&self, request: &DenoiseRequest<'_>) -> Result<Vec<Vec<f32>>, DenoiseError> {
        let (l, d) = self.inner.targets.dims();
        check_request(request, self.inner.max_window, l * d)?;
        request
            .latents
            .iter()
            .map(|z| {
                let target = self.inner.target(z.frame_index)?;
                let shift = if self.is_drifted(z.frame_index) {
                    self.drift_scale
                } else {
                    0.0
                };
                Ok(noise_toward(&self.inner.schedule, z, |i| {
                    f64::from(target[i]) + shift * self.direction[i]
                }))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::DdimSampler;
    use crate::schedule::build_schedule;

    fn setup() -> (Arc<TargetSequence>, NoiseSchedule) {
        let targets = TargetSequence::synthetic(&TargetFamily::default(), 12, &[6], 3).unwrap();
        (Arc::new(targets), build_schedule(64, 1e-4, 2e-2).unwrap())
    }

    fn predict(d: &dyn Denoiser, latents: &[FrameLatent]) -> Vec<Vec<f32>> {
        let conds = vec![ConditionId(1); latents.len()];
        d.predict(&DenoiseRequest {
            latents,
            conditions: &conds,
        })
        .unwrap()
    }

    #[test]
    fn recovers_injected_noise() {
        let (targets, schedule) = setup();
        let sampler = DdimSampler::new(schedule.clone());
        let den = PerfectTargetDenoiser::new(targets.clone(), schedule, 16);
        let clean = targets.latents([4]).unwrap().remove(0);
        let eps: Vec<f32> = NoiseKey::new(1, 4, Purpose::Enqueue).gaussian(128);
        for level in [1, 20, 63] {
            let z = sampler.add_noise_with(&clean, level, &eps).unwrap();
            let got = predict(&den, std::slice::from_ref(&z));
            for (a, b) in got[0].iter().zip(&eps) {
                assert!((a - b).abs() < 2e-3, "level {level}: {a} vs {b}");
            }
            // One step always lands x̂0 on the target.
            let x0 = sampler.predicted_x0(&z, &got[0]);
            for (a, b) in x0.iter().zip(clean.data.iter()) {
                assert!((a - f64::from(*b)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn clean_latents_get_zero_noise() {
        let (targets, schedule) = setup();
        let den = PerfectTargetDenoiser::new(targets.clone(), schedule, 16);
        let clean = targets.latents([1]).unwrap();
        assert!(predict(&den, &clean)[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unknown_frame_and_oversized_window_fail() {
        let (targets, schedule) = setup();
        let den = PerfectTargetDenoiser::new(targets, schedule, 2);
        let z = FrameLatent::new(vec![0.0; 128], 13, 4);
        let conds = [ConditionId(1)];
        let err = den.predict(&DenoiseRequest {
            latents: std::slice::from_ref(&z),
            conditions: &conds,
        });
        assert!(matches!(err, Err(DenoiseError::FrameIndex { frame_index: 13, .. })));
        let wide = vec![FrameLatent::new(vec![0.0; 128], 1, 4); 3];
        let conds = [ConditionId(1); 3];
        let err = den.predict(&DenoiseRequest {
            latents: &wide,
            conditions: &conds,
        });
        assert!(matches!(err, Err(DenoiseError::TooWide { got: 3, max: 2 })));
    }

    #[test]
    fn degenerate_drift_matches_perfect() {
        let (targets, schedule) = setup();
        let perfect = PerfectTargetDenoiser::new(targets.clone(), schedule.clone(), 16);
        let never = DriftDenoiser::new(targets.clone(), schedule.clone(), 16, 0.0, 50.0, 1).unwrap();
        let zero = DriftDenoiser::new(targets, schedule, 16, 1.0, 0.0, 1).unwrap();
        let latents: Vec<FrameLatent> = (1..=8)
            .map(|i| FrameLatent::new(NoiseKey::new(2, i as u64, Purpose::Enqueue).gaussian(128), i, 30 + i))
            .collect();
        let p = predict(&perfect, &latents);
        assert_eq!(p, predict(&never, &latents));
        assert_eq!(p, predict(&zero, &latents));
    }

    #[test]
    fn predictions_are_pure() {
        let (targets, schedule) = setup();
        let den = DriftDenoiser::new(targets, schedule, 16, 0.5, 10.0, 4).unwrap();
        let latents: Vec<FrameLatent> = (1..=6)
            .map(|i| FrameLatent::new(NoiseKey::new(5, i as u64, Purpose::Seed).gaussian(128), i, 10))
            .collect();
        assert_eq!(predict(&den, &latents), predict(&den, &latents));
    }

    #[test]
    fn synthetic_rejects_bad_discontinuities() {
        let fam = TargetFamily::default();
        assert!(TargetSequence::synthetic(&fam, 10, &[1], 0).is_err());
        assert!(TargetSequence::synthetic(&fam, 10, &[11], 0).is_err());
        assert!(TargetSequence::synthetic(&fam, 0, &[], 0).is_err());
        let s = TargetSequence::synthetic(&fam, 10, &[7, 3, 3], 0).unwrap();
        assert_eq!(s.discontinuities(), &[3, 7]);
    }

    #[test]
    fn walk_step_and_jump_have_expected_scale() {
        let fam = TargetFamily::default();
        let s = TargetSequence::synthetic(&fam, 40, &[20], 11).unwrap();
        let norm = |a: &[f32], b: &[f32]| {
            a.iter().zip(b).map(|(x, y)| f64::from(x - y).powi(2)).sum::<f64>().sqrt()
        };
        let n1 = norm(s.frame(1).unwrap(), &[0.0; 128]);
        let step = norm(s.frame(5).unwrap(), s.frame(4).unwrap());
        let jump = norm(s.frame(20).unwrap(), s.frame(19).unwrap());
        assert!(step < 0.15 * n1, "step {step} vs norm {n1}");
        assert!(jump > 2.5 * n1, "jump {jump} vs norm {n1}");
        // Extending the sequence leaves earlier frames untouched.
        let longer = TargetSequence::synthetic(&fam, 60, &[20], 11).unwrap();
        assert_eq!(&longer.frames()[..40], s.frames());
    }
}
