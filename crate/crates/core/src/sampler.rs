//! Forward noising and per-frame DDIM reverse steps.
//!
//! Frames inside one call may sit at different levels; each frame is stepped
//! with its own coefficients. Arithmetic runs in f64 and is rounded to f32 on
//! output.

use crate::error::{Error, Result};
use crate::latent::FrameLatent;
use crate::rng::{NoiseKey, Purpose};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone)]
pub struct DdimSampler {
    schedule: NoiseSchedule,
    eta: f64,
    seed: u64,
}

impl DdimSampler {
    /// Deterministic sampler (`eta = 0`).
    pub fn new(schedule: NoiseSchedule) -> Self {
        Self {
            schedule,
            eta: 0.0,
            seed: 0,
        }
    }

    /// Sampler with a stochastic term; `seed` keys the per-step noise.
    pub fn with_eta(schedule: NoiseSchedule, eta: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::Parameter(format!("eta = {eta} outside [0, 1]")));
        }
        Ok(Self {
            schedule,
            eta,
            seed,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Noises `x` from its level to `level_to` with noise drawn from `key`.
    pub fn add_noise(&self, x: &FrameLatent, level_to: usize, key: NoiseKey) -> Result<FrameLatent> {
        let eps = key.gaussian(x.data.len());
        self.add_noise_with(x, level_to, &eps)
    }

    /// `√(ᾱ_j/ᾱ_i)·x + √(1 − ᾱ_j/ᾱ_i)·ε` with caller-supplied `ε`.
    pub fn add_noise_with(&self, x: &FrameLatent, level_to: usize, eps: &[f32]) -> Result<FrameLatent> {
        if level_to <= x.level {
            return Err(Error::Ordering(format!(
                "cannot noise from level {} to level {level_to}",
                x.level
            )));
        }
        if level_to > self.schedule.steps() {
            return Err(Error::Index(format!(
                "level {level_to} beyond T = {}",
                self.schedule.steps()
            )));
        }
        if eps.len() != x.data.len() {
            return Err(Error::Shape(format!(
                "noise length {} vs latent length {}",
                eps.len(),
                x.data.len()
            )));
        }
        let ratio = self.schedule.alpha_bar(level_to) / self.schedule.alpha_bar(x.level);
        let (keep, mix) = (ratio.sqrt(), (1.0 - ratio).sqrt());
        let data = x
            .data
            .iter()
            .zip(eps)
            .map(|(&v, &e)| (keep * f64::from(v) + mix * f64::from(e)) as f32)
            .collect();
        Ok(FrameLatent::new(data, x.frame_index, level_to))
    }

    /// Clean-latent estimate `x̂₀ = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`, in f64.
    pub fn predicted_x0(&self, latent: &FrameLatent, eps_hat: &[f32]) -> Vec<f64> {
        let a = self.schedule.alpha_bar(latent.level);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        latent
            .data
            .iter()
            .zip(eps_hat)
            .map(|(&x, &e)| (f64::from(x) - sn * f64::from(e)) / sa)
            .collect()
    }

    /// One reverse step for a single frame.
    pub fn step_one(&self, latent: &FrameLatent, eps_hat: &[f32]) -> Result<FrameLatent> {
        if latent.level == 0 {
            return Err(Error::State(format!(
                "frame {} is already clean",
                latent.frame_index
            )));
        }
        if eps_hat.len() != latent.data.len() {
            return Err(Error::Shape(format!(
                "predicted noise length {} vs latent length {}",
                eps_hat.len(),
                latent.data.len()
            )));
        }
        let t = latent.level;
        let a_t = self.schedule.alpha_bar(t);
        let a_prev = self.schedule.alpha_bar(t - 1);
        let x0 = self.predicted_x0(latent, eps_hat);

        let data: Vec<f32> = if self.eta == 0.0 {
            let (sp, sn) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
            x0.iter()
                .zip(eps_hat)
                .map(|(&x, &e)| (sp * x + sn * f64::from(e)) as f32)
                .collect()
        } else {
            let sigma = self.eta
                * ((1.0 - a_prev) / (1.0 - a_t)).sqrt()
                * (1.0 - a_t / a_prev).sqrt();
            let dir = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();
            let z = NoiseKey::new(
                self.seed,
                latent.frame_index as u64,
                Purpose::StepNoise { level: t as u32 },
            )
            .gaussian(latent.data.len());
            x0.iter()
                .zip(eps_hat)
                .zip(&z)
                .map(|((&x, &e), &n)| {
                    (a_prev.sqrt() * x + dir * f64::from(e) + sigma * f64::from(n)) as f32
                })
                .collect()
        };
        Ok(FrameLatent {
            data,
            frame_index: latent.frame_index,
            level: t - 1,
            history: latent.history.clone(),
        })
    }

    /// Steps every frame one level down using its own coefficients.
    pub fn step(&self, latents: &[FrameLatent], eps_hat: &[Vec<f32>]) -> Result<Vec<FrameLatent>> {
        if latents.len() != eps_hat.len() {
            return Err(Error::Shape(format!(
                "{} latents but {} noise predictions",
                latents.len(),
                eps_hat.len()
            )));
        }
        latents
            .iter()
            .zip(eps_hat)
            .map(|(z, e)| self.step_one(z, e))
            .collect()
    }
}
