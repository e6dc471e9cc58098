#![allow(dead_code)]

use std::sync::Arc;

use lqe_core::{
    DriftDenoiser, FrameLatent, PerfectTargetDenoiser, SchedulerConfig, TargetFamily, TargetSequence,
};

/// Targets long enough for every frame index the run touches.
pub fn targets_for(config: &SchedulerConfig, seed: u64) -> Arc<TargetSequence> {
    let n = config.required_target_frames().max(20);
    Arc::new(TargetSequence::synthetic(&TargetFamily::default(), n, &[], seed).unwrap())
}

pub fn perfect(config: &SchedulerConfig, targets: Arc<TargetSequence>) -> PerfectTargetDenoiser {
    PerfectTargetDenoiser::new(targets, config.schedule().unwrap(), config.f0)
}

pub fn drift(config: &SchedulerConfig, targets: Arc<TargetSequence>, prob: f64, seed: u64) -> DriftDenoiser {
    let scale = 5.0 * targets.mean_frame_norm();
    DriftDenoiser::new(targets, config.schedule().unwrap(), config.f0, prob, scale, seed).unwrap()
}

pub fn max_abs_error(frames: &[FrameLatent], targets: &TargetSequence) -> f64 {
    frames
        .iter()
        .map(|f| {
            let t = targets.frame(f.frame_index).unwrap();
            f.data
                .iter()
                .zip(t)
                .map(|(a, b)| f64::from((a - b).abs()))
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

pub fn config(mode: lqe_core::Mode, n: usize) -> SchedulerConfig {
    SchedulerConfig {
        mode,
        n,
        ..SchedulerConfig::videocrafter2_like()
    }
}
