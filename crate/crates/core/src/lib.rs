//! Model-agnostic inference scheduler for frame-level autoregressive video
//! diffusion.
//!
//! A video is generated one frame at a time from a rolling queue of per-frame
//! latents that sit at different noise levels. The crate provides the queue
//! and ladder types, a DDIM sampler that steps frames at mixed levels, the
//! sliding-window engine that feeds a fixed-width denoiser, and four
//! generation modes:
//!
//! * `fifo`: diagonal queue with one level per latent.
//! * `tta`: zigzag queue where `L_zig` neighbours share a level, followed by
//!   uniform-level clean-up of the dequeued frames.
//! * `tta+dce`: `tta` plus latent-space self-reflection on the queue tail and
//!   long-range guidance latents in every window.
//! * `stage2-only`: all frames at one level from start to finish.
//!
//! Denoisers plug in through [`Denoiser`]. The analytic
//! [`PerfectTargetDenoiser`] recovers a known [`TargetSequence`] exactly and
//! serves as the correctness oracle for every mode.

pub mod conditioning;
pub mod config;
pub mod consistency;
pub mod denoiser;
pub mod error;
pub mod generate;
pub mod io;
pub mod latent;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trace;
pub mod window;
pub mod wire;

pub use conditioning::{prompt_index, ConditionId, PromptTrack};
pub use config::{GuidanceSampling, Mode, SchedulerConfig};
pub use consistency::{
    c_score, expand_search, maybe_correct, noisy_score_correlation, pearson, reflection_cost,
    reflection_rates, score_curve, should_trigger, CurvePoint, ReflectionState, ReflectionWindows,
};
pub use denoiser::{
    DenoiseRequest, Denoiser, DriftDenoiser, PerfectTargetDenoiser, TargetFamily, TargetSequence,
};
pub use error::{DenoiseError, Error, Result};
pub use generate::{generate, Engine, Generation};
pub use latent::{queue_noise_span, FrameLatent, LatentQueue};
pub use rng::{NoiseKey, Purpose};
pub use sampler::DdimSampler;
pub use schedule::{build_schedule, NoiseSchedule};
pub use trace::{summarize, Event, Metrics, Phase, Trace};
pub use window::{
    calls_per_pass, infer_queue_once, infer_queue_once_guided, select_guidance_indices,
    PassContext, WindowEngine, WindowRecord,
};
