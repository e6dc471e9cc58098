//! One denoising step over a whole queue through `f0`-wide sliding windows.
//!
//! Windows start every `stride` positions. Each window steps only the part of
//! its output nobody else owns: its first `stride` positions, clipped where
//! the final window begins, which commits everything it covers. Every latent
//! therefore moves down exactly one level per pass.
//!
//! With long-range guidance a window starting at 1-based position `l > m`
//! is fed `m` earlier latents as read-only context ahead of its
//! `f0 − m` local latents. Guidance latents keep their own levels and are
//! never written back.

use rand::seq::index::sample;

use crate::conditioning::PromptTrack;
use crate::config::GuidanceSampling;
use crate::denoiser::{DenoiseRequest, Denoiser};
use crate::error::{Error, Result};
use crate::latent::{level_span, FrameLatent, LatentQueue};
use crate::rng::{NoiseKey, Purpose};
use crate::sampler::DdimSampler;
use crate::trace::Phase;

/// Evenly spaced guidance positions for a window starting at 1-based `l`.
///
/// Picks `m` indices over `[l − s, l − 1]` with `s = min(m·L_zig, l − 1)`,
/// always ending at `l − 1`. Returns `None` when `l ≤ m` (guidance off).
pub fn select_guidance_indices(l: usize, m_guid: usize, l_zig: usize) -> Option<Vec<usize>> {
    if m_guid == 0 || l <= m_guid {
        return None;
    }
    let s_range = (m_guid * l_zig).min(l - 1);
    let (lo, hi) = (l - s_range, l - 1);
    if m_guid == 1 {
        return Some(vec![hi]);
    }
    Some(
        (0..m_guid)
            .map(|k| lo + k * (hi - lo) / (m_guid - 1))
            .collect(),
    )
}

fn sample_guidance_indices(l: usize, m_guid: usize, l_zig: usize, key: NoiseKey) -> Option<Vec<usize>> {
    if m_guid == 0 || l <= m_guid {
        return None;
    }
    let s_range = (m_guid * l_zig).min(l - 1);
    let (lo, hi) = (l - s_range, l - 1);
    let mut rng = key.rng();
    let mut picked: Vec<usize> = sample(&mut rng, hi - lo, m_guid - 1)
        .into_iter()
        .map(|i| lo + i)
        .collect();
    picked.sort_unstable();
    picked.push(hi);
    Some(picked)
}

/// Denoiser calls one pass makes over a queue of `len` latents.
pub fn calls_per_pass(len: usize, f0: usize, stride: usize, m_guid: usize) -> usize {
    if len < f0 {
        return usize::from(len > 0);
    }
    (len - f0 + m_guid).div_ceil(stride) + 1
}

/// What one denoiser call saw and wrote. Positions are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowRecord {
    pub start: usize,
    pub width: usize,
    pub span: usize,
    pub local_span: usize,
    pub guided: bool,
    pub guidance_indices: Vec<usize>,
    pub prompt: usize,
    pub committed: usize,
    pub queue_len: usize,
}

/// Everything a pass needs besides the latents themselves.
#[derive(Clone, Copy)]
pub struct PassContext<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub sampler: &'a DdimSampler,
    pub prompts: &'a PromptTrack,
    /// Frames already dequeued; offsets queue positions to frame positions
    /// when picking prompts.
    pub n_deq: usize,
    pub phase: Phase,
    pub iteration: usize,
    pub pass: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowEngine {
    f0: usize,
    stride: usize,
    m_guid: usize,
    l_zig: usize,
    sampling: GuidanceSampling,
    sampling_seed: u64,
}

impl WindowEngine {
    /// Unguided engine with stride `⌊f0/2⌋`.
    pub fn new(f0: usize) -> Self {
        Self {
            f0,
            stride: (f0 / 2).max(1),
            m_guid: 0,
            l_zig: 1,
            sampling: GuidanceSampling::Even,
            sampling_seed: 0,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride.max(1);
        self
    }

    pub fn with_guidance(mut self, m_guid: usize, l_zig: usize) -> Self {
        self.m_guid = m_guid;
        self.l_zig = l_zig;
        self
    }

    pub fn with_sampling(mut self, sampling: GuidanceSampling, seed: u64) -> Self {
        self.sampling = sampling;
        self.sampling_seed = seed;
        self
    }

    pub fn f0(&self) -> usize {
        self.f0
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn m_guid(&self) -> usize {
        self.m_guid
    }

    pub fn unguided(&self) -> Self {
        Self { m_guid: 0, ..*self }
    }

    /// One full pass: every latent in `queue` moves down one level.
    pub fn infer(&self, queue: &mut LatentQueue, ctx: &PassContext<'_>) -> Result<Vec<WindowRecord>> {
        if queue.len() < self.f0 {
            return Err(Error::Size(format!(
                "queue holds {} latents, a window needs f0 = {}",
                queue.len(),
                self.f0
            )));
        }
        if let Some(pos) = queue.iter().position(|f| f.level == 0) {
            return Err(Error::State(format!("latent at position {} is already clean", pos + 1)));
        }
        let records = self.sweep(queue.as_mut_slice(), ctx, 0, false)?;
        debug_assert!(queue.check_invariants().is_ok());
        Ok(records)
    }

    /// Core sweep. Positions below `frozen` serve as context only; windows
    /// with nothing left to commit are skipped. With `allow_short`, a
    /// sequence shorter than `f0` is handled by a single window.
    pub(crate) fn sweep(
        &self,
        items: &mut [FrameLatent],
        ctx: &PassContext<'_>,
        frozen: usize,
        allow_short: bool,
    ) -> Result<Vec<WindowRecord>> {
        let len = items.len();
        if len == 0 || frozen >= len {
            return Ok(Vec::new());
        }
        if len < self.f0 {
            if !allow_short {
                return Err(Error::Size(format!(
                    "sequence of {len} latents is shorter than f0 = {}",
                    self.f0
                )));
            }
            let record = self.run_window(items, ctx, 0, len, None, frozen..len)?;
            return Ok(vec![record]);
        }

        let m = self.m_guid;
        let last_start = len - self.f0 + m;
        let n_windows = calls_per_pass(len, self.f0, self.stride, m);
        let mut records = Vec::with_capacity(n_windows);
        for i in 0..n_windows {
            let is_last = i + 1 == n_windows;
            let start = if is_last { last_start } else { i * self.stride };
            let guidance = self.guidance_for(start + 1, ctx.pass);
            let local_end = match (&guidance, is_last) {
                (_, true) => len,
                (Some(_), false) => start + self.f0 - m,
                (None, false) => (start + self.f0).min(len),
            };
            debug_assert!(!is_last || guidance.is_some() || m == 0);
            let commit_end = if is_last {
                len
            } else {
                (start + self.stride).min(last_start)
            };
            let commit = start.max(frozen)..commit_end;
            if commit.is_empty() {
                continue;
            }
            records.push(self.run_window(items, ctx, start, local_end, guidance, commit)?);
        }
        Ok(records)
    }

    fn guidance_for(&self, l: usize, pass: usize) -> Option<Vec<usize>> {
        match self.sampling {
            GuidanceSampling::Even => select_guidance_indices(l, self.m_guid, self.l_zig),
            GuidanceSampling::Random => sample_guidance_indices(
                l,
                self.m_guid,
                self.l_zig,
                NoiseKey::new(
                    self.sampling_seed,
                    l as u64,
                    Purpose::GuidanceSample { pass: pass as u32 },
                ),
            ),
        }
    }

    fn run_window(
        &self,
        items: &mut [FrameLatent],
        ctx: &PassContext<'_>,
        start: usize,
        local_end: usize,
        guidance: Option<Vec<usize>>,
        commit: std::ops::Range<usize>,
    ) -> Result<WindowRecord> {
        let guidance = guidance.unwrap_or_default();
        let local_prompt = ctx.prompts.condition_at(start + 1, ctx.n_deq);

        let mut input = Vec::with_capacity(guidance.len() + local_end - start);
        let mut conditions = Vec::with_capacity(input.capacity());
        for &g in &guidance {
            let frame = &items[g - 1];
            input.push(frame.clone());
            conditions.push(ctx.prompts.condition_for_frame(frame.frame_index));
        }
        input.extend_from_slice(&items[start..local_end]);
        conditions.resize(input.len(), local_prompt);

        let eps = ctx
            .denoiser
            .predict(&DenoiseRequest {
                latents: &input,
                conditions: &conditions,
            })
            .map_err(|source| Error::Denoiser {
                phase: ctx.phase,
                iteration: ctx.iteration,
                source,
            })?;
        if eps.len() != input.len() {
            return Err(Error::Denoiser {
                phase: ctx.phase,
                iteration: ctx.iteration,
                source: crate::error::DenoiseError::Shape {
                    got: eps.len(),
                    expected: input.len(),
                },
            });
        }

        let record = WindowRecord {
            start: start + 1,
            width: input.len(),
            span: level_span(input.iter().map(|f| f.level)),
            local_span: level_span(items[start..local_end].iter().map(|f| f.level)),
            guided: !guidance.is_empty(),
            prompt: local_prompt.0,
            committed: commit.len(),
            queue_len: items.len(),
            guidance_indices: guidance,
        };
        let offset = record.width - (local_end - start);
        for p in commit {
            items[p] = ctx.sampler.step_one(&items[p], &eps[offset + p - start])?;
        }
        Ok(record)
    }
}

/// Unguided pass with `f0` taken from the denoiser's capability.
pub fn infer_queue_once(queue: &mut LatentQueue, ctx: &PassContext<'_>) -> Result<Vec<WindowRecord>> {
    WindowEngine::new(ctx.denoiser.max_window()).infer(queue, ctx)
}

/// Guided pass with `m_guid` even-spaced guidance latents per window.
pub fn infer_queue_once_guided(
    queue: &mut LatentQueue,
    ctx: &PassContext<'_>,
    m_guid: usize,
    l_zig: usize,
) -> Result<Vec<WindowRecord>> {
    let f0 = ctx.denoiser.max_window();
    if m_guid >= f0 {
        return Err(Error::Parameter(format!("m_guid = {m_guid} must be < f0 = {f0}")));
    }
    WindowEngine::new(f0).with_guidance(m_guid, l_zig).infer(queue, ctx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guidance_examples() {
        assert_eq!(select_guidance_indices(41, 4, 4), Some(vec![25, 30, 35, 40]));
        assert_eq!(select_guidance_indices(5, 4, 4), Some(vec![1, 2, 3, 4]));
        assert_eq!(select_guidance_indices(3, 6, 4), None);
        assert_eq!(select_guidance_indices(9, 1, 4), Some(vec![8]));
        assert_eq!(select_guidance_indices(9, 0, 4), None);
    }

    #[test]
    fn call_count_examples() {
        assert_eq!(calls_per_pass(64, 16, 8, 0), 7);
        assert_eq!(calls_per_pass(64, 16, 8, 6), 8);
        assert_eq!(calls_per_pass(16, 16, 8, 0), 1);
        assert_eq!(calls_per_pass(216, 16, 8, 0), 26);
    }

    #[test]
    fn random_sampling_keeps_last_and_is_distinct() {
        for pass in 0..50 {
            let key = NoiseKey::new(3, 41, Purpose::GuidanceSample { pass });
            let idx = sample_guidance_indices(41, 4, 4, key).unwrap();
            assert_eq!(idx.len(), 4);
            assert_eq!(*idx.last().unwrap(), 40);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
            assert!(idx[0] >= 25);
        }
    }

    proptest::proptest! {
        #[test]
        fn even_guidance_is_strict_and_in_range(l in 1usize..400, m in 1usize..12, lz in 1usize..8) {
            match select_guidance_indices(l, m, lz) {
                None => proptest::prop_assert!(l <= m),
                Some(idx) => {
                    let s = (m * lz).min(l - 1);
                    proptest::prop_assert_eq!(idx.len(), m);
                    if m > 1 {
                        proptest::prop_assert_eq!(idx[0], l - s);
                    }
                    proptest::prop_assert_eq!(*idx.last().unwrap(), l - 1);
                    proptest::prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
                }
            }
        }
    }
}
