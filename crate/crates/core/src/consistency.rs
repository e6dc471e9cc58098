//! Latent-space consistency scoring and self-reflection.
//!
//! A chunk of latents is scored against a reference chunk by pooling every
//! frame over its tokens, normalizing the pooled channel vectors, and
//! averaging all pairwise cosines. The score works directly on noisy queue
//! latents, so the tail of the queue can be checked long before it is clean.

use rayon::prelude::*;

use crate::conditioning::PromptTrack;
use crate::denoiser::{Denoiser, TargetSequence};
use crate::error::{Error, Result};
use crate::latent::{FrameLatent, LatentQueue};
use crate::rng::{NoiseKey, Purpose};
use crate::sampler::DdimSampler;
use crate::trace::{self, Phase};
use crate::window::{PassContext, WindowEngine, WindowRecord};

/// Token-mean pooled channel vector and its squared norm.
struct Pooled {
    v: Vec<f64>,
    norm2: f64,
}

fn pool(frame: &[f32], l: usize, d: usize) -> Result<Pooled> {
    if frame.len() != l * d {
        return Err(Error::Shape(format!(
            "latent has {} values, expected {l}x{d}",
            frame.len()
        )));
    }
    let mut v = vec![0.0f64; d];
    for token in frame.chunks_exact(d) {
        for (p, &x) in v.iter_mut().zip(token) {
            *p += f64::from(x);
        }
    }
    for p in &mut v {
        *p /= l as f64;
    }
    let norm2: f64 = v.iter().map(|x| x * x).sum();
    if !norm2.is_finite() || norm2 <= 0.0 {
        return Err(Error::DegenerateInput(format!(
            "token-pooled latent has squared norm {norm2}"
        )));
    }
    Ok(Pooled { v, norm2 })
}

fn pool_all<A: AsRef<[f32]>>(frames: &[A], l: usize, d: usize) -> Result<Vec<Pooled>> {
    frames.iter().map(|f| pool(f.as_ref(), l, d)).collect()
}

/// Cosine as `<a,b>/√(|a|²|b|²)`, which is exactly 1 for identical inputs.
fn cosine(a: &Pooled, b: &Pooled) -> f64 {
    let dot: f64 = a.v.iter().zip(&b.v).map(|(x, y)| x * y).sum();
    (dot / (a.norm2 * b.norm2).sqrt()).clamp(-1.0, 1.0)
}

fn mean_cosine(eval: &[Pooled], refs: &[Pooled]) -> f64 {
    let total: f64 = eval
        .iter()
        .map(|e| refs.iter().map(|r| cosine(e, r)).sum::<f64>())
        .sum();
    total / (eval.len() * refs.len()) as f64
}

/// Grand mean of the `f_eval × f_ref` cosine matrix between token-pooled
/// frames.
pub fn c_score<A: AsRef<[f32]>, B: AsRef<[f32]>>(q_eval: &[A], q_ref: &[B], l: usize, d: usize) -> Result<f64> {
    if q_eval.is_empty() || q_ref.is_empty() {
        return Err(Error::Parameter("c_score needs non-empty eval and ref sets".into()));
    }
    Ok(mean_cosine(&pool_all(q_eval, l, d)?, &pool_all(q_ref, l, d)?))
}

/// One point of a sliding score curve; `position` is the 1-based index of
/// the first evaluated frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub position: usize,
    pub score: f64,
}

/// Slides an eval chunk of `f_eval` frames along the sequence, each time
/// against the `f_ref` frames right before it. Empty when the sequence is
/// too short for a single position.
pub fn score_curve<A: AsRef<[f32]>>(
    frames: &[A],
    l: usize,
    d: usize,
    f_eval: usize,
    f_ref: usize,
) -> Result<Vec<CurvePoint>> {
    if f_eval == 0 || f_ref == 0 {
        return Err(Error::Parameter("f_eval and f_ref must be positive".into()));
    }
    if frames.len() < f_eval + f_ref {
        return Ok(Vec::new());
    }
    let pooled = pool_all(frames, l, d)?;
    Ok((f_ref..=frames.len() - f_eval)
        .map(|p| CurvePoint {
            position: p + 1,
            score: mean_cosine(&pooled[p..p + f_eval], &pooled[p - f_ref..p]),
        })
        .collect())
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need two equal-length series of at least 2 points, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedCorrelation("constant score curve".into()));
    }
    if a == b {
        return Ok(1.0);
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation between the clean score curve and the curve of the
/// same frames noised to each level. Level 0 leaves frames untouched.
pub fn noisy_score_correlation(
    targets: &TargetSequence,
    levels: &[usize],
    sampler: &DdimSampler,
    seed: u64,
    trial: u32,
    f_eval: usize,
    f_ref: usize,
) -> Result<Vec<(usize, f64)>> {
    if targets.len() < 20 {
        return Err(Error::Parameter(format!(
            "need at least 20 frames, got {}",
            targets.len()
        )));
    }
    let (l, d) = targets.dims();
    let clean: Vec<f64> = score_curve(targets.frames(), l, d, f_eval, f_ref)?
        .iter()
        .map(|p| p.score)
        .collect();
    levels
        .iter()
        .map(|&level| {
            let noisy: Vec<Vec<f32>> = if level == 0 {
                targets.frames().to_vec()
            } else {
                targets
                    .frames()
                    .iter()
                    .enumerate()
                    .map(|(i, f)| {
                        let key = NoiseKey::new(
                            seed,
                            i as u64 + 1,
                            Purpose::Correlation {
                                trial,
                                level: level as u32,
                            },
                        );
                        sampler
                            .add_noise(&FrameLatent::new(f.clone(), i + 1, 0), level, key)
                            .map(|z| z.data)
                    })
                    .collect::<Result<_>>()?
            };
            let curve: Vec<f64> = score_curve(&noisy, l, d, f_eval, f_ref)?
                .iter()
                .map(|p| p.score)
                .collect();
            Ok((level, pearson(&clean, &curve)?))
        })
        .collect()
}

/// Accepted score `C⁰` and the self-reflection counters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ReflectionState {
    pub prev_score: Option<f64>,
    pub n_all: usize,
    pub n_eval: usize,
    pub n_corr: usize,
}

impl ReflectionState {
    pub fn with_score(score: f64) -> Self {
        Self {
            prev_score: Some(score),
            ..Self::default()
        }
    }

    /// True iff the score dropped by more than `delta` since `C⁰`. When it
    /// did not, `current` becomes the new `C⁰`. The first observation only
    /// initializes `C⁰`.
    pub fn should_trigger(&mut self, current: f64, delta: f64) -> bool {
        match self.prev_score {
            Some(prev) if prev - current > delta => true,
            _ => {
                self.prev_score = Some(current);
                false
            }
        }
    }

    /// Forgets `C⁰`, e.g. when the evaluated chunk crosses into a new prompt.
    pub fn reset_score(&mut self) {
        self.prev_score = None;
    }
}

pub fn should_trigger(state: &mut ReflectionState, current: f64, delta_adju: f64) -> bool {
    state.should_trigger(current, delta_adju)
}

/// Windows of the self-reflection check. Positions are 1-based queue indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReflectionWindows {
    pub f_eval: usize,
    pub f_ref: usize,
    pub f_judg: usize,
    pub f_guid: usize,
}

impl ReflectionWindows {
    /// Score of the incumbent chunk `Q[f_judg, f_judg + f_eval)` against the
    /// `f_ref` latents before it.
    pub fn incumbent_score(&self, queue: &LatentQueue, l: usize, d: usize) -> Result<f64> {
        let j = self.f_judg - 1;
        if j < self.f_ref || j + self.f_eval > queue.len() {
            return Err(Error::State(format!(
                "queue of {} cannot hold eval [{}, {}] after {} reference latents",
                queue.len(),
                self.f_judg,
                self.f_judg + self.f_eval - 1,
                self.f_ref
            )));
        }
        let items: Vec<&FrameLatent> = queue.iter().collect();
        c_score(&items[j..j + self.f_eval], &items[j - self.f_ref..j], l, d)
    }
}

/// Where candidate tails draw their fresh noise from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchNoise {
    /// Keys unique to each `(search, candidate)` pair.
    Fresh { search: u32 },
    /// The keys the queue tail was originally enqueued with.
    Replay,
}

pub struct SearchRequest<'a> {
    pub windows: ReflectionWindows,
    pub n_samp: usize,
    pub l_zig: usize,
    pub engine: &'a WindowEngine,
    pub denoiser: &'a dyn Denoiser,
    pub sampler: &'a DdimSampler,
    pub prompts: &'a PromptTrack,
    pub n_deq: usize,
    pub iteration: usize,
    pub seed: u64,
    pub noise: SearchNoise,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    /// One tail of `L − f_judg + 1` latents per candidate.
    pub candidates: Vec<Vec<FrameLatent>>,
    pub rounds: usize,
    /// Window records per candidate, per round.
    pub passes: Vec<Vec<Vec<WindowRecord>>>,
}

/// Regenerates the tail `Q[f_judg, L]` `n_samp` times. Each candidate starts
/// from the `f_guid` latents before `f_judg` as frozen context and runs
/// `⌈(L − f_judg + 1)/L_zig⌉` rounds of {append `L_zig` fresh latents at the
/// top level; one pass}. Candidates run in parallel.
pub fn expand_search(queue: &LatentQueue, req: &SearchRequest<'_>) -> Result<SearchOutcome> {
    let w = req.windows;
    let len = queue.len();
    if w.f_judg <= w.f_guid || w.f_judg > len || w.f_judg + w.f_eval - 1 > len {
        return Err(Error::State(format!(
            "queue of {len} has no room for {} guidance latents before position {}",
            w.f_guid, w.f_judg
        )));
    }
    let j = w.f_judg - 1;
    let items: Vec<FrameLatent> = queue.iter().cloned().collect();
    let guidance = &items[j - w.f_guid..j];
    let tail = &items[j..];
    let tail_len = tail.len();
    let rounds = tail_len.div_ceil(req.l_zig);
    let excess = rounds * req.l_zig - tail_len;
    let first_index = tail[0].frame_index;
    let top = req.sampler.schedule().steps();
    let dim = tail[0].data.len();

    let run = |k: usize| -> Result<(Vec<FrameLatent>, Vec<Vec<WindowRecord>>)> {
        let mut seq: Vec<FrameLatent> = guidance.to_vec();
        let mut passes = Vec::with_capacity(rounds);
        for round in 0..rounds {
            for g in 0..req.l_zig {
                let frame_index = (first_index + round * req.l_zig + g).saturating_sub(excess).max(1);
                let purpose = match req.noise {
                    SearchNoise::Fresh { search } => Purpose::Search {
                        search,
                        candidate: k as u32,
                    },
                    SearchNoise::Replay => Purpose::Enqueue,
                };
                let data = NoiseKey::new(req.seed, frame_index as u64, purpose).gaussian(dim);
                seq.push(FrameLatent::new(data, frame_index, top));
            }
            let ctx = PassContext {
                denoiser: req.denoiser,
                sampler: req.sampler,
                prompts: req.prompts,
                n_deq: req.n_deq + j - w.f_guid,
                phase: Phase::Search,
                iteration: req.iteration,
                pass: round,
            };
            passes.push(req.engine.sweep(&mut seq, &ctx, w.f_guid, true)?);
        }
        let kept = seq.split_off(seq.len() - tail_len);
        debug_assert!(seq[..w.f_guid] == *guidance);
        Ok((kept, passes))
    };

    let results: Vec<_> = (0..req.n_samp).into_par_iter().map(run).collect::<Result<_>>()?;
    let (candidates, passes) = results.into_iter().unzip();
    Ok(SearchOutcome {
        candidates,
        rounds,
        passes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionOutcome {
    pub scores: Vec<f64>,
    /// Index of the spliced candidate, if any beat the incumbent.
    pub winner: Option<usize>,
    pub previous: f64,
    pub accepted: f64,
}

/// Scores each candidate's first `f_eval` latents against the reference
/// chunk and splices the best over `Q[f_judg, L]` if it beats `c_init`.
/// Ties at the maximum go to the lowest candidate index.
pub fn maybe_correct(
    queue: &mut LatentQueue,
    candidates: &[Vec<FrameLatent>],
    state: &mut ReflectionState,
    windows: &ReflectionWindows,
    c_init: f64,
    l: usize,
    d: usize,
) -> Result<CorrectionOutcome> {
    let j = windows.f_judg - 1;
    let reference: Vec<FrameLatent> = queue.iter().skip(j - windows.f_ref).take(windows.f_ref).cloned().collect();
    let scores = candidates
        .iter()
        .map(|c| {
            if c.len() < windows.f_eval || j + c.len() != queue.len() {
                return Err(Error::Shape(format!(
                    "candidate of {} latents does not fit tail [{}, {}]",
                    c.len(),
                    windows.f_judg,
                    queue.len()
                )));
            }
            let refs: Vec<&FrameLatent> = reference.iter().collect();
            let eval: Vec<&FrameLatent> = c[..windows.f_eval].iter().collect();
            c_score(&eval, &refs, l, d)
        })
        .collect::<Result<Vec<f64>>>()?;

    let mut best: Option<(usize, f64)> = None;
    for (k, &s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((k, s));
        }
    }
    state.n_eval += 1;
    let (winner, accepted) = match best {
        Some((k, s)) if s > c_init => {
            queue.splice(j, candidates[k].clone())?;
            state.n_corr += 1;
            (Some(k), s)
        }
        _ => (None, c_init),
    };
    state.prev_score = Some(accepted);
    Ok(CorrectionOutcome {
        scores,
        winner,
        previous: c_init,
        accepted,
    })
}

/// Extra denoiser passes spent on reflection:
/// `n_adju · n_samp · ⌈(L − f_judg + 1)/L_zig⌉`.
pub fn reflection_cost(n_adju: usize, n_samp: usize, queue_len: usize, f_judg: usize, l_zig: usize) -> usize {
    n_adju * n_samp * (queue_len + 1).saturating_sub(f_judg).div_ceil(l_zig)
}

/// `(R_corr, R_succ)`; each is `None` when its denominator is zero.
pub fn reflection_rates(state: &ReflectionState) -> (Option<f64>, Option<f64>) {
    trace::rates(state.n_all, state.n_eval, state.n_corr)
}
