//! End-to-end generation: FIFO baseline, two-stage zigzag (with and without
//! self-reflection and long-range guidance) and the uniform-level ablation.
//!
//! Every run goes through one [`Engine`], which owns the trace. All fresh
//! noise is keyed by `(seed, frame_index, purpose)`, so two runs with the
//! same configuration produce identical latents and identical traces.

use crate::conditioning::{ConditionId, PromptTrack};
use crate::config::{Mode, SchedulerConfig};
use crate::consistency::{
    expand_search, maybe_correct, ReflectionState, ReflectionWindows, SearchNoise, SearchRequest,
};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::latent::{FrameLatent, LatentQueue};
use crate::rng::{NoiseKey, Purpose};
use crate::sampler::DdimSampler;
use crate::trace::{Event, Phase, Trace};
use crate::window::{PassContext, WindowEngine, WindowRecord};

pub struct Engine<'a> {
    config: SchedulerConfig,
    denoiser: &'a dyn Denoiser,
    sampler: DdimSampler,
    prompts: PromptTrack,
    windows: WindowEngine,
    trace: Trace,
    passes: usize,
    reflection: ReflectionState,
    searches: usize,
    reflection_prompt: Option<ConditionId>,
}

impl<'a> Engine<'a> {
    pub fn new(config: SchedulerConfig, denoiser: &'a dyn Denoiser) -> Result<Self> {
        config.validate()?;
        if denoiser.max_window() < config.f0 {
            return Err(Error::Config(format!(
                "denoiser accepts at most {} frames, f0 = {}",
                denoiser.max_window(),
                config.f0
            )));
        }
        let schedule = config.schedule()?;
        let sampler = DdimSampler::with_eta(schedule, config.eta, config.seed)?;
        let m_guid = if config.mode.uses_dce() { config.m_guid } else { 0 };
        let windows = WindowEngine::new(config.f0)
            .with_stride(config.stride())
            .with_guidance(m_guid, config.l_zig)
            .with_sampling(config.guidance_sampling, config.seed);
        Ok(Self {
            prompts: config.prompt_track()?,
            config,
            denoiser,
            sampler,
            windows,
            trace: Trace::new(),
            passes: 0,
            reflection: ReflectionState::default(),
            searches: 0,
            reflection_prompt: None,
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn sampler(&self) -> &DdimSampler {
        &self.sampler
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    pub fn reflection_state(&self) -> ReflectionState {
        self.reflection
    }

    /// Runs the configured mode and returns frames `1..=N`, clean.
    pub fn run(&mut self) -> Result<Vec<FrameLatent>> {
        self.trace.record(Event::RunStart {
            config: self.config.clone(),
        });
        let frames = match self.config.mode {
            Mode::Fifo => self.run_fifo()?,
            Mode::Tta | Mode::TtaDce => self.run_tta()?,
            Mode::Stage2Only => self.run_stage2_only()?,
        };
        self.trace.record(Event::RunEnd {
            frames: frames.len(),
        });
        Ok(frames)
    }

    fn fresh(&self, frame_index: usize, purpose: Purpose) -> FrameLatent {
        let data = NoiseKey::new(self.config.seed, frame_index as u64, purpose)
            .gaussian(self.config.l * self.config.d);
        FrameLatent::new(data, frame_index, self.config.t)
    }

    fn enqueue(&mut self, queue: &mut LatentQueue, frame_index: usize, phase: Phase, iteration: usize) {
        let latent = self.fresh(frame_index, Purpose::Enqueue);
        self.trace.record(Event::Enqueue {
            phase,
            iteration,
            frame_index,
            level: latent.level,
        });
        queue.push_back(latent);
    }

    fn dequeue(&mut self, queue: &mut LatentQueue, phase: Phase, iteration: usize, level: usize) -> Result<FrameLatent> {
        let head = queue
            .pop_front()
            .ok_or_else(|| Error::State("dequeue from an empty queue".into()))?;
        if head.level != level {
            return Err(Error::State(format!(
                "head frame {} leaves at level {}, expected {level}",
                head.frame_index, head.level
            )));
        }
        self.trace.record(Event::Dequeue {
            phase,
            iteration,
            frame_index: head.frame_index,
            level: head.level,
        });
        Ok(head)
    }

    /// One pass over `items`; records its windows and a closing pass event.
    fn pass(
        &mut self,
        items: &mut [FrameLatent],
        phase: Phase,
        iteration: usize,
        n_deq: usize,
        guided: bool,
    ) -> Result<()> {
        if items.is_empty() {
            return Ok(());
        }
        let engine = if guided { self.windows } else { self.windows.unguided() };
        let ctx = PassContext {
            denoiser: self.denoiser,
            sampler: &self.sampler,
            prompts: &self.prompts,
            n_deq,
            phase,
            iteration,
            pass: self.passes,
        };
        let records = engine.sweep(items, &ctx, 0, true)?;
        self.record_pass(records, phase, iteration, items.len());
        Ok(())
    }

    fn record_pass(&mut self, records: Vec<WindowRecord>, phase: Phase, iteration: usize, queue_len: usize) {
        let pass = self.passes;
        let calls = records.len();
        for r in records {
            self.trace.record(Event::Window {
                phase,
                iteration,
                pass,
                start: r.start,
                width: r.width,
                span: r.span,
                local_span: r.local_span,
                guided: r.guided,
                guidance_indices: r.guidance_indices,
                prompt: r.prompt,
                committed: r.committed,
                queue_len: r.queue_len,
            });
        }
        self.trace.record(Event::Pass {
            phase,
            iteration,
            pass,
            calls,
            queue_len,
        });
        self.passes += 1;
    }

    /// `f0` clean latents for frames `first_frame..`, produced by the
    /// denoiser itself from pure noise in a single window.
    pub fn clean_seed(&mut self, first_frame: usize) -> Result<Vec<FrameLatent>> {
        let mut seed: Vec<FrameLatent> = (0..self.config.f0)
            .map(|i| self.fresh(first_frame + i, Purpose::Seed))
            .collect();
        for step in 1..=self.config.t {
            self.pass(&mut seed, Phase::Seed, step, first_frame - 1, false)?;
        }
        Ok(seed)
    }

    fn check_seed(&self, seed: &[FrameLatent]) -> Result<()> {
        if seed.len() != self.config.f0 {
            return Err(Error::Size(format!(
                "clean seed holds {} latents, expected f0 = {}",
                seed.len(),
                self.config.f0
            )));
        }
        if seed.iter().any(|f| f.level != 0) {
            return Err(Error::State("clean seed latents must be at level 0".into()));
        }
        Ok(())
    }

    fn noise_to(&self, clean: &FrameLatent, frame_index: usize, level: usize) -> Result<FrameLatent> {
        let src = FrameLatent::new(clean.data.clone(), frame_index, 0);
        let key = NoiseKey::new(self.config.seed, frame_index as u64, Purpose::InitNoise);
        self.sampler.add_noise(&src, level, key)
    }

    /// Diagonal queue of `T` latents at levels `1..=T`. Positions up to
    /// `T − f0` replicate the first seed latent; the rest hold the seed in
    /// order. Queue position equals frame index.
    pub fn init_fifo_queue(&self, seed: &[FrameLatent]) -> Result<LatentQueue> {
        self.check_seed(seed)?;
        let (t, f0) = (self.config.t, self.config.f0);
        let mut queue = LatentQueue::new(1);
        for p in 1..=t - f0 {
            queue.push_back(self.noise_to(&seed[0], p, p)?);
        }
        for (i, clean) in seed.iter().enumerate() {
            let p = t - f0 + i + 1;
            queue.push_back(self.noise_to(clean, p, p)?);
        }
        debug_assert!(queue.check_invariants().is_ok());
        Ok(queue)
    }

    pub fn run_fifo(&mut self) -> Result<Vec<FrameLatent>> {
        let (t, f0) = (self.config.t, self.config.f0);
        let seed = self.clean_seed(t - f0 + 1)?;
        let mut queue = self.init_fifo_queue(&seed)?;
        let mut out = Vec::with_capacity(self.config.n);
        for it in 1..=self.config.n {
            self.trace.record(Event::Iteration {
                phase: Phase::Fifo,
                iteration: it,
                queue_len: queue.len(),
            });
            self.pass(queue.as_mut_slice(), Phase::Fifo, it, it - 1, false)?;
            out.push(self.dequeue(&mut queue, Phase::Fifo, it, 0)?);
            self.enqueue(&mut queue, t + it, Phase::Fifo, it);
            debug_assert!(queue.check_invariants().is_ok());
        }
        Ok(out)
    }

    /// Zigzag queue over levels `e ..= T−1` in `L_zig`-wide groups. The seed
    /// is noised onto the top `⌈f0/L_zig⌉` levels below `T`, then each round
    /// appends `L_zig` fresh latents at `T` and runs one pass over the whole
    /// queue, so earlier latents guide the later ones.
    pub fn init_zigzag_queue(&mut self, seed: &[FrameLatent]) -> Result<LatentQueue> {
        self.check_seed(seed)?;
        let cfg = &self.config;
        let (t, lz, top) = (cfg.t, cfg.l_zig, cfg.t - cfg.n_zig());
        let guided = cfg.mode.uses_dce();
        let mut queue = LatentQueue::new(lz);
        for (i, clean) in seed.iter().enumerate() {
            queue.push_back(self.noise_to(clean, i + 1, top + i / lz)?);
        }
        let mut next = seed.len() + 1;
        for round in 1..=self.config.init_rounds() {
            for _ in 0..lz {
                self.enqueue(&mut queue, next, Phase::Init, round);
                next += 1;
            }
            self.pass(queue.as_mut_slice(), Phase::Init, round, 0, guided)?;
            debug_assert!(queue.check_invariants().is_ok());
        }
        debug_assert_eq!(queue.front().map(|f| f.level), Some(self.config.e));
        debug_assert_eq!(queue.back().map(|f| f.level), Some(t - 1));
        Ok(queue)
    }

    pub fn run_tta(&mut self) -> Result<Vec<FrameLatent>> {
        let seed = self.clean_seed(1)?;
        let mut queue = self.init_zigzag_queue(&seed)?;
        let (lz, e) = (self.config.l_zig, self.config.e);
        let dce = self.config.mode.uses_dce();
        let mut next = queue.len() + 1;
        let mut collected = Vec::with_capacity(self.config.padded_frames());

        for it in 1..=self.config.stage1_iterations() {
            let n_deq = collected.len();
            self.trace.record(Event::Iteration {
                phase: Phase::Stage1,
                iteration: it,
                queue_len: queue.len(),
            });
            if dce {
                self.reflect(&mut queue, it, n_deq)?;
            }
            for _ in 0..lz {
                self.enqueue(&mut queue, next, Phase::Stage1, it);
                next += 1;
            }
            self.pass(queue.as_mut_slice(), Phase::Stage1, it, n_deq, dce)?;
            for _ in 0..lz {
                collected.push(self.dequeue(&mut queue, Phase::Stage1, it, e - 1)?);
            }
            debug_assert!(queue.check_invariants().is_ok());
        }

        for step in 1..e {
            self.pass(&mut collected, Phase::Stage2, step, 0, false)?;
        }
        collected.truncate(self.config.n);
        Ok(collected)
    }

    /// Self-reflection check on the resident queue.
    fn reflect(&mut self, queue: &mut LatentQueue, iteration: usize, n_deq: usize) -> Result<()> {
        let cfg = &self.config;
        let windows = ReflectionWindows {
            f_eval: cfg.f_eval,
            f_ref: cfg.f_ref,
            f_judg: cfg.f_judg(),
            f_guid: cfg.f_guid(),
        };
        let (l, d, delta) = (cfg.l, cfg.d, cfg.delta_adju);

        let prompt = self.prompts.condition_at(windows.f_judg, n_deq);
        if self.reflection_prompt != Some(prompt) {
            self.reflection.reset_score();
            self.reflection_prompt = Some(prompt);
        }

        self.reflection.n_all += 1;
        let score = windows.incumbent_score(queue, l, d)?;
        let previous = self.reflection.prev_score;
        let triggered = self.reflection.should_trigger(score, delta);
        self.trace.record(Event::Eval {
            iteration,
            position: windows.f_judg,
            score,
            previous,
            triggered,
        });
        if !triggered {
            return Ok(());
        }

        let search = self.searches;
        self.searches += 1;
        let engine = self.windows.unguided();
        let outcome = expand_search(
            queue,
            &SearchRequest {
                windows,
                n_samp: self.config.n_samp,
                l_zig: self.config.l_zig,
                engine: &engine,
                denoiser: self.denoiser,
                sampler: &self.sampler,
                prompts: &self.prompts,
                n_deq,
                iteration,
                seed: self.config.seed,
                noise: SearchNoise::Fresh {
                    search: search as u32,
                },
            },
        )?;
        for candidate in outcome.passes {
            for (round, records) in candidate.into_iter().enumerate() {
                let len = windows.f_guid + (round + 1) * self.config.l_zig;
                self.record_pass(records, Phase::Search, iteration, len);
            }
        }
        let correction = maybe_correct(
            queue,
            &outcome.candidates,
            &mut self.reflection,
            &windows,
            score,
            l,
            d,
        )?;
        self.trace.record(Event::Search {
            iteration,
            search,
            rounds: outcome.rounds,
            incumbent: score,
            scores: correction.scores.clone(),
        });
        if let Some(candidate) = correction.winner {
            self.trace.record(Event::Correct {
                iteration,
                search,
                candidate,
                previous: correction.previous,
                score: correction.accepted,
            });
        }
        debug_assert!(queue.check_invariants().is_ok());
        Ok(())
    }

    /// `N` independent latents at `T`, denoised by `T` uniform-level passes.
    pub fn run_stage2_only(&mut self) -> Result<Vec<FrameLatent>> {
        let mut frames = Vec::with_capacity(self.config.n);
        for i in 1..=self.config.n {
            let latent = self.fresh(i, Purpose::Enqueue);
            self.trace.record(Event::Enqueue {
                phase: Phase::Stage2Only,
                iteration: 0,
                frame_index: i,
                level: latent.level,
            });
            frames.push(latent);
        }
        for step in 1..=self.config.t {
            self.pass(&mut frames, Phase::Stage2Only, step, 0, false)?;
        }
        Ok(frames)
    }
}

/// Output of [`generate`].
#[derive(Debug, Clone)]
pub struct Generation {
    pub frames: Vec<FrameLatent>,
    pub trace: Trace,
    pub reflection: ReflectionState,
}

/// Runs one generation and returns frames with the finished trace.
pub fn generate(config: &SchedulerConfig, denoiser: &dyn Denoiser) -> Result<Generation> {
    let mut engine = Engine::new(config.clone(), denoiser)?;
    let frames = engine.run()?;
    let reflection = engine.reflection_state();
    Ok(Generation {
        frames,
        trace: engine.into_trace(),
        reflection,
    })
}
