//! Prompt conditions for multi-prompt generation.
//!
//! Conditions are opaque: the engine hands the denoiser a [`ConditionId`]
//! (the 1-based prompt index) and never looks inside the prompt.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConditionId(pub usize);

/// `⌈(l + n_deq) / N_prom⌉` clamped to `[1, n_prom]`.
///
/// `l` is the 1-based queue position the model is applied at and `n_deq` the
/// number of frames already dequeued, so `l + n_deq` is the global frame index.
pub fn prompt_index(l: usize, n_deq: usize, frames_per_prompt: usize, n_prompts: usize) -> usize {
    debug_assert!(l >= 1 && frames_per_prompt >= 1 && n_prompts >= 1);
    (l + n_deq).div_ceil(frames_per_prompt).clamp(1, n_prompts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTrack {
    prompts: Vec<String>,
    frames_per_prompt: usize,
}

impl PromptTrack {
    pub fn new(prompts: Vec<String>, frames_per_prompt: usize) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Config("prompt list is empty".into()));
        }
        if frames_per_prompt == 0 {
            return Err(Error::Config("N_prom must be positive".into()));
        }
        Ok(Self {
            prompts,
            frames_per_prompt,
        })
    }

    /// Single unnamed condition for unconditioned runs.
    pub fn single() -> Self {
        Self {
            prompts: vec![String::new()],
            frames_per_prompt: usize::MAX,
        }
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn frames_per_prompt(&self) -> usize {
        self.frames_per_prompt
    }

    pub fn prompt(&self, id: ConditionId) -> &str {
        &self.prompts[id.0 - 1]
    }

    pub fn condition_at(&self, l: usize, n_deq: usize) -> ConditionId {
        ConditionId(prompt_index(l, n_deq, self.frames_per_prompt, self.prompts.len()))
    }

    pub fn condition_for_frame(&self, frame_index: usize) -> ConditionId {
        self.condition_at(frame_index, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceiling_boundaries() {
        assert_eq!(prompt_index(1, 0, 30, 10), 1);
        assert_eq!(prompt_index(30, 0, 30, 10), 1);
        assert_eq!(prompt_index(31, 0, 30, 10), 2);
        assert_eq!(prompt_index(1, 30, 30, 10), 2);
    }

    #[test]
    fn tail_overflow_is_clamped() {
        assert_eq!(prompt_index(64, 300, 30, 3), 3);
    }

    #[test]
    fn single_track_is_constant() {
        let t = PromptTrack::single();
        assert_eq!(t.condition_at(1, 0), ConditionId(1));
        assert_eq!(t.condition_at(216, 100_000), ConditionId(1));
    }

    #[test]
    fn empty_track_rejected() {
        assert!(PromptTrack::new(vec![], 10).is_err());
        assert!(PromptTrack::new(vec!["a".into()], 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn plateaus_have_width_n_prom(n_prom in 1usize..40, frame in 1usize..2000) {
            let n_prompts = usize::MAX;
            let here = prompt_index(frame, 0, n_prom, n_prompts);
            let next = prompt_index(frame + 1, 0, n_prom, n_prompts);
            proptest::prop_assert!(next == here || next == here + 1);
            proptest::prop_assert_eq!(next == here + 1, frame % n_prom == 0);
        }
    }
}
