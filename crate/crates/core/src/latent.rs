//! Frame latents and the rolling latent queue.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One frame's latent (`l` tokens × `d` channels, token-major) together with
/// its global frame position and current ladder level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLatent {
    pub data: Vec<f32>,
    /// 1-based position of the frame in the generated video.
    pub frame_index: usize,
    /// Ladder level `t`; the timestep label is `schedule.tau(level)`.
    pub level: usize,
    /// Opaque per-frame state reserved for multistep samplers. The DDIM
    /// sampler never sets it.
    #[serde(skip)]
    pub history: Option<Box<[f32]>>,
}

impl FrameLatent {
    pub fn new(data: Vec<f32>, frame_index: usize, level: usize) -> Self {
        Self {
            data,
            frame_index,
            level,
            history: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl AsRef<[f32]> for FrameLatent {
    fn as_ref(&self) -> &[f32] {
        &self.data
    }
}

/// Ordered queue of frame latents whose levels never decrease toward the tail.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatentQueue {
    items: VecDeque<FrameLatent>,
    group_width: usize,
}

impl LatentQueue {
    pub fn new(group_width: usize) -> Self {
        assert!(group_width >= 1, "group width must be positive");
        Self {
            items: VecDeque::new(),
            group_width,
        }
    }

    pub fn from_items(items: Vec<FrameLatent>, group_width: usize) -> Self {
        let mut q = Self::new(group_width);
        q.items.extend(items);
        q
    }

    pub fn group_width(&self) -> usize {
        self.group_width
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push_back(&mut self, latent: FrameLatent) {
        self.items.push_back(latent);
    }

    pub fn pop_front(&mut self) -> Option<FrameLatent> {
        self.items.pop_front()
    }

    pub fn get(&self, index: usize) -> Option<&FrameLatent> {
        self.items.get(index)
    }

    pub fn iter(&self) -> impl Iterator<Item = &FrameLatent> {
        self.items.iter()
    }

    pub fn front(&self) -> Option<&FrameLatent> {
        self.items.front()
    }

    pub fn back(&self) -> Option<&FrameLatent> {
        self.items.back()
    }

    pub fn levels(&self) -> Vec<usize> {
        self.items.iter().map(|f| f.level).collect()
    }

    pub fn as_mut_slice(&mut self) -> &mut [FrameLatent] {
        self.items.make_contiguous()
    }

    pub fn as_slice(&mut self) -> &[FrameLatent] {
        self.items.make_contiguous()
    }

    pub fn into_vec(self) -> Vec<FrameLatent> {
        self.items.into()
    }

    /// Replaces `[start, start + replacement.len())` with `replacement`.
    pub(crate) fn splice(&mut self, start: usize, replacement: Vec<FrameLatent>) -> Result<()> {
        if start + replacement.len() > self.items.len() {
            return Err(Error::Index(format!(
                "splice of {} at {start} exceeds queue length {}",
                replacement.len(),
                self.items.len()
            )));
        }
        for (offset, latent) in replacement.into_iter().enumerate() {
            self.items[start + offset] = latent;
        }
        Ok(())
    }

    /// Structural invariants: non-decreasing levels, level changes only at
    /// multiples of the group width, consecutive distinct levels one step
    /// apart, and all groups except possibly the last full width.
    pub fn check_invariants(&self) -> Result<()> {
        let mut previous: Option<(usize, usize)> = None;
        for (pos, item) in self.items.iter().enumerate() {
            if !item.is_finite() {
                return Err(Error::State(format!("non-finite latent at position {pos}")));
            }
            if let Some((_, level)) = previous {
                if item.level < level {
                    return Err(Error::State(format!(
                        "level decreases at position {pos}: {level} -> {}",
                        item.level
                    )));
                }
                if item.level != level {
                    if pos % self.group_width != 0 {
                        return Err(Error::State(format!(
                            "level changes at position {pos}, not a multiple of {}",
                            self.group_width
                        )));
                    }
                    if item.level != level + 1 {
                        return Err(Error::State(format!(
                            "level jumps from {level} to {} at position {pos}",
                            item.level
                        )));
                    }
                }
            }
            previous = Some((pos, item.level));
        }
        for chunk_start in (0..self.items.len()).step_by(self.group_width) {
            let end = (chunk_start + self.group_width).min(self.items.len());
            let lvl = self.items[chunk_start].level;
            if (chunk_start..end).any(|i| self.items[i].level != lvl) {
                return Err(Error::State(format!(
                    "group starting at {chunk_start} mixes levels"
                )));
            }
        }
        Ok(())
    }
}

/// Max level minus min level inside `[start, start + width)`.
pub fn queue_noise_span(queue: &LatentQueue, start: usize, width: usize) -> Result<usize> {
    if width == 0 || start + width > queue.len() {
        return Err(Error::Index(format!(
            "window [{start}, {}) outside queue of length {}",
            start + width,
            queue.len()
        )));
    }
    Ok(level_span(queue.items.range(start..start + width).map(|f| f.level)))
}

pub(crate) fn level_span(levels: impl Iterator<Item = usize>) -> usize {
    let (lo, hi) = levels.fold((usize::MAX, 0), |(lo, hi), l| (lo.min(l), hi.max(l)));
    hi.saturating_sub(lo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn queue_with_levels(levels: &[usize], width: usize) -> LatentQueue {
        let items = levels
            .iter()
            .enumerate()
            .map(|(i, &lvl)| FrameLatent::new(vec![0.0; 4], i + 1, lvl))
            .collect();
        LatentQueue::from_items(items, width)
    }

    #[test]
    fn fifo_window_span_is_width_minus_one() {
        let q = queue_with_levels(&(1..=64).collect::<Vec<_>>(), 1);
        q.check_invariants().unwrap();
        assert_eq!(queue_noise_span(&q, 0, 16).unwrap(), 15);
        assert_eq!(queue_noise_span(&q, 48, 16).unwrap(), 15);
    }

    #[test]
    fn zigzag_aligned_window_span() {
        let levels: Vec<usize> = (0..64).map(|i| 10 + i / 4).collect();
        let q = queue_with_levels(&levels, 4);
        q.check_invariants().unwrap();
        // 16 latents aligned to a group boundary cover 4 levels.
        assert_eq!(queue_noise_span(&q, 8, 16).unwrap(), 3);
    }

    #[test]
    fn uniform_queue_has_zero_span() {
        let q = queue_with_levels(&[9; 20], 1);
        assert_eq!(queue_noise_span(&q, 2, 16).unwrap(), 0);
    }

    #[test]
    fn out_of_range_window_is_index_error() {
        let q = queue_with_levels(&[1, 2, 3], 1);
        assert!(matches!(queue_noise_span(&q, 1, 3), Err(Error::Index(_))));
        assert!(matches!(queue_noise_span(&q, 0, 0), Err(Error::Index(_))));
    }

    #[test]
    fn invariants_catch_misaligned_and_skipped_levels() {
        assert!(queue_with_levels(&[1, 1, 2, 2, 2, 2], 2).check_invariants().is_ok());
        assert!(queue_with_levels(&[1, 2, 2, 2], 2).check_invariants().is_err());
        assert!(queue_with_levels(&[1, 1, 3, 3], 2).check_invariants().is_err());
        assert!(queue_with_levels(&[2, 1], 1).check_invariants().is_err());
    }
}
