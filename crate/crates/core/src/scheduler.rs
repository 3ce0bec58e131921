//! Block ordering and refinement budgets.
//!
//! Each block is scored by `rho = -H + gamma * C`, where `H` is its mean
//! instability and `C` its context proximity: 1 when both neighbors are
//! committed, 0.5 for one, 0 for none. Higher scores decode first.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::Cell;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("block is empty")]
    EmptyBlock,
    #[error("block {start}..{end} outside instability profile of length {len}")]
    OutOfRange { start: usize, end: usize, len: usize },
    #[error("refinement budget exhausted")]
    BudgetExhausted,
    #[error("invalid step bounds: t_min {t_min} > t_max {t_max}")]
    BadBounds { t_min: usize, t_max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Sort once per window by the scores at window start.
    #[default]
    Static,
    /// Re-score the remaining blocks after every block, with context
    /// recomputed from the current commits.
    Greedy,
    /// Blocks in position order.
    LeftToRight,
}

/// Mean instability over `block`, given per-offset instabilities `h`.
pub fn block_instability(h: &[f64], block: Range<usize>) -> Result<f64, SchedulerError> {
    if block.is_empty() {
        return Err(SchedulerError::EmptyBlock);
    }
    if block.end > h.len() {
        return Err(SchedulerError::OutOfRange {
            start: block.start,
            end: block.end,
            len: h.len(),
        });
    }
    let n = block.len() as f64;
    Ok(h[block].iter().sum::<f64>() / n)
}

/// Context proximity of the absolute response span `block`. The left side
/// of the first response cell is anchored by a nonempty prompt; the right
/// side of the last cell is never anchored.
pub fn context_proximity(cells: &[Cell], has_prompt: bool, block: &Range<usize>) -> f64 {
    let left = if block.start == 0 {
        has_prompt
    } else {
        !cells[block.start - 1].is_masked()
    };
    let right = cells.get(block.end).is_some_and(|c| !c.is_masked());
    0.5 * (f64::from(u8::from(left)) + f64::from(u8::from(right)))
}

pub fn block_score(instability: f64, context: f64, gamma: f64) -> f64 {
    -instability + gamma * context
}

/// Steps for a block of mean instability `instability`, debited from
/// `remaining`.
pub fn refinement_budget(
    instability: f64,
    t_min: usize,
    t_max: usize,
    remaining: &mut usize,
) -> Result<usize, SchedulerError> {
    if t_min > t_max {
        return Err(SchedulerError::BadBounds { t_min, t_max });
    }
    if *remaining == 0 {
        return Err(SchedulerError::BudgetExhausted);
    }
    let h = instability.clamp(0.0, 1.0);
    let t = (t_min as f64 + h * (t_max - t_min) as f64).round() as usize;
    let t = t.clamp(1, *remaining);
    *remaining -= t;
    Ok(t)
}

/// Index of the highest score; ties go to the lowest index.
pub fn argmax_leftmost(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// One scheduling decision with the scores it was based on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub block: usize,
    pub instability: f64,
    pub context: f64,
    pub rho: f64,
}

/// Hands out the blocks of one window in decode order.
#[derive(Debug, Clone)]
pub struct BlockScheduler {
    mode: ScheduleMode,
    gamma: f64,
    blocks: Vec<Range<usize>>,
    instability: Vec<f64>,
    has_prompt: bool,
    decoded: Vec<bool>,
    plan: Vec<Selection>,
    cursor: usize,
}

impl BlockScheduler {
    /// `blocks` are absolute response spans; `instability` holds each
    /// block's mean instability.
    pub fn new(
        mode: ScheduleMode,
        gamma: f64,
        blocks: Vec<Range<usize>>,
        instability: Vec<f64>,
        has_prompt: bool,
        cells: &[Cell],
    ) -> Self {
        let mut s = Self {
            mode,
            gamma,
            decoded: vec![false; blocks.len()],
            blocks,
            instability,
            has_prompt,
            plan: Vec::new(),
            cursor: 0,
        };
        if mode == ScheduleMode::Static {
            let mut plan: Vec<Selection> = (0..s.blocks.len()).map(|b| s.snapshot(b, cells)).collect();
            plan.sort_by(|a, b| b.rho.total_cmp(&a.rho).then(a.block.cmp(&b.block)));
            s.plan = plan;
        }
        s
    }

    fn snapshot(&self, block: usize, cells: &[Cell]) -> Selection {
        let context = context_proximity(cells, self.has_prompt, &self.blocks[block]);
        let instability = self.instability[block];
        Selection {
            block,
            instability,
            context,
            rho: block_score(instability, context, self.gamma),
        }
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    /// Next block to decode given the current cells, or `None` when every
    /// block has been handed out.
    pub fn next(&mut self, cells: &[Cell]) -> Option<Selection> {
        let pick = match self.mode {
            ScheduleMode::Static => {
                let s = *self.plan.get(self.cursor)?;
                self.cursor += 1;
                s
            }
            ScheduleMode::LeftToRight => {
                let b = self.decoded.iter().position(|d| !d)?;
                self.snapshot(b, cells)
            }
            ScheduleMode::Greedy => {
                let open: Vec<Selection> = (0..self.blocks.len())
                    .filter(|&b| !self.decoded[b])
                    .map(|b| self.snapshot(b, cells))
                    .collect();
                let rho: Vec<f64> = open.iter().map(|s| s.rho).collect();
                open[argmax_leftmost(&rho)?]
            }
        };
        self.decoded[pick.block] = true;
        Some(pick)
    }
}
