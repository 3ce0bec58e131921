//! Transcript container and the consistency checks run over it.
//!
//! Serialized as `{"config":{..},"events":[..]}` where each event carries a
//! `kind` tag: `expand` {t, mu?, L}, `diagnostics` {steps, h, q},
//! `partition` {cuts, blocks}, `select` {block, H, C, rho, T},
//! `predict` {phase, n}, `commit` {pos, tok, conf}, `remask` {pos},
//! `weld` {interval, steps}, `forced` {pos}, `hbar` {v, uncentered},
//! `stop` {reason}.

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::state::{Event, Phase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub config: RunConfig,
    pub events: Vec<Event>,
}

impl Transcript {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("transcript is serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Every denoiser call.
    pub fn calls(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, Event::Predict { .. }))
            .count()
    }

    /// Denoiser calls that refine the sequence (everything but forced
    /// commits).
    pub fn refinement_iterations(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, Event::Predict { phase, .. } if *phase != Phase::Forced))
            .count()
    }

    /// Steps charged to the iteration budget: allocated block steps plus
    /// diagnostic and weld steps.
    pub fn charged_steps(&self) -> usize {
        self.events
            .iter()
            .map(|e| match e {
                Event::Select { steps, .. } => *steps,
                Event::Diagnostics { steps, .. } if self.config.charge_diagnostics => *steps,
                Event::Weld { steps, .. } if self.config.charge_welding => *steps,
                _ => 0,
            })
            .sum()
    }

    pub fn block_count(&self) -> usize {
        self.events
            .iter()
            .map(|e| match e {
                Event::Partition { blocks, .. } => blocks.len(),
                _ => 0,
            })
            .sum()
    }

    /// Checks that every commit and remask following a weld event, up to
    /// the next structural event, lies inside the weld interval. Returns
    /// the index of the first offending event.
    pub fn check_weld_locality(&self) -> Result<(), usize> {
        let mut interval: Option<[usize; 2]> = None;
        for (i, e) in self.events.iter().enumerate() {
            match e {
                Event::Weld { interval: iv, .. } => interval = Some(*iv),
                Event::Select { .. } | Event::Hbar { .. } | Event::Expand { .. } | Event::Stop { .. } => {
                    interval = None
                }
                Event::Commit { pos, .. } => {
                    if let Some([a, b]) = interval {
                        if !(a..b).contains(pos) {
                            return Err(i);
                        }
                    }
                }
                Event::Remask { pos } => {
                    if let Some([a, b]) = interval {
                        if pos.iter().any(|p| !(a..b).contains(p)) {
                            return Err(i);
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Block boundaries (as response positions) strictly inside each
    /// window, from the partition events.
    pub fn block_boundaries(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for e in &self.events {
            if let Event::Partition { blocks, .. } = e {
                out.extend(blocks.iter().skip(1).map(|b| b[0]));
            }
        }
        out
    }
}
