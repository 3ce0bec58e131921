//! Reference decoders to compare against.

use serde::{Deserialize, Serialize};

use crate::decoder::{Decode, DecodeError, RunConfig, Transcript};
use crate::denoiser::{predict_checked, Denoiser, DenoiserError, Prediction};
use crate::diagnostics::top_by_confidence;
use crate::state::{Event, Phase, SequenceState, StopReason, TokenId};

/// Settings for the monotonic-expansion baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonotonicConfig {
    /// Cells appended per expansion.
    pub tail: usize,
    /// Positions above this confidence commit together.
    pub threshold: f64,
    /// Stop expanding once the last cell predicts EOS at least this strongly.
    pub eos_threshold: f64,
}

impl Default for MonotonicConfig {
    fn default() -> Self {
        Self {
            tail: 32,
            threshold: 0.9,
            eos_threshold: 0.5,
        }
    }
}

struct Baseline<'a> {
    denoiser: &'a dyn Denoiser,
    state: SequenceState,
    remaining: usize,
    forced: bool,
}

impl Baseline<'_> {
    fn predict(&mut self, positions: &[usize], phase: Phase) -> Result<Vec<Prediction>, DenoiserError> {
        let preds = predict_checked(self.denoiser, self.state.prompt(), self.state.cells(), positions)?;
        self.state.record(Event::Predict {
            phase,
            n: positions.len(),
        });
        Ok(preds)
    }

    fn commit(&mut self, preds: &[Prediction], chosen: &[usize]) -> Result<(), DecodeError> {
        for &i in chosen {
            let (token, conf) = preds[i].dist.argmax();
            self.state.commit(preds[i].position, token, conf)?;
        }
        Ok(())
    }

    fn finish(mut self, config: &RunConfig) -> Result<Decode, DecodeError> {
        let stop = if self.forced {
            StopReason::Budget
        } else if self.state.has_eos() {
            StopReason::Eos
        } else {
            StopReason::NMax
        };
        self.state.record(Event::Stop { reason: stop });
        let tokens = self.state.truncate_at_first_eos()?;
        let events = self.state.events().to_vec();
        Ok(Decode {
            tokens,
            state: self.state,
            transcript: Transcript {
                config: config.clone(),
                events,
            },
            stop,
            windows: Vec::new(),
        })
    }

    fn wrap<T>(&self, r: Result<T, DenoiserError>, config: &RunConfig) -> Result<T, DecodeError> {
        r.map_err(|source| DecodeError::Denoiser {
            source,
            partial: Box::new(Transcript {
                config: config.clone(),
                events: self.state.events().to_vec(),
            }),
        })
    }
}

fn start<'a>(denoiser: &'a dyn Denoiser, prompt: &[TokenId], config: &RunConfig) -> Result<Baseline<'a>, DecodeError> {
    config.validate()?;
    if prompt.is_empty() {
        return Err(DecodeError::EmptyPrompt);
    }
    Ok(Baseline {
        denoiser,
        state: SequenceState::new(denoiser.descriptor().vocab, prompt.to_vec(), config.n_max),
        remaining: config.budget,
        forced: false,
    })
}

/// Masks all `n_max` cells at once and refines them for the whole budget,
/// committing `ceil(masked / steps_left)` positions per step by confidence.
/// With the default 256 cells and 256 steps this is exactly one commit and
/// one denoiser call per step.
pub fn fixed_length(denoiser: &dyn Denoiser, prompt: &[TokenId], config: &RunConfig) -> Result<Decode, DecodeError> {
    let mut b = start(denoiser, prompt, config)?;
    let window = b.state.append_window(config.n_max)?;
    let steps = config.budget;
    for step in 0..steps {
        let masked = b.state.masked_in(window.clone());
        if masked.is_empty() {
            break;
        }
        b.remaining -= 1;
        let n = masked.len().div_ceil(steps - step);
        let r = b.predict(&masked, Phase::Baseline);
        let preds = b.wrap(r, config)?;
        let conf: Vec<f64> = preds.iter().map(|p| p.dist.argmax().1).collect();
        b.commit(&preds, &top_by_confidence(&conf, n))?;
    }
    let masked = b.state.masked_in(window);
    if !masked.is_empty() {
        b.forced = true;
        let r = b.predict(&masked, Phase::Forced);
        let preds = b.wrap(r, config)?;
        b.state.record(Event::Forced { pos: masked });
        b.commit(&preds, &(0..preds.len()).collect::<Vec<_>>())?;
    }
    b.finish(config)
}

/// Grows the response by a fixed tail window until the last cell predicts
/// EOS confidently. Inside a window every position above `threshold`
/// commits at once, or else the single most confident one.
pub fn monotonic_baseline(
    denoiser: &dyn Denoiser,
    prompt: &[TokenId],
    config: &RunConfig,
    monotonic: &MonotonicConfig,
) -> Result<Decode, DecodeError> {
    if monotonic.tail == 0 {
        return Err(DecodeError::Config("tail window must be nonempty".into()));
    }
    let mut b = start(denoiser, prompt, config)?;
    while !b.state.has_eos() && b.state.headroom() > 0 {
        let len = monotonic.tail.min(b.state.headroom());
        let window = b.state.append_window(len)?;
        let last = window.end - 1;
        let mut frontier_eos = 0.0;
        loop {
            let masked = b.state.masked_in(window.clone());
            if masked.is_empty() {
                break;
            }
            let phase = if b.remaining == 0 {
                b.forced = true;
                Phase::Forced
            } else {
                b.remaining -= 1;
                Phase::Baseline
            };
            let r = b.predict(&masked, phase);
            let preds = b.wrap(r, config)?;
            if let Some(p) = preds.iter().find(|p| p.position == last) {
                frontier_eos = p.dist.prob(b.state.vocab().eos_id);
            }
            let chosen: Vec<usize> = if phase == Phase::Forced {
                b.state.record(Event::Forced { pos: masked });
                (0..preds.len()).collect()
            } else {
                let above: Vec<usize> = (0..preds.len())
                    .filter(|&i| preds[i].dist.argmax().1 > monotonic.threshold)
                    .collect();
                if above.is_empty() {
                    let conf: Vec<f64> = preds.iter().map(|p| p.dist.argmax().1).collect();
                    top_by_confidence(&conf, 1)
                } else {
                    above
                }
            };
            b.commit(&preds, &chosen)?;
        }
        if frontier_eos >= monotonic.eos_threshold {
            break;
        }
    }
    b.finish(config)
}
