//! The decode loop: expand a window, diagnose it, partition it, refine its
//! blocks in scheduled order, weld the seams, update the running
//! instability, repeat.

mod transcript;

use std::ops::Range;
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use transcript::Transcript;

use crate::calibration::Weights;
use crate::denoiser::{predict_checked, Denoiser, DenoiserError};
use crate::diagnostics::{
    all_position_features, instability, run_diagnostic_pass, top_by_confidence, DiagnosticConfig, DiagnosticTrace,
    DiagnosticsError, InstabilityProfile, PositionFeatures, StepObs, FEATURE_DIM,
};
use crate::partition::{blocks_from_cuts, local_alphas, map_cuts, PartitionError};
use crate::scheduler::{block_instability, refinement_budget, BlockScheduler, ScheduleMode, SchedulerError};
use crate::seed::SeedStream;
use crate::state::{Event, Phase, SequenceState, StateError, StopReason, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub l_min: usize,
    pub l_max: usize,
    pub alpha0: f64,
    pub gamma: f64,
    pub t_min: usize,
    pub t_max: usize,
    pub r_weld: usize,
    pub weld_steps: usize,
    /// Fraction of a weld interval that is remasked.
    pub weld_fraction: f64,
    pub diagnostics: DiagnosticConfig,
    pub n_max: usize,
    pub budget: usize,
    pub hbar_init: f64,
    pub weights: Option<PathBuf>,
    pub seed: u64,
    pub schedule: ScheduleMode,
    pub welding: bool,
    pub scheduling: bool,
    pub charge_diagnostics: bool,
    pub charge_welding: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            l_min: 8,
            l_max: 48,
            alpha0: 1.5,
            gamma: 2.0,
            t_min: 6,
            t_max: 18,
            r_weld: 4,
            weld_steps: 4,
            weld_fraction: 0.5,
            diagnostics: DiagnosticConfig::default(),
            n_max: 256,
            budget: 256,
            hbar_init: 0.5,
            weights: None,
            seed: 0,
            schedule: ScheduleMode::Static,
            welding: true,
            scheduling: true,
            charge_diagnostics: true,
            charge_welding: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        let bad = |m: String| Err(DecodeError::Config(m));
        if self.l_min == 0 || self.l_min > self.l_max {
            return bad(format!(
                "need 1 <= l_min <= l_max, got {} and {}",
                self.l_min, self.l_max
            ));
        }
        if self.t_min > self.t_max {
            return bad(format!("need t_min <= t_max, got {} and {}", self.t_min, self.t_max));
        }
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return bad(format!("alpha0 must be positive, got {}", self.alpha0));
        }
        if !self.gamma.is_finite() {
            return bad("gamma must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.weld_fraction) {
            return bad(format!("weld_fraction must lie in [0, 1], got {}", self.weld_fraction));
        }
        if !(0.0..=1.0).contains(&self.hbar_init) {
            return bad(format!("hbar_init must lie in [0, 1], got {}", self.hbar_init));
        }
        if self.diagnostics.steps < 2 {
            return bad("diagnostic steps must be at least 2".into());
        }
        let f = self.diagnostics.commit_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return bad(format!("commit_fraction must lie in (0, 1], got {f}"));
        }
        if self.n_max == 0 {
            return bad("n_max must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("denoiser failed: {source}")]
    Denoiser {
        #[source]
        source: DenoiserError,
        partial: Box<Transcript>,
    },
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Diagnostics(DiagnosticsError),
    #[error(transparent)]
    Weights(#[from] crate::calibration::CalibrationError),
}

impl DecodeError {
    pub fn partial_transcript(&self) -> Option<&Transcript> {
        match self {
            DecodeError::Denoiser { partial, .. } => Some(partial),
            _ => None,
        }
    }
}

/// Failure inside one window, before the transcript is attached.
enum Fault {
    Denoiser(DenoiserError),
    Other(DecodeError),
}

impl From<DenoiserError> for Fault {
    fn from(e: DenoiserError) -> Self {
        Fault::Denoiser(e)
    }
}

impl From<StateError> for Fault {
    fn from(e: StateError) -> Self {
        Fault::Other(e.into())
    }
}

impl From<PartitionError> for Fault {
    fn from(e: PartitionError) -> Self {
        Fault::Other(e.into())
    }
}

impl From<DiagnosticsError> for Fault {
    fn from(e: DiagnosticsError) -> Self {
        match e {
            DiagnosticsError::Denoiser(d) => Fault::Denoiser(d),
            other => Fault::Other(DecodeError::Diagnostics(other)),
        }
    }
}

/// Mean window length for a previous-window instability of `hbar`.
pub fn window_mean(hbar: f64, l_min: usize, l_max: usize) -> f64 {
    l_min as f64 + (1.0 - hbar) * (l_max - l_min) as f64
}

/// Poisson draw by sequential inversion of the CDF.
pub fn sample_poisson(mu: f64, rng: &mut impl Rng) -> u64 {
    let u: f64 = rng.random();
    let mut p = (-mu).exp();
    let mut cdf = p;
    let mut k = 0u64;
    let limit = (10.0 * mu + 100.0) as u64;
    while u > cdf && k < limit {
        k += 1;
        p *= mu / k as f64;
        cdf += p;
    }
    k
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowDraw {
    pub len: usize,
    pub mu: f64,
    /// The Poisson draw before clamping.
    pub raw: u64,
}

/// Draws the next window length, clamped into `[l_min, l_max]` and then to
/// the remaining `headroom`. `None` when there is no headroom.
pub fn sample_window_length(
    hbar: f64,
    l_min: usize,
    l_max: usize,
    headroom: usize,
    stream: &SeedStream,
) -> Option<WindowDraw> {
    if headroom == 0 {
        return None;
    }
    let mu = window_mean(hbar.clamp(0.0, 1.0), l_min, l_max);
    let raw = sample_poisson(mu, &mut stream.rng());
    let len = (raw as usize).clamp(l_min, l_max).min(headroom);
    Some(WindowDraw { len, mu, raw })
}

/// Span `[max(a, b - r), min(c, b + r))` around the seam `b` of adjacent
/// blocks `[a, b)` and `[b, c)`.
pub fn weld_interval(left: &Range<usize>, right: &Range<usize>, r: usize) -> Range<usize> {
    let b = right.start;
    debug_assert_eq!(left.end, b);
    left.start.max(b.saturating_sub(r))..right.end.min(b + r)
}

/// Per-position decode bookkeeping.
#[derive(Debug, Clone, Default)]
struct Ledger {
    history: Vec<Vec<StepObs>>,
    conf: Vec<f64>,
    remasked: Vec<bool>,
}

impl Ledger {
    fn grow(&mut self, len: usize) {
        self.history.resize(len, Vec::new());
        self.conf.resize(len, 0.0);
        self.remasked.resize(len, false);
    }

    fn last_hidden(&self, pos: usize) -> Option<&[f64]> {
        self.history.get(pos)?.last()?.hidden.as_deref()
    }
}

/// What one window looked like, for calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub start: usize,
    pub len: usize,
    pub features: Vec<[f64; FEATURE_DIM]>,
    pub available: [bool; FEATURE_DIM],
    pub gap_jsd: Vec<f64>,
    pub remasked: Vec<bool>,
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decode {
    pub tokens: Vec<TokenId>,
    pub state: SequenceState,
    pub transcript: Transcript,
    pub stop: StopReason,
    pub windows: Vec<WindowSummary>,
}

impl Decode {
    pub fn calls(&self) -> usize {
        self.transcript.calls()
    }

    pub fn iterations(&self) -> usize {
        self.transcript.refinement_iterations()
    }

    pub fn blocks(&self) -> usize {
        self.transcript.block_count()
    }
}

struct Run<'a> {
    denoiser: &'a dyn Denoiser,
    config: &'a RunConfig,
    weights: &'a Weights,
    state: SequenceState,
    ledger: Ledger,
    remaining: usize,
    forced: bool,
    windows: Vec<WindowSummary>,
}

impl Run<'_> {
    fn predict(&mut self, positions: &[usize], phase: Phase) -> Result<Vec<crate::Prediction>, Fault> {
        let preds = predict_checked(self.denoiser, self.state.prompt(), self.state.cells(), positions)?;
        self.state.record(Event::Predict {
            phase,
            n: positions.len(),
        });
        Ok(preds)
    }

    /// Commits the top `n` predictions by confidence and logs every
    /// observation.
    fn commit_top(&mut self, preds: Vec<crate::Prediction>, n: usize) -> Result<(), Fault> {
        let conf: Vec<f64> = preds.iter().map(|p| p.dist.argmax().1).collect();
        let chosen = top_by_confidence(&conf, n);
        let mut accept = vec![false; preds.len()];
        for &i in &chosen {
            accept[i] = true;
        }
        for (i, p) in preds.into_iter().enumerate() {
            let (token, f) = p.dist.argmax();
            if accept[i] {
                self.state.commit(p.position, token, f)?;
                self.ledger.conf[p.position] = f;
            }
            self.ledger.history[p.position].push(StepObs::predicted(p.dist, p.hidden, accept[i]));
        }
        Ok(())
    }

    /// One prediction over every masked cell of `span`, all committed.
    fn force_commit(&mut self, span: Range<usize>) -> Result<(), Fault> {
        let masked = self.state.masked_in(span);
        if masked.is_empty() {
            return Ok(());
        }
        self.forced = true;
        let preds = self.predict(&masked, Phase::Forced)?;
        self.state.record(Event::Forced { pos: masked.clone() });
        let n = preds.len();
        self.commit_top(preds, n)
    }

    /// Refines a fully masked block over `steps` steps, committing
    /// `ceil(masked / steps_left)` positions per step.
    fn decode_block(&mut self, block: Range<usize>, steps: usize) -> Result<(), Fault> {
        self.refine(block, steps, Phase::Block)
    }

    fn refine(&mut self, span: Range<usize>, steps: usize, phase: Phase) -> Result<(), Fault> {
        for step in 0..steps {
            let masked = self.state.masked_in(span.clone());
            if masked.is_empty() {
                break;
            }
            let n = masked.len().div_ceil(steps - step);
            let preds = self.predict(&masked, phase)?;
            self.commit_top(preds, n)?;
        }
        Ok(())
    }

    fn weld(&mut self, left: &Range<usize>, right: &Range<usize>) -> Result<(), Fault> {
        let interval = weld_interval(left, right, self.config.r_weld);
        let k = (interval.len() as f64 * self.config.weld_fraction).floor() as usize;
        let steps = if self.config.charge_welding {
            self.config.weld_steps.min(self.remaining)
        } else {
            self.config.weld_steps
        };
        if interval.is_empty() || k == 0 || steps == 0 {
            return Ok(());
        }
        if self.config.charge_welding {
            self.remaining -= steps;
        }
        let conf: Vec<f64> = interval.clone().map(|p| -self.ledger.conf[p]).collect();
        let picks: Vec<usize> = top_by_confidence(&conf, k)
            .into_iter()
            .map(|i| interval.start + i)
            .collect();
        self.state.record(Event::Weld {
            interval: [interval.start, interval.end],
            steps,
        });
        self.state.remask(&picks)?;
        for &p in &picks {
            self.ledger.remasked[p] = true;
        }
        self.refine(interval.clone(), steps, Phase::Weld)?;
        // the last step commits everything left, so nothing stays masked
        debug_assert!(self.state.masked_in(interval).is_empty());
        Ok(())
    }

    /// Instability of a finished window from its decode history.
    fn finalize_window(&self, window: Range<usize>) -> Result<InstabilityProfile, Fault> {
        let trace = DiagnosticTrace {
            positions: self.ledger.history[window.clone()].to_vec(),
            left_hidden: window
                .start
                .checked_sub(1)
                .and_then(|p| self.ledger.last_hidden(p))
                .map(<[f64]>::to_vec),
            hidden_available: self.denoiser.descriptor().hidden_dim.is_some(),
            aligned: false,
            calls: Vec::new(),
            window,
        };
        Ok(finalize_window_instability(&trace, &self.weights.w)?)
    }

    fn window(&mut self, t: usize, hbar_prev: f64, seeds: &SeedStream) -> Result<Option<f64>, Fault> {
        let cfg = self.config;
        let Some(draw) = sample_window_length(
            hbar_prev,
            cfg.l_min,
            cfg.l_max,
            self.state.headroom(),
            &seeds.derive("window", t as u64),
        ) else {
            return Ok(None);
        };
        let window = self.state.append_window_with_mean(draw.len, Some(draw.mu))?;
        self.ledger.grow(self.state.len());

        let diag_cost = if cfg.charge_diagnostics {
            cfg.diagnostics.steps
        } else {
            0
        };
        if self.remaining < diag_cost.max(1) {
            self.force_commit(window.clone())?;
            self.windows.push(WindowSummary {
                start: window.start,
                len: window.len(),
                features: Vec::new(),
                available: [false; FEATURE_DIM],
                gap_jsd: Vec::new(),
                remasked: vec![false; window.len()],
                forced: true,
            });
            return Ok(Some(hbar_prev));
        }
        self.remaining -= diag_cost;

        let left_hidden = window
            .start
            .checked_sub(1)
            .and_then(|p| self.ledger.last_hidden(p))
            .map(<[f64]>::to_vec);
        let trace = run_diagnostic_pass(
            self.denoiser,
            &self.state,
            window.clone(),
            &cfg.diagnostics,
            left_hidden.as_deref(),
        )?;
        for &n in &trace.calls {
            self.state.record(Event::Predict { phase: Phase::Diag, n });
        }
        let features = all_position_features(&trace);
        let profile = instability(&features, &self.weights.w)?;
        let temp = trace.temp_dists(cfg.diagnostics.temp_source);
        let edges = crate::diagnostics::edge_scores(&profile.h, &temp, &self.weights.w_b)?;
        self.state.record(Event::Diagnostics {
            steps: cfg.diagnostics.steps,
            h: profile.h.clone(),
            q: edges.q.clone(),
        });

        let alphas = local_alphas(cfg.alpha0, hbar_prev, &edges.logits)?;
        let cuts = map_cuts(&edges.q, &alphas)?;
        let partition = blocks_from_cuts(&cuts);
        self.state.record(Event::Partition {
            cuts: cuts.iter().map(|&c| u8::from(c)).collect(),
            blocks: partition.spans(window.start),
        });

        let blocks: Vec<Range<usize>> = partition
            .blocks()
            .iter()
            .map(|b| b.start + window.start..b.end + window.start)
            .collect();
        let block_h: Vec<f64> = partition
            .blocks()
            .iter()
            .map(|b| block_instability(&profile.h, b.clone()))
            .collect::<Result<_, SchedulerError>>()
            .expect("partition blocks lie inside the window");
        let mode = if cfg.scheduling {
            cfg.schedule
        } else {
            ScheduleMode::LeftToRight
        };
        let mut scheduler = BlockScheduler::new(
            mode,
            cfg.gamma,
            blocks.clone(),
            block_h,
            !self.state.prompt().is_empty(),
            self.state.cells(),
        );
        while let Some(sel) = scheduler.next(self.state.cells()) {
            let block = blocks[sel.block].clone();
            match refinement_budget(sel.instability, cfg.t_min, cfg.t_max, &mut self.remaining) {
                Ok(steps) => {
                    self.state.record(Event::Select {
                        block: sel.block,
                        instability: sel.instability,
                        context: sel.context,
                        rho: sel.rho,
                        steps,
                    });
                    self.decode_block(block, steps)?;
                }
                Err(SchedulerError::BudgetExhausted) => {
                    self.state.record(Event::Select {
                        block: sel.block,
                        instability: sel.instability,
                        context: sel.context,
                        rho: sel.rho,
                        steps: 0,
                    });
                    self.force_commit(block)?;
                }
                Err(e) => return Err(Fault::Other(DecodeError::Config(e.to_string()))),
            }
        }

        if cfg.welding {
            for pair in blocks.windows(2) {
                self.weld(&pair[0], &pair[1])?;
            }
        }

        let finished = self.finalize_window(window.clone())?;
        self.state.record(Event::Hbar {
            v: finished.mean,
            uncentered: finished.uncentered,
        });
        self.windows.push(WindowSummary {
            start: window.start,
            len: window.len(),
            features: features.iter().map(|f: &PositionFeatures| f.values).collect(),
            available: features[0].available,
            gap_jsd: temp.windows(2).map(|w| w[0].jsd(&w[1])).collect(),
            remasked: self.ledger.remasked[window].to_vec(),
            forced: false,
        });
        Ok(Some(finished.mean))
    }
}

/// Window instability from a decode-history trace; the mean of the
/// centered scores.
pub fn finalize_window_instability(trace: &DiagnosticTrace, w: &[f64]) -> Result<InstabilityProfile, DiagnosticsError> {
    instability(&all_position_features(trace), w)
}

/// Decodes a continuation of `prompt`.
pub fn run(
    denoiser: &dyn Denoiser,
    prompt: &[TokenId],
    config: &RunConfig,
    weights: &Weights,
) -> Result<Decode, DecodeError> {
    config.validate()?;
    weights.validate()?;
    if prompt.is_empty() {
        return Err(DecodeError::EmptyPrompt);
    }
    let vocab = denoiser.descriptor().vocab;
    let mut run = Run {
        denoiser,
        config,
        weights,
        state: SequenceState::new(vocab, prompt.to_vec(), config.n_max),
        ledger: Ledger::default(),
        remaining: config.budget,
        forced: false,
        windows: Vec::new(),
    };
    let seeds = SeedStream::new(config.seed);
    let mut hbar = config.hbar_init;
    let mut t = 0;
    while !run.state.has_eos() && run.state.len() < config.n_max {
        t += 1;
        match run.window(t, hbar, &seeds) {
            Ok(Some(next)) => hbar = next,
            Ok(None) => break,
            Err(Fault::Denoiser(source)) => {
                return Err(DecodeError::Denoiser {
                    source,
                    partial: Box::new(Transcript {
                        config: config.clone(),
                        events: run.state.into_events(),
                    }),
                })
            }
            Err(Fault::Other(e)) => return Err(e),
        }
    }
    let stop = if run.forced {
        StopReason::Budget
    } else if run.state.has_eos() {
        StopReason::Eos
    } else {
        StopReason::NMax
    };
    run.state.record(Event::Stop { reason: stop });
    let tokens = run.state.truncate_at_first_eos()?;
    let events = run.state.events().to_vec();
    Ok(Decode {
        tokens,
        state: run.state,
        transcript: Transcript {
            config: config.clone(),
            events,
        },
        stop,
        windows: run.windows,
    })
}
