//! Diagnostic pass over a fresh window, positional features, instability
//! scores and gap (edge) scores.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{predict_checked, Denoiser, DenoiserError};
use crate::dist::Distribution;
use crate::state::{Cell, SequenceState, TokenId};

pub const FEATURE_DIM: usize = 7;
pub const GAP_FEATURE_DIM: usize = 4;
pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "entropy",
    "remask_freq",
    "oscillation",
    "step_jsd",
    "hidden_jump",
    "confidence",
    "margin",
];
/// Index of the hidden-jump feature, the only one that can be unavailable.
pub const HIDDEN_JUMP: usize = 4;
const MARGIN_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("window is empty")]
    EmptyWindow,
    #[error("diagnostic pass needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("commit fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("window position {0} is not masked")]
    NotMasked(usize),
    #[error("window {start}..{end} outside response of length {len}")]
    OutOfRange { start: usize, end: usize, len: usize },
    #[error("weight vector has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("{positions} positions but {dists} distributions")]
    LengthMismatch { positions: usize, dists: usize },
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
}

/// Which diagnostic step supplies the distributions used for gap features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TempSource {
    Final,
    /// Zero-based step index, clamped to the last step.
    Step(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticConfig {
    pub steps: usize,
    pub commit_fraction: f64,
    pub temp_source: TempSource,
}

impl Default for DiagnosticConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            commit_fraction: 0.25,
            temp_source: TempSource::Final,
        }
    }
}

/// What one position looked like at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepObs {
    pub dist: Distribution,
    pub argmax: TokenId,
    pub masked: bool,
    pub accepted: bool,
    pub hidden: Option<Vec<f64>>,
}

impl StepObs {
    pub fn predicted(dist: Distribution, hidden: Option<Vec<f64>>, accepted: bool) -> Self {
        Self {
            argmax: dist.argmax().0,
            dist,
            masked: true,
            accepted,
            hidden,
        }
    }

    /// The same observation carried into a step where the position was
    /// already committed and not queried.
    fn carried(&self) -> Self {
        Self {
            masked: false,
            accepted: false,
            ..self.clone()
        }
    }
}

/// Per-position step observations over a window.
///
/// A diagnostic trace is step-aligned: every position has one observation
/// per step. A decode-history trace is not; each position lists only the
/// steps at which it was queried.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticTrace {
    pub window: Range<usize>,
    pub positions: Vec<Vec<StepObs>>,
    /// Hidden state of the committed position just left of the window.
    pub left_hidden: Option<Vec<f64>>,
    pub hidden_available: bool,
    pub aligned: bool,
    /// Number of positions queried by each denoiser call.
    pub calls: Vec<usize>,
}

impl DiagnosticTrace {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Last observed distribution of every position.
    pub fn final_dists(&self) -> Vec<Distribution> {
        self.positions
            .iter()
            .map(|obs| obs.last().expect("observed").dist.clone())
            .collect()
    }

    /// Distributions used for gap features.
    pub fn temp_dists(&self, source: TempSource) -> Vec<Distribution> {
        match source {
            TempSource::Final => self.final_dists(),
            TempSource::Step(k) => self
                .positions
                .iter()
                .map(|obs| obs[k.min(obs.len() - 1)].dist.clone())
                .collect(),
        }
    }
}

/// Number of positions committed per diagnostic step.
pub fn commits_per_step(len: usize, fraction: f64) -> usize {
    ((fraction * len as f64).ceil() as usize).clamp(1, len.max(1))
}

/// Indices (into `candidates`) of the `n` highest confidences; ties go to
/// the earlier candidate. Result is sorted by position.
pub fn top_by_confidence(conf: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..conf.len()).collect();
    order.sort_by(|&a, &b| conf[b].total_cmp(&conf[a]).then(a.cmp(&b)));
    order.truncate(n);
    order.sort_unstable();
    order
}

/// Runs the temporary predict-commit steps over `window` on a copy of the
/// state. The caller's state is never touched.
pub fn run_diagnostic_pass(
    denoiser: &dyn Denoiser,
    state: &SequenceState,
    window: Range<usize>,
    config: &DiagnosticConfig,
    left_hidden: Option<&[f64]>,
) -> Result<DiagnosticTrace, DiagnosticsError> {
    if window.is_empty() {
        return Err(DiagnosticsError::EmptyWindow);
    }
    if config.steps < 2 {
        return Err(DiagnosticsError::TooFewSteps(config.steps));
    }
    if !(config.commit_fraction > 0.0 && config.commit_fraction <= 1.0) {
        return Err(DiagnosticsError::BadFraction(config.commit_fraction));
    }
    if window.end > state.len() {
        return Err(DiagnosticsError::OutOfRange {
            start: window.start,
            end: window.end,
            len: state.len(),
        });
    }
    if let Some(p) = window.clone().find(|&p| !state.cells()[p].is_masked()) {
        return Err(DiagnosticsError::NotMasked(p));
    }
    let hidden_available = denoiser.descriptor().hidden_dim.is_some();
    let mut cells: Vec<Cell> = state.cells().to_vec();
    let len = window.len();
    let per_step = commits_per_step(len, config.commit_fraction);
    let mut positions: Vec<Vec<StepObs>> = vec![Vec::with_capacity(config.steps); len];
    let mut calls = Vec::new();

    for _ in 0..config.steps {
        let masked: Vec<usize> = window.clone().filter(|&p| cells[p].is_masked()).collect();
        if masked.is_empty() {
            for obs in &mut positions {
                let next = obs.last().expect("observed at step one").carried();
                obs.push(next);
            }
            continue;
        }
        let preds = predict_checked(denoiser, state.prompt(), &cells, &masked)?;
        calls.push(masked.len());
        let conf: Vec<f64> = preds.iter().map(|p| p.dist.argmax().1).collect();
        let chosen = top_by_confidence(&conf, per_step);
        let mut accepted = vec![false; len];
        for &i in &chosen {
            let p = &preds[i];
            cells[p.position] = Cell::Committed(p.dist.argmax().0);
            accepted[p.position - window.start] = true;
        }
        let mut preds = preds.into_iter().peekable();
        for (offset, obs) in positions.iter_mut().enumerate() {
            let pos = window.start + offset;
            if preds.peek().is_some_and(|p| p.position == pos) {
                let p = preds.next().expect("peeked");
                obs.push(StepObs::predicted(p.dist, p.hidden, accepted[offset]));
            } else {
                let next = obs.last().expect("observed at step one").carried();
                obs.push(next);
            }
        }
    }
    Ok(DiagnosticTrace {
        window,
        positions,
        left_hidden: if hidden_available {
            left_hidden.map(<[f64]>::to_vec)
        } else {
            None
        },
        hidden_available,
        aligned: true,
        calls,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionFeatures {
    pub values: [f64; FEATURE_DIM],
    pub available: [bool; FEATURE_DIM],
}

impl PositionFeatures {
    pub fn entropy(&self) -> f64 {
        self.values[0]
    }
    pub fn remask_freq(&self) -> f64 {
        self.values[1]
    }
    pub fn oscillation(&self) -> f64 {
        self.values[2]
    }
    pub fn step_jsd(&self) -> f64 {
        self.values[3]
    }
    pub fn hidden_jump(&self) -> f64 {
        self.values[HIDDEN_JUMP]
    }
    pub fn confidence(&self) -> f64 {
        self.values[5]
    }
    pub fn margin(&self) -> f64 {
        self.values[6]
    }

    fn assert_bounds(&self) {
        let v = &self.values;
        debug_assert!(v.iter().all(|x| x.is_finite()), "{v:?}");
        debug_assert!(v[0] >= 0.0);
        debug_assert!((0.0..=1.0).contains(&v[1]) && (0.0..=1.0).contains(&v[2]));
        debug_assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&v[3]));
        debug_assert!(v[4] >= 0.0 && v[5] > 0.0 && v[5] <= 1.0 + 1e-12 && v[6] >= 0.0);
    }
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || a.len() != b.len() {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// The seven features of window offset `j`.
pub fn position_features(trace: &DiagnosticTrace, j: usize) -> PositionFeatures {
    let obs = &trace.positions[j];
    let k = obs.len();
    let last = obs.last().expect("position observed");
    let denom = (k.max(2) - 1) as f64;

    let entropy = last.dist.entropy();
    let remask = obs.iter().filter(|o| o.masked && !o.accepted).count() as f64 / k as f64;
    let oscillation = obs.windows(2).filter(|w| w[1].argmax != w[0].argmax).count() as f64 / denom;
    let step_jsd = obs.windows(2).map(|w| w[1].dist.jsd(&w[0].dist)).sum::<f64>() / denom;
    let (p1, p2) = last.dist.top_two();
    let confidence = last.dist.prob(last.argmax);
    let margin = p1.ln() - p2.max(MARGIN_FLOOR).ln();

    let hidden_jump = if !trace.hidden_available {
        0.0
    } else {
        let left_at = |step: usize| -> Option<&[f64]> {
            if j == 0 {
                trace.left_hidden.as_deref()
            } else {
                let left = &trace.positions[j - 1];
                let o = if trace.aligned { left.get(step) } else { left.last() };
                o.and_then(|o| o.hidden.as_deref())
            }
        };
        if trace.aligned {
            let jumps: Vec<f64> = obs
                .iter()
                .enumerate()
                .filter_map(|(step, o)| Some(mean_abs_diff(o.hidden.as_deref()?, left_at(step)?)))
                .collect();
            if jumps.is_empty() {
                0.0
            } else {
                jumps.iter().sum::<f64>() / jumps.len() as f64
            }
        } else {
            match (last.hidden.as_deref(), left_at(0)) {
                (Some(a), Some(b)) => mean_abs_diff(a, b),
                _ => 0.0,
            }
        }
    };

    let mut available = [true; FEATURE_DIM];
    available[HIDDEN_JUMP] = trace.hidden_available;
    let f = PositionFeatures {
        values: [entropy, remask, oscillation, step_jsd, hidden_jump, confidence, margin],
        available,
    };
    f.assert_bounds();
    f
}

pub fn all_position_features(trace: &DiagnosticTrace) -> Vec<PositionFeatures> {
    (0..trace.len()).map(|j| position_features(trace, j)).collect()
}

/// Logistic function, evaluated without overflow for any finite input.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean computed relative to the first element, so that equal inputs give
/// exactly that value back.
pub fn centered_mean(xs: &[f64]) -> f64 {
    let Some(&x0) = xs.first() else {
        return 0.0;
    };
    x0 + xs.iter().map(|x| x - x0).sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstabilityProfile {
    pub u: Vec<f64>,
    pub h: Vec<f64>,
    /// Window mean of `h`.
    pub mean: f64,
    /// Window mean of `sigmoid(u)` without centering.
    pub uncentered: f64,
}

pub fn instability(features: &[PositionFeatures], w: &[f64]) -> Result<InstabilityProfile, DiagnosticsError> {
    if w.len() != FEATURE_DIM {
        return Err(DiagnosticsError::Dimension {
            expected: FEATURE_DIM,
            got: w.len(),
        });
    }
    let u: Vec<f64> = features
        .iter()
        .map(|f| {
            f.values
                .iter()
                .zip(&f.available)
                .zip(w)
                .map(|((x, &ok), wi)| if ok { x * wi } else { 0.0 })
                .sum()
        })
        .collect();
    Ok(instability_from_logits(u))
}

pub fn instability_from_logits(u: Vec<f64>) -> InstabilityProfile {
    let center = centered_mean(&u);
    let h: Vec<f64> = u.iter().map(|x| sigmoid(x - center)).collect();
    let mean = centered_mean(&h);
    let uncentered = centered_mean(&u.iter().map(|&x| sigmoid(x)).collect::<Vec<_>>());
    InstabilityProfile { u, h, mean, uncentered }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeProfile {
    pub psi: Vec<[f64; GAP_FEATURE_DIM]>,
    pub logits: Vec<f64>,
    pub q: Vec<f64>,
}

pub fn gap_features(h: &[f64], temp: &[Distribution]) -> Result<Vec<[f64; GAP_FEATURE_DIM]>, DiagnosticsError> {
    if h.len() != temp.len() {
        return Err(DiagnosticsError::LengthMismatch {
            positions: h.len(),
            dists: temp.len(),
        });
    }
    Ok((1..h.len())
        .map(|g| {
            let (a, b) = (h[g - 1], h[g]);
            [a, b, (a - b).abs(), temp[g - 1].jsd(&temp[g])]
        })
        .collect())
}

pub fn edge_scores_from_psi(psi: Vec<[f64; GAP_FEATURE_DIM]>, w_b: &[f64]) -> Result<EdgeProfile, DiagnosticsError> {
    if w_b.len() != GAP_FEATURE_DIM {
        return Err(DiagnosticsError::Dimension {
            expected: GAP_FEATURE_DIM,
            got: w_b.len(),
        });
    }
    let logits: Vec<f64> = psi
        .iter()
        .map(|p| p.iter().zip(w_b).map(|(x, w)| x * w).sum())
        .collect();
    let q = logits.iter().map(|&l| sigmoid(l)).collect();
    Ok(EdgeProfile { psi, logits, q })
}

/// Gap features, logits and boundary probabilities for a window with
/// instability `h` and diagnostic distributions `temp`. A single-position
/// window has no gaps and yields an empty profile.
pub fn edge_scores(h: &[f64], temp: &[Distribution], w_b: &[f64]) -> Result<EdgeProfile, DiagnosticsError> {
    edge_scores_from_psi(gap_features(h, temp)?, w_b)
}
