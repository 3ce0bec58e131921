//! The frozen-model contract and its implementations.
//!
//! A denoiser sees the prompt, the current response cells and a list of
//! masked query positions, and returns one predictive distribution per
//! query. Everything downstream (diagnostics, block decoding, welding) only
//! talks to a model through [`predict_checked`], which enforces the contract.

pub mod external;
pub mod toy;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{DistError, Distribution};
use crate::state::{Cell, TokenId, Vocab};

pub use external::{ExternalDenoiserClient, PROTOCOL_VERSION};
pub use toy::{DependencyMode, ToyConfig, ToyGrammar, ToyOracle};

/// Mass deviation allowed on a returned distribution.
pub const OUTPUT_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("remote model error: {0}")]
    Remote(String),
    #[error("protocol version mismatch: expected {expected}, got {got}")]
    VersionMismatch { expected: u32, got: u32 },
    #[error("timed out waiting for the model")]
    Timeout,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed distribution at position {position}: {source}")]
    Malformed {
        position: usize,
        #[source]
        source: DistError,
    },
    #[error("position {0} is not masked")]
    NotMasked(usize),
    #[error("position {pos} outside response of length {len}")]
    OutOfRange { pos: usize, len: usize },
    #[error("expected predictions for {expected:?}, got {got:?}")]
    PositionMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("hidden state has dimension {got}, descriptor says {expected}")]
    HiddenDim { expected: usize, got: usize },
    #[error("unknown prompt")]
    UnknownPrompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub position: usize,
    pub dist: Distribution,
    pub hidden: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub vocab: Vocab,
    /// Hidden-state dimension, absent when the model does not expose them.
    pub hidden_dim: Option<usize>,
    pub deterministic: bool,
    pub protocol_version: u32,
}

pub trait Denoiser: Send + Sync {
    fn descriptor(&self) -> Descriptor;

    /// Predicts the masked `positions` of `cells`, in order.
    fn predict(
        &self,
        prompt: &[TokenId],
        cells: &[Cell],
        positions: &[usize],
    ) -> Result<Vec<Prediction>, DenoiserError>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn descriptor(&self) -> Descriptor {
        (**self).descriptor()
    }

    fn predict(
        &self,
        prompt: &[TokenId],
        cells: &[Cell],
        positions: &[usize],
    ) -> Result<Vec<Prediction>, DenoiserError> {
        (**self).predict(prompt, cells, positions)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for std::sync::Arc<D> {
    fn descriptor(&self) -> Descriptor {
        (**self).descriptor()
    }

    fn predict(
        &self,
        prompt: &[TokenId],
        cells: &[Cell],
        positions: &[usize],
    ) -> Result<Vec<Prediction>, DenoiserError> {
        (**self).predict(prompt, cells, positions)
    }
}

/// Calls `denoiser` and checks the result against the contract: queried
/// positions are masked, one prediction per query in order, every
/// distribution normalized, hidden dimension as advertised.
pub fn predict_checked(
    denoiser: &dyn Denoiser,
    prompt: &[TokenId],
    cells: &[Cell],
    positions: &[usize],
) -> Result<Vec<Prediction>, DenoiserError> {
    for &p in positions {
        match cells.get(p) {
            None => {
                return Err(DenoiserError::OutOfRange {
                    pos: p,
                    len: cells.len(),
                })
            }
            Some(Cell::Committed(_)) => return Err(DenoiserError::NotMasked(p)),
            Some(Cell::Masked) => {}
        }
    }
    let preds = denoiser.predict(prompt, cells, positions)?;
    if preds.len() != positions.len() || preds.iter().zip(positions).any(|(p, &q)| p.position != q) {
        return Err(DenoiserError::PositionMismatch {
            expected: positions.to_vec(),
            got: preds.iter().map(|p| p.position).collect(),
        });
    }
    let descriptor = denoiser.descriptor();
    for p in &preds {
        let mass = p.dist.total_mass();
        if (mass - 1.0).abs() > OUTPUT_SUM_TOLERANCE {
            return Err(DenoiserError::Malformed {
                position: p.position,
                source: DistError::NotNormalized(mass),
            });
        }
        if let (Some(h), Some(d)) = (&p.hidden, descriptor.hidden_dim) {
            if h.len() != d {
                return Err(DenoiserError::HiddenDim {
                    expected: d,
                    got: h.len(),
                });
            }
        }
    }
    Ok(preds)
}

/// Wraps a denoiser and counts calls; used to cross-check transcript-derived
/// call counts.
pub struct CountingDenoiser<D> {
    inner: D,
    calls: std::sync::atomic::AtomicUsize,
}

impl<D: Denoiser> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            calls: std::sync::atomic::AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(std::sync::atomic::Ordering::Relaxed)
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn descriptor(&self) -> Descriptor {
        self.inner.descriptor()
    }

    fn predict(
        &self,
        prompt: &[TokenId],
        cells: &[Cell],
        positions: &[usize],
    ) -> Result<Vec<Prediction>, DenoiserError> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.inner.predict(prompt, cells, positions)
    }
}

/// One denoiser per worker thread, for backends that serve a single request
/// at a time. Calls go to the member owned by the calling pool thread.
pub struct DenoiserPool {
    members: Vec<Box<dyn Denoiser>>,
    descriptor: Descriptor,
}

impl DenoiserPool {
    /// All members must describe themselves identically.
    pub fn new(members: Vec<Box<dyn Denoiser>>) -> Result<Self, DenoiserError> {
        let first = members
            .first()
            .ok_or_else(|| DenoiserError::Protocol("empty denoiser pool".into()))?
            .descriptor();
        if let Some(m) = members.iter().find(|m| m.descriptor() != first) {
            return Err(DenoiserError::Protocol(format!(
                "pool members disagree: {:?} vs {:?}",
                first,
                m.descriptor()
            )));
        }
        Ok(Self {
            members,
            descriptor: first,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

impl Denoiser for DenoiserPool {
    fn descriptor(&self) -> Descriptor {
        self.descriptor.clone()
    }

    fn predict(
        &self,
        prompt: &[TokenId],
        cells: &[Cell],
        positions: &[usize],
    ) -> Result<Vec<Prediction>, DenoiserError> {
        let member = &self.members[crate::par::current_worker() % self.members.len()];
        member.predict(prompt, cells, positions)
    }
}
