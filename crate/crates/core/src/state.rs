//! Vocabulary, response cells, expansion windows and the event log that makes
//! every decode replayable.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("window of length {len} exceeds limit: response has {current} of {n_max} cells")]
    LimitExceeded { len: usize, current: usize, n_max: usize },
    #[error("window length must be positive")]
    EmptyWindow,
    #[error("position {pos} out of range (response length {len})")]
    OutOfRange { pos: usize, len: usize },
    #[error("cannot commit the mask token at position {pos}")]
    CommitMask { pos: usize },
    #[error("token {token} outside vocabulary of size {size}")]
    UnknownToken { token: TokenId, size: u32 },
    #[error("incomplete decode: position {pos} is still masked before the first EOS")]
    IncompleteDecode { pos: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: u32,
    pub mask_id: TokenId,
    pub eos_id: TokenId,
}

impl Vocab {
    pub fn new(size: u32, mask_id: TokenId, eos_id: TokenId) -> Result<Self, StateError> {
        if size == 0 {
            return Err(StateError::InvalidVocab("size must be positive".into()));
        }
        if mask_id == eos_id {
            return Err(StateError::InvalidVocab("mask_id equals eos_id".into()));
        }
        if mask_id >= size || eos_id >= size {
            return Err(StateError::InvalidVocab(format!(
                "special ids ({mask_id}, {eos_id}) must be below size {size}"
            )));
        }
        Ok(Self { size, mask_id, eos_id })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cell {
    Masked,
    Committed(TokenId),
}

impl Cell {
    pub fn is_masked(self) -> bool {
        matches!(self, Cell::Masked)
    }

    pub fn token(self) -> Option<TokenId> {
        match self {
            Cell::Committed(t) => Some(t),
            Cell::Masked => None,
        }
    }
}

/// One expansion window, as a half-open span of response indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub len: usize,
}

impl Window {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Diag,
    Block,
    Weld,
    Forced,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    NMax,
    Budget,
}

/// Transcript events. `expand`, `commit` and `remask` mutate the sequence;
/// everything else annotates it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Event {
    Expand {
        t: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mu: Option<f64>,
        #[serde(rename = "L")]
        len: usize,
    },
    Diagnostics {
        steps: usize,
        h: Vec<f64>,
        q: Vec<f64>,
    },
    Partition {
        cuts: Vec<u8>,
        blocks: Vec<[usize; 2]>,
    },
    Select {
        block: usize,
        #[serde(rename = "H")]
        instability: f64,
        #[serde(rename = "C")]
        context: f64,
        rho: f64,
        #[serde(rename = "T")]
        steps: usize,
    },
    Predict {
        phase: Phase,
        n: usize,
    },
    Commit {
        pos: usize,
        tok: TokenId,
        conf: f64,
    },
    Remask {
        pos: Vec<usize>,
    },
    Weld {
        interval: [usize; 2],
        steps: usize,
    },
    Forced {
        pos: Vec<usize>,
    },
    Hbar {
        v: f64,
        uncentered: f64,
    },
    Stop {
        reason: StopReason,
    },
}

/// Prompt plus response cells, with window records and a mutation log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceState {
    vocab: Vocab,
    prompt: Vec<TokenId>,
    response: Vec<Cell>,
    windows: Vec<Window>,
    n_max: usize,
    #[serde(skip)]
    events: Vec<Event>,
}

impl SequenceState {
    pub fn new(vocab: Vocab, prompt: Vec<TokenId>, n_max: usize) -> Self {
        Self {
            vocab,
            prompt,
            response: Vec::new(),
            windows: Vec::new(),
            n_max,
            events: Vec::new(),
        }
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }

    pub fn cells(&self) -> &[Cell] {
        &self.response
    }

    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn headroom(&self) -> usize {
        self.n_max.saturating_sub(self.response.len())
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    /// Appends an annotation event. Mutating events must go through the
    /// dedicated methods so replay stays faithful.
    pub fn record(&mut self, event: Event) {
        debug_assert!(!matches!(
            event,
            Event::Expand { .. } | Event::Commit { .. } | Event::Remask { .. }
        ));
        self.events.push(event);
    }

    pub fn append_window(&mut self, len: usize) -> Result<Range<usize>, StateError> {
        self.append_window_with_mean(len, None)
    }

    pub fn append_window_with_mean(&mut self, len: usize, mu: Option<f64>) -> Result<Range<usize>, StateError> {
        if len == 0 {
            return Err(StateError::EmptyWindow);
        }
        if self.response.len() + len > self.n_max {
            return Err(StateError::LimitExceeded {
                len,
                current: self.response.len(),
                n_max: self.n_max,
            });
        }
        let start = self.response.len();
        self.response.resize(start + len, Cell::Masked);
        self.windows.push(Window { start, len });
        self.events.push(Event::Expand {
            t: self.windows.len(),
            mu,
            len,
        });
        debug_assert!(self.windows_tile_response());
        Ok(start..start + len)
    }

    pub fn commit(&mut self, pos: usize, token: TokenId, conf: f64) -> Result<(), StateError> {
        if pos >= self.response.len() {
            return Err(StateError::OutOfRange {
                pos,
                len: self.response.len(),
            });
        }
        if token == self.vocab.mask_id {
            return Err(StateError::CommitMask { pos });
        }
        if token >= self.vocab.size {
            return Err(StateError::UnknownToken {
                token,
                size: self.vocab.size,
            });
        }
        self.response[pos] = Cell::Committed(token);
        self.events.push(Event::Commit { pos, tok: token, conf });
        Ok(())
    }

    pub fn remask(&mut self, positions: &[usize]) -> Result<(), StateError> {
        if let Some(&pos) = positions.iter().find(|&&p| p >= self.response.len()) {
            return Err(StateError::OutOfRange {
                pos,
                len: self.response.len(),
            });
        }
        for &p in positions {
            self.response[p] = Cell::Masked;
        }
        self.events.push(Event::Remask {
            pos: positions.to_vec(),
        });
        Ok(())
    }

    pub fn has_eos(&self) -> bool {
        self.response.contains(&Cell::Committed(self.vocab.eos_id))
    }

    pub fn masked_in(&self, range: Range<usize>) -> Vec<usize> {
        range.filter(|&p| self.response[p].is_masked()).collect()
    }

    /// Committed tokens up to (excluding) the first EOS.
    pub fn truncate_at_first_eos(&self) -> Result<Vec<TokenId>, StateError> {
        let mut out = Vec::with_capacity(self.response.len());
        for (pos, cell) in self.response.iter().enumerate() {
            match *cell {
                Cell::Committed(t) if t == self.vocab.eos_id => break,
                Cell::Committed(t) => out.push(t),
                Cell::Masked => return Err(StateError::IncompleteDecode { pos }),
            }
        }
        Ok(out)
    }

    pub fn windows_tile_response(&self) -> bool {
        let mut next = 0;
        for w in &self.windows {
            if w.start != next || w.len == 0 {
                return false;
            }
            next = w.start + w.len;
        }
        next == self.response.len()
    }

    /// Rebuilds a state by applying the mutating events of a log.
    pub fn replay(vocab: Vocab, prompt: Vec<TokenId>, n_max: usize, events: &[Event]) -> Result<Self, StateError> {
        let mut state = Self::new(vocab, prompt, n_max);
        for event in events {
            match event {
                Event::Expand { mu, len, .. } => {
                    state.append_window_with_mean(*len, *mu)?;
                }
                Event::Commit { pos, tok, conf } => state.commit(*pos, *tok, *conf)?,
                Event::Remask { pos } => state.remask(pos)?,
                other => state.record(other.clone()),
            }
        }
        Ok(state)
    }
}
