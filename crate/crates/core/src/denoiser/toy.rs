//! Synthetic oracle denoiser over a paired-token grammar.
//!
//! Token ids `2k` and `2k + 1` form pair `k`; the low bit is the variant.
//! A ground-truth response is a sequence of runs, each run repeating one
//! token. In paired-neighbor mode the oracle knows the pair at every
//! position but not the variant: that is decided by committed neighbors in
//! the same run, by a link from the first position of the next run, and by
//! a per-run cue that only some runs carry. Cue-less runs are ambiguous
//! until right context is available, which is what makes decode order and
//! boundary repair matter.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Denoiser, DenoiserError, Descriptor, Prediction, PROTOCOL_VERSION};
use crate::corpus::CorpusItem;
use crate::dist::Distribution;
use crate::seed::{hash_str, SeedStream};
use crate::state::{Cell, TokenId, Vocab};

pub const TOY_VOCAB_SIZE: u32 = 64;
pub const TOY_MASK: TokenId = 0;
pub const TOY_EOS: TokenId = 1;
const PAIRS: u32 = TOY_VOCAB_SIZE / 2;

pub fn toy_vocab() -> Vocab {
    Vocab::new(TOY_VOCAB_SIZE, TOY_MASK, TOY_EOS).expect("static vocabulary is valid")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToyError {
    #[error("prompt {0:?} has no ground truth")]
    MissingTruth(String),
    #[error("prompt {id:?}: token {token} at {pos} is not a pair token")]
    BadToken { id: String, pos: usize, token: TokenId },
    #[error("prompt {id:?}: delimiter {gap} out of range or unsorted")]
    BadDelimiter { id: String, gap: usize },
    #[error("two corpus items share a prompt ({0:?})")]
    DuplicatePrompt(String),
    #[error("invalid toy config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DependencyMode {
    /// Confidence on the true token depends only on how many neighbors are
    /// committed.
    Independent,
    /// Variants are resolved by neighbors, right links and cues.
    PairedNeighbor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    /// Candidate mass with no committed neighbors.
    pub base_confidence: f64,
    /// Extra candidate mass when every neighbor within the radius is committed.
    pub anchor_gain: f64,
    pub anchor_radius: usize,
    pub mode: DependencyMode,
    /// Spread of the decoy mass; higher means flatter.
    pub temperature: f64,
    pub decoys: usize,
    pub epsilon: f64,
    /// Logit added to a variant per committed same-run neighbor.
    pub vote_strength: f64,
    /// Logit added at the last position of a run by the committed first
    /// position of the next run.
    pub link_strength: f64,
    /// Logit toward the true variant at every position of a cued run.
    pub cue_strength: f64,
    pub hidden_dim: Option<usize>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            base_confidence: 0.6,
            anchor_gain: 0.3,
            anchor_radius: 2,
            mode: DependencyMode::PairedNeighbor,
            temperature: 1.0,
            decoys: 6,
            epsilon: 1e-3,
            vote_strength: 2.0,
            link_strength: 3.0,
            cue_strength: 1.5,
            hidden_dim: Some(8),
        }
    }
}

impl ToyConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), ToyError> {
        let err = |m: &str| Err(ToyError::Config(m.to_owned()));
        if !(self.base_confidence > 0.0 && self.base_confidence < 1.0) {
            return err("base_confidence must lie in (0, 1)");
        }
        if !(self.anchor_gain >= 0.0) {
            return err("anchor_gain must be non-negative");
        }
        if self.anchor_radius == 0 {
            return err("anchor_radius must be positive");
        }
        if !(self.temperature > 0.0) {
            return err("temperature must be positive");
        }
        if self.decoys > (PAIRS - 2) as usize {
            return err("too many decoys for the vocabulary");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return err("epsilon must lie in (0, 0.5)");
        }
        if self.hidden_dim == Some(0) {
            return err("hidden_dim must be positive when present");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Run {
    start: usize,
    end: usize,
    cued: bool,
}

/// Ground truth for one prompt, split into runs at its delimiters.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGrammar {
    id: String,
    truth: Vec<TokenId>,
    runs: Vec<Run>,
    run_of: Vec<usize>,
}

impl ToyGrammar {
    pub fn new(id: &str, truth: Vec<TokenId>, delims: &[usize]) -> Result<Self, ToyError> {
        for (pos, &token) in truth.iter().enumerate() {
            if !(2..TOY_VOCAB_SIZE).contains(&token) {
                return Err(ToyError::BadToken {
                    id: id.to_owned(),
                    pos,
                    token,
                });
            }
        }
        let mut starts = vec![0];
        for &gap in delims {
            if gap + 1 >= truth.len() || gap < *starts.last().unwrap_or(&0) {
                return Err(ToyError::BadDelimiter { id: id.to_owned(), gap });
            }
            starts.push(gap + 1);
        }
        let mut runs: Vec<Run> = Vec::with_capacity(starts.len());
        let base = hash_str(id);
        let n_runs = starts.len();
        for (s, &start) in starts.iter().enumerate() {
            let end = starts.get(s + 1).copied().unwrap_or(truth.len());
            let previous_cued = runs.last().is_none_or(|r| r.cued);
            let coin = SeedStream::new(base).derive("cue", s as u64).seed() & 1 == 1;
            let cued = s == 0 || s + 1 == n_runs || !previous_cued || coin;
            runs.push(Run { start, end, cued });
        }
        let mut run_of = vec![0; truth.len()];
        for (s, r) in runs.iter().enumerate() {
            run_of[r.start..r.end].fill(s);
        }
        Ok(Self {
            id: id.to_owned(),
            truth,
            runs,
            run_of,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn truth(&self) -> &[TokenId] {
        &self.truth
    }

    pub fn run_count(&self) -> usize {
        self.runs.len()
    }

    pub fn run_is_cued(&self, run: usize) -> bool {
        self.runs[run].cued
    }

    /// Whether `token` belongs to the pair of truth position `pos`.
    pub fn in_pair(&self, pos: usize, token: TokenId) -> bool {
        self.truth.get(pos).is_some_and(|&t| t >> 1 == token >> 1)
    }

    /// Adjacent positions `j` (checked against `j - 1`) where both tokens are
    /// pair-consistent but their variants break the grammar relation.
    pub fn violations(&self, tokens: &[TokenId]) -> Vec<usize> {
        let n = tokens.len().min(self.truth.len());
        (1..n)
            .filter(|&j| {
                self.in_pair(j - 1, tokens[j - 1])
                    && self.in_pair(j, tokens[j])
                    && (tokens[j - 1] ^ tokens[j]) & 1 != (self.truth[j - 1] ^ self.truth[j]) & 1
            })
            .collect()
    }
}

/// Oracle denoiser keyed by prompt.
#[derive(Debug, Clone)]
pub struct ToyOracle {
    config: ToyConfig,
    grammars: HashMap<Vec<TokenId>, ToyGrammar>,
}

impl ToyOracle {
    pub fn new(config: ToyConfig) -> Result<Self, ToyError> {
        config.validate()?;
        Ok(Self {
            config,
            grammars: HashMap::new(),
        })
    }

    pub fn from_corpus(items: &[CorpusItem], config: ToyConfig) -> Result<Self, ToyError> {
        let mut oracle = Self::new(config)?;
        for item in items {
            let truth = item
                .truth
                .clone()
                .ok_or_else(|| ToyError::MissingTruth(item.id.clone()))?;
            let grammar = ToyGrammar::new(&item.id, truth, item.delims.as_deref().unwrap_or(&[]))?;
            oracle.insert(item.prompt.clone(), grammar)?;
        }
        Ok(oracle)
    }

    pub fn insert(&mut self, prompt: Vec<TokenId>, grammar: ToyGrammar) -> Result<(), ToyError> {
        if let Some(old) = self.grammars.get(&prompt) {
            return Err(ToyError::DuplicatePrompt(old.id.clone()));
        }
        self.grammars.insert(prompt, grammar);
        Ok(())
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn grammar(&self, prompt: &[TokenId]) -> Option<&ToyGrammar> {
        self.grammars.get(prompt)
    }

    fn predict_one(&self, g: &ToyGrammar, cells: &[Cell], j: usize) -> Prediction {
        let c = &self.config;
        let r = c.anchor_radius;
        let lo = j.saturating_sub(r);
        let hi = (j + r).min(cells.len().saturating_sub(1));
        let committed = (lo..=hi).filter(|&i| i != j && !cells[i].is_masked()).count();
        let mass =
            (c.base_confidence + c.anchor_gain * committed as f64 / (2 * r) as f64).clamp(c.epsilon, 1.0 - c.epsilon);

        let mut entries: Vec<(TokenId, f64)> = Vec::with_capacity(c.decoys + 2);
        let (target_pair, argmax) = match g.truth.get(j) {
            None => {
                entries.push((TOY_EOS, mass));
                (0, TOY_EOS)
            }
            Some(&truth) if c.mode == DependencyMode::Independent => {
                entries.push((truth, mass));
                (truth >> 1, truth)
            }
            Some(&truth) => {
                let logits = self.variant_logits(g, cells, j);
                // logits[v] is the score of variant v; split mass by softmax
                let top = logits[0].max(logits[1]);
                let e0 = (logits[0] - top).exp();
                let e1 = (logits[1] - top).exp();
                let p0 = e0 / (e0 + e1);
                let even = truth & !1;
                entries.push((even, mass * p0));
                entries.push((even | 1, mass * (1.0 - p0)));
                let argmax = if p0 >= 0.5 { even } else { even | 1 };
                (truth >> 1, argmax)
            }
        };
        let weights: Vec<f64> = (0..c.decoys).map(|k| (-(k as f64) / c.temperature).exp()).collect();
        let total: f64 = weights.iter().sum();
        for (token, w) in decoy_tokens(target_pair, c.decoys).into_iter().zip(weights) {
            entries.push((token, (1.0 - mass) * w / total));
        }
        let dist = Distribution::new(entries, 0.0).expect("oracle output is normalized");
        let hidden = c.hidden_dim.map(|d| self.hidden(cells, j, argmax, d));
        Prediction {
            position: j,
            dist,
            hidden,
        }
    }

    fn variant_logits(&self, g: &ToyGrammar, cells: &[Cell], j: usize) -> [f64; 2] {
        let c = &self.config;
        let s = g.run_of[j];
        let run = &g.runs[s];
        let vj = g.truth[j] & 1;
        let mut logits = [0.0; 2];
        let mut vote = |i: usize, weight: f64| {
            if let Some(Cell::Committed(y)) = cells.get(i) {
                if g.in_pair(i, *y) {
                    let implied = (y & 1) ^ (g.truth[i] & 1) ^ vj;
                    logits[implied as usize] += weight;
                }
            }
        };
        let lo = j.saturating_sub(c.anchor_radius).max(run.start);
        let hi = (j + c.anchor_radius + 1).min(run.end);
        for i in lo..hi {
            if i != j {
                vote(i, c.vote_strength);
            }
        }
        if j + 1 == run.end && run.end < g.truth.len() {
            vote(j + 1, c.link_strength);
        }
        if run.cued {
            logits[vj as usize] += c.cue_strength;
        }
        logits
    }

    /// Deterministic pseudo-embedding of (position, local commit pattern,
    /// current argmax), rounded through f32 like a real model's output.
    fn hidden(&self, cells: &[Cell], j: usize, argmax: TokenId, d: usize) -> Vec<f64> {
        let r = self.config.anchor_radius;
        let mut pattern = 0u32;
        for (bit, i) in (j.saturating_sub(r)..=j + r).filter(|&i| i != j).enumerate() {
            if cells.get(i).is_some_and(|c| !c.is_masked()) {
                pattern |= 1 << bit;
            }
        }
        (0..d)
            .map(|k| {
                let phase = 0.37 * (j + 1) as f64 * (k + 1) as f64;
                let v = 0.1 * phase.sin()
                    + 0.25 * f64::from(pattern.count_ones())
                    + if argmax as usize % d == k { 0.5 } else { 0.0 };
                f64::from(v as f32)
            })
            .collect()
    }
}

/// `n` distinct decoy tokens outside pair `target` (pair 0 holds the
/// special ids, so it is never a decoy).
fn decoy_tokens(target: TokenId, n: usize) -> Vec<TokenId> {
    let stream = SeedStream::new(u64::from(target)).derive("decoys", 0);
    let mut rng = stream.rng();
    let mut used = vec![false; PAIRS as usize];
    used[0] = true;
    used[target as usize] = true;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let pair = rng.random_range(1..PAIRS);
        if !used[pair as usize] {
            used[pair as usize] = true;
            out.push(2 * pair + rng.random_range(0..2));
        }
    }
    out
}

impl Denoiser for ToyOracle {
    fn descriptor(&self) -> Descriptor {
        Descriptor {
            vocab: toy_vocab(),
            hidden_dim: self.config.hidden_dim,
            deterministic: true,
            protocol_version: PROTOCOL_VERSION,
        }
    }

    fn predict(
        &self,
        prompt: &[TokenId],
        cells: &[Cell],
        positions: &[usize],
    ) -> Result<Vec<Prediction>, DenoiserError> {
        let g = self.grammar(prompt).ok_or(DenoiserError::UnknownPrompt)?;
        positions
            .iter()
            .map(|&j| {
                if j >= cells.len() {
                    Err(DenoiserError::OutOfRange {
                        pos: j,
                        len: cells.len(),
                    })
                } else {
                    Ok(self.predict_one(g, cells, j))
                }
            })
            .collect()
    }
}

/// Shape of generated toy corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusShape {
    pub min_runs: usize,
    pub max_runs: usize,
    pub min_run_len: usize,
    pub max_run_len: usize,
    pub prompt_len: usize,
}

impl Default for CorpusShape {
    fn default() -> Self {
        Self {
            min_runs: 3,
            max_runs: 7,
            min_run_len: 2,
            max_run_len: 7,
            prompt_len: 4,
        }
    }
}

/// Generates `n` prompts with run-structured ground truth and delimiters.
pub fn generate_corpus(n: usize, seed: u64, shape: &CorpusShape) -> Vec<CorpusItem> {
    let root = SeedStream::new(seed).derive("corpus", 0);
    let mut seen = std::collections::HashSet::new();
    let mut items = Vec::with_capacity(n);
    let mut attempt = 0u64;
    while items.len() < n {
        let mut rng = root.derive("item", attempt).rng();
        attempt += 1;
        let prompt: Vec<TokenId> = (0..shape.prompt_len.max(1))
            .map(|_| rng.random_range(2..TOY_VOCAB_SIZE))
            .collect();
        if !seen.insert(prompt.clone()) {
            continue;
        }
        let runs = rng.random_range(shape.min_runs..=shape.max_runs.max(shape.min_runs));
        let mut truth = Vec::new();
        let mut delims = Vec::new();
        let mut last_pair = 0;
        for s in 0..runs {
            let mut pair = rng.random_range(1..PAIRS);
            while pair == last_pair {
                pair = rng.random_range(1..PAIRS);
            }
            last_pair = pair;
            let token = 2 * pair + rng.random_range(0..2);
            let len = rng.random_range(shape.min_run_len..=shape.max_run_len.max(shape.min_run_len));
            if s > 0 {
                delims.push(truth.len() - 1);
            }
            truth.extend(std::iter::repeat_n(token, len.max(1)));
        }
        items.push(CorpusItem {
            id: format!("toy-{:04}", items.len()),
            prompt,
            truth: Some(truth),
            delims: Some(delims),
        });
    }
    items
}
