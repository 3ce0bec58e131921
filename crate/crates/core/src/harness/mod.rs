//! Corpus-driven benchmarking: run several decoding methods over a corpus,
//! score them against ground truth, aggregate, and compare pairs of methods.

pub mod baselines;
pub mod report;
pub mod stats;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use baselines::{fixed_length, monotonic_baseline, MonotonicConfig};
pub use report::{emit_csv, emit_svg_plots, load_csv, read_csv, write_csv, ReportError};
pub use stats::{mcnemar, McNemar, PairedOutcomes, StatsError, StatsReport};

use crate::calibration::{Weights, WindowRecord};
use crate::corpus::CorpusItem;
use crate::decoder::{self, Decode, DecodeError, RunConfig, Transcript};
use crate::denoiser::Denoiser;
use crate::par::{map_ordered, Parallelism};
use crate::seed::{hash_str, SeedStream};
use crate::state::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    FixedLength,
    MonotonicBaseline,
    Dystruct,
    DystructNoSchedule,
    DystructNoWeld,
    DystructNoScheduleNoWeld,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        MethodKind::FixedLength,
        MethodKind::MonotonicBaseline,
        MethodKind::Dystruct,
        MethodKind::DystructNoSchedule,
        MethodKind::DystructNoWeld,
        MethodKind::DystructNoScheduleNoWeld,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::FixedLength => "fixed-length",
            MethodKind::MonotonicBaseline => "monotonic-baseline",
            MethodKind::Dystruct => "dystruct",
            MethodKind::DystructNoSchedule => "dystruct-no-schedule",
            MethodKind::DystructNoWeld => "dystruct-no-weld",
            MethodKind::DystructNoScheduleNoWeld => "dystruct-no-schedule-no-weld",
        }
    }

    /// The decoder configuration this method runs with.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        match self {
            MethodKind::DystructNoSchedule => c.scheduling = false,
            MethodKind::DystructNoWeld => c.welding = false,
            MethodKind::DystructNoScheduleNoWeld => {
                c.scheduling = false;
                c.welding = false;
            }
            _ => {}
        }
        c
    }

    /// Decodes `prompt` with this method.
    pub fn decode(
        self,
        denoiser: &dyn Denoiser,
        prompt: &[TokenId],
        config: &RunConfig,
        weights: &Weights,
        monotonic: &MonotonicConfig,
    ) -> Result<Decode, DecodeError> {
        let config = self.apply(config);
        match self {
            MethodKind::FixedLength => fixed_length(denoiser, prompt, &config),
            MethodKind::MonotonicBaseline => monotonic_baseline(denoiser, prompt, &config, monotonic),
            _ => decoder::run(denoiser, prompt, &config, weights),
        }
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One decoded (method, prompt, seed) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub prompt_id: String,
    pub seed: u64,
    pub exact: bool,
    pub tok_acc: f64,
    pub toks: usize,
    pub blks: usize,
    pub calls: usize,
    pub iters: usize,
}

/// Exact match and positionwise token accuracy. Accuracy divides matches by
/// the longer of output and truth, so both truncation and overrun cost.
pub fn score(output: &[TokenId], truth: &[TokenId]) -> (bool, f64) {
    let denom = output.len().max(truth.len());
    if denom == 0 {
        return (true, 1.0);
    }
    let hits = output.iter().zip(truth).filter(|(a, b)| a == b).count();
    (output == truth, hits as f64 / denom as f64)
}

/// Decode seed for one prompt under a run seed.
pub fn prompt_seed(seed: u64, prompt_id: &str) -> u64 {
    SeedStream::new(seed).derive("prompt", hash_str(prompt_id)).seed()
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("no methods selected")]
    NoMethods,
    #[error("no seeds given")]
    NoSeeds,
    #[error("prompt {0} has no ground truth")]
    MissingTruth(String),
    #[error(transparent)]
    Config(#[from] DecodeError),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchConfig {
    pub run: RunConfig,
    pub weights: Weights,
    pub monotonic: MonotonicConfig,
    pub parallelism: Parallelism,
    /// Keep every transcript and output in the result.
    pub keep_outputs: bool,
}

/// Output and transcript of one job.
#[derive(Debug, Clone, PartialEq)]
pub struct JobOutput {
    pub method: MethodKind,
    pub prompt_id: String,
    pub seed: u64,
    pub tokens: Vec<TokenId>,
    pub transcript: Transcript,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub method: MethodKind,
    pub prompt_id: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchResult {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<Failure>,
    pub outputs: Vec<JobOutput>,
}

/// Decodes every (method, prompt, seed) triple. Jobs run in parallel;
/// results come back ordered by method, then prompt id, then seed.
pub fn run_benchmark(
    denoiser: &dyn Denoiser,
    corpus: &[CorpusItem],
    methods: &[MethodKind],
    seeds: &[u64],
    config: &BenchConfig,
) -> Result<BenchResult, BenchError> {
    if corpus.is_empty() {
        return Err(BenchError::EmptyCorpus);
    }
    if methods.is_empty() {
        return Err(BenchError::NoMethods);
    }
    if seeds.is_empty() {
        return Err(BenchError::NoSeeds);
    }
    if let Some(item) = corpus.iter().find(|i| i.truth.is_none()) {
        return Err(BenchError::MissingTruth(item.id.clone()));
    }
    config.run.validate()?;
    config.weights.validate().map_err(DecodeError::from)?;

    let mut items: Vec<&CorpusItem> = corpus.iter().collect();
    items.sort_by(|a, b| a.id.cmp(&b.id));
    let mut jobs = Vec::with_capacity(methods.len() * items.len() * seeds.len());
    for &m in methods {
        for &item in &items {
            for &s in seeds {
                jobs.push((m, item, s));
            }
        }
    }
    let outcomes = map_ordered(&jobs, config.parallelism, |_, &(method, item, seed)| {
        let run = RunConfig {
            seed: prompt_seed(seed, &item.id),
            ..config.run.clone()
        };
        method.decode(denoiser, &item.prompt, &run, &config.weights, &config.monotonic)
    });

    let mut result = BenchResult::default();
    for (&(method, item, seed), outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok(d) => {
                let truth = item.truth.as_deref().unwrap_or_default();
                let (exact, tok_acc) = score(&d.tokens, truth);
                result.rows.push(ResultRow {
                    method: method.name().to_owned(),
                    prompt_id: item.id.clone(),
                    seed,
                    exact,
                    tok_acc,
                    toks: d.tokens.len(),
                    blks: d.blocks(),
                    calls: d.calls(),
                    iters: d.iterations(),
                });
                if config.keep_outputs {
                    result.outputs.push(JobOutput {
                        method,
                        prompt_id: item.id.clone(),
                        seed,
                        tokens: d.tokens,
                        transcript: d.transcript,
                    });
                }
            }
            Err(e) => result.failures.push(Failure {
                method,
                prompt_id: item.id.clone(),
                seed,
                error: e.to_string(),
            }),
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    /// Standard error of the mean; zero for a single sample.
    pub se: f64,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                se: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let se = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Self { mean, se }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub n: usize,
    pub exact: MeanSe,
    pub tok_acc: MeanSe,
    pub toks: MeanSe,
    pub blks: MeanSe,
    pub calls: MeanSe,
    pub iters: MeanSe,
}

/// Per-method means and standard errors, in order of first appearance.
pub fn summarize(rows: &[ResultRow]) -> Vec<MethodSummary> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        if !groups.contains_key(r.method.as_str()) {
            order.push(&r.method);
        }
        groups.entry(&r.method).or_default().push(r);
    }
    order
        .into_iter()
        .map(|m| {
            let g = &groups[m];
            let col = |f: fn(&ResultRow) -> f64| MeanSe::of(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            MethodSummary {
                method: m.to_owned(),
                n: g.len(),
                exact: col(|r| f64::from(u8::from(r.exact))),
                tok_acc: col(|r| r.tok_acc),
                toks: col(|r| r.toks as f64),
                blks: col(|r| r.blks as f64),
                calls: col(|r| r.calls as f64),
                iters: col(|r| r.iters as f64),
            }
        })
        .collect()
}

/// Calibration records from one decode: one per diagnosed window, with
/// ground truth padded by EOS past its end and gap labels from the
/// delimiter annotations when present.
pub fn window_records(decode: &Decode, item: &CorpusItem, eos: TokenId) -> Vec<WindowRecord> {
    let truth = item.truth.as_deref().unwrap_or_default();
    let cells = decode.state.cells();
    decode
        .windows
        .iter()
        .filter(|w| !w.forced)
        .map(|w| {
            let span = w.start..w.start + w.len;
            let boundaries = item
                .delims
                .as_ref()
                .map(|d| (w.start..span.end.saturating_sub(1)).map(|g| d.contains(&g)).collect());
            WindowRecord {
                prompt_id: item.id.clone(),
                window_start: w.start,
                features: w.features.clone(),
                available: w.available,
                gap_jsd: w.gap_jsd.clone(),
                predicted: span
                    .clone()
                    .map(|p| cells[p].token().unwrap_or(decode.state.vocab().mask_id))
                    .collect(),
                truth: span.clone().map(|p| truth.get(p).copied().unwrap_or(eos)).collect(),
                remasked: w.remasked.clone(),
                boundaries,
            }
        })
        .collect()
}

/// Decodes the corpus once per seed and collects calibration records.
/// Prompts that fail to decode are skipped.
pub fn collect_records(
    denoiser: &dyn Denoiser,
    corpus: &[CorpusItem],
    seeds: &[u64],
    run: &RunConfig,
    weights: &Weights,
    par: Parallelism,
) -> Vec<WindowRecord> {
    let eos = denoiser.descriptor().vocab.eos_id;
    let jobs: Vec<(&CorpusItem, u64)> = corpus
        .iter()
        .flat_map(|item| seeds.iter().map(move |&s| (item, s)))
        .collect();
    map_ordered(&jobs, par, |_, &(item, seed)| {
        let config = RunConfig {
            seed: prompt_seed(seed, &item.id),
            ..run.clone()
        };
        decoder::run(denoiser, &item.prompt, &config, weights)
            .map(|d| window_records(&d, item, eos))
            .unwrap_or_default()
    })
    .into_iter()
    .flatten()
    .collect()
}
