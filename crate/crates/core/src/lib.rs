//! Structured decoding for masked diffusion language models.
//!
//! A decode grows the response window by window. Each new window gets a
//! short diagnostic pass that scores per-position instability and per-gap
//! boundary evidence; an exact MAP search under a contiguous CRP prior splits
//! the window into blocks; blocks are refined in an order driven by
//! instability and committed context; and the seams between blocks are
//! repaired by local remask-and-refine ("welding").

pub mod calibration;
pub mod corpus;
pub mod decoder;
pub mod denoiser;
pub mod diagnostics;
pub mod dist;
pub mod harness;
pub mod par;
pub mod partition;
pub mod scheduler;
pub mod seed;
pub mod state;

pub use denoiser::{Denoiser, DenoiserError, Prediction};
pub use dist::Distribution;
pub use seed::SeedStream;
pub use state::{Cell, SequenceState, TokenId, Vocab};
