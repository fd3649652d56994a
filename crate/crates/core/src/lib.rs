//! Conditional diffusion signal enhancement with metric-oriented actor-critic
//! training.
//!
//! A diffusion network `D` learns to predict the combined Gaussian and
//! non-Gaussian noise of a conditional diffusion chain that interpolates from a
//! clean reference toward its noisy observation. A value network `V` scores
//! `D`'s predicted noise against a black-box, possibly non-differentiable
//! evaluation metric, trained by Bellman error on per-step metric gains. `D`
//! then climbs `V`'s score, which carries the metric's gradient signal back into
//! the reverse process.
//!
//! Module map:
//!
//! * [`schedule`]: per-step constants of the diffusion chain.
//! * [`signals`]: signal pairs, synthetic corpora, WAV I/O and SNR mixing.
//! * [`nets`]: reverse-mode tape, the two networks, Adam and checkpoints.
//! * [`diffusion`]: forward sampling, noise targets, reverse steps, fast sampling.
//! * [`metric`]: black-box evaluation metrics.
//! * [`rl`]: rewards, actor loss, critic targets and Bellman loss.
//! * [`trainer`]: the two-phase training loop, evaluation and the mismatch
//!   experiment.
//! * [`checks`]: independent oracles and the invariant suite behind `selfcheck`.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod diffusion;
pub mod error;
pub mod metric;
pub mod nets;
pub mod rl;
pub mod schedule;
pub mod signals;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
pub use schedule::NoiseSchedule;
pub use signals::{LatentState, SignalPair};
