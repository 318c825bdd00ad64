//! Tools for working with training-loss curves in normalized "collapse"
//! coordinates.
//!
//! Raw loss logs are mapped onto training fraction `t̂ = step / T` and divided
//! by a normalizer (usually the final loss). Curves that share the AdamW
//! timescale `τ = 1 / (η λ T)`, tokens-per-parameter, and LR schedule then
//! trace a common trajectory. The crate covers:
//!
//! * [`curve`]: ingestion, smoothing, resampling of loss logs and run configs
//! * [`timescale`]: LR schedules, `τ`, instantaneous `τ`, scaling rules
//! * [`nqm`]: the noisy quadratic model (Monte Carlo and closed form)
//! * [`scaling`]: Chinchilla-form laws and the compute/compression trade-off
//! * [`normalize`]: collapse coordinates and residuals between curves
//! * [`predictor`]: the parametric normalized-curve predictor and its fit
//! * [`earlystop`]: selecting sweep winners from partial runs
//! * [`monitor`]: online residual monitoring with alerting
//! * [`synth`]: seeded synthetic corpora with known ground truth

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod curve;
pub mod earlystop;
pub mod error;
pub mod fmt;
pub mod monitor;
pub mod normalize;
pub mod nqm;
pub mod predictor;
pub mod scaling;
pub mod stats;
pub mod synth;
pub mod timescale;

pub use curve::{LossCurve, LossSample, RunConfig};
pub use error::{Error, Result};
pub use normalize::{NormalizedCurve, ResidualReport};
pub use predictor::{CurveMeta, PredictorParams};
pub use timescale::{LrSchedule, ScheduleKind, TimescaleSummary};
