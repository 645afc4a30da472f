//! Minimum-rank matrix completion for cache-aided content delivery.
//!
//! A caching network — K messages, destinations that each want some messages
//! and hold others as side information — admits a linear delivery scheme over
//! N channel uses exactly when an M x Q matrix with prescribed entries
//! (identity blocks for desired signals, zero blocks for non-cached
//! interference, free blocks elsewhere) has a completion of rank N. Minimizing
//! N maximizes the per-message delivery rate Q_i / N.
//!
//! The crate models instances ([`instance`]), compiles them into masked
//! least-squares problems ([`objective`]), and minimizes rank with a greedy
//! rank-pursuit loop ([`rank_pursuit`]) whose fixed-rank subproblems are
//! solved by a Riemannian trust-region method on the fixed-rank manifold
//! ([`manifold`], [`rtr`]) or by one of two reference baselines
//! ([`baselines`]). Feasible completions are decoded back into precoders,
//! combiners, and verified alignment certificates ([`delivery`]).

pub mod baselines;
pub mod delivery;
pub mod error;
pub mod instance;
pub mod manifold;
pub mod objective;
pub mod rank_pursuit;
pub mod rtr;

pub use baselines::BaselineOptions;
pub use delivery::{AlignmentReport, DeliveryDesign, RateReport};
pub use error::{Error, Result};
pub use instance::{CachingInstance, CompletionProblem};
pub use manifold::{FactoredPoint, HessMode, TangentVector};
pub use rank_pursuit::{PursuitOptions, SolveReport};
pub use rtr::{Algorithm, SolverTrace, TrustRegionOptions};
