//! From feasible completions back to communication objects.
//!
//! A rank-N completion X factors as X = A B with A = U Sigma (rows) and
//! B = V^T (columns). The rows of A belonging to block (destination k,
//! desired message i) form the combiner U_{i,k}; the columns of B belonging
//! to message j form the precoder V_j. The alignment conditions then read
//! U_{i,k} V_j = 0 for observed interference (j not cached at k, j != i) and
//! U_{i,k} V_i nonsingular for every desired signal, and N channel uses
//! deliver message i at rate Q_i / N.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{CachingInstance, CompletionProblem};
use crate::manifold::FactoredPoint;
use crate::objective;

/// Smallest acceptable singular value of a desired-signal product; below
/// this the block counts as singular regardless of the zero tolerance.
pub const SV_FLOOR: f64 = 1e-6;

/// Receiver-side combining matrix for one (destination, desired message)
/// pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Combiner {
    /// Destination index (0-based).
    pub destination: usize,
    /// Desired message index (0-based).
    pub message: usize,
    /// Q_i x N combining matrix.
    pub matrix: DMatrix<f64>,
}

/// Precoders and combiners realizing a completion over N channel uses.
#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryDesign {
    channel_uses: usize,
    /// Per message j, the N x Q_j precoding matrix.
    precoders: Vec<DMatrix<f64>>,
    /// One combiner per (destination, desired message) block row.
    combiners: Vec<Combiner>,
}

impl DeliveryDesign {
    /// Assembles a design from raw matrices, checking shape consistency.
    pub fn new(
        channel_uses: usize,
        precoders: Vec<DMatrix<f64>>,
        combiners: Vec<Combiner>,
    ) -> Result<Self> {
        if channel_uses == 0 {
            return Err(Error::Range("channel uses must be >= 1".into()));
        }
        for p in &precoders {
            if p.nrows() != channel_uses {
                return Err(Error::DimensionMismatch {
                    expected_rows: channel_uses,
                    expected_cols: p.ncols(),
                    rows: p.nrows(),
                    cols: p.ncols(),
                });
            }
        }
        for c in &combiners {
            if c.matrix.ncols() != channel_uses {
                return Err(Error::DimensionMismatch {
                    expected_rows: c.matrix.nrows(),
                    expected_cols: channel_uses,
                    rows: c.matrix.nrows(),
                    cols: c.matrix.ncols(),
                });
            }
        }
        Ok(Self {
            channel_uses,
            precoders,
            combiners,
        })
    }

    /// Channel uses N (the achieved rank).
    pub fn channel_uses(&self) -> usize {
        self.channel_uses
    }

    pub fn precoders(&self) -> &[DMatrix<f64>] {
        &self.precoders
    }

    pub fn combiners(&self) -> &[Combiner] {
        &self.combiners
    }
}

/// Numerical alignment certificate for a design against an instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Largest |entry| over all zero-constrained products U_{i,k} V_j.
    pub max_zero_violation: f64,
    /// Smallest singular value over all desired products U_{i,k} V_i.
    pub min_signal_sv: f64,
    /// Number of zero conditions checked.
    pub zero_conditions: usize,
    /// Number of signal conditions checked.
    pub signal_conditions: usize,
    pub feasible: bool,
}

/// Per-message and symmetric delivery rates for N channel uses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateReport {
    /// Q_i / N per message.
    pub per_message_rate: Vec<f64>,
    /// Q_0 / N for uniform streams, otherwise the minimum message rate.
    pub symmetric_rate: f64,
}

/// Splits a feasible completion into precoders and combiners via the rank
/// factorization A = U Sigma, B = V^T.
///
/// Rejects completions whose cost on the instance's problem exceeds
/// `epsilon`; near-feasible inputs are accepted and their violations show up
/// numerically in [`verify_alignment`].
pub fn extract_factors(
    x: &FactoredPoint,
    inst: &CachingInstance,
    epsilon: f64,
) -> Result<DeliveryDesign> {
    let problem = CompletionProblem::from_instance(inst);
    x.check_dims(&problem)?;
    let cost = objective::cost(&problem, x)?;
    if cost > epsilon {
        return Err(Error::Infeasible { cost, epsilon });
    }
    let a = x.row_factor();
    let b = x.v().transpose();
    let n = x.rank();

    let precoders = problem
        .col_blocks()
        .iter()
        .map(|cb| DMatrix::from(b.columns(cb.start, cb.len)))
        .collect();
    let combiners = problem
        .row_blocks()
        .iter()
        .map(|rb| Combiner {
            destination: rb.destination,
            message: rb.message,
            matrix: DMatrix::from(a.rows(rb.start, rb.len)),
        })
        .collect();
    DeliveryDesign::new(n, precoders, combiners)
}

/// Checks every interference-zero condition and every desired-signal
/// condition of the design against the instance.
///
/// Feasible means: all zero-constrained products have entries within `tol`
/// and every signal product has smallest singular value at least
/// [`SV_FLOOR`]. The same algebra covers the wireless case with constant
/// diagonal channels.
pub fn verify_alignment(
    design: &DeliveryDesign,
    inst: &CachingInstance,
    tol: f64,
) -> Result<AlignmentReport> {
    if design.precoders.len() != inst.message_count() {
        return Err(Error::Range(format!(
            "design has {} precoders for {} messages",
            design.precoders.len(),
            inst.message_count()
        )));
    }
    for (j, p) in design.precoders.iter().enumerate() {
        if p.ncols() != inst.streams()[j] {
            return Err(Error::DimensionMismatch {
                expected_rows: design.channel_uses,
                expected_cols: inst.streams()[j],
                rows: p.nrows(),
                cols: p.ncols(),
            });
        }
    }

    let mut max_zero: f64 = 0.0;
    let mut min_sv = f64::INFINITY;
    let mut zero_conditions = 0;
    let mut signal_conditions = 0;
    for c in &design.combiners {
        let dest = inst
            .destinations()
            .get(c.destination)
            .ok_or_else(|| Error::Range(format!("combiner for unknown destination {}", c.destination)))?;
        if c.matrix.nrows() != inst.streams()[c.message] {
            return Err(Error::DimensionMismatch {
                expected_rows: inst.streams()[c.message],
                expected_cols: design.channel_uses,
                rows: c.matrix.nrows(),
                cols: c.matrix.ncols(),
            });
        }
        for j in 0..inst.message_count() {
            if j == c.message || dest.caches(j) {
                continue;
            }
            let product = &c.matrix * &design.precoders[j];
            zero_conditions += 1;
            max_zero = max_zero.max(product.amax());
        }
        let signal = &c.matrix * &design.precoders[c.message];
        signal_conditions += 1;
        let sv = signal.svd(false, false).singular_values;
        min_sv = min_sv.min(sv.iter().cloned().fold(f64::INFINITY, f64::min));
    }
    if !min_sv.is_finite() {
        min_sv = 0.0;
    }
    Ok(AlignmentReport {
        max_zero_violation: max_zero,
        min_signal_sv: min_sv,
        zero_conditions,
        signal_conditions,
        feasible: max_zero <= tol && min_sv >= SV_FLOOR,
    })
}

/// Delivery rates achieved over `channel_uses` uses.
pub fn rates(channel_uses: usize, inst: &CachingInstance) -> Result<RateReport> {
    if channel_uses == 0 {
        return Err(Error::Range("channel uses must be >= 1".into()));
    }
    let n = channel_uses as f64;
    let per_message_rate: Vec<f64> = inst.streams().iter().map(|&q| q as f64 / n).collect();
    let symmetric_rate = match inst.uniform_streams() {
        Some(q0) => q0 as f64 / n,
        None => per_message_rate
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min),
    };
    Ok(RateReport {
        per_message_rate,
        symmetric_rate,
    })
}

/// The hand-verified rank-2 certificate of the five-message example: row
/// factors (combiner rows) and column factors (precoder columns) satisfying
/// all fourteen observed constraints exactly.
pub fn five_message_certificate() -> (DMatrix<f64>, DMatrix<f64>) {
    let a = DMatrix::from_row_slice(
        5,
        2,
        &[
            1.0, 0.0, //
            1.0, 0.0, //
            -1.0, 1.0, //
            -1.0, 1.0, //
            0.0, 1.0,
        ],
    );
    let b = DMatrix::from_row_slice(
        2,
        5,
        &[
            1.0, 1.0, 0.0, 0.0, 1.0, //
            1.0, 0.0, 1.0, 1.0, 1.0,
        ],
    );
    (a, b)
}
