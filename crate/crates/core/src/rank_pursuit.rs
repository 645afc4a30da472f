//! Greedy rank pursuit: solve the fixed-rank subproblem, and while the cost
//! stays above the feasibility target, escape into the next rank along the
//! projection of the negative Euclidean gradient onto the tangent cone of
//! rank-(r+1) matrices.
//!
//! The tangent-cone direction at a rank-r point splits into the tangent-space
//! part of G = -(P_Omega(X) - J) plus the leading singular triple of the
//! normal component P_U_perp G P_V_perp. The step size is the exact minimizer
//! of the quadratic t -> f(X + t Xi), which keeps the cost non-increasing
//! across rank transitions; when SVD truncation of the stepped matrix would
//! spoil that, the step falls back to the pure normal rank-one direction,
//! which retracts losslessly.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::baselines::{solve_fixed_rank_altmin, solve_fixed_rank_embcg, BaselineOptions};
use crate::delivery::RateReport;
use crate::error::{Error, Result};
use crate::instance::CompletionProblem;
use crate::manifold::{self, FactoredPoint};
use crate::objective;
use crate::rtr::{self, Algorithm, SolverTrace, TrustRegionOptions};

/// Tangent-gradient threshold below which a vanishing normal component means
/// there is no useful escape direction.
const STAGNATION_GRAD_TOL: f64 = 1e-9;

/// Options for [`solve_min_rank`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PursuitOptions {
    /// Feasibility tolerance on the cost.
    pub epsilon: f64,
    /// Rank cap; `None` means min(M, Q).
    pub max_rank: Option<usize>,
    /// Which fixed-rank solver drives the subproblems.
    pub inner: Algorithm,
    /// Per-rank options for the trust-region solver.
    pub rtr: TrustRegionOptions,
    /// Per-rank options for the baselines.
    pub baseline: BaselineOptions,
    /// Seed for the rank-1 initialization and degenerate escape draws.
    pub seed: u64,
    /// After convergence, re-run the inner solver with tight tolerances so
    /// downstream alignment certificates hold well below epsilon.
    pub polish: bool,
    /// Wall-clock cap; exceeding it flags the report as timed out.
    pub time_budget_ms: Option<f64>,
}

impl Default for PursuitOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-7,
            max_rank: None,
            inner: Algorithm::Rtr,
            rtr: TrustRegionOptions::default(),
            baseline: BaselineOptions::default(),
            seed: 0,
            polish: true,
            time_budget_ms: None,
        }
    }
}

/// One rank's worth of pursuit history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankRecord {
    pub rank: usize,
    /// Cost at the rank's initial point (after the rank-increase step).
    pub init_cost: f64,
    pub final_cost: f64,
    pub trace: SolverTrace,
}

/// Outcome of a full pursuit run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub algorithm: Algorithm,
    pub epsilon: f64,
    /// Rank of the returned completion; the channel-use count N.
    pub achieved_rank: usize,
    pub final_cost: f64,
    /// True when `final_cost <= epsilon`.
    pub converged: bool,
    pub timed_out: bool,
    pub per_rank: Vec<RankRecord>,
    /// The tight re-solve at the achieved rank, when polishing ran.
    pub polish: Option<RankRecord>,
    pub wall_time_ms: f64,
    /// Filled by the delivery layer.
    pub rates: Option<RateReport>,
}

impl SolveReport {
    pub fn total_iterations(&self) -> usize {
        self.per_rank.iter().map(|r| r.trace.iterations()).sum()
    }
}

/// Exact minimizer of t -> f(X + t Xi) given the observed values of X and Xi
/// (aligned with the problem's Omega): alpha = <P(Xi), J - P(X)> / |P(Xi)|^2.
pub fn exact_line_step_on_omega(
    target: &[f64],
    x_values: &[f64],
    step_values: &[f64],
) -> Result<f64> {
    let denom: f64 = step_values.iter().map(|v| v * v).sum();
    if denom.sqrt() <= 1e-14 {
        return Err(Error::ZeroDirection);
    }
    let numer: f64 = step_values
        .iter()
        .zip(x_values.iter().zip(target))
        .map(|(s, (x, j))| s * (j - x))
        .sum();
    Ok(numer / denom)
}

/// Exact quadratic line step from a factored point along an ambient
/// direction.
pub fn exact_line_step(
    problem: &CompletionProblem,
    x: &FactoredPoint,
    direction: &DMatrix<f64>,
) -> Result<f64> {
    let x_vals = objective::observed_values(problem, x)?;
    let step_vals = problem.observed_of_dense(direction)?;
    exact_line_step_on_omega(problem.target(), &x_vals, &step_vals)
}

/// A singular triple (sigma, u, v) with u, v as column matrices.
type SingularTriple = (f64, DMatrix<f64>, DMatrix<f64>);

/// Leading singular triple of a dense matrix. When the top singular value is
/// degenerate, a seeded random unit vector of the leading cluster's left
/// subspace is used, so the returned triple is a generic representative
/// rather than a basis-ordering artifact.
fn leading_triple(mat: &DMatrix<f64>, seed: u64) -> Result<Option<SingularTriple>> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    let svd = mat.clone().svd(true, true);
    let u = svd
        .u
        .ok_or_else(|| Error::Numerical("SVD did not produce U".into()))?;
    let vt = svd
        .v_t
        .ok_or_else(|| Error::Numerical("SVD did not produce V^T".into()))?;
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
    let s1 = s[order[0]];
    if s1 <= manifold::RANK_FLOOR {
        return Ok(None);
    }
    let cluster: Vec<usize> = order
        .iter()
        .copied()
        .take_while(|&i| s[i] >= (1.0 - 1e-6) * s1)
        .collect();
    if cluster.len() == 1 {
        let i = cluster[0];
        let u1 = u.column(i).clone_owned();
        let v1 = vt.row(i).transpose().clone_owned();
        return Ok(Some((
            s1,
            DMatrix::from_column_slice(mat.nrows(), 1, u1.as_slice()),
            DMatrix::from_column_slice(mat.ncols(), 1, v1.as_slice()),
        )));
    }
    // Degenerate top cluster: any unit vector of the subspace is a leading
    // direction; a seeded random one avoids basis-ordering traps on
    // symmetric instances.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut u1 = DMatrix::zeros(mat.nrows(), 1);
    for &i in &cluster {
        let z: f64 = StandardNormal.sample(&mut rng);
        for row in 0..mat.nrows() {
            u1[(row, 0)] += z * u[(row, i)];
        }
    }
    let norm = u1.norm();
    if norm == 0.0 {
        let i = cluster[0];
        u1 = DMatrix::from_column_slice(mat.nrows(), 1, u.column(i).clone_owned().as_slice());
    } else {
        u1 /= norm;
    }
    let w = mat.transpose() * &u1;
    let sigma = w.norm();
    if sigma <= manifold::RANK_FLOOR {
        return Ok(None);
    }
    Ok(Some((sigma, u1, w / sigma)))
}

/// One tangent-cone rank-increase step from rank r to r+1.
///
/// Signals [`Error::Stagnation`] when neither the tangent gradient nor the
/// normal residual component offers a useful escape direction. On success the
/// returned point has rank r+1 and cost no larger than at `x`.
pub fn rank_increase_step(
    problem: &CompletionProblem,
    x: &FactoredPoint,
    seed: u64,
) -> Result<FactoredPoint> {
    x.check_dims(problem)?;
    let r = x.rank();
    if r + 1 > x.nrows().min(x.ncols()) {
        return Err(Error::Range(format!(
            "cannot increase rank beyond min({}, {})",
            x.nrows(),
            x.ncols()
        )));
    }
    let gradient = objective::euclid_grad(problem, x)?;
    let g = gradient.scaled(-1.0);
    let g_norm = g.norm();
    let tangent = manifold::project_tangent(x, &g)?;
    let tangent_ambient = tangent.ambient(x);
    let normal = g.to_dense() - &tangent_ambient;
    let triple = leading_triple(&normal, seed)?;
    let sigma1 = triple.as_ref().map(|t| t.0).unwrap_or(0.0);
    if sigma1 <= 1e-12 * g_norm && tangent.norm() <= STAGNATION_GRAD_TOL {
        return Err(Error::Stagnation);
    }
    let cost0 = objective::cost(problem, x)?;

    let mut candidates: Vec<DMatrix<f64>> = Vec::new();
    if let Some((s1, u1, v1)) = &triple {
        if *s1 > 1e-12 * g_norm {
            candidates.push(&tangent_ambient + u1 * v1.transpose() * *s1);
            // Pure normal escape: u1 and v1 are orthogonal to the factor
            // ranges, so X + alpha s1 u1 v1^T has rank exactly r+1 and
            // truncation is lossless.
            candidates.push(u1 * v1.transpose() * *s1);
        }
    }
    if candidates.is_empty() {
        candidates.push(tangent_ambient.clone());
    }

    for direction in candidates {
        let alpha = match exact_line_step(problem, x, &direction) {
            Ok(a) => a,
            Err(Error::ZeroDirection) => continue,
            Err(e) => return Err(e),
        };
        match manifold::retract(x, &(direction * alpha), r + 1) {
            Ok(cand) => {
                if objective::cost(problem, &cand)? <= cost0 {
                    return Ok(cand);
                }
            }
            Err(Error::RankCollapse { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Stagnation)
}

/// Last-resort escape used once per pursuit: step along the leading singular
/// triple of the raw residual (not its normal projection).
fn residual_escape(
    problem: &CompletionProblem,
    x: &FactoredPoint,
    seed: u64,
) -> Result<FactoredPoint> {
    let g = objective::euclid_grad(problem, x)?.scaled(-1.0);
    let Some((s1, u1, v1)) = leading_triple(&g.to_dense(), seed)? else {
        return Err(Error::Stagnation);
    };
    let direction = u1 * v1.transpose() * s1;
    let alpha = exact_line_step(problem, x, &direction).map_err(|_| Error::Stagnation)?;
    let cost0 = objective::cost(problem, x)?;
    let cand = manifold::retract(x, &(direction * alpha), x.rank() + 1)
        .map_err(|_| Error::Stagnation)?;
    if objective::cost(problem, &cand)? <= cost0 {
        Ok(cand)
    } else {
        Err(Error::Stagnation)
    }
}

fn run_inner(
    problem: &CompletionProblem,
    rank: usize,
    init: &FactoredPoint,
    opts: &PursuitOptions,
    cost_tol: f64,
    tight: bool,
) -> Result<(FactoredPoint, SolverTrace)> {
    match opts.inner {
        Algorithm::Rtr => {
            let mut o = opts.rtr.clone();
            o.cost_tol = cost_tol;
            o.escape_seed = splitmix(opts.seed ^ 0x7261_6e6b, rank as u64);
            if tight {
                o.grad_tol = 1e-12;
                o.max_outer = o.max_outer.min(100);
            }
            rtr::solve_fixed_rank_rtr(problem, rank, init, &o)
        }
        Algorithm::AltMin => {
            let mut o = opts.baseline.clone();
            o.cost_tol = cost_tol;
            o.seed = splitmix(opts.seed ^ 0x616c_746d, rank as u64);
            if tight {
                o.max_outer = o.max_outer.min(300);
            }
            solve_fixed_rank_altmin(problem, rank, init, &o)
        }
        Algorithm::EmbCg => {
            let mut o = opts.baseline.clone();
            o.cost_tol = cost_tol;
            if tight {
                o.grad_tol = 1e-12;
                o.max_outer = o.max_outer.min(300);
            }
            solve_fixed_rank_embcg(problem, rank, init, &o)
        }
    }
}

/// Minimum-rank completion by greedy pursuit: start at rank 1, solve the
/// fixed-rank subproblem, and increase the rank until the cost reaches
/// epsilon or the rank cap. Non-convergence is reported in the
/// [`SolveReport`], not as an error.
pub fn solve_min_rank(
    problem: &CompletionProblem,
    opts: &PursuitOptions,
) -> Result<(FactoredPoint, SolveReport)> {
    if !(opts.epsilon > 0.0) {
        return Err(Error::Range("epsilon must be positive".into()));
    }
    let min_dim = problem.nrows().min(problem.ncols());
    let max_rank = opts.max_rank.unwrap_or(min_dim);
    if max_rank == 0 || max_rank > min_dim {
        return Err(Error::Range(format!(
            "max_rank {max_rank} out of range 1..={min_dim}"
        )));
    }
    let start = Instant::now();
    let out_of_time = |start: &Instant| match opts.time_budget_ms {
        Some(cap) => start.elapsed().as_secs_f64() * 1e3 > cap,
        None => false,
    };

    // Rank-1 initialization: a seeded random point. The spectral candidate
    // (truncated SVD of the zero-filled target) sits exactly on degenerate
    // critical points for unicast instances, which deadlocks the pursuit.
    let mut x = manifold::random_point(problem.nrows(), problem.ncols(), 1, opts.seed)?;
    let mut rank = 1;
    let mut per_rank: Vec<RankRecord> = Vec::new();
    let mut converged = false;
    let mut timed_out = false;
    let mut recovery_used = false;

    loop {
        let init_cost = objective::cost(problem, &x)?;
        let (x_next, trace) = run_inner(problem, rank, &x, opts, opts.epsilon, false)?;
        x = x_next;
        let final_cost = objective::cost(problem, &x)?;
        per_rank.push(RankRecord {
            rank,
            init_cost,
            final_cost,
            trace,
        });
        if final_cost <= opts.epsilon {
            converged = true;
            break;
        }
        if rank >= max_rank {
            break;
        }
        if out_of_time(&start) {
            timed_out = true;
            break;
        }
        match rank_increase_step(problem, &x, splitmix(opts.seed, rank as u64)) {
            Ok(y) => {
                x = y;
                rank += 1;
            }
            Err(Error::Stagnation) => {
                if recovery_used {
                    break;
                }
                recovery_used = true;
                match residual_escape(problem, &x, splitmix(!opts.seed, rank as u64)) {
                    Ok(y) => {
                        x = y;
                        rank += 1;
                    }
                    Err(_) => break,
                }
            }
            Err(e) => return Err(e),
        }
    }

    let mut polish = None;
    if converged && opts.polish && !out_of_time(&start) {
        let init_cost = objective::cost(problem, &x)?;
        let (x_polished, trace) = run_inner(problem, rank, &x, opts, 1e-16, true)?;
        let final_cost = objective::cost(problem, &x_polished)?;
        if final_cost <= init_cost {
            x = x_polished;
            polish = Some(RankRecord {
                rank,
                init_cost,
                final_cost,
                trace,
            });
        }
    }

    let final_cost = objective::cost(problem, &x)?;
    let report = SolveReport {
        algorithm: opts.inner,
        epsilon: opts.epsilon,
        achieved_rank: rank,
        final_cost,
        converged,
        timed_out,
        per_rank,
        polish,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        rates: None,
    };
    Ok((x, report))
}

/// SplitMix64 combination of a base seed with a stream index; stable across
/// platforms and releases.
pub fn splitmix(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
