//! Reference fixed-rank solvers for comparison runs: alternating
//! minimization with an observed-entry fill (LMaFit-style) and Riemannian
//! conjugate gradient on the embedded fixed-rank geometry (EmbG-style).
//!
//! Both implement the same inner-solver contract as the trust-region method —
//! identical inputs, trace schema, and stopping semantics — so the rank
//! pursuit can wrap any of the three.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::instance::CompletionProblem;
use crate::manifold::{self, FactoredPoint};
use crate::objective;
use crate::rank_pursuit::exact_line_step_on_omega;
use crate::rtr::{elapsed_ms, Algorithm, SolverTrace, Termination, TraceRow};

/// Options shared by the two baselines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineOptions {
    pub max_outer: usize,
    /// Feasibility target on the cost.
    pub cost_tol: f64,
    /// Stationarity tolerance (conjugate gradient only).
    pub grad_tol: f64,
    /// Relative cost decrease under which the run counts as stalled...
    pub stall_tol: f64,
    /// ...over this many consecutive iterations.
    pub stall_window: usize,
    /// Seed for re-seeding collapsed factor directions.
    pub seed: u64,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        Self {
            max_outer: 500,
            cost_tol: 1e-7,
            grad_tol: 1e-9,
            stall_tol: 1e-12,
            stall_window: 10,
            seed: 0,
        }
    }
}

/// Working state of the alternating scheme: X = Ufac * Vfac with a dense fill
/// matrix Z that always satisfies P_Omega(Z) = J.
#[derive(Debug, Clone)]
pub struct AltMinState {
    /// M x r row factor.
    pub ufac: DMatrix<f64>,
    /// r x Q column factor.
    pub vfac: DMatrix<f64>,
    /// M x Q fill: the current product with observed entries overwritten
    /// by the target.
    pub z: DMatrix<f64>,
}

impl AltMinState {
    fn new(problem: &CompletionProblem, init: &FactoredPoint) -> Self {
        Self {
            ufac: init.row_factor(),
            vfac: init.v().transpose(),
            z: DMatrix::zeros(problem.nrows(), problem.ncols()),
        }
    }

    fn refill(&mut self, problem: &CompletionProblem) {
        self.z = &self.ufac * &self.vfac;
        for (idx, &(i, j)) in problem.omega().iter().enumerate() {
            self.z[(i, j)] = problem.target()[idx];
        }
    }
}

/// P_Omega values of a factored product A (M x r) * B (r x Q).
fn product_on_omega(problem: &CompletionProblem, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let a_t = a.transpose();
    let r = a.ncols();
    problem
        .omega()
        .iter()
        .map(|&(i, j)| {
            let mut s = 0.0;
            for t in 0..r {
                s += a_t[(t, i)] * b[(t, j)];
            }
            s
        })
        .collect()
}

fn cost_from_values(problem: &CompletionProblem, values: &[f64]) -> f64 {
    0.5 * values
        .iter()
        .zip(problem.target())
        .map(|(x, j)| (x - j) * (x - j))
        .sum::<f64>()
}

/// Pseudo-inverse of a small symmetric Gram matrix; flags rank deficiency.
fn pinv_gram(gram: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let n = gram.nrows();
    let eig = gram.clone().symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let tol = lam_max.max(1e-300) * 1e-12 * n as f64;
    let mut deficient = false;
    let mut inv = DMatrix::zeros(n, n);
    for k in 0..n {
        let lam = eig.eigenvalues[k];
        if lam <= tol {
            deficient = true;
            continue;
        }
        let q = eig.eigenvectors.column(k);
        for i in 0..n {
            for j in 0..n {
                inv[(i, j)] += q[i] * q[j] / lam;
            }
        }
    }
    (inv, deficient)
}

fn reseed_columns(mat: &mut DMatrix<f64>, seed: u64) {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let scale = 1e-6 * mat.norm().max(1.0);
    for v in mat.iter_mut() {
        let g: f64 = StandardNormal.sample(&mut rng);
        *v += scale * g;
    }
}

/// Refactors a product A * B into a rank-r [`FactoredPoint`], padding with
/// negligible seeded directions if the product's numerical rank fell short.
fn refactor(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    rank: usize,
    seed: u64,
) -> Result<FactoredPoint> {
    let product = a * b;
    match manifold::truncated_svd(&product, rank) {
        Ok(p) => Ok(p),
        Err(Error::RankCollapse { .. }) => {
            // A tiny dense perturbation restores full numerical rank while
            // moving observed entries by O(1e-6 * scale).
            let mut padded = product;
            reseed_columns(&mut padded, seed);
            manifold::truncated_svd(&padded, rank)
        }
        Err(e) => Err(e),
    }
}

/// Alternating minimization (LMaFit-style) at fixed rank.
///
/// Each iteration refreshes the fill Z = UV + P_Omega(J - UV), then solves
/// the two factor least-squares problems in turn; the observed residual is
/// non-increasing. Stops on `cost_tol`, stall, or the iteration cap.
pub fn solve_fixed_rank_altmin(
    problem: &CompletionProblem,
    r: usize,
    init: &FactoredPoint,
    opts: &BaselineOptions,
) -> Result<(FactoredPoint, SolverTrace)> {
    init.check_dims(problem)?;
    if init.rank() != r {
        return Err(Error::Range(format!(
            "initial point has rank {}, expected {r}",
            init.rank()
        )));
    }
    let start = Instant::now();
    let mut state = AltMinState::new(problem, init);
    let mut values = product_on_omega(problem, &state.ufac, &state.vfac);
    let mut cost = cost_from_values(problem, &values);
    let mut history = vec![cost];
    let mut rows = vec![TraceRow {
        iter: 0,
        cost,
        grad_norm: (2.0 * cost).sqrt(),
        delta: None,
        accepted: true,
        tcg_stop: None,
        elapsed_ms: elapsed_ms(start),
    }];
    let mut termination = Termination::MaxOuter;
    let mut reseeds = 0u64;

    for iter in 1..=opts.max_outer {
        if cost <= opts.cost_tol {
            termination = Termination::CostTol;
            break;
        }
        if stalled(&history, opts) {
            termination = Termination::Stagnation;
            break;
        }
        state.refill(problem);
        // U-step: min_U |U Vfac - Z|.
        let (inv_v, deficient_v) = pinv_gram(&(&state.vfac * state.vfac.transpose()));
        state.ufac = &state.z * state.vfac.transpose() * inv_v;
        if deficient_v {
            reseeds += 1;
            reseed_columns(&mut state.ufac, opts.seed.wrapping_add(reseeds));
        }
        // V-step: min_V |Ufac V - Z|.
        let (inv_u, deficient_u) = pinv_gram(&(state.ufac.transpose() * &state.ufac));
        state.vfac = inv_u * state.ufac.transpose() * &state.z;
        if deficient_u {
            reseeds += 1;
            reseed_columns(&mut state.vfac, opts.seed.wrapping_add(reseeds));
        }
        values = product_on_omega(problem, &state.ufac, &state.vfac);
        cost = cost_from_values(problem, &values);
        history.push(cost);
        rows.push(TraceRow {
            iter,
            cost,
            grad_norm: (2.0 * cost).sqrt(),
            delta: None,
            accepted: true,
            tcg_stop: None,
            elapsed_ms: elapsed_ms(start),
        });
    }
    if cost <= opts.cost_tol && termination == Termination::MaxOuter {
        termination = Termination::CostTol;
    }

    let point = refactor(&state.ufac, &state.vfac, r, opts.seed.wrapping_add(7))?;
    Ok((
        point,
        SolverTrace {
            algorithm: Algorithm::AltMin,
            rows,
            termination,
        },
    ))
}

fn stalled(history: &[f64], opts: &BaselineOptions) -> bool {
    if history.len() <= opts.stall_window {
        return false;
    }
    let old = history[history.len() - 1 - opts.stall_window];
    let new = history[history.len() - 1];
    old - new < opts.stall_tol * old.max(1e-300)
}

/// Riemannian conjugate gradient on the embedded fixed-rank geometry
/// (EmbG-style).
///
/// Directions use the nonnegative Polak-Ribiere coefficient with automatic
/// restart to steepest descent when conjugacy degrades; vector transport is
/// tangent projection at the new point; the initial step along each
/// direction is the exact quadratic line step, backtracked until the
/// retracted cost decreases. Accepted cost is monotone.
pub fn solve_fixed_rank_embcg(
    problem: &CompletionProblem,
    r: usize,
    init: &FactoredPoint,
    opts: &BaselineOptions,
) -> Result<(FactoredPoint, SolverTrace)> {
    init.check_dims(problem)?;
    if init.rank() != r {
        return Err(Error::Range(format!(
            "initial point has rank {}, expected {r}",
            init.rank()
        )));
    }
    let start = Instant::now();
    let mut x = init.clone();
    let mut cost = objective::cost(problem, &x)?;
    let mut grad = manifold::riem_grad(problem, &x)?;
    let mut grad_norm = grad.norm();
    let mut dir = grad.scaled(-1.0);
    let mut history = vec![cost];
    let mut rows = vec![TraceRow {
        iter: 0,
        cost,
        grad_norm,
        delta: None,
        accepted: true,
        tcg_stop: None,
        elapsed_ms: elapsed_ms(start),
    }];
    let mut termination = Termination::MaxOuter;

    for iter in 1..=opts.max_outer {
        if cost <= opts.cost_tol {
            termination = Termination::CostTol;
            break;
        }
        if grad_norm <= opts.grad_tol {
            termination = Termination::GradTol;
            break;
        }
        if stalled(&history, opts) {
            termination = Termination::Stagnation;
            break;
        }
        // Keep the direction a descent direction.
        let mut slope = grad.inner(&dir);
        if slope >= -1e-14 * grad_norm * dir.norm().max(1e-300) {
            dir = grad.scaled(-1.0);
            slope = -grad_norm * grad_norm;
        }
        let dir_ambient = dir.ambient(&x);
        let x_vals = objective::observed_values(problem, &x)?;
        let dir_vals = problem.observed_of_dense(&dir_ambient)?;
        let alpha0 = match exact_line_step_on_omega(problem.target(), &x_vals, &dir_vals) {
            Ok(a) if a > 0.0 => a,
            // The masked quadratic gives no descent along this direction;
            // fall back to steepest descent next round.
            _ => {
                dir = grad.scaled(-1.0);
                history.push(cost);
                rows.push(TraceRow {
                    iter,
                    cost,
                    grad_norm,
                    delta: None,
                    accepted: false,
                    tcg_stop: None,
                    elapsed_ms: elapsed_ms(start),
                });
                continue;
            }
        };
        // Backtrack on the actual retracted cost (the retraction truncates
        // the ambient step, so the quadratic prediction can be optimistic).
        let mut alpha = alpha0;
        let mut accepted = None;
        for _ in 0..30 {
            if let Ok(cand) = manifold::retract(&x, &(&dir_ambient * alpha), r) {
                let cand_cost = objective::cost(problem, &cand)?;
                if cand_cost <= cost + 1e-4 * alpha * slope {
                    accepted = Some((cand, cand_cost));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((x_next, cost_next)) = accepted else {
            if grad.inner(&dir) < 0.0 && dir.add_scaled(1.0, &grad).norm() < 1e-30 {
                // Already steepest descent and still no progress.
                termination = Termination::Stagnation;
                break;
            }
            dir = grad.scaled(-1.0);
            history.push(cost);
            rows.push(TraceRow {
                iter,
                cost,
                grad_norm,
                delta: None,
                accepted: false,
                tcg_stop: None,
                elapsed_ms: elapsed_ms(start),
            });
            continue;
        };

        let grad_next = manifold::riem_grad(problem, &x_next)?;
        // Transport the old gradient and direction to the new point.
        let grad_transported = manifold::project_tangent(&x_next, &grad.ambient(&x))?;
        let dir_transported = manifold::project_tangent(&x_next, &dir_ambient)?;
        let beta = (grad_next.inner(&grad_next) - grad_next.inner(&grad_transported))
            / (grad_norm * grad_norm).max(1e-300);
        let beta = beta.max(0.0);
        dir = grad_next.scaled(-1.0).add_scaled(beta, &dir_transported);

        x = x_next;
        cost = cost_next;
        grad = grad_next;
        grad_norm = grad.norm();
        history.push(cost);
        rows.push(TraceRow {
            iter,
            cost,
            grad_norm,
            delta: None,
            accepted: true,
            tcg_stop: None,
            elapsed_ms: elapsed_ms(start),
        });
    }
    if cost <= opts.cost_tol && termination == Termination::MaxOuter {
        termination = Termination::CostTol;
    }

    Ok((
        x,
        SolverTrace {
            algorithm: Algorithm::EmbCg,
            rows,
            termination,
        },
    ))
}
