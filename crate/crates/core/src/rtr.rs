//! Fixed-rank Riemannian trust-region solver with a Steihaug-Toint truncated
//! conjugate gradient inner loop.
//!
//! At each outer iteration the quadratic model
//!
//! ```text
//! m(xi) = f(X) + g(xi, grad f) + 1/2 g(xi, Hess f[xi])
//! ```
//!
//! is approximately minimized over the tangent-space ball g(xi, xi) <= delta^2
//! by truncated CG, the step is retracted back to the manifold at the same
//! rank, and the radius is adapted from the agreement ratio rho between actual
//! and predicted decrease. Steps are accepted only when rho clears the
//! threshold and the cost actually does not increase, so the accepted-cost
//! sequence is non-increasing by construction.

use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::instance::CompletionProblem;
use crate::manifold::{self, FactoredPoint, HessMode, TangentVector};
use crate::objective;

/// Which fixed-rank inner solver produced a trace / drives the pursuit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Rtr,
    AltMin,
    EmbCg,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Rtr => "rtr",
            Algorithm::AltMin => "altmin",
            Algorithm::EmbCg => "embcg",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rtr" => Ok(Algorithm::Rtr),
            "altmin" => Ok(Algorithm::AltMin),
            "embcg" => Ok(Algorithm::EmbCg),
            other => Err(Error::Parse(format!(
                "unknown algorithm '{other}' (expected rtr, altmin, or embcg)"
            ))),
        }
    }
}

/// Options for [`solve_fixed_rank_rtr`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrustRegionOptions {
    /// Maximum radius; `None` means |J|_F.
    pub delta_bar: Option<f64>,
    /// Initial radius; `None` means delta_bar / 8.
    pub delta0: Option<f64>,
    /// Acceptance threshold on the agreement ratio, in (0, 1/4).
    pub rho_accept: f64,
    /// Outer iteration cap.
    pub max_outer: usize,
    /// Stationarity tolerance on the Riemannian gradient norm.
    pub grad_tol: f64,
    /// Feasibility target on the cost.
    pub cost_tol: f64,
    /// Inner-stop constant: stop when |r| <= |r0| min(kappa, |r0|^theta).
    pub tcg_kappa: f64,
    pub tcg_theta: f64,
    /// Inner iteration cap; `None` means the tangent-space dimension
    /// r (M + Q - r).
    pub max_inner: Option<usize>,
    /// Consecutive rejected steps before declaring stagnation.
    pub max_rejections: usize,
    pub hess_mode: HessMode,
    /// Probe for negative curvature before stopping at a stationary
    /// non-feasible point, and step along it when found. Symmetric instances
    /// put exact strict saddles (zero gradient, reducible cost) on the
    /// solve path; without the probe the solver parks there.
    pub escape_saddles: bool,
    /// Seed for the curvature probe start vectors.
    pub escape_seed: u64,
}

impl Default for TrustRegionOptions {
    fn default() -> Self {
        Self {
            delta_bar: None,
            delta0: None,
            rho_accept: 0.1,
            max_outer: 500,
            grad_tol: 1e-9,
            cost_tol: 1e-7,
            tcg_kappa: 0.1,
            tcg_theta: 1.0,
            max_inner: None,
            max_rejections: 30,
            hess_mode: HessMode::Fd,
            escape_saddles: true,
            escape_seed: 0,
        }
    }
}

impl TrustRegionOptions {
    pub fn validate(&self) -> Result<()> {
        if let (Some(d0), Some(db)) = (self.delta0, self.delta_bar) {
            if !(d0 > 0.0 && d0 <= db) {
                return Err(Error::Range(format!(
                    "need 0 < delta0 <= delta_bar, got {d0} and {db}"
                )));
            }
        }
        if !(self.rho_accept > 0.0 && self.rho_accept < 0.25) {
            return Err(Error::Range(format!(
                "rho_accept must lie in (0, 0.25), got {}",
                self.rho_accept
            )));
        }
        if !(self.grad_tol > 0.0) || !(self.cost_tol >= 0.0) {
            return Err(Error::Range("tolerances must be positive".into()));
        }
        if !(self.tcg_kappa > 0.0 && self.tcg_theta > 0.0) {
            return Err(Error::Range("tcg constants must be positive".into()));
        }
        Ok(())
    }
}

/// Why the truncated CG loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TcgStop {
    NegativeCurvature,
    Boundary,
    KappaResidual,
    ThetaResidual,
    MaxInner,
}

impl TcgStop {
    pub fn name(self) -> &'static str {
        match self {
            TcgStop::NegativeCurvature => "negative_curvature",
            TcgStop::Boundary => "boundary",
            TcgStop::KappaResidual => "kappa_residual",
            TcgStop::ThetaResidual => "theta_residual",
            TcgStop::MaxInner => "max_inner",
        }
    }

    fn hit_boundary(self) -> bool {
        matches!(self, TcgStop::NegativeCurvature | TcgStop::Boundary)
    }
}

/// Why a fixed-rank solve terminated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradTol,
    CostTol,
    MaxOuter,
    Stagnation,
}

/// One outer-iteration record. Row 0 describes the initial point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    /// Cost at the current iterate after the step decision.
    pub cost: f64,
    pub grad_norm: f64,
    /// Trust-region radius after the update; `None` for radius-free solvers.
    pub delta: Option<f64>,
    pub accepted: bool,
    pub tcg_stop: Option<TcgStop>,
    pub elapsed_ms: f64,
}

/// Per-iteration history of one fixed-rank solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverTrace {
    pub algorithm: Algorithm,
    pub rows: Vec<TraceRow>,
    pub termination: Termination,
}

impl SolverTrace {
    /// Number of iterations beyond the initial row.
    pub fn iterations(&self) -> usize {
        self.rows.len().saturating_sub(1)
    }

    pub fn final_cost(&self) -> f64 {
        self.rows.last().map(|r| r.cost).unwrap_or(f64::NAN)
    }
}

/// Result of the inner model minimization.
pub struct TcgOutcome {
    pub step: TangentVector,
    /// Hessian applied to the returned step (accumulated during CG).
    pub hess_step: TangentVector,
    pub stop: TcgStop,
}

impl TcgOutcome {
    /// Model decrease m(0) - m(step); nonnegative for every returned step.
    pub fn model_decrease(&self, grad: &TangentVector) -> f64 {
        -(grad.inner(&self.step) + 0.5 * self.step.inner(&self.hess_step))
    }
}

/// Steihaug-Toint truncated CG on the tangent space at `x`.
///
/// Minimizes the quadratic model within the ball of radius `delta`, stopping
/// at the boundary, on negative curvature (in both cases the returned point
/// lies exactly on the boundary along the final direction), on the
/// kappa/theta residual reduction, or at the iteration cap. A zero gradient
/// returns the zero step with reason `KappaResidual`.
pub fn tcg(
    problem: &CompletionProblem,
    x: &FactoredPoint,
    grad: &TangentVector,
    delta: f64,
    opts: &TrustRegionOptions,
) -> Result<TcgOutcome> {
    let mut xi = TangentVector::zero_at(x);
    let mut h_xi = TangentVector::zero_at(x);
    let grad_norm = grad.norm();
    if grad_norm == 0.0 {
        return Ok(TcgOutcome {
            step: xi,
            hess_step: h_xi,
            stop: TcgStop::KappaResidual,
        });
    }
    let r = x.rank();
    let max_inner = opts
        .max_inner
        .unwrap_or(r * (x.nrows() + x.ncols() - r))
        .max(1);
    let target = grad_norm * opts.tcg_kappa.min(grad_norm.powf(opts.tcg_theta));
    let residual_bound_is_kappa = opts.tcg_kappa <= grad_norm.powf(opts.tcg_theta);

    let mut res = grad.clone();
    let mut dir = grad.scaled(-1.0);
    let mut res_sq = res.inner(&res);

    // Moves to the ball boundary from xi along dir.
    let boundary_step = |xi: &TangentVector, dir: &TangentVector| -> f64 {
        let a = dir.inner(dir);
        let b = 2.0 * xi.inner(dir);
        let c = xi.inner(xi) - delta * delta;
        (-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a)
    };

    for _ in 0..max_inner {
        let h_dir = manifold::hess_apply(problem, x, &dir, opts.hess_mode)?;
        let curvature = dir.inner(&h_dir);
        if curvature <= 0.0 {
            let tau = boundary_step(&xi, &dir);
            return Ok(TcgOutcome {
                step: xi.add_scaled(tau, &dir),
                hess_step: h_xi.add_scaled(tau, &h_dir),
                stop: TcgStop::NegativeCurvature,
            });
        }
        let alpha = res_sq / curvature;
        let xi_next = xi.add_scaled(alpha, &dir);
        if xi_next.norm() >= delta {
            let tau = boundary_step(&xi, &dir);
            return Ok(TcgOutcome {
                step: xi.add_scaled(tau, &dir),
                hess_step: h_xi.add_scaled(tau, &h_dir),
                stop: TcgStop::Boundary,
            });
        }
        xi = xi_next;
        h_xi = h_xi.add_scaled(alpha, &h_dir);
        res = res.add_scaled(alpha, &h_dir);
        let res_sq_next = res.inner(&res);
        if res_sq_next.sqrt() <= target {
            return Ok(TcgOutcome {
                step: xi,
                hess_step: h_xi,
                stop: if residual_bound_is_kappa {
                    TcgStop::KappaResidual
                } else {
                    TcgStop::ThetaResidual
                },
            });
        }
        let beta = res_sq_next / res_sq;
        res_sq = res_sq_next;
        dir = res.scaled(-1.0).add_scaled(beta, &dir);
    }
    Ok(TcgOutcome {
        step: xi,
        hess_step: h_xi,
        stop: TcgStop::MaxInner,
    })
}

/// Lanczos estimate of the smallest Hessian curvature at `x`, from a seeded
/// random tangent start vector. Returns the (eigenvalue, direction, scale)
/// triple, where scale bounds the spectrum magnitude for relative thresholds.
fn smallest_curvature(
    problem: &CompletionProblem,
    x: &FactoredPoint,
    hess_mode: HessMode,
    seed: u64,
    steps: usize,
) -> Result<Option<(f64, TangentVector, f64)>> {
    use nalgebra::{DMatrix, SymmetricEigen};
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(x.nrows(), x.ncols(), |_, _| StandardNormal.sample(&mut rng));
    let v0 = manifold::project_tangent(x, &g)?;
    let n0 = v0.norm();
    if n0 == 0.0 {
        return Ok(None);
    }
    // The probe prefers the cheap exact Hessian; an ill-conditioned sigma
    // falls back to the caller's mode.
    let hess = |xi: &TangentVector| -> Result<TangentVector> {
        match manifold::hess_apply(problem, x, xi, HessMode::Exact) {
            Ok(h) => Ok(h),
            Err(Error::SingularSigma { .. }) => manifold::hess_apply(problem, x, xi, hess_mode),
            Err(e) => Err(e),
        }
    };

    let dim = x.rank() * (x.nrows() + x.ncols() - x.rank());
    let steps = steps.min(dim).max(1);
    let mut basis = vec![v0.scaled(1.0 / n0)];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    for j in 0..steps {
        let mut w = hess(&basis[j])?;
        let alpha = w.inner(&basis[j]);
        alphas.push(alpha);
        // Full reorthogonalization; the basis stays small.
        for b in &basis {
            let c = w.inner(b);
            w = w.add_scaled(-c, b);
        }
        let beta = w.norm();
        if beta <= 1e-13 * alpha.abs().max(1.0) || j + 1 == steps {
            break;
        }
        betas.push(beta);
        basis.push(w.scaled(1.0 / beta));
    }
    let n = alphas.len();
    let mut t = DMatrix::zeros(n, n);
    for i in 0..n {
        t[(i, i)] = alphas[i];
        if i + 1 < n {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut min_idx = 0;
    let mut scale = 0.0_f64;
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        scale = scale.max(lambda.abs());
        if lambda < eig.eigenvalues[min_idx] {
            min_idx = i;
        }
    }
    let lambda_min = eig.eigenvalues[min_idx];
    let y = eig.eigenvectors.column(min_idx);
    let mut dir = TangentVector::zero_at(x);
    for (i, b) in basis.iter().enumerate().take(n) {
        dir = dir.add_scaled(y[i], b);
    }
    let dn = dir.norm();
    if dn == 0.0 {
        return Ok(None);
    }
    Ok(Some((lambda_min, dir.scaled(1.0 / dn), scale)))
}

/// At a stationary but non-feasible point, tries to descend along an
/// estimated negative-curvature direction. Returns the strictly improving
/// point when one is found within the radius.
fn try_escape(
    problem: &CompletionProblem,
    x: &FactoredPoint,
    cost: f64,
    delta: f64,
    opts: &TrustRegionOptions,
    seed: u64,
) -> Result<Option<(FactoredPoint, f64)>> {
    let Some((lambda, dir, scale)) =
        smallest_curvature(problem, x, opts.hess_mode, seed, 25)?
    else {
        return Ok(None);
    };
    if lambda >= -1e-7 * scale.max(1e-30) {
        return Ok(None);
    }
    let mut tau = delta;
    for _ in 0..8 {
        for sign in [1.0, -1.0] {
            let step = dir.scaled(sign * tau);
            if let Ok(cand) = manifold::retract_tangent(x, &step, x.rank()) {
                let cand_cost = objective::cost(problem, &cand)?;
                if cand_cost < cost {
                    return Ok(Some((cand, cand_cost)));
                }
            }
        }
        tau /= 4.0;
    }
    Ok(None)
}

/// The standard accept/reject trust-region loop at fixed rank `r`.
///
/// Stops when the cost reaches `cost_tol`, the outer cap is hit, or
/// `max_rejections` consecutive steps are rejected. A gradient norm below
/// `grad_tol` stops the solve once the curvature probe (when enabled) finds
/// no usable negative-curvature descent, so `GradTol` indicates approximate
/// second-order stationarity. The returned point's cost never exceeds the
/// initial cost.
pub fn solve_fixed_rank_rtr(
    problem: &CompletionProblem,
    r: usize,
    init: &FactoredPoint,
    opts: &TrustRegionOptions,
) -> Result<(FactoredPoint, SolverTrace)> {
    opts.validate()?;
    init.check_dims(problem)?;
    if init.rank() != r {
        return Err(Error::Range(format!(
            "initial point has rank {}, expected {r}",
            init.rank()
        )));
    }
    let delta_bar = opts.delta_bar.unwrap_or_else(|| problem.target_norm());
    let mut delta = opts.delta0.unwrap_or(delta_bar / 8.0).min(delta_bar);
    let start = Instant::now();

    let mut x = init.clone();
    let mut cost = objective::cost(problem, &x)?;
    let mut grad = manifold::riem_grad(problem, &x)?;
    let mut grad_norm = grad.norm();

    let mut rows = vec![TraceRow {
        iter: 0,
        cost,
        grad_norm,
        delta: Some(delta),
        accepted: true,
        tcg_stop: None,
        elapsed_ms: elapsed_ms(start),
    }];
    let mut termination = Termination::MaxOuter;
    let mut rejections = 0usize;
    let mut escapes = 0u64;

    for iter in 1..=opts.max_outer {
        if cost <= opts.cost_tol {
            termination = Termination::CostTol;
            break;
        }
        if grad_norm <= opts.grad_tol {
            let escaped = if opts.escape_saddles {
                escapes += 1;
                try_escape(
                    problem,
                    &x,
                    cost,
                    delta,
                    opts,
                    opts.escape_seed.wrapping_add(escapes),
                )?
            } else {
                None
            };
            match escaped {
                Some((y, y_cost)) => {
                    x = y;
                    cost = y_cost;
                    grad = manifold::riem_grad(problem, &x)?;
                    grad_norm = grad.norm();
                    rows.push(TraceRow {
                        iter,
                        cost,
                        grad_norm,
                        delta: Some(delta),
                        accepted: true,
                        tcg_stop: Some(TcgStop::NegativeCurvature),
                        elapsed_ms: elapsed_ms(start),
                    });
                    continue;
                }
                None => {
                    termination = Termination::GradTol;
                    break;
                }
            }
        }
        let outcome = tcg(problem, &x, &grad, delta, opts)?;
        let predicted = outcome.model_decrease(&grad);
        let candidate = manifold::retract_tangent(&x, &outcome.step, r);
        let reg = 1e-15 * cost.abs().max(1.0);
        let (accepted, rho) = match &candidate {
            Ok(cand) => {
                let cand_cost = objective::cost(problem, cand)?;
                let actual = cost - cand_cost;
                let rho = (actual + reg) / (predicted + reg);
                (predicted > 0.0 && rho > opts.rho_accept && actual >= 0.0, rho)
            }
            // A step that collapses the rank is treated as a plain rejection.
            Err(Error::RankCollapse { .. }) => (false, -1.0),
            Err(e) => return Err(e.clone()),
        };
        if accepted {
            x = candidate.expect("accepted step has a candidate");
            cost = objective::cost(problem, &x)?;
            grad = manifold::riem_grad(problem, &x)?;
            grad_norm = grad.norm();
            rejections = 0;
        } else {
            rejections += 1;
        }
        if rho < 0.25 {
            delta /= 4.0;
        } else if rho > 0.75 && outcome.stop.hit_boundary() {
            delta = (2.0 * delta).min(delta_bar);
        }
        rows.push(TraceRow {
            iter,
            cost,
            grad_norm,
            delta: Some(delta),
            accepted,
            tcg_stop: Some(outcome.stop),
            elapsed_ms: elapsed_ms(start),
        });
        if rejections >= opts.max_rejections {
            termination = Termination::Stagnation;
            break;
        }
    }
    if cost <= opts.cost_tol && termination == Termination::MaxOuter {
        termination = Termination::CostTol;
    }

    Ok((
        x,
        SolverTrace {
            algorithm: Algorithm::Rtr,
            rows,
            termination,
        },
    ))
}

pub(crate) fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{five_message_example, CachingInstance};
    use crate::manifold::{project_tangent, random_point, spectral_init, MetricMode};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn fig2_problem() -> CompletionProblem {
        CompletionProblem::from_instance(&five_message_example())
    }

    #[test]
    fn tcg_zero_gradient_returns_zero_step() {
        let problem = fig2_problem();
        let x = random_point(5, 5, 2, 1).unwrap();
        let zero = TangentVector::zero_at(&x);
        let out = tcg(&problem, &x, &zero, 1.0, &TrustRegionOptions::default()).unwrap();
        assert_eq!(out.step.norm(), 0.0);
        assert_eq!(out.stop, TcgStop::KappaResidual);
    }

    #[test]
    fn tcg_beats_cauchy_point() {
        let problem = fig2_problem();
        let opts = TrustRegionOptions {
            hess_mode: HessMode::Exact,
            ..Default::default()
        };
        for seed in 0..10 {
            let x = random_point(5, 5, 2, seed).unwrap();
            let grad = manifold::riem_grad(&problem, &x).unwrap();
            if grad.norm() < 1e-12 {
                continue;
            }
            let delta = 0.7;
            let out = tcg(&problem, &x, &grad, delta, &opts).unwrap();
            let m_step = -out.model_decrease(&grad);

            // Cauchy point: minimize the model along -grad within the ball.
            let h_grad = manifold::hess_apply(&problem, &x, &grad, HessMode::Exact).unwrap();
            let gg = grad.inner(&grad);
            let ghg = grad.inner(&h_grad);
            let alpha = if ghg > 0.0 {
                (gg / ghg).min(delta / gg.sqrt())
            } else {
                delta / gg.sqrt()
            };
            let cauchy = grad.scaled(-alpha);
            let h_cauchy =
                manifold::hess_apply(&problem, &x, &cauchy, HessMode::Exact).unwrap();
            let m_cauchy = grad.inner(&cauchy) + 0.5 * cauchy.inner(&h_cauchy);
            assert!(
                m_step <= m_cauchy + 1e-12,
                "model at tCG step {m_step} worse than Cauchy {m_cauchy}"
            );
            assert!(out.model_decrease(&grad) >= 0.0);
        }
    }

    #[test]
    fn tcg_boundary_stops_exactly_on_boundary() {
        let problem = fig2_problem();
        let opts = TrustRegionOptions {
            hess_mode: HessMode::Exact,
            ..Default::default()
        };
        let x = spectral_init(&problem, 2).unwrap();
        let grad = manifold::riem_grad(&problem, &x).unwrap();
        let delta = 1e-3 * grad.norm();
        let out = tcg(&problem, &x, &grad, delta, &opts).unwrap();
        if out.stop.hit_boundary() {
            assert!((out.step.norm() - delta).abs() <= 1e-10 * delta.max(1.0));
        }
    }

    #[test]
    fn tcg_residual_reduction_with_positive_definite_model() {
        // Fully observed problem J = P_Omega(Y) for a random rank-2 Y:
        // near Y the Gauss-Newton model is positive definite and with a
        // huge radius tCG must reach |H xi + grad| <= kappa |grad|.
        let inst = CachingInstance::new(
            6,
            vec![1; 6],
            (0..6).map(|k| (vec![k], vec![])).collect(),
        )
        .unwrap();
        let base = CompletionProblem::from_instance(&inst);
        let y = random_point(6, 6, 2, 99).unwrap();
        // Rebuild a problem whose target is P_Omega(Y): reuse omega, replace
        // J by evaluating on the dense matrix.
        let problem = base.clone();
        let dense_y = y.ambient();
        let mut vals = Vec::new();
        for &(i, j) in problem.omega() {
            vals.push(dense_y[(i, j)]);
        }
        let problem = problem.with_target(vals);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let perturb = project_tangent(
            &y,
            &DMatrix::from_fn(6, 6, |_, _| StandardNormal.sample(&mut rng)),
        )
        .unwrap();
        let x = manifold::retract_tangent(&y, &perturb.scaled(1e-3), 2).unwrap();
        let grad = manifold::riem_grad(&problem, &x).unwrap();
        let opts = TrustRegionOptions {
            hess_mode: HessMode::Exact,
            ..Default::default()
        };
        let out = tcg(&problem, &x, &grad, 1e9, &opts).unwrap();
        assert!(matches!(
            out.stop,
            TcgStop::KappaResidual | TcgStop::ThetaResidual
        ));
        let residual = out.hess_step.add_scaled(1.0, &grad);
        assert!(residual.norm() <= opts.tcg_kappa * grad.norm() + 1e-12);
    }

    #[test]
    fn rtr_stops_immediately_at_optimal_init() {
        let inst = CachingInstance::new(
            2,
            vec![1, 1],
            vec![(vec![0], vec![]), (vec![1], vec![])],
        )
        .unwrap();
        let problem = CompletionProblem::from_instance(&inst);
        let init = spectral_init(&problem, 2).unwrap();
        let (x, trace) =
            solve_fixed_rank_rtr(&problem, 2, &init, &TrustRegionOptions::default()).unwrap();
        assert!(objective::cost(&problem, &x).unwrap() <= 1e-20);
        assert_eq!(trace.iterations(), 0);
    }

    #[test]
    fn rtr_solves_five_message_rank_two_from_many_seeds() {
        let problem = fig2_problem();
        let opts = TrustRegionOptions::default();
        for seed in 0..8 {
            let init = random_point(5, 5, 2, seed).unwrap();
            let (x, trace) = solve_fixed_rank_rtr(&problem, 2, &init, &opts).unwrap();
            let cost = objective::cost(&problem, &x).unwrap();
            assert!(
                cost <= 1e-7,
                "seed {seed}: cost {cost:.3e} after {} iters ({:?})",
                trace.iterations(),
                trace.termination
            );
            // Accepted-cost monotonicity along the trace.
            let mut last = f64::INFINITY;
            for row in &trace.rows {
                if row.accepted {
                    assert!(row.cost <= last + 1e-15);
                    last = row.cost;
                }
            }
            // Radius bounds.
            let delta_bar = problem.target_norm();
            for row in &trace.rows {
                let d = row.delta.unwrap();
                assert!(d > 0.0 && d <= delta_bar + 1e-12);
            }
        }
    }

    #[test]
    fn rtr_returned_cost_never_exceeds_initial() {
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        for trial in 0..5 {
            let inst = CachingInstance::random_unicast(8, 3, 1, trial).unwrap();
            let problem = CompletionProblem::from_instance(&inst);
            let init = random_point(8, 8, 2, rng.random()).unwrap();
            let c0 = objective::cost(&problem, &init).unwrap();
            let opts = TrustRegionOptions {
                max_outer: 15,
                ..Default::default()
            };
            let (x, _) = solve_fixed_rank_rtr(&problem, 2, &init, &opts).unwrap();
            assert!(objective::cost(&problem, &x).unwrap() <= c0 + 1e-15);
        }
    }

    #[test]
    fn rtr_zero_outer_budget_traces_initial_row_only() {
        let problem = fig2_problem();
        let init = random_point(5, 5, 2, 7).unwrap();
        let opts = TrustRegionOptions {
            max_outer: 0,
            ..Default::default()
        };
        let (_, trace) = solve_fixed_rank_rtr(&problem, 2, &init, &opts).unwrap();
        assert_eq!(trace.rows.len(), 1);
        assert_eq!(trace.rows[0].iter, 0);
    }

    #[test]
    fn rtr_superlinear_tail_with_exact_hessian() {
        // Near the nondegenerate rank-2 minimizer of the five-message
        // problem the gradient must drop by >= 10x over the last three
        // accepted iterations.
        let problem = fig2_problem();
        let opts = TrustRegionOptions {
            hess_mode: HessMode::Exact,
            grad_tol: 1e-11,
            cost_tol: 0.0,
            ..Default::default()
        };
        let init = random_point(5, 5, 2, 2).unwrap();
        let (_, trace) = solve_fixed_rank_rtr(&problem, 2, &init, &opts).unwrap();
        assert_eq!(trace.termination, Termination::GradTol);
        let accepted: Vec<f64> = trace
            .rows
            .iter()
            .filter(|r| r.accepted && r.iter > 0)
            .map(|r| r.grad_norm)
            .collect();
        assert!(accepted.len() >= 3);
        let last = accepted[accepted.len() - 1];
        let third_last = accepted[accepted.len() - 3];
        assert!(
            last <= third_last / 10.0,
            "gradient tail not superlinear: {third_last:.3e} -> {last:.3e}"
        );
    }

    #[test]
    fn rtr_escapes_exact_saddle_points() {
        // Full-cache unicast: only the diagonal is observed. The partial
        // identity diag(1,1,0,0) is rank 2 with exactly zero Riemannian
        // gradient and cost 1, but rank 2 admits a feasible completion
        // (block-of-ones pattern), so the point is a strict saddle.
        let inst = CachingInstance::new(
            4,
            vec![1; 4],
            (0..4usize)
                .map(|k| (vec![k], (0..4).filter(|&j| j != k).collect()))
                .collect(),
        )
        .unwrap();
        let problem = CompletionProblem::from_instance(&inst);
        let mut u = DMatrix::zeros(4, 2);
        u[(0, 0)] = 1.0;
        u[(1, 1)] = 1.0;
        let x0 = FactoredPoint::from_factors(u.clone(), DMatrix::identity(2, 2), u).unwrap();
        assert_eq!(manifold::riem_grad(&problem, &x0).unwrap().norm(), 0.0);
        assert!((objective::cost(&problem, &x0).unwrap() - 1.0).abs() < 1e-15);

        let frozen = TrustRegionOptions {
            escape_saddles: false,
            ..Default::default()
        };
        let (x_stuck, trace) = solve_fixed_rank_rtr(&problem, 2, &x0, &frozen).unwrap();
        assert_eq!(trace.termination, Termination::GradTol);
        assert!((objective::cost(&problem, &x_stuck).unwrap() - 1.0).abs() < 1e-15);

        let (x, trace) =
            solve_fixed_rank_rtr(&problem, 2, &x0, &TrustRegionOptions::default()).unwrap();
        assert!(
            objective::cost(&problem, &x).unwrap() <= 1e-7,
            "escape failed: cost {:.3e} ({:?})",
            objective::cost(&problem, &x).unwrap(),
            trace.termination
        );
    }

    #[test]
    fn metric_modes_are_not_mixed_in_solver() {
        // The solver's inner products all go through TangentVector::inner,
        // which is the Frobenius metric; spot-check consistency here.
        let x = random_point(5, 4, 2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xi = project_tangent(
            &x,
            &DMatrix::from_fn(5, 4, |_, _| StandardNormal.sample(&mut rng)),
        )
        .unwrap();
        let a = xi.inner(&xi);
        let b = manifold::metric_inner(&x, &xi, &xi, MetricMode::Frobenius).unwrap();
        assert_eq!(a, b);
    }
}
