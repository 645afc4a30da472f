//! The masked least-squares objective f(X) = 1/2 |P_Omega(X) - J|_F^2.
//!
//! All evaluations work from the factored form and touch only the observed
//! entries: an observed entry of X = U Sigma V^T is the dot product of one
//! row of U Sigma with one row of V, so each call costs O(|Omega| r) plus the
//! O((M + Q) r^2) factor preparation. The Euclidean gradient P_Omega(X) - J
//! is sparse with support Omega and is kept in coordinate form.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::instance::CompletionProblem;
use crate::manifold::{AmbientMatrix, FactoredPoint, TangentVector};

/// A sparse matrix supported on (a subset of) Omega, stored in coordinate
/// form sorted by (row, col) — the same order as the problem's Omega, one
/// entry per observed position.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedResidual {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl MaskedResidual {
    pub(crate) fn from_values(problem: &CompletionProblem, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), problem.omega().len());
        Self {
            nrows: problem.nrows(),
            ncols: problem.ncols(),
            entries: problem
                .omega()
                .iter()
                .zip(values)
                .map(|(&(i, j), v)| (i, j, v))
                .collect(),
        }
    }

    /// Coordinate entries (row, col, value), sorted by (row, col).
    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    /// Values aligned with the problem's Omega ordering.
    pub fn values(&self) -> impl ExactSizeIterator<Item = f64> + '_ {
        self.entries.iter().map(|&(_, _, v)| v)
    }

    pub fn norm_squared(&self) -> f64 {
        self.entries.iter().map(|&(_, _, v)| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            nrows: self.nrows,
            ncols: self.ncols,
            entries: self
                .entries
                .iter()
                .map(|&(i, j, v)| (i, j, v * a))
                .collect(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for &(i, j, v) in &self.entries {
            m[(i, j)] += v;
        }
        m
    }
}

impl AmbientMatrix for MaskedResidual {
    fn nrows(&self) -> usize {
        self.nrows
    }

    fn ncols(&self) -> usize {
        self.ncols
    }

    fn right_mul(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, rhs.ncols());
        for &(i, j, v) in &self.entries {
            for c in 0..rhs.ncols() {
                out[(i, c)] += v * rhs[(j, c)];
            }
        }
        out
    }

    fn trans_mul(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.ncols, rhs.ncols());
        for &(i, j, v) in &self.entries {
            for c in 0..rhs.ncols() {
                out[(j, c)] += v * rhs[(i, c)];
            }
        }
        out
    }
}

/// P_Omega(X) as values aligned with the problem's Omega ordering.
pub fn observed_values(problem: &CompletionProblem, x: &FactoredPoint) -> Result<Vec<f64>> {
    x.check_dims(problem)?;
    let a_t = x.row_factor().transpose(); // r x M, columns contiguous
    let v_t = x.v().transpose(); // r x Q
    let r = x.rank();
    Ok(problem
        .omega()
        .iter()
        .map(|&(i, j)| {
            let mut s = 0.0;
            for t in 0..r {
                s += a_t[(t, i)] * v_t[(t, j)];
            }
            s
        })
        .collect())
}

/// Objective value 1/2 |P_Omega(X) - J|_F^2.
pub fn cost(problem: &CompletionProblem, x: &FactoredPoint) -> Result<f64> {
    let vals = observed_values(problem, x)?;
    Ok(0.5
        * vals
            .iter()
            .zip(problem.target())
            .map(|(x, j)| (x - j) * (x - j))
            .sum::<f64>())
}

/// Euclidean gradient P_Omega(X) - J, sparse on Omega.
pub fn euclid_grad(problem: &CompletionProblem, x: &FactoredPoint) -> Result<MaskedResidual> {
    let mut vals = observed_values(problem, x)?;
    for (v, j) in vals.iter_mut().zip(problem.target()) {
        *v -= j;
    }
    Ok(MaskedResidual::from_values(problem, vals))
}

/// P_Omega of the ambient matrix of a tangent vector; linear in the tangent
/// argument. This is the Gauss-Newton building block of the Hessian.
pub fn mask_tangent(
    problem: &CompletionProblem,
    x: &FactoredPoint,
    xi: &TangentVector,
) -> Result<MaskedResidual> {
    x.check_dims(problem)?;
    // xi_bar = (U Mid + Up) V^T + U Vp^T.
    let w_t = (x.u() * xi.mid() + xi.up()).transpose(); // r x M
    let v_t = x.v().transpose(); // r x Q
    let u_t = x.u().transpose(); // r x M
    let vp_t = xi.vp().transpose(); // r x Q
    let r = x.rank();
    let vals = problem
        .omega()
        .iter()
        .map(|&(i, j)| {
            let mut s = 0.0;
            for t in 0..r {
                s += w_t[(t, i)] * v_t[(t, j)] + u_t[(t, i)] * vp_t[(t, j)];
            }
            s
        })
        .collect();
    Ok(MaskedResidual::from_values(problem, vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{five_message_example, CachingInstance};
    use crate::manifold::{self, project_tangent};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn fig2_problem() -> CompletionProblem {
        CompletionProblem::from_instance(&five_message_example())
    }

    fn groupcast_problem() -> CompletionProblem {
        let inst = CachingInstance::new(
            2,
            vec![1, 1],
            vec![(vec![0, 1], vec![]), (vec![1], vec![0])],
        )
        .unwrap();
        CompletionProblem::from_instance(&inst)
    }

    #[test]
    fn cost_at_zero_matrix_is_half_target_norm() {
        // f(0) = 1/2 |J|^2; the five-message J has five ones.
        let problem = fig2_problem();
        let zero = DMatrix::zeros(5, 5);
        assert_relative_eq!(problem.cost_of_dense(&zero).unwrap(), 2.5);
    }

    #[test]
    fn cost_vanishes_at_feasible_point() {
        // The identity is a feasible completion of the fully observed
        // unicast problem.
        let inst = CachingInstance::new(
            2,
            vec![1, 1],
            vec![(vec![0], vec![]), (vec![1], vec![])],
        )
        .unwrap();
        let problem = CompletionProblem::from_instance(&inst);
        let x = manifold::spectral_init(&problem, 2).unwrap();
        assert!(cost(&problem, &x).unwrap() <= 1e-24);
        assert!(euclid_grad(&problem, &x).unwrap().norm() <= 1e-12);
    }

    #[test]
    fn factored_cost_matches_dense_reference() {
        let problem = groupcast_problem();
        for seed in 0..20 {
            let x = manifold::random_point(3, 2, 2, seed).unwrap();
            let fast = cost(&problem, &x).unwrap();
            let dense = problem.cost_of_dense(&x.ambient()).unwrap();
            assert_relative_eq!(fast, dense, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn gradient_norm_squared_is_twice_cost() {
        let problem = fig2_problem();
        let x = manifold::random_point(5, 5, 2, 3).unwrap();
        let g = euclid_grad(&problem, &x).unwrap();
        assert_relative_eq!(
            g.norm_squared(),
            2.0 * cost(&problem, &x).unwrap(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn gradient_entries_match_central_differences() {
        let problem = fig2_problem();
        let x = manifold::random_point(5, 5, 2, 8).unwrap();
        let g = euclid_grad(&problem, &x).unwrap();
        let dense_x = x.ambient();
        let t = 1e-6;
        for &(i, j, v) in g.entries() {
            let mut plus = dense_x.clone();
            plus[(i, j)] += t;
            let mut minus = dense_x.clone();
            minus[(i, j)] -= t;
            let fd = (problem.cost_of_dense(&plus).unwrap()
                - problem.cost_of_dense(&minus).unwrap())
                / (2.0 * t);
            assert_relative_eq!(fd, v, epsilon = 1e-8, max_relative = 1e-6);
        }
    }

    #[test]
    fn mask_tangent_is_linear_and_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let inst = CachingInstance::random_unicast(6, 2, 1, 5).unwrap();
        let problem = CompletionProblem::from_instance(&inst);
        // 6x5-shaped case per the op example: use a groupcast column drop.
        assert_eq!(problem.nrows(), 6);
        let x = manifold::random_point(6, 6, 3, 11).unwrap();
        let rand_tangent = |rng: &mut ChaCha8Rng| {
            project_tangent(
                &x,
                &DMatrix::from_fn(6, 6, |_, _| StandardNormal.sample(rng)),
            )
            .unwrap()
        };
        let xi = rand_tangent(&mut rng);
        let zeta = rand_tangent(&mut rng);

        let zero = TangentVector::zero_at(&x);
        assert_eq!(mask_tangent(&problem, &x, &zero).unwrap().norm(), 0.0);

        // Dense agreement.
        let masked = mask_tangent(&problem, &x, &xi).unwrap();
        let dense = problem.observed_of_dense(&xi.ambient(&x)).unwrap();
        for (got, want) in masked.values().zip(dense) {
            assert_relative_eq!(got, want, epsilon = 1e-12, max_relative = 1e-12);
        }

        // Linearity: mask(a xi + b zeta) = a mask(xi) + b mask(zeta).
        let (a, b) = (0.3, -1.7);
        let combo = xi.scaled(a).add_scaled(b, &zeta);
        let lhs = mask_tangent(&problem, &x, &combo).unwrap();
        let rx = mask_tangent(&problem, &x, &xi).unwrap();
        let rz = mask_tangent(&problem, &x, &zeta).unwrap();
        for ((l, vx), vz) in lhs.values().zip(rx.values()).zip(rz.values()) {
            assert_relative_eq!(l, a * vx + b * vz, epsilon = 1e-12, max_relative = 1e-10);
        }
    }

    #[test]
    fn sparse_products_match_dense_products() {
        let problem = fig2_problem();
        let x = manifold::random_point(5, 5, 2, 21).unwrap();
        let g = euclid_grad(&problem, &x).unwrap();
        let dense = g.to_dense();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = DMatrix::from_fn(5, 3, |_, _| StandardNormal.sample(&mut rng));
        assert_relative_eq!(g.right_mul(&b), &dense * &b, epsilon = 1e-12);
        assert_relative_eq!(g.trans_mul(&b), dense.transpose() * &b, epsilon = 1e-12);
    }
}
