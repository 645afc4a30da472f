//! Geometry of fixed-rank matrices in the three-factor representation.
//!
//! A rank-r point is stored as X = U Sigma V^T with U in St(r,M), Sigma in
//! GL(r), V in St(r,Q). The factorization is unique up to the orthogonal
//! gauge (U, Sigma, V) -> (U O1, O1^T Sigma O2, V O2); every operation here is
//! invariant under that gauge.
//!
//! Tangent vectors use the canonical embedded parameterization at X,
//!
//! ```text
//! xi_bar = U Mid V^T + Up V^T + U Vp^T,   U^T Up = 0,  V^T Vp = 0,
//! ```
//!
//! under which the Frobenius inner product of two tangent vectors is the sum
//! of componentwise inner products. The normative metric is the embedded
//! (Frobenius) one, for which [`project_tangent`] is the orthogonal projector
//! onto the tangent space and [`riem_grad`] is exactly the Riemannian
//! gradient. The scaled quotient metric is available through
//! [`MetricMode::Scaled`] for comparison; the two must not be mixed within
//! one solve.
//!
//! The retraction is metric projection: truncated SVD of X + update. It
//! serves both the fixed-rank solvers (same-rank retraction) and the
//! rank-increase step (retraction into the next computational space).

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::instance::CompletionProblem;
use crate::objective;

/// Orthonormality drift beyond which factors are re-orthonormalized on
/// construction.
const REORTH_TOL: f64 = 1e-8;

/// Singular values at or below this are treated as rank collapse.
pub(crate) const RANK_FLOOR: f64 = 1e-14;

/// A rank-r matrix in factored form (U, Sigma, V), X = U Sigma V^T.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredPoint {
    u: DMatrix<f64>,
    sigma: DMatrix<f64>,
    v: DMatrix<f64>,
}

impl FactoredPoint {
    /// Builds a point from factors, re-orthonormalizing U and V via QR if
    /// their drift from orthonormality exceeds 1e-8 (the R factors are folded
    /// into Sigma so the ambient matrix is unchanged).
    pub fn from_factors(u: DMatrix<f64>, sigma: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        let r = sigma.nrows();
        if r == 0 || sigma.ncols() != r || u.ncols() != r || v.ncols() != r {
            return Err(Error::Range(format!(
                "inconsistent factor shapes: U {}x{}, Sigma {}x{}, V {}x{}",
                u.nrows(),
                u.ncols(),
                sigma.nrows(),
                sigma.ncols(),
                v.nrows(),
                v.ncols()
            )));
        }
        if r > u.nrows().min(v.nrows()) {
            return Err(Error::Range(format!(
                "rank {} exceeds min({}, {})",
                r,
                u.nrows(),
                v.nrows()
            )));
        }
        let mut point = Self { u, sigma, v };
        if orthonormality_drift(&point.u) > REORTH_TOL {
            let qr = point.u.clone().qr();
            point.sigma = qr.r() * point.sigma;
            point.u = qr.q();
        }
        if orthonormality_drift(&point.v) > REORTH_TOL {
            let qr = point.v.clone().qr();
            point.sigma *= qr.r().transpose();
            point.v = qr.q();
        }
        let sv = point.sigma.clone().svd(false, false).singular_values;
        let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(smin > 0.0) {
            return Err(Error::RankCollapse { index: r });
        }
        Ok(point)
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn rank(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn nrows(&self) -> usize {
        self.u.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.v.nrows()
    }

    /// The dense ambient matrix U Sigma V^T.
    pub fn ambient(&self) -> DMatrix<f64> {
        &self.u * &self.sigma * self.v.transpose()
    }

    /// The row factor A = U Sigma, so that X = A V^T.
    pub fn row_factor(&self) -> DMatrix<f64> {
        &self.u * &self.sigma
    }

    /// Checks the representation invariants (orthonormal U, V; nonsingular
    /// Sigma).
    pub fn validate(&self) -> Result<()> {
        let du = orthonormality_drift(&self.u);
        let dv = orthonormality_drift(&self.v);
        if du > 1e-10 || dv > 1e-10 {
            return Err(Error::Numerical(format!(
                "factor orthonormality drift U: {du:.3e}, V: {dv:.3e}"
            )));
        }
        let sv = self.sigma.clone().svd(false, false).singular_values;
        let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(smin > 0.0) {
            return Err(Error::RankCollapse { index: self.rank() });
        }
        Ok(())
    }

    pub(crate) fn check_dims(&self, problem: &CompletionProblem) -> Result<()> {
        problem.check_dims(self.nrows(), self.ncols())
    }
}

fn orthonormality_drift(m: &DMatrix<f64>) -> f64 {
    let gram = m.transpose() * m;
    (gram - DMatrix::identity(m.ncols(), m.ncols())).norm()
}

/// A tangent vector at a [`FactoredPoint`], in the canonical parameterization
/// (Mid, Up, Vp) with U^T Up = 0 and V^T Vp = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    mid: DMatrix<f64>,
    up: DMatrix<f64>,
    vp: DMatrix<f64>,
}

impl TangentVector {
    /// The zero tangent vector at `x`.
    pub fn zero_at(x: &FactoredPoint) -> Self {
        let r = x.rank();
        Self {
            mid: DMatrix::zeros(r, r),
            up: DMatrix::zeros(x.nrows(), r),
            vp: DMatrix::zeros(x.ncols(), r),
        }
    }

    /// Builds a tangent vector from raw parts, absorbing any components of
    /// `up`/`vp` along U/V into `mid` so the orthogonality constraints hold
    /// exactly while the represented ambient matrix is unchanged.
    pub fn from_parts(
        x: &FactoredPoint,
        mid: DMatrix<f64>,
        up: DMatrix<f64>,
        vp: DMatrix<f64>,
    ) -> Result<Self> {
        let r = x.rank();
        if mid.shape() != (r, r) || up.shape() != (x.nrows(), r) || vp.shape() != (x.ncols(), r) {
            return Err(Error::Range("tangent part shapes do not match point".into()));
        }
        let a = x.u().transpose() * &up;
        let b = x.v().transpose() * &vp;
        let mid = mid + &a + b.transpose();
        let up = up - x.u() * a;
        let vp = vp - x.v() * b;
        Ok(Self { mid, up, vp })
    }

    pub fn mid(&self) -> &DMatrix<f64> {
        &self.mid
    }

    pub fn up(&self) -> &DMatrix<f64> {
        &self.up
    }

    pub fn vp(&self) -> &DMatrix<f64> {
        &self.vp
    }

    /// The dense ambient matrix U Mid V^T + Up V^T + U Vp^T.
    pub fn ambient(&self, x: &FactoredPoint) -> DMatrix<f64> {
        (x.u() * &self.mid + &self.up) * x.v().transpose() + x.u() * self.vp.transpose()
    }

    /// Frobenius inner product with another tangent vector at the same point.
    ///
    /// Thanks to the orthogonality constraints this equals the ambient
    /// <xi_bar, zeta_bar>_F.
    pub fn inner(&self, other: &Self) -> f64 {
        self.mid.dot(&other.mid) + self.up.dot(&other.up) + self.vp.dot(&other.vp)
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            mid: &self.mid * a,
            up: &self.up * a,
            vp: &self.vp * a,
        }
    }

    /// self + a * other.
    pub fn add_scaled(&self, a: f64, other: &Self) -> Self {
        Self {
            mid: &self.mid + &other.mid * a,
            up: &self.up + &other.up * a,
            vp: &self.vp + &other.vp * a,
        }
    }

    /// The factor-form components (xi_U, xi_Sigma, xi_V) of the horizontal
    /// representative: xi_bar = xi_U Sigma V^T + U xi_Sigma V^T + U Sigma
    /// xi_V^T with U^T xi_U = 0, V^T xi_V = 0. Requires Sigma nonsingular.
    pub fn factor_components(
        &self,
        x: &FactoredPoint,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let inv = x
            .sigma()
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("sigma factor not invertible".into()))?;
        let xi_u = &self.up * &inv;
        let xi_v = &self.vp * inv.transpose();
        Ok((xi_u, self.mid.clone(), xi_v))
    }
}

/// Anything that can act as an ambient M x Q matrix through products with
/// dense matrices. Lets [`project_tangent`] accept dense matrices and sparse
/// masked residuals alike.
pub trait AmbientMatrix {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// self * rhs, with rhs Q x p.
    fn right_mul(&self, rhs: &DMatrix<f64>) -> DMatrix<f64>;
    /// self^T * rhs, with rhs M x p.
    fn trans_mul(&self, rhs: &DMatrix<f64>) -> DMatrix<f64>;
}

impl AmbientMatrix for DMatrix<f64> {
    fn nrows(&self) -> usize {
        DMatrix::nrows(self)
    }

    fn ncols(&self) -> usize {
        DMatrix::ncols(self)
    }

    fn right_mul(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self * rhs
    }

    fn trans_mul(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.transpose() * rhs
    }
}

/// Metric choice for [`metric_inner`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricMode {
    /// Embedded Frobenius metric (normative; matches the tangent projection).
    Frobenius,
    /// Scaled quotient metric on factor components:
    /// <xi_U, zeta_U Sigma Sigma^T> + <xi_Sigma, zeta_Sigma> + <xi_V, zeta_V Sigma^T Sigma>.
    Scaled,
}

/// Hessian-vector product mode for [`hess_apply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum HessMode {
    /// Finite difference of the gradient field along the retraction
    /// (normative).
    #[default]
    Fd,
    /// Gauss-Newton term plus the exact curvature correction.
    Exact,
}

/// Deterministic random rank-r point: U, V from QR of seeded Gaussians,
/// Sigma diagonal with positive entries.
pub fn random_point(nrows: usize, ncols: usize, rank: usize, seed: u64) -> Result<FactoredPoint> {
    if rank == 0 || rank > nrows.min(ncols) {
        return Err(Error::Range(format!(
            "rank {rank} out of range 1..=min({nrows}, {ncols})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rng: &mut ChaCha8Rng, n: usize, m: usize| {
        DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(rng))
    };
    let u = gauss(&mut rng, nrows, rank).qr().q();
    let v = gauss(&mut rng, ncols, rank).qr().q();
    let sigma = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(rank, |_, _| {
        1.0 + f64::abs(StandardNormal.sample(&mut rng))
    }));
    FactoredPoint::from_factors(u, sigma, v)
}

/// Orthogonal projection of an ambient matrix onto the tangent space at `x`:
/// Mid = U^T G V, Up = G V - U Mid, Vp = G^T U - V Mid^T.
pub fn project_tangent<G: AmbientMatrix>(x: &FactoredPoint, g: &G) -> Result<TangentVector> {
    if g.nrows() != x.nrows() || g.ncols() != x.ncols() {
        return Err(Error::DimensionMismatch {
            expected_rows: x.nrows(),
            expected_cols: x.ncols(),
            rows: g.nrows(),
            cols: g.ncols(),
        });
    }
    let gv = g.right_mul(x.v());
    let gtu = g.trans_mul(x.u());
    let mid = x.u().transpose() * &gv;
    let up = gv - x.u() * &mid;
    let vp = gtu - x.v() * mid.transpose();
    Ok(TangentVector { mid, up, vp })
}

/// Inner product of two tangent vectors at `x` under the chosen metric.
pub fn metric_inner(
    x: &FactoredPoint,
    xi: &TangentVector,
    zeta: &TangentVector,
    mode: MetricMode,
) -> Result<f64> {
    match mode {
        MetricMode::Frobenius => Ok(xi.inner(zeta)),
        MetricMode::Scaled => {
            let (xi_u, xi_s, xi_v) = xi.factor_components(x)?;
            let (zeta_u, zeta_s, zeta_v) = zeta.factor_components(x)?;
            let sst = x.sigma() * x.sigma().transpose();
            let sts = x.sigma().transpose() * x.sigma();
            Ok(xi_u.dot(&(&zeta_u * sst)) + xi_s.dot(&zeta_s) + xi_v.dot(&(&zeta_v * sts)))
        }
    }
}

/// Riemannian gradient of the masked objective at `x`: the tangent projection
/// of the Euclidean gradient P_Omega(X) - J.
pub fn riem_grad(problem: &CompletionProblem, x: &FactoredPoint) -> Result<TangentVector> {
    let g = objective::euclid_grad(problem, x)?;
    project_tangent(x, &g)
}

/// Riemannian Hessian-vector product.
///
/// `Fd` differentiates the gradient field along the retraction with step
/// t = 1e-5 / |xi| and transports back by tangent projection at `x`. `Exact`
/// is the Gauss-Newton term plus the curvature (Weingarten) correction
///
/// ```text
/// Up += P_U_perp (R Vp) Sigma^-T,   Vp += P_V_perp (R^T Up) Sigma^-1,
/// ```
///
/// with R the Euclidean gradient. Both modes are self-adjoint to the tested
/// tolerances and agree to first order.
pub fn hess_apply(
    problem: &CompletionProblem,
    x: &FactoredPoint,
    xi: &TangentVector,
    mode: HessMode,
) -> Result<TangentVector> {
    x.check_dims(problem)?;
    let xi_norm = xi.norm();
    if xi_norm == 0.0 {
        return Ok(TangentVector::zero_at(x));
    }
    match mode {
        HessMode::Fd => {
            let t = 1e-5 / xi_norm;
            let xt = retract(x, &(xi.ambient(x) * t), x.rank())?;
            let grad_t = riem_grad(problem, &xt)?;
            let transported = project_tangent(x, &grad_t.ambient(&xt))?;
            let grad_0 = riem_grad(problem, x)?;
            Ok(transported.add_scaled(-1.0, &grad_0).scaled(1.0 / t))
        }
        HessMode::Exact => {
            let sv = x.sigma().clone().svd(false, false).singular_values;
            let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
            let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
            if smin <= 0.0 || smax / smin > 1e12 {
                return Err(Error::SingularSigma { cond: smax / smin });
            }
            let masked = objective::mask_tangent(problem, x, xi)?;
            let gn = project_tangent(x, &masked)?;
            let residual = objective::euclid_grad(problem, x)?;
            let inv = x
                .sigma()
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Numerical("sigma factor not invertible".into()))?;
            use crate::manifold::AmbientMatrix as _;
            let rvp = residual.right_mul(xi.up_vp_split().1);
            let rtup = residual.trans_mul(xi.up_vp_split().0);
            let up_c = (&rvp - x.u() * (x.u().transpose() * &rvp)) * inv.transpose();
            let vp_c = (&rtup - x.v() * (x.v().transpose() * &rtup)) * inv;
            Ok(TangentVector {
                mid: gn.mid,
                up: gn.up + up_c,
                vp: gn.vp + vp_c,
            })
        }
    }
}

impl TangentVector {
    fn up_vp_split(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.up, &self.vp)
    }
}

/// Metric-projection retraction: the best rank-`target_rank` approximation of
/// X + update, refactored into (U, Sigma, V). Signals [`Error::RankCollapse`]
/// when singular value `target_rank` of the update falls below 1e-14.
pub fn retract(
    x: &FactoredPoint,
    update: &DMatrix<f64>,
    target_rank: usize,
) -> Result<FactoredPoint> {
    if update.nrows() != x.nrows() || update.ncols() != x.ncols() {
        return Err(Error::DimensionMismatch {
            expected_rows: x.nrows(),
            expected_cols: x.ncols(),
            rows: update.nrows(),
            cols: update.ncols(),
        });
    }
    if target_rank < x.rank() || target_rank > x.nrows().min(x.ncols()) {
        return Err(Error::Range(format!(
            "retraction target rank {} out of range {}..=min({}, {})",
            target_rank,
            x.rank(),
            x.nrows(),
            x.ncols()
        )));
    }
    truncated_svd(&(x.ambient() + update), target_rank)
}

/// Retraction of a tangent step; see [`retract`].
pub fn retract_tangent(
    x: &FactoredPoint,
    xi: &TangentVector,
    target_rank: usize,
) -> Result<FactoredPoint> {
    retract(x, &xi.ambient(x), target_rank)
}

/// Rank-r truncated SVD of the zero-filled target matrix. If the target has
/// numerical rank below r, the missing directions are padded with seeded
/// random orthogonal columns and singular values of 1e-8.
pub fn spectral_init(problem: &CompletionProblem, rank: usize) -> Result<FactoredPoint> {
    if rank == 0 || rank > problem.nrows().min(problem.ncols()) {
        return Err(Error::Range(format!(
            "rank {} out of range 1..=min({}, {})",
            rank,
            problem.nrows(),
            problem.ncols()
        )));
    }
    let dense = problem.dense_target();
    match truncated_svd(&dense, rank) {
        Ok(point) => Ok(point),
        Err(Error::RankCollapse { index }) => {
            let base = truncated_svd(&dense, index - 1)?;
            let pad = rank - base.rank();
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
            let u = pad_orthonormal(base.u(), pad, &mut rng);
            let v = pad_orthonormal(base.v(), pad, &mut rng);
            let mut sigma = DMatrix::zeros(rank, rank);
            sigma
                .view_mut((0, 0), (base.rank(), base.rank()))
                .copy_from(base.sigma());
            for i in base.rank()..rank {
                sigma[(i, i)] = 1e-8;
            }
            FactoredPoint::from_factors(u, sigma, v)
        }
        Err(e) => Err(e),
    }
}

/// Extends an orthonormal basis with `extra` random orthonormal columns.
fn pad_orthonormal(base: &DMatrix<f64>, extra: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = base.nrows();
    let mut g = DMatrix::from_fn(n, extra, |_, _| StandardNormal.sample(rng));
    // Two projection passes keep the pad orthogonal to the base to rounding.
    for _ in 0..2 {
        g -= base * (base.transpose() * &g);
    }
    let q = g.qr().q();
    let mut out = DMatrix::zeros(n, base.ncols() + extra);
    out.view_mut((0, 0), (n, base.ncols())).copy_from(base);
    out.view_mut((0, base.ncols()), (n, extra)).copy_from(&q);
    out
}

/// Best rank-r approximation via dense SVD, returned in factored form.
/// Singular values are sorted in decreasing order before truncation.
pub(crate) fn truncated_svd(mat: &DMatrix<f64>, rank: usize) -> Result<FactoredPoint> {
    let svd = mat.clone().svd(true, true);
    let u_full = svd
        .u
        .ok_or_else(|| Error::Numerical("SVD did not produce U".into()))?;
    let vt_full = svd
        .v_t
        .ok_or_else(|| Error::Numerical("SVD did not produce V^T".into()))?;
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
    for (pos, &idx) in order.iter().take(rank).enumerate() {
        if s[idx] <= RANK_FLOOR {
            return Err(Error::RankCollapse { index: pos + 1 });
        }
    }
    let m = mat.nrows();
    let q = mat.ncols();
    let mut u = DMatrix::zeros(m, rank);
    let mut v = DMatrix::zeros(q, rank);
    let mut sigma = DMatrix::zeros(rank, rank);
    for (pos, &idx) in order.iter().take(rank).enumerate() {
        u.column_mut(pos).copy_from(&u_full.column(idx));
        v.column_mut(pos).copy_from(&vt_full.row(idx).transpose());
        sigma[(pos, pos)] = s[idx];
    }
    FactoredPoint::from_factors(u, sigma, v)
}
