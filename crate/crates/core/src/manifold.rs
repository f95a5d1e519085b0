//! Minimization over the manifold of complex `m × n` matrices of fixed rank
//! `r`, using the embedded geometry with SVD-factored points.
//!
//! Objectives report `∇_{X*} f`, the conjugate (Wirtinger) gradient. For a
//! real-valued `f` the first-order change is `df = 2·Re tr(∇ᴴ dX)`, so the
//! Riemannian gradient under the metric `Re tr(AᴴB)` is `Proj(2∇)`.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cn_matrix, real_inner, CMat, C64};

/// A real objective on complex matrices.
pub trait Objective {
    fn shape(&self) -> (usize, usize);

    fn value(&self, x: &CMat) -> f64;

    /// Value and conjugate gradient `∇_{X*} f`.
    fn value_grad(&self, x: &CMat) -> (f64, CMat);
}

/// `X = U·diag(s)·Vᴴ` with orthonormal `U`, `V` and positive descending `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedRankPoint {
    pub u: CMat,
    pub s: DVector<f64>,
    pub v: CMat,
}

/// Singular values below this fraction of the largest are lifted to it.
pub const RANK_GUARD: f64 = 1e-12;

impl FixedRankPoint {
    /// Rank-`r` truncated SVD of `x`.
    pub fn from_matrix(x: &CMat, r: usize) -> Result<Self> {
        let (m, n) = x.shape();
        if r == 0 || r > m.min(n) {
            return Err(Error::InvalidArgument(format!(
                "rank {r} impossible for a {m}x{n} matrix"
            )));
        }
        if !crate::linalg::is_finite(x) {
            return Err(Error::NonFinite("fixed-rank truncation"));
        }
        let svd = x.clone().svd(true, true);
        let (u_full, vt_full) = match (svd.u, svd.v_t) {
            (Some(u), Some(vt)) => (u, vt),
            _ => return Err(Error::NonFinite("svd")),
        };
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let smax = svd.singular_values[order[0]];
        if !(smax > 0.0) {
            return Err(Error::InvalidArgument(
                "zero matrix has no rank-r factorization".into(),
            ));
        }
        let floor = RANK_GUARD * smax;
        let mut u = CMat::zeros(m, r);
        let mut v = CMat::zeros(n, r);
        let mut s = DVector::zeros(r);
        for (j, &k) in order.iter().take(r).enumerate() {
            u.set_column(j, &u_full.column(k));
            v.set_column(j, &vt_full.row(k).adjoint());
            s[j] = svd.singular_values[k].max(floor);
        }
        Ok(Self { u, s, v })
    }

    /// Random point with orthonormalized Gaussian factors and unit spectrum.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, m: usize, n: usize, r: usize) -> Result<Self> {
        if r == 0 || r > m.min(n) {
            return Err(Error::InvalidArgument(format!(
                "rank {r} impossible for a {m}x{n} matrix"
            )));
        }
        let u = cn_matrix(rng, m, r, 1.0).qr().q();
        let v = cn_matrix(rng, n, r, 1.0).qr().q();
        Ok(Self {
            u,
            s: DVector::from_element(r, 1.0),
            v,
        })
    }

    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.u.nrows(), self.v.nrows())
    }

    pub fn to_matrix(&self) -> CMat {
        let mut us = self.u.clone();
        for (j, mut c) in us.column_iter_mut().enumerate() {
            c *= C64::from(self.s[j]);
        }
        us * self.v.adjoint()
    }

    /// Multiplies the represented matrix by a positive scalar.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            u: self.u.clone(),
            s: &self.s * c,
            v: self.v.clone(),
        }
    }

    /// Orthonormality, positivity and ordering checks.
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = self.rank();
        let eye = CMat::identity(r, r);
        (self.u.adjoint() * &self.u - &eye).norm() < tol
            && (self.v.adjoint() * &self.v - &eye).norm() < tol
            && self.s.iter().all(|&x| x > 0.0 && x.is_finite())
            && self.s.as_slice().windows(2).all(|w| w[0] >= w[1])
    }
}

/// Tangent vector `U·M·Vᴴ + U_p·Vᴴ + U·V_pᴴ` with `Uᴴ U_p = 0`, `Vᴴ V_p = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub m: CMat,
    pub up: CMat,
    pub vp: CMat,
}

impl TangentVector {
    pub fn zeros(x: &FixedRankPoint) -> Self {
        let (m, n) = x.shape();
        let r = x.rank();
        Self {
            m: CMat::zeros(r, r),
            up: CMat::zeros(m, r),
            vp: CMat::zeros(n, r),
        }
    }

    pub fn to_ambient(&self, x: &FixedRankPoint) -> CMat {
        (&x.u * &self.m + &self.up) * x.v.adjoint() + &x.u * self.vp.adjoint()
    }

    /// Metric `Re tr(ξᴴη)`, evaluated on the factors.
    pub fn inner(&self, other: &Self) -> f64 {
        real_inner(&self.m, &other.m)
            + real_inner(&self.up, &other.up)
            + real_inner(&self.vp, &other.vp)
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn scale(&self, c: f64) -> Self {
        let c = C64::from(c);
        Self {
            m: &self.m * c,
            up: &self.up * c,
            vp: &self.vp * c,
        }
    }

    /// `self + c·other`, both at the same base point.
    pub fn axpy(&self, c: f64, other: &Self) -> Self {
        let c = C64::from(c);
        Self {
            m: &self.m + &other.m * c,
            up: &self.up + &other.up * c,
            vp: &self.vp + &other.vp * c,
        }
    }
}

/// Orthogonal projection of an ambient matrix onto the tangent space at `x`.
pub fn project_tangent(x: &FixedRankPoint, e: &CMat) -> TangentVector {
    let ev = e * &x.v;
    let ehu = e.adjoint() * &x.u;
    let m = x.u.adjoint() * &ev;
    let up = ev - &x.u * &m;
    let vp = ehu - &x.v * m.adjoint();
    TangentVector { m, up, vp }
}

/// Rank-`r` truncated SVD of `X + t·ξ`.
pub fn retract(x: &FixedRankPoint, xi: &TangentVector, t: f64) -> Result<FixedRankPoint> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {t}")));
    }
    let y = x.to_matrix() + xi.to_ambient(x) * C64::from(t);
    FixedRankPoint::from_matrix(&y, x.rank())
}

/// Moves a tangent vector at `from` to the tangent space at `to`.
pub fn transport(from: &FixedRankPoint, to: &FixedRankPoint, xi: &TangentVector) -> TangentVector {
    project_tangent(to, &xi.to_ambient(from))
}

/// Riemannian gradient and value at `x`.
pub fn riemannian_grad<O: Objective + ?Sized>(obj: &O, x: &FixedRankPoint) -> (f64, TangentVector) {
    let (f, g) = obj.value_grad(&x.to_matrix());
    (f, project_tangent(x, &(g * C64::from(2.0))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    #[default]
    Gradient,
    /// Polak-Ribière+ with projection transport.
    ConjugateGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmijoOptions {
    pub max_iters: usize,
    /// Stop once `(f_prev - f) / f_prev` drops below this.
    pub rel_tol: f64,
    /// Stop once the Riemannian gradient norm drops below this.
    pub grad_tol: f64,
    pub beta: f64,
    pub c: f64,
    pub max_backtracks: usize,
    pub direction: Direction,
}

impl Default for ArmijoOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            rel_tol: 1e-6,
            grad_tol: 1e-14,
            beta: 0.5,
            c: 1e-4,
            max_backtracks: 25,
            direction: Direction::Gradient,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    RelativeDecrease,
    Stationary,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub point: FixedRankPoint,
    pub value: f64,
    /// Objective at the start point and after every accepted step.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
    pub stop: StopReason,
}

/// Riemannian descent with Armijo backtracking and Barzilai-Borwein initial
/// steps. Every accepted step satisfies the sufficient-decrease condition,
/// so the trace is non-increasing.
pub fn armijo_minimize<O: Objective + ?Sized>(
    obj: &O,
    x0: FixedRankPoint,
    opts: &ArmijoOptions,
) -> Result<MinimizeResult> {
    if x0.shape() != obj.shape() {
        return Err(crate::error::shape(
            "armijo_minimize",
            format!("point {:?} vs objective {:?}", x0.shape(), obj.shape()),
        ));
    }
    let mut x = x0;
    let (mut f, mut grad) = riemannian_grad(obj, &x);
    if !f.is_finite() {
        return Err(Error::NonFinite("objective at start point"));
    }
    let mut trace = vec![f];
    let mut dir = grad.scale(-1.0);
    let mut step = x.s.norm() / grad.norm().max(f64::MIN_POSITIVE);
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;

    for _ in 0..opts.max_iters {
        let gnorm = grad.norm();
        if !gnorm.is_finite() {
            return Err(Error::NonFinite("Riemannian gradient"));
        }
        if gnorm <= opts.grad_tol || f == 0.0 {
            stop = StopReason::Stationary;
            break;
        }
        let mut slope = grad.inner(&dir);
        if slope >= 0.0 {
            dir = grad.scale(-1.0);
            slope = -gnorm * gnorm;
        }

        let mut t = step;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            if let Ok(cand) = retract(&x, &dir, t) {
                let fc = obj.value(&cand.to_matrix());
                if fc.is_finite() && fc <= f + opts.c * t * slope {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            t *= opts.beta;
        }
        let Some((x_new, f_new)) = accepted else {
            stop = StopReason::LineSearchFailed;
            break;
        };
        iterations += 1;

        let (f_chk, grad_new) = riemannian_grad(obj, &x_new);
        debug_assert!((f_chk - f_new).abs() <= 1e-9 * f_new.abs().max(1e-300) || f_new == 0.0);

        // Barzilai-Borwein step from ambient differences.
        let s_amb = x_new.to_matrix() - x.to_matrix();
        let y_amb = grad_new.to_ambient(&x_new) - grad.to_ambient(&x);
        let sy = real_inner(&s_amb, &y_amb);
        let ss = real_inner(&s_amb, &s_amb);

        dir = match opts.direction {
            Direction::Gradient => grad_new.scale(-1.0),
            Direction::ConjugateGradient => {
                let g_old = transport(&x, &x_new, &grad);
                let d_old = transport(&x, &x_new, &dir);
                let denom = grad.inner(&grad);
                let beta = if denom > 0.0 {
                    ((grad_new.inner(&grad_new) - grad_new.inner(&g_old)) / denom).max(0.0)
                } else {
                    0.0
                };
                grad_new.scale(-1.0).axpy(beta, &d_old)
            }
        };
        let dnorm = dir.norm().max(f64::MIN_POSITIVE);
        step = if sy > 0.0 {
            // BB gives a step along -grad; rescale to the chosen direction.
            (ss / sy) * grad_new.norm() / dnorm
        } else {
            2.0 * t
        };

        let rel = (f - f_new) / f.abs().max(f64::MIN_POSITIVE);
        x = x_new;
        f = f_new;
        grad = grad_new;
        trace.push(f);
        if rel < opts.rel_tol {
            stop = StopReason::RelativeDecrease;
            break;
        }
    }

    Ok(MinimizeResult {
        grad_norm: grad.norm(),
        point: x,
        value: f,
        trace,
        iterations,
        stop,
    })
}

/// First-order change predicted by a conjugate gradient for a step `dx`.
pub fn predicted_change(egrad: &CMat, dx: &CMat) -> f64 {
    2.0 * real_inner(egrad, dx)
}
