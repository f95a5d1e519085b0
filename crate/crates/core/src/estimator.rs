//! Two-timescale channel estimation on fixed-rank manifolds.
//!
//! The large timescale jointly fits `Ĝ` (rank P) and `Ĥ_kc` (rank Q) from
//! the pilots of one refraction-side UE by alternating manifold descent.
//! Every small timescale then fits each `Ĥ_k` (rank Q) with `Ĝ` held fixed.
//! Both fits minimize a squared residual plus an ℓ1 penalty on the angular
//! coefficients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::geometry::{Dictionaries, Side};
use crate::linalg::{frob2, mul, mul_ah, mul_bh, CMat, C64, ZERO};
use crate::manifold::{armijo_minimize, ArmijoOptions, FixedRankPoint, Objective, StopReason};
use crate::signal::{check_epsilon, PhaseSchedule, PilotSchedule, ReceivedBlock};

/// Subgradient threshold for the ℓ1 term.
pub const SIGN_EPS: f64 = 1e-12;

/// `Y_ij = λ_ij/|λ_ij|` for `λ = A_leftᴴ X A_right`, zero where `|λ_ij| < 1e-12`.
pub fn sign_matrix(x: &CMat, a_left: &CMat, a_right: &CMat) -> CMat {
    mul(&mul_ah(a_left, x), a_right).map(sign)
}

fn sign(z: C64) -> C64 {
    let n = z.norm();
    if n < SIGN_EPS {
        ZERO
    } else {
        z / n
    }
}

/// `‖vec(A_leftᴴ X A_right)‖₁`.
pub fn l1_norm(x: &CMat, a_left: &CMat, a_right: &CMat) -> f64 {
    mul(&mul_ah(a_left, x), a_right)
        .iter()
        .map(|z| z.norm())
        .sum()
}

/// ℓ1 term and its conjugate gradient `(υ/2)·A_left·Y·A_rightᴴ`.
#[derive(Debug, Clone)]
struct L1Penalty<'a> {
    weight: f64,
    a_left: &'a CMat,
    a_right: &'a CMat,
}

impl L1Penalty<'_> {
    fn value(&self, x: &CMat) -> f64 {
        if self.weight == 0.0 {
            0.0
        } else {
            self.weight * l1_norm(x, self.a_left, self.a_right)
        }
    }

    fn value_grad(&self, x: &CMat) -> (f64, CMat) {
        if self.weight == 0.0 {
            return (0.0, CMat::zeros(x.nrows(), x.ncols()));
        }
        let lam = mul(&mul_ah(self.a_left, x), self.a_right);
        let v = self.weight * lam.iter().map(|z| z.norm()).sum::<f64>();
        let y = lam.map(sign);
        let g = mul_bh(&mul(self.a_left, &y), self.a_right) * C64::from(self.weight / 2.0);
        (v, g)
    }
}

/// Pilot measurements of one UE arranged for batched evaluation of the
/// surface map `H ↦ [Φ̂_t·H·s_t]_t`.
#[derive(Debug, Clone)]
pub struct UplinkOperator {
    pub side: Side,
    pub ue_index: usize,
    gain: f64,
    /// Layer phases, one column per pilot (M × T).
    p1: CMat,
    p2: CMat,
    l: CMat,
    /// Pilots as rows (T × N_UE).
    s: CMat,
    /// Received vectors as columns (N_BS × T).
    r: CMat,
}

impl UplinkOperator {
    pub fn new(
        received: &ReceivedBlock,
        schedule: &PhaseSchedule,
        pilots: &PilotSchedule,
        l: &CMat,
        epsilon: f64,
    ) -> Result<Self> {
        check_epsilon(epsilon)?;
        let t = pilots.len();
        if received.r.nrows() != t || schedule.len() < t {
            return Err(shape(
                "UplinkOperator",
                format!(
                    "{} received rows, {} phase rows, {t} pilots",
                    received.r.nrows(),
                    schedule.len()
                ),
            ));
        }
        if schedule.phi1.ncols() != l.nrows() || l.nrows() != l.ncols() {
            return Err(shape(
                "UplinkOperator",
                format!(
                    "phases of width {} vs L {:?}",
                    schedule.phi1.ncols(),
                    l.shape()
                ),
            ));
        }
        let gain = match received.side {
            Side::Fle => epsilon.sqrt(),
            Side::Fra => (1.0 - epsilon).sqrt(),
        };
        Ok(Self {
            side: received.side,
            ue_index: received.ue_index,
            gain,
            p1: schedule.phi1.rows(0, t).transpose(),
            p2: schedule.phi2.rows(0, t).transpose(),
            l: l.clone(),
            s: pilots.s.clone(),
            r: received.r.transpose(),
        })
    }

    pub fn pilots(&self) -> usize {
        self.s.nrows()
    }

    pub fn m(&self) -> usize {
        self.l.nrows()
    }

    pub fn n_ue(&self) -> usize {
        self.s.ncols()
    }

    pub fn n_bs(&self) -> usize {
        self.r.nrows()
    }

    /// Total received energy `Σ_t ‖r[t]‖²`.
    pub fn received_energy(&self) -> f64 {
        frob2(&self.r)
    }

    /// Columns `Φ̂_t·H·s_t` (M × T).
    pub fn surface_forward(&self, h: &CMat) -> CMat {
        let mut x = mul(h, &self.s.transpose());
        if self.side == Side::Fra {
            x.component_mul_assign(&self.p2);
            x = mul(&self.l, &x);
        }
        x.component_mul_assign(&self.p1);
        x * C64::from(self.gain)
    }

    /// Adjoint of [`Self::surface_forward`]: `Σ_t Φ̂_tᴴ·u_t·s_tᴴ`.
    pub fn surface_adjoint(&self, u: &CMat) -> CMat {
        let mut x = u.component_mul(&self.p1.map(|z| z.conj()));
        if self.side == Side::Fra {
            x = mul_ah(&self.l, &x);
            x.component_mul_assign(&self.p2.map(|z| z.conj()));
        }
        mul(&x, &self.s.map(|z| z.conj())) * C64::from(self.gain)
    }

    /// Residual `r[t] − Ĝ·Φ̂_t·Ĥ·s_t` as columns.
    pub fn residual(&self, g: &CMat, h: &CMat) -> CMat {
        &self.r - mul(g, &self.surface_forward(h))
    }

    fn check_g(&self, g: &CMat) -> Result<()> {
        if g.shape() != (self.n_bs(), self.m()) {
            return Err(shape("estimator", format!("Ĝ {:?}", g.shape())));
        }
        Ok(())
    }

    fn check_h(&self, h: &CMat) -> Result<()> {
        if h.shape() != (self.m(), self.n_ue()) {
            return Err(shape("estimator", format!("Ĥ {:?}", h.shape())));
        }
        Ok(())
    }
}

/// `Ĝ`-subproblem with `Ĥ` fixed; uses the Gram form for the gradient.
pub struct GStep<'a> {
    y: CMat,
    gram: CMat,
    cross: CMat,
    r: &'a CMat,
    penalty: L1Penalty<'a>,
}

impl<'a> GStep<'a> {
    pub fn new(op: &'a UplinkOperator, h: &CMat, upsilon_g: f64, dicts: &'a Dictionaries) -> Self {
        let y = op.surface_forward(h);
        let gram = mul_bh(&y, &y);
        let cross = mul_bh(&op.r, &y);
        Self {
            y,
            gram,
            cross,
            r: &op.r,
            penalty: L1Penalty {
                weight: upsilon_g,
                a_left: &dicts.a_bs,
                a_right: &dicts.a_i,
            },
        }
    }
}

impl Objective for GStep<'_> {
    fn shape(&self) -> (usize, usize) {
        (self.r.nrows(), self.y.nrows())
    }

    fn value(&self, g: &CMat) -> f64 {
        frob2(&(self.r - mul(g, &self.y))) + self.penalty.value(g)
    }

    fn value_grad(&self, g: &CMat) -> (f64, CMat) {
        let (pv, pg) = self.penalty.value_grad(g);
        let grad = mul(g, &self.gram) - &self.cross + pg;
        (frob2(&(self.r - mul(g, &self.y))) + pv, grad)
    }
}

/// `Ĥ`-subproblem with `Ĝ` fixed, shared by both timescales.
pub struct HStep<'a> {
    op: &'a UplinkOperator,
    g: &'a CMat,
    penalty: L1Penalty<'a>,
}

impl<'a> HStep<'a> {
    pub fn new(
        op: &'a UplinkOperator,
        g: &'a CMat,
        upsilon_h: f64,
        dicts: &'a Dictionaries,
    ) -> Self {
        Self {
            op,
            g,
            penalty: L1Penalty {
                weight: upsilon_h,
                a_left: &dicts.a_i,
                a_right: &dicts.a_ue,
            },
        }
    }
}

impl Objective for HStep<'_> {
    fn shape(&self) -> (usize, usize) {
        (self.op.m(), self.op.n_ue())
    }

    fn value(&self, h: &CMat) -> f64 {
        frob2(&self.op.residual(self.g, h)) + self.penalty.value(h)
    }

    fn value_grad(&self, h: &CMat) -> (f64, CMat) {
        let e = self.op.residual(self.g, h);
        let (pv, pg) = self.penalty.value_grad(h);
        let grad = pg - self.op.surface_adjoint(&mul_ah(self.g, &e));
        (frob2(&e) + pv, grad)
    }
}

/// Large-timescale objective: residual plus both ℓ1 terms.
pub fn objective_large(
    op: &UplinkOperator,
    g: &CMat,
    h: &CMat,
    upsilon_g: f64,
    upsilon_h: f64,
    dicts: &Dictionaries,
) -> Result<f64> {
    op.check_g(g)?;
    op.check_h(h)?;
    let mut f = frob2(&op.residual(g, h));
    if upsilon_g != 0.0 {
        f += upsilon_g * l1_norm(g, &dicts.a_bs, &dicts.a_i);
    }
    if upsilon_h != 0.0 {
        f += upsilon_h * l1_norm(h, &dicts.a_i, &dicts.a_ue);
    }
    Ok(f)
}

/// Conjugate gradient of the large-timescale objective in `Ĝ`.
pub fn egrad_g_large(
    op: &UplinkOperator,
    g: &CMat,
    h: &CMat,
    upsilon_g: f64,
    dicts: &Dictionaries,
) -> Result<CMat> {
    op.check_g(g)?;
    op.check_h(h)?;
    Ok(GStep::new(op, h, upsilon_g, dicts).value_grad(g).1)
}

/// Conjugate gradient of the large-timescale objective in `Ĥ`.
pub fn egrad_h_large(
    op: &UplinkOperator,
    g: &CMat,
    h: &CMat,
    upsilon_h: f64,
    dicts: &Dictionaries,
) -> Result<CMat> {
    op.check_g(g)?;
    op.check_h(h)?;
    if op.side != Side::Fra {
        return Err(Error::ReflectionSideSelected(op.ue_index));
    }
    Ok(HStep::new(op, g, upsilon_h, dicts).value_grad(h).1)
}

/// Conjugate gradient of the small-timescale objective for either side.
pub fn egrad_h_small(
    op: &UplinkOperator,
    g: &CMat,
    h: &CMat,
    upsilon_h: f64,
    dicts: &Dictionaries,
) -> Result<CMat> {
    op.check_g(g)?;
    op.check_h(h)?;
    Ok(HStep::new(op, g, upsilon_h, dicts).value_grad(h).1)
}

/// Noise-scaled ℓ1 weight `σ²·√ln(size)`.
pub fn default_upsilon(sigma2: f64, dictionary_size: usize) -> f64 {
    sigma2 * (dictionary_size.max(1) as f64).ln().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub t_g: usize,
    pub t_h: usize,
    pub tau: usize,
    pub p: usize,
    pub q: usize,
    /// `None` selects [`default_upsilon`].
    pub upsilon_g: Option<f64>,
    pub upsilon_h: Option<f64>,
    /// Zero-based UE used in the large timescale; `None` picks the first
    /// refraction-side UE.
    pub k_c: Option<usize>,
    /// Per-block descent inside each alternation.
    pub inner: ArmijoOptions,
    /// Descent for the small-timescale fits.
    pub small: ArmijoOptions,
    pub outer_max_iters: usize,
    pub outer_rel_tol: f64,
    /// Rescale `(Ĝ/a, a·Ĥ)` after each alternation to minimize the ℓ1 terms.
    pub rebalance: bool,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            t_g: 900,
            t_h: 75,
            tau: 4,
            p: 5,
            q: 5,
            upsilon_g: None,
            upsilon_h: None,
            k_c: None,
            inner: ArmijoOptions {
                max_iters: 20,
                ..Default::default()
            },
            small: ArmijoOptions::default(),
            outer_max_iters: 50,
            outer_rel_tol: 1e-4,
            rebalance: true,
        }
    }
}

impl EstimationConfig {
    pub fn upsilon_g(&self, sigma2: f64, dicts: &Dictionaries) -> f64 {
        self.upsilon_g
            .unwrap_or_else(|| default_upsilon(sigma2, dicts.a_bs.ncols() * dicts.a_i.ncols()))
    }

    pub fn upsilon_h(&self, sigma2: f64, dicts: &Dictionaries) -> f64 {
        self.upsilon_h
            .unwrap_or_else(|| default_upsilon(sigma2, dicts.a_i.ncols() * dicts.a_ue.ncols()))
    }

    /// Resolves `k_c` against the UE sides.
    pub fn selected_ue(&self, sides: &[Side]) -> Result<usize> {
        match self.k_c {
            Some(k) if k >= sides.len() => Err(Error::InvalidArgument(format!(
                "k_c = {k} out of range for {} UEs",
                sides.len()
            ))),
            Some(k) if sides[k] == Side::Fle => Err(Error::ReflectionSideSelected(k)),
            Some(k) => Ok(k),
            None => sides
                .iter()
                .position(|&s| s == Side::Fra)
                .ok_or_else(|| Error::InvalidArgument("no refraction-side UE available".into())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LargeEstimate {
    pub g_hat: FixedRankPoint,
    pub h_hat: FixedRankPoint,
    /// Full objective at the start and after every block update.
    pub trace: Vec<f64>,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
}

/// Alternating fixed-rank fit of `(Ĝ, Ĥ_kc)` from a refraction-side UE.
pub fn estimate_large_timescale<R: Rng + ?Sized>(
    op: &UplinkOperator,
    dicts: &Dictionaries,
    cfg: &EstimationConfig,
    upsilon_g: f64,
    upsilon_h: f64,
    rng: &mut R,
) -> Result<LargeEstimate> {
    if op.side != Side::Fra {
        return Err(Error::ReflectionSideSelected(op.ue_index));
    }
    if upsilon_g < 0.0 || upsilon_h < 0.0 {
        return Err(Error::InvalidArgument("ℓ1 weights must be >= 0".into()));
    }
    let mut g = FixedRankPoint::random(rng, op.n_bs(), op.m(), cfg.p)?;
    let mut h = FixedRankPoint::random(rng, op.m(), op.n_ue(), cfg.q)?;
    let full = |g: &FixedRankPoint, h: &FixedRankPoint| {
        objective_large(
            op,
            &g.to_matrix(),
            &h.to_matrix(),
            upsilon_g,
            upsilon_h,
            dicts,
        )
    };
    let mut f = full(&g, &h)?;
    let mut trace = vec![f];
    let mut inner_iterations = 0;
    let mut outer_iterations = 0;

    for _ in 0..cfg.outer_max_iters {
        let f_start = f;
        let hm = h.to_matrix();
        let g_res = armijo_minimize(&GStep::new(op, &hm, upsilon_g, dicts), g, &cfg.inner)?;
        g = g_res.point;
        inner_iterations += g_res.iterations;
        f = full(&g, &h)?;
        trace.push(f);

        let gm = g.to_matrix();
        let h_res = armijo_minimize(&HStep::new(op, &gm, upsilon_h, dicts), h, &cfg.inner)?;
        h = h_res.point;
        inner_iterations += h_res.iterations;

        f = full(&g, &h)?;
        if cfg.rebalance {
            let a = gauge_scale(&g, &h, upsilon_g, upsilon_h, dicts);
            if a.is_finite() && a > 0.0 {
                let (gb, hb) = (g.scaled(1.0 / a), h.scaled(a));
                let fb = full(&gb, &hb)?;
                // Exact in theory; guards against rounding at the noise floor.
                if fb <= f {
                    (g, h, f) = (gb, hb, fb);
                }
            }
        }
        trace.push(f);
        outer_iterations += 1;

        if !f.is_finite() {
            return Err(Error::NonFinite("large-timescale objective"));
        }
        let rel = (f_start - f) / f_start.abs().max(f64::MIN_POSITIVE);
        if f == 0.0 || rel < cfg.outer_rel_tol {
            break;
        }
    }
    Ok(LargeEstimate {
        g_hat: g,
        h_hat: h,
        trace,
        outer_iterations,
        inner_iterations,
    })
}

/// Positive `a` minimizing `υ_g‖λ_G‖₁/a + υ_h·a‖λ_H‖₁`; equalizes the
/// Frobenius norms when neither term is active.
fn gauge_scale(
    g: &FixedRankPoint,
    h: &FixedRankPoint,
    upsilon_g: f64,
    upsilon_h: f64,
    dicts: &Dictionaries,
) -> f64 {
    let (gm, hm) = (g.to_matrix(), h.to_matrix());
    if upsilon_g > 0.0 && upsilon_h > 0.0 {
        let lg = l1_norm(&gm, &dicts.a_bs, &dicts.a_i);
        let lh = l1_norm(&hm, &dicts.a_i, &dicts.a_ue);
        (upsilon_g * lg / (upsilon_h * lh)).sqrt()
    } else if upsilon_g == 0.0 && upsilon_h == 0.0 {
        (g.s.norm() / h.s.norm()).sqrt()
    } else {
        1.0
    }
}

#[derive(Debug, Clone)]
pub struct SmallEstimate {
    pub h_hat: FixedRankPoint,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub stop: StopReason,
}

/// Rank-Q fit of `Ĥ_k` with `Ĝ` fixed; valid for both sides.
pub fn estimate_small_timescale<R: Rng + ?Sized>(
    op: &UplinkOperator,
    g_hat: &CMat,
    dicts: &Dictionaries,
    cfg: &EstimationConfig,
    upsilon_h: f64,
    rng: &mut R,
) -> Result<SmallEstimate> {
    op.check_g(g_hat)?;
    let x0 = FixedRankPoint::random(rng, op.m(), op.n_ue(), cfg.q)?;
    let res = armijo_minimize(&HStep::new(op, g_hat, upsilon_h, dicts), x0, &cfg.small)?;
    Ok(SmallEstimate {
        h_hat: res.point,
        trace: res.trace,
        iterations: res.iterations,
        stop: res.stop,
    })
}

/// `‖Hᵀ⊗G − Ĥᵀ⊗Ĝ‖²/‖Hᵀ⊗G‖²`, accumulated one `N_BS × M` block at a time.
pub fn nmse_kron(g: &CMat, h: &CMat, g_hat: &CMat, h_hat: &CMat) -> Result<f64> {
    if g.shape() != g_hat.shape() || h.shape() != h_hat.shape() || g.ncols() != h.nrows() {
        return Err(shape(
            "nmse_kron",
            format!(
                "G {:?}, Ĝ {:?}, H {:?}, Ĥ {:?}",
                g.shape(),
                g_hat.shape(),
                h.shape(),
                h_hat.shape()
            ),
        ));
    }
    let den = frob2(h) * frob2(g);
    if den == 0.0 {
        return Err(Error::ZeroChannel);
    }
    let mut num = 0.0;
    for (hij, hhij) in h.iter().zip(h_hat.iter()) {
        num += g
            .iter()
            .zip(g_hat.iter())
            .map(|(a, b)| (hij * a - hhij * b).norm_sqr())
            .sum::<f64>();
    }
    Ok(num / den)
}

/// Per-UE NMSE values and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmseReport {
    pub per_ue: Vec<f64>,
    pub nmse_fra: Option<f64>,
    pub nmse_avg: f64,
}

pub fn nmse_avg(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("NMSE average over zero UEs".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// `T_G + τ·K·T_H`.
pub fn total_overhead(t_g: usize, t_h: usize, tau: usize, k: usize) -> usize {
    t_g + tau * k * t_h
}

/// Pilot count of per-UE least squares on the full cascaded channels.
pub fn ls_overhead_bound(k_fle: usize, k_fra: usize, m: usize, n_ue: usize, tau: usize) -> usize {
    tau * (k_fle * m * n_ue + k_fra * m * m * n_ue)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_dictionaries, ArrayGeometry, BiosGrid, DictionaryConfig};
    use crate::linalg::{cn_matrix, kron};
    use crate::signal::{random_phase_schedule, random_pilots, simulate_uplink};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    struct Toy {
        g: CMat,
        h: CMat,
        op: UplinkOperator,
        dicts: Dictionaries,
    }

    fn toy(seed: u64, side: Side, t: usize, pnr_db: f64) -> Toy {
        let geo = ArrayGeometry {
            n_bs: 4,
            n_ue: 2,
            m_x: 2,
            m_y: 2,
            ..Default::default()
        };
        let mut r = rng(seed);
        let g = cn_matrix(&mut r, 4, 4, 1.0);
        let h = cn_matrix(&mut r, 4, 2, 1.0);
        let l = crate::geometry::near_field_l(&geo).unwrap();
        let sched = random_phase_schedule(&mut r, t, 4);
        let pilots = random_pilots(&mut r, t, 2, pnr_db);
        let rb = simulate_uplink(&g, &h, &l, &sched, &pilots, 0.5, side, 0, &mut r).unwrap();
        let op = UplinkOperator::new(&rb, &sched, &pilots, &l, 0.5).unwrap();
        let cfg = DictionaryConfig {
            bios_grid: BiosGrid::Full,
            ..DictionaryConfig::matched(&geo)
        };
        let dicts = build_dictionaries(&cfg, &geo).unwrap();
        Toy { g, h, op, dicts }
    }

    fn fd_check<F: Fn(&CMat) -> f64>(f: F, x: &CMat, grad: &CMat, seed: u64) -> f64 {
        let d = cn_matrix(&mut rng(seed), x.nrows(), x.ncols(), 1.0);
        let h = 1e-6;
        let fd = (f(&(x + &d * C64::from(h))) - f(&(x - &d * C64::from(h)))) / (2.0 * h);
        let an = 2.0 * crate::linalg::real_inner(grad, &d);
        (fd - an).abs() / fd.abs().max(an.abs())
    }

    #[test]
    fn sign_matrix_examples() {
        let eye = CMat::identity(3, 3);
        let x = CMat::from_element(3, 3, C64::from(2.0));
        assert_eq!(
            sign_matrix(&x, &eye, &eye),
            CMat::from_element(3, 3, C64::from(1.0))
        );
        assert_eq!(
            sign_matrix(&CMat::zeros(3, 3), &eye, &eye),
            CMat::zeros(3, 3)
        );
        let y = sign_matrix(&cn_matrix(&mut rng(1), 3, 3, 1.0), &eye, &eye);
        assert!(y
            .iter()
            .all(|z| (z.norm() - 1.0).abs() < 1e-12 || z.norm() == 0.0));
    }

    #[test]
    fn forward_matches_direct_products() {
        for side in [Side::Fle, Side::Fra] {
            let t = toy(2, side, 6, 300.0);
            let fwd = mul(&t.g, &t.op.surface_forward(&t.h));
            assert!((fwd - &t.op.r).norm() < 1e-6 * t.op.r.norm());
        }
    }

    #[test]
    fn surface_adjoint_identity() {
        for side in [Side::Fle, Side::Fra] {
            let t = toy(3, side, 7, 10.0);
            let mut r = rng(4);
            let x = cn_matrix(&mut r, 4, 2, 1.0);
            let y = cn_matrix(&mut r, 4, 7, 1.0);
            let lhs = crate::linalg::inner(&y, &t.op.surface_forward(&x));
            let rhs = crate::linalg::inner(&t.op.surface_adjoint(&y), &x);
            assert!((lhs - rhs).norm() < 1e-12 * lhs.norm());
        }
    }

    #[test]
    fn objective_examples() {
        let t = toy(5, Side::Fra, 8, f64::INFINITY);
        assert!(
            objective_large(&t.op, &t.g, &t.h, 0.0, 0.0, &t.dicts).unwrap()
                < 1e-26 * t.op.received_energy()
        );
        let zg = CMat::zeros(4, 4);
        let zh = CMat::zeros(4, 2);
        let f0 = objective_large(&t.op, &zg, &zh, 0.0, 0.0, &t.dicts).unwrap();
        assert!((f0 - t.op.received_energy()).abs() < 1e-12 * f0);
        let a = 1.7;
        let base = frob2(&t.op.residual(&t.g, &t.h));
        let gauged = frob2(
            &t.op
                .residual(&(&t.g / C64::from(a)), &(&t.h * C64::from(a))),
        );
        assert!((base - gauged).abs() < 1e-20);
        assert!(objective_large(&t.op, &zh, &zh, 0.0, 0.0, &t.dicts).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let t = toy(6, Side::Fra, 10, 10.0);
        let mut r = rng(7);
        let g = cn_matrix(&mut r, 4, 4, 1.0);
        let h = cn_matrix(&mut r, 4, 2, 1.0);
        let (ug, uh) = (0.3, 0.2);
        let grad_g = egrad_g_large(&t.op, &g, &h, ug, &t.dicts).unwrap();
        let rel = fd_check(
            |x| objective_large(&t.op, x, &h, ug, uh, &t.dicts).unwrap(),
            &g,
            &grad_g,
            8,
        );
        assert!(rel < 1e-5, "G: {rel}");
        let grad_h = egrad_h_large(&t.op, &g, &h, uh, &t.dicts).unwrap();
        let rel = fd_check(
            |x| objective_large(&t.op, &g, x, ug, uh, &t.dicts).unwrap(),
            &h,
            &grad_h,
            9,
        );
        assert!(rel < 1e-5, "H: {rel}");

        let fle = toy(10, Side::Fle, 10, 10.0);
        let grad = egrad_h_small(&fle.op, &g, &h, uh, &fle.dicts).unwrap();
        let obj = HStep::new(&fle.op, &g, uh, &fle.dicts);
        let rel = fd_check(|x| obj.value(x), &h, &grad, 11);
        assert!(rel < 1e-5, "small: {rel}");
    }

    #[test]
    fn gradients_vanish_at_noiseless_truth() {
        let t = toy(12, Side::Fra, 10, 400.0);
        let scale = t.g.norm() * t.h.norm();
        assert!(
            egrad_g_large(&t.op, &t.g, &t.h, 0.0, &t.dicts)
                .unwrap()
                .norm()
                < 1e-12 * scale
        );
        assert!(
            egrad_h_large(&t.op, &t.g, &t.h, 0.0, &t.dicts)
                .unwrap()
                .norm()
                < 1e-12 * scale
        );
        assert!(
            egrad_h_small(&t.op, &t.g, &t.h, 0.0, &t.dicts)
                .unwrap()
                .norm()
                < 1e-12 * scale
        );
    }

    #[test]
    fn small_gradient_specializes_large_on_fra() {
        let t = toy(13, Side::Fra, 9, 10.0);
        let mut r = rng(14);
        let g = cn_matrix(&mut r, 4, 4, 1.0);
        let h = cn_matrix(&mut r, 4, 2, 1.0);
        let a = egrad_h_large(&t.op, &g, &h, 0.1, &t.dicts).unwrap();
        let b = egrad_h_small(&t.op, &g, &h, 0.1, &t.dicts).unwrap();
        assert!((a - b).norm() < 1e-14);
    }

    #[test]
    fn gradient_scales_linearly_with_received() {
        let t = toy(15, Side::Fra, 9, 10.0);
        let mut scaled = t.op.clone();
        scaled.r *= C64::from(3.0);
        let zero = CMat::zeros(4, 4);
        let h = cn_matrix(&mut rng(16), 4, 2, 1.0);
        let a = egrad_g_large(&t.op, &zero, &h, 0.0, &t.dicts).unwrap();
        let b = egrad_g_large(&scaled, &zero, &h, 0.0, &t.dicts).unwrap();
        assert!((&a * C64::from(3.0) - b).norm() < 1e-12 * a.norm());
    }

    #[test]
    fn large_timescale_rejects_reflection_side() {
        let t = toy(17, Side::Fle, 10, 10.0);
        let cfg = EstimationConfig {
            p: 1,
            q: 1,
            ..Default::default()
        };
        assert!(matches!(
            estimate_large_timescale(&t.op, &t.dicts, &cfg, 0.0, 0.0, &mut rng(1)),
            Err(Error::ReflectionSideSelected(0))
        ));
        let cfg = EstimationConfig {
            k_c: Some(0),
            ..Default::default()
        };
        assert!(cfg.selected_ue(&[Side::Fle, Side::Fra]).is_err());
        let cfg = EstimationConfig::default();
        assert_eq!(
            cfg.selected_ue(&[Side::Fle, Side::Fle, Side::Fra]).unwrap(),
            2
        );
        assert!(cfg.selected_ue(&[Side::Fle]).is_err());
    }

    #[test]
    fn nmse_examples() {
        let mut r = rng(18);
        let g = cn_matrix(&mut r, 3, 4, 1.0);
        let h = cn_matrix(&mut r, 4, 2, 1.0);
        assert!(nmse_kron(&g, &h, &g, &h).unwrap() < 1e-30);
        let half = nmse_kron(&g, &h, &(&g / C64::from(2.0)), &(&h * C64::from(2.0))).unwrap();
        assert!(half < 1e-28);
        assert!((nmse_kron(&g, &h, &CMat::zeros(3, 4), &h).unwrap() - 1.0).abs() < 1e-14);
        assert!((nmse_kron(&g, &h, &g, &CMat::zeros(4, 2)).unwrap() - 1.0).abs() < 1e-14);
        assert!(matches!(
            nmse_kron(&CMat::zeros(3, 4), &h, &g, &h),
            Err(Error::ZeroChannel)
        ));

        let gh = cn_matrix(&mut r, 3, 4, 1.0);
        let hh = cn_matrix(&mut r, 4, 2, 1.0);
        let direct = {
            let a = kron(&h.transpose(), &g);
            let b = kron(&hh.transpose(), &gh);
            frob2(&(&a - b)) / frob2(&a)
        };
        let expansion = {
            let cross = crate::linalg::inner(&h, &hh) * crate::linalg::inner(&g, &gh);
            (frob2(&h) * frob2(&g) + frob2(&hh) * frob2(&gh) - 2.0 * cross.re)
                / (frob2(&h) * frob2(&g))
        };
        let blockwise = nmse_kron(&g, &h, &gh, &hh).unwrap();
        assert!((blockwise - direct).abs() < 1e-12 * direct);
        assert!((blockwise - expansion).abs() < 1e-12 * direct);
    }

    #[test]
    fn nmse_average_examples() {
        assert_eq!(nmse_avg(&[0.0; 5]).unwrap(), 0.0);
        assert!((nmse_avg(&[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap() - 0.2).abs() < 1e-15);
        assert!(nmse_avg(&[]).is_err());
    }

    #[test]
    fn overhead_examples() {
        assert_eq!(total_overhead(900, 75, 4, 5), 2400);
        assert_eq!(total_overhead(0, 30, 4, 5), 600);
        assert_eq!(total_overhead(300, 0, 4, 5), 300);
        assert_eq!(ls_overhead_bound(2, 3, 49, 8, 4), 233_632);
        assert_eq!(ls_overhead_bound(1, 0, 49, 8, 1), 49 * 8);
        assert_eq!(ls_overhead_bound(0, 1, 49, 8, 1), 49 * 49 * 8);
    }

    #[test]
    fn upsilon_default() {
        assert_eq!(default_upsilon(0.0, 392), 0.0);
        assert!((default_upsilon(0.01, 392) - 0.01 * 392f64.ln().sqrt()).abs() < 1e-15);
    }
}
