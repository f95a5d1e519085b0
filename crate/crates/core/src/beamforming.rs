//! Downlink sum-rate maximization through the WMMSE reformulation: closed
//! form combiners and weights, a power-normalized precoder, and cyclic
//! coordinate descent on the unit-modulus phases of both surface layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::geometry::Side;
use crate::linalg::{cn_matrix, hpd_inverse, hpd_log_det, unit_phase_vector, CMat, CVec, C64};
use crate::signal::{check_epsilon, effective_phase_downlink, surface_phase_downlink, Surface};

/// Regularization added to a singular MSE matrix before inversion.
pub const PSI_REG: f64 = 1e-12;

/// `H_e,k = H_kᴴ·Φ̂_d·Gᴴ` for a surface with power split `ε`.
pub fn effective_channel(
    h: &CMat,
    phi_d1: &CVec,
    phi_d2: &CVec,
    l: &CMat,
    g: &CMat,
    epsilon: f64,
    side: Side,
) -> Result<CMat> {
    check_epsilon(epsilon)?;
    check_link(g, h, l)?;
    let phi = effective_phase_downlink(phi_d1, phi_d2, l, epsilon, side)?;
    Ok(h.adjoint() * phi * g.adjoint())
}

fn check_link(g: &CMat, h: &CMat, l: &CMat) -> Result<()> {
    if g.ncols() != l.nrows() || h.nrows() != l.nrows() {
        return Err(shape(
            "effective_channel",
            format!("G {:?}, H {:?}, L {:?}", g.shape(), h.shape(), l.shape()),
        ));
    }
    Ok(())
}

/// Channels and surface seen by the downlink optimizer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DownlinkSystem {
    pub g: CMat,
    pub h: Vec<CMat>,
    pub sides: Vec<Side>,
    pub l: CMat,
    pub surface: Surface,
    /// Downlink noise variance `σ_d²`.
    pub sigma2: f64,
}

impl DownlinkSystem {
    pub fn new(
        g: CMat,
        h: Vec<CMat>,
        sides: Vec<Side>,
        l: CMat,
        surface: Surface,
        sigma2: f64,
    ) -> Result<Self> {
        if h.is_empty() || h.len() != sides.len() {
            return Err(Error::InvalidArgument(format!(
                "{} UE channels for {} sides",
                h.len(),
                sides.len()
            )));
        }
        for hk in &h {
            check_link(&g, hk, &l)?;
            if hk.ncols() != h[0].ncols() {
                return Err(shape("DownlinkSystem", "UE antenna counts differ"));
            }
        }
        if !(sigma2 > 0.0) {
            return Err(Error::InvalidArgument(
                "downlink noise variance must be > 0".into(),
            ));
        }
        Ok(Self {
            g,
            h,
            sides,
            l,
            surface,
            sigma2,
        })
    }

    pub fn k(&self) -> usize {
        self.h.len()
    }

    pub fn m(&self) -> usize {
        self.l.nrows()
    }

    pub fn n_bs(&self) -> usize {
        self.g.nrows()
    }

    pub fn n_ue(&self) -> usize {
        self.h[0].ncols()
    }

    /// Effective channels of every UE under the given phases.
    pub fn effective_channels(&self, phi_d1: &CVec, phi_d2: &CVec) -> Vec<CMat> {
        let gh = self.g.adjoint();
        self.h
            .iter()
            .zip(&self.sides)
            .map(|(hk, &side)| {
                hk.adjoint()
                    * surface_phase_downlink(&self.surface, phi_d1, phi_d2, &self.l, side)
                    * &gh
            })
            .collect()
    }

    /// `k`-th block of `H_Φ` (M × N_UE): the channel behind layer 1.
    fn h_phi_block(&self, k: usize, phi_d2: &CVec) -> CMat {
        let gain = C64::from(self.surface.gain(self.sides[k]));
        match self.sides[k] {
            Side::Fle => &self.h[k] * gain,
            Side::Fra => {
                let d2h = crate::linalg::scale_rows(&phi_d2.map(|z| z.conj()), &self.h[k]);
                &self.l * d2h * gain
            }
        }
    }
}

/// Precoder, combiners, weights and phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamformerState {
    /// `N_BS × (N_s·K)`, block `k` holds columns `k·N_s .. (k+1)·N_s`.
    pub f: CMat,
    pub w: Vec<CMat>,
    pub psi: Vec<CMat>,
    pub phi_d1: CVec,
    pub phi_d2: CVec,
    pub n_s: usize,
}

impl BeamformerState {
    /// Random phases and a random unit-power precoder; `W = 0`, `Ψ = I`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, sys: &DownlinkSystem, n_s: usize) -> Self {
        let k = sys.k();
        let mut f = cn_matrix(rng, sys.n_bs(), n_s * k, 1.0);
        let nf = f.norm();
        f /= C64::from(nf);
        let phi_d1 = unit_phase_vector(rng, sys.m());
        let phi_d2 = if sys.surface.optimizes_layer2() {
            unit_phase_vector(rng, sys.m())
        } else {
            CVec::from_element(sys.m(), C64::from(1.0))
        };
        Self {
            f,
            w: vec![CMat::zeros(sys.n_ue(), n_s); k],
            psi: vec![CMat::identity(n_s, n_s); k],
            phi_d1,
            phi_d2,
            n_s,
        }
    }

    pub fn f_block(&self, k: usize) -> CMat {
        self.f.columns(k * self.n_s, self.n_s).into_owned()
    }

    pub fn power(&self) -> f64 {
        self.f.norm_squared()
    }
}

/// Interference-plus-noise covariance `Λ_k`.
fn interference(he_k: &CMat, state: &BeamformerState, k: usize, sigma2: f64) -> CMat {
    let n = he_k.nrows();
    let mut lam = CMat::identity(n, n) * C64::from(sigma2);
    for i in 0..state.f.ncols() / state.n_s {
        if i != k {
            let x = he_k * state.f_block(i);
            lam += &x * x.adjoint();
        }
    }
    lam
}

/// `E_k = (I − W_kᴴH_e,kF_k)(·)ᴴ + W_kᴴ Λ_k W_k`.
pub fn mse_matrix(he: &[CMat], state: &BeamformerState, k: usize, sigma2: f64) -> CMat {
    let n_s = state.n_s;
    let w = &state.w[k];
    let a = CMat::identity(n_s, n_s) - w.adjoint() * &he[k] * state.f_block(k);
    &a * a.adjoint() + w.adjoint() * interference(&he[k], state, k, sigma2) * w
}

/// `Σ_k Re tr(Ψ_k E_k) − ln det Ψ_k`.
pub fn wmmse_objective(he: &[CMat], state: &BeamformerState, sigma2: f64) -> f64 {
    (0..he.len())
        .map(|k| {
            let e = mse_matrix(he, state, k, sigma2);
            let tr = (&state.psi[k] * e).trace().re;
            tr - hpd_log_det(&state.psi[k]).unwrap_or(f64::NEG_INFINITY)
        })
        .sum()
}

/// Closed-form MMSE combiners followed by `Ψ_k = E_k⁻¹`.
pub fn update_w_psi(he: &[CMat], state: &mut BeamformerState, sigma2: f64) -> Result<()> {
    for k in 0..he.len() {
        let hf = &he[k] * state.f_block(k);
        let cov = interference(&he[k], state, k, sigma2) + &hf * hf.adjoint();
        let inv = hpd_inverse(&cov).ok_or(Error::NonFinite("receive covariance inverse"))?;
        state.w[k] = inv * hf;
    }
    for k in 0..he.len() {
        let e = mse_matrix(he, state, k, sigma2);
        state.psi[k] = match hpd_inverse(&e) {
            Some(p) if crate::linalg::is_finite(&p) => p,
            _ => {
                let n = e.nrows();
                hpd_inverse(&(e + CMat::identity(n, n) * C64::from(PSI_REG)))
                    .ok_or(Error::NonFinite("MSE matrix inverse"))?
            }
        };
    }
    Ok(())
}

/// Power-normalized precoder `F = ζ·F̃⁻¹H_eᴴWΨ`. The combiners are divided
/// by `ζ`, which keeps the WMMSE objective from increasing; the next
/// combiner update is unaffected by this rescaling.
pub fn update_f(he: &[CMat], state: &mut BeamformerState, sigma2: f64) -> Result<()> {
    let n_bs = state.f.nrows();
    let n_s = state.n_s;
    let mut ftilde = CMat::zeros(n_bs, n_bs);
    let mut rhs = CMat::zeros(n_bs, state.f.ncols());
    let mut tr = 0.0;
    for k in 0..he.len() {
        let hw = he[k].adjoint() * &state.w[k];
        let hwp = &hw * &state.psi[k];
        ftilde += &hwp * hw.adjoint();
        rhs.columns_mut(k * n_s, n_s).copy_from(&hwp);
        tr += (&state.psi[k] * state.w[k].adjoint() * &state.w[k])
            .trace()
            .re;
    }
    ftilde += CMat::identity(n_bs, n_bs) * C64::from(sigma2 * tr);
    let Some(inv) = hpd_inverse(&ftilde) else {
        return Ok(());
    };
    let fbar = inv * rhs;
    let norm = fbar.norm();
    if !(norm > 1e-300) || !norm.is_finite() {
        return Ok(());
    }
    state.f = fbar / C64::from(norm);
    for w in &mut state.w {
        *w *= C64::from(norm);
    }
    Ok(())
}

/// Quadratic form `f(φ_d1) = φᴴΞφ − 2Re(ρᴴφ) + const`.
pub fn build_xi_rho(sys: &DownlinkSystem, state: &BeamformerState) -> (CMat, CVec) {
    let m = sys.m();
    let mut hw = CMat::zeros(m, state.f.ncols());
    let n_s = state.n_s;
    for k in 0..sys.k() {
        hw.columns_mut(k * n_s, n_s)
            .copy_from(&(sys.h_phi_block(k, &state.phi_d2) * &state.w[k]));
    }
    let psi = crate::linalg::blkdiag(&state.psi);
    let gf = sys.g.adjoint() * &state.f;
    quadratic_form(&hw, &psi, &gf, &gf)
}

/// Same form in `φ_d2`, over the refraction-side UEs only. `None` when
/// there are none or the layer is not a free variable.
pub fn build_xi_rho_fra(sys: &DownlinkSystem, state: &BeamformerState) -> Option<(CMat, CVec)> {
    let fra: Vec<usize> = (0..sys.k())
        .filter(|&k| sys.sides[k] == Side::Fra)
        .collect();
    let gain = sys.surface.gain(Side::Fra);
    if fra.is_empty() || gain == 0.0 {
        return None;
    }
    let m = sys.m();
    let n_s = state.n_s;
    let mut hw = CMat::zeros(m, fra.len() * n_s);
    let mut f_fra = CMat::zeros(state.f.nrows(), fra.len() * n_s);
    let mut psi = Vec::with_capacity(fra.len());
    for (j, &k) in fra.iter().enumerate() {
        hw.columns_mut(j * n_s, n_s)
            .copy_from(&(&sys.h[k] * &state.w[k] * C64::from(gain)));
        f_fra.columns_mut(j * n_s, n_s).copy_from(&state.f_block(k));
        psi.push(state.psi[k].clone());
    }
    let psi = crate::linalg::blkdiag(&psi);
    // G' = G·Φ_d1ᴴ·L, so G'ᴴ = Lᴴ·Φ_d1·Gᴴ is what layer 2 sees.
    let gp_h = sys.l.adjoint() * crate::linalg::scale_rows(&state.phi_d1, &sys.g.adjoint());
    Some(quadratic_form(
        &hw,
        &psi,
        &(&gp_h * &state.f),
        &(&gp_h * f_fra),
    ))
}

/// `Ξ = (HW Ψ (HW)ᴴ) ∘ (X Xᴴ)ᵀ`, `ρ = diag(HW Ψ Yᴴ)` for `X = G'ᴴF`, `Y = G'ᴴF_sel`.
fn quadratic_form(hw: &CMat, psi: &CMat, x: &CMat, y: &CMat) -> (CMat, CVec) {
    let a = hw * psi * hw.adjoint();
    let b = x * x.adjoint();
    let xi = a.component_mul(&b.transpose());
    let hwp = hw * psi;
    let rho = CVec::from_fn(hw.nrows(), |m, _| {
        (0..hwp.ncols())
            .map(|j| hwp[(m, j)] * y[(m, j)].conj())
            .sum()
    });
    (xi, rho)
}

/// Minimizer of the single-coordinate restriction of `φᴴΞφ − 2Re(ρᴴφ)`.
/// Returns the previous entry when the numerator vanishes.
pub fn cd_update_phi(phi: &CVec, xi: &CMat, rho: &CVec, m: usize) -> C64 {
    let mut c = -rho[m];
    for j in 0..phi.len() {
        if j != m {
            c += xi[(m, j)] * phi[j];
        }
    }
    let n = c.norm();
    if n == 0.0 || !n.is_finite() {
        phi[m]
    } else {
        -c / n
    }
}

/// One cyclic pass over every coordinate.
pub fn cd_sweep(phi: &mut CVec, xi: &CMat, rho: &CVec) {
    for m in 0..phi.len() {
        phi[m] = cd_update_phi(phi, xi, rho, m);
    }
}

/// `φᴴΞφ − 2Re(ρᴴφ)`.
pub fn quadratic_value(phi: &CVec, xi: &CMat, rho: &CVec) -> f64 {
    (phi.adjoint() * xi * phi)[(0, 0)].re - 2.0 * rho.dotc(phi).re
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub per_ue: Vec<f64>,
    pub sum_rate: f64,
    pub overhead_factor: f64,
}

/// Per-UE rates in bit/s/Hz with the training-overhead discount.
pub fn sum_rate(
    he: &[CMat],
    state: &BeamformerState,
    sigma2: f64,
    t_tot: usize,
    upsilon_large: usize,
) -> Result<RateReport> {
    if t_tot > upsilon_large {
        return Err(Error::OverheadExceedsFrame {
            t_tot,
            upsilon: upsilon_large,
        });
    }
    let factor = 1.0 - t_tot as f64 / upsilon_large as f64;
    let per_ue: Vec<f64> = (0..he.len())
        .map(|k| {
            let lam = interference(&he[k], state, k, sigma2);
            let hf = &he[k] * state.f_block(k);
            let inv = hpd_inverse(&lam).ok_or(Error::NonFinite("interference covariance"))?;
            let n_s = state.n_s;
            let m = CMat::identity(n_s, n_s) + hf.adjoint() * inv * &hf;
            let ld = hpd_log_det(&m).ok_or(Error::NonFinite("rate log-det"))?;
            Ok(factor * ld / std::f64::consts::LN_2)
        })
        .collect::<Result<_>>()?;
    Ok(RateReport {
        sum_rate: per_ue.iter().sum(),
        per_ue,
        overhead_factor: factor,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WmmseOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub cd_sweeps: usize,
    pub n_s: usize,
}

impl Default for WmmseOptions {
    fn default() -> Self {
        Self {
            max_iters: 100,
            rel_tol: 1e-4,
            cd_sweeps: 1,
            n_s: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WmmseOutcome {
    pub state: BeamformerState,
    /// Objective at the start and after every block update.
    pub block_trace: Vec<f64>,
    pub iterations: usize,
}

/// Block coordinate descent over `{W, Ψ}`, `F`, `φ_d1` and `φ_d2`.
pub fn wmmse_cd_solve<R: Rng + ?Sized>(
    sys: &DownlinkSystem,
    opts: &WmmseOptions,
    rng: &mut R,
) -> Result<WmmseOutcome> {
    if opts.n_s == 0 || opts.n_s > sys.n_ue() {
        return Err(Error::InvalidArgument(format!(
            "N_s = {} must lie in 1..={}",
            opts.n_s,
            sys.n_ue()
        )));
    }
    let state = BeamformerState::random(rng, sys, opts.n_s);
    wmmse_cd_from(sys, opts, state)
}

/// Same as [`wmmse_cd_solve`] from a given starting state.
pub fn wmmse_cd_from(
    sys: &DownlinkSystem,
    opts: &WmmseOptions,
    mut state: BeamformerState,
) -> Result<WmmseOutcome> {
    let sigma2 = sys.sigma2;
    let mut he = sys.effective_channels(&state.phi_d1, &state.phi_d2);
    let mut obj = wmmse_objective(&he, &state, sigma2);
    let mut block_trace = vec![obj];
    let mut iterations = 0;

    for _ in 0..opts.max_iters {
        let start = obj;
        update_w_psi(&he, &mut state, sigma2)?;
        block_trace.push(wmmse_objective(&he, &state, sigma2));

        update_f(&he, &mut state, sigma2)?;
        block_trace.push(wmmse_objective(&he, &state, sigma2));

        let (xi, rho) = build_xi_rho(sys, &state);
        for _ in 0..opts.cd_sweeps {
            cd_sweep(&mut state.phi_d1, &xi, &rho);
        }
        he = sys.effective_channels(&state.phi_d1, &state.phi_d2);
        block_trace.push(wmmse_objective(&he, &state, sigma2));

        if sys.surface.optimizes_layer2() {
            if let Some((xi, rho)) = build_xi_rho_fra(sys, &state) {
                for _ in 0..opts.cd_sweeps {
                    cd_sweep(&mut state.phi_d2, &xi, &rho);
                }
                he = sys.effective_channels(&state.phi_d1, &state.phi_d2);
            }
        }
        obj = wmmse_objective(&he, &state, sigma2);
        block_trace.push(obj);
        iterations += 1;

        if !obj.is_finite() {
            return Err(Error::NonFinite("WMMSE objective"));
        }
        let rel = (start - obj).abs() / start.abs().max(1e-300);
        if rel < opts.rel_tol {
            break;
        }
    }
    // Leave W and Ψ consistent with the final precoder and phases.
    update_w_psi(&he, &mut state, sigma2)?;
    Ok(WmmseOutcome {
        state,
        block_trace,
        iterations,
    })
}

/// Sum rate of a random-phase, random-precoder configuration.
pub fn random_baseline_rate<R: Rng + ?Sized>(
    sys: &DownlinkSystem,
    n_s: usize,
    rng: &mut R,
) -> Result<f64> {
    let state = BeamformerState::random(rng, sys, n_s);
    let he = sys.effective_channels(&state.phi_d1, &state.phi_d2);
    Ok(sum_rate(&he, &state, sys.sigma2, 0, 1)?.sum_rate)
}

/// `φ`-dependent part of the WMMSE objective written as a trace, used to
/// check the quadratic forms.
pub fn trace_objective(he: &[CMat], state: &BeamformerState) -> f64 {
    let mut f = 0.0;
    for (k, h) in he.iter().enumerate() {
        let w = &state.w[k];
        let psi = &state.psi[k];
        let hf = h * &state.f;
        let a = psi * w.adjoint() * &hf * hf.adjoint() * w;
        let b = psi * w.adjoint() * h * state.f_block(k);
        f += a.trace().re - 2.0 * b.trace().re;
    }
    f
}
