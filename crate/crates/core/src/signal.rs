//! Uplink signal model: BIOS effective coefficient matrices, pilot and phase
//! schedules, noisy received blocks, and the cascaded-channel forms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::geometry::Side;
use crate::linalg::{
    cn_vector, khatri_rao, kron, scale_cols, scale_rows, unit_phase_vector, vec_of, CMat, CVec,
    C64, ZERO,
};

/// Surface technology used for the comparison modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RisMode {
    #[default]
    Bios,
    /// Single-layer omni-surface: refraction shares the layer-1 phases.
    Ios,
    /// Reflection-only surface.
    Irs,
}

impl std::str::FromStr for RisMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bios" => Ok(Self::Bios),
            "ios" => Ok(Self::Ios),
            "irs" => Ok(Self::Irs),
            other => Err(Error::InvalidArgument(format!(
                "unknown RIS mode {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for RisMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Bios => "bios",
            Self::Ios => "ios",
            Self::Irs => "irs",
        })
    }
}

/// Power split and mode of the surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub mode: RisMode,
    pub epsilon: f64,
}

impl Surface {
    pub fn new(mode: RisMode, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        Ok(Self { mode, epsilon })
    }

    /// Amplitude gains applied to the reflection and refraction paths.
    pub fn gains(&self) -> (f64, f64) {
        match self.mode {
            RisMode::Bios | RisMode::Ios => (self.epsilon.sqrt(), (1.0 - self.epsilon).sqrt()),
            RisMode::Irs => (1.0, 0.0),
        }
    }

    pub fn gain(&self, side: Side) -> f64 {
        let (fle, fra) = self.gains();
        match side {
            Side::Fle => fle,
            Side::Fra => fra,
        }
    }

    /// Whether the second layer's phases are free variables.
    pub fn optimizes_layer2(&self) -> bool {
        self.mode == RisMode::Bios
    }
}

pub(crate) fn check_epsilon(eps: f64) -> Result<()> {
    if eps > 0.0 && eps < 1.0 {
        Ok(())
    } else {
        Err(Error::PowerSplit(eps))
    }
}

fn check_len(op: &'static str, v: &CVec, m: usize) -> Result<()> {
    if v.len() != m {
        return Err(shape(op, format!("phase length {} vs M = {m}", v.len())));
    }
    Ok(())
}

/// `√ε·diag(φ₁)` (fle) or `√(1−ε)·diag(φ₁)·L·diag(φ₂)` (fra).
pub fn effective_phase_uplink(
    phi1: &CVec,
    phi2: &CVec,
    l: &CMat,
    epsilon: f64,
    side: Side,
) -> Result<CMat> {
    check_epsilon(epsilon)?;
    let m = l.nrows();
    check_len("effective_phase_uplink", phi1, m)?;
    check_len("effective_phase_uplink", phi2, m)?;
    Ok(match side {
        Side::Fle => CMat::from_diagonal(phi1) * C64::from(epsilon.sqrt()),
        Side::Fra => coupled_uplink(phi1, phi2, l, (1.0 - epsilon).sqrt()),
    })
}

/// `√ε·diag(φ_d1)` (fle) or `√(1−ε)·diag(φ_d2)·Lᴴ·diag(φ_d1)` (fra).
pub fn effective_phase_downlink(
    phi_d1: &CVec,
    phi_d2: &CVec,
    l: &CMat,
    epsilon: f64,
    side: Side,
) -> Result<CMat> {
    check_epsilon(epsilon)?;
    let m = l.nrows();
    check_len("effective_phase_downlink", phi_d1, m)?;
    check_len("effective_phase_downlink", phi_d2, m)?;
    Ok(match side {
        Side::Fle => CMat::from_diagonal(phi_d1) * C64::from(epsilon.sqrt()),
        Side::Fra => coupled_downlink(phi_d1, phi_d2, l, (1.0 - epsilon).sqrt()),
    })
}

/// Downlink effective matrix under an arbitrary surface mode.
pub fn surface_phase_downlink(
    surface: &Surface,
    phi_d1: &CVec,
    phi_d2: &CVec,
    l: &CMat,
    side: Side,
) -> CMat {
    let gain = surface.gain(side);
    match side {
        Side::Fle => CMat::from_diagonal(phi_d1) * C64::from(gain),
        Side::Fra if gain == 0.0 => CMat::zeros(l.nrows(), l.ncols()),
        Side::Fra => coupled_downlink(phi_d1, phi_d2, l, gain),
    }
}

fn coupled_uplink(phi1: &CVec, phi2: &CVec, l: &CMat, gain: f64) -> CMat {
    scale_cols(&scale_rows(phi1, l), phi2) * C64::from(gain)
}

fn coupled_downlink(phi_d1: &CVec, phi_d2: &CVec, l: &CMat, gain: f64) -> CMat {
    scale_cols(&scale_rows(phi_d2, &l.adjoint()), phi_d1) * C64::from(gain)
}

/// Per-pilot phase vectors of both layers, one row per pilot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub phi1: CMat,
    pub phi2: CMat,
}

impl PhaseSchedule {
    pub fn len(&self) -> usize {
        self.phi1.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn phi1_at(&self, t: usize) -> CVec {
        self.phi1.row(t).transpose()
    }

    pub fn phi2_at(&self, t: usize) -> CVec {
        self.phi2.row(t).transpose()
    }

    /// First `t` pilots.
    pub fn prefix(&self, t: usize) -> Self {
        Self {
            phi1: self.phi1.rows(0, t).into_owned(),
            phi2: self.phi2.rows(0, t).into_owned(),
        }
    }

    /// Uplink effective matrix for pilot `t`.
    pub fn effective(&self, t: usize, l: &CMat, epsilon: f64, side: Side) -> Result<CMat> {
        effective_phase_uplink(&self.phi1_at(t), &self.phi2_at(t), l, epsilon, side)
    }
}

/// I.i.d. uniform phases, fresh for every pilot.
pub fn random_phase_schedule<R: Rng + ?Sized>(rng: &mut R, t: usize, m: usize) -> PhaseSchedule {
    blocked_phase_schedule(rng, t, m, 1)
}

/// Uniform phases held constant over blocks of `block` consecutive pilots.
pub fn blocked_phase_schedule<R: Rng + ?Sized>(
    rng: &mut R,
    t: usize,
    m: usize,
    block: usize,
) -> PhaseSchedule {
    let block = block.max(1);
    let mut phi1 = CMat::zeros(t, m);
    let mut phi2 = CMat::zeros(t, m);
    let (mut p1, mut p2) = (CVec::zeros(m), CVec::zeros(m));
    for i in 0..t {
        if i % block == 0 {
            p1 = unit_phase_vector(rng, m);
            p2 = unit_phase_vector(rng, m);
        }
        phi1.set_row(i, &p1.transpose());
        phi2.set_row(i, &p2.transpose());
    }
    PhaseSchedule { phi1, phi2 }
}

/// Unit-norm pilot vectors, one row per pilot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotSchedule {
    pub s: CMat,
    pub pnr_db: f64,
}

impl PilotSchedule {
    pub fn len(&self) -> usize {
        self.s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn at(&self, t: usize) -> CVec {
        self.s.row(t).transpose()
    }

    /// Noise variance implied by the PNR.
    pub fn sigma2(&self) -> f64 {
        pnr_to_sigma2(self.pnr_db)
    }

    pub fn prefix(&self, t: usize) -> Self {
        Self {
            s: self.s.rows(0, t).into_owned(),
            pnr_db: self.pnr_db,
        }
    }
}

pub fn pnr_to_sigma2(db: f64) -> f64 {
    10f64.powf(-db / 10.0)
}

/// Unit-modulus entries scaled by `1/√N_UE`.
pub fn random_pilots<R: Rng + ?Sized>(
    rng: &mut R,
    t: usize,
    n_ue: usize,
    pnr_db: f64,
) -> PilotSchedule {
    let scale = C64::from(1.0 / (n_ue as f64).sqrt());
    let mut s = CMat::zeros(t, n_ue);
    for i in 0..t {
        s.set_row(i, &(unit_phase_vector(rng, n_ue) * scale).transpose());
    }
    PilotSchedule { s, pnr_db }
}

/// Received pilots of one UE, one row per pilot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceivedBlock {
    pub r: CMat,
    pub side: Side,
    pub ue_index: usize,
}

impl ReceivedBlock {
    pub fn at(&self, t: usize) -> CVec {
        self.r.row(t).transpose()
    }

    pub fn prefix(&self, t: usize) -> Self {
        Self {
            r: self.r.rows(0, t).into_owned(),
            side: self.side,
            ue_index: self.ue_index,
        }
    }
}

/// `r = G·Φ̂·H_k·s + z` with `z ~ CN(0, σ²I)`.
pub fn uplink_received<R: Rng + ?Sized>(
    g: &CMat,
    h: &CMat,
    eff_phase: &CMat,
    s: &CVec,
    sigma2: f64,
    rng: &mut R,
) -> Result<CVec> {
    if g.ncols() != eff_phase.nrows() || eff_phase.ncols() != h.nrows() || h.ncols() != s.len() {
        return Err(shape(
            "uplink_received",
            format!(
                "G {:?}, Φ {:?}, H {:?}, s {}",
                g.shape(),
                eff_phase.shape(),
                h.shape(),
                s.len()
            ),
        ));
    }
    let clean = g * (eff_phase * (h * s));
    Ok(add_noise(clean, sigma2, rng))
}

fn add_noise<R: Rng + ?Sized>(clean: CVec, sigma2: f64, rng: &mut R) -> CVec {
    if sigma2 > 0.0 {
        let n = clean.len();
        clean + cn_vector(rng, n, sigma2)
    } else {
        clean
    }
}

/// Simulates every pilot of UE `ue_index` through the surface. Uses the
/// diagonal structure of the phase matrices instead of forming them.
#[allow(clippy::too_many_arguments)]
pub fn simulate_uplink<R: Rng + ?Sized>(
    g: &CMat,
    h: &CMat,
    l: &CMat,
    schedule: &PhaseSchedule,
    pilots: &PilotSchedule,
    epsilon: f64,
    side: Side,
    ue_index: usize,
    rng: &mut R,
) -> Result<ReceivedBlock> {
    check_epsilon(epsilon)?;
    let t_len = pilots.len();
    if schedule.len() < t_len {
        return Err(shape(
            "simulate_uplink",
            format!("{} phase rows for {t_len} pilots", schedule.len()),
        ));
    }
    let m = l.nrows();
    if g.ncols() != m || h.nrows() != m || h.ncols() != pilots.s.ncols() {
        return Err(shape(
            "simulate_uplink",
            format!("G {:?}, H {:?}, L {:?}", g.shape(), h.shape(), l.shape()),
        ));
    }
    let sigma2 = pilots.sigma2();
    let hs = h * pilots.s.transpose();
    let mut r = CMat::zeros(t_len, g.nrows());
    for t in 0..t_len {
        let a = phase_apply(
            &schedule.phi1_at(t),
            &schedule.phi2_at(t),
            l,
            epsilon,
            side,
            &hs.column(t).into_owned(),
        );
        let y = add_noise(g * a, sigma2, rng);
        r.set_row(t, &y.transpose());
    }
    Ok(ReceivedBlock { r, side, ue_index })
}

/// `Φ̂_t · x` without forming `Φ̂_t`.
pub(crate) fn phase_apply(
    phi1: &CVec,
    phi2: &CVec,
    l: &CMat,
    epsilon: f64,
    side: Side,
    x: &CVec,
) -> CVec {
    match side {
        Side::Fle => phi1.component_mul(x) * C64::from(epsilon.sqrt()),
        Side::Fra => {
            phi1.component_mul(&(l * phi2.component_mul(x))) * C64::from((1.0 - epsilon).sqrt())
        }
    }
}

/// `J_fle = H_kᵀ ⊙ G`.
pub fn cascaded_fle(h: &CMat, g: &CMat) -> Result<CMat> {
    khatri_rao(&h.transpose(), g)
}

/// `J_fra = H_kᵀ ⊗ G`.
pub fn cascaded_fra(h: &CMat, g: &CMat) -> Result<CMat> {
    if g.ncols() != h.nrows() {
        return Err(shape(
            "cascaded_fra",
            format!("G {:?} vs H {:?}", g.shape(), h.shape()),
        ));
    }
    Ok(kron(&h.transpose(), g))
}

/// Per-pilot measurement operator acting on `vec(J)`, so that the noiseless
/// received vector equals `row_block · vec(J)`.
pub fn ls_sensing_row(
    s: &CVec,
    phi1: &CVec,
    phi2: &CVec,
    l: &CMat,
    epsilon: f64,
    side: Side,
    n_bs: usize,
) -> Result<CMat> {
    check_epsilon(epsilon)?;
    let m = l.nrows();
    check_len("ls_sensing_row", phi1, m)?;
    check_len("ls_sensing_row", phi2, m)?;
    let st_i = kron(
        &CMat::from_row_slice(1, s.len(), s.as_slice()),
        &CMat::identity(n_bs, n_bs),
    );
    let (coef, gain) = match side {
        Side::Fle => (phi1.clone(), epsilon.sqrt()),
        Side::Fra => (
            vec_of(&scale_cols(&scale_rows(phi1, l), phi2)),
            (1.0 - epsilon).sqrt(),
        ),
    };
    let coef_t = CMat::from_row_slice(1, coef.len(), coef.as_slice());
    Ok(kron(&coef_t, &st_i) * C64::from(gain))
}

fn rel_close(a: &CMat, b: &CMat, tol: f64) -> bool {
    a.shape() == b.shape() && (a - b).norm() <= tol * a.norm().max(b.norm()).max(f64::MIN_POSITIVE)
}

/// If `A⊗B = C⊗D`, returns the scalar `a` with `A = aC` and `B = D/a`,
/// recovered from the first-entry ratio and checked entrywise. Requires
/// the factors to have no zero entries.
pub fn kron_gauge(a: &CMat, b: &CMat, c: &CMat, d: &CMat, tol: f64) -> Option<C64> {
    if a.shape() != c.shape() || b.shape() != d.shape() || c[(0, 0)] == ZERO {
        return None;
    }
    let gauge = a[(0, 0)] / c[(0, 0)];
    if gauge == ZERO {
        return None;
    }
    (rel_close(a, &(c * gauge), tol) && rel_close(b, &(d / gauge), tol)).then_some(gauge)
}

/// Column-wise version for `A⊙B = C⊙D`: per-column scalars with
/// `A_m = a_m C_m` and `B_m = D_m / a_m`.
pub fn khatri_rao_gauge(a: &CMat, b: &CMat, c: &CMat, d: &CMat, tol: f64) -> Option<Vec<C64>> {
    if a.ncols() != b.ncols() || a.shape() != c.shape() || b.shape() != d.shape() {
        return None;
    }
    let col = |x: &CMat, m: usize| CMat::from_column_slice(x.nrows(), 1, x.column(m).as_slice());
    (0..a.ncols())
        .map(|m| kron_gauge(&col(a, m), &col(b, m), &col(c, m), &col(d, m), tol))
        .collect()
}
