//! Array responses, angular dictionaries, Saleh-Valenzuela channel synthesis
//! and the near-field coupling matrix between the two surface layers.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4, PI, TAU};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::linalg::{cn, kron, CMat, CVec, C64};

/// Which side of the surface a UE (or a set of surface angles) lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// Reflection side, shared with the BS.
    Fle,
    /// Refraction side, reached through both layers.
    Fra,
}

/// Which link a path set describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkRole {
    /// Surface to BS (`G`, N_BS × M).
    BiosBs,
    /// UE to surface (`H_k`, M × N_UE).
    UeBios,
}

/// Physical layout of the BS, UE and surface arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub n_bs: usize,
    pub n_ue: usize,
    pub m_x: usize,
    pub m_y: usize,
    /// Element pitch on both surface layers, meters.
    pub element_spacing: f64,
    pub wavelength: f64,
    /// Separation between the two layers, meters.
    pub layer_gap: f64,
    /// Element size `a` in the near-field gain, meters.
    pub element_size: f64,
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        let wavelength = 0.03;
        Self {
            n_bs: 8,
            n_ue: 8,
            m_x: 7,
            m_y: 7,
            element_spacing: wavelength / 2.0,
            wavelength,
            layer_gap: 0.03,
            element_size: wavelength / 2.0,
        }
    }
}

impl ArrayGeometry {
    /// Number of elements per surface layer.
    pub fn m(&self) -> usize {
        self.m_x * self.m_y
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_bs", self.n_bs),
            ("n_ue", self.n_ue),
            ("m_x", self.m_x),
            ("m_y", self.m_y),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        let lengths = [
            ("element_spacing", self.element_spacing),
            ("wavelength", self.wavelength),
            ("layer_gap", self.layer_gap),
            ("element_size", self.element_size),
        ];
        for (name, v) in lengths {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be > 0")));
            }
        }
        Ok(())
    }
}

/// Gains and angles of the propagation paths of one channel matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub gains: Vec<C64>,
    /// BS angle of arrival (for `G`) or UE angle of departure (for `H_k`).
    pub ula_angle: Vec<f64>,
    /// Surface elevation, measured from the layer normal.
    pub bios_elevation: Vec<f64>,
    pub bios_azimuth: Vec<f64>,
}

impl PathSet {
    pub fn count(&self) -> usize {
        self.gains.len()
    }
}

/// Uniform linear array response `a(n, x)` with half-wavelength spacing.
pub fn ula_response(n: usize, x: f64) -> Result<CVec> {
    if n == 0 {
        return Err(Error::InvalidArgument("array size must be >= 1".into()));
    }
    let norm = 1.0 / (n as f64).sqrt();
    Ok(CVec::from_fn(n, |i, _| {
        C64::from_polar(norm, PI * i as f64 * x)
    }))
}

/// Surface (UPA) response for an elevation/azimuth pair.
pub fn upa_response(m_x: usize, m_y: usize, elevation: f64, azimuth: f64) -> Result<CVec> {
    let (sx, sy) = upa_frequencies(elevation, azimuth);
    upa_response_at(m_x, m_y, sx, sy)
}

/// Spatial frequencies seen by the x and y axes of the surface.
pub fn upa_frequencies(elevation: f64, azimuth: f64) -> (f64, f64) {
    (
        -elevation.sin() * azimuth.sin(),
        -elevation.sin() * azimuth.cos(),
    )
}

fn upa_response_at(m_x: usize, m_y: usize, sx: f64, sy: f64) -> Result<CVec> {
    let ax = ula_response(m_x, sx)?;
    let ay = ula_response(m_y, sy)?;
    Ok(ax.kronecker(&ay))
}

/// Normalized element power pattern `|cos³θ|`.
pub fn radiation_pattern(elevation: f64) -> f64 {
    elevation.cos().powi(3).abs()
}

fn elevation_range(side: Side) -> (f64, f64) {
    match side {
        Side::Fle => (0.0, FRAC_PI_4),
        Side::Fra => (3.0 * FRAC_PI_4, PI),
    }
}

/// Draws a path set: the first path is line-of-sight with `CN(0, 1)` gain,
/// the remaining paths have `CN(0, 0.1)` gains.
pub fn sample_paths<R: Rng + ?Sized>(rng: &mut R, count: usize, side: Side) -> Result<PathSet> {
    if count == 0 {
        return Err(Error::InvalidArgument("path count must be >= 1".into()));
    }
    let (lo, hi) = elevation_range(side);
    let mut p = PathSet {
        gains: Vec::with_capacity(count),
        ula_angle: Vec::with_capacity(count),
        bios_elevation: Vec::with_capacity(count),
        bios_azimuth: Vec::with_capacity(count),
    };
    for i in 0..count {
        p.gains.push(cn(rng, if i == 0 { 1.0 } else { 0.1 }));
        p.ula_angle.push(rng.random_range(0.0..=PI));
        p.bios_elevation.push(rng.random_range(lo..=hi));
        p.bios_azimuth.push(rng.random_range(0.0..TAU));
    }
    Ok(p)
}

/// Draws a path set whose angles fall exactly on the grid points of the
/// full-range dictionaries (`x = -1 + 2i/G`) so that the angular transform
/// is exactly `count`-sparse. Grid cells are distinct across paths.
pub fn sample_paths_on_grid<R: Rng + ?Sized>(
    rng: &mut R,
    count: usize,
    side: Side,
    g_ula: usize,
    g_x: usize,
    g_y: usize,
) -> Result<PathSet> {
    let cells: Vec<(f64, f64)> = (0..g_x)
        .flat_map(|i| (0..g_y).map(move |j| (i, j)))
        .map(|(i, j)| (full_grid(g_x, i), full_grid(g_y, j)))
        .filter(|(sx, sy)| (sx * sx + sy * sy).sqrt() <= FRAC_1_SQRT_2 + 1e-12)
        .collect();
    if count == 0 || count > g_ula || count > cells.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot place {count} distinct on-grid paths"
        )));
    }
    let ula_idx = sample(rng, g_ula, count);
    let cell_idx = sample(rng, cells.len(), count);
    let mut p = PathSet {
        gains: Vec::with_capacity(count),
        ula_angle: Vec::with_capacity(count),
        bios_elevation: Vec::with_capacity(count),
        bios_azimuth: Vec::with_capacity(count),
    };
    for (n, (iu, ic)) in ula_idx.iter().zip(cell_idx.iter()).enumerate() {
        p.gains.push(cn(rng, if n == 0 { 1.0 } else { 0.1 }));
        p.ula_angle
            .push(full_grid(g_ula, iu).clamp(-1.0, 1.0).acos());
        let (sx, sy) = cells[ic];
        let rho = (sx * sx + sy * sy).sqrt().min(1.0);
        let elev = rho.asin();
        p.bios_elevation.push(match side {
            Side::Fle => elev,
            Side::Fra => PI - elev,
        });
        p.bios_azimuth.push((-sx).atan2(-sy).rem_euclid(TAU));
    }
    Ok(p)
}

/// Synthesizes `G` (role `BiosBs`) or `H_k` (role `UeBios`) from its paths.
pub fn synth_channel(paths: &PathSet, geometry: &ArrayGeometry, role: LinkRole) -> Result<CMat> {
    let n_paths = paths.count();
    if n_paths == 0 {
        return Err(Error::InvalidArgument("empty path set".into()));
    }
    let m = geometry.m();
    let n_ula = match role {
        LinkRole::BiosBs => geometry.n_bs,
        LinkRole::UeBios => geometry.n_ue,
    };
    let scale = ((n_ula * m) as f64 / n_paths as f64).sqrt();
    let mut out = match role {
        LinkRole::BiosBs => CMat::zeros(n_ula, m),
        LinkRole::UeBios => CMat::zeros(m, n_ula),
    };
    for p in 0..n_paths {
        let elev = paths.bios_elevation[p];
        let a_ula = ula_response(n_ula, paths.ula_angle[p].cos())?;
        let a_i = upa_response(geometry.m_x, geometry.m_y, elev, paths.bios_azimuth[p])?;
        let w = paths.gains[p] * (scale * radiation_pattern(elev).sqrt());
        match role {
            LinkRole::BiosBs => out += a_ula * a_i.adjoint() * w,
            LinkRole::UeBios => out += a_i * a_ula.adjoint() * w,
        }
    }
    Ok(out)
}

/// Near-field coupling matrix between the two surface layers.
///
/// Layer 1 sits at z = 0 and layer 2 at z = `layer_gap`, both on the same
/// x/y grid; element `m = ix·m_y + iy` matches the Kronecker ordering of
/// [`upa_response`]. Both pattern angles equal the angle between the
/// element-to-element ray and the layer normal.
pub fn near_field_l(geometry: &ArrayGeometry) -> Result<CMat> {
    geometry.validate()?;
    let m = geometry.m();
    let pos = |idx: usize| {
        let ix = idx / geometry.m_y;
        let iy = idx % geometry.m_y;
        (
            ix as f64 * geometry.element_spacing,
            iy as f64 * geometry.element_spacing,
        )
    };
    let a2 = geometry.element_size * geometry.element_size;
    let mut l = CMat::zeros(m, m);
    for m1 in 0..m {
        let (x1, y1) = pos(m1);
        for m2 in 0..m {
            let (x2, y2) = pos(m2);
            let (dx, dy, dz) = (x2 - x1, y2 - y1, geometry.layer_gap);
            let d = (dx * dx + dy * dy + dz * dz).sqrt();
            if d <= 0.0 {
                return Err(Error::CoincidentElements(d));
            }
            let theta = (dz / d).acos();
            let f = radiation_pattern(theta);
            let mag = (2.0 * a2 * f * f / (PI * d * d)).sqrt();
            l[(m1, m2)] = C64::from_polar(mag, -TAU * d / geometry.wavelength);
        }
    }
    Ok(l)
}

/// Grid used for the surface dictionaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BiosGrid {
    /// `x = -√2/2 + i·√2/(G-1)`, matched to the sampled elevation range.
    #[default]
    Restricted,
    /// `x = -1 + 2i/G`, exactly unitary when `G` equals the array size.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionaryConfig {
    pub g_bs: usize,
    pub g_ue: usize,
    pub g_x: usize,
    pub g_y: usize,
    pub bios_grid: BiosGrid,
}

impl DictionaryConfig {
    /// One codeword per antenna on every axis.
    pub fn matched(geometry: &ArrayGeometry) -> Self {
        Self {
            g_bs: geometry.n_bs,
            g_ue: geometry.n_ue,
            g_x: geometry.m_x,
            g_y: geometry.m_y,
            bios_grid: BiosGrid::Restricted,
        }
    }
}

/// Angular dictionaries `A_BS`, `A_UE` and `A_I = A_x ⊗ A_y`.
#[derive(Debug, Clone)]
pub struct Dictionaries {
    pub a_bs: CMat,
    pub a_ue: CMat,
    pub a_i: CMat,
}

fn full_grid(g: usize, i: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / g as f64
}

fn restricted_grid(g: usize, i: usize) -> f64 {
    if g == 1 {
        0.0
    } else {
        -FRAC_1_SQRT_2 + i as f64 * 2f64.sqrt() / (g - 1) as f64
    }
}

fn ula_dictionary(n: usize, g: usize, grid: impl Fn(usize, usize) -> f64) -> Result<CMat> {
    let mut a = CMat::zeros(n, g);
    for i in 0..g {
        a.set_column(i, &ula_response(n, grid(g, i))?);
    }
    Ok(a)
}

pub fn build_dictionaries(
    cfg: &DictionaryConfig,
    geometry: &ArrayGeometry,
) -> Result<Dictionaries> {
    for (name, g) in [
        ("g_bs", cfg.g_bs),
        ("g_ue", cfg.g_ue),
        ("g_x", cfg.g_x),
        ("g_y", cfg.g_y),
    ] {
        if g == 0 {
            return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
        }
    }
    let a_bs = ula_dictionary(geometry.n_bs, cfg.g_bs, full_grid)?;
    let a_ue = ula_dictionary(geometry.n_ue, cfg.g_ue, full_grid)?;
    let (a_x, a_y) = match cfg.bios_grid {
        BiosGrid::Full => (
            ula_dictionary(geometry.m_x, cfg.g_x, full_grid)?,
            ula_dictionary(geometry.m_y, cfg.g_y, full_grid)?,
        ),
        BiosGrid::Restricted => (
            ula_dictionary(geometry.m_x, cfg.g_x, restricted_grid)?,
            ula_dictionary(geometry.m_y, cfg.g_y, restricted_grid)?,
        ),
    };
    Ok(Dictionaries {
        a_bs,
        a_ue,
        a_i: kron(&a_x, &a_y),
    })
}

/// `vec(A_leftᴴ · X · A_right)`.
pub fn angular_transform(x: &CMat, a_left: &CMat, a_right: &CMat) -> Result<CVec> {
    Ok(crate::linalg::vec_of(&angular_matrix(x, a_left, a_right)?))
}

/// `A_leftᴴ · X · A_right` without vectorising.
pub fn angular_matrix(x: &CMat, a_left: &CMat, a_right: &CMat) -> Result<CMat> {
    if a_left.nrows() != x.nrows() || x.ncols() != a_right.nrows() {
        return Err(shape(
            "angular_transform",
            format!(
                "A_left {:?}, X {:?}, A_right {:?}",
                a_left.shape(),
                x.shape(),
                a_right.shape()
            ),
        ));
    }
    Ok(a_left.adjoint() * x * a_right)
}

/// One draw of every channel in the system.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelRealization {
    /// Surface-to-BS channel, N_BS × M.
    pub g: CMat,
    /// UE-to-surface channels, each M × N_UE.
    pub h: Vec<CMat>,
    /// Inter-layer near-field matrix, M × M.
    pub l: CMat,
    pub g_paths: PathSet,
    pub h_paths: Vec<PathSet>,
    pub sides: Vec<Side>,
}

impl ChannelRealization {
    /// Draws `G` (reflection-side surface angles, since the BS illuminates
    /// layer 1) and one `H_k` per entry of `sides`.
    pub fn draw<R: Rng + ?Sized>(
        rng: &mut R,
        geometry: &ArrayGeometry,
        l: &CMat,
        sides: &[Side],
        p: usize,
        q: usize,
    ) -> Result<Self> {
        let g_paths = sample_paths(rng, p, Side::Fle)?;
        let g = synth_channel(&g_paths, geometry, LinkRole::BiosBs)?;
        let (h, h_paths) = draw_ue_channels(rng, geometry, sides, q)?;
        Ok(Self {
            g,
            h,
            l: l.clone(),
            g_paths,
            h_paths,
            sides: sides.to_vec(),
        })
    }

    /// Replaces every UE channel with a fresh draw (a new small timescale).
    pub fn redraw_ues<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        geometry: &ArrayGeometry,
        q: usize,
    ) -> Result<Self> {
        let (h, h_paths) = draw_ue_channels(rng, geometry, &self.sides, q)?;
        Ok(Self {
            h,
            h_paths,
            ..self.clone()
        })
    }
}

fn draw_ue_channels<R: Rng + ?Sized>(
    rng: &mut R,
    geometry: &ArrayGeometry,
    sides: &[Side],
    q: usize,
) -> Result<(Vec<CMat>, Vec<PathSet>)> {
    let mut h = Vec::with_capacity(sides.len());
    let mut paths = Vec::with_capacity(sides.len());
    for &side in sides {
        let ps = sample_paths(rng, q, side)?;
        h.push(synth_channel(&ps, geometry, LinkRole::UeBios)?);
        paths.push(ps);
    }
    Ok((h, paths))
}
