//! Flat key-value run configuration, environment overrides and validation.
//!
//! Every key is optional; missing keys take the default operating point.
//! Any key can be overridden by an environment variable named `BIOS_` plus
//! the upper-cased key, e.g. `BIOS_EPSILON=0.3` or `BIOS_MODE=ios`. Values
//! are parsed as TOML literals and fall back to plain strings.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::beamforming::WmmseOptions;
use crate::estimator::EstimationConfig;
use crate::geometry::{ArrayGeometry, BiosGrid, DictionaryConfig, Side};
use crate::manifold::ArmijoOptions;
use crate::signal::{RisMode, Surface};

pub const ENV_PREFIX: &str = "BIOS_";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("parse error: {0}")]
    Parse(String),
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Channel-estimation method used by a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    #[default]
    HttMo,
    /// True channels, no training overhead.
    PerfectCsi,
    /// True channels charged with the HTT-MO pilot count.
    PerfectCsiOverhead,
    /// True channels scored with the least-squares pilot count.
    LsBound,
}

impl FromStr for Estimator {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "htt-mo" | "httmo" => Ok(Self::HttMo),
            "perfect-csi" | "perfect" => Ok(Self::PerfectCsi),
            "perfect-csi-overhead" => Ok(Self::PerfectCsiOverhead),
            "ls-bound" | "ls" => Ok(Self::LsBound),
            _ => Err(invalid("estimator", format!("unknown estimator {s:?}"))),
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::HttMo => "htt-mo",
            Self::PerfectCsi => "perfect-csi",
            Self::PerfectCsiOverhead => "perfect-csi-overhead",
            Self::LsBound => "ls-bound",
        })
    }
}

/// Unvalidated configuration as read from a file and the environment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub epsilon: Option<f64>,
    pub k_fle: Option<usize>,
    pub k_fra: Option<usize>,
    pub n_bs: Option<usize>,
    pub n_ue: Option<usize>,
    pub m_x: Option<usize>,
    pub m_y: Option<usize>,
    pub wavelength: Option<f64>,
    pub element_spacing: Option<f64>,
    pub layer_gap: Option<f64>,
    pub element_size: Option<f64>,
    pub p: Option<usize>,
    pub q: Option<usize>,
    pub upsilon_large: Option<usize>,
    pub upsilon_small: Option<usize>,
    pub t_g: Option<usize>,
    pub t_h: Option<usize>,
    pub pnr_db: Option<f64>,
    pub snr_db: Option<f64>,
    /// One-based index of the large-timescale UE.
    pub k_c: Option<usize>,
    pub n_s: Option<usize>,
    pub mode: Option<String>,
    pub estimator: Option<String>,
    pub upsilon_g: Option<f64>,
    pub upsilon_h: Option<f64>,
    pub g_bs: Option<usize>,
    pub g_ue: Option<usize>,
    pub g_x: Option<usize>,
    pub g_y: Option<usize>,
    pub bios_grid: Option<String>,
    pub outer_max_iters: Option<usize>,
    pub outer_tol: Option<f64>,
    pub inner_max_iters: Option<usize>,
    pub small_max_iters: Option<usize>,
    pub wmmse_max_iters: Option<usize>,
    pub wmmse_tol: Option<f64>,
    pub cd_sweeps: Option<usize>,
}

/// Every key accepted by [`RawConfig`].
pub const KEYS: &[&str] = &[
    "seed",
    "trials",
    "epsilon",
    "k_fle",
    "k_fra",
    "n_bs",
    "n_ue",
    "m_x",
    "m_y",
    "wavelength",
    "element_spacing",
    "layer_gap",
    "element_size",
    "p",
    "q",
    "upsilon_large",
    "upsilon_small",
    "t_g",
    "t_h",
    "pnr_db",
    "snr_db",
    "k_c",
    "n_s",
    "mode",
    "estimator",
    "upsilon_g",
    "upsilon_h",
    "g_bs",
    "g_ue",
    "g_x",
    "g_y",
    "bios_grid",
    "outer_max_iters",
    "outer_tol",
    "inner_max_iters",
    "small_max_iters",
    "wmmse_max_iters",
    "wmmse_tol",
    "cd_sweeps",
];

impl RawConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let table: toml::Table =
            toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self, ConfigError> {
        for key in table.keys() {
            if !KEYS.contains(&key.as_str()) {
                return Err(invalid(key, "unknown key"));
            }
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, crate::error::Error> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::from_toml_str(&text)?)
    }

    /// Applies `BIOS_*` overrides from the given variables.
    pub fn with_env<I, K, V>(self, vars: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut table = match toml::Value::try_from(&self) {
            Ok(toml::Value::Table(t)) => t,
            _ => toml::Table::new(),
        };
        for (k, v) in vars {
            let Some(key) = k.as_ref().strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let key = key.to_ascii_lowercase();
            if KEYS.contains(&key.as_str()) {
                table.insert(key, parse_env_value(v.as_ref()));
            }
        }
        Self::from_table(table)
    }

    /// [`Self::with_env`] over the process environment.
    pub fn with_process_env(self) -> Result<Self, ConfigError> {
        self.with_env(std::env::vars())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let mut table = match toml::Value::try_from(&*self) {
            Ok(toml::Value::Table(t)) => t,
            _ => toml::Table::new(),
        };
        if !KEYS.contains(&key) {
            return Err(invalid(key, "unknown key"));
        }
        table.insert(key.to_string(), parse_env_value(value));
        *self = Self::from_table(table)?;
        Ok(())
    }
}

fn parse_env_value(v: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()))
}

/// Validated system and solver settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub seed: u64,
    pub trials: usize,
    pub geometry: ArrayGeometry,
    pub dictionary: DictionaryConfig,
    pub epsilon: f64,
    pub k_fle: usize,
    pub k_fra: usize,
    pub p: usize,
    pub q: usize,
    pub upsilon_large: usize,
    pub upsilon_small: usize,
    /// `Υ_large / Υ_small`.
    pub tau: usize,
    pub t_g: usize,
    pub t_h: usize,
    pub pnr_db: f64,
    pub snr_db: f64,
    /// Zero-based; `None` selects the first refraction-side UE.
    pub k_c: Option<usize>,
    pub n_s: usize,
    pub mode: RisMode,
    pub estimator: Estimator,
    pub estimation: EstimationConfig,
    pub wmmse: WmmseOptions,
}

pub const DEFAULT_TRIALS: usize = 20;
pub const FULL_TRIALS: usize = 200;
pub const PNR_OFFSET_DB: f64 = 10.0;

impl Default for SystemConfig {
    fn default() -> Self {
        validate_config(&RawConfig::default()).expect("defaults are valid")
    }
}

impl SystemConfig {
    pub fn k(&self) -> usize {
        self.k_fle + self.k_fra
    }

    pub fn m(&self) -> usize {
        self.geometry.m()
    }

    /// Reflection-side UEs first, then refraction-side ones.
    pub fn sides(&self) -> Vec<Side> {
        std::iter::repeat_n(Side::Fle, self.k_fle)
            .chain(std::iter::repeat_n(Side::Fra, self.k_fra))
            .collect()
    }

    pub fn surface(&self) -> Surface {
        Surface {
            mode: self.mode,
            epsilon: self.epsilon,
        }
    }

    /// Estimation settings with the current pilot lengths.
    pub fn estimation_config(&self) -> EstimationConfig {
        EstimationConfig {
            t_g: self.t_g,
            t_h: self.t_h,
            tau: self.tau,
            p: self.p,
            q: self.q,
            k_c: self.k_c,
            ..self.estimation.clone()
        }
    }

    /// Re-runs validation after a programmatic change.
    pub fn revalidate(self) -> Result<Self, ConfigError> {
        validate_config(&self.to_raw())
    }

    /// Inverse of [`validate_config`].
    pub fn to_raw(&self) -> RawConfig {
        let g = &self.geometry;
        let d = &self.dictionary;
        let e = &self.estimation;
        RawConfig {
            seed: Some(self.seed),
            trials: Some(self.trials),
            epsilon: Some(self.epsilon),
            k_fle: Some(self.k_fle),
            k_fra: Some(self.k_fra),
            n_bs: Some(g.n_bs),
            n_ue: Some(g.n_ue),
            m_x: Some(g.m_x),
            m_y: Some(g.m_y),
            wavelength: Some(g.wavelength),
            element_spacing: Some(g.element_spacing),
            layer_gap: Some(g.layer_gap),
            element_size: Some(g.element_size),
            p: Some(self.p),
            q: Some(self.q),
            upsilon_large: Some(self.upsilon_large),
            upsilon_small: Some(self.upsilon_small),
            t_g: Some(self.t_g),
            t_h: Some(self.t_h),
            pnr_db: Some(self.pnr_db),
            snr_db: Some(self.snr_db),
            k_c: self.k_c.map(|k| k + 1),
            n_s: Some(self.n_s),
            mode: Some(self.mode.to_string()),
            estimator: Some(self.estimator.to_string()),
            upsilon_g: e.upsilon_g,
            upsilon_h: e.upsilon_h,
            g_bs: Some(d.g_bs),
            g_ue: Some(d.g_ue),
            g_x: Some(d.g_x),
            g_y: Some(d.g_y),
            bios_grid: Some(grid_name(d.bios_grid).to_string()),
            outer_max_iters: Some(e.outer_max_iters),
            outer_tol: Some(e.outer_rel_tol),
            inner_max_iters: Some(e.inner.max_iters),
            small_max_iters: Some(e.small.max_iters),
            wmmse_max_iters: Some(self.wmmse.max_iters),
            wmmse_tol: Some(self.wmmse.rel_tol),
            cd_sweeps: Some(self.wmmse.cd_sweeps),
        }
    }

    /// Effective settings as a flat table, one key per line.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_raw()).unwrap_or_default()
    }
}

fn grid_name(g: BiosGrid) -> &'static str {
    match g {
        BiosGrid::Restricted => "restricted",
        BiosGrid::Full => "full",
    }
}

fn positive(field: &str, v: usize) -> Result<usize, ConfigError> {
    if v == 0 {
        Err(invalid(field, "must be >= 1"))
    } else {
        Ok(v)
    }
}

fn positive_f(field: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(
            field,
            format!("must be a finite value > 0, got {v}"),
        ))
    }
}

/// Fills defaults and checks every invariant, reporting the offending key.
pub fn validate_config(raw: &RawConfig) -> Result<SystemConfig, ConfigError> {
    let dg = ArrayGeometry::default();
    let geometry = ArrayGeometry {
        n_bs: positive("n_bs", raw.n_bs.unwrap_or(dg.n_bs))?,
        n_ue: positive("n_ue", raw.n_ue.unwrap_or(dg.n_ue))?,
        m_x: positive("m_x", raw.m_x.unwrap_or(dg.m_x))?,
        m_y: positive("m_y", raw.m_y.unwrap_or(dg.m_y))?,
        wavelength: positive_f("wavelength", raw.wavelength.unwrap_or(dg.wavelength))?,
        element_spacing: positive_f(
            "element_spacing",
            raw.element_spacing.unwrap_or(dg.element_spacing),
        )?,
        layer_gap: positive_f("layer_gap", raw.layer_gap.unwrap_or(dg.layer_gap))?,
        element_size: positive_f("element_size", raw.element_size.unwrap_or(dg.element_size))?,
    };
    let m = geometry.m();

    let matched = DictionaryConfig::matched(&geometry);
    let bios_grid = match raw.bios_grid.as_deref().unwrap_or("restricted") {
        "restricted" => BiosGrid::Restricted,
        "full" => BiosGrid::Full,
        other => {
            return Err(invalid(
                "bios_grid",
                format!("expected restricted|full, got {other:?}"),
            ))
        }
    };
    let dictionary = DictionaryConfig {
        g_bs: positive("g_bs", raw.g_bs.unwrap_or(matched.g_bs))?,
        g_ue: positive("g_ue", raw.g_ue.unwrap_or(matched.g_ue))?,
        g_x: positive("g_x", raw.g_x.unwrap_or(matched.g_x))?,
        g_y: positive("g_y", raw.g_y.unwrap_or(matched.g_y))?,
        bios_grid,
    };

    let epsilon = raw.epsilon.unwrap_or(0.5);
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(invalid(
            "epsilon",
            format!("must lie in (0, 1), got {epsilon}"),
        ));
    }
    let k_fle = raw.k_fle.unwrap_or(2);
    let k_fra = raw.k_fra.unwrap_or(3);
    if k_fle + k_fra == 0 {
        return Err(invalid("k_fle", "at least one UE is required"));
    }

    let p = positive("p", raw.p.unwrap_or(5))?;
    let q = positive("q", raw.q.unwrap_or(5))?;
    if p > geometry.n_bs.min(m) {
        return Err(invalid(
            "p",
            format!("rank {p} exceeds min(N_BS, M) = {}", geometry.n_bs.min(m)),
        ));
    }
    if q > geometry.n_ue.min(m) {
        return Err(invalid(
            "q",
            format!("rank {q} exceeds min(M, N_UE) = {}", geometry.n_ue.min(m)),
        ));
    }

    let upsilon_large = positive("upsilon_large", raw.upsilon_large.unwrap_or(10_000))?;
    let upsilon_small = positive("upsilon_small", raw.upsilon_small.unwrap_or(2_500))?;
    if upsilon_large % upsilon_small != 0 {
        return Err(invalid(
            "upsilon_small",
            format!("must divide upsilon_large = {upsilon_large}"),
        ));
    }
    let tau = upsilon_large / upsilon_small;

    let t_g = positive("t_g", raw.t_g.unwrap_or(900))?;
    let t_h = positive("t_h", raw.t_h.unwrap_or(75))?;

    let (pnr_db, snr_db) = match (raw.pnr_db, raw.snr_db) {
        (Some(p), Some(s)) => (p, s),
        (Some(p), None) => (p, p - PNR_OFFSET_DB),
        (None, Some(s)) => (s + PNR_OFFSET_DB, s),
        (None, None) => (20.0, 10.0),
    };
    if pnr_db.is_nan() || pnr_db == f64::NEG_INFINITY {
        return Err(invalid("pnr_db", "must be a number or +inf"));
    }
    if !snr_db.is_finite() {
        return Err(invalid("snr_db", "must be finite"));
    }

    let mode: RisMode = raw
        .mode
        .as_deref()
        .unwrap_or("bios")
        .parse()
        .map_err(|e: crate::error::Error| invalid("mode", e.to_string()))?;
    let estimator: Estimator = raw.estimator.as_deref().unwrap_or("htt-mo").parse()?;

    let k = k_fle + k_fra;
    let k_c = match raw.k_c {
        None => None,
        Some(0) => return Err(invalid("k_c", "is one-based; 0 is not a UE")),
        Some(kc) if kc > k => {
            return Err(invalid("k_c", format!("UE {kc} does not exist (K = {k})")))
        }
        Some(kc) if kc <= k_fle => return Err(invalid(
            "k_c",
            format!(
                "UE {kc} is on the reflection side; the large timescale needs a refraction-side UE"
            ),
        )),
        Some(kc) => Some(kc - 1),
    };
    if estimator == Estimator::HttMo && k_fra == 0 {
        return Err(invalid(
            "k_fra",
            "htt-mo needs at least one refraction-side UE for the large timescale",
        ));
    }

    if estimator == Estimator::HttMo && mode != RisMode::Bios {
        return Err(invalid(
            "mode",
            "htt-mo training assumes the bilayer surface; use a perfect-csi or ls-bound estimator",
        ));
    }

    let n_s = positive("n_s", raw.n_s.unwrap_or(1))?;
    if n_s > geometry.n_ue.min(geometry.n_bs) {
        return Err(invalid("n_s", "exceeds the antenna count"));
    }

    let de = EstimationConfig::default();
    for (field, v) in [("upsilon_g", raw.upsilon_g), ("upsilon_h", raw.upsilon_h)] {
        if let Some(v) = v {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(field, "must be >= 0"));
            }
        }
    }
    let outer_tol = raw.outer_tol.unwrap_or(de.outer_rel_tol);
    if !(outer_tol >= 0.0) {
        return Err(invalid("outer_tol", "must be >= 0"));
    }
    let estimation = EstimationConfig {
        t_g,
        t_h,
        tau,
        p,
        q,
        upsilon_g: raw.upsilon_g,
        upsilon_h: raw.upsilon_h,
        k_c,
        inner: ArmijoOptions {
            max_iters: positive(
                "inner_max_iters",
                raw.inner_max_iters.unwrap_or(de.inner.max_iters),
            )?,
            ..de.inner
        },
        small: ArmijoOptions {
            max_iters: positive(
                "small_max_iters",
                raw.small_max_iters.unwrap_or(de.small.max_iters),
            )?,
            ..de.small
        },
        outer_max_iters: positive(
            "outer_max_iters",
            raw.outer_max_iters.unwrap_or(de.outer_max_iters),
        )?,
        outer_rel_tol: outer_tol,
        rebalance: de.rebalance,
    };

    let dw = WmmseOptions::default();
    let wmmse_tol = raw.wmmse_tol.unwrap_or(dw.rel_tol);
    if !(wmmse_tol >= 0.0) {
        return Err(invalid("wmmse_tol", "must be >= 0"));
    }
    let wmmse = WmmseOptions {
        max_iters: positive(
            "wmmse_max_iters",
            raw.wmmse_max_iters.unwrap_or(dw.max_iters),
        )?,
        rel_tol: wmmse_tol,
        cd_sweeps: positive("cd_sweeps", raw.cd_sweeps.unwrap_or(dw.cd_sweeps))?,
        n_s,
    };

    Ok(SystemConfig {
        seed: raw.seed.unwrap_or(0),
        trials: positive("trials", raw.trials.unwrap_or(DEFAULT_TRIALS))?,
        geometry,
        dictionary,
        epsilon,
        k_fle,
        k_fra,
        p,
        q,
        upsilon_large,
        upsilon_small,
        tau,
        t_g,
        t_h,
        pnr_db,
        snr_db,
        k_c,
        n_s,
        mode,
        estimator,
        estimation,
        wmmse,
    })
}

/// Keys of a raw config that are set, for diagnostics.
pub fn set_keys(raw: &RawConfig) -> BTreeMap<String, String> {
    match toml::Value::try_from(raw) {
        Ok(toml::Value::Table(t)) => t.into_iter().map(|(k, v)| (k, v.to_string())).collect(),
        _ => BTreeMap::new(),
    }
}
