//! Seeded Monte Carlo runs of the full pipeline (large-timescale fit,
//! per-UE small-timescale fits, downlink optimization, overhead-discounted
//! rate), figure presets and result files.
//!
//! Random streams: trial `t` of master seed `s` gets
//! `seed_t = splitmix64(s ^ splitmix64(t))`. Each stage then seeds its own
//! ChaCha8 generator from `seed_t` folded through splitmix64 together with
//! a stage tag and the parameters the stage depends on (pilot lengths, PNR
//! bits, frame and UE indices). Stages therefore draw the same numbers no
//! matter which other sweep points ran before them, and points that share a
//! parameter (e.g. every `T_H` of one `T_G`) share the draws.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beamforming::{sum_rate, wmmse_cd_solve, DownlinkSystem, RateReport};
use crate::config::{Estimator, SystemConfig, PNR_OFFSET_DB};
use crate::error::{Error, Result};
use crate::estimator::{
    estimate_large_timescale, estimate_small_timescale, ls_overhead_bound, nmse_avg, nmse_kron,
    total_overhead, UplinkOperator,
};
use crate::geometry::{build_dictionaries, near_field_l, ChannelRealization, Dictionaries, Side};
use crate::linalg::CMat;
use crate::signal::{random_phase_schedule, random_pilots, simulate_uplink, RisMode};

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn trial_seed(master: u64, trial: usize) -> u64 {
    splitmix64(master ^ splitmix64(trial as u64))
}

/// Generator for one stage of one trial.
pub fn stream(trial_seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let seed = parts
        .iter()
        .fold(trial_seed, |acc, &p| splitmix64(acc ^ splitmix64(p)));
    ChaCha8Rng::seed_from_u64(seed)
}

const TAG_CHANNEL: u64 = 1;
const TAG_LARGE: u64 = 2;
const TAG_SMALL: u64 = 3;
const TAG_BEAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "t_g")]
    TG,
    #[serde(rename = "t_h")]
    TH,
    #[serde(rename = "snr")]
    Snr,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t_g" | "tg" => Ok(Self::TG),
            "t_h" | "th" => Ok(Self::TH),
            "snr" | "snr_db" => Ok(Self::Snr),
            _ => Err(Error::InvalidArgument(format!(
                "unknown sweep axis {s:?} (t_g | t_h | snr)"
            ))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TG => "t_g",
            Self::TH => "t_h",
            Self::Snr => "snr",
        })
    }
}

/// One series of a sweep: a base configuration and the values of one axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub base: SystemConfig,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// `(T_G, T_H)` pairs evaluated at every sweep value; empty keeps the
    /// base lengths.
    pub overhead_grid: Vec<(usize, usize)>,
    /// On SNR sweeps, PNR = SNR + offset; `None` keeps the base PNR.
    pub pnr_offset_db: Option<f64>,
}

impl Scenario {
    pub fn new(
        name: impl Into<String>,
        base: SystemConfig,
        axis: SweepAxis,
        values: Vec<f64>,
    ) -> Self {
        Self {
            name: name.into(),
            base,
            axis,
            values,
            overhead_grid: Vec::new(),
            pnr_offset_db: Some(PNR_OFFSET_DB),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{}: no sweep values",
                self.name
            )));
        }
        for &v in &self.values {
            let ok = match self.axis {
                SweepAxis::TG | SweepAxis::TH => v >= 1.0 && v.fract() == 0.0,
                SweepAxis::Snr => v.is_finite(),
            };
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "{}: invalid {} value {v}",
                    self.name, self.axis
                )));
            }
        }
        if self.overhead_grid.iter().any(|&(g, h)| g == 0 || h == 0) {
            return Err(Error::InvalidArgument(format!(
                "{}: zero pilot length in grid",
                self.name
            )));
        }
        for &v in &self.values {
            for cfg in self.point_configs(v) {
                let cfg = cfg.revalidate()?;
                let t = charged_overhead(&cfg);
                if t > cfg.upsilon_large && cfg.estimator != Estimator::LsBound {
                    return Err(Error::OverheadExceedsFrame {
                        t_tot: t,
                        upsilon: cfg.upsilon_large,
                    });
                }
            }
        }
        Ok(())
    }

    /// Configurations evaluated at one sweep value.
    pub fn point_configs(&self, value: f64) -> Vec<SystemConfig> {
        let mut cfg = self.base.clone();
        match self.axis {
            SweepAxis::TG => cfg.t_g = value as usize,
            SweepAxis::TH => cfg.t_h = value as usize,
            SweepAxis::Snr => {
                cfg.snr_db = value;
                if let Some(off) = self.pnr_offset_db {
                    cfg.pnr_db = value + off;
                }
            }
        }
        if self.overhead_grid.is_empty() {
            return vec![cfg];
        }
        self.overhead_grid
            .iter()
            .map(|&(t_g, t_h)| SystemConfig {
                t_g,
                t_h,
                ..cfg.clone()
            })
            .collect()
    }
}

/// Pilot count charged against the frame for a configuration.
pub fn charged_overhead(cfg: &SystemConfig) -> usize {
    match cfg.estimator {
        Estimator::HttMo | Estimator::PerfectCsiOverhead => {
            total_overhead(cfg.t_g, cfg.t_h, cfg.tau, cfg.k())
        }
        Estimator::PerfectCsi => 0,
        Estimator::LsBound => ls_overhead_for(cfg),
    }
}

/// Least-squares pilot count of every served UE's cascaded channel. Single
/// layer surfaces see Khatri-Rao channels only; the reflective one serves
/// only its own side.
pub fn ls_overhead_for(cfg: &SystemConfig) -> usize {
    let (m, n) = (cfg.m(), cfg.geometry.n_ue);
    match cfg.mode {
        RisMode::Bios => ls_overhead_bound(cfg.k_fle, cfg.k_fra, m, n, cfg.tau),
        RisMode::Ios => ls_overhead_bound(cfg.k(), 0, m, n, cfg.tau),
        RisMode::Irs => ls_overhead_bound(cfg.k_fle, 0, m, n, cfg.tau),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: String,
    pub seed: u64,
    pub trial: usize,
    pub sweep_value: f64,
    pub pnr_db: f64,
    pub snr_db: f64,
    pub t_g: usize,
    pub t_h: usize,
    pub nmse_fra: f64,
    pub nmse_avg: f64,
    pub sum_rate: f64,
    pub iterations: usize,
    pub wall_ms: f64,
}

pub const CSV_COLUMNS: [&str; 13] = [
    "scenario",
    "seed",
    "trial",
    "sweep_value",
    "pnr_db",
    "snr_db",
    "t_g",
    "t_h",
    "nmse_fra",
    "nmse_avg",
    "sum_rate",
    "iterations",
    "wall_ms",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// When false, `wall_ms` is written as 0 so output is byte-reproducible.
    pub record_timing: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            record_timing: true,
        }
    }
}

#[derive(Debug, Clone)]
struct LargeOutcome {
    g_hat: CMat,
    nmse_fra: f64,
    iterations: usize,
}

/// Everything produced for one configuration within one trial.
#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    pub nmse_fra: f64,
    /// `[frame][ue]`.
    pub nmse_per_ue: Vec<Vec<f64>>,
    pub nmse_avg: f64,
    /// One report per small timescale, scored on the true channels.
    pub rates: Vec<RateReport>,
    /// Mean over small timescales.
    pub sum_rate: f64,
    pub t_tot: usize,
    pub iterations: usize,
}

/// Channels of one trial plus the large-timescale fits computed so far.
pub struct Trial {
    pub index: usize,
    pub seed: u64,
    /// One realization per small timescale; all share `G`.
    pub frames: Vec<ChannelRealization>,
    dicts: Dictionaries,
    large: HashMap<(usize, u64), LargeOutcome>,
}

impl Trial {
    /// Draws the channels of trial `index` under `base`. Only geometry,
    /// UE counts, path counts and `τ` of `base` matter here.
    pub fn new(base: &SystemConfig, index: usize) -> Result<Self> {
        let seed = trial_seed(base.seed, index);
        let geo = &base.geometry;
        let l = near_field_l(geo)?;
        let dicts = build_dictionaries(&base.dictionary, geo)?;
        let mut rng = stream(seed, &[TAG_CHANNEL]);
        let first = ChannelRealization::draw(&mut rng, geo, &l, &base.sides(), base.p, base.q)?;
        let mut frames = Vec::with_capacity(base.tau);
        for _ in 1..base.tau {
            let next = first.redraw_ues(&mut rng, geo, base.q)?;
            frames.push(next);
        }
        frames.insert(0, first);
        Ok(Self {
            index,
            seed,
            frames,
            dicts,
            large: HashMap::new(),
        })
    }

    fn large_fit(&mut self, cfg: &SystemConfig) -> Result<LargeOutcome> {
        let key = (cfg.t_g, cfg.pnr_db.to_bits());
        if let Some(hit) = self.large.get(&key) {
            return Ok(hit.clone());
        }
        let frame = &self.frames[0];
        let est_cfg = cfg.estimation_config();
        let kc = est_cfg.selected_ue(&frame.sides)?;
        let mut rng = stream(
            self.seed,
            &[TAG_LARGE, cfg.t_g as u64, cfg.pnr_db.to_bits()],
        );
        let m = cfg.m();
        let sched = random_phase_schedule(&mut rng, cfg.t_g, m);
        let pilots = random_pilots(&mut rng, cfg.t_g, cfg.geometry.n_ue, cfg.pnr_db);
        let rb = simulate_uplink(
            &frame.g,
            &frame.h[kc],
            &frame.l,
            &sched,
            &pilots,
            cfg.epsilon,
            Side::Fra,
            kc,
            &mut rng,
        )?;
        let op = UplinkOperator::new(&rb, &sched, &pilots, &frame.l, cfg.epsilon)?;
        let s2 = pilots.sigma2();
        let (ug, uh) = (
            est_cfg.upsilon_g(s2, &self.dicts),
            est_cfg.upsilon_h(s2, &self.dicts),
        );
        let est = estimate_large_timescale(&op, &self.dicts, &est_cfg, ug, uh, &mut rng)?;
        let g_hat = est.g_hat.to_matrix();
        let nmse_fra = nmse_kron(&frame.g, &frame.h[kc], &g_hat, &est.h_hat.to_matrix())?;
        let out = LargeOutcome {
            g_hat,
            nmse_fra,
            iterations: est.outer_iterations,
        };
        self.large.insert(key, out.clone());
        Ok(out)
    }

    fn small_fit(
        &self,
        cfg: &SystemConfig,
        g_hat: &CMat,
        frame: usize,
        k: usize,
    ) -> Result<(CMat, usize)> {
        let ch = &self.frames[frame];
        let mut rng = stream(
            self.seed,
            &[
                TAG_SMALL,
                frame as u64,
                k as u64,
                cfg.t_h as u64,
                cfg.pnr_db.to_bits(),
            ],
        );
        let sched = random_phase_schedule(&mut rng, cfg.t_h, cfg.m());
        let pilots = random_pilots(&mut rng, cfg.t_h, cfg.geometry.n_ue, cfg.pnr_db);
        let rb = simulate_uplink(
            &ch.g,
            &ch.h[k],
            &ch.l,
            &sched,
            &pilots,
            cfg.epsilon,
            ch.sides[k],
            k,
            &mut rng,
        )?;
        let op = UplinkOperator::new(&rb, &sched, &pilots, &ch.l, cfg.epsilon)?;
        let est_cfg = cfg.estimation_config();
        let uh = est_cfg.upsilon_h(pilots.sigma2(), &self.dicts);
        let est = estimate_small_timescale(&op, g_hat, &self.dicts, &est_cfg, uh, &mut rng)?;
        Ok((est.h_hat.to_matrix(), est.iterations))
    }

    /// Channel estimation only.
    pub fn estimate(&mut self, cfg: &SystemConfig) -> Result<(Evaluation, Vec<(CMat, Vec<CMat>)>)> {
        let mut iterations = 0;
        let mut estimates = Vec::with_capacity(self.frames.len());
        let (nmse_fra, nmse_per_ue) = if cfg.estimator == Estimator::HttMo {
            let large = self.large_fit(cfg)?;
            iterations += large.iterations;
            let mut per = Vec::with_capacity(self.frames.len());
            for i in 0..self.frames.len() {
                let ch = &self.frames[i];
                let mut hs = Vec::with_capacity(ch.h.len());
                let mut row = Vec::with_capacity(ch.h.len());
                for k in 0..ch.h.len() {
                    let (h_hat, it) = self.small_fit(cfg, &large.g_hat, i, k)?;
                    iterations += it;
                    row.push(nmse_kron(&ch.g, &ch.h[k], &large.g_hat, &h_hat)?);
                    hs.push(h_hat);
                }
                per.push(row);
                estimates.push((large.g_hat.clone(), hs));
            }
            (large.nmse_fra, per)
        } else {
            for ch in &self.frames {
                estimates.push((ch.g.clone(), ch.h.clone()));
            }
            (0.0, vec![vec![0.0; cfg.k()]; self.frames.len()])
        };
        let flat: Vec<f64> = nmse_per_ue.iter().flatten().copied().collect();
        let eval = Evaluation {
            nmse_fra,
            nmse_avg: nmse_avg(&flat)?,
            nmse_per_ue,
            rates: Vec::new(),
            sum_rate: 0.0,
            t_tot: charged_overhead(cfg),
            iterations,
        };
        Ok((eval, estimates))
    }

    /// Estimation, downlink optimization on the estimates and scoring on
    /// the true channels.
    pub fn evaluate(&mut self, cfg: &SystemConfig) -> Result<Evaluation> {
        let (mut eval, estimates) = self.estimate(cfg)?;
        let sigma_d2 = 10f64.powf(-cfg.snr_db / 10.0);
        let surface = cfg.surface();
        let t_tot = eval.t_tot.min(cfg.upsilon_large);
        for (i, (g_hat, h_hat)) in estimates.into_iter().enumerate() {
            let ch = &self.frames[i];
            let sys_est = DownlinkSystem::new(
                g_hat,
                h_hat,
                ch.sides.clone(),
                ch.l.clone(),
                surface,
                sigma_d2,
            )?;
            let mut rng = stream(self.seed, &[TAG_BEAM, i as u64]);
            let out = wmmse_cd_solve(&sys_est, &cfg.wmmse, &mut rng)?;
            eval.iterations += out.iterations;
            let sys_true = DownlinkSystem::new(
                ch.g.clone(),
                ch.h.clone(),
                ch.sides.clone(),
                ch.l.clone(),
                surface,
                sigma_d2,
            )?;
            let he = sys_true.effective_channels(&out.state.phi_d1, &out.state.phi_d2);
            eval.rates.push(sum_rate(
                &he,
                &out.state,
                sigma_d2,
                t_tot,
                cfg.upsilon_large,
            )?);
        }
        eval.sum_rate =
            eval.rates.iter().map(|r| r.sum_rate).sum::<f64>() / eval.rates.len() as f64;
        Ok(eval)
    }
}

/// Runs every trial of a scenario; rows come back ordered by trial, sweep
/// value and grid point regardless of scheduling.
pub fn run_scenario(sc: &Scenario, opts: &RunOptions) -> Result<Vec<ResultRow>> {
    sc.validate()?;
    let per_trial: Vec<Vec<ResultRow>> = (0..sc.base.trials)
        .into_par_iter()
        .map(|t| run_trial(sc, t, opts))
        .collect::<Result<_>>()?;
    Ok(per_trial.into_iter().flatten().collect())
}

fn run_trial(sc: &Scenario, index: usize, opts: &RunOptions) -> Result<Vec<ResultRow>> {
    let mut trial = Trial::new(&sc.base, index)?;
    let mut rows = Vec::new();
    for &value in &sc.values {
        for cfg in sc.point_configs(value) {
            let start = Instant::now();
            let eval = trial.evaluate(&cfg)?;
            let wall_ms = if opts.record_timing {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            };
            rows.push(ResultRow {
                scenario: sc.name.clone(),
                seed: sc.base.seed,
                trial: index,
                sweep_value: value,
                pnr_db: cfg.pnr_db,
                snr_db: cfg.snr_db,
                t_g: cfg.t_g,
                t_h: cfg.t_h,
                nmse_fra: eval.nmse_fra,
                nmse_avg: eval.nmse_avg,
                sum_rate: eval.sum_rate,
                iterations: eval.iterations,
                wall_ms,
            });
        }
    }
    Ok(rows)
}

pub const PRESETS: [&str; 6] = ["fig3a", "fig3b", "fig4a", "fig4b", "fig5a", "fig5b"];

fn steps(from: usize, to: usize, step: usize) -> Vec<f64> {
    (from..=to).step_by(step).map(|v| v as f64).collect()
}

/// Series of a figure preset built on `base` (seed, trials and any other
/// overrides carry over).
pub fn preset(name: &str, base: &SystemConfig) -> Result<Vec<Scenario>> {
    let with = |f: &dyn Fn(&mut SystemConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let pnrs = [0.0, 10.0, 20.0, 30.0];
    let snrs = steps(0, 30, 5)
        .into_iter()
        .map(|v| v - 10.0)
        .collect::<Vec<_>>();
    let mut out = Vec::new();
    match name {
        "fig3a" => {
            for pnr in pnrs {
                let cfg = with(&|c| {
                    c.pnr_db = pnr;
                    c.snr_db = pnr - PNR_OFFSET_DB;
                    c.estimator = Estimator::HttMo;
                });
                out.push(Scenario::new(
                    format!("fig3a/pnr{pnr}"),
                    cfg,
                    SweepAxis::TG,
                    steps(100, 1500, 200),
                ));
            }
        }
        "fig3b" => {
            for pnr in pnrs {
                let cfg = with(&|c| {
                    c.pnr_db = pnr;
                    c.snr_db = pnr - PNR_OFFSET_DB;
                    c.t_g = 900;
                    c.estimator = Estimator::HttMo;
                });
                out.push(Scenario::new(
                    format!("fig3b/pnr{pnr}"),
                    cfg,
                    SweepAxis::TH,
                    steps(30, 180, 30),
                ));
            }
        }
        "fig4a" | "fig4b" => {
            for est in [Estimator::HttMo, Estimator::PerfectCsiOverhead] {
                let cfg = with(&|c| {
                    c.estimator = est;
                    c.pnr_db = c.snr_db + PNR_OFFSET_DB;
                    if name == "fig4a" {
                        c.t_h = 150;
                    } else {
                        c.t_g = 900;
                    }
                });
                let (axis, values) = if name == "fig4a" {
                    (SweepAxis::TG, steps(100, 1500, 200))
                } else {
                    (
                        SweepAxis::TH,
                        vec![25.0, 50.0, 75.0, 100.0, 150.0, 200.0, 300.0],
                    )
                };
                out.push(Scenario::new(format!("{name}/{est}"), cfg, axis, values));
            }
        }
        "fig5a" => {
            for mode in [RisMode::Bios, RisMode::Ios, RisMode::Irs] {
                let cfg = with(&|c| {
                    c.mode = mode;
                    c.estimator = Estimator::PerfectCsi;
                });
                out.push(Scenario::new(
                    format!("fig5a/{mode}"),
                    cfg,
                    SweepAxis::Snr,
                    snrs.clone(),
                ));
            }
        }
        "fig5b" => {
            let cfg = with(&|c| {
                c.mode = RisMode::Bios;
                c.estimator = Estimator::HttMo;
            });
            let mut sc = Scenario::new("fig5b/bios/htt-mo", cfg, SweepAxis::Snr, snrs.clone());
            for t_g in (300..=1500).step_by(150) {
                for t_h in (25..=200).step_by(25) {
                    sc.overhead_grid.push((t_g, t_h));
                }
            }
            out.push(sc);
            for mode in [RisMode::Ios, RisMode::Irs] {
                let cfg = with(&|c| {
                    c.mode = mode;
                    c.estimator = Estimator::LsBound;
                });
                out.push(Scenario::new(
                    format!("fig5b/{mode}/ls-bound"),
                    cfg,
                    SweepAxis::Snr,
                    snrs.clone(),
                ));
            }
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "unknown preset {name:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Self::Json,
            _ => Self::Csv,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(Error::InvalidArgument(format!("unknown format {s:?}"))),
        }
    }
}

pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_COLUMNS {
        return Err(Error::InvalidArgument(format!(
            "unexpected CSV header {header:?}"
        )));
    }
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

pub fn write_json<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, rows)?;
    Ok(())
}

pub fn read_json<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    Ok(serde_json::from_reader(input)?)
}

pub fn emit_results(rows: &[ResultRow], format: Format, path: &Path) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        Format::Csv => write_csv(rows, file),
        Format::Json => write_json(rows, file),
    }
}

pub fn load_results(path: &Path) -> Result<Vec<ResultRow>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    match Format::from_path(path) {
        Format::Csv => read_csv(file),
        Format::Json => read_json(file),
    }
}

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub sweep_value: f64,
    pub t_g: usize,
    pub t_h: usize,
    pub trials: usize,
    pub nmse_fra_mean: f64,
    pub nmse_fra_se: f64,
    pub nmse_avg_mean: f64,
    pub nmse_avg_se: f64,
    pub sum_rate_mean: f64,
    pub sum_rate_se: f64,
}

/// Trial means per (scenario, sweep value, T_G, T_H), in first-seen order.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    type Key = (String, u64, usize, usize);
    let mut order: Vec<Key> = Vec::new();
    let mut groups: HashMap<Key, Vec<&ResultRow>> = HashMap::new();
    for r in rows {
        let key = (r.scenario.clone(), r.sweep_value.to_bits(), r.t_g, r.t_h);
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let col =
                |f: fn(&ResultRow) -> f64| mean_se(&g.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (nf, nfs) = col(|r| r.nmse_fra);
            let (na, nas) = col(|r| r.nmse_avg);
            let (sr, srs) = col(|r| r.sum_rate);
            SummaryRow {
                scenario: key.0,
                sweep_value: f64::from_bits(key.1),
                t_g: key.2,
                t_h: key.3,
                trials: g.len(),
                nmse_fra_mean: nf,
                nmse_fra_se: nfs,
                nmse_avg_mean: na,
                nmse_avg_se: nas,
                sum_rate_mean: sr,
                sum_rate_se: srs,
            }
        })
        .collect()
}

/// Keeps, per (scenario, sweep value), the pilot lengths with the highest
/// mean sum rate.
pub fn best_overhead(summary: &[SummaryRow]) -> Vec<SummaryRow> {
    let mut out: Vec<SummaryRow> = Vec::new();
    for s in summary {
        match out
            .iter_mut()
            .find(|o| o.scenario == s.scenario && o.sweep_value == s.sweep_value)
        {
            Some(o) if s.sum_rate_mean > o.sum_rate_mean => *o = s.clone(),
            Some(_) => {}
            None => out.push(s.clone()),
        }
    }
    out
}

pub fn write_summary_csv<W: Write>(summary: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in summary {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{validate_config, RawConfig};

    fn toy(extra: &str) -> SystemConfig {
        let text = format!(
            "n_bs = 4\nn_ue = 2\nm_x = 2\nm_y = 2\np = 1\nq = 1\nk_fle = 1\nk_fra = 1\n\
             upsilon_large = 2000\nupsilon_small = 1000\nt_g = 60\nt_h = 20\ntrials = 2\n\
             outer_max_iters = 10\nwmmse_max_iters = 20\n{extra}"
        );
        validate_config(&RawConfig::from_toml_str(&text).unwrap()).unwrap()
    }

    fn row(scenario: &str, v: f64, rate: f64) -> ResultRow {
        ResultRow {
            scenario: scenario.into(),
            seed: 1,
            trial: 0,
            sweep_value: v,
            pnr_db: 20.0,
            snr_db: 10.0,
            t_g: 900,
            t_h: 75,
            nmse_fra: 0.125,
            nmse_avg: 0.1 + v,
            sum_rate: rate,
            iterations: 3,
            wall_ms: 1.5,
        }
    }

    #[test]
    fn splitmix_reference_values() {
        // First outputs of the reference generator seeded with 0.
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64(0x9E37_79B9_7F4A_7C15), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn streams_are_keyed() {
        use rand::Rng;
        let a: u64 = stream(7, &[1, 2]).random();
        assert_eq!(a, stream(7, &[1, 2]).random::<u64>());
        assert_ne!(a, stream(7, &[2, 1]).random::<u64>());
        assert_ne!(a, stream(8, &[1, 2]).random::<u64>());
        assert_ne!(trial_seed(0, 0), trial_seed(0, 1));
    }

    #[test]
    fn point_configs_apply_axis() {
        let base = toy("");
        let sc = Scenario::new("s", base.clone(), SweepAxis::Snr, vec![5.0]);
        let c = &sc.point_configs(5.0)[0];
        assert_eq!((c.snr_db, c.pnr_db), (5.0, 15.0));
        let sc = Scenario::new("s", base.clone(), SweepAxis::TH, vec![40.0]);
        assert_eq!(sc.point_configs(40.0)[0].t_h, 40);
        let mut sc = Scenario::new("s", base, SweepAxis::TG, vec![30.0]);
        sc.overhead_grid = vec![(10, 5), (20, 6)];
        let cs = sc.point_configs(30.0);
        assert_eq!(
            cs.iter().map(|c| (c.t_g, c.t_h)).collect::<Vec<_>>(),
            vec![(10, 5), (20, 6)]
        );
    }

    #[test]
    fn scenario_validation() {
        let base = toy("");
        assert!(Scenario::new("s", base.clone(), SweepAxis::TG, vec![])
            .validate()
            .is_err());
        assert!(Scenario::new("s", base.clone(), SweepAxis::TH, vec![2.5])
            .validate()
            .is_err());
        assert!(Scenario::new("s", base.clone(), SweepAxis::TH, vec![0.0])
            .validate()
            .is_err());
        // 60 + 2·2·500 > 2000.
        assert!(matches!(
            Scenario::new("s", base.clone(), SweepAxis::TH, vec![500.0]).validate(),
            Err(Error::OverheadExceedsFrame { .. })
        ));
        assert!(Scenario::new("s", base, SweepAxis::Snr, vec![-5.0, 0.0])
            .validate()
            .is_ok());
    }

    #[test]
    fn overhead_accounting() {
        let c = SystemConfig::default();
        assert_eq!(charged_overhead(&c), 900 + 4 * 5 * 75);
        let c2 = SystemConfig {
            estimator: Estimator::PerfectCsi,
            ..c.clone()
        };
        assert_eq!(charged_overhead(&c2), 0);
        let ls = SystemConfig {
            estimator: Estimator::LsBound,
            ..c.clone()
        };
        assert_eq!(charged_overhead(&ls), 233_632);
        let irs = SystemConfig {
            mode: RisMode::Irs,
            ..ls.clone()
        };
        assert_eq!(charged_overhead(&irs), 4 * 2 * 49 * 8);
    }

    #[test]
    fn toy_run_is_deterministic_and_complete() {
        let base = toy("");
        let sc = Scenario::new("toy", base, SweepAxis::TH, vec![10.0, 20.0]);
        let opts = RunOptions {
            record_timing: false,
        };
        let a = run_scenario(&sc, &opts).unwrap();
        let b = run_scenario(&sc, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_eq!(
            a.iter().map(|r| (r.trial, r.t_h)).collect::<Vec<_>>(),
            vec![(0, 10), (0, 20), (1, 10), (1, 20)]
        );
        for r in &a {
            assert!(r.nmse_fra.is_finite() && r.nmse_avg.is_finite() && r.sum_rate >= 0.0);
            assert_eq!(r.wall_ms, 0.0);
        }
        // T_H sweeps share the large-timescale fit.
        assert_eq!(a[0].nmse_fra, a[1].nmse_fra);
    }

    #[test]
    fn evaluation_overhead_matches_rate_factor() {
        let base = toy("");
        let mut trial = Trial::new(&base, 0).unwrap();
        let eval = trial.evaluate(&base).unwrap();
        assert_eq!(
            eval.t_tot,
            total_overhead(base.t_g, base.t_h, base.tau, base.k())
        );
        for r in &eval.rates {
            assert_eq!(
                r.overhead_factor,
                1.0 - eval.t_tot as f64 / base.upsilon_large as f64
            );
        }
        assert_eq!(eval.nmse_per_ue.len(), base.tau);
    }

    #[test]
    fn perfect_csi_has_zero_error_and_no_overhead() {
        let base = toy("estimator = \"perfect-csi\"");
        let mut trial = Trial::new(&base, 0).unwrap();
        let eval = trial.evaluate(&base).unwrap();
        assert_eq!((eval.nmse_fra, eval.nmse_avg, eval.t_tot), (0.0, 0.0, 0));
        assert!(eval.rates.iter().all(|r| r.overhead_factor == 1.0));
        let ls = toy("estimator = \"ls-bound\"");
        let e = Trial::new(&ls, 0).unwrap().evaluate(&ls).unwrap();
        assert!(e.sum_rate >= 0.0 && e.sum_rate <= eval.sum_rate + 1e-12);
    }

    #[test]
    fn trial_frames_share_g() {
        let base = toy("");
        let t = Trial::new(&base, 3).unwrap();
        assert_eq!(t.frames.len(), base.tau);
        assert_eq!(t.frames[0].g, t.frames[1].g);
        assert_ne!(t.frames[0].h[0], t.frames[1].h[0]);
    }

    #[test]
    fn csv_and_json_round_trip() {
        let rows = vec![row("a", 1.0, 2.5), row("b/c", 0.1, 1.0 / 3.0)];
        let mut csv_buf = Vec::new();
        write_csv(&rows, &mut csv_buf).unwrap();
        let text = String::from_utf8(csv_buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(read_csv(&csv_buf[..]).unwrap(), rows);
        let mut json_buf = Vec::new();
        write_json(&rows, &mut json_buf).unwrap();
        assert_eq!(read_json(&json_buf[..]).unwrap(), rows);

        let mut empty = Vec::new();
        write_csv(&[], &mut empty).unwrap();
        assert_eq!(
            String::from_utf8(empty.clone()).unwrap().trim_end(),
            CSV_COLUMNS.join(",")
        );
        assert!(read_csv(&empty[..]).unwrap().is_empty());
    }

    #[test]
    fn summary_statistics() {
        let rows = vec![
            row("a", 1.0, 1.0),
            row("a", 1.0, 2.0),
            row("a", 1.0, 3.0),
            row("a", 2.0, 5.0),
        ];
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].trials, 3);
        assert!((s[0].sum_rate_mean - 2.0).abs() < 1e-15);
        assert!((s[0].sum_rate_se - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[1].sum_rate_se, 0.0);
        assert_eq!(mean_se(&[]).0.is_nan(), true);
    }

    #[test]
    fn best_overhead_picks_max_rate() {
        let mut a = row("x", 1.0, 1.0);
        let mut b = row("x", 1.0, 4.0);
        b.t_h = 100;
        a.t_h = 50;
        let c = row("x", 2.0, 0.5);
        let best = best_overhead(&summarize(&[a, b, c]));
        assert_eq!(best.len(), 2);
        assert_eq!(best[0].t_h, 100);
    }

    #[test]
    fn presets_are_well_formed() {
        let base = SystemConfig::default();
        for name in PRESETS {
            let scs = preset(name, &base).unwrap();
            assert!(!scs.is_empty());
            for sc in &scs {
                sc.validate().unwrap();
                assert!(sc.name.starts_with(name));
            }
        }
        assert!(preset("fig9", &base).is_err());
        let f5 = preset("fig5b", &base).unwrap();
        assert_eq!(f5[0].overhead_grid.len(), 9 * 8);
    }
}
