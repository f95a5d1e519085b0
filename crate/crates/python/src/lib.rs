//! Python module `bios_mimo`: configuration checks, overhead formulas and
//! scenario runs. Results come back as lists of plain dicts.

use bios_core::config::{validate_config, RawConfig, SystemConfig};
use bios_core::estimator;
use bios_core::experiment::{self, ResultRow, RunOptions, Scenario, SweepAxis, Trial};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

/// Builds a validated configuration from TOML text plus `key=value`
/// overrides (values are TOML literals).
pub fn build_config(
    toml_text: &str,
    overrides: &[(String, String)],
) -> Result<SystemConfig, String> {
    let mut raw = RawConfig::from_toml_str(toml_text).map_err(|e| e.to_string())?;
    for (k, v) in overrides {
        raw.set(k, v).map_err(|e| e.to_string())?;
    }
    validate_config(&raw).map_err(|e| e.to_string())
}

pub fn sweep_rows(
    cfg: SystemConfig,
    axis: &str,
    values: Vec<f64>,
    timing: bool,
) -> Result<Vec<ResultRow>, String> {
    let axis: SweepAxis = axis.parse().map_err(|e: bios_core::Error| e.to_string())?;
    let sc = Scenario::new("python", cfg, axis, values);
    experiment::run_scenario(
        &sc,
        &RunOptions {
            record_timing: timing,
        },
    )
    .map_err(|e| e.to_string())
}

pub fn preset_rows(name: &str, cfg: &SystemConfig, timing: bool) -> Result<Vec<ResultRow>, String> {
    let mut rows = Vec::new();
    for sc in experiment::preset(name, cfg).map_err(|e| e.to_string())? {
        rows.extend(
            experiment::run_scenario(
                &sc,
                &RunOptions {
                    record_timing: timing,
                },
            )
            .map_err(|e| e.to_string())?,
        );
    }
    Ok(rows)
}

fn to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.into_pyobject(py)?.into_any().unbind(),
            (None, Some(i)) => i.into_pyobject(py)?.into_any().unbind(),
            _ => n
                .as_f64()
                .unwrap_or(f64::NAN)
                .into_pyobject(py)?
                .into_any()
                .unbind(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(a) => {
            let list = PyList::empty(py);
            for x in a {
                list.append(to_py(py, x)?)?;
            }
            list.into_any().unbind()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any().unbind()
        }
    })
}

fn serialize<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &v)
}

/// Rows as dicts keyed in column order.
fn rows_to_py(py: Python<'_>, rows: &[ResultRow]) -> PyResult<Py<PyAny>> {
    let list = PyList::empty(py);
    for row in rows {
        let v = serde_json::to_value(row).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        let d = PyDict::new(py);
        for col in experiment::CSV_COLUMNS {
            d.set_item(col, to_py(py, &v[col])?)?;
        }
        list.append(d)?;
    }
    Ok(list.into_any().unbind())
}

fn overrides(set: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<(String, String)>> {
    let mut out = Vec::new();
    if let Some(d) = set {
        for (k, v) in d.iter() {
            let value = match v.extract::<String>() {
                Ok(s) => format!("{s:?}"),
                Err(_) => v.str()?.to_string().to_lowercase(),
            };
            out.push((k.extract()?, value));
        }
    }
    Ok(out)
}

fn config_from(config: &str, set: Option<&Bound<'_, PyDict>>) -> PyResult<SystemConfig> {
    build_config(config, &overrides(set)?).map_err(PyValueError::new_err)
}

/// Validates a configuration and returns the effective settings as TOML.
#[pyfunction]
#[pyo3(signature = (config = "", set = None))]
fn validate(config: &str, set: Option<&Bound<'_, PyDict>>) -> PyResult<String> {
    Ok(config_from(config, set)?.to_toml())
}

#[pyfunction]
fn total_overhead(t_g: usize, t_h: usize, tau: usize, k: usize) -> usize {
    estimator::total_overhead(t_g, t_h, tau, k)
}

#[pyfunction]
fn ls_overhead_bound(k_fle: usize, k_fra: usize, m: usize, n_ue: usize, tau: usize) -> usize {
    estimator::ls_overhead_bound(k_fle, k_fra, m, n_ue, tau)
}

/// Estimation plus beamforming for a single trial.
#[pyfunction]
#[pyo3(signature = (config = "", set = None, trial = 0))]
fn evaluate(
    py: Python<'_>,
    config: &str,
    set: Option<&Bound<'_, PyDict>>,
    trial: usize,
) -> PyResult<Py<PyAny>> {
    let cfg = config_from(config, set)?;
    let eval = py
        .detach(|| Trial::new(&cfg, trial).and_then(|mut t| t.evaluate(&cfg)))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    serialize(py, &eval)
}

/// Runs every trial over one axis (`t_g`, `t_h` or `snr`) and returns the
/// result rows.
#[pyfunction]
#[pyo3(signature = (axis, values, config = "", set = None, timing = true))]
fn sweep(
    py: Python<'_>,
    axis: &str,
    values: Vec<f64>,
    config: &str,
    set: Option<&Bound<'_, PyDict>>,
    timing: bool,
) -> PyResult<Py<PyAny>> {
    let cfg = config_from(config, set)?;
    let axis = axis.to_string();
    let rows = py
        .detach(|| sweep_rows(cfg, &axis, values, timing))
        .map_err(PyRuntimeError::new_err)?;
    rows_to_py(py, &rows)
}

/// Runs one of the figure presets.
#[pyfunction]
#[pyo3(signature = (figure, config = "", set = None, timing = true))]
fn reproduce(
    py: Python<'_>,
    figure: &str,
    config: &str,
    set: Option<&Bound<'_, PyDict>>,
    timing: bool,
) -> PyResult<Py<PyAny>> {
    let cfg = config_from(config, set)?;
    let figure = figure.to_string();
    let rows = py
        .detach(|| preset_rows(&figure, &cfg, timing))
        .map_err(PyValueError::new_err)?;
    rows_to_py(py, &rows)
}

#[pymodule]
fn bios_mimo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(total_overhead, m)?)?;
    m.add_function(wrap_pyfunction!(ls_overhead_bound, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(reproduce, m)?)?;
    m.add("PRESETS", experiment::PRESETS.to_vec())?;
    m.add("RESULT_COLUMNS", experiment::CSV_COLUMNS.to_vec())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "n_bs = 4\nn_ue = 2\nm_x = 2\nm_y = 2\np = 1\nq = 1\nk_fle = 1\nk_fra = 1\n\
                       upsilon_large = 2000\nupsilon_small = 1000\nt_g = 60\nt_h = 20\ntrials = 2\n\
                       outer_max_iters = 10\nwmmse_max_iters = 20\n";

    #[test]
    fn overrides_apply_and_errors_surface() {
        let c = build_config(TOY, &[("epsilon".into(), "0.3".into())]).unwrap();
        assert_eq!(c.epsilon, 0.3);
        assert!(build_config(TOY, &[("epsilon".into(), "2.0".into())])
            .unwrap_err()
            .contains("epsilon"));
        assert!(build_config("nonsense = 1", &[]).is_err());
    }

    #[test]
    fn sweep_and_preset_rows() {
        let c = build_config(TOY, &[]).unwrap();
        let rows = sweep_rows(c.clone(), "t_h", vec![10.0, 20.0], false).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.wall_ms == 0.0));
        assert!(sweep_rows(c.clone(), "bogus", vec![1.0], false).is_err());
        assert!(preset_rows("fig9z", &c, false).is_err());
    }
}
