use std::path::Path;
use std::process::Command;

use bios_core::config::{validate_config, RawConfig, SystemConfig};
use bios_core::experiment::*;

const TOY: &str = "n_bs = 4\nn_ue = 2\nm_x = 2\nm_y = 2\np = 1\nq = 1\nk_fle = 1\nk_fra = 1\n\
                   upsilon_large = 2000\nupsilon_small = 1000\nt_g = 60\nt_h = 20\ntrials = 2\n\
                   outer_max_iters = 10\nwmmse_max_iters = 20\n";

fn toy() -> SystemConfig {
    validate_config(&RawConfig::from_toml_str(TOY).unwrap()).unwrap()
}

fn bios() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bios"));
    c.env_remove("BIOS_MODE").env_remove("BIOS_ESTIMATOR");
    c
}

fn write_toy(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("toy.toml");
    std::fs::write(&p, TOY).unwrap();
    p
}

#[test]
fn same_seed_gives_identical_csv_bytes() {
    let sc = Scenario::new("toy", toy(), SweepAxis::Snr, vec![0.0, 10.0]);
    let opts = RunOptions {
        record_timing: false,
    };
    let mut a = Vec::new();
    let mut b = Vec::new();
    write_csv(&run_scenario(&sc, &opts).unwrap(), &mut a).unwrap();
    write_csv(&run_scenario(&sc, &opts).unwrap(), &mut b).unwrap();
    assert_eq!(a, b);

    let other = Scenario::new(
        "toy",
        SystemConfig { seed: 9, ..toy() },
        SweepAxis::Snr,
        vec![0.0, 10.0],
    );
    let mut c = Vec::new();
    write_csv(&run_scenario(&other, &opts).unwrap(), &mut c).unwrap();
    assert_ne!(a, c);
}

#[test]
fn rows_do_not_depend_on_the_other_sweep_points() {
    let opts = RunOptions {
        record_timing: false,
    };
    let both = run_scenario(
        &Scenario::new("toy", toy(), SweepAxis::TH, vec![10.0, 30.0]),
        &opts,
    )
    .unwrap();
    let single = run_scenario(
        &Scenario::new("toy", toy(), SweepAxis::TH, vec![30.0]),
        &opts,
    )
    .unwrap();
    let from_both: Vec<_> = both.iter().filter(|r| r.t_h == 30).cloned().collect();
    assert_eq!(from_both, single);
}

#[test]
fn json_and_csv_carry_identical_values() {
    let dir = tempfile::tempdir().unwrap();
    let rows = run_scenario(
        &Scenario::new("toy", toy(), SweepAxis::TG, vec![40.0, 60.0]),
        &RunOptions::default(),
    )
    .unwrap();
    let (csv, json) = (dir.path().join("r.csv"), dir.path().join("r.json"));
    emit_results(&rows, Format::Csv, &csv).unwrap();
    emit_results(&rows, Format::Json, &json).unwrap();
    assert_eq!(load_results(&csv).unwrap(), load_results(&json).unwrap());
    assert_eq!(load_results(&csv).unwrap(), rows);
}

#[test]
fn empty_rows_give_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.csv");
    emit_results(&[], Format::Csv, &p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.trim_end(), CSV_COLUMNS.join(","));
    assert!(emit_results(&[], Format::Csv, &dir.path().join("missing/x.csv")).is_err());
}

#[test]
fn cli_validate_reports_defaults_and_field_errors() {
    let out = bios().arg("validate").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("epsilon = 0.5"));
    assert!(text.contains("# tau = 4"));

    let out = bios()
        .args(["validate", "--set", "k_c=1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("k_c"));

    let out = bios()
        .arg("validate")
        .env("BIOS_EPSILON", "1.5")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("epsilon"));
}

#[test]
fn cli_sweep_writes_reproducible_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_toy(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = bios()
            .args([
                "sweep",
                cfg.to_str().unwrap(),
                "--axis",
                "t_h",
                "--values",
                "10,20",
                "--no-timing",
                "--json-mirror",
            ])
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(
            status.status.success(),
            "{}",
            String::from_utf8_lossy(&status.stderr)
        );
        out
    };
    let a = run("a.csv");
    let b = run("b.csv");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let rows = load_results(&a).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(load_results(&a.with_extension("json")).unwrap(), rows);
}

#[test]
fn cli_single_trial_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_toy(dir.path());
    for cmd in ["gen-channels", "estimate", "beamform"] {
        let out = bios()
            .args(["--config", cfg.to_str().unwrap(), cmd])
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{cmd}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        match cmd {
            "gen-channels" => assert_eq!(v.as_array().unwrap().len(), 2),
            "estimate" => assert!(v["nmse_avg"].as_f64().unwrap() >= 0.0),
            _ => assert!(v["sum_rate"].as_f64().unwrap() > 0.0),
        }
    }
}

#[test]
fn cli_rejects_unknown_targets() {
    let out = bios().args(["sweep", "no-such-thing"]).output().unwrap();
    assert!(!out.status.success());
    let out = bios().args(["reproduce", "fig9a"]).output().unwrap();
    assert!(!out.status.success());
}
