use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use bios_core::config::{validate_config, RawConfig, SystemConfig, FULL_TRIALS};
use bios_core::experiment::{
    best_overhead, emit_results, preset, run_scenario, summarize, write_summary_csv, Format,
    RunOptions, Scenario, SummaryRow, SweepAxis, Trial, PRESETS,
};

/// Channel estimation and beamforming simulator for bilayer
/// omni-surface assisted multi-user MIMO.
#[derive(Parser)]
#[command(name = "bios", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set epsilon=0.3`. Applied after BIOS_* variables.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Use the full trial count (200).
    #[arg(long, global = true)]
    full: bool,
    /// Worker threads for trial-level parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw the channels of one trial and write them as JSON.
    GenChannels {
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run channel estimation for one trial and report NMSE.
    Estimate {
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate, optimize the downlink and report the achieved rates.
    Beamform {
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a preset or a config-file sweep.
    Sweep {
        /// Preset name or path to a configuration file.
        target: String,
        /// Axis swept when `target` is a configuration file.
        #[arg(long, default_value = "t_h")]
        axis: String,
        /// Comma-separated sweep values for a configuration file.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[command(flatten)]
        output: Output,
    },
    /// Regenerate the data behind one figure.
    Reproduce {
        #[arg(value_parser = PRESETS)]
        figure: String,
        #[command(flatten)]
        output: Output,
    },
    /// Check a configuration and print the effective settings.
    Validate,
}

#[derive(Args)]
struct Output {
    /// Result file; the extension picks CSV or JSON unless --format is given.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    /// Also write the JSON mirror next to a CSV output (always on for `reproduce`).
    #[arg(long)]
    json_mirror: bool,
    /// Per-point means and standard errors.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Write wall_ms as 0 so reruns are byte-identical.
    #[arg(long)]
    no_timing: bool,
}

fn load_config(common: &Common) -> anyhow::Result<SystemConfig> {
    let mut raw = match &common.config {
        Some(p) => RawConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => RawConfig::default(),
    };
    raw = raw.with_process_env()?;
    for kv in &common.set {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got {kv:?}");
        };
        raw.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        raw.seed = Some(seed);
    }
    if common.full {
        raw.trials = Some(FULL_TRIALS);
    }
    if let Some(t) = common.trials {
        raw.trials = Some(t);
    }
    Ok(validate_config(&raw)?)
}

fn write_json_value<T: serde::Serialize>(value: &T, out: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => {
            std::fs::write(p, text + "\n").with_context(|| format!("writing {}", p.display()))?
        }
        None => {
            if let Err(e) = writeln!(std::io::stdout().lock(), "{text}") {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(e.into());
                }
            }
        }
    }
    Ok(())
}

fn print_summary(summary: &[SummaryRow]) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "{:<28} {:>9} {:>6} {:>5} {:>12} {:>12} {:>10} {:>8}",
        "scenario", "value", "t_g", "t_h", "nmse_fra", "nmse_avg", "sum_rate", "se"
    );
    for s in summary {
        let _ = writeln!(
            out,
            "{:<28} {:>9} {:>6} {:>5} {:>12.4e} {:>12.4e} {:>10.4} {:>8.4}",
            s.scenario,
            s.sweep_value,
            s.t_g,
            s.t_h,
            s.nmse_fra_mean,
            s.nmse_avg_mean,
            s.sum_rate_mean,
            s.sum_rate_se
        );
    }
}

fn run_and_emit(
    scenarios: &[Scenario],
    output: &Output,
    default_out: Option<PathBuf>,
    mirror: bool,
) -> anyhow::Result<()> {
    let opts = RunOptions {
        record_timing: !output.no_timing,
    };
    let mut rows = Vec::new();
    for sc in scenarios {
        eprintln!(
            "running {} ({} trials x {} points)",
            sc.name,
            sc.base.trials,
            sc.values.len()
        );
        rows.extend(run_scenario(sc, &opts).with_context(|| format!("scenario {}", sc.name))?);
    }
    let out = output.out.clone().or(default_out);
    match &out {
        Some(path) => {
            let format = match &output.format {
                Some(f) => f.parse()?,
                None => Format::from_path(path),
            };
            emit_results(&rows, format, path)?;
            if (mirror || output.json_mirror) && format == Format::Csv {
                emit_results(&rows, Format::Json, &path.with_extension("json"))?;
            }
            eprintln!("wrote {} rows to {}", rows.len(), path.display());
        }
        None => bios_core::experiment::write_csv(&rows, std::io::stdout().lock())?,
    }
    let summary = summarize(&rows);
    if let Some(p) = &output.summary {
        write_summary_csv(&summary, std::fs::File::create(p)?)?;
    }
    if out.is_some() {
        print_summary(&summary);
        if scenarios.iter().any(|s| !s.overhead_grid.is_empty()) {
            println!("\nbest pilot lengths per point:");
            print_summary(&best_overhead(&summary));
        }
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    match &cli.cmd {
        Cmd::Validate => match load_config(&cli.common) {
            Ok(cfg) => {
                print!("{}", cfg.to_toml());
                println!("# tau = {}", cfg.tau);
            }
            Err(e) => {
                eprintln!("invalid configuration: {e}");
                std::process::exit(2);
            }
        },
        Cmd::GenChannels { trial, out } => {
            let cfg = load_config(&cli.common)?;
            let t = Trial::new(&cfg, *trial)?;
            write_json_value(&t.frames, out.as_deref())?;
        }
        Cmd::Estimate { trial, out } => {
            let cfg = load_config(&cli.common)?;
            let mut t = Trial::new(&cfg, *trial)?;
            let (eval, _) = t.estimate(&cfg)?;
            write_json_value(&eval, out.as_deref())?;
        }
        Cmd::Beamform { trial, out } => {
            let cfg = load_config(&cli.common)?;
            let mut t = Trial::new(&cfg, *trial)?;
            let eval = t.evaluate(&cfg)?;
            write_json_value(&eval, out.as_deref())?;
        }
        Cmd::Sweep {
            target,
            axis,
            values,
            output,
        } => {
            let scenarios = if PRESETS.contains(&target.as_str()) {
                preset(target, &load_config(&cli.common)?)?
            } else {
                let path = PathBuf::from(target);
                if !path.exists() {
                    bail!(
                        "{target:?} is neither a preset ({}) nor a file",
                        PRESETS.join(", ")
                    );
                }
                let common = Common {
                    config: Some(path.clone()),
                    set: cli.common.set.clone(),
                    ..cli.common
                };
                let cfg = load_config(&common)?;
                let axis: SweepAxis = axis.parse()?;
                let values = if values.is_empty() {
                    vec![match axis {
                        SweepAxis::TG => cfg.t_g as f64,
                        SweepAxis::TH => cfg.t_h as f64,
                        SweepAxis::Snr => cfg.snr_db,
                    }]
                } else {
                    values.clone()
                };
                let name = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("sweep")
                    .to_string();
                vec![Scenario::new(name, cfg, axis, values)]
            };
            run_and_emit(&scenarios, output, None, false)?;
        }
        Cmd::Reproduce { figure, output } => {
            let scenarios = preset(figure, &load_config(&cli.common)?)?;
            let default_out = PathBuf::from(format!("{figure}.csv"));
            run_and_emit(&scenarios, output, Some(default_out), true)?;
        }
    }
    Ok(())
}
