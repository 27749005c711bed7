//! Experiment runner behind the `ipfsim` binary.

pub mod config;
pub mod error;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use ipfsim_core::controller::CalibrationRecord;
use ipfsim_core::hierarchy::{budget, BudgetConfig, BudgetReport};
use ipfsim_core::metrics::{compare, ComparisonRow, SimulationReport, COMPARISON_COLUMNS};
use ipfsim_core::sim::{simulate, SimConfig, SimOutput, Variant};
use ipfsim_core::trace::{
    cluster_stats, generate_synthetic, load_trace, save_trace, ClusterStats, TraceRecord, DEFAULT_WINDOW_SIZES,
};
use rayon::prelude::*;

use crate::config::{RawConfig, RunConfig, TraceSource};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ipfsim", version, about = "Trace-driven instruction prefetch simulator")]
pub struct Cli {
    /// TOML run configuration with dotted keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Simulation seed; also seeds the synthetic generator unless workload.seed is set.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file (stdout when omitted; required by `generate`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Override a config key, e.g. --set l1i.ways=4. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic trace and print its clustering statistics.
    Generate {
        #[arg(long)]
        records: Option<u64>,
    },
    /// Simulate one variant and print its report.
    Run {
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        /// Write the controller's calibration log as CSV.
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Write the final compressed metadata as a binary dump.
        #[arg(long)]
        dump_metadata: Option<PathBuf>,
    },
    /// Simulate several variants on one trace and tabulate them against next-line.
    Compare {
        /// One config per row; without any, the `variants` list of --config is used.
        configs: Vec<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Print the on-chip metadata budget.
    Budget {
        #[arg(long, default_value_t = 2048)]
        table_entries: u64,
        #[arg(long, default_value_t = 512)]
        l1_lines: u64,
        #[arg(long, default_value_t = 64)]
        history_entries: u64,
    },
    /// Clustering statistics of a trace.
    Stats {
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        windows: Vec<u64>,
    },
}

impl Cli {
    /// Config file, then --seed, then --set overrides.
    fn raw_config(&self, file: Option<&Path>) -> Result<RawConfig, CliError> {
        let mut raw = match file {
            Some(p) => RawConfig::from_file(p)?,
            None => RawConfig::default(),
        };
        if let Some(seed) = self.seed {
            let seed = i64::try_from(seed).map_err(|_| CliError::Config("--seed is too large".into()))?;
            raw.insert("seed", seed);
        }
        for s in &self.overrides {
            raw.set(s)?;
        }
        Ok(raw)
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate { records } => cmd_generate(cli, *records),
        Command::Run {
            trace,
            variant,
            calibration,
            dump_metadata,
        } => cmd_run(
            cli,
            trace.as_deref(),
            *variant,
            calibration.as_deref(),
            dump_metadata.as_deref(),
        ),
        Command::Compare { configs, trace } => cmd_compare(cli, configs, trace.as_deref()),
        Command::Budget {
            table_entries,
            l1_lines,
            history_entries,
        } => {
            let report = budget(&BudgetConfig {
                history_entries: *history_entries,
                l1_lines: *l1_lines,
                table_entries: *table_entries,
            });
            emit(
                cli.out.as_deref(),
                &budget_text(&report, cli.format.unwrap_or(Format::Json)),
            )
        }
        Command::Stats { trace, windows } => cmd_stats(cli, trace.as_deref(), windows),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            // a closed pipe is not worth an error exit
            let _ = stdout.write_all(text.as_bytes());
            Ok(())
        }
    }
}

fn json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

pub fn budget_text(r: &BudgetReport, format: Format) -> String {
    match format {
        Format::Json => json(r),
        Format::Csv => format!(
            "history_bytes,attached_bytes,table_bytes,total_bytes\n{},{},{},{}\n",
            r.history_bytes, r.attached_bytes, r.table_bytes, r.total_bytes
        ),
    }
}

pub fn stats_text(s: &ClusterStats, format: Format) -> String {
    match format {
        Format::Json => json(s),
        Format::Csv => {
            let mut out = String::from("window,covered,fraction\n");
            for &(w, covered) in &s.per_window_histogram {
                let frac = if s.pairs == 0 {
                    0.0
                } else {
                    covered as f64 / s.pairs as f64
                };
                out.push_str(&format!("{w},{covered},{frac}\n"));
            }
            out
        }
    }
}

pub fn rows_text(rows: &[ComparisonRow], format: Format) -> String {
    match format {
        Format::Json => json(&rows),
        Format::Csv => {
            let mut out = COMPARISON_COLUMNS.join(",");
            out.push('\n');
            for r in rows {
                out.push_str(&r.csv_line());
                out.push('\n');
            }
            out
        }
    }
}

pub fn load_source(source: &TraceSource) -> Result<Vec<TraceRecord>, CliError> {
    match source {
        TraceSource::File(path) => load_trace(path).map_err(|source| CliError::Trace {
            path: path.clone(),
            source,
        }),
        TraceSource::Synthetic(spec) => Ok(generate_synthetic(spec)?),
    }
}

fn cmd_generate(cli: &Cli, records: Option<u64>) -> Result<(), CliError> {
    let mut raw = cli.raw_config(cli.config.as_deref())?;
    if let Some(n) = records {
        let n = i64::try_from(n).map_err(|_| CliError::Config("--records is too large".into()))?;
        raw.insert("workload.record_count", n);
    }
    let rc = raw.into_run_config()?;
    let TraceSource::Synthetic(spec) = &rc.source else {
        return Err(CliError::Config(
            "generate needs workload.* keys, not a trace file".into(),
        ));
    };
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| CliError::Config("generate needs --out".into()))?;
    let trace = generate_synthetic(spec)?;
    save_trace(out, &trace).map_err(|e| CliError::io(out, e))?;
    let stats = cluster_stats(&trace, &DEFAULT_WINDOW_SIZES)?;
    emit(None, &stats_text(&stats, cli.format.unwrap_or(Format::Json)))
}

fn cmd_stats(cli: &Cli, trace: Option<&Path>, windows: &[u64]) -> Result<(), CliError> {
    let mut raw = cli.raw_config(cli.config.as_deref())?;
    if let Some(t) = trace {
        raw.set_trace(t);
    }
    let rc = raw.into_run_config()?;
    let trace = load_source(&rc.source)?;
    let windows = if windows.is_empty() {
        &DEFAULT_WINDOW_SIZES[..]
    } else {
        windows
    };
    let stats = cluster_stats(&trace, windows)?;
    emit(
        cli.out.as_deref(),
        &stats_text(&stats, cli.format.unwrap_or(Format::Json)),
    )
}

/// Runs `cfg` and, alongside it, the next-line baseline on the same trace.
pub fn run_with_baseline(trace: &[TraceRecord], rc: &RunConfig) -> Result<(SimOutput, SimulationReport), CliError> {
    if rc.sim.variant == Variant::NextLineOnly {
        let mut out = simulate(trace, &rc.sim)?;
        let base = out.report.clone();
        out.report.apply_baseline(&base, &rc.weights)?;
        return Ok((out, base));
    }
    let base_cfg = baseline_config(&rc.sim);
    let (out, base) = rayon::join(|| simulate(trace, &rc.sim), || simulate(trace, &base_cfg));
    let (mut out, base) = (out?, base?.report);
    out.report.apply_baseline(&base, &rc.weights)?;
    Ok((out, base))
}

fn baseline_config(sim: &SimConfig) -> SimConfig {
    SimConfig {
        variant: Variant::NextLineOnly,
        record_events: false,
        ..sim.clone()
    }
}

pub fn report_text(
    report: &SimulationReport,
    baseline: &SimulationReport,
    rc: &RunConfig,
    format: Format,
) -> Result<String, CliError> {
    Ok(match format {
        Format::Json => json(report),
        Format::Csv => rows_text(
            &compare(baseline, std::slice::from_ref(report), &rc.weights)?,
            Format::Csv,
        ),
    })
}

fn cmd_run(
    cli: &Cli,
    trace: Option<&Path>,
    variant: Option<Variant>,
    calibration: Option<&Path>,
    dump: Option<&Path>,
) -> Result<(), CliError> {
    let mut raw = cli.raw_config(cli.config.as_deref())?;
    if let Some(t) = trace {
        raw.set_trace(t);
    }
    if let Some(v) = variant {
        raw.insert("variant", v.name());
    }
    let rc = raw.into_run_config()?;
    let records = load_source(&rc.source)?;
    let (mut out, base) = run_with_baseline(&records, &rc)?;
    if let Some(label) = &rc.label {
        out.report.variant = label.clone();
    }
    let text = report_text(&out.report, &base, &rc, cli.format.unwrap_or(Format::Json))?;
    emit(cli.out.as_deref().or(rc.outputs.report.as_deref()), &text)?;
    if let Some(path) = calibration.or(rc.outputs.calibration.as_deref()) {
        std::fs::write(path, calibration_csv(&out.calibration)).map_err(|e| CliError::io(path, e))?;
    }
    if let Some(path) = dump.or(rc.outputs.metadata_dump.as_deref()) {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut w = BufWriter::new(file);
        if let Some(h) = &out.metadata {
            h.dump(&mut w).map_err(|e| CliError::io(path, e))?;
        }
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    Ok(())
}

pub fn calibration_csv(log: &[CalibrationRecord]) -> String {
    let mut out =
        String::from("cycle,source_line,predicted_p,chosen_arm,hypothetical_targets,hypothetical_bandwidth\n");
    for r in log {
        let targets: Vec<String> = r.hypothetical_targets.iter().map(|t| t.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.cycle,
            r.source_line,
            r.predicted_p,
            r.chosen_arm,
            targets.join(";"),
            r.hypothetical_bandwidth
        ));
    }
    out
}

/// Resolves the per-row configs of a comparison. All rows must replay the
/// same trace.
pub fn comparison_configs(cli: &Cli, files: &[PathBuf], trace: Option<&Path>) -> Result<Vec<RunConfig>, CliError> {
    let with_trace = |mut raw: RawConfig| {
        if let Some(t) = trace {
            raw.set_trace(t);
        }
        raw.into_run_config()
    };
    let configs = if files.is_empty() {
        let base = with_trace(cli.raw_config(cli.config.as_deref())?)?;
        base.variants
            .iter()
            .map(|&v| RunConfig {
                sim: SimConfig {
                    variant: v,
                    ..base.sim.clone()
                },
                label: None,
                ..base.clone()
            })
            .collect::<Vec<_>>()
    } else {
        files
            .iter()
            .map(|f| with_trace(cli.raw_config(Some(f))?))
            .collect::<Result<Vec<_>, _>>()?
    };
    if let Some(first) = configs.first() {
        if let Some(other) = configs.iter().find(|c| c.source != first.source) {
            return Err(CliError::Mismatch(format!(
                "`{}` and `{}` replay different traces",
                first.label(),
                other.label()
            )));
        }
    }
    Ok(configs)
}

pub fn comparison_rows(configs: &[RunConfig]) -> Result<Vec<ComparisonRow>, CliError> {
    let Some(first) = configs.first() else {
        return Err(CliError::Config("nothing to compare".into()));
    };
    let trace = load_source(&first.source)?;
    let base_cfg = baseline_config(&first.sim);
    let (base, reports) = rayon::join(
        || simulate(&trace, &base_cfg),
        || {
            configs
                .par_iter()
                .map(|c| {
                    simulate(&trace, &c.sim).map(|mut o| {
                        o.report.variant = c.label();
                        o.report
                    })
                })
                .collect::<Result<Vec<_>, _>>()
        },
    );
    let (base, reports) = (base?.report, reports?);
    Ok(compare(&base, &reports, &first.weights)?)
}

fn cmd_compare(cli: &Cli, files: &[PathBuf], trace: Option<&Path>) -> Result<(), CliError> {
    let configs = comparison_configs(cli, files, trace)?;
    let rows = comparison_rows(&configs)?;
    emit(cli.out.as_deref(), &rows_text(&rows, cli.format.unwrap_or(Format::Csv)))
}
