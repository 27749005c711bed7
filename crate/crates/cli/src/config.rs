//! Run configuration: a flat set of dotted keys read from a TOML file and
//! overridden by `--set key=value` on the command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ipfsim_core::metrics::UtilityWeights;
use ipfsim_core::sim::{SimConfig, Variant};
use ipfsim_core::trace::SyntheticWorkloadSpec;
use toml::Value;

use crate::error::CliError;

/// Where the replayed trace comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceSource {
    File(PathBuf),
    Synthetic(SyntheticWorkloadSpec),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outputs {
    pub report: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub metadata_dump: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub source: TraceSource,
    pub sim: SimConfig,
    /// Row label in comparisons; defaults to the variant name.
    pub label: Option<String>,
    /// Variants run by `compare` when no per-variant configs are given.
    pub variants: Vec<Variant>,
    pub weights: UtilityWeights,
    pub outputs: Outputs,
}

impl RunConfig {
    pub fn label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| self.sim.variant.name().to_string())
    }
}

/// Flattened `dotted.key -> value` map.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, Value>,
}

fn flatten(prefix: &str, table: toml::Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            v => {
                out.insert(key, v);
            }
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        let mut entries = BTreeMap::new();
        flatten("", table, &mut entries);
        Ok(Self { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    /// Applies `key=value`; the value is read as a TOML value, or taken as
    /// a bare string when it does not parse as one.
    pub fn set(&mut self, assignment: &str) -> Result<(), CliError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| config_err(format!("`{assignment}` is not key=value")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(config_err(format!("`{assignment}` has an empty key")));
        }
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        self.entries.insert(key.to_string(), value);
        Ok(())
    }

    /// Points the run at a trace file, dropping any synthetic workload keys.
    pub fn set_trace(&mut self, path: &Path) {
        self.entries.retain(|k, _| !k.starts_with("workload."));
        self.entries
            .insert("trace".into(), Value::String(path.display().to_string()));
    }

    pub fn insert(&mut self, key: &str, value: impl Into<Value>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn take(&mut self, key: &str) -> Option<Value> {
        self.entries.remove(key)
    }

    fn take_u64(&mut self, key: &str) -> Result<Option<u64>, CliError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if i >= 0 => Ok(Some(i as u64)),
            Some(v) => Err(config_err(format!("{key} must be a non-negative integer, got {v}"))),
        }
    }

    fn take_f64(&mut self, key: &str) -> Result<Option<f64>, CliError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Float(f)) => Ok(Some(f)),
            Some(Value::Integer(i)) => Ok(Some(i as f64)),
            Some(v) => Err(config_err(format!("{key} must be a number, got {v}"))),
        }
    }

    fn take_bool(&mut self, key: &str) -> Result<Option<bool>, CliError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::Boolean(b)) => Ok(Some(b)),
            Some(v) => Err(config_err(format!("{key} must be true or false, got {v}"))),
        }
    }

    fn take_str(&mut self, key: &str) -> Result<Option<String>, CliError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(v) => Err(config_err(format!("{key} must be a string, got {v}"))),
        }
    }

    fn take_list(&mut self, key: &str) -> Result<Option<Vec<String>>, CliError> {
        match self.take(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.split(',').map(|p| p.trim().to_string()).collect())),
            Some(Value::Array(items)) => items
                .into_iter()
                .map(|v| match v {
                    Value::String(s) => Ok(s),
                    v => Err(config_err(format!("{key} entries must be strings, got {v}"))),
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
            Some(v) => Err(config_err(format!("{key} must be a list of names, got {v}"))),
        }
    }

    /// Builds the run configuration. Unknown keys are rejected.
    pub fn into_run_config(mut self) -> Result<RunConfig, CliError> {
        let mut sim = SimConfig::default();
        macro_rules! set {
            ($getter:ident, $key:expr, $target:expr) => {
                if let Some(v) = self.$getter($key)? {
                    $target = v;
                }
            };
            ($getter:ident, $key:expr, $target:expr, $conv:expr) => {
                if let Some(v) = self.$getter($key)? {
                    $target = $conv($key, v)?;
                }
            };
        }
        let usize_of = |key: &str, v: u64| usize::try_from(v).map_err(|_| config_err(format!("{key} is too large")));
        let u32_of = |key: &str, v: u64| u32::try_from(v).map_err(|_| config_err(format!("{key} is too large")));
        let u8_of = |key: &str, v: u64| u8::try_from(v).map_err(|_| config_err(format!("{key} is too large")));
        let kb = |key: &str, v: u64| {
            v.checked_mul(1024)
                .ok_or_else(|| config_err(format!("{key} is too large")))
        };

        if let Some(name) = self.take_str("variant")? {
            sim.variant = name
                .parse()
                .map_err(|e: ipfsim_core::sim::UnknownVariant| config_err(e.to_string()))?;
        }
        let variants = match self.take_list("variants")? {
            Some(names) => names
                .iter()
                .map(|n| n.parse::<Variant>().map_err(|e| config_err(e.to_string())))
                .collect::<Result<Vec<_>, _>>()?,
            None => Variant::ALL.to_vec(),
        };
        let label = self.take_str("label")?;
        set!(take_u64, "seed", sim.seed);
        set!(take_u64, "warmup_instructions", sim.warmup_instructions);
        set!(take_bool, "check_invariants", sim.check_invariants);

        let c = &mut sim.cache;
        for (name, level) in [("l1i", &mut c.l1i), ("l2", &mut c.l2), ("l3", &mut c.l3)] {
            if let Some(v) = self.take_u64(&format!("{name}.size_kb"))? {
                level.size_bytes = kb(name, v)?;
            }
            if let Some(v) = self.take_u64(&format!("{name}.ways"))? {
                level.ways = usize_of(name, v)?;
            }
            if let Some(v) = self.take_u64(&format!("{name}.latency"))? {
                level.latency_cycles = v;
            }
        }
        set!(take_u64, "dram.latency", c.dram_latency_cycles);
        set!(
            take_u64,
            "prefetch.tokens_per_kcycle",
            c.prefetch_tokens_per_kcycle,
            u32_of
        );
        set!(take_bool, "prefetch.next_line", sim.next_line);

        set!(take_u64, "eip.sets", sim.eip_sets, usize_of);
        set!(take_u64, "eip.ways", sim.eip_ways, usize_of);
        set!(take_u64, "eip.trigger_confidence", sim.trigger_confidence, u8_of);
        set!(take_u64, "table.sets", sim.table_sets, usize_of);
        set!(take_u64, "table.ways", sim.table_ways, usize_of);
        set!(take_u64, "table.window_limit", sim.window_limit, u8_of);

        let ctrl = &mut sim.controller;
        set!(take_f64, "ctrl.lr", ctrl.learning_rate);
        set!(take_f64, "ctrl.epsilon", ctrl.epsilon);
        set!(take_u64, "ctrl.period", ctrl.update_period_cycles);
        set!(take_u64, "ctrl.horizon", ctrl.horizon_cycles);
        set!(take_bool, "ctrl.shadow", ctrl.shadow);
        set!(take_f64, "ctrl.lambda_useless", ctrl.lambda_useless);
        set!(take_f64, "ctrl.lambda_evict", ctrl.lambda_evict);
        let ctrl = &sim.controller;
        if !(0.0..=1.0).contains(&ctrl.epsilon) {
            return Err(config_err(format!("ctrl.epsilon = {} is outside [0, 1]", ctrl.epsilon)));
        }
        if !(ctrl.learning_rate.is_finite() && ctrl.learning_rate >= 0.0) {
            return Err(config_err("ctrl.lr must be finite and non-negative"));
        }
        if ctrl.update_period_cycles == 0 {
            return Err(config_err("ctrl.period must be positive"));
        }

        let mut weights = UtilityWeights::default();
        set!(take_f64, "utility.alpha", weights.alpha);
        set!(take_f64, "utility.beta", weights.beta);
        set!(take_f64, "utility.gamma", weights.gamma);
        set!(take_f64, "utility.delta", weights.delta);
        weights.validate().map_err(|e| config_err(e.to_string()))?;

        let has_workload = self.entries.keys().any(|k| k.starts_with("workload."));
        let trace = self.take_str("trace")?;
        let source = match trace {
            Some(_) if has_workload => {
                return Err(config_err("give either `trace` or `workload.*` keys, not both"));
            }
            Some(path) => TraceSource::File(PathBuf::from(path)),
            None => {
                let mut w = SyntheticWorkloadSpec {
                    seed: sim.seed,
                    ..Default::default()
                };
                set!(take_u64, "workload.seed", w.seed);
                set!(take_u64, "workload.function_count", w.function_count, u32_of);
                set!(take_u64, "workload.mean_function_lines", w.mean_function_lines, u32_of);
                set!(take_u64, "workload.call_depth_max", w.call_depth_max, u32_of);
                set!(take_f64, "workload.loop_probability", w.loop_probability);
                set!(take_f64, "workload.call_probability", w.call_probability);
                set!(take_f64, "workload.phase_churn_probability", w.phase_churn_probability);
                set!(take_u64, "workload.footprint_lines", w.footprint_lines);
                set!(take_u64, "workload.rpc_length_mean", w.rpc_length_mean, u32_of);
                set!(take_u64, "workload.record_count", w.record_count);
                set!(take_f64, "workload.far_function_fraction", w.far_function_fraction);
                TraceSource::Synthetic(w)
            }
        };

        let outputs = Outputs {
            report: self.take_str("output.report")?.map(PathBuf::from),
            calibration: self.take_str("output.calibration")?.map(PathBuf::from),
            metadata_dump: self.take_str("output.metadata_dump")?.map(PathBuf::from),
        };

        if let Some(key) = self.entries.keys().next() {
            return Err(config_err(format!("unknown key `{key}`")));
        }
        Ok(RunConfig {
            source,
            sim,
            label,
            variants,
            weights,
            outputs,
        })
    }
}
