//! Deterministic one-second-tick simulation of an edge device running
//! several stream-processing services.
//!
//! Each service pulls items from a bounded buffer once per tick and processes
//! as many as its configuration allows. Configuration changes settle
//! linearly over a few ticks. Every tick appends one [`MetricsRow`] per
//! service to an append-only log that agents query through [`Environment::observe`].

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::Assignment;
use crate::registry::{ElasticityParameter, Registry, RegistryError, ServiceId};
use crate::slo::{self, MetricsRow};

pub const CORES: &str = "cores";
pub const DATA_QUALITY: &str = "data_quality";
pub const MODEL_SIZE: &str = "model_size";

pub const DEFAULT_SETTLE_TICKS: u32 = 3;
pub const DEFAULT_WINDOW: usize = 5;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulation already reached its duration of {0} ticks")]
    PastDuration(u64),
    #[error("assignment has no value for {service} `{param}`")]
    MissingParameter { service: String, param: String },
    #[error("unknown service {0}")]
    UnknownService(String),
    #[error("no metrics logged for {0}")]
    NoRows(String),
    #[error("illegal configuration: {0}")]
    IllegalConfig(String),
    #[error("invalid ground-truth model: {0}")]
    InvalidModel(String),
    #[error("request pattern: {0}")]
    Pattern(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    Qr,
    Cv,
    Pc,
}

impl ServiceKind {
    /// Calibration point: a configuration and the throughput it must reach.
    pub fn anchor(self) -> (BTreeMap<String, f64>, f64) {
        let cfg = |pairs: &[(&str, f64)]| pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        match self {
            ServiceKind::Qr => (cfg(&[(CORES, 8.0), (DATA_QUALITY, 800.0)]), 100.0),
            ServiceKind::Cv => (cfg(&[(CORES, 8.0), (DATA_QUALITY, 288.0), (MODEL_SIZE, 3.0)]), 10.0),
            ServiceKind::Pc => (cfg(&[(CORES, 2.6), (DATA_QUALITY, 40.0)]), 50.0),
        }
    }

    /// `(gamma, rho)`: quality and parallelism exponents.
    pub fn exponents(self) -> (f64, f64) {
        match self {
            ServiceKind::Qr => (2.0, 0.9),
            ServiceKind::Cv => (2.0, 0.8),
            ServiceKind::Pc => (1.5, 0.2),
        }
    }
}

pub fn default_model_sizes() -> BTreeMap<u32, f64> {
    [(1, 1.0), (2, 2.2), (3, 4.5), (4, 9.0)].into_iter().collect()
}

/// Analytic per-item latency of a service:
/// `k * (quality / q0)^gamma * g(model_size) / cores^rho` milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthModel {
    pub kind: ServiceKind,
    pub k: f64,
    pub rho: f64,
    pub gamma: f64,
    pub q0: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub model_size_factors: BTreeMap<u32, f64>,
}

impl GroundTruthModel {
    /// Kind defaults with `k` calibrated to the kind's anchor.
    pub fn calibrated(kind: ServiceKind) -> Self {
        let (gamma, rho) = kind.exponents();
        let (anchor, _) = kind.anchor();
        let mut m = Self {
            kind,
            k: 1.0,
            rho,
            gamma,
            q0: anchor[DATA_QUALITY],
            model_size_factors: if kind == ServiceKind::Cv { default_model_sizes() } else { BTreeMap::new() },
        };
        m.calibrate().expect("built-in anchors are legal");
        m
    }

    /// Re-solves `k` so the kind's anchor configuration hits its target.
    pub fn calibrate(&mut self) -> Result<(), SimError> {
        let (anchor, tp) = self.kind.anchor();
        let k_unit = Self { k: 1.0, ..self.clone() };
        self.k = 1000.0 / (tp * k_unit.latency_ms(&anchor)?);
        Ok(())
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidModel(m.to_string()));
        if !(self.k > 0.0 && self.k.is_finite()) {
            return bad("k must be positive");
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]");
        }
        if !(self.gamma > 0.0 && self.q0 > 0.0) {
            return bad("gamma and q0 must be positive");
        }
        if self.kind == ServiceKind::Cv && self.model_size_factors.is_empty() {
            return bad("cv model needs model_size_factors");
        }
        if self.model_size_factors.values().any(|g| !(*g > 0.0)) {
            return bad("model size factors must be positive");
        }
        Ok(())
    }

    fn size_factor(&self, size: f64) -> Result<f64, SimError> {
        let key = size.round();
        if (size - key).abs() > 1e-6 || key < 0.0 {
            return Err(SimError::IllegalConfig(format!("model size {size} is not an integer")));
        }
        self.model_size_factors
            .get(&(key as u32))
            .copied()
            .ok_or_else(|| SimError::IllegalConfig(format!("no latency factor for model size {key}")))
    }

    pub fn latency_ms(&self, config: &BTreeMap<String, f64>) -> Result<f64, SimError> {
        let get = |name: &str| {
            config
                .get(name)
                .copied()
                .ok_or_else(|| SimError::IllegalConfig(format!("missing `{name}`")))
        };
        let cores = get(CORES)?;
        let quality = get(DATA_QUALITY)?;
        if !(cores > 0.0 && quality > 0.0) || !cores.is_finite() || !quality.is_finite() {
            return Err(SimError::IllegalConfig(format!("cores {cores}, quality {quality}")));
        }
        let g = match self.kind {
            ServiceKind::Cv => self.size_factor(get(MODEL_SIZE)?)?,
            _ => 1.0,
        };
        Ok(self.k * (quality / self.q0).powf(self.gamma) * g / cores.powf(self.rho))
    }
}

/// Maximum items per second the configuration sustains: `1000 / latency_ms`.
pub fn tp_max_true(model: &GroundTruthModel, config: &BTreeMap<String, f64>) -> Result<f64, SimError> {
    Ok(1000.0 / model.latency_ms(config)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatternKind {
    Bursty,
    Diurnal,
    Constant,
    Csv { path: PathBuf },
}

impl PatternKind {
    pub fn label(&self) -> &'static str {
        match self {
            PatternKind::Bursty => "bursty",
            PatternKind::Diurnal => "diurnal",
            PatternKind::Constant => "constant",
            PatternKind::Csv { .. } => "csv",
        }
    }
}

/// Requests per second for every simulated second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestPattern {
    pub kind: PatternKind,
    pub duration: u64,
    pub max_rps: f64,
    pub seed: u64,
    pub samples: Vec<f64>,
}

impl RequestPattern {
    /// Samples divided by `max_rps`.
    pub fn relative(&self) -> Vec<f64> {
        if self.max_rps > 0.0 {
            self.samples.iter().map(|s| s / self.max_rps).collect()
        } else {
            vec![0.0; self.samples.len()]
        }
    }
}

fn diurnal_shape(duration: u64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let double = rng.random_bool(0.5);
    let phase = rng.random_range(0.0..1.0);
    let second_weight = rng.random_range(0.3..0.6);
    let tau = std::f64::consts::TAU;
    let raw: Vec<f64> = (0..duration)
        .map(|t| {
            let u = t as f64 / duration as f64;
            let base = 0.5 * (1.0 - (tau * (u - phase)).cos());
            if double {
                (1.0 - second_weight) * base + second_weight * 0.5 * (1.0 - (2.0 * tau * (u - phase)).cos())
            } else {
                base
            }
        })
        .collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    raw.iter().map(|v| 0.15 + 0.85 * (v - lo) / span).collect()
}

fn bursty_shape(duration: u64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut load = vec![0.2; duration as usize];
    let per_hour = rng.random_range(4.0..=8.0);
    let bursts = (per_hour * duration as f64 / 3600.0).round() as u64;
    for _ in 0..bursts {
        let len = rng.random_range(60..=180u64).min(duration);
        let start = rng.random_range(0..=duration - len);
        for slot in &mut load[start as usize..(start + len) as usize] {
            *slot = 1.0;
        }
    }
    load
}

/// Builds a per-second request trace. CSV traces hold `t_seconds,
/// relative_load` rows and are held constant between listed seconds; the
/// trace then lasts `duration` seconds when given, else up to the last row.
pub fn gen_pattern(kind: PatternKind, duration: u64, max_rps: f64, seed: u64) -> Result<RequestPattern, SimError> {
    if duration == 0 {
        return Err(SimError::Pattern("duration must be positive".into()));
    }
    if !(max_rps.is_finite() && max_rps >= 0.0) {
        return Err(SimError::Pattern(format!("max_rps {max_rps} must be non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = match &kind {
        PatternKind::Constant => vec![1.0; duration as usize],
        PatternKind::Diurnal => diurnal_shape(duration, &mut rng),
        PatternKind::Bursty => bursty_shape(duration, &mut rng),
        PatternKind::Csv { path } => {
            let file = std::fs::File::open(path)
                .map_err(|e| SimError::Pattern(format!("cannot read {}: {e}", path.display())))?;
            read_trace_csv(file, Some(duration))?
        }
    };
    Ok(RequestPattern {
        kind,
        duration,
        max_rps,
        seed,
        samples: shape.iter().map(|v| v * max_rps).collect(),
    })
}

/// Parses a `t_seconds, relative_load` trace into one value per second.
pub fn read_trace_csv<R: Read>(r: R, duration: Option<u64>) -> Result<Vec<f64>, SimError> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut points: Vec<(u64, f64)> = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64, SimError> {
            rec.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| SimError::Pattern(format!("bad trace row {:?}", rec)))
        };
        let t = parse(0)?;
        let load = parse(1)?;
        if !(t >= 0.0) || !(0.0..=1.0).contains(&load) {
            return Err(SimError::Pattern(format!("trace row ({t}, {load}) out of range")));
        }
        points.push((t.floor() as u64, load));
    }
    if points.is_empty() {
        return Err(SimError::Pattern("trace has no rows".into()));
    }
    points.sort_by_key(|p| p.0);
    let len = duration.unwrap_or(points.last().map(|p| p.0 + 1).unwrap_or(0));
    let mut out = Vec::with_capacity(len as usize);
    let mut j = 0;
    for s in 0..len {
        while j + 1 < points.len() && points[j + 1].0 <= s {
            j += 1;
        }
        out.push(points[j].1);
    }
    Ok(out)
}

pub fn write_trace_csv<W: Write>(w: W, relative: &[f64]) -> Result<(), SimError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["t_seconds", "relative_load"])?;
    for (t, v) in relative.iter().enumerate() {
        wr.write_record([t.to_string(), v.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub settle_ticks: u32,
    /// Buffer capacity as a multiple of a service's peak request rate.
    pub buffer_factor: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            settle_ticks: DEFAULT_SETTLE_TICKS,
            buffer_factor: 2.0,
        }
    }
}

/// Mutable state of one simulated service.
#[derive(Debug, Clone)]
pub struct ServiceState {
    pub id: ServiceId,
    pub model: GroundTruthModel,
    params: Vec<ElasticityParameter>,
    /// Configuration currently in effect.
    pub effective: BTreeMap<String, f64>,
    origin: BTreeMap<String, f64>,
    pub target: BTreeMap<String, f64>,
    pub settle_remaining: u32,
    pub backlog: u64,
    pub buffer_capacity: u64,
    pub arrived: u64,
    pub processed: u64,
    pub dropped: u64,
    pub rps_trace: Vec<f64>,
}

impl ServiceState {
    fn advance_settling(&mut self, settle_ticks: u32) -> Result<(), SimError> {
        if self.settle_remaining == 0 {
            return Ok(());
        }
        let done = (settle_ticks - self.settle_remaining + 1) as f64 / settle_ticks as f64;
        for p in &self.params {
            let a = self.origin[&p.name];
            let b = self.target[&p.name];
            let v = if self.settle_remaining == 1 { b } else { a + (b - a) * done };
            self.effective.insert(p.name.clone(), p.clip(v)?);
        }
        self.settle_remaining -= 1;
        Ok(())
    }
}

/// Arrivals, processed items, final backlog and drops of one service.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ledger {
    pub arrived: u64,
    pub processed: u64,
    pub backlog: u64,
    pub dropped: u64,
}

impl Ledger {
    pub fn balanced(&self) -> bool {
        self.arrived == self.processed + self.backlog + self.dropped
    }
}

/// The simulated device.
#[derive(Debug, Clone)]
pub struct Environment {
    registry: Registry,
    config: SimConfig,
    tick: u64,
    duration: u64,
    services: Vec<ServiceState>,
    log: Vec<MetricsRow>,
}

impl Environment {
    /// `traces` holds one per-second request-rate series per registry
    /// service, in registry order. The run lasts as long as the shortest
    /// trace.
    pub fn new(registry: Registry, traces: Vec<Vec<f64>>, config: SimConfig) -> Result<Self, SimError> {
        if traces.len() != registry.services.len() {
            return Err(SimError::Pattern(format!(
                "{} traces for {} services",
                traces.len(),
                registry.services.len()
            )));
        }
        if traces.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(SimError::Pattern("request rates must be finite and non-negative".into()));
        }
        let duration = traces.iter().map(Vec::len).min().unwrap_or(0) as u64;
        let mut services = Vec::with_capacity(traces.len());
        for (desc, trace) in registry.services.iter().zip(traces) {
            let model = desc
                .sim_model
                .clone()
                .ok_or_else(|| SimError::InvalidModel(format!("{} has no sim_model", desc.id)))?;
            model.validate()?;
            let peak = trace.iter().cloned().fold(0.0, f64::max);
            let buffer_capacity = ((config.buffer_factor * peak).ceil() as u64).max(1);
            services.push(ServiceState {
                id: desc.id.clone(),
                model,
                params: desc.params.clone(),
                effective: desc.default_assignment.clone(),
                origin: desc.default_assignment.clone(),
                target: desc.default_assignment.clone(),
                settle_remaining: 0,
                backlog: 0,
                buffer_capacity,
                arrived: 0,
                processed: 0,
                dropped: 0,
                rps_trace: trace,
            });
        }
        Ok(Self {
            registry,
            config,
            tick: 0,
            duration,
            services,
            log: Vec::new(),
        })
    }

    /// Environment whose services all receive their default request rate.
    pub fn with_default_rps(registry: Registry, duration: u64, config: SimConfig) -> Result<Self, SimError> {
        let traces = registry
            .services
            .iter()
            .map(|s| vec![s.default_rps; duration as usize])
            .collect();
        Self::new(registry, traces, config)
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn duration(&self) -> u64 {
        self.duration
    }

    pub fn remaining(&self) -> u64 {
        self.duration - self.tick
    }

    pub fn services(&self) -> &[ServiceState] {
        &self.services
    }

    pub fn metrics_log(&self) -> &[MetricsRow] {
        &self.log
    }

    pub fn ledger(&self, id: &ServiceId) -> Option<Ledger> {
        self.services.iter().find(|s| &s.id == id).map(|s| Ledger {
            arrived: s.arrived,
            processed: s.processed,
            backlog: s.backlog,
            dropped: s.dropped,
        })
    }

    /// Assignment of the configuration currently in effect.
    pub fn effective_assignment(&self) -> Assignment {
        let mut a = Assignment::default();
        for s in &self.services {
            for (k, v) in &s.effective {
                a.set(&s.id, k, *v);
            }
        }
        a
    }

    /// Clips every value and makes it the service's target configuration.
    /// Services whose clipped target equals the live configuration are left
    /// untouched.
    pub fn apply_assignment(&mut self, assignment: &Assignment) -> Result<(), SimError> {
        let mut targets = Vec::with_capacity(self.services.len());
        for s in &self.services {
            let mut target = BTreeMap::new();
            for p in &s.params {
                let v = assignment.get(&s.id, &p.name).ok_or_else(|| SimError::MissingParameter {
                    service: s.id.to_string(),
                    param: p.name.clone(),
                })?;
                target.insert(p.name.clone(), p.clip(v)?);
            }
            targets.push(target);
        }
        let settle = self.config.settle_ticks;
        for (s, target) in self.services.iter_mut().zip(targets) {
            if target == s.effective {
                s.target = target;
                s.settle_remaining = 0;
                continue;
            }
            s.origin = s.effective.clone();
            s.target = target;
            if settle == 0 {
                s.effective = s.target.clone();
            } else {
                s.settle_remaining = settle;
            }
        }
        Ok(())
    }

    /// Advances one second and returns the rows logged for it.
    pub fn step(&mut self) -> Result<&[MetricsRow], SimError> {
        if self.tick >= self.duration {
            return Err(SimError::PastDuration(self.duration));
        }
        let t = self.tick as usize;
        let start = self.log.len();
        for s in &mut self.services {
            s.advance_settling(self.config.settle_ticks)?;
            let rps = s.rps_trace[t];
            let arrivals = rps.round() as u64;
            let accepted = arrivals.min(s.buffer_capacity - s.backlog);
            s.arrived += arrivals;
            s.dropped += arrivals - accepted;
            s.backlog += accepted;
            let tp_max = tp_max_true(&s.model, &s.effective)?;
            let processed = s.backlog.min(tp_max.floor() as u64);
            s.backlog -= processed;
            s.processed += processed;
            // used/allocated cores, with used = allocated * offered load / capacity
            let utilization = if tp_max > 0.0 { (rps / tp_max).min(1.0) } else { 1.0 };

            let mut values = BTreeMap::new();
            values.insert("throughput".to_string(), processed as f64);
            values.insert("rps".to_string(), rps);
            values.insert("completion".to_string(), slo::completion(processed as f64, rps));
            values.insert("tp_max".to_string(), tp_max);
            values.insert("cpu_utilization".to_string(), utilization);
            values.insert("backlog".to_string(), s.backlog as f64);
            for (k, v) in &s.effective {
                values.insert(k.clone(), *v);
            }
            self.log.push(MetricsRow {
                service: s.id.clone(),
                tick: self.tick,
                values,
            });
        }
        self.tick += 1;
        Ok(&self.log[start..])
    }

    /// Mean of each metric over the service's last `window` rows; parameter
    /// values come from the newest row.
    pub fn observe(&self, id: &ServiceId, window: usize) -> Result<MetricsRow, SimError> {
        let desc = self
            .registry
            .service(id)
            .ok_or_else(|| SimError::UnknownService(id.to_string()))?;
        let mut rows: Vec<&MetricsRow> = self.log.iter().rev().filter(|r| &r.service == id).take(window.max(1)).collect();
        if rows.is_empty() {
            return Err(SimError::NoRows(id.to_string()));
        }
        rows.reverse();
        let params: Vec<&str> = desc.params.iter().map(|p| p.name.as_str()).collect();
        Ok(average_rows(&rows, &params))
    }
}

/// Averages rows of one service (oldest first). Keys listed in `params` are
/// taken from the newest row instead.
pub fn average_rows(rows: &[&MetricsRow], params: &[&str]) -> MetricsRow {
    let last = rows[rows.len() - 1];
    let mut values = BTreeMap::new();
    for key in last.values.keys() {
        let v = if params.contains(&key.as_str()) {
            last.values[key]
        } else {
            rows.iter().map(|r| r.values.get(key).copied().unwrap_or(0.0)).sum::<f64>() / rows.len() as f64
        };
        values.insert(key.clone(), v);
    }
    MetricsRow {
        service: last.service.clone(),
        tick: last.tick,
        values,
    }
}

/// Fixed metric columns of the metrics-log CSV, before parameter columns.
pub const METRIC_COLUMNS: [&str; 4] = ["throughput", "rps", "completion", "tp_max"];

/// Writes `tick, service, throughput, rps, completion, tp_max, <params...>`.
/// Parameters a service lacks are left empty.
pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricsRow], param_columns: &[String]) -> Result<(), SimError> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["tick".to_string(), "service".to_string()];
    header.extend(METRIC_COLUMNS.iter().map(|s| s.to_string()));
    header.extend(param_columns.iter().cloned());
    wr.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.tick.to_string(), r.service.to_string()];
        for col in METRIC_COLUMNS.iter().map(|s| s.to_string()).chain(param_columns.iter().cloned()) {
            rec.push(r.values.get(&col).map(|v| v.to_string()).unwrap_or_default());
        }
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

/// Reads a metrics-log CSV back. Services are matched by their display form.
pub fn read_metrics_csv<R: Read>(r: R, registry: &Registry) -> Result<Vec<MetricsRow>, SimError> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    let ids: BTreeMap<String, ServiceId> = registry.services.iter().map(|s| (s.id.to_string(), s.id.clone())).collect();
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let tick: u64 = rec
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| SimError::Pattern("bad tick".into()))?;
        let name = rec.get(1).unwrap_or_default();
        let service = ids.get(name).cloned().ok_or_else(|| SimError::UnknownService(name.to_string()))?;
        let mut values = BTreeMap::new();
        for (col, field) in header.iter().zip(rec.iter()).skip(2) {
            if field.is_empty() {
                continue;
            }
            let v: f64 = field
                .parse()
                .map_err(|_| SimError::Pattern(format!("bad value `{field}` in column {col}")))?;
            values.insert(col.clone(), v);
        }
        out.push(MetricsRow { service, tick, values });
    }
    Ok(out)
}

pub fn load_trace_file(path: &Path, duration: Option<u64>) -> Result<Vec<f64>, SimError> {
    read_trace_csv(std::fs::File::open(path)?, duration)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{GlobalConstraints, Quantization, ServiceDescriptor, SloDefinition, StructuralRelation};

    fn cfg(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn anchors_hold_after_calibration() {
        let qr = GroundTruthModel::calibrated(ServiceKind::Qr);
        let cv = GroundTruthModel::calibrated(ServiceKind::Cv);
        let pc = GroundTruthModel::calibrated(ServiceKind::Pc);
        let close = |a: f64, b: f64| (a - b).abs() < 1e-9 * b;
        assert!(close(tp_max_true(&qr, &cfg(&[(CORES, 8.0), (DATA_QUALITY, 800.0)])).unwrap(), 100.0));
        assert!(close(
            tp_max_true(&cv, &cfg(&[(CORES, 8.0), (DATA_QUALITY, 288.0), (MODEL_SIZE, 3.0)])).unwrap(),
            10.0
        ));
        assert!(close(tp_max_true(&pc, &cfg(&[(CORES, 2.6), (DATA_QUALITY, 40.0)])).unwrap(), 50.0));
        // independent closed form for k: latency at the anchor times cores^rho
        assert!(close(qr.k, 10.0 * 8f64.powf(0.9)));
        assert!(close(cv.k, 100.0 * 8f64.powf(0.8) / 4.5));
        assert!(close(pc.k, 20.0 * 2.6f64.powf(0.2)));
    }

    #[test]
    fn illegal_configs_rejected() {
        let cv = GroundTruthModel::calibrated(ServiceKind::Cv);
        assert!(tp_max_true(&cv, &cfg(&[(CORES, 8.0), (DATA_QUALITY, 288.0)])).is_err());
        assert!(tp_max_true(&cv, &cfg(&[(CORES, 8.0), (DATA_QUALITY, 288.0), (MODEL_SIZE, 2.5)])).is_err());
        assert!(tp_max_true(&cv, &cfg(&[(CORES, 0.0), (DATA_QUALITY, 288.0), (MODEL_SIZE, 2.0)])).is_err());
    }

    #[test]
    fn pattern_examples() {
        let c = gen_pattern(PatternKind::Constant, 3600, 50.0, 1).unwrap();
        assert_eq!(c.samples.len(), 3600);
        assert!(c.samples.iter().all(|&v| v == 50.0));

        for seed in 0..20 {
            let d = gen_pattern(PatternKind::Diurnal, 3600, 100.0, seed).unwrap();
            let max = d.samples.iter().cloned().fold(0.0, f64::max);
            let min = d.samples.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!((max - 100.0).abs() < 1e-9, "seed {seed}: max {max}");
            assert!(min >= 10.0);
            assert!(d.samples.windows(2).all(|w| (w[1] - w[0]).abs() < 1.0), "diurnal is smooth");
        }

        let b1 = gen_pattern(PatternKind::Bursty, 3600, 100.0, 9).unwrap();
        let b2 = gen_pattern(PatternKind::Bursty, 3600, 100.0, 9).unwrap();
        assert_eq!(b1, b2);
        assert!(b1.samples.iter().all(|&v| v == 20.0 || v == 100.0));
        assert!(b1.samples.contains(&100.0));
        assert!(gen_pattern(PatternKind::Diurnal, 0, 100.0, 1).is_err());
        assert!(gen_pattern(PatternKind::Csv { path: "/nonexistent/trace.csv".into() }, 10, 1.0, 1).is_err());
    }

    #[test]
    fn trace_csv_holds_values_between_rows() {
        let text = "t_seconds,relative_load\n0,0.5\n3,1.0\n5,0.25\n";
        let v = read_trace_csv(text.as_bytes(), None).unwrap();
        assert_eq!(v, vec![0.5, 0.5, 0.5, 1.0, 1.0, 0.25]);
        let v = read_trace_csv(text.as_bytes(), Some(8)).unwrap();
        assert_eq!(v.len(), 8);
        assert!(read_trace_csv("t_seconds,relative_load\n0,1.5\n".as_bytes(), None).is_err());
    }

    fn one_service(model: GroundTruthModel, params: Vec<ElasticityParameter>, defaults: &[(&str, f64)]) -> Registry {
        let features = params.iter().map(|p| p.name.clone()).collect();
        Registry::new(
            vec![ServiceDescriptor {
                id: ServiceId::new("edge", "qr", "qr-1"),
                params,
                slos: vec![SloDefinition::new("completion", 1.0, 1.0)],
                relation: StructuralRelation {
                    features,
                    target: "tp_max".into(),
                    degree_override: None,
                },
                default_assignment: cfg(defaults),
                default_rps: 80.0,
                sim_model: Some(model),
            }],
            GlobalConstraints::cores(8.0),
        )
        .unwrap()
    }

    /// Linear model: tp_max = 12.5 * cores at quality q0.
    fn linear_registry(cores: f64) -> Registry {
        let model = GroundTruthModel {
            kind: ServiceKind::Qr,
            k: 80.0,
            rho: 1.0,
            gamma: 1.0,
            q0: 100.0,
            model_size_factors: BTreeMap::new(),
        };
        one_service(
            model,
            vec![
                ElasticityParameter::continuous(CORES, 1.0, 8.0),
                ElasticityParameter::continuous(DATA_QUALITY, 100.0, 100.5),
            ],
            &[(CORES, cores), (DATA_QUALITY, 100.0)],
        )
    }

    fn run_step(env: &mut Environment) -> MetricsRow {
        env.step().unwrap()[0].clone()
    }

    #[test]
    fn step_examples() {
        // tp_max = 12.5 * 8 = 100
        let mut env = Environment::new(linear_registry(8.0), vec![vec![80.0; 4]], SimConfig::default()).unwrap();
        let r = run_step(&mut env);
        assert_eq!((r.throughput(), r.completion()), (80.0, 1.0));

        let mut env = Environment::new(linear_registry(3.2), vec![vec![80.0; 4]], SimConfig::default()).unwrap();
        let r = run_step(&mut env);
        assert_eq!(r.tp_max(), 40.0);
        assert_eq!((r.throughput(), r.completion()), (40.0, 0.5));

        // 30 items left over, then a quiet second drains them
        let mut env = Environment::new(linear_registry(3.2), vec![vec![70.0, 0.0]], SimConfig::default()).unwrap();
        run_step(&mut env);
        assert_eq!(env.services()[0].backlog, 30);
        let r = run_step(&mut env);
        assert_eq!((r.throughput(), r.completion()), (30.0, 1.0));
        assert!(matches!(env.step(), Err(SimError::PastDuration(2))));
    }

    #[test]
    fn settling_interpolates_linearly() {
        let mut env = Environment::new(linear_registry(2.0), vec![vec![10.0; 10]], SimConfig::default()).unwrap();
        let id = env.registry().services[0].id.clone();
        let mut a = env.effective_assignment();
        env.apply_assignment(&a).unwrap();
        assert_eq!(env.services()[0].settle_remaining, 0, "no-op assignment");
        a.set(&id, CORES, 4.0);
        env.apply_assignment(&a).unwrap();
        let seen: Vec<f64> = (0..4).map(|_| run_step(&mut env).get(CORES).unwrap()).collect();
        assert!((seen[0] - 8.0 / 3.0).abs() < 1e-12);
        assert!((seen[1] - 10.0 / 3.0).abs() < 1e-12);
        assert_eq!(seen[2], 4.0);
        assert_eq!(seen[3], 4.0);
    }

    #[test]
    fn apply_clips_and_rejects_incomplete() {
        let params = vec![
            ElasticityParameter::continuous(CORES, 1.0, 8.0),
            ElasticityParameter::continuous(DATA_QUALITY, 128.0, 320.0).with_step(Quantization::MultipleOf(32.0)),
            ElasticityParameter::continuous(MODEL_SIZE, 1.0, 4.0).with_step(Quantization::Integer),
        ];
        let reg = one_service(
            GroundTruthModel::calibrated(ServiceKind::Cv),
            params,
            &[(CORES, 2.6), (DATA_QUALITY, 224.0), (MODEL_SIZE, 3.0)],
        );
        let id = reg.services[0].id.clone();
        let mut env = Environment::new(reg, vec![vec![5.0; 10]], SimConfig { settle_ticks: 0, ..Default::default() }).unwrap();
        let mut a = env.effective_assignment();
        a.set(&id, DATA_QUALITY, 300.0);
        env.apply_assignment(&a).unwrap();
        assert_eq!(env.services()[0].target[DATA_QUALITY], 288.0);
        let mut missing = Assignment::default();
        missing.set(&id, CORES, 2.0);
        assert!(matches!(env.apply_assignment(&missing), Err(SimError::MissingParameter { .. })));
    }

    #[test]
    fn observe_averages_window() {
        let mut env = Environment::new(linear_registry(8.0), vec![vec![0.0, 100.0, 40.0, 40.0, 40.0, 40.0, 40.0]], SimConfig::default()).unwrap();
        let id = env.registry().services[0].id.clone();
        assert!(matches!(env.observe(&id, 5), Err(SimError::NoRows(_))));
        env.step().unwrap();
        env.step().unwrap();
        assert_eq!(env.observe(&id, 2).unwrap().throughput(), 50.0);
        env.step().unwrap();
        let o = env.observe(&id, 5).unwrap();
        assert!((o.throughput() - 140.0 / 3.0).abs() < 1e-12, "partial window uses the rows present");
        for _ in 0..4 {
            env.step().unwrap();
        }
        assert_eq!(env.observe(&id, 5).unwrap().throughput(), 40.0);
        assert_eq!(env.observe(&id, 5).unwrap().get(CORES), Some(8.0));
    }

    #[test]
    fn overflow_is_dropped_and_conserved() {
        // capacity 2 * 100 = 200 items, service does 12 per second
        let mut env = Environment::new(linear_registry(1.0), vec![vec![100.0; 20]], SimConfig::default()).unwrap();
        let id = env.registry().services[0].id.clone();
        while env.remaining() > 0 {
            env.step().unwrap();
        }
        let l = env.ledger(&id).unwrap();
        assert!(l.dropped > 0);
        assert_eq!(l.backlog, 200 - 12);
        assert!(l.balanced());
    }

    #[test]
    fn metrics_csv_round_trips() {
        let mut env = Environment::new(linear_registry(2.5), vec![vec![33.0; 6]], SimConfig::default()).unwrap();
        for _ in 0..6 {
            env.step().unwrap();
        }
        let cols = env.registry().parameter_families();
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, env.metrics_log(), &cols).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("tick,service,throughput,rps,completion,tp_max,cores,data_quality\n"));
        let back = read_metrics_csv(buf.as_slice(), env.registry()).unwrap();
        assert_eq!(back.len(), 6);
        for (a, b) in back.iter().zip(env.metrics_log()) {
            for col in METRIC_COLUMNS.iter().chain(["cores", "data_quality"].iter()) {
                assert_eq!(a.get(col), b.get(col));
            }
        }
    }
}
