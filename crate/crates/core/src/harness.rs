//! Scenario files, repeated runs, summaries and comparisons.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    self, AgentError, AgentRun, DegreePolicy, NoopAgent, RaskAgent, RaskConfig, ScalingAgent, VpaAgent, VpaConfig,
};
use crate::planner::{movable_for_dims, SolverBudget};
use crate::registry::{Registry, RegistryError};
use crate::simenv::{self, Environment, PatternKind, SimConfig, SimError};
use crate::slo::{self, MetricsRow, SloError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("series lengths differ: {0}")]
    Mismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Slo(#[from] SloError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Request pattern shared by all services of a scenario. Service types
/// listed in `max_rps` follow the shape scaled to their peak; the others
/// receive their registry default rate throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    #[serde(flatten)]
    pub kind: PatternKind,
    #[serde(default)]
    pub max_rps: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AgentSpec {
    Rask {
        xi: u64,
        eta: f64,
        #[serde(default = "yes")]
        caching: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dims: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        degree: Option<DegreePolicy>,
        #[serde(default = "one")]
        noise_exponent: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eta_decay_cycles: Option<u64>,
        #[serde(default)]
        share_models_by_type: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        budget: Option<SolverBudget>,
    },
    Vpa {
        #[serde(flatten)]
        config: VpaConfig,
    },
    Noop,
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

impl AgentSpec {
    pub fn rask(xi: u64, eta: f64) -> Self {
        AgentSpec::Rask {
            xi,
            eta,
            caching: true,
            dims: None,
            degree: None,
            noise_exponent: 1.0,
            eta_decay_cycles: None,
            share_models_by_type: false,
            budget: None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            AgentSpec::Rask { xi, eta, caching, dims, .. } => {
                let mut s = format!("rask-xi{xi}-eta{eta}");
                if let Some(d) = dims {
                    s.push_str(&format!("-d{d}"));
                }
                if !caching {
                    s.push_str("-nocache");
                }
                s
            }
            AgentSpec::Vpa { .. } => "vpa".into(),
            AgentSpec::Noop => "noop".into(),
        }
    }

    pub fn build(&self, registry: &Registry, cycle_s: u64, seed: u64) -> Result<Box<dyn ScalingAgent>, HarnessError> {
        Ok(match self {
            AgentSpec::Rask {
                xi,
                eta,
                caching,
                dims,
                degree,
                noise_exponent,
                eta_decay_cycles,
                share_models_by_type,
                budget,
            } => {
                let families = registry.parameter_families().len();
                let movable = match dims {
                    Some(d) if *d == 0 || *d > families => {
                        return Err(HarnessError::Scenario(format!("dims {d} outside 1..={families}")))
                    }
                    Some(d) => Some(movable_for_dims(registry, *d)),
                    None => None,
                };
                Box::new(RaskAgent::new(RaskConfig {
                    xi: *xi,
                    eta: *eta,
                    cycle_s,
                    degree_policy: degree.unwrap_or(DegreePolicy::Fixed(crate::regression::DEFAULT_DEGREE)),
                    caching: *caching,
                    noise_exponent: *noise_exponent,
                    eta_decay_cycles: *eta_decay_cycles,
                    movable,
                    share_models_by_type: *share_models_by_type,
                    budget: budget.unwrap_or_default(),
                    seed,
                })?)
            }
            AgentSpec::Vpa { config } => Box::new(VpaAgent::new(VpaConfig { cycle_s, ..*config })?),
            AgentSpec::Noop => Box::new(NoopAgent),
        })
    }
}

fn d_settle() -> u32 {
    simenv::DEFAULT_SETTLE_TICKS
}
fn d_window() -> usize {
    simenv::DEFAULT_WINDOW
}
fn d_cycle() -> u64 {
    10
}
fn d_reps() -> usize {
    1
}
fn d_replicas() -> usize {
    1
}
fn d_band() -> f64 {
    0.4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Registry document; relative paths resolve against the scenario file.
    pub registry: PathBuf,
    pub pattern: PatternSpec,
    pub agent: AgentSpec,
    /// Cycles the agent spends on a constant-load copy of the device before
    /// the measured run.
    #[serde(default)]
    pub warmup_cycles: u64,
    pub duration_s: u64,
    #[serde(default = "d_reps")]
    pub repetitions: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "d_settle")]
    pub settle_ticks: u32,
    #[serde(default = "d_window")]
    pub window_s: usize,
    #[serde(default = "d_cycle")]
    pub cycle_s: u64,
    /// Copies of every registry service.
    #[serde(default = "d_replicas")]
    pub replicas: usize,
    /// Overrides the registry capacity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<f64>,
    #[serde(default = "d_band")]
    pub load_band: f64,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut s: Scenario = serde_json::from_str(&text)?;
        if s.registry.is_relative() {
            if let Some(dir) = path.parent() {
                s.registry = dir.join(&s.registry);
            }
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Scenario(m));
        if self.repetitions < 1 {
            return bad("repetitions must be at least 1".into());
        }
        if self.cycle_s < 1 || self.duration_s == 0 || !self.duration_s.is_multiple_of(self.cycle_s) {
            return bad(format!("duration {} must be a positive multiple of cycle {}", self.duration_s, self.cycle_s));
        }
        if self.window_s < 1 || self.replicas < 1 {
            return bad("window and replicas must be positive".into());
        }
        if self.pattern.max_rps.values().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("max_rps values must be non-negative".into());
        }
        Ok(())
    }

    /// Registry after replication and capacity override.
    pub fn build_registry(&self) -> Result<Registry, HarnessError> {
        let base = Registry::from_path(&self.registry)?;
        let capacity = self.capacity.unwrap_or(base.constraints.capacity * self.replicas as f64);
        let reg = if self.replicas > 1 || self.capacity.is_some() {
            base.replicated(self.replicas, capacity)?
        } else {
            base
        };
        if let AgentSpec::Rask { dims: Some(d), .. } = &self.agent {
            let n = reg.parameter_families().len();
            if *d == 0 || *d > n {
                return Err(HarnessError::Scenario(format!("dims {d} outside 1..={n}")));
            }
        }
        Ok(reg)
    }

    fn sim_config(&self) -> SimConfig {
        SimConfig {
            settle_ticks: self.settle_ticks,
            ..SimConfig::default()
        }
    }

    /// Shared relative load shape and per-service traces for one seed.
    pub fn traces(&self, registry: &Registry, seed: u64) -> Result<(Vec<f64>, Vec<Vec<f64>>), HarnessError> {
        let shape = simenv::gen_pattern(self.pattern.kind.clone(), self.duration_s, 1.0, seed)?.samples;
        let traces = registry
            .services
            .iter()
            .map(|s| match self.pattern.max_rps.get(&s.id.service_type) {
                Some(m) => shape.iter().map(|v| v * m).collect(),
                None => vec![s.default_rps; self.duration_s as usize],
            })
            .collect();
        Ok((shape, traces))
    }

    /// Peak request rate of the first patterned service, used to turn
    /// logged rates back into relative load.
    fn load_reference(&self, registry: &Registry) -> Option<(crate::registry::ServiceId, f64)> {
        registry.services.iter().find_map(|s| {
            self.pattern
                .max_rps
                .get(&s.id.service_type)
                .filter(|m| **m > 0.0)
                .map(|m| (s.id.clone(), *m))
        })
    }
}

/// Wall-clock runtime distribution over solver cycles, milliseconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub count: usize,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
    pub mean: f64,
}

impl RuntimeStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            count: v.len(),
            p50: percentile(&v, 0.5),
            p95: percentile(&v, 0.95),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        }
    }
}

/// Linear interpolation between order statistics of sorted `v`.
pub fn percentile(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    percentile(&v, 0.5)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceBreakdown {
    pub mean: f64,
    pub median: f64,
    pub violation_cycles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub label: String,
    pub repetition: usize,
    pub seed: u64,
    /// Global fulfillment per cycle.
    pub fulfillment: Vec<f64>,
    /// Relative load per cycle.
    pub load: Vec<f64>,
    /// Per cycle: some SLO of some service below 1.
    pub violations: Vec<bool>,
    pub mean: f64,
    pub median: f64,
    pub violation_count: usize,
    /// Sum over cycles and services of `1 - service fulfillment`.
    pub shortfall: f64,
    pub runtime_ms: RuntimeStats,
    pub per_service: BTreeMap<String, ServiceBreakdown>,
    pub parameter_count: usize,
    pub decision_variables: usize,
}

impl RunSummary {
    pub fn cycles(&self) -> usize {
        self.fulfillment.len()
    }

    /// Violation cycles whose load is at least `band` and below it.
    pub fn violations_by_band(&self, band: f64) -> (usize, usize) {
        let mut high = 0;
        let mut low = 0;
        for (v, l) in self.violations.iter().zip(&self.load) {
            if *v {
                if *l >= band {
                    high += 1;
                } else {
                    low += 1;
                }
            }
        }
        (high, low)
    }

    pub fn tail_mean(&self, cycles: usize) -> f64 {
        let n = self.fulfillment.len();
        mean(&self.fulfillment[n.saturating_sub(cycles)..])
    }
}

/// Cycle-level facts derived from a metrics log.
pub struct CycleMetrics {
    pub fulfillment: Vec<f64>,
    pub per_service: Vec<Vec<f64>>,
    pub violations: Vec<Vec<bool>>,
    pub load: Vec<f64>,
}

/// Recomputes what the agent observed at every cycle boundary from the
/// metrics log and scores it.
pub fn cycle_metrics(
    registry: &Registry,
    rows: &[MetricsRow],
    cycle_s: u64,
    window: usize,
    load_ref: Option<&(crate::registry::ServiceId, f64)>,
) -> Result<CycleMetrics, HarnessError> {
    let mut by_service: BTreeMap<&crate::registry::ServiceId, Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        by_service.entry(&r.service).or_default().push(r);
    }
    let ticks = by_service.values().map(Vec::len).min().unwrap_or(0);
    let cycles = ticks / cycle_s as usize;
    let mut out = CycleMetrics {
        fulfillment: Vec::with_capacity(cycles),
        per_service: vec![Vec::with_capacity(cycles); registry.services.len()],
        violations: vec![Vec::with_capacity(cycles); registry.services.len()],
        load: Vec::with_capacity(cycles),
    };
    for c in 0..cycles {
        let end = (c + 1) * cycle_s as usize;
        let start = end.saturating_sub(window.max(1));
        let mut phis = Vec::with_capacity(registry.services.len());
        for (i, s) in registry.services.iter().enumerate() {
            let series = by_service
                .get(&s.id)
                .ok_or_else(|| HarnessError::Scenario(format!("no rows for {}", s.id)))?;
            let params: Vec<&str> = s.params.iter().map(|p| p.name.as_str()).collect();
            let obs = simenv::average_rows(&series[start..end], &params);
            let phi = slo::service_fulfillment(&s.slos, &obs)?;
            out.per_service[i].push(phi);
            out.violations[i].push(slo::any_violated(&s.slos, &obs)?);
            phis.push(phi);
        }
        out.fulfillment.push(slo::global_fulfillment(&phis)?);
        let load = match load_ref {
            Some((id, max)) => {
                let series = &by_service[id][start..end];
                series.iter().map(|r| r.rps() / max).sum::<f64>() / series.len() as f64
            }
            None => 1.0,
        };
        out.load.push(load);
    }
    Ok(out)
}

/// Per-cycle solver runtimes; cycles without a solver call are skipped.
pub type SolverRuntimes = Vec<f64>;

#[allow(clippy::too_many_arguments)]
fn build_summary(
    scenario: &Scenario,
    registry: &Registry,
    repetition: usize,
    seed: u64,
    rows: &[MetricsRow],
    runtimes: &SolverRuntimes,
) -> Result<RunSummary, HarnessError> {
    let load_ref = scenario.load_reference(registry);
    let m = cycle_metrics(registry, rows, scenario.cycle_s, scenario.window_s, load_ref.as_ref())?;
    let cycles = m.fulfillment.len();
    let violations: Vec<bool> = (0..cycles).map(|c| m.violations.iter().any(|v| v[c])).collect();
    let mut per_service = BTreeMap::new();
    let mut shortfall = 0.0;
    for (i, s) in registry.services.iter().enumerate() {
        shortfall += m.per_service[i].iter().map(|p| 1.0 - p).sum::<f64>();
        per_service.insert(
            s.id.to_string(),
            ServiceBreakdown {
                mean: mean(&m.per_service[i]),
                median: median(&m.per_service[i]),
                violation_cycles: m.violations[i].iter().filter(|v| **v).count(),
            },
        );
    }
    let decision_variables = match &scenario.agent {
        AgentSpec::Rask { dims, .. } => {
            let movable = dims.map(|d| movable_for_dims(registry, d));
            registry
                .services
                .iter()
                .flat_map(|s| s.params.iter())
                .filter(|p| p.max > p.min && movable.as_ref().is_none_or(|m| m.contains(&p.name)))
                .count()
        }
        _ => 0,
    };
    Ok(RunSummary {
        scenario: scenario.name.clone(),
        label: scenario.agent.label(),
        repetition,
        seed,
        mean: mean(&m.fulfillment),
        median: median(&m.fulfillment),
        violation_count: violations.iter().filter(|v| **v).count(),
        violations,
        shortfall,
        runtime_ms: RuntimeStats::from_samples(runtimes),
        per_service,
        parameter_count: registry.parameter_count(),
        decision_variables,
        fulfillment: m.fulfillment,
        load: m.load,
    })
}

/// Everything one repetition produced.
pub struct RepetitionOutput {
    pub summary: RunSummary,
    pub registry: Registry,
    pub env: Environment,
    pub run: AgentRun,
}

fn round_ms(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// Runs one repetition without touching the file system.
pub fn run_repetition(scenario: &Scenario, repetition: usize) -> Result<RepetitionOutput, HarnessError> {
    scenario.validate()?;
    let registry = scenario.build_registry()?;
    let seed = scenario.base_seed + repetition as u64;
    let mut agent = scenario.agent.build(&registry, scenario.cycle_s, seed)?;
    let mut first_cycle = 0;
    if scenario.warmup_cycles > 0 {
        let secs = scenario.warmup_cycles * scenario.cycle_s;
        let mut warm = Environment::with_default_rps(registry.clone(), secs, scenario.sim_config())?;
        agents::run_agent(&mut warm, agent.as_mut(), secs, scenario.cycle_s, scenario.window_s, 0)?;
        first_cycle = scenario.warmup_cycles;
    }
    let (_, traces) = scenario.traces(&registry, seed)?;
    let mut env = Environment::new(registry.clone(), traces, scenario.sim_config())?;
    let mut run = agents::run_agent(
        &mut env,
        agent.as_mut(),
        scenario.duration_s,
        scenario.cycle_s,
        scenario.window_s,
        first_cycle,
    )?;
    for d in &mut run.decisions {
        d.runtime_ms = round_ms(d.runtime_ms);
    }
    let runtimes: Vec<f64> = run
        .decisions
        .iter()
        .filter(|d| d.decision.objective_estimate.is_some())
        .map(|d| d.runtime_ms)
        .collect();
    let summary = build_summary(scenario, &registry, repetition, seed, env.metrics_log(), &runtimes)?;
    Ok(RepetitionOutput {
        summary,
        registry,
        env,
        run,
    })
}

fn write_repetition(dir: &Path, out: &RepetitionOutput) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let metrics = dir.join("metrics.csv");
    let f = fs::File::create(&metrics).map_err(io_err(&metrics))?;
    simenv::write_metrics_csv(f, out.env.metrics_log(), &out.registry.parameter_families())?;
    let decisions = dir.join("decisions.csv");
    let f = fs::File::create(&decisions).map_err(io_err(&decisions))?;
    agents::write_decisions_csv(f, &out.registry, &out.run.decisions)?;
    let summary = dir.join("summary.json");
    fs::write(&summary, serde_json::to_string_pretty(&out.summary)?).map_err(io_err(&summary))?;
    Ok(())
}

/// Result of one repetition: its summary or the error that stopped it.
pub type RepetitionResult = Result<RunSummary, String>;

/// Runs all repetitions in parallel. With `out`, raw logs and summaries go
/// to `out/<scenario>/<rep>/`.
pub fn run_scenario(scenario: &Scenario, out: Option<&Path>) -> Result<Vec<RepetitionResult>, HarnessError> {
    scenario.validate()?;
    scenario.build_registry()?;
    let results: Vec<RepetitionResult> = (0..scenario.repetitions)
        .into_par_iter()
        .map(|rep| {
            let r = run_repetition(scenario, rep).map_err(|e| e.to_string())?;
            if let Some(root) = out {
                write_repetition(&root.join(&scenario.name).join(rep.to_string()), &r).map_err(|e| e.to_string())?;
            }
            Ok(r.summary)
        })
        .collect();
    Ok(results)
}

/// Rebuilds a repetition's summary from the CSVs it wrote.
pub fn summary_from_csv(scenario: &Scenario, repetition: usize, dir: &Path) -> Result<RunSummary, HarnessError> {
    let registry = scenario.build_registry()?;
    let metrics = dir.join("metrics.csv");
    let rows = simenv::read_metrics_csv(fs::File::open(&metrics).map_err(io_err(&metrics))?, &registry)?;
    let decisions = dir.join("decisions.csv");
    let mut rd = csv::Reader::from_reader(fs::File::open(&decisions).map_err(io_err(&decisions))?);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HarnessError::Scenario(format!("decisions.csv lacks `{name}`")))
    };
    let (c_cycle, c_obj, c_rt) = (col("cycle")?, col("objective_estimate")?, col("solver_runtime_ms")?);
    let mut per_cycle: BTreeMap<u64, Option<f64>> = BTreeMap::new();
    for rec in rd.records() {
        let rec = rec?;
        let cycle: u64 = rec[c_cycle].parse().map_err(|_| HarnessError::Scenario("bad cycle".into()))?;
        let rt: f64 = rec[c_rt].parse().map_err(|_| HarnessError::Scenario("bad runtime".into()))?;
        let solved = !rec[c_obj].is_empty();
        per_cycle.entry(cycle).or_insert(if solved { Some(rt) } else { None });
    }
    let runtimes: Vec<f64> = per_cycle.values().flatten().copied().collect();
    let seed = scenario.base_seed + repetition as u64;
    build_summary(scenario, &registry, repetition, seed, &rows, &runtimes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub label: String,
    pub repetitions: usize,
    pub mean_series: Vec<f64>,
    pub std_series: Vec<f64>,
    pub mean_fulfillment: f64,
    pub median_fulfillment: f64,
    pub mean_violations: f64,
    pub mean_violations_high: f64,
    pub mean_violations_low: f64,
    pub mean_shortfall: f64,
    pub mean_shortfall_high: f64,
    pub runtime_p50_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub better: String,
    pub baseline: String,
    /// `100 * (baseline - better) / baseline` over mean violation cycles;
    /// `None` when the baseline has none.
    pub violation_reduction_pct: Option<f64>,
    pub high_band_reduction_pct: Option<f64>,
    pub shortfall_reduction_pct: Option<f64>,
    pub high_band_shortfall_reduction_pct: Option<f64>,
    /// Repetitions (paired by index) where `better` has strictly fewer
    /// violation cycles in the high-load band.
    pub seeds_fewer_high_band: usize,
    pub paired_seeds: usize,
    pub fulfillment_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub load_band: f64,
    pub labels: Vec<LabelStats>,
    pub pairs: Vec<PairStats>,
}

fn reduction(better: f64, baseline: f64) -> Option<f64> {
    (baseline > 0.0).then(|| 100.0 * (baseline - better) / baseline)
}

fn high_band_shortfall(s: &RunSummary, band: f64) -> f64 {
    s.fulfillment
        .iter()
        .zip(&s.load)
        .filter(|(_, l)| **l >= band)
        .map(|(f, _)| 1.0 - f)
        .sum()
}

/// Aggregates repetitions per label and compares every ordered pair.
pub fn compare(groups: &[(String, Vec<RunSummary>)], load_band: f64) -> Result<ComparisonReport, HarnessError> {
    let len = groups
        .iter()
        .flat_map(|(_, v)| v.iter())
        .map(RunSummary::cycles)
        .next()
        .ok_or_else(|| HarnessError::Mismatch("no summaries".into()))?;
    for (label, runs) in groups {
        if runs.is_empty() {
            return Err(HarnessError::Mismatch(format!("label {label} has no summaries")));
        }
        if let Some(r) = runs.iter().find(|r| r.cycles() != len) {
            return Err(HarnessError::Mismatch(format!("{label} rep {} has {} cycles, expected {len}", r.repetition, r.cycles())));
        }
    }
    let mut labels = Vec::new();
    for (label, runs) in groups {
        let series: Vec<f64> = (0..len).map(|c| mean(&runs.iter().map(|r| r.fulfillment[c]).collect::<Vec<_>>())).collect();
        let std: Vec<f64> = (0..len).map(|c| std_dev(&runs.iter().map(|r| r.fulfillment[c]).collect::<Vec<_>>())).collect();
        let bands: Vec<(usize, usize)> = runs.iter().map(|r| r.violations_by_band(load_band)).collect();
        labels.push(LabelStats {
            label: label.clone(),
            repetitions: runs.len(),
            mean_fulfillment: mean(&runs.iter().map(|r| r.mean).collect::<Vec<_>>()),
            median_fulfillment: median(&runs.iter().map(|r| r.median).collect::<Vec<_>>()),
            mean_violations: mean(&runs.iter().map(|r| r.violation_count as f64).collect::<Vec<_>>()),
            mean_violations_high: mean(&bands.iter().map(|b| b.0 as f64).collect::<Vec<_>>()),
            mean_violations_low: mean(&bands.iter().map(|b| b.1 as f64).collect::<Vec<_>>()),
            mean_shortfall: mean(&runs.iter().map(|r| r.shortfall).collect::<Vec<_>>()),
            mean_shortfall_high: mean(&runs.iter().map(|r| high_band_shortfall(r, load_band)).collect::<Vec<_>>()),
            runtime_p50_ms: median(&runs.iter().map(|r| r.runtime_ms.p50).collect::<Vec<_>>()),
            mean_series: series,
            std_series: std,
        });
    }
    let mut pairs = Vec::new();
    for (i, a) in labels.iter().enumerate() {
        for (j, b) in labels.iter().enumerate() {
            if i == j {
                continue;
            }
            let (ra, rb) = (&groups[i].1, &groups[j].1);
            let paired = ra.len().min(rb.len());
            let fewer = (0..paired)
                .filter(|&k| ra[k].violations_by_band(load_band).0 < rb[k].violations_by_band(load_band).0)
                .count();
            pairs.push(PairStats {
                better: a.label.clone(),
                baseline: b.label.clone(),
                violation_reduction_pct: reduction(a.mean_violations, b.mean_violations),
                high_band_reduction_pct: reduction(a.mean_violations_high, b.mean_violations_high),
                shortfall_reduction_pct: reduction(a.mean_shortfall, b.mean_shortfall),
                high_band_shortfall_reduction_pct: reduction(a.mean_shortfall_high, b.mean_shortfall_high),
                seeds_fewer_high_band: fewer,
                paired_seeds: paired,
                fulfillment_gain: a.mean_fulfillment - b.mean_fulfillment,
            });
        }
    }
    Ok(ComparisonReport {
        load_band,
        labels,
        pairs,
    })
}

/// Summaries grouped by a sweep value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGroup {
    pub value: usize,
    pub summaries: Vec<RunSummary>,
    pub failures: Vec<String>,
    pub median_fulfillment: f64,
    pub median_runtime_ms: f64,
    pub parameter_count: usize,
}

fn group(value: usize, results: Vec<RepetitionResult>) -> SweepGroup {
    let mut summaries = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(s) => summaries.push(s),
            Err(e) => failures.push(e),
        }
    }
    let fulfill: Vec<f64> = summaries.iter().flat_map(|s| s.fulfillment.iter().copied()).collect();
    let runtimes: Vec<f64> = summaries.iter().map(|s| s.runtime_ms.p50).collect();
    SweepGroup {
        value,
        parameter_count: summaries.first().map_or(0, |s| s.parameter_count),
        median_fulfillment: median(&fulfill),
        median_runtime_ms: median(&runtimes),
        summaries,
        failures,
    }
}

pub fn with_dims(scenario: &Scenario, d: usize) -> Result<Scenario, HarnessError> {
    let mut s = scenario.clone();
    match &mut s.agent {
        AgentSpec::Rask { dims, .. } => *dims = Some(d),
        _ => return Err(HarnessError::Scenario("dims apply to rask agents only".into())),
    }
    s.name = format!("{}-dims{d}", scenario.name);
    Ok(s)
}

/// Runs the scenario once per entry of `dims`.
pub fn sweep_dims(scenario: &Scenario, dims: &[usize], out: Option<&Path>) -> Result<Vec<SweepGroup>, HarnessError> {
    dims.iter()
        .map(|&d| Ok(group(d, run_scenario(&with_dims(scenario, d)?, out)?)))
        .collect()
}

/// Scenario with `count` services built by replicating the registry; the
/// capacity grows with the number of copies and models are shared per type.
pub fn with_services(scenario: &Scenario, count: usize) -> Result<Scenario, HarnessError> {
    let base = Registry::from_path(&scenario.registry)?;
    let per = base.services.len();
    if count == 0 || !count.is_multiple_of(per) {
        return Err(HarnessError::Scenario(format!("{count} services is not a multiple of {per}")));
    }
    let copies = count / per;
    let mut s = scenario.clone();
    s.replicas = copies;
    s.capacity = Some(base.constraints.capacity * copies as f64);
    if let AgentSpec::Rask { share_models_by_type, .. } = &mut s.agent {
        *share_models_by_type = true;
    }
    s.name = format!("{}-services{count}", scenario.name);
    Ok(s)
}

pub fn sweep_services(scenario: &Scenario, counts: &[usize], out: Option<&Path>) -> Result<Vec<SweepGroup>, HarnessError> {
    counts
        .iter()
        .map(|&n| Ok(group(n, run_scenario(&with_services(scenario, n)?, out)?)))
        .collect()
}
