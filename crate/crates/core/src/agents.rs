//! Scaling agents and the loop that drives them against an [`Environment`].

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::{self, Assignment, PlanError, PlannerCache, Problem, SolverBudget};
use crate::registry::{Registry, ServiceId};
use crate::regression::{self, ObservationTable, RegressionError, RegressionModel, DEFAULT_DEGREE, MAX_DEGREE};
use crate::simenv::{Environment, SimError};
use crate::slo::MetricsRow;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("cycle length must be at least 1 second")]
    ZeroCycle,
    #[error("duration {duration} is not a multiple of the cycle length {cycle}")]
    Misaligned { duration: u64, cycle: u64 },
    #[error("duration {duration} exceeds the {remaining} s left in the environment")]
    TooLong { duration: u64, remaining: u64 },
    #[error("no observation for {0}")]
    MissingObservation(String),
    #[error("invalid agent configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Regression(#[from] RegressionError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// What an agent sees at the end of a cycle.
pub struct DecisionContext<'a> {
    pub cycle: u64,
    pub registry: &'a Registry,
    /// Windowed observation per service.
    pub observations: &'a BTreeMap<ServiceId, MetricsRow>,
    /// Configuration currently targeted by the environment.
    pub current: &'a Assignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub assignment: Assignment,
    /// Planner objective of the solver output, when the solver ran.
    pub objective_estimate: Option<f64>,
    pub explored: bool,
    pub degraded: bool,
    pub restarted: bool,
}

impl Decision {
    fn plain(assignment: Assignment) -> Self {
        Self {
            assignment,
            objective_estimate: None,
            explored: false,
            degraded: false,
            restarted: false,
        }
    }
}

/// Anything that turns observations into a new assignment once per cycle.
pub trait ScalingAgent: Send {
    fn name(&self) -> String;
    fn decide(&mut self, ctx: &DecisionContext) -> Result<Decision, AgentError>;
}

/// Keeps every service at its registry defaults.
#[derive(Debug, Clone, Default)]
pub struct NoopAgent;

impl ScalingAgent for NoopAgent {
    fn name(&self) -> String {
        "noop".into()
    }

    fn decide(&mut self, ctx: &DecisionContext) -> Result<Decision, AgentError> {
        Ok(Decision::plain(Assignment::defaults(&ctx.registry.services)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy", content = "degree")]
pub enum DegreePolicy {
    Fixed(usize),
    /// Held-out selection over degrees 1 to 6 once a table is large enough.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RaskConfig {
    pub xi: u64,
    pub eta: f64,
    pub cycle_s: u64,
    pub degree_policy: DegreePolicy,
    pub caching: bool,
    pub noise_exponent: f64,
    /// Cycles after exploration over which eta falls linearly to zero.
    pub eta_decay_cycles: Option<u64>,
    /// Parameter names the agent may change; all when `None`.
    pub movable: Option<BTreeSet<String>>,
    /// One table and model per service type instead of per instance.
    pub share_models_by_type: bool,
    pub budget: SolverBudget,
    pub seed: u64,
}

impl Default for RaskConfig {
    fn default() -> Self {
        Self {
            xi: 20,
            eta: 0.0,
            cycle_s: 10,
            degree_policy: DegreePolicy::Fixed(DEFAULT_DEGREE),
            caching: true,
            noise_exponent: 1.0,
            eta_decay_cycles: None,
            movable: None,
            share_models_by_type: false,
            budget: SolverBudget::default(),
            seed: 0,
        }
    }
}

impl RaskConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.cycle_s < 1 {
            return Err(AgentError::ZeroCycle);
        }
        if !(self.eta >= 0.0) {
            return Err(PlanError::NegativeEta(self.eta).into());
        }
        if let DegreePolicy::Fixed(d) = self.degree_policy {
            if !(1..=MAX_DEGREE).contains(&d) {
                return Err(RegressionError::InvalidDegree(d).into());
            }
        }
        self.budget.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RaskState {
    /// Completed cycles.
    pub rounds: u64,
    pub tables: BTreeMap<String, ObservationTable>,
    pub models: BTreeMap<String, RegressionModel>,
    pub cache: PlannerCache,
}

pub struct RaskAgent {
    pub config: RaskConfig,
    pub state: RaskState,
    rng: ChaCha8Rng,
}

impl RaskAgent {
    pub fn new(config: RaskConfig) -> Result<Self, AgentError> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            state: RaskState::default(),
            rng,
        })
    }

    fn table_key(&self, id: &ServiceId) -> String {
        if self.config.share_models_by_type {
            id.service_type.clone()
        } else {
            id.to_string()
        }
    }

    fn current_eta(&self) -> f64 {
        match self.config.eta_decay_cycles {
            Some(n) if n > 0 => {
                let since = self.state.rounds.saturating_sub(self.config.xi) as f64;
                self.config.eta * (1.0 - since / n as f64).max(0.0)
            }
            _ => self.config.eta,
        }
    }

    fn record(&mut self, ctx: &DecisionContext) -> Result<(), AgentError> {
        for s in &ctx.registry.services {
            let obs = ctx
                .observations
                .get(&s.id)
                .ok_or_else(|| AgentError::MissingObservation(s.id.to_string()))?;
            let key = self.table_key(&s.id);
            let table = self
                .state
                .tables
                .entry(key)
                .or_insert_with(|| ObservationTable::new(s.id.clone(), s.relation.features.clone()));
            let x = s
                .relation
                .features
                .iter()
                .map(|f| obs.get(f).ok_or_else(|| AgentError::MissingObservation(format!("{} `{f}`", s.id))))
                .collect::<Result<Vec<_>, _>>()?;
            table.push(x, obs.tp_max())?;
        }
        Ok(())
    }

    fn degree_for(&self, ctx: &DecisionContext, key: &str, table: &ObservationTable, seed: u64) -> Result<usize, AgentError> {
        let override_degree = ctx
            .registry
            .services
            .iter()
            .find(|s| self.table_key(&s.id) == key)
            .and_then(|s| s.relation.degree_override);
        if let Some(d) = override_degree {
            return Ok(d);
        }
        Ok(match self.config.degree_policy {
            DegreePolicy::Fixed(d) => d,
            DegreePolicy::Auto => {
                let candidates: Vec<usize> = (1..=MAX_DEGREE)
                    .filter(|&d| {
                        let train = table.len() - regression::test_rows(table.len(), 0.2);
                        regression::monomial_count(table.arity(), d) <= train
                    })
                    .collect();
                if candidates.len() < 2 || table.len() < 5 {
                    DEFAULT_DEGREE
                } else {
                    regression::select_degree(table, &candidates, 0.2, seed)?
                }
            }
        })
    }

    fn refit(&mut self, ctx: &DecisionContext, seed: u64) -> Result<(), AgentError> {
        let mut models = BTreeMap::new();
        for (key, table) in &self.state.tables {
            let degree = self.degree_for(ctx, key, table, seed)?;
            models.insert(key.clone(), regression::fit(table, degree)?);
        }
        self.state.models = models;
        Ok(())
    }

    fn plan(&mut self, ctx: &DecisionContext, seed: u64) -> Result<Decision, AgentError> {
        self.refit(ctx, seed)?;
        let services = &ctx.registry.services;
        let mut models = BTreeMap::new();
        let mut rps = BTreeMap::new();
        for s in services {
            let key = self.table_key(&s.id);
            let m = self.state.models.get(&key).ok_or_else(|| PlanError::MissingModel(s.id.to_string()))?;
            models.insert(s.id.clone(), m.clone());
            rps.insert(s.id.clone(), ctx.observations[&s.id].rps());
        }
        let problem = Problem {
            services,
            constraints: &ctx.registry.constraints,
            models: &models,
            rps: &rps,
            movable: self.config.movable.as_ref(),
        };
        let warm = if self.config.caching { self.state.cache.last_assignment.as_ref() } else { None };
        let out = planner::solve(&problem, &self.config.budget, warm, seed)?;
        let noisy = planner::add_noise(
            &out.assignment,
            services,
            &ctx.registry.constraints,
            self.current_eta(),
            self.config.noise_exponent,
            self.config.movable.as_ref(),
            seed.wrapping_add(1),
        )?;
        self.state.cache.last_assignment = Some(out.assignment);
        Ok(Decision {
            assignment: noisy,
            objective_estimate: Some(out.objective),
            explored: false,
            degraded: false,
            restarted: out.restarted,
        })
    }
}

impl ScalingAgent for RaskAgent {
    fn name(&self) -> String {
        format!("rask(xi={}, eta={})", self.config.xi, self.config.eta)
    }

    fn decide(&mut self, ctx: &DecisionContext) -> Result<Decision, AgentError> {
        self.record(ctx)?;
        let explore = self.state.rounds < self.config.xi;
        self.state.rounds += 1;
        let seed: u64 = self.rng.random();
        if explore {
            let base = Assignment::defaults(&ctx.registry.services);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = planner::rand_param_masked(
                &ctx.registry.services,
                &ctx.registry.constraints,
                &base,
                self.config.movable.as_ref(),
                &mut rng,
            )?;
            return Ok(Decision {
                explored: true,
                ..Decision::plain(a)
            });
        }
        match self.plan(ctx, seed) {
            Ok(d) => Ok(d),
            Err(_) => {
                let fallback = self.state.cache.last_assignment.clone().unwrap_or_else(|| ctx.current.clone());
                Ok(Decision {
                    degraded: true,
                    ..Decision::plain(fallback)
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VpaConfig {
    pub slack_low: f64,
    pub slack_high: f64,
    pub step_cores: f64,
    pub cycle_s: u64,
}

impl Default for VpaConfig {
    fn default() -> Self {
        Self {
            slack_low: 0.05,
            slack_high: 0.15,
            step_cores: 0.25,
            cycle_s: 10,
        }
    }
}

impl VpaConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if !(0.0 < self.slack_low && self.slack_low < self.slack_high && self.slack_high < 1.0) {
            return Err(AgentError::Config(format!(
                "need 0 < slack_low < slack_high < 1, got {} and {}",
                self.slack_low, self.slack_high
            )));
        }
        if !(self.step_cores > 0.0) {
            return Err(AgentError::Config("step_cores must be positive".into()));
        }
        if self.cycle_s < 1 {
            return Err(AgentError::ZeroCycle);
        }
        Ok(())
    }
}

/// Resource-only baseline keeping CPU utilization inside a band.
#[derive(Debug, Clone)]
pub struct VpaAgent {
    pub config: VpaConfig,
}

impl VpaAgent {
    pub fn new(config: VpaConfig) -> Result<Self, AgentError> {
        config.validate()?;
        Ok(Self { config })
    }
}

impl ScalingAgent for VpaAgent {
    fn name(&self) -> String {
        "vpa".into()
    }

    fn decide(&mut self, ctx: &DecisionContext) -> Result<Decision, AgentError> {
        let reg = ctx.registry;
        let resource = reg.constraints.resource_name.as_str();
        let mut out = ctx.current.clone();
        let mut wants_more = Vec::new();
        for s in &reg.services {
            let Some(p) = s.param(resource) else { continue };
            let obs = ctx
                .observations
                .get(&s.id)
                .ok_or_else(|| AgentError::MissingObservation(s.id.to_string()))?;
            let util = obs.get("cpu_utilization").unwrap_or(1.0);
            let cores = ctx.current.get(&s.id, resource).unwrap_or(p.min);
            if util > 1.0 - self.config.slack_low {
                wants_more.push((cores, s.id.clone(), p.max));
            } else if util < 1.0 - self.config.slack_high {
                out.set(&s.id, resource, (cores - self.config.step_cores).max(p.min));
            }
        }
        let mut total = out.resource_total(&reg.services, resource);
        wants_more.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (cores, id, max) in wants_more {
            let next = (cores + self.config.step_cores).min(max);
            let inc = next - cores;
            if inc > 0.0 && total + inc <= reg.constraints.capacity + 1e-9 {
                out.set(&id, resource, next);
                total += inc;
            }
        }
        Ok(Decision::plain(out))
    }
}

/// One agent invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub cycle: u64,
    pub tick: u64,
    pub decision: Decision,
    /// Wall-clock time of the agent call.
    pub runtime_ms: f64,
}

/// Observations an agent received in one cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleObservation {
    pub cycle: u64,
    pub tick: u64,
    pub rows: Vec<MetricsRow>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentRun {
    pub decisions: Vec<DecisionRecord>,
    pub observations: Vec<CycleObservation>,
}

/// Steps `env` for `duration` seconds and lets `agent` decide every `cycle`
/// seconds from `window`-second averages. Cycle numbers continue from
/// `first_cycle`.
pub fn run_agent(
    env: &mut Environment,
    agent: &mut dyn ScalingAgent,
    duration: u64,
    cycle: u64,
    window: usize,
    first_cycle: u64,
) -> Result<AgentRun, AgentError> {
    if cycle == 0 {
        return Err(AgentError::ZeroCycle);
    }
    if !duration.is_multiple_of(cycle) {
        return Err(AgentError::Misaligned { duration, cycle });
    }
    if duration > env.remaining() {
        return Err(AgentError::TooLong {
            duration,
            remaining: env.remaining(),
        });
    }
    let mut run = AgentRun::default();
    let mut current = env.effective_assignment();
    for t in 1..=duration {
        env.step()?;
        if t % cycle != 0 {
            continue;
        }
        let n = first_cycle + t / cycle - 1;
        let mut observations = BTreeMap::new();
        for id in env.registry().ids() {
            let row = env.observe(&id, window)?;
            observations.insert(id, row);
        }
        let ctx = DecisionContext {
            cycle: n,
            registry: env.registry(),
            observations: &observations,
            current: &current,
        };
        let started = Instant::now();
        let decision = agent.decide(&ctx)?;
        let runtime_ms = started.elapsed().as_secs_f64() * 1000.0;
        env.apply_assignment(&decision.assignment)?;
        current = target_assignment(env);
        run.observations.push(CycleObservation {
            cycle: n,
            tick: env.tick(),
            rows: observations.into_values().collect(),
        });
        run.decisions.push(DecisionRecord {
            cycle: n,
            tick: env.tick(),
            decision,
            runtime_ms,
        });
    }
    Ok(run)
}

fn target_assignment(env: &Environment) -> Assignment {
    let mut a = Assignment::default();
    for s in env.services() {
        for (k, v) in &s.target {
            a.set(&s.id, k, *v);
        }
    }
    a
}

/// Writes `cycle, service, <params...>, objective_estimate, solver_runtime_ms`.
pub fn write_decisions_csv<W: Write>(w: W, registry: &Registry, records: &[DecisionRecord]) -> Result<(), AgentError> {
    let params = registry.parameter_families();
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["cycle".to_string(), "service".to_string()];
    header.extend(params.iter().cloned());
    header.extend(["objective_estimate".to_string(), "solver_runtime_ms".to_string()]);
    wr.write_record(&header)?;
    for r in records {
        for s in &registry.services {
            let mut rec = vec![r.cycle.to_string(), s.id.to_string()];
            for p in &params {
                rec.push(r.decision.assignment.get(&s.id, p).map(|v| v.to_string()).unwrap_or_default());
            }
            rec.push(r.decision.objective_estimate.map(|v| v.to_string()).unwrap_or_default());
            rec.push(format!("{:.3}", r.runtime_ms));
            wr.write_record(&rec)?;
        }
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}
