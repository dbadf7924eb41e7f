//! Parameter assignments and the SLO-maximizing solver.
//!
//! The solver works on every movable parameter rescaled to `[0, 1]` and runs
//! a spectral projected-gradient ascent on a smoothed copy of the objective:
//! each `min(x, 1)` in the fulfillment formula is replaced by a softmin so
//! the objective has a gradient everywhere. Gradients are finite
//! differences. Feasibility is kept by projecting onto the box intersected
//! with the shared-resource half-space after every step.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::regression::{CompiledModel, RegressionError, RegressionModel};
use crate::registry::{GlobalConstraints, Registry, RegistryError, ServiceDescriptor, ServiceId};
use crate::slo::{self, SloError};

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("constraints unsatisfiable: minimum {resource} demand {required} exceeds capacity {capacity}")]
    Infeasible {
        resource: String,
        required: f64,
        capacity: f64,
    },
    #[error("no regression model for {0}")]
    MissingModel(String),
    #[error("no request rate for {0}")]
    MissingRps(String),
    #[error("assignment has no value for {service} `{param}`")]
    MissingParameter { service: String, param: String },
    #[error("noise ratio must be non-negative (got {0})")]
    NegativeEta(f64),
    #[error("invalid solver budget: {0}")]
    InvalidBudget(String),
    #[error("objective is not finite at any start point")]
    NonFinite,
    #[error(transparent)]
    Regression(#[from] RegressionError),
    #[error(transparent)]
    Slo(#[from] SloError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AssignmentEntry {
    service: ServiceId,
    values: BTreeMap<String, f64>,
}

/// Parameter values for a set of services.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<AssignmentEntry>", into = "Vec<AssignmentEntry>")]
pub struct Assignment {
    values: BTreeMap<ServiceId, BTreeMap<String, f64>>,
}

impl From<Vec<AssignmentEntry>> for Assignment {
    fn from(entries: Vec<AssignmentEntry>) -> Self {
        Self {
            values: entries.into_iter().map(|e| (e.service, e.values)).collect(),
        }
    }
}

impl From<Assignment> for Vec<AssignmentEntry> {
    fn from(a: Assignment) -> Self {
        a.values
            .into_iter()
            .map(|(service, values)| AssignmentEntry { service, values })
            .collect()
    }
}

impl Assignment {
    pub fn defaults(services: &[ServiceDescriptor]) -> Self {
        Self {
            values: services
                .iter()
                .map(|s| (s.id.clone(), s.default_assignment.clone()))
                .collect(),
        }
    }

    pub fn get(&self, id: &ServiceId, param: &str) -> Option<f64> {
        self.values.get(id).and_then(|m| m.get(param)).copied()
    }

    pub fn set(&mut self, id: &ServiceId, param: &str, value: f64) {
        self.values.entry(id.clone()).or_default().insert(param.to_string(), value);
    }

    pub fn service(&self, id: &ServiceId) -> Option<&BTreeMap<String, f64>> {
        self.values.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ServiceId, &BTreeMap<String, f64>)> {
        self.values.iter()
    }

    pub fn is_complete(&self, services: &[ServiceDescriptor]) -> bool {
        services
            .iter()
            .all(|s| s.params.iter().all(|p| self.get(&s.id, &p.name).is_some_and(f64::is_finite)))
    }

    /// Sum of the shared resource over `services`.
    pub fn resource_total(&self, services: &[ServiceDescriptor], resource: &str) -> f64 {
        services.iter().filter_map(|s| self.get(&s.id, resource)).sum()
    }

    /// Complete, within bounds and within capacity, all up to `tol`.
    pub fn is_feasible(&self, services: &[ServiceDescriptor], constraints: &GlobalConstraints, tol: f64) -> bool {
        self.is_complete(services)
            && services.iter().all(|s| {
                s.params.iter().all(|p| {
                    let v = self.get(&s.id, &p.name).unwrap_or(f64::NAN);
                    v >= p.min - tol && v <= p.max + tol
                })
            })
            && self.resource_total(services, &constraints.resource_name) <= constraints.capacity + tol
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("assignment serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverBudget {
    pub max_iterations: usize,
    pub objective_tolerance: f64,
    pub constraint_tolerance: f64,
    /// Step as a fraction of each parameter's range.
    pub finite_difference_step: f64,
    pub smoothing_beta: f64,
    /// Random restarts run after the warm-started ascent.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_restarts() -> usize {
    8
}

impl Default for SolverBudget {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            objective_tolerance: 1e-6,
            constraint_tolerance: 1e-6,
            finite_difference_step: 1e-3,
            smoothing_beta: 50.0,
            restarts: default_restarts(),
        }
    }
}

impl SolverBudget {
    pub fn validate(&self) -> Result<(), PlanError> {
        let ok = self.max_iterations > 0
            && self.objective_tolerance > 0.0
            && self.constraint_tolerance > 0.0
            && self.finite_difference_step > 0.0
            && self.finite_difference_step < 0.5
            && self.smoothing_beta > 0.0;
        if ok {
            Ok(())
        } else {
            Err(PlanError::InvalidBudget(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlannerCache {
    pub last_assignment: Option<Assignment>,
}

/// Which parameter names the planner may change. `None` means all.
pub type Movable<'a> = Option<&'a BTreeSet<String>>;

fn is_movable(movable: Movable, name: &str) -> bool {
    movable.is_none_or(|m| m.contains(name))
}

fn min_demand_check(services: &[ServiceDescriptor], constraints: &GlobalConstraints) -> Result<(), PlanError> {
    let required = constraints.min_demand(services);
    if required > constraints.capacity + 1e-12 {
        return Err(PlanError::Infeasible {
            resource: constraints.resource_name.clone(),
            required,
            capacity: constraints.capacity,
        });
    }
    Ok(())
}

/// Uniform draw of every parameter within its bounds. When the shared
/// resource overshoots capacity, each service's share above its minimum is
/// scaled down by a common factor.
pub fn rand_param(services: &[ServiceDescriptor], constraints: &GlobalConstraints, seed: u64) -> Result<Assignment, PlanError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand_param_masked(services, constraints, &Assignment::defaults(services), None, &mut rng)
}

/// [`rand_param`] drawing only movable parameters; the rest keep their
/// value from `base`.
pub fn rand_param_masked(
    services: &[ServiceDescriptor],
    constraints: &GlobalConstraints,
    base: &Assignment,
    movable: Movable,
    rng: &mut impl Rng,
) -> Result<Assignment, PlanError> {
    min_demand_check(services, constraints)?;
    let resource = constraints.resource_name.as_str();
    let mut out = Assignment::default();
    let mut fixed_resource = 0.0;
    let mut mins = 0.0;
    let mut excess = 0.0;
    for s in services {
        for p in &s.params {
            let v = if is_movable(movable, &p.name) {
                if p.max > p.min { rng.random_range(p.min..=p.max) } else { p.min }
            } else {
                base.get(&s.id, &p.name).ok_or_else(|| PlanError::MissingParameter {
                    service: s.id.to_string(),
                    param: p.name.clone(),
                })?
            };
            out.set(&s.id, &p.name, v);
            if p.name == resource {
                if is_movable(movable, &p.name) {
                    mins += p.min;
                    excess += v - p.min;
                } else {
                    fixed_resource += v;
                }
            }
        }
    }
    let slack = constraints.capacity - fixed_resource - mins;
    if slack < -1e-12 {
        return Err(PlanError::Infeasible {
            resource: resource.to_string(),
            required: fixed_resource + mins,
            capacity: constraints.capacity,
        });
    }
    if excess > slack {
        let f = slack.max(0.0) / excess;
        for s in services {
            if let (Some(p), true) = (s.param(resource), is_movable(movable, resource)) {
                let v = out.get(&s.id, resource).expect("drawn above");
                out.set(&s.id, resource, p.min + (v - p.min) * f);
            }
        }
    }
    Ok(out)
}

fn missing(s: &ServiceDescriptor, p: &str) -> PlanError {
    PlanError::MissingParameter {
        service: s.id.to_string(),
        param: p.to_string(),
    }
}

/// Metric an SLO reads once parameter values are known: the parameter
/// itself, or something derived from the predicted maximum throughput.
fn slo_metric(
    variable: &str,
    param: impl Fn(&str) -> Option<f64>,
    predicted_tp: f64,
    rps: f64,
) -> Option<f64> {
    match variable {
        "completion" => Some(slo::completion(predicted_tp, rps)),
        "tp_max" => Some(predicted_tp),
        "throughput" => Some(predicted_tp.min(rps)),
        "rps" => Some(rps),
        other => param(other),
    }
}

/// Sum over services of weighted fulfillment, with parameter SLOs read
/// from the assignment and throughput SLOs from the model prediction.
pub fn objective(
    assignment: &Assignment,
    models: &BTreeMap<ServiceId, RegressionModel>,
    services: &[ServiceDescriptor],
    rps: &BTreeMap<ServiceId, f64>,
) -> Result<f64, PlanError> {
    let mut total = 0.0;
    for s in services {
        let model = models.get(&s.id).ok_or_else(|| PlanError::MissingModel(s.id.to_string()))?;
        let r = *rps.get(&s.id).ok_or_else(|| PlanError::MissingRps(s.id.to_string()))?;
        let x = s
            .relation
            .features
            .iter()
            .map(|f| assignment.get(&s.id, f).ok_or_else(|| missing(s, f)))
            .collect::<Result<Vec<_>, _>>()?;
        let tp = model.predict(&x)?;
        total += slo::weighted_fulfillment(&s.slos, |v| slo_metric(v, |p| assignment.get(&s.id, p), tp, r))?;
    }
    Ok(total)
}

/// Smooth lower approximation of `min(x, 1)`.
pub fn softmin1(x: f64, beta: f64) -> f64 {
    x.min(1.0) - (-beta * (x - 1.0).abs()).exp().ln_1p() / beta
}

enum Metric {
    Slot(usize),
    Completion,
    TpMax,
    Throughput,
    Rps,
}

struct ServiceEval {
    model: CompiledModel,
    features: Vec<usize>,
    slos: Vec<(Metric, f64, f64)>,
    weight_sum: f64,
    rps: f64,
}

/// The optimization problem flattened to slot vectors.
struct Compiled {
    /// (service, parameter) of each slot
    slots: Vec<(ServiceId, String)>,
    base: Vec<f64>,
    vars: Vec<usize>,
    lo: Vec<f64>,
    span: Vec<f64>,
    /// shared-resource coefficient of each variable in normalized units
    cap_a: Vec<f64>,
    cap_b: f64,
    services: Vec<ServiceEval>,
    /// service index of each variable
    var_service: Vec<usize>,
}

impl Compiled {
    fn new(problem: &Problem, start: &Assignment) -> Result<Self, PlanError> {
        min_demand_check(problem.services, problem.constraints)?;
        let resource = problem.constraints.resource_name.as_str();
        let mut slots = Vec::new();
        let mut base = Vec::new();
        let mut vars = Vec::new();
        let (mut lo, mut span, mut cap_a) = (Vec::new(), Vec::new(), Vec::new());
        let mut cap_b = problem.constraints.capacity;
        let mut services = Vec::new();
        let mut var_service = Vec::new();
        for (si, s) in problem.services.iter().enumerate() {
            let first = slots.len();
            for p in &s.params {
                let v = start.get(&s.id, &p.name).ok_or_else(|| missing(s, &p.name))?;
                let v = v.clamp(p.min, p.max);
                let idx = slots.len();
                slots.push((s.id.clone(), p.name.clone()));
                base.push(v);
                let moves = is_movable(problem.movable, &p.name) && p.max > p.min;
                if moves {
                    vars.push(idx);
                    var_service.push(si);
                    lo.push(p.min);
                    span.push(p.max - p.min);
                    cap_a.push(if p.name == resource { p.max - p.min } else { 0.0 });
                    if p.name == resource {
                        cap_b -= p.min;
                    }
                } else if p.name == resource {
                    cap_b -= v;
                }
            }
            let slot_of = |name: &str| s.params.iter().position(|p| p.name == name).map(|i| first + i);
            let model = problem.models.get(&s.id).ok_or_else(|| PlanError::MissingModel(s.id.to_string()))?;
            let rps = *problem.rps.get(&s.id).ok_or_else(|| PlanError::MissingRps(s.id.to_string()))?;
            let features = s
                .relation
                .features
                .iter()
                .map(|f| slot_of(f).ok_or_else(|| missing(s, f)))
                .collect::<Result<Vec<_>, _>>()?;
            if features.len() != model.arity() {
                return Err(RegressionError::ArityMismatch {
                    expected: features.len(),
                    got: model.arity(),
                }
                .into());
            }
            let mut slos = Vec::new();
            for slo in &s.slos {
                let m = match slo.variable.as_str() {
                    "completion" => Metric::Completion,
                    "tp_max" => Metric::TpMax,
                    "throughput" => Metric::Throughput,
                    "rps" => Metric::Rps,
                    other => Metric::Slot(slot_of(other).ok_or_else(|| SloError::MissingVariable(other.to_string()))?),
                };
                slos.push((m, slo.target, slo.weight));
            }
            if slos.is_empty() {
                return Err(SloError::NoSlos.into());
            }
            services.push(ServiceEval {
                model: model.compiled(),
                features,
                weight_sum: s.slos.iter().map(|x| x.weight).sum(),
                slos,
                rps,
            });
        }
        if cap_b < -1e-12 {
            return Err(PlanError::Infeasible {
                resource: resource.to_string(),
                required: problem.constraints.capacity - cap_b,
                capacity: problem.constraints.capacity,
            });
        }
        Ok(Self {
            slots,
            base,
            vars,
            lo,
            span,
            cap_a,
            cap_b: cap_b.max(0.0),
            services,
            var_service,
        })
    }

    fn normalize(&self, x: &[f64]) -> Vec<f64> {
        self.vars
            .iter()
            .enumerate()
            .map(|(j, &i)| ((x[i] - self.lo[j]) / self.span[j]).clamp(0.0, 1.0))
            .collect()
    }

    fn raw(&self, z: &[f64]) -> Vec<f64> {
        let mut x = self.base.clone();
        for (j, &i) in self.vars.iter().enumerate() {
            x[i] = self.lo[j] + self.span[j] * z[j];
        }
        x
    }

    /// Objective at raw values `x`; `beta` selects the smoothed form.
    fn value(&self, x: &[f64], beta: Option<f64>) -> f64 {
        (0..self.services.len()).map(|i| self.service_value(i, x, beta)).sum()
    }

    /// Weighted fulfillment of service `i` at raw values `x`.
    fn service_value(&self, i: usize, x: &[f64], beta: Option<f64>) -> f64 {
        let sat = |r: f64| match beta {
            Some(b) => softmin1(r, b),
            None => r.min(1.0),
        };
        let s = &self.services[i];
        let mut feat = [0.0; 8];
        let tp = if s.features.len() <= feat.len() {
            for (f, &j) in feat.iter_mut().zip(&s.features) {
                *f = x[j];
            }
            s.model.predict(&feat[..s.features.len()])
        } else {
            s.model.predict(&s.features.iter().map(|&j| x[j]).collect::<Vec<_>>())
        };
        let mut acc = 0.0;
        for (m, target, w) in &s.slos {
            let metric = match m {
                Metric::Slot(i) => x[*i],
                Metric::Completion => {
                    if s.rps <= 0.0 {
                        1.0
                    } else {
                        tp / s.rps
                    }
                }
                Metric::TpMax => tp,
                Metric::Throughput => tp.min(s.rps),
                Metric::Rps => s.rps,
            };
            acc += w * sat(metric.max(0.0) / target);
        }
        acc / s.weight_sum
    }

    /// Forward-difference gradient of the smoothed objective in normalized
    /// coordinates, stepping backwards at the upper bound. Only the service
    /// owning a variable is re-evaluated.
    fn gradient(&self, z: &[f64], beta: f64, h: f64) -> Vec<f64> {
        let mut x = self.raw(z);
        let base: Vec<f64> = (0..self.services.len()).map(|i| self.service_value(i, &x, Some(beta))).collect();
        let mut g = vec![0.0; z.len()];
        for (j, &slot) in self.vars.iter().enumerate() {
            let step = if z[j] + h <= 1.0 { h } else { -h };
            let keep = x[slot];
            x[slot] = self.lo[j] + self.span[j] * (z[j] + step);
            let si = self.var_service[j];
            g[j] = (self.service_value(si, &x, Some(beta)) - base[si]) / step;
            x[slot] = keep;
        }
        g
    }

    fn assignment(&self, x: &[f64]) -> Assignment {
        let mut a = Assignment::default();
        for ((id, name), v) in self.slots.iter().zip(x) {
            a.set(id, name, *v);
        }
        a
    }

    /// Euclidean projection onto `[0, 1]^n ∩ {a·z <= b}`.
    fn project(&self, y: &[f64]) -> Vec<f64> {
        let clamp = |tau: f64| -> Vec<f64> {
            y.iter()
                .zip(&self.cap_a)
                .map(|(v, a)| (v - tau * a).clamp(0.0, 1.0))
                .collect()
        };
        let load = |z: &[f64]| z.iter().zip(&self.cap_a).map(|(z, a)| z * a).sum::<f64>();
        let z = clamp(0.0);
        if load(&z) <= self.cap_b {
            return z;
        }
        let mut lo = 0.0;
        let mut hi = y
            .iter()
            .zip(&self.cap_a)
            .filter(|(_, a)| **a > 0.0)
            .map(|(v, a)| v / a)
            .fold(0.0, f64::max);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if load(&clamp(mid)) > self.cap_b {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi.max(1.0) {
                break;
            }
        }
        clamp(hi)
    }
}

/// Everything the solver needs about one decision.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub services: &'a [ServiceDescriptor],
    pub constraints: &'a GlobalConstraints,
    pub models: &'a BTreeMap<ServiceId, RegressionModel>,
    pub rps: &'a BTreeMap<ServiceId, f64>,
    pub movable: Movable<'a>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutcome {
    pub assignment: Assignment,
    /// True (unsmoothed) objective of `assignment`.
    pub objective: f64,
    pub start_objective: f64,
    pub iterations: usize,
    /// The result came from a random restart rather than the warm start.
    pub restarted: bool,
}

struct Ascent {
    z: Vec<f64>,
    iterations: usize,
}

fn spg(c: &Compiled, z0: Vec<f64>, budget: &SolverBudget) -> Ascent {
    let beta = Some(budget.smoothing_beta);
    let f = |z: &[f64]| c.value(&c.raw(z), beta);
    let h = budget.finite_difference_step;
    let grad = |z: &[f64]| c.gradient(z, budget.smoothing_beta, h);
    let mut z = c.project(&z0);
    let mut fz = f(&z);
    if z.is_empty() || !fz.is_finite() {
        return Ascent { z, iterations: 0 };
    }
    let mut g = grad(&z);
    let (alpha_min, alpha_max) = (1e-6, 1e3);
    let mut alpha = 1.0;
    let mut stalls = 0;
    let mut it = 0;
    while it < budget.max_iterations {
        it += 1;
        let trial: Vec<f64> = z.iter().zip(&g).map(|(v, gi)| v + alpha * gi).collect();
        let d: Vec<f64> = c.project(&trial).iter().zip(&z).map(|(p, v)| p - v).collect();
        if d.iter().all(|v| v.abs() < 1e-10) {
            break;
        }
        let slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut lambda = 1.0;
        let (z_new, f_new) = loop {
            let cand: Vec<f64> = z.iter().zip(&d).map(|(v, dv)| v + lambda * dv).collect();
            let fc = f(&cand);
            if fc >= fz + 1e-4 * lambda * slope || lambda < 1e-8 {
                break (cand, fc);
            }
            lambda *= 0.5;
        };
        if !(f_new >= fz) {
            break;
        }
        let g_new = grad(&z_new);
        let s: Vec<f64> = z_new.iter().zip(&z).map(|(a, b)| a - b).collect();
        // ascent: curvature of -f
        let sy: f64 = s.iter().zip(g_new.iter().zip(&g)).map(|(si, (gn, go))| -si * (gn - go)).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        alpha = if sy > 0.0 { (ss / sy).clamp(alpha_min, alpha_max) } else { alpha_max };
        let gain = f_new - fz;
        z = z_new;
        fz = f_new;
        g = g_new;
        if gain < budget.objective_tolerance {
            stalls += 1;
            if stalls >= 3 {
                break;
            }
        } else {
            stalls = 0;
        }
    }
    Ascent { z, iterations: it }
}

/// Maximizes the smoothed objective from `warm_start` (the defaults when
/// absent), then from `budget.restarts` random feasible points drawn with
/// `seed`. The best result by the true objective is returned, or the start
/// itself when nothing beats it.
pub fn solve(
    problem: &Problem,
    budget: &SolverBudget,
    warm_start: Option<&Assignment>,
    seed: u64,
) -> Result<SolveOutcome, PlanError> {
    budget.validate()?;
    let defaults = Assignment::defaults(problem.services);
    let start = warm_start.unwrap_or(&defaults);
    let c = Compiled::new(problem, start)?;
    let z_start = c.project(&c.normalize(&c.base));
    let x_start = c.raw(&z_start);
    let start_obj = c.value(&x_start, None);

    let first = spg(&c, z_start.clone(), budget);
    let mut best_z = first.z;
    let mut best = c.value(&c.raw(&best_z), None);
    let mut iterations = first.iterations;
    let mut restarted = false;
    if budget.restarts > 0 && !c.vars.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = c.assignment(&x_start);
        for _ in 0..budget.restarts {
            let r = rand_param_masked(problem.services, problem.constraints, &base, problem.movable, &mut rng)?;
            let xr: Vec<f64> = c
                .slots
                .iter()
                .map(|(id, p)| r.get(id, p).expect("complete draw"))
                .collect();
            let second = spg(&c, c.normalize(&xr), budget);
            iterations += second.iterations;
            let obj = c.value(&c.raw(&second.z), None);
            if obj > best || !best.is_finite() {
                best = obj;
                best_z = second.z;
                restarted = true;
            }
        }
    }
    if !best.is_finite() && !start_obj.is_finite() {
        return Err(PlanError::NonFinite);
    }
    let (x, objective) = if best >= start_obj || !start_obj.is_finite() {
        (c.raw(&best_z), best)
    } else {
        (x_start, start_obj)
    };
    Ok(SolveOutcome {
        assignment: c.assignment(&x),
        objective,
        start_objective: start_obj,
        iterations,
        restarted,
    })
}

/// Standard deviation of the perturbation applied to value `a`.
pub fn noise_sigma(a: f64, eta: f64, exponent: f64) -> f64 {
    (a.abs() * eta).powf(exponent)
}

/// Adds independent Gaussian noise to every movable value, then clips to
/// bounds and projects the shared resource back under capacity.
pub fn add_noise(
    assignment: &Assignment,
    services: &[ServiceDescriptor],
    constraints: &GlobalConstraints,
    eta: f64,
    exponent: f64,
    movable: Movable,
    seed: u64,
) -> Result<Assignment, PlanError> {
    if !(eta >= 0.0) {
        return Err(PlanError::NegativeEta(eta));
    }
    if eta == 0.0 {
        return Ok(assignment.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = assignment.clone();
    for s in services {
        for p in &s.params {
            let a = assignment.get(&s.id, &p.name).ok_or_else(|| missing(s, &p.name))?;
            if !is_movable(movable, &p.name) {
                continue;
            }
            let sigma = noise_sigma(a, eta, exponent);
            let v = if sigma > 0.0 {
                a + Normal::new(0.0, sigma).expect("finite sigma").sample(&mut rng)
            } else {
                a
            };
            out.set(&s.id, &p.name, v.clamp(p.min, p.max));
        }
    }
    project_resource(&mut out, services, constraints)?;
    Ok(out)
}

/// Moves the shared resource to the nearest point (Euclidean) that keeps
/// every service within bounds and the total within capacity.
pub fn project_resource(
    assignment: &mut Assignment,
    services: &[ServiceDescriptor],
    constraints: &GlobalConstraints,
) -> Result<(), PlanError> {
    min_demand_check(services, constraints)?;
    let resource = constraints.resource_name.as_str();
    let owners: Vec<&ServiceDescriptor> = services.iter().filter(|s| s.param(resource).is_some()).collect();
    let values: Vec<f64> = owners
        .iter()
        .map(|s| assignment.get(&s.id, resource).ok_or_else(|| missing(s, resource)))
        .collect::<Result<_, _>>()?;
    let bounds: Vec<(f64, f64)> = owners
        .iter()
        .map(|s| {
            let p = s.param(resource).expect("filtered");
            (p.min, p.max)
        })
        .collect();
    let clamp = |tau: f64| -> Vec<f64> {
        values
            .iter()
            .zip(&bounds)
            .map(|(v, (lo, hi))| (v - tau).clamp(*lo, *hi))
            .collect()
    };
    let mut x = clamp(0.0);
    if x.iter().sum::<f64>() > constraints.capacity {
        let mut lo = 0.0;
        let mut hi = values.iter().zip(&bounds).map(|(v, (l, _))| v - l).fold(0.0, f64::max);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if clamp(mid).iter().sum::<f64>() > constraints.capacity {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        x = clamp(hi);
    }
    for (s, v) in owners.iter().zip(x) {
        assignment.set(&s.id, resource, v);
    }
    Ok(())
}

/// Movable set for the first `dims` parameter families of `registry`.
pub fn movable_for_dims(registry: &Registry, dims: usize) -> BTreeSet<String> {
    registry.parameter_families().into_iter().take(dims).collect()
}
