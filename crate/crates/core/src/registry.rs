//! Service registry: identities, elasticity parameters, SLOs and the global
//! resource constraint of one device.
//!
//! A registry document is JSON with two top-level keys, `services` and
//! `constraints`. Every descriptor may additionally carry a `sim_model` block
//! holding the ground-truth latency model the simulator uses for that service;
//! agents never read it.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simenv::GroundTruthModel;

/// Metrics that are measured or derived by the environment rather than set by
/// an agent. SLOs may target these in addition to elasticity parameters.
pub const DERIVED_METRICS: [&str; 4] = ["completion", "throughput", "tp_max", "rps"];

/// Tolerance used when deciding whether a float is "on" a quantization grid.
const GRID_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistryError {
    #[error("malformed registry document: {0}")]
    Malformed(String),
    #[error("duplicate service (host `{host}`, container `{container}`)")]
    DuplicateService { host: String, container: String },
    #[error("service {service}: {reason}")]
    InvalidService { service: String, reason: String },
    #[error("service {service}: parameter `{param}` is invalid: {reason}")]
    InvalidParameter {
        service: String,
        param: String,
        reason: String,
    },
    #[error("service {service}: SLO references unknown variable `{variable}`")]
    UnknownSloVariable { service: String, variable: String },
    #[error("parameter `{param}` has no legal value in [{min}, {max}] after quantization")]
    EmptyRange { param: String, min: f64, max: f64 },
    #[error("capacity {capacity} of `{resource}` is below the sum of minimum bounds {required}")]
    Capacity {
        resource: String,
        capacity: f64,
        required: f64,
    },
    #[error("cannot clip non-finite value {value} for parameter `{param}`")]
    NonFinite { param: String, value: f64 },
    #[error("i/o error: {0}")]
    Io(String),
}

/// Addresses one service container on a device.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ServiceId {
    pub host: String,
    pub service_type: String,
    pub container_name: String,
}

impl ServiceId {
    pub fn new(host: &str, service_type: &str, container_name: &str) -> Self {
        Self {
            host: host.to_string(),
            service_type: service_type.to_string(),
            container_name: container_name.to_string(),
        }
    }
}

impl fmt::Display for ServiceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.host, self.service_type, self.container_name)
    }
}

/// Legal-value rule for a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantization {
    Continuous,
    Integer,
    MultipleOf(f64),
}

impl Quantization {
    fn unit(&self) -> Option<f64> {
        match self {
            Quantization::Continuous => None,
            Quantization::Integer => Some(1.0),
            Quantization::MultipleOf(k) => Some(*k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticityParameter {
    pub name: String,
    pub endpoint: String,
    pub min: f64,
    pub max: f64,
    pub step: Quantization,
    #[serde(default)]
    pub unit: String,
}

impl ElasticityParameter {
    pub fn continuous(name: &str, min: f64, max: f64) -> Self {
        Self {
            name: name.to_string(),
            endpoint: format!("/{name}"),
            min,
            max,
            step: Quantization::Continuous,
            unit: String::new(),
        }
    }

    pub fn with_step(mut self, step: Quantization) -> Self {
        self.step = step;
        self
    }

    /// Smallest and largest legal values, or `None` when quantization leaves
    /// nothing inside `[min, max]`.
    pub fn legal_range(&self) -> Option<(f64, f64)> {
        match self.step.unit() {
            None => Some((self.min, self.max)),
            Some(k) => {
                let lo = (self.min / k - GRID_EPS).ceil() * k;
                let hi = (self.max / k + GRID_EPS).floor() * k;
                (lo <= hi).then_some((lo, hi))
            }
        }
    }

    fn validate(&self, service: &str) -> Result<(), RegistryError> {
        let invalid = |reason: String| RegistryError::InvalidParameter {
            service: service.to_string(),
            param: self.name.clone(),
            reason,
        };
        if self.name.is_empty() {
            return Err(invalid("empty name".into()));
        }
        if !self.min.is_finite() || !self.max.is_finite() || self.min >= self.max {
            return Err(invalid(format!("bounds [{}, {}] must satisfy min < max", self.min, self.max)));
        }
        if let Quantization::MultipleOf(k) = self.step {
            if !(k.is_finite() && k > 0.0) {
                return Err(invalid(format!("quantization unit {k} must be positive")));
            }
        }
        if self.legal_range().is_none() {
            return Err(RegistryError::EmptyRange {
                param: self.name.clone(),
                min: self.min,
                max: self.max,
            });
        }
        Ok(())
    }

    /// Maps `value` to the nearest legal assignment. Values outside the bounds
    /// land on the closest bound; ties between two grid points go to the
    /// larger one.
    pub fn clip(&self, value: f64) -> Result<f64, RegistryError> {
        if !value.is_finite() {
            return Err(RegistryError::NonFinite {
                param: self.name.clone(),
                value,
            });
        }
        let (lo, hi) = self.legal_range().ok_or(RegistryError::EmptyRange {
            param: self.name.clone(),
            min: self.min,
            max: self.max,
        })?;
        let clamped = value.clamp(lo, hi);
        Ok(match self.step.unit() {
            None => clamped,
            Some(k) => {
                let q = clamped / k;
                let floor = (q + GRID_EPS).floor();
                let steps = if q - floor >= 0.5 - GRID_EPS { floor + 1.0 } else { floor };
                (steps * k).clamp(lo, hi)
            }
        })
    }

    pub fn is_legal(&self, value: f64) -> bool {
        matches!(self.clip(value), Ok(c) if (c - value).abs() <= GRID_EPS * value.abs().max(1.0))
    }

    pub fn is_quantized(&self) -> bool {
        self.step.unit().is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SloDefinition {
    pub variable: String,
    pub target: f64,
    pub weight: f64,
}

impl SloDefinition {
    pub fn new(variable: &str, target: f64, weight: f64) -> Self {
        Self {
            variable: variable.to_string(),
            target,
            weight,
        }
    }
}

fn default_target() -> String {
    "tp_max".to_string()
}

/// Expert-supplied relation: which parameters explain the service's maximum
/// throughput.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralRelation {
    pub features: Vec<String>,
    #[serde(default = "default_target")]
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree_override: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceDescriptor {
    pub id: ServiceId,
    pub params: Vec<ElasticityParameter>,
    pub slos: Vec<SloDefinition>,
    pub relation: StructuralRelation,
    #[serde(rename = "defaults", alias = "default_assignment")]
    pub default_assignment: BTreeMap<String, f64>,
    pub default_rps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_model: Option<GroundTruthModel>,
}

impl ServiceDescriptor {
    pub fn param(&self, name: &str) -> Option<&ElasticityParameter> {
        self.params.iter().find(|p| p.name == name)
    }

    fn validate_and_clip(&mut self) -> Result<(), RegistryError> {
        let sid = self.id.to_string();
        let invalid = |reason: String| RegistryError::InvalidService {
            service: sid.clone(),
            reason,
        };
        if self.id.host.is_empty() || self.id.service_type.is_empty() || self.id.container_name.is_empty() {
            return Err(invalid("host, service_type and container_name must be non-empty".into()));
        }
        if self.params.is_empty() {
            return Err(invalid("no elasticity parameters".into()));
        }
        let mut names = HashSet::new();
        for p in &self.params {
            p.validate(&sid)?;
            if !names.insert(p.name.as_str()) {
                return Err(invalid(format!("parameter `{}` declared twice", p.name)));
            }
        }
        if self.slos.is_empty() {
            return Err(invalid("no SLOs".into()));
        }
        for slo in &self.slos {
            if !names.contains(slo.variable.as_str()) && !DERIVED_METRICS.contains(&slo.variable.as_str()) {
                return Err(RegistryError::UnknownSloVariable {
                    service: sid.clone(),
                    variable: slo.variable.clone(),
                });
            }
            if !slo.target.is_finite() || slo.target <= 0.0 {
                return Err(invalid(format!("SLO `{}` target must be finite and positive", slo.variable)));
            }
            if !(slo.weight > 0.0 && slo.weight <= 1.0) {
                return Err(invalid(format!("SLO `{}` weight must lie in (0, 1]", slo.variable)));
            }
        }
        if self.relation.features.is_empty() {
            return Err(invalid("structural relation has no features".into()));
        }
        for f in &self.relation.features {
            if !names.contains(f.as_str()) {
                return Err(invalid(format!("relation feature `{f}` is not a parameter")));
            }
        }
        if self.relation.target != "tp_max" {
            return Err(invalid(format!("unsupported relation target `{}`", self.relation.target)));
        }
        if let Some(d) = self.relation.degree_override {
            if !(1..=6).contains(&d) {
                return Err(invalid(format!("degree override {d} outside [1, 6]")));
            }
        }
        if !(self.default_rps.is_finite() && self.default_rps >= 0.0) {
            return Err(invalid("default_rps must be finite and non-negative".into()));
        }
        for name in self.default_assignment.keys() {
            if !names.contains(name.as_str()) {
                return Err(invalid(format!("default for unknown parameter `{name}`")));
            }
        }
        for p in &self.params {
            let v = *self
                .default_assignment
                .get(&p.name)
                .ok_or_else(|| invalid(format!("missing default for `{}`", p.name)))?;
            let clipped = p.clip(v)?;
            self.default_assignment.insert(p.name.clone(), clipped);
        }
        if let Some(model) = &self.sim_model {
            model.validate().map_err(|e| invalid(e.to_string()))?;
        }
        Ok(())
    }
}

fn default_resource() -> String {
    "cores".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalConstraints {
    #[serde(rename = "resource", alias = "resource_name", default = "default_resource")]
    pub resource_name: String,
    pub capacity: f64,
}

impl GlobalConstraints {
    pub fn cores(capacity: f64) -> Self {
        Self {
            resource_name: default_resource(),
            capacity,
        }
    }

    pub fn min_demand(&self, services: &[ServiceDescriptor]) -> f64 {
        services
            .iter()
            .filter_map(|s| s.param(&self.resource_name))
            .map(|p| p.legal_range().map_or(p.min, |(lo, _)| lo))
            .sum()
    }

    pub fn check(&self, services: &[ServiceDescriptor]) -> Result<(), RegistryError> {
        if !(self.capacity.is_finite() && self.capacity > 0.0) {
            return Err(RegistryError::Malformed(format!(
                "capacity {} must be finite and positive",
                self.capacity
            )));
        }
        let required = self.min_demand(services);
        if required > self.capacity + GRID_EPS {
            return Err(RegistryError::Capacity {
                resource: self.resource_name.clone(),
                capacity: self.capacity,
                required,
            });
        }
        Ok(())
    }
}

/// A validated set of services sharing one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub services: Vec<ServiceDescriptor>,
    pub constraints: GlobalConstraints,
}

impl Registry {
    pub fn new(mut services: Vec<ServiceDescriptor>, constraints: GlobalConstraints) -> Result<Self, RegistryError> {
        if services.is_empty() {
            return Err(RegistryError::Malformed("no services".into()));
        }
        let mut seen = HashSet::new();
        for s in &mut services {
            if !seen.insert((s.id.host.clone(), s.id.container_name.clone())) {
                return Err(RegistryError::DuplicateService {
                    host: s.id.host.clone(),
                    container: s.id.container_name.clone(),
                });
            }
            s.validate_and_clip()?;
        }
        constraints.check(&services)?;
        Ok(Self { services, constraints })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, RegistryError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| RegistryError::Io(format!("{}: {e}", path.as_ref().display())))?;
        load_registry(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }

    pub fn service(&self, id: &ServiceId) -> Option<&ServiceDescriptor> {
        self.services.iter().find(|s| &s.id == id)
    }

    pub fn ids(&self) -> Vec<ServiceId> {
        self.services.iter().map(|s| s.id.clone()).collect()
    }

    /// Parameter names in order of first appearance, resource parameter
    /// first. `dims = k` restricts an agent to the first `k` of these.
    pub fn parameter_families(&self) -> Vec<String> {
        let mut out = vec![self.constraints.resource_name.clone()];
        for s in &self.services {
            for p in &s.params {
                if !out.contains(&p.name) {
                    out.push(p.name.clone());
                }
            }
        }
        out
    }

    /// Total number of elasticity parameters across services.
    pub fn parameter_count(&self) -> usize {
        self.services.iter().map(|s| s.params.len()).sum()
    }

    /// `copies` instances of every service with fresh container names and the
    /// given capacity. Instances of one type share their `service_type`.
    pub fn replicated(&self, copies: usize, capacity: f64) -> Result<Self, RegistryError> {
        if copies == 0 {
            return Err(RegistryError::Malformed("replication count must be positive".into()));
        }
        let mut services = Vec::with_capacity(self.services.len() * copies);
        for i in 0..copies {
            for s in &self.services {
                let mut copy = s.clone();
                if i > 0 {
                    copy.id.container_name = format!("{}-{}", s.id.container_name, i + 1);
                }
                services.push(copy);
            }
        }
        Registry::new(
            services,
            GlobalConstraints {
                resource_name: self.constraints.resource_name.clone(),
                capacity,
            },
        )
    }
}

/// Parses and validates a registry document; default assignments come back
/// clipped to legality.
pub fn load_registry(document: &str) -> Result<Registry, RegistryError> {
    if document.trim().is_empty() {
        return Err(RegistryError::Malformed("empty document".into()));
    }
    let raw: Registry = serde_json::from_str(document).map_err(|e| RegistryError::Malformed(e.to_string()))?;
    Registry::new(raw.services, raw.constraints)
}

/// Free-function form of [`ElasticityParameter::clip`].
pub fn clip_assignment(param: &ElasticityParameter, value: f64) -> Result<f64, RegistryError> {
    param.clip(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cores() -> ElasticityParameter {
        ElasticityParameter::continuous("cores", 1.0, 8.0)
    }

    fn cv_quality() -> ElasticityParameter {
        ElasticityParameter::continuous("data_quality", 128.0, 320.0).with_step(Quantization::MultipleOf(32.0))
    }

    fn model_size() -> ElasticityParameter {
        ElasticityParameter::continuous("model_size", 1.0, 4.0).with_step(Quantization::Integer)
    }

    fn service_json(container: &str, cores_min: f64) -> String {
        format!(
            r#"{{
              "id": {{"host": "edge", "service_type": "obj-detector", "container_name": "{container}"}},
              "params": [{{"name": "cores", "endpoint": "/resources", "min": {cores_min}, "max": 8.0,
                          "step": "continuous", "unit": "cores"}}],
              "slos": [{{"variable": "completion", "target": 1.0, "weight": 1.0}}],
              "relation": {{"features": ["cores"]}},
              "defaults": {{"cores": 2.0}},
              "default_rps": 10
            }}"#
        )
    }

    #[test]
    fn table_shaped_entry_loads() {
        let doc = format!(
            r#"{{"services": [{}], "constraints": {{"resource": "cores", "capacity": 8.0}}}}"#,
            service_json("c1", 1.0)
        );
        let reg = load_registry(&doc).unwrap();
        let p = &reg.services[0].params[0];
        assert_eq!(p.name, "cores");
        assert_eq!((p.min, p.max), (1.0, 8.0));
        assert_eq!(p.step, Quantization::Continuous);
        assert_eq!(reg.services[0].relation.target, "tp_max");
    }

    #[test]
    fn empty_document_is_malformed() {
        assert!(matches!(load_registry(""), Err(RegistryError::Malformed(_))));
        assert!(matches!(load_registry("   \n"), Err(RegistryError::Malformed(_))));
        assert!(matches!(load_registry("{}"), Err(RegistryError::Malformed(_))));
    }

    #[test]
    fn capacity_below_minimums_is_rejected() {
        let doc = format!(
            r#"{{"services": [{}, {}, {}], "constraints": {{"resource": "cores", "capacity": 2.0}}}}"#,
            service_json("a", 1.0),
            service_json("b", 1.0),
            service_json("c", 1.0)
        );
        assert!(matches!(load_registry(&doc), Err(RegistryError::Capacity { .. })));
    }

    #[test]
    fn unknown_slo_variable_is_rejected() {
        let doc = format!(
            r#"{{"services": [{}], "constraints": {{"capacity": 8.0}}}}"#,
            service_json("a", 1.0).replace(r#""variable": "completion""#, r#""variable": "latency""#)
        );
        assert!(matches!(load_registry(&doc), Err(RegistryError::UnknownSloVariable { .. })));
    }

    #[test]
    fn empty_quantized_range_is_rejected() {
        let doc = format!(
            r#"{{"services": [{}], "constraints": {{"capacity": 8.0}}}}"#,
            service_json("a", 1.0).replace(
                r#""step": "continuous""#,
                r#""step": {"multiple_of": 10.0}"#
            )
        );
        assert!(matches!(load_registry(&doc), Err(RegistryError::EmptyRange { .. })));
    }

    #[test]
    fn duplicate_container_is_rejected() {
        let doc = format!(
            r#"{{"services": [{}, {}], "constraints": {{"capacity": 8.0}}}}"#,
            service_json("a", 1.0),
            service_json("a", 1.0)
        );
        assert!(matches!(load_registry(&doc), Err(RegistryError::DuplicateService { .. })));
    }

    #[test]
    fn defaults_are_clipped_on_load() {
        let doc = format!(
            r#"{{"services": [{}], "constraints": {{"capacity": 8.0}}}}"#,
            service_json("a", 1.0).replace(r#""cores": 2.0"#, r#""cores": 12.0"#)
        );
        let reg = load_registry(&doc).unwrap();
        assert_eq!(reg.services[0].default_assignment["cores"], 8.0);
    }

    #[test]
    fn clip_examples() {
        assert_eq!(cores().clip(9.0).unwrap(), 8.0);
        assert_eq!(cv_quality().clip(300.0).unwrap(), 288.0);
        assert_eq!(model_size().clip(2.6).unwrap(), 3.0);
        let quality = ElasticityParameter::continuous("data_quality", 100.0, 1000.0);
        assert_eq!(quality.clip(550.0).unwrap(), 550.0);
    }

    #[test]
    fn clip_ties_go_toward_max() {
        assert_eq!(model_size().clip(2.5).unwrap(), 3.0);
        assert_eq!(cv_quality().clip(272.0).unwrap(), 288.0);
        assert_eq!(cv_quality().clip(100.0).unwrap(), 128.0);
    }

    #[test]
    fn clip_rejects_non_finite() {
        assert!(cores().clip(f64::NAN).is_err());
        assert!(cores().clip(f64::INFINITY).is_err());
    }

    #[test]
    fn clip_snaps_to_inner_grid_when_bounds_are_off_grid() {
        let p = ElasticityParameter::continuous("q", 100.0, 330.0).with_step(Quantization::MultipleOf(32.0));
        assert_eq!(p.legal_range(), Some((128.0, 320.0)));
        assert_eq!(p.clip(0.0).unwrap(), 128.0);
        assert_eq!(p.clip(1e6).unwrap(), 320.0);
    }

    #[test]
    fn replication_renames_containers() {
        let doc = format!(
            r#"{{"services": [{}], "constraints": {{"capacity": 8.0}}}}"#,
            service_json("a", 1.0)
        );
        let reg = load_registry(&doc).unwrap().replicated(3, 24.0).unwrap();
        let names: Vec<_> = reg.services.iter().map(|s| s.id.container_name.as_str()).collect();
        assert_eq!(names, ["a", "a-2", "a-3"]);
        assert_eq!(reg.constraints.capacity, 24.0);
    }

    fn any_param() -> impl Strategy<Value = ElasticityParameter> {
        (-50.0f64..50.0, 0.5f64..100.0, 0usize..3, 0.1f64..8.0).prop_filter_map(
            "non-empty grid",
            |(min, width, kind, k)| {
                let step = match kind {
                    0 => Quantization::Continuous,
                    1 => Quantization::Integer,
                    _ => Quantization::MultipleOf(k),
                };
                let p = ElasticityParameter::continuous("p", min, min + width).with_step(step);
                p.legal_range().map(|_| p)
            },
        )
    }

    proptest! {
        #[test]
        fn clip_is_idempotent_in_range_and_on_grid(p in any_param(), v in -1e4f64..1e4) {
            let c = p.clip(v).unwrap();
            prop_assert!(c >= p.min - 1e-9 && c <= p.max + 1e-9);
            prop_assert_eq!(p.clip(c).unwrap(), c);
            if let Some(k) = p.step.unit() {
                let r = (c / k).round() * k;
                prop_assert!((c - r).abs() <= 1e-9 * c.abs().max(1.0));
            }
        }

        #[test]
        fn clip_picks_a_nearest_legal_value(p in any_param(), v in -200.0f64..200.0) {
            let c = p.clip(v).unwrap();
            if let (Some(k), Some((lo, hi))) = (p.step.unit(), p.legal_range()) {
                let n = ((hi - lo) / k).round() as i64;
                for i in 0..=n {
                    let g = lo + i as f64 * k;
                    prop_assert!((c - v).abs() <= (g - v).abs() + 1e-9);
                }
            }
        }
    }
}
