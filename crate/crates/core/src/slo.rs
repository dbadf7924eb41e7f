//! SLO fulfillment: per objective, per service (weighted) and across services.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::{ServiceId, SloDefinition};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SloError {
    #[error("SLO `{0}` has a non-positive target")]
    NonPositiveTarget(String),
    #[error("metric `{0}` missing from row")]
    MissingVariable(String),
    #[error("no SLOs given")]
    NoSlos,
    #[error("no services to aggregate")]
    Empty,
}

/// One observation of a service: measured metrics plus the live value of
/// every elasticity parameter, keyed by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub service: ServiceId,
    pub tick: u64,
    pub values: BTreeMap<String, f64>,
}

impl MetricsRow {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn throughput(&self) -> f64 {
        self.get("throughput").unwrap_or(0.0)
    }

    pub fn rps(&self) -> f64 {
        self.get("rps").unwrap_or(0.0)
    }

    pub fn completion(&self) -> f64 {
        self.get("completion").unwrap_or(0.0)
    }

    pub fn tp_max(&self) -> f64 {
        self.get("tp_max").unwrap_or(0.0)
    }
}

/// `metric / target`, saturating at 1.
pub fn fulfillment(slo: &SloDefinition, metric: f64) -> Result<f64, SloError> {
    if !(slo.target > 0.0) {
        return Err(SloError::NonPositiveTarget(slo.variable.clone()));
    }
    let m = metric.max(0.0);
    Ok(if m < slo.target { m / slo.target } else { 1.0 })
}

/// `throughput / rps` clamped to `[0, 1]`; no demand counts as complete.
pub fn completion(throughput: f64, rps: f64) -> f64 {
    if rps <= 0.0 {
        return 1.0;
    }
    (throughput.max(0.0) / rps).min(1.0)
}

pub fn service_fulfillment(slos: &[SloDefinition], row: &MetricsRow) -> Result<f64, SloError> {
    weighted_fulfillment(slos, |name| row.get(name))
}

/// Weighted mean of per-SLO fulfillment with metrics supplied by `lookup`.
pub fn weighted_fulfillment(
    slos: &[SloDefinition],
    lookup: impl Fn(&str) -> Option<f64>,
) -> Result<f64, SloError> {
    if slos.is_empty() {
        return Err(SloError::NoSlos);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for slo in slos {
        let m = lookup(&slo.variable).ok_or_else(|| SloError::MissingVariable(slo.variable.clone()))?;
        let phi = fulfillment(slo, m)?;
        if slos.len() == 1 {
            // the weight cancels; skip the round trip through it
            return Ok(phi);
        }
        num += phi * slo.weight;
        den += slo.weight;
    }
    Ok(num / den)
}

pub fn global_fulfillment(per_service: &[f64]) -> Result<f64, SloError> {
    if per_service.is_empty() {
        return Err(SloError::Empty);
    }
    Ok(per_service.iter().sum::<f64>() / per_service.len() as f64)
}

/// True when any SLO of the service is below full fulfillment.
pub fn any_violated(slos: &[SloDefinition], row: &MetricsRow) -> Result<bool, SloError> {
    for slo in slos {
        let m = row.get(&slo.variable).ok_or_else(|| SloError::MissingVariable(slo.variable.clone()))?;
        if fulfillment(slo, m)? < 1.0 {
            return Ok(true);
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(values: &[(&str, f64)]) -> MetricsRow {
        MetricsRow {
            service: ServiceId::new("edge", "qr", "qr-1"),
            tick: 0,
            values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    #[test]
    fn fulfillment_examples() {
        let tp = SloDefinition::new("throughput", 30.0, 1.0);
        assert_eq!(fulfillment(&tp, 40.0).unwrap(), 1.0);
        assert_eq!(fulfillment(&tp, 15.0).unwrap(), 0.5);
        assert_eq!(fulfillment(&SloDefinition::new("q", 800.0, 0.5), 0.0).unwrap(), 0.0);
        assert!(fulfillment(&SloDefinition::new("q", 0.0, 0.5), 1.0).is_err());
    }

    #[test]
    fn completion_examples() {
        assert_eq!(completion(40.0, 80.0), 0.5);
        assert_eq!(completion(100.0, 80.0), 1.0);
        assert_eq!(completion(0.0, 0.0), 1.0);
    }

    #[test]
    fn service_fulfillment_examples() {
        let slos = [
            SloDefinition::new("data_quality", 800.0, 0.5),
            SloDefinition::new("completion", 1.0, 1.0),
        ];
        let r = row(&[("data_quality", 550.0), ("completion", 0.5)]);
        assert_eq!(service_fulfillment(&slos, &r).unwrap(), 0.5625);
        let r = row(&[("data_quality", 900.0), ("completion", 1.0)]);
        assert_eq!(service_fulfillment(&slos, &r).unwrap(), 1.0);
        let single = [SloDefinition::new("completion", 1.0, 0.3)];
        let r = row(&[("completion", 0.7)]);
        assert_eq!(service_fulfillment(&single, &r).unwrap(), 0.7);
        assert!(matches!(
            service_fulfillment(&slos, &row(&[("completion", 1.0)])),
            Err(SloError::MissingVariable(_))
        ));
        assert_eq!(service_fulfillment(&[], &r), Err(SloError::NoSlos));
    }

    #[test]
    fn global_examples() {
        let g = global_fulfillment(&[1.0, 0.5625, 0.9]).unwrap();
        assert!((g - 0.820_833_333_333_333_3).abs() < 1e-15);
        assert_eq!(global_fulfillment(&[0.37]).unwrap(), 0.37);
        assert_eq!(global_fulfillment(&[0.0, 1.0]).unwrap(), 0.5);
        assert_eq!(global_fulfillment(&[]), Err(SloError::Empty));
    }

    proptest! {
        #[test]
        fn fulfillment_monotone_and_saturating(t in 0.01f64..1e4, a in 0.0f64..2e4, b in 0.0f64..2e4) {
            let slo = SloDefinition::new("m", t, 1.0);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (flo, fhi) = (fulfillment(&slo, lo).unwrap(), fulfillment(&slo, hi).unwrap());
            prop_assert!(flo <= fhi);
            prop_assert!((0.0..=1.0).contains(&flo) && (0.0..=1.0).contains(&fhi));
            if hi >= t { prop_assert_eq!(fhi, 1.0); }
            let looser = SloDefinition::new("m", t * 1.5, 1.0);
            prop_assert!(fulfillment(&looser, a).unwrap() <= fulfillment(&slo, a).unwrap());
        }

        #[test]
        fn weights_scale_invariant(w1 in 0.01f64..1.0, w2 in 0.01f64..1.0, s in 0.05f64..1.0,
                                   q in 0.0f64..1000.0, c in 0.0f64..1.0) {
            let mk = |f: f64| [SloDefinition::new("q", 800.0, w1 * f), SloDefinition::new("completion", 1.0, w2 * f)];
            let r = row(&[("q", q), ("completion", c)]);
            let a = service_fulfillment(&mk(1.0), &r).unwrap();
            let b = service_fulfillment(&mk(s), &r).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-15).contains(&a));
        }
    }
}
