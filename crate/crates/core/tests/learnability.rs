//! A table harvested from the simulator, fitted at a high enough degree,
//! predicts the true maximum throughput on held-out configurations. The
//! check is run on sub-ranges of the quality parameters: over the full
//! registry ranges `quality^-gamma` spans two orders of magnitude and no
//! low-degree polynomial stays within 5% everywhere.

use std::collections::BTreeMap;

use edgescale::planner::{self, Assignment};
use edgescale::registry::Registry;
use edgescale::regression::{self, ObservationTable};
use edgescale::simenv::{self, Environment, SimConfig};

fn restricted(bounds: &[(&str, &str, f64, f64)]) -> Registry {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/reference_registry.json");
    let mut reg = Registry::from_path(path).unwrap();
    for s in &mut reg.services {
        for &(ty, name, lo, hi) in bounds {
            if s.id.service_type != ty {
                continue;
            }
            if let Some(p) = s.params.iter_mut().find(|p| p.name == name) {
                p.min = lo;
                p.max = hi;
            }
            let d = s.default_assignment.get_mut(name).unwrap();
            *d = d.clamp(lo, hi);
        }
    }
    reg
}

/// Applies a fresh random assignment every 10 s and records the 5 s
/// observation at the end of each cycle.
fn harvest(reg: &Registry, cycles: u64, seed: u64) -> BTreeMap<String, ObservationTable> {
    let mut env = Environment::with_default_rps(reg.clone(), cycles * 10, SimConfig::default()).unwrap();
    let mut tables: BTreeMap<String, ObservationTable> = reg
        .services
        .iter()
        .map(|s| (s.id.service_type.clone(), ObservationTable::new(s.id.clone(), s.relation.features.clone())))
        .collect();
    for c in 0..cycles {
        let a = planner::rand_param(&reg.services, &reg.constraints, seed + c).unwrap();
        env.apply_assignment(&a).unwrap();
        for _ in 0..10 {
            env.step().unwrap();
        }
        for s in &reg.services {
            let row = env.observe(&s.id, 5).unwrap();
            let x: Vec<f64> = s.relation.features.iter().map(|f| row.get(f).unwrap()).collect();
            tables.get_mut(&s.id.service_type).unwrap().push(x, row.tp_max()).unwrap();
        }
    }
    tables
}

fn worst_relative_error(reg: &Registry, tables: &BTreeMap<String, ObservationTable>, degree: usize) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for s in &reg.services {
        let model = regression::fit(&tables[&s.id.service_type], degree).unwrap();
        let gt = s.sim_model.as_ref().unwrap();
        let mut worst: f64 = 0.0;
        for seed in 0..200 {
            let a: Assignment = planner::rand_param(&reg.services, &reg.constraints, 10_000 + seed).unwrap();
            let mut cfg: BTreeMap<String, f64> = a.service(&s.id).unwrap().clone();
            for p in &s.params {
                let v = cfg.get_mut(&p.name).unwrap();
                *v = p.clip(*v).unwrap();
            }
            let truth = simenv::tp_max_true(gt, &cfg).unwrap();
            let x: Vec<f64> = s.relation.features.iter().map(|f| cfg[f]).collect();
            worst = worst.max((model.predict(&x).unwrap() - truth).abs() / truth);
        }
        out.insert(s.id.service_type.clone(), worst);
    }
    out
}

#[test]
fn harvested_tables_predict_held_out_throughput_within_five_percent() {
    let reg = restricted(&[
        ("qr", "data_quality", 600.0, 1000.0),
        ("cv", "data_quality", 256.0, 320.0),
        ("pc", "data_quality", 30.0, 60.0),
    ]);
    let tables = harvest(&reg, 300, 3);
    let worst = worst_relative_error(&reg, &tables, 5);
    for (ty, e) in &worst {
        assert!(*e <= 0.05, "{ty}: worst relative error {e:.4} ({worst:?})");
    }
}

#[test]
fn full_range_quadratic_misses_the_quality_curve() {
    let reg = restricted(&[]);
    let tables = harvest(&reg, 150, 3);
    let worst = worst_relative_error(&reg, &tables, 2);
    assert!(worst["qr"] > 0.05, "{worst:?}");
}
