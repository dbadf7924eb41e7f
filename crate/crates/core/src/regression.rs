//! Polynomial regression of a service's maximum throughput on its
//! elasticity parameters.
//!
//! Features are standardized per column before expansion and the fit is
//! solved with an SVD, so rank-deficient tables (common while an agent is
//! still exploring) yield the minimum-norm solution. The fitted weights are
//! converted back to the raw monomial basis, which is what
//! [`RegressionModel::weights`] exposes.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::ServiceId;

pub const DEFAULT_DEGREE: usize = 2;
pub const MAX_DEGREE: usize = 6;

#[derive(Debug, Error)]
pub enum RegressionError {
    #[error("polynomial degree must be at least 1 (got {0})")]
    InvalidDegree(usize),
    #[error("observation table is empty")]
    EmptyTable,
    #[error("expected {expected} features, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("non-finite value in observation")]
    NonFinite,
    #[error("{rows} rows are not enough: the train split needs {needed}")]
    InsufficientRows { rows: usize, needed: usize },
    #[error("least-squares solve failed: {0}")]
    Solve(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Exponent vectors of every monomial of total degree `<= degree` over
/// `arity` variables: the constant first, then by total degree, and
/// lexicographically by variable index within one degree. For `(x1, x2)` and
/// degree 2 this is `1, x1, x2, x1^2, x1*x2, x2^2`.
pub fn monomial_exponents(arity: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0; arity]];
    if arity == 0 {
        return out;
    }
    for d in 1..=degree {
        // index tuples i1 <= i2 <= ... <= id, in lexicographic order
        let mut idx = vec![0usize; d];
        loop {
            let mut e = vec![0u32; arity];
            for &i in &idx {
                e[i] += 1;
            }
            out.push(e);
            let Some(pos) = (0..d).rev().find(|&p| idx[p] + 1 < arity) else {
                break;
            };
            let next = idx[pos] + 1;
            for slot in idx.iter_mut().skip(pos) {
                *slot = next;
            }
        }
    }
    out
}

/// Number of monomials of total degree `<= degree` in `arity` variables,
/// i.e. `C(arity + degree, degree)`.
pub fn monomial_count(arity: usize, degree: usize) -> usize {
    (1..=degree).fold(1usize, |acc, k| acc * (arity + k) / k)
}

fn expand(x: &[f64], exps: &[Vec<u32>]) -> Vec<f64> {
    exps.iter()
        .map(|e| e.iter().zip(x).map(|(&p, &v)| v.powi(p as i32)).product())
        .collect()
}

pub fn poly_features(x: &[f64], degree: usize) -> Result<Vec<f64>, RegressionError> {
    if degree < 1 {
        return Err(RegressionError::InvalidDegree(degree));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(RegressionError::NonFinite);
    }
    Ok(expand(x, &monomial_exponents(x.len(), degree)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub features: Vec<f64>,
    pub target: f64,
}

/// Training data for one service: parameter values in relation order and the
/// measured maximum throughput.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationTable {
    pub service: ServiceId,
    pub feature_names: Vec<String>,
    pub rows: Vec<Observation>,
}

impl ObservationTable {
    pub fn new(service: ServiceId, feature_names: Vec<String>) -> Self {
        Self {
            service,
            feature_names,
            rows: Vec::new(),
        }
    }

    pub fn arity(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, features: Vec<f64>, target: f64) -> Result<(), RegressionError> {
        if features.len() != self.arity() {
            return Err(RegressionError::ArityMismatch {
                expected: self.arity(),
                got: features.len(),
            });
        }
        if !target.is_finite() || features.iter().any(|v| !v.is_finite()) {
            return Err(RegressionError::NonFinite);
        }
        self.rows.push(Observation { features, target });
        Ok(())
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            service: self.service.clone(),
            feature_names: self.feature_names.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Header: feature names, then `tp_max`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), RegressionError> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = self.feature_names.clone();
        header.push("tp_max".to_string());
        wr.write_record(&header)?;
        for r in &self.rows {
            let rec: Vec<String> = r
                .features
                .iter()
                .chain(std::iter::once(&r.target))
                .map(|v| v.to_string())
                .collect();
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(service: ServiceId, r: R) -> Result<Self, RegressionError> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        let Some((last, names)) = header.split_last() else {
            return Err(RegressionError::EmptyTable);
        };
        if last != "tp_max" {
            return Err(RegressionError::Solve(format!("last csv column must be tp_max, got `{last}`")));
        }
        let mut table = Self::new(service, names.to_vec());
        for rec in rd.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| RegressionError::NonFinite))
                .collect::<Result<_, _>>()?;
            let (y, x) = vals.split_last().ok_or(RegressionError::NonFinite)?;
            table.push(x.to_vec(), *y)?;
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Standardization {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Weights over monomials of the standardized features.
    weights: Vec<f64>,
}

/// Fitted polynomial for one service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    pub service: ServiceId,
    pub degree: usize,
    /// Degree asked for; larger than `degree` when the table was too small.
    pub requested_degree: usize,
    pub feature_names: Vec<String>,
    /// Coefficients over [`poly_features`] of the raw inputs.
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    standardized: Option<Standardization>,
}

impl RegressionModel {
    /// Model with explicit raw-basis weights.
    pub fn from_weights(
        service: ServiceId,
        feature_names: Vec<String>,
        degree: usize,
        weights: Vec<f64>,
    ) -> Result<Self, RegressionError> {
        if degree < 1 {
            return Err(RegressionError::InvalidDegree(degree));
        }
        let expected = monomial_count(feature_names.len(), degree);
        if weights.len() != expected {
            return Err(RegressionError::ArityMismatch {
                expected,
                got: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(RegressionError::NonFinite);
        }
        Ok(Self {
            service,
            degree,
            requested_degree: degree,
            feature_names,
            weights,
            standardized: None,
        })
    }

    pub fn arity(&self) -> usize {
        self.feature_names.len()
    }

    pub fn was_reduced(&self) -> bool {
        self.degree < self.requested_degree
    }

    /// Polynomial value without the non-negativity clamp.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64, RegressionError> {
        if x.len() != self.arity() {
            return Err(RegressionError::ArityMismatch {
                expected: self.arity(),
                got: x.len(),
            });
        }
        let exps = monomial_exponents(self.arity(), self.degree);
        Ok(match &self.standardized {
            Some(s) => {
                let z: Vec<f64> = x.iter().zip(&s.mean).zip(&s.scale).map(|((v, m), sc)| (v - m) / sc).collect();
                dot(&s.weights, &expand(&z, &exps))
            }
            None => dot(&self.weights, &expand(x, &exps)),
        })
    }

    /// Predicted maximum throughput, never negative.
    pub fn predict(&self, x: &[f64]) -> Result<f64, RegressionError> {
        Ok(self.evaluate(x)?.max(0.0))
    }

    /// Evaluator with the monomial table built once, for hot loops.
    pub fn compiled(&self) -> CompiledModel {
        let exps = monomial_exponents(self.arity(), self.degree);
        match &self.standardized {
            Some(s) => CompiledModel {
                exps,
                weights: s.weights.clone(),
                mean: s.mean.clone(),
                scale: s.scale.clone(),
                degree: self.degree,
            },
            None => CompiledModel {
                exps,
                weights: self.weights.clone(),
                mean: vec![0.0; self.arity()],
                scale: vec![1.0; self.arity()],
                degree: self.degree,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompiledModel {
    exps: Vec<Vec<u32>>,
    weights: Vec<f64>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    degree: usize,
}

impl CompiledModel {
    pub fn arity(&self) -> usize {
        self.mean.len()
    }

    /// Same value as [`RegressionModel::evaluate`]; `x` must have the model's arity.
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        let d = self.degree + 1;
        let mut pow = vec![1.0; self.arity() * d];
        for i in 0..self.arity() {
            let z = (x[i] - self.mean[i]) / self.scale[i];
            for p in 1..d {
                pow[i * d + p] = pow[i * d + p - 1] * z;
            }
        }
        self.exps
            .iter()
            .zip(&self.weights)
            .map(|(e, w)| w * e.iter().enumerate().map(|(i, &p)| pow[i * d + p as usize]).product::<f64>())
            .sum()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.evaluate(x).max(0.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn binomial(n: u32, k: u32) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Rewrites weights over monomials of `(x - mean) / scale` as weights over
/// monomials of `x`.
fn destandardize(exps: &[Vec<u32>], weights: &[f64], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    let index: HashMap<&[u32], usize> = exps.iter().enumerate().map(|(i, e)| (e.as_slice(), i)).collect();
    let mut raw = vec![0.0; exps.len()];
    for (e, &w) in exps.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        // cartesian product over k_i in 0..=e_i
        let mut k = vec![0u32; e.len()];
        loop {
            let mut c = w;
            for i in 0..e.len() {
                c *= binomial(e[i], k[i]) * (-mean[i]).powi((e[i] - k[i]) as i32) / scale[i].powi(e[i] as i32);
            }
            raw[index[k.as_slice()]] += c;
            let Some(pos) = (0..e.len()).find(|&i| k[i] < e[i]) else {
                break;
            };
            k[pos] += 1;
            for slot in k.iter_mut().take(pos) {
                *slot = 0;
            }
        }
    }
    raw
}

/// Least-squares polynomial fit. When the table has fewer rows than the
/// requested basis has monomials, the degree is lowered to the largest one
/// the table supports; the reduction is visible via
/// [`RegressionModel::was_reduced`].
pub fn fit(table: &ObservationTable, degree: usize) -> Result<RegressionModel, RegressionError> {
    if degree < 1 {
        return Err(RegressionError::InvalidDegree(degree));
    }
    if table.is_empty() {
        return Err(RegressionError::EmptyTable);
    }
    let n = table.len();
    let arity = table.arity();
    let mut used = degree;
    while used > 1 && monomial_count(arity, used) > n {
        used -= 1;
    }

    let mut mean = vec![0.0; arity];
    for r in &table.rows {
        for (m, v) in mean.iter_mut().zip(&r.features) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut scale = vec![0.0; arity];
    for r in &table.rows {
        for ((s, v), m) in scale.iter_mut().zip(&r.features).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    for (s, m) in scale.iter_mut().zip(&mean) {
        let sd = (*s / n as f64).sqrt();
        *s = if sd > 1e-12 * m.abs().max(1.0) { sd } else { 1.0 };
    }

    let exps = monomial_exponents(arity, used);
    let m = exps.len();
    let mut design = DMatrix::<f64>::zeros(n, m);
    for (i, r) in table.rows.iter().enumerate() {
        let z: Vec<f64> = r.features.iter().zip(&mean).zip(&scale).map(|((v, mu), s)| (v - mu) / s).collect();
        for (j, f) in expand(&z, &exps).into_iter().enumerate() {
            design[(i, j)] = f;
        }
    }
    let y = DVector::from_iterator(n, table.rows.iter().map(|r| r.target));
    let svd = design.svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = smax * (n.max(m) as f64) * f64::EPSILON;
    let w = svd.solve(&y, eps).map_err(|e| RegressionError::Solve(e.to_string()))?;
    let std_weights: Vec<f64> = w.iter().copied().collect();
    if std_weights.iter().any(|v| !v.is_finite()) {
        return Err(RegressionError::NonFinite);
    }
    let weights = destandardize(&exps, &std_weights, &mean, &scale);
    Ok(RegressionModel {
        service: table.service.clone(),
        degree: used,
        requested_degree: degree,
        feature_names: table.feature_names.clone(),
        weights,
        standardized: Some(Standardization {
            mean,
            scale,
            weights: std_weights,
        }),
    })
}

/// Mean squared residual of the unclamped polynomial over `table`.
pub fn mse(model: &RegressionModel, table: &ObservationTable) -> Result<f64, RegressionError> {
    if table.is_empty() {
        return Err(RegressionError::EmptyTable);
    }
    let mut acc = 0.0;
    for r in &table.rows {
        acc += (r.target - model.evaluate(&r.features)?).powi(2);
    }
    Ok(acc / table.len() as f64)
}

/// Test-split size used by [`select_degree`].
pub fn test_rows(n: usize, split: f64) -> usize {
    ((split * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Shuffles the table with `seed`, holds out `split` of it, fits every
/// candidate on the rest and returns the degree with the smallest held-out
/// MSE. Near-equal errors resolve to the lower degree.
pub fn select_degree(
    table: &ObservationTable,
    candidates: &[usize],
    split: f64,
    seed: u64,
) -> Result<usize, RegressionError> {
    if table.is_empty() {
        return Err(RegressionError::EmptyTable);
    }
    let mut cands: Vec<usize> = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    if let Some(&d) = cands.iter().find(|&&d| d < 1) {
        return Err(RegressionError::InvalidDegree(d));
    }
    let Some(&max_deg) = cands.last() else {
        return Err(RegressionError::InvalidDegree(0));
    };
    let n = table.len();
    let n_test = test_rows(n, split);
    let needed = monomial_count(table.arity(), max_deg);
    if n < 2 || n - n_test < needed {
        return Err(RegressionError::InsufficientRows { rows: n, needed: needed + n_test });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = table.subset(&idx[..n_test]);
    let train = table.subset(&idx[n_test..]);

    let mut scores = Vec::with_capacity(cands.len());
    for &d in &cands {
        scores.push((d, mse(&fit(&train, d)?, &test)?));
    }
    let best = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let level = test.rows.iter().map(|r| r.target * r.target).sum::<f64>() / test.len() as f64;
    let tol = 1e-9 * best + 1e-12 * (1.0 + level);
    Ok(scores.iter().find(|s| s.1 <= best + tol).map(|s| s.0).unwrap_or(cands[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn sid() -> ServiceId {
        ServiceId::new("edge", "qr", "qr-1")
    }

    fn table_1d(points: &[(f64, f64)]) -> ObservationTable {
        let mut t = ObservationTable::new(sid(), vec!["x".into()]);
        for &(x, y) in points {
            t.push(vec![x], y).unwrap();
        }
        t
    }

    /// Normal-equations solve on raw (unscaled) monomials.
    fn normal_equations(table: &ObservationTable, degree: usize) -> Vec<f64> {
        let rows: Vec<Vec<f64>> = table.rows.iter().map(|r| poly_features(&r.features, degree).unwrap()).collect();
        let m = rows[0].len();
        let x = DMatrix::from_fn(rows.len(), m, |i, j| rows[i][j]);
        let y = DVector::from_iterator(rows.len(), table.rows.iter().map(|r| r.target));
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * y;
        xtx.lu().solve(&xty).unwrap().iter().copied().collect()
    }

    #[test]
    fn feature_examples() {
        assert_eq!(poly_features(&[2.0, 3.0], 2).unwrap(), vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
        assert_eq!(poly_features(&[5.0], 1).unwrap(), vec![1.0, 5.0]);
        assert_eq!(poly_features(&[2.0], 3).unwrap(), vec![1.0, 2.0, 4.0, 8.0]);
        assert!(matches!(poly_features(&[1.0], 0), Err(RegressionError::InvalidDegree(0))));
    }

    #[test]
    fn graded_lex_order_three_vars() {
        let e = monomial_exponents(3, 2);
        assert_eq!(
            e,
            vec![
                vec![0, 0, 0],
                vec![1, 0, 0],
                vec![0, 1, 0],
                vec![0, 0, 1],
                vec![2, 0, 0],
                vec![1, 1, 0],
                vec![1, 0, 1],
                vec![0, 2, 0],
                vec![0, 1, 1],
                vec![0, 0, 2],
            ]
        );
        for a in 1..4 {
            for d in 1..7 {
                assert_eq!(monomial_exponents(a, d).len(), monomial_count(a, d));
            }
        }
    }

    #[test]
    fn quadratic_recovery_and_extrapolation() {
        let pts: Vec<(f64, f64)> = (0..12).map(|i| {
            let x = i as f64 * 0.7 - 2.0;
            (x, 1.0 + 2.0 * x + 3.0 * x * x)
        }).collect();
        let t = table_1d(&pts);
        let m = fit(&t, 2).unwrap();
        let oracle = normal_equations(&t, 2);
        for (w, (o, e)) in m.weights.iter().zip(oracle.iter().zip([1.0, 2.0, 3.0])) {
            assert!((w - e).abs() < 1e-6, "{w} vs {e}");
            assert!((w - o).abs() < 1e-6);
        }
        assert!((m.predict(&[10.0]).unwrap() - 321.0).abs() < 1e-4);
    }

    #[test]
    fn constant_targets() {
        let t = table_1d(&[(1.0, 4.5), (2.0, 4.5), (5.0, 4.5), (7.0, 4.5)]);
        let m = fit(&t, 2).unwrap();
        assert!((m.weights[0] - 4.5).abs() < 1e-9);
        assert!(m.weights[1..].iter().all(|w| w.abs() < 1e-9));
    }

    #[test]
    fn square_system_interpolates() {
        let t = table_1d(&[(0.0, 1.0), (1.0, 3.0), (3.0, -2.0)]);
        let m = fit(&t, 2).unwrap();
        assert!(mse(&m, &t).unwrap() < 1e-20);
    }

    #[test]
    fn predict_examples() {
        let m = RegressionModel::from_weights(sid(), vec!["x".into()], 2, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.predict(&[2.0]).unwrap(), 17.0);
        let zero = RegressionModel::from_weights(sid(), vec!["a".into(), "b".into()], 2, vec![0.0; 6]).unwrap();
        assert_eq!(zero.predict(&[3.0, -4.0]).unwrap(), 0.0);
        let neg = RegressionModel::from_weights(sid(), vec!["x".into()], 1, vec![-5.0, 1.0]).unwrap();
        assert_eq!(neg.predict(&[1.0]).unwrap(), 0.0);
        assert_eq!(neg.evaluate(&[1.0]).unwrap(), -4.0);
        assert!(matches!(m.predict(&[1.0, 2.0]), Err(RegressionError::ArityMismatch { .. })));
    }

    #[test]
    fn compiled_matches_evaluate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = ObservationTable::new(sid(), vec!["a".into(), "b".into(), "c".into()]);
        for _ in 0..60 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            let y = x[0] * x[1] - x[2].powi(3) + 2.0;
            t.push(x, y).unwrap();
        }
        let m = fit(&t, 3).unwrap();
        let c = m.compiled();
        for r in &t.rows {
            let a = m.evaluate(&r.features).unwrap();
            assert!((a - c.evaluate(&r.features)).abs() <= 1e-9 * (1.0 + a.abs()));
        }
        let raw = RegressionModel::from_weights(sid(), vec!["x".into()], 2, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(raw.compiled().evaluate(&[2.0]), 17.0);
    }

    #[test]
    fn mse_examples() {
        let zero = RegressionModel::from_weights(sid(), vec!["x".into()], 1, vec![0.0, 0.0]).unwrap();
        let t = table_1d(&[(1.0, 2.0), (3.0, 2.0), (4.0, 2.0)]);
        assert_eq!(mse(&zero, &t).unwrap(), 4.0);
        let quad = table_1d(&(0..10).map(|i| (i as f64, (i * i) as f64)).collect::<Vec<_>>());
        let lin = fit(&quad, 1).unwrap();
        assert!(mse(&lin, &quad).unwrap() > 1.0);
        assert!(matches!(mse(&zero, &table_1d(&[])), Err(RegressionError::EmptyTable)));
    }

    #[test]
    fn empty_table_rejected() {
        assert!(matches!(fit(&table_1d(&[]), 2), Err(RegressionError::EmptyTable)));
    }

    #[test]
    fn underdetermined_fit_lowers_degree() {
        let mut t = ObservationTable::new(sid(), vec!["a".into(), "b".into()]);
        for i in 0..4 {
            t.push(vec![i as f64, (i * i) as f64 + 1.0], i as f64 * 2.0).unwrap();
        }
        let m = fit(&t, 4).unwrap();
        assert_eq!(m.degree, 1);
        assert_eq!(m.requested_degree, 4);
        assert!(m.was_reduced());
        // a single row still yields a usable (constant) model
        let one = table_1d(&[(3.0, 7.0)]);
        let m = fit(&one, 2).unwrap();
        assert!((m.predict(&[3.0]).unwrap() - 7.0).abs() < 1e-12);
        assert!((m.predict(&[10.0]).unwrap() - 7.0).abs() < 1e-12);
    }

    #[test]
    fn select_degree_prefers_lowest_exact_fit() {
        let t = table_1d(&(0..40).map(|i| (i as f64 * 0.25, 3.0 - 2.0 * i as f64 * 0.25)).collect::<Vec<_>>());
        assert_eq!(select_degree(&t, &[1, 2, 3, 4, 5, 6], 0.2, 7).unwrap(), 1);
        assert!(matches!(
            select_degree(&table_1d(&[(0.0, 1.0), (1.0, 2.0), (2.0, 3.0)]), &[1, 2, 3, 4, 5, 6], 0.2, 1),
            Err(RegressionError::InsufficientRows { .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let mut t = ObservationTable::new(sid(), vec!["cores".into(), "data_quality".into()]);
        t.push(vec![2.6, 550.0], 76.8125).unwrap();
        t.push(vec![1.0 / 3.0, 100.0], 1e-7).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("cores,data_quality,tp_max\n"));
        assert_eq!(ObservationTable::read_csv(sid(), buf.as_slice()).unwrap(), t);
    }

    fn random_table(seed: u64, arity: usize, degree: usize) -> ObservationTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names = (0..arity).map(|i| format!("x{i}")).collect();
        let mut t = ObservationTable::new(sid(), names);
        let rows = monomial_count(arity, degree) * 3 + 5;
        for _ in 0..rows {
            let x: Vec<f64> = (0..arity).map(|_| rng.random_range(-1.5..1.5)).collect();
            let y = rng.random_range(-10.0..10.0);
            t.push(x, y).unwrap();
        }
        t
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn row_order_does_not_matter(seed in any::<u64>(), arity in 1usize..4, degree in 1usize..4) {
            let t = random_table(seed, arity, degree);
            let mut shuffled = t.clone();
            shuffled.rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xabcd));
            let a = fit(&t, degree).unwrap();
            let b = fit(&shuffled, degree).unwrap();
            for (x, y) in a.weights.iter().zip(&b.weights) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }

        #[test]
        fn residuals_orthogonal_to_design(seed in any::<u64>(), arity in 1usize..4, degree in 1usize..4) {
            let t = random_table(seed, arity, degree);
            let m = fit(&t, degree).unwrap();
            let m_count = monomial_count(arity, degree);
            let mut g = vec![0.0; m_count];
            let mut scale = 0.0f64;
            for r in &t.rows {
                let f = poly_features(&r.features, degree).unwrap();
                let res = r.target - m.evaluate(&r.features).unwrap();
                for (gi, fi) in g.iter_mut().zip(&f) {
                    *gi += fi * res;
                    scale = scale.max((fi * r.target).abs());
                }
            }
            for gi in g {
                prop_assert!(gi.abs() <= 1e-6 * scale.max(1.0) * t.len() as f64);
            }
        }

        #[test]
        fn training_mse_non_increasing_in_degree(seed in any::<u64>(), arity in 1usize..3) {
            let t = random_table(seed, arity, 5);
            let mut prev = f64::INFINITY;
            for d in 1..=5 {
                let e = mse(&fit(&t, d).unwrap(), &t).unwrap();
                prop_assert!(e <= prev * (1.0 + 1e-9) + 1e-12);
                prev = e;
            }
        }
    }
}
