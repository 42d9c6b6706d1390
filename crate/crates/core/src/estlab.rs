//! Analytic and empirical comparison of the batch estimators of `q(z)`.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::GaussianMoments;
use crate::objective::{batch_coefficients, batch_coefficients_exact, EstimatorKind, Rational, LN_2PI};
use crate::rng::Rng;
use crate::tensor::{pairwise_sum, Tensor};

/// Inverse importance weights `N * coefficient` of one batch, star first.
#[derive(Clone, Debug, PartialEq)]
pub struct InverseWeightSet {
    pub kind: EstimatorKind,
    pub n: usize,
    pub m: usize,
    pub weights: Vec<Rational>,
}

impl InverseWeightSet {
    pub fn mean(&self) -> Rational {
        self.weights.iter().sum::<Rational>() / Rational::from(self.weights.len() as i128)
    }

    /// Population variance (divide by `M`).
    pub fn variance(&self) -> Rational {
        let mean = self.mean();
        let ss: Rational = self.weights.iter().map(|w| (w - mean) * (w - mean)).sum();
        ss / Rational::from(self.weights.len() as i128)
    }
}

pub fn enumerate_inverse_weights(kind: EstimatorKind, n: usize, m: usize) -> Result<InverseWeightSet> {
    if m < 2 {
        return Err(Error::invalid(format!("inverse weights need M >= 2, got {m}")));
    }
    let scale = Rational::from(n as i128);
    let weights = batch_coefficients_exact(kind, n, m, 0)?.into_iter().map(|c| c * scale).collect();
    Ok(InverseWeightSet { kind, n, m, weights })
}

/// Closed-form `(mean, variance)` of the inverse weights for IS and MSS.
pub fn analytic_inverse_weight_stats(kind: EstimatorKind, n: usize, m: usize) -> Result<(Rational, Rational)> {
    if m < 2 || m > n {
        return Err(Error::invalid(format!("need 2 <= M <= N, got N={n}, M={m}")));
    }
    let (n, m) = (n as i128, m as i128);
    let mean = Rational::new(n, m);
    let denom = m * m * (m - 1);
    let var = match kind {
        EstimatorKind::Is => Rational::new((n - m) * (n - m), denom),
        EstimatorKind::Mss => Rational::new(2 * m * m - (2 * n + 2) * m + n * n, denom),
        other => return Err(Error::Unsupported(format!("no variance formula for {other}"))),
    };
    Ok((mean, var))
}

/// One line of the analytic comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticRow {
    pub n: usize,
    pub m: usize,
    pub mean: Rational,
    pub var_is: Rational,
    pub var_mss: Rational,
    /// `Var[MSS] - Var[IS]`.
    pub var_diff: Rational,
}

pub fn analytic_row(n: usize, m: usize) -> Result<AnalyticRow> {
    let (mean, var_is) = analytic_inverse_weight_stats(EstimatorKind::Is, n, m)?;
    let (_, var_mss) = analytic_inverse_weight_stats(EstimatorKind::Mss, n, m)?;
    Ok(AnalyticRow { n, m, mean, var_is, var_mss, var_diff: var_mss - var_is })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointStats {
    pub kind: EstimatorKind,
    pub point_index: usize,
    pub full_value: f64,
    pub emp_mean: f64,
    pub emp_var: f64,
    pub bias_z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub n: usize,
    pub m: usize,
    pub repeats: usize,
    pub rows: Vec<PointStats>,
}

impl EstimatorReport {
    pub fn rows_for(&self, kind: EstimatorKind) -> impl Iterator<Item = &PointStats> {
        self.rows.iter().filter(move |r| r.kind == kind)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "kind,point_index,full_value,emp_mean,emp_var,bias_z")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{:.17e},{:.17e},{:.17e},{:.17e}",
                r.kind, r.point_index, r.full_value, r.emp_mean, r.emp_var, r.bias_z
            )?;
        }
        Ok(())
    }
}

/// Ten overlapping 2-D diagonal-Gaussian posteriors used by default.
pub fn toy_posteriors(rng: &mut Rng, n: usize) -> GaussianMoments {
    let mean: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.5..1.5)).collect();
    let logvar: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.2..0.0)).collect();
    GaussianMoments {
        mean: Tensor::matrix(n, 2, mean).expect("sized"),
        logvar: Tensor::matrix(n, 2, logvar).expect("sized"),
    }
}

fn density(point: &[f64], moments: &GaussianMoments, j: usize) -> f64 {
    let mut s = 0.0;
    for (d, &z) in point.iter().enumerate() {
        let lv = moments.logvar.get(j, d);
        let diff = z - moments.mean.get(j, d);
        s -= 0.5 * (LN_2PI + lv + diff * diff * (-lv).exp());
    }
    s.exp()
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = pairwise_sum(values) / n;
    let dev: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    (mean, pairwise_sum(&dev) / (n - 1.0))
}

/// For every posterior mean `z(n)`, draws `repeats` ordered batches of size
/// `m` that contain `n` (placed at position 0), evaluates each estimator's
/// `q̂(z(n))` on the same batch, and compares against the exact average.
pub fn empirical_estimator_eval(
    moments: &GaussianMoments,
    m: usize,
    repeats: usize,
    rng: &mut Rng,
) -> Result<EstimatorReport> {
    let n = moments.mean.rows();
    if repeats < 2 {
        return Err(Error::invalid(format!("need at least 2 repeats, got {repeats}")));
    }
    if m < 2 || m > n {
        return Err(Error::invalid(format!("need 2 <= M <= N, got N={n}, M={m}")));
    }
    let kinds = EstimatorKind::BATCH_KINDS;
    let coeffs: Vec<Vec<f64>> = kinds
        .iter()
        .map(|&k| batch_coefficients(k, n, m, 0))
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(kinds.len() * n);
    let mut per_kind: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n); kinds.len()];
    let mut full_values = Vec::with_capacity(n);
    for point in 0..n {
        let z = moments.mean.row(point).to_vec();
        let dens: Vec<f64> = (0..n).map(|j| density(&z, moments, j)).collect();
        full_values.push(pairwise_sum(&dens) / n as f64);
        let mut others: Vec<usize> = (0..n).filter(|&j| j != point).collect();
        let mut draws = vec![Vec::with_capacity(repeats); kinds.len()];
        for _ in 0..repeats {
            others.shuffle(rng);
            let batch: Vec<usize> = std::iter::once(point).chain(others[..m - 1].iter().copied()).collect();
            for (ki, c) in coeffs.iter().enumerate() {
                let terms: Vec<f64> = batch.iter().zip(c).map(|(&j, cj)| cj * dens[j]).collect();
                draws[ki].push(pairwise_sum(&terms));
            }
        }
        for (ki, d) in draws.into_iter().enumerate() {
            per_kind[ki].push(d);
        }
    }
    for (ki, &kind) in kinds.iter().enumerate() {
        for (point, draws) in per_kind[ki].iter().enumerate() {
            let (emp_mean, emp_var) = mean_var(draws);
            let full_value = full_values[point];
            let se = (emp_var / repeats as f64).sqrt();
            let gap = emp_mean - full_value;
            let bias_z = if se > 0.0 {
                gap / se
            } else if gap.abs() <= 1e-15 * full_value.abs() {
                0.0
            } else {
                gap.signum() * f64::INFINITY
            };
            rows.push(PointStats { kind, point_index: point, full_value, emp_mean, emp_var, bias_z });
        }
    }
    Ok(EstimatorReport { n, m, repeats, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn r(a: i128, b: i128) -> Rational {
        Rational::new(a, b)
    }

    #[test]
    fn paper_examples() {
        assert_eq!(analytic_inverse_weight_stats(EstimatorKind::Is, 10, 3).unwrap(), (r(10, 3), r(49, 18)));
        assert_eq!(analytic_inverse_weight_stats(EstimatorKind::Mss, 10, 3).unwrap(), (r(10, 3), r(52, 18)));
        let row = analytic_row(10, 3).unwrap();
        assert_eq!(row.var_diff, r(1, 6));
        let is = enumerate_inverse_weights(EstimatorKind::Is, 10, 3).unwrap();
        assert_eq!(is.weights, vec![r(1, 1), r(9, 2), r(9, 2)]);
        let mss = enumerate_inverse_weights(EstimatorKind::Mss, 10, 3).unwrap();
        assert_eq!(mss.weights, vec![r(1, 1), r(5, 1), r(4, 1)]);
        assert_eq!(is.mean(), r(10, 3));
        assert_eq!(mss.mean(), r(10, 3));
    }

    #[test]
    fn degenerate_cases() {
        let row = analytic_row(9, 2).unwrap();
        assert_eq!(row.var_is, row.var_mss);
        for kind in [EstimatorKind::Is, EstimatorKind::Mss] {
            let set = enumerate_inverse_weights(kind, 6, 6).unwrap();
            assert_eq!(set.weights.len(), 6);
            assert_eq!(set.variance(), analytic_inverse_weight_stats(kind, 6, 6).unwrap().1);
        }
        assert_eq!(enumerate_inverse_weights(EstimatorKind::Is, 6, 6).unwrap().weights, vec![r(1, 1); 6]);
        assert_eq!(analytic_inverse_weight_stats(EstimatorKind::Is, 6, 6).unwrap().1, r(0, 1));
        assert!(analytic_inverse_weight_stats(EstimatorKind::Is, 6, 1).is_err());
        assert!(enumerate_inverse_weights(EstimatorKind::Mss, 6, 1).is_err());
    }

    #[test]
    fn empirical_report_shape_and_unbiasedness() {
        let moments = toy_posteriors(&mut stream(0, Stream::Estlab), 10);
        let report = empirical_estimator_eval(&moments, 3, 1000, &mut stream(1, Stream::Estlab)).unwrap();
        assert_eq!(report.rows.len(), 30);
        for kind in [EstimatorKind::Is, EstimatorKind::Mss] {
            for row in report.rows_for(kind) {
                assert!(row.bias_z.abs() < 4.0, "{kind} point {}: z {}", row.point_index, row.bias_z);
            }
        }
        assert!(report.rows_for(EstimatorKind::Mws).any(|r| r.bias_z.abs() > 5.0));
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 31);
    }

    #[test]
    fn whole_dataset_batches_are_exact() {
        let moments = toy_posteriors(&mut stream(2, Stream::Estlab), 5);
        let report = empirical_estimator_eval(&moments, 5, 10, &mut stream(3, Stream::Estlab)).unwrap();
        for row in report.rows_for(EstimatorKind::Is) {
            assert!((row.emp_mean - row.full_value).abs() < 1e-15);
            assert!(row.emp_var < 1e-30);
        }
        assert!(empirical_estimator_eval(&moments, 3, 1, &mut stream(3, Stream::Estlab)).is_err());
    }
}
