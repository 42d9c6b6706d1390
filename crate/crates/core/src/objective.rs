//! ELBO terms, priors, the partial-correlation penalty and its minibatch
//! estimators of the aggregated posterior.

use std::f64::consts::{LN_2, PI};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{decode_on_tape, encode_on_tape, reparameterize_on_tape, GaussianMoments, ModelSpec, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::{pairwise_sum, Tensor};

pub type Rational = Ratio<i128>;

/// `ln(2 pi)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Scale inside the logcosh density: `p(z) ∝ sech²(LOGCOSH_SCALE * z)`.
pub const LOGCOSH_SCALE: f64 = PI / (2.0 * 1.732_050_807_568_877_2);

/// `ln(pi / (4 sqrt 3))`, the logcosh density's log normalizer.
pub fn logcosh_log_norm() -> f64 {
    (PI / (4.0 * 3f64.sqrt())).ln()
}

/// Partition of `k` latent dims into `g` contiguous groups of equal size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupStructure {
    k: usize,
    g: usize,
}

impl GroupStructure {
    pub fn new(k: usize, g: usize) -> Result<Self> {
        if k == 0 || g == 0 {
            return Err(Error::invalid("latent dim and group count must be positive"));
        }
        if k % g != 0 {
            return Err(Error::invalid(format!("{g} groups do not divide {k} latent dims")));
        }
        Ok(GroupStructure { k, g })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn g(&self) -> usize {
        self.g
    }

    /// Group rank `k / g`.
    pub fn h(&self) -> usize {
        self.k / self.g
    }

    pub fn range(&self, group: usize) -> Range<usize> {
        let h = self.h();
        group * h..(group + 1) * h
    }

    pub fn ranges(&self) -> Vec<Range<usize>> {
        (0..self.g).map(|i| self.range(i)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Mws,
    Mss,
    Is,
    Full,
}

impl EstimatorKind {
    pub const BATCH_KINDS: [EstimatorKind; 3] = [EstimatorKind::Mws, EstimatorKind::Mss, EstimatorKind::Is];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Mws => "mws",
            EstimatorKind::Mss => "mss",
            EstimatorKind::Is => "is",
            EstimatorKind::Full => "full",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mws" => Ok(EstimatorKind::Mws),
            "mss" => Ok(EstimatorKind::Mss),
            "is" => Ok(EstimatorKind::Is),
            "full" => Ok(EstimatorKind::Full),
            other => Err(Error::invalid(format!("unknown estimator {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    #[default]
    Gaussian,
    Logcosh,
}

/// Coefficients of the batch approximation of `q(z)` for the row whose own
/// sample sits at position `star`, as exact rationals.
///
/// For MSS the "last" member is the one just before `star`, cyclically.
pub fn batch_coefficients_exact(kind: EstimatorKind, n: usize, m: usize, star: usize) -> Result<Vec<Rational>> {
    if m < 2 && matches!(kind, EstimatorKind::Is | EstimatorKind::Mss) {
        return Err(Error::invalid(format!("{kind} needs a batch of at least 2, got {m}")));
    }
    if m == 0 || m > n || star >= m {
        return Err(Error::invalid(format!("invalid batch: N={n}, M={m}, star={star}")));
    }
    if kind == EstimatorKind::Full && m != n {
        return Err(Error::invalid(format!("full estimator needs the whole dataset (M={m}, N={n})")));
    }
    let (n_i, m_i) = (n as i128, m as i128);
    let inv_n = Rational::new(1, n_i);
    let base: Vec<Rational> = match kind {
        EstimatorKind::Mws | EstimatorKind::Full => vec![inv_n; m],
        EstimatorKind::Is => {
            let other = Rational::new(n_i - 1, (m_i - 1) * n_i);
            std::iter::once(inv_n).chain(std::iter::repeat_n(other, m - 1)).collect()
        }
        EstimatorKind::Mss => {
            let middle = Rational::new(1, m_i - 1);
            let last = Rational::new(n_i - m_i + 1, n_i * (m_i - 1));
            std::iter::once(inv_n)
                .chain(std::iter::repeat_n(middle, m - 2))
                .chain(std::iter::once(last))
                .collect()
        }
    };
    Ok((0..m).map(|j| base[(j + m - star) % m]).collect())
}

pub fn batch_coefficients(kind: EstimatorKind, n: usize, m: usize, star: usize) -> Result<Vec<f64>> {
    Ok(batch_coefficients_exact(kind, n, m, star)?.iter().map(ratio_to_f64).collect())
}

pub fn ratio_to_f64(r: &Rational) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// `(M, M)` matrix of log coefficients; row `i` uses star `i`.
pub fn log_coefficient_matrix(kind: EstimatorKind, n: usize, m: usize) -> Result<Tensor> {
    let base = batch_coefficients(kind, n, m, 0)?;
    let mut out = Vec::with_capacity(m * m);
    for i in 0..m {
        out.extend((0..m).map(|j| base[(j + m - i) % m].ln()));
    }
    Tensor::matrix(m, m, out)
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, &[a.shape(), b.shape()]));
    }
    Ok(())
}

fn per_row(t: &Tensor, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let cols = t.cols();
    (0..t.rows()).map(|r| (0..cols).map(|c| f(r, c)).sum()).collect()
}

/// Per-row `sum_d ln N(x_d; mean_d, exp(logvar_d))`.
pub fn gaussian_logpdf_diag(x: &Tensor, mean: &Tensor, logvar: &Tensor) -> Result<Vec<f64>> {
    check_same("gaussian_logpdf_diag", x, mean)?;
    check_same("gaussian_logpdf_diag", x, logvar)?;
    Ok(per_row(x, |r, c| {
        let lv = logvar.get(r, c);
        let d = x.get(r, c) - mean.get(r, c);
        -0.5 * (LN_2PI + lv + d * d * (-lv).exp())
    }))
}

/// Per-row closed-form `KL(N(mean, exp(logvar)) || N(0, I))`.
pub fn kl_diag_gaussian_to_std(mean: &Tensor, logvar: &Tensor) -> Result<Vec<f64>> {
    check_same("kl_diag_gaussian_to_std", mean, logvar)?;
    Ok(per_row(mean, |r, c| {
        let (m, lv) = (mean.get(r, c), logvar.get(r, c));
        0.5 * (lv.exp() + m * m - 1.0 - lv)
    }))
}

/// `ln sech(a)`, stable for large `|a|`.
pub fn log_sech(a: f64) -> f64 {
    let a = a.abs();
    LN_2 - a - (-2.0 * a).exp().ln_1p()
}

/// Per-row log density under the factorized logcosh prior.
pub fn logcosh_logpdf(z: &Tensor) -> Vec<f64> {
    let c = logcosh_log_norm();
    per_row(z, |r, k| c + 2.0 * log_sech(LOGCOSH_SCALE * z.get(r, k)))
}

pub fn prior_logpdf(prior: PriorKind, z: &Tensor) -> Vec<f64> {
    match prior {
        PriorKind::Gaussian => per_row(z, |r, k| -0.5 * (LN_2PI + z.get(r, k).powi(2))),
        PriorKind::Logcosh => logcosh_logpdf(z),
    }
}

/// Per-row single-sample estimate `ln q(z|x) - ln p(z)` at a reparameterized `z`.
pub fn kl_posterior_mc(moments: &GaussianMoments, z: &Tensor, prior: PriorKind) -> Result<Vec<f64>> {
    let log_q = gaussian_logpdf_diag(z, &moments.mean, &moments.logvar)?;
    let log_p = prior_logpdf(prior, z);
    Ok(log_q.iter().zip(&log_p).map(|(q, p)| q - p).collect())
}

pub fn kl_posterior_to_logcosh_mc(moments: &GaussianMoments, z: &Tensor) -> Result<Vec<f64>> {
    kl_posterior_mc(moments, z, PriorKind::Logcosh)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `ln sum_m coeffs[m] prod_{k in dims} N(z_k; mean[m,k], exp(logvar[m,k]))`.
pub fn aggregated_group_logdensity(
    z_point: &[f64],
    dims: Range<usize>,
    moments: &GaussianMoments,
    coeffs: &[f64],
) -> Result<f64> {
    if dims.is_empty() {
        return Err(Error::invalid("aggregated density over an empty dim range"));
    }
    let (m, k) = (moments.mean.rows(), moments.mean.cols());
    if coeffs.len() != m || z_point.len() != k || dims.end > k {
        return Err(Error::invalid(format!(
            "aggregated density: {} coeffs, point of length {}, dims {:?}, moments {m}x{k}",
            coeffs.len(),
            z_point.len(),
            dims
        )));
    }
    let terms: Vec<f64> = (0..m)
        .map(|j| {
            let mut s = coeffs[j].ln();
            for d in dims.clone() {
                let lv = moments.logvar.get(j, d);
                let diff = z_point[d] - moments.mean.get(j, d);
                s -= 0.5 * (LN_2PI + lv + diff * diff * (-lv).exp());
            }
            s
        })
        .collect();
    Ok(log_sum_exp(&terms))
}

/// Plain PC estimate `mean_i [ln q(z_i) - sum_g ln q(z_i,g)]` with rows of
/// `moments` as the batch and row `i` as its own star. Streams over rows so
/// whole-dataset (FULL) evaluation needs `O(M)` memory.
pub fn pc_estimate(
    z: &Tensor,
    moments: &GaussianMoments,
    groups: &GroupStructure,
    kind: EstimatorKind,
    n: usize,
) -> Result<f64> {
    check_same("pc_estimate", z, &moments.mean)?;
    check_same("pc_estimate", z, &moments.logvar)?;
    if z.cols() != groups.k() {
        return Err(Error::invalid(format!("latents have {} dims, groups expect {}", z.cols(), groups.k())));
    }
    if groups.g() == 1 {
        return Ok(0.0);
    }
    let m = z.rows();
    let log_base: Vec<f64> = batch_coefficients(kind, n, m, 0)?.iter().map(|c| c.ln()).collect();
    let (k, g, h) = (groups.k(), groups.g(), groups.h());
    let precision: Vec<f64> = moments.logvar.data().iter().map(|lv| (-lv).exp()).collect();
    let norm: Vec<f64> = moments.logvar.data().iter().map(|lv| -0.5 * (LN_2PI + lv)).collect();
    let (mu, zd) = (moments.mean.data(), z.data());

    let mut rows = Vec::with_capacity(m);
    let mut group_terms = vec![0.0; g * m];
    let mut joint = vec![0.0; m];
    for i in 0..m {
        let zi = &zd[i * k..(i + 1) * k];
        for j in 0..m {
            let lc = log_base[(j + m - i) % m];
            let mut total = 0.0;
            for gi in 0..g {
                let mut s = 0.0;
                for d in gi * h..(gi + 1) * h {
                    let at = j * k + d;
                    let diff = zi[d] - mu[at];
                    s += norm[at] - 0.5 * diff * diff * precision[at];
                }
                group_terms[gi * m + j] = s + lc;
                total += s;
            }
            joint[j] = total + lc;
        }
        let marginals: f64 = (0..g).map(|gi| log_sum_exp(&group_terms[gi * m..(gi + 1) * m])).sum();
        rows.push(log_sum_exp(&joint) - marginals);
    }
    Ok(pairwise_sum(&rows) / m as f64)
}

/// Recorded PC penalty for a batch: `z`, `mean`, `logvar` are `(M, K)` nodes.
/// Gradients flow through the sampled `z` and through every batch member's
/// moments. Returns a constant zero when `G = 1`.
pub fn pc_penalty(
    tape: &mut Tape,
    z: Var,
    mean: Var,
    logvar: Var,
    groups: &GroupStructure,
    kind: EstimatorKind,
    n: usize,
) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 || shape[1] != groups.k() {
        return Err(Error::shape("pc_penalty", &[&shape, &[groups.k()]]));
    }
    if groups.g() == 1 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let m = shape[0];
    let log_c = tape.constant(log_coefficient_matrix(kind, n, m)?);
    let mut joint: Option<Var> = None;
    let mut marginal_sum: Option<Var> = None;
    for range in groups.ranges() {
        let zg = tape.slice_cols(z, range.start, range.end)?;
        let mg = tape.slice_cols(mean, range.start, range.end)?;
        let lg = tape.slice_cols(logvar, range.start, range.end)?;
        let pair = tape.pairwise_gaussian_logpdf(zg, mg, lg)?;
        let weighted = tape.add(pair, log_c)?;
        let marginal = tape.logsumexp(weighted, 1)?;
        marginal_sum = Some(match marginal_sum {
            Some(acc) => tape.add(acc, marginal)?,
            None => marginal,
        });
        joint = Some(match joint {
            Some(acc) => tape.add(acc, pair)?,
            None => pair,
        });
    }
    let joint = tape.add(joint.expect("at least one group"), log_c)?;
    let log_q = tape.logsumexp(joint, 1)?;
    let diff = tape.sub(log_q, marginal_sum.expect("at least one group"))?;
    tape.mean(diff)
}

/// Everything that shapes the training loss besides the data and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub groups: GroupStructure,
    pub estimator: EstimatorKind,
    pub beta: f64,
    pub prior: PriorKind,
    /// Dataset size `N` used by the batch coefficients.
    pub dataset_size: usize,
}

/// Scalar loss components of one batch; `total = recon + kl + beta * pc`
/// is the negated ELBO plus the weighted penalty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub pc: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn elbo(&self) -> f64 {
        -(self.recon + self.kl)
    }
}

/// Tape handles of a recorded loss.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
    pub pc: Var,
    pub z: Var,
    pub mean: Var,
    pub logvar: Var,
}

impl LossVars {
    /// Reads the component values, failing on the first non-finite one.
    pub fn breakdown(&self, tape: &Tape, beta: f64) -> Result<LossBreakdown> {
        let read = |name: &str, v: Var| -> Result<f64> {
            let x = tape.value(v).item();
            if x.is_finite() {
                Ok(x)
            } else {
                Err(Error::NonFinite(format!("loss component {name} ({x})")))
            }
        };
        let recon = read("recon", self.recon)?;
        let kl = read("kl", self.kl)?;
        let pc = read("pc", self.pc)?;
        let total = read("total", self.total)?;
        Ok(LossBreakdown { recon, kl, pc, beta, total })
    }
}

fn add_constant(tape: &mut Tape, v: Var, c: f64) -> Result<Var> {
    let k = tape.constant(Tensor::scalar(c));
    tape.add(v, k)
}

/// Records the full loss for a batch `x (B, D)` with standard-normal draws
/// `eps (B, K)`.
pub fn total_loss(
    tape: &mut Tape,
    vars: &ParamVars,
    spec: &ModelSpec,
    x: Var,
    eps: Var,
    objective: &Objective,
) -> Result<LossVars> {
    let rows = tape.shape(x)[0] as f64;
    let (mean, logvar) = encode_on_tape(tape, vars, spec, x)?;
    let z = reparameterize_on_tape(tape, mean, logvar, eps)?;
    let (x_mean, x_logvar) = decode_on_tape(tape, vars, spec, z)?;

    // recon = (1/B) sum 0.5 * (ln 2pi + lv + (x - mu)^2 exp(-lv))
    let diff = tape.sub(x, x_mean)?;
    let sq = tape.square(diff)?;
    let neg_lv = tape.neg(x_logvar)?;
    let prec = tape.exp(neg_lv)?;
    let quad = tape.mul(sq, prec)?;
    let inner = tape.add(quad, x_logvar)?;
    let s = tape.sum(inner)?;
    let scaled = tape.scale(s, 0.5 / rows)?;
    let recon = add_constant(tape, scaled, 0.5 * LN_2PI * spec.data_dim() as f64)?;

    let kl = match objective.prior {
        PriorKind::Gaussian => {
            // (1/B) sum 0.5 * (exp(lv) + mu^2 - 1 - lv)
            let var = tape.exp(logvar)?;
            let m2 = tape.square(mean)?;
            let a = tape.add(var, m2)?;
            let b = tape.sub(a, logvar)?;
            let s = tape.sum(b)?;
            let scaled = tape.scale(s, 0.5 / rows)?;
            add_constant(tape, scaled, -0.5 * spec.latent_dim() as f64)?
        }
        PriorKind::Logcosh => {
            // ln q(z|x) = -0.5 sum (ln 2pi + lv + eps^2); ln p(z) = sum (c - 2 logcosh(a z))
            let e2 = tape.square(eps)?;
            let t = tape.add(logvar, e2)?;
            let s_q = tape.sum(t)?;
            let az = tape.scale(z, LOGCOSH_SCALE)?;
            let lc = tape.logcosh(az)?;
            let s_p = tape.sum(lc)?;
            let neg_half_q = tape.scale(s_q, -0.5)?;
            let two_p = tape.scale(s_p, 2.0)?;
            let per_batch = tape.add(neg_half_q, two_p)?;
            let scaled = tape.scale(per_batch, 1.0 / rows)?;
            let k = spec.latent_dim() as f64;
            add_constant(tape, scaled, -0.5 * LN_2PI * k - logcosh_log_norm() * k)?
        }
    };

    let pc = pc_penalty(
        tape,
        z,
        mean,
        logvar,
        &objective.groups,
        objective.estimator,
        objective.dataset_size,
    )?;
    let elbo_part = tape.add(recon, kl)?;
    let weighted = tape.scale(pc, objective.beta)?;
    let total = tape.add(elbo_part, weighted)?;
    Ok(LossVars { total, recon, kl, pc, z, mean, logvar })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, stream, Stream};
    use rand::Rng as _;

    fn r(a: i128, b: i128) -> Rational {
        Rational::new(a, b)
    }

    #[test]
    fn group_structure_ranges() {
        let g = GroupStructure::new(6, 3).unwrap();
        assert_eq!(g.ranges(), vec![0..2, 2..4, 4..6]);
        assert_eq!(GroupStructure::new(6, 1).unwrap().ranges(), vec![0..6]);
        assert_eq!(GroupStructure::new(3, 3).unwrap().h(), 1);
        assert!(GroupStructure::new(6, 4).is_err());
    }

    #[test]
    fn coefficient_examples() {
        assert_eq!(
            batch_coefficients_exact(EstimatorKind::Is, 10, 3, 0).unwrap(),
            vec![r(1, 10), r(9, 20), r(9, 20)]
        );
        assert_eq!(
            batch_coefficients_exact(EstimatorKind::Mss, 10, 3, 0).unwrap(),
            vec![r(1, 10), r(1, 2), r(2, 5)]
        );
        let is = batch_coefficients(EstimatorKind::Is, 10, 3, 0).unwrap();
        assert_eq!(is, vec![0.1, 0.45, 0.45]);
        assert_eq!(batch_coefficients(EstimatorKind::Mws, 10, 3, 1).unwrap(), vec![0.1; 3]);
        // star moves the 1/N entry; MSS "last" trails it cyclically
        assert_eq!(
            batch_coefficients_exact(EstimatorKind::Mss, 10, 3, 1).unwrap(),
            vec![r(2, 5), r(1, 10), r(1, 2)]
        );
    }

    #[test]
    fn coefficients_reduce_to_full_at_m_equals_n() {
        for kind in [EstimatorKind::Is, EstimatorKind::Mws, EstimatorKind::Full] {
            for star in 0..7 {
                assert_eq!(batch_coefficients_exact(kind, 7, 7, star).unwrap(), vec![r(1, 7); 7]);
            }
        }
        // MSS keeps its 1/(M-1) middle weights at M = N; each neighbour is
        // "last" with probability 1/(M-1), which averages its weight to 1/N
        let c = batch_coefficients_exact(EstimatorKind::Mss, 7, 7, 0).unwrap();
        assert_eq!(c.iter().sum::<Rational>(), r(1, 1));
        let (middle, last) = (c[1], c[6]);
        assert_eq!(middle * r(5, 6) + last * r(1, 6), r(1, 7));
    }

    #[test]
    fn coefficient_errors() {
        assert!(batch_coefficients(EstimatorKind::Is, 10, 1, 0).is_err());
        assert!(batch_coefficients(EstimatorKind::Mss, 10, 1, 0).is_err());
        assert!(batch_coefficients(EstimatorKind::Full, 10, 3, 0).is_err());
        assert!(batch_coefficients(EstimatorKind::Is, 10, 11, 0).is_err());
        assert!(batch_coefficients(EstimatorKind::Is, 10, 3, 3).is_err());
    }

    #[test]
    fn estimator_names_round_trip() {
        for kind in [EstimatorKind::Mws, EstimatorKind::Mss, EstimatorKind::Is, EstimatorKind::Full] {
            assert_eq!(kind.to_string().parse::<EstimatorKind>().unwrap(), kind);
        }
        assert!("xyz".parse::<EstimatorKind>().is_err());
    }

    #[test]
    fn gaussian_logpdf_examples() {
        let z = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let v = gaussian_logpdf_diag(&z, &z, &z).unwrap();
        assert!((v[0] + 0.918_938_533_204_672_7).abs() < 1e-15);
        let x = Tensor::matrix(1, 2, vec![1.5, -0.3]).unwrap();
        let m = Tensor::matrix(1, 2, vec![0.5, 0.2]).unwrap();
        let lv = Tensor::matrix(1, 2, vec![0.3, -1.0]).unwrap();
        let shift = |t: &Tensor| t.map(|v| v + 7.0);
        let a = gaussian_logpdf_diag(&x, &m, &lv).unwrap()[0];
        let b = gaussian_logpdf_diag(&shift(&x), &shift(&m), &lv).unwrap()[0];
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gaussian_logpdf_matches_product_of_densities() {
        let mut rng = stream(11, Stream::Aux(0));
        for _ in 0..100 {
            let (x, m, lv): (f64, f64, f64) =
                (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0));
            let sd = (0.5 * lv).exp();
            let density = (-(x - m).powi(2) / (2.0 * sd * sd)).exp() / (sd * (2.0 * PI).sqrt());
            let t = |v| Tensor::matrix(1, 1, vec![v]).unwrap();
            let got = gaussian_logpdf_diag(&t(x), &t(m), &t(lv)).unwrap()[0];
            assert!((got - density.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_closed_form_examples() {
        let zero = Tensor::zeros(&[1, 1]);
        assert_eq!(kl_diag_gaussian_to_std(&zero, &zero).unwrap(), vec![0.0]);
        let one = Tensor::filled(&[1, 1], 1.0);
        assert_eq!(kl_diag_gaussian_to_std(&one, &zero).unwrap(), vec![0.5]);
    }

    #[test]
    fn kl_closed_form_matches_monte_carlo() {
        let n = 1_000_000;
        let (m, lv) = (0.7, -0.6);
        let moments = GaussianMoments { mean: Tensor::filled(&[n, 1], m), logvar: Tensor::filled(&[n, 1], lv) };
        let eps = standard_normal(&mut stream(12, Stream::Eps), &[n, 1]);
        let z = crate::nn::reparameterize(&moments, &eps).unwrap();
        let mc = kl_posterior_mc(&moments, &z, PriorKind::Gaussian).unwrap();
        let mc_mean = pairwise_sum(&mc) / n as f64;
        let exact = kl_diag_gaussian_to_std(
            &Tensor::matrix(1, 1, vec![m]).unwrap(),
            &Tensor::matrix(1, 1, vec![lv]).unwrap(),
        )
        .unwrap()[0];
        assert!((mc_mean / exact - 1.0).abs() < 0.01, "{mc_mean} vs {exact}");
    }

    #[test]
    fn logcosh_examples() {
        let v = logcosh_logpdf(&Tensor::matrix(1, 1, vec![0.0]).unwrap());
        assert!((v[0] + 0.790_818).abs() < 1e-4);
        assert!((v[0] - (PI / (4.0 * 3f64.sqrt())).ln()).abs() < 1e-15);
        let z = Tensor::matrix(1, 3, vec![0.4, -2.0, 800.0]).unwrap();
        let neg = z.map(|v| -v);
        assert_eq!(logcosh_logpdf(&z), logcosh_logpdf(&neg));
        assert!(logcosh_logpdf(&z)[0].is_finite());
    }

    #[test]
    fn logcosh_kl_is_nonnegative_in_expectation() {
        let n = 100_000;
        let moments = GaussianMoments {
            mean: Tensor::filled(&[n, 2], 0.3),
            logvar: Tensor::filled(&[n, 2], -0.5),
        };
        let eps = standard_normal(&mut stream(13, Stream::Eps), &[n, 2]);
        let z = crate::nn::reparameterize(&moments, &eps).unwrap();
        let kl = kl_posterior_to_logcosh_mc(&moments, &z).unwrap();
        let mean = pairwise_sum(&kl) / n as f64;
        let var = kl.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean >= -3.0 * (var / n as f64).sqrt());
        assert_eq!(kl, kl_posterior_to_logcosh_mc(&moments, &z).unwrap());
    }

    #[test]
    fn aggregated_density_single_member_is_posterior() {
        let moments = GaussianMoments {
            mean: Tensor::matrix(1, 2, vec![0.2, -0.4]).unwrap(),
            logvar: Tensor::matrix(1, 2, vec![0.1, -0.3]).unwrap(),
        };
        let z = [0.5, 0.1];
        let got = aggregated_group_logdensity(&z, 0..2, &moments, &[1.0]).unwrap();
        let expected =
            gaussian_logpdf_diag(&Tensor::matrix(1, 2, z.to_vec()).unwrap(), &moments.mean, &moments.logvar)
                .unwrap()[0];
        assert!((got - expected).abs() < 1e-14);
        assert!(aggregated_group_logdensity(&z, 1..1, &moments, &[1.0]).is_err());
    }

    #[test]
    fn aggregated_density_matches_linear_domain_sum() {
        let mut rng = stream(14, Stream::Aux(0));
        let mean = standard_normal(&mut rng, &[5, 2]);
        let logvar = standard_normal(&mut rng, &[5, 2]).map(|v| 0.3 * v);
        let moments = GaussianMoments { mean: mean.clone(), logvar: logvar.clone() };
        let coeffs = batch_coefficients(EstimatorKind::Is, 20, 5, 2).unwrap();
        let z = [0.3, -0.8];
        let density = |j: usize, d: usize| {
            let var = logvar.get(j, d).exp();
            (-(z[d] - mean.get(j, d)).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
        };
        let linear: f64 = (0..5).map(|j| coeffs[j] * density(j, 0) * density(j, 1)).sum();
        let got = aggregated_group_logdensity(&z, 0..2, &moments, &coeffs).unwrap();
        assert!((got - linear.ln()).abs() < 1e-10);
        let linear0: f64 = (0..5).map(|j| coeffs[j] * density(j, 0)).sum();
        let got0 = aggregated_group_logdensity(&z, 0..1, &moments, &coeffs).unwrap();
        assert!((got0 - linear0.ln()).abs() < 1e-10);
    }

    fn random_batch(seed: u64, m: usize, k: usize) -> (Tensor, GaussianMoments) {
        let mut rng = stream(seed, Stream::Aux(1));
        let mean = standard_normal(&mut rng, &[m, k]);
        let logvar = standard_normal(&mut rng, &[m, k]).map(|v| 0.4 * v - 0.5);
        let eps = standard_normal(&mut rng, &[m, k]);
        let moments = GaussianMoments { mean, logvar };
        let z = crate::nn::reparameterize(&moments, &eps).unwrap();
        (z, moments)
    }

    fn recorded_pc(z: &Tensor, moments: &GaussianMoments, groups: &GroupStructure, kind: EstimatorKind, n: usize) -> f64 {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let mv = tape.constant(moments.mean.clone());
        let lv = tape.constant(moments.logvar.clone());
        let pc = pc_penalty(&mut tape, zv, mv, lv, groups, kind, n).unwrap();
        tape.value(pc).item()
    }

    #[test]
    fn pc_vanishes_for_single_group() {
        let (z, moments) = random_batch(1, 6, 4);
        let g1 = GroupStructure::new(4, 1).unwrap();
        assert_eq!(recorded_pc(&z, &moments, &g1, EstimatorKind::Is, 50), 0.0);
        assert_eq!(pc_estimate(&z, &moments, &g1, EstimatorKind::Is, 50).unwrap(), 0.0);
    }

    #[test]
    fn recorded_and_streamed_pc_agree() {
        let (z, moments) = random_batch(2, 7, 6);
        for g in [2, 3, 6] {
            let groups = GroupStructure::new(6, g).unwrap();
            for kind in EstimatorKind::BATCH_KINDS {
                let a = recorded_pc(&z, &moments, &groups, kind, 40);
                let b = pc_estimate(&z, &moments, &groups, kind, 40).unwrap();
                assert!((a - b).abs() < 1e-10, "{kind} g={g}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn pc_with_singleton_groups_is_total_correlation() {
        // independent evaluation: per row, ln of the weighted mixture over
        // the batch in the joint, minus the same per dimension
        let (z, moments) = random_batch(3, 6, 3);
        let (m, k, n) = (6, 3, 30);
        let mut rows = Vec::new();
        for i in 0..m {
            let coeffs = batch_coefficients(EstimatorKind::Is, n, m, i).unwrap();
            let joint: f64 = (0..m)
                .map(|j| {
                    coeffs[j]
                        * (0..k)
                            .map(|d| {
                                let var = moments.logvar.get(j, d).exp();
                                (-(z.get(i, d) - moments.mean.get(j, d)).powi(2) / (2.0 * var)).exp()
                                    / (2.0 * PI * var).sqrt()
                            })
                            .product::<f64>()
                })
                .sum();
            let marginals: f64 = (0..k)
                .map(|d| {
                    (0..m)
                        .map(|j| {
                            let var = moments.logvar.get(j, d).exp();
                            coeffs[j] * (-(z.get(i, d) - moments.mean.get(j, d)).powi(2) / (2.0 * var)).exp()
                                / (2.0 * PI * var).sqrt()
                        })
                        .sum::<f64>()
                        .ln()
                })
                .sum();
            rows.push(joint.ln() - marginals);
        }
        let tc = rows.iter().sum::<f64>() / m as f64;
        let groups = GroupStructure::new(3, 3).unwrap();
        assert!((recorded_pc(&z, &moments, &groups, EstimatorKind::Is, n) - tc).abs() < 1e-10);
    }

    #[test]
    fn pc_recovers_gaussian_total_correlation() {
        let n = 10_000;
        let rho: f64 = 0.8;
        let mut rng = stream(21, Stream::Data);
        let a = standard_normal(&mut rng, &[n, 2]);
        let mut mean = Tensor::zeros(&[n, 2]);
        for i in 0..n {
            let (u, v) = (a.get(i, 0), a.get(i, 1));
            mean.set(i, 0, u);
            mean.set(i, 1, rho * u + (1.0 - rho * rho).sqrt() * v);
        }
        let moments = GaussianMoments { mean, logvar: Tensor::filled(&[n, 2], (0.1f64).powi(2).ln()) };
        let eps = standard_normal(&mut stream(21, Stream::Eps), &[n, 2]);
        let z = crate::nn::reparameterize(&moments, &eps).unwrap();
        let pc = pc_estimate(&z, &moments, &GroupStructure::new(2, 2).unwrap(), EstimatorKind::Full, n).unwrap();
        let truth = -0.5 * (1.0 - rho * rho).ln();
        assert!((pc - truth).abs() < 0.1, "{pc} vs {truth}");
    }

    #[test]
    fn pc_near_zero_for_factorized_groups() {
        let n = 2_000;
        let mut rng = stream(22, Stream::Data);
        let mean = standard_normal(&mut rng, &[n, 4]);
        let moments = GaussianMoments { mean, logvar: Tensor::filled(&[n, 4], 0.0) };
        let eps = standard_normal(&mut stream(22, Stream::Eps), &[n, 4]);
        let z = crate::nn::reparameterize(&moments, &eps).unwrap();
        let pc = pc_estimate(&z, &moments, &GroupStructure::new(4, 2).unwrap(), EstimatorKind::Full, n).unwrap();
        assert!(pc.abs() < 0.05, "{pc}");
    }

    fn small_setup(seed: u64) -> (ModelSpec, crate::nn::ModelParams, Tensor, Tensor) {
        let spec = ModelSpec::new(crate::nn::LayerKind::Mlp, &[5], 4, 4);
        let params = crate::nn::init_params(&spec, &mut stream(seed, Stream::Init));
        let x = standard_normal(&mut stream(seed, Stream::Data), &[4, 4]);
        let eps = standard_normal(&mut stream(seed, Stream::Eps), &[4, 4]);
        (spec, params, x, eps)
    }

    fn objective(g: usize, beta: f64, prior: PriorKind, kind: EstimatorKind) -> Objective {
        Objective { groups: GroupStructure::new(4, g).unwrap(), estimator: kind, beta, prior, dataset_size: 12 }
    }

    fn breakdown_for(obj: &Objective) -> LossBreakdown {
        let (spec, params, x, eps) = small_setup(5);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let xv = tape.constant(x);
        let ev = tape.constant(eps);
        let loss = total_loss(&mut tape, &vars, &spec, xv, ev, obj).unwrap();
        loss.breakdown(&tape, obj.beta).unwrap()
    }

    #[test]
    fn loss_components_and_reductions() {
        let plain = breakdown_for(&objective(1, 0.0, PriorKind::Gaussian, EstimatorKind::Is));
        assert_eq!(plain.pc, 0.0);
        assert!((plain.total - (plain.recon + plain.kl)).abs() < 1e-12);
        let g1 = breakdown_for(&objective(1, 7.0, PriorKind::Gaussian, EstimatorKind::Is));
        assert_eq!(g1.total, plain.total);
        let tc = breakdown_for(&objective(4, 3.0, PriorKind::Gaussian, EstimatorKind::Mss));
        assert!((tc.total - (tc.recon + tc.kl + 3.0 * tc.pc)).abs() < 1e-12);
        assert_eq!(tc.recon, plain.recon);
        assert_ne!(tc.pc, 0.0);
    }

    #[test]
    fn recorded_terms_match_plain_formulas() {
        let (spec, params, x, eps) = small_setup(6);
        let obj = objective(2, 1.0, PriorKind::Logcosh, EstimatorKind::Is);
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, true);
        let xv = tape.constant(x.clone());
        let ev = tape.constant(eps.clone());
        let loss = total_loss(&mut tape, &vars, &spec, xv, ev, &obj).unwrap();
        let b = loss.breakdown(&tape, 1.0).unwrap();

        let enc = crate::nn::encode(&params, &spec, &x).unwrap();
        let z = crate::nn::reparameterize(&enc, &eps).unwrap();
        let dec = crate::nn::decode(&params, &spec, &z).unwrap();
        let recon = -gaussian_logpdf_diag(&x, &dec.mean, &dec.logvar).unwrap().iter().sum::<f64>() / 4.0;
        let kl = kl_posterior_to_logcosh_mc(&enc, &z).unwrap().iter().sum::<f64>() / 4.0;
        let pc = pc_estimate(&z, &enc, &obj.groups, EstimatorKind::Is, 12).unwrap();
        assert!((b.recon - recon).abs() < 1e-10);
        assert!((b.kl - kl).abs() < 1e-10);
        assert!((b.pc - pc).abs() < 1e-10);
    }

    #[test]
    fn logcosh_logpdf_gradient() {
        let z0 = Tensor::matrix(2, 2, vec![0.3, -1.2, 2.5, 0.01]).unwrap();
        let err = crate::tape::check_gradients(
            |t, p| {
                let az = t.scale(p[0], LOGCOSH_SCALE)?;
                let lc = t.logcosh(az)?;
                let s = t.sum(lc)?;
                let neg = t.scale(s, -2.0)?;
                add_constant(t, neg, 4.0 * logcosh_log_norm())
            },
            &[z0],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (spec, params, x, eps) = small_setup(7);
        for (g, prior, kind) in [
            (2, PriorKind::Gaussian, EstimatorKind::Is),
            (4, PriorKind::Gaussian, EstimatorKind::Mss),
            (2, PriorKind::Logcosh, EstimatorKind::Mws),
        ] {
            let obj = objective(g, 4.0, prior, kind);
            let blocks: Vec<Tensor> = params.blocks().into_iter().cloned().collect();
            let err = crate::tape::check_gradients(
                |t, p| {
                    let vars = ParamVars {
                        encoder: p[..4].chunks(2).map(|c| (c[0], c[1])).collect(),
                        decoder: p[4..].chunks(2).map(|c| (c[0], c[1])).collect(),
                    };
                    let xv = t.constant(x.clone());
                    let ev = t.constant(eps.clone());
                    Ok(total_loss(t, &vars, &spec, xv, ev, &obj)?.total)
                },
                &blocks,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{kind} g={g}: {err}");
        }
    }
}
