//! Evaluation quantities on learned latents: reconstruction and alignment
//! scores, histogram mutual information, group diagnostics, adapted MIG.

use std::f64::consts::PI;
use std::ops::Range;

use nalgebra::{DMatrix, Matrix2, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{reparameterize, GaussianMoments};
use crate::objective::{pc_estimate, EstimatorKind, GroupStructure};
use crate::rng::{standard_normal, stream, Rng, Stream};
use crate::tensor::Tensor;

/// Directions scanned over `[0, pi)`.
pub const SCAN_STEPS: usize = 180;
pub const PAIR_TC_BINS: usize = 30;
pub const MIG_BINS: usize = 20;
pub const MIG_VERSION: &str = "mig_grouped/v1";
/// Largest group count for exhaustive permutation search.
pub const MAX_ALIGN_GROUPS: usize = 8;

fn scan_angle(i: usize) -> f64 {
    i as f64 * PI / SCAN_STEPS as f64
}

/// `1 - SS_res / SS_tot`, pooled over all entries, `SS_tot` about each
/// column's mean.
pub fn reconstruction_r2(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape("reconstruction_r2", &[x.shape(), x_hat.shape()]));
    }
    let (rows, cols) = (x.rows(), x.cols());
    let mut ss_tot = 0.0;
    let mut ss_res = 0.0;
    for c in 0..cols {
        let mean = (0..rows).map(|r| x.get(r, c)).sum::<f64>() / rows as f64;
        for r in 0..rows {
            ss_tot += (x.get(r, c) - mean).powi(2);
            ss_res += (x.get(r, c) - x_hat.get(r, c)).powi(2);
        }
    }
    if ss_tot == 0.0 {
        return Err(Error::invalid("reconstruction_r2: data has zero variance"));
    }
    Ok(1.0 - ss_res / ss_tot)
}

pub fn rmse(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape("rmse", &[x.shape(), x_hat.shape()]));
    }
    let ss: f64 = x.data().iter().zip(x_hat.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((ss / x.len() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    /// Nats, clipped at 0.
    pub value: f64,
    /// Set when either input is constant; `value` is then 0.
    pub degenerate: bool,
}

fn bin_indices(v: &[f64], bins: usize) -> Option<Vec<usize>> {
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    if !(hi > lo) {
        return None;
    }
    let width = (hi - lo) / bins as f64;
    Some(v.iter().map(|&x| (((x - lo) / width) as usize).min(bins - 1)).collect())
}

fn entropy_of_counts(counts: &[usize], n: f64) -> (f64, usize) {
    let mut h = 0.0;
    let mut occupied = 0;
    for &c in counts.iter().filter(|&&c| c > 0) {
        let p = c as f64 / n;
        h -= p * p.ln();
        occupied += 1;
    }
    (h, occupied)
}

fn plug_in_mi(a: &[usize], b: &[usize], bins_a: usize, bins_b: usize) -> (f64, f64) {
    let n = a.len() as f64;
    let mut joint = vec![0usize; bins_a * bins_b];
    let mut ca = vec![0usize; bins_a];
    let mut cb = vec![0usize; bins_b];
    for (&i, &j) in a.iter().zip(b) {
        joint[i * bins_b + j] += 1;
        ca[i] += 1;
        cb[j] += 1;
    }
    let (ha, ma) = entropy_of_counts(&ca, n);
    let (hb, mb) = entropy_of_counts(&cb, n);
    let (hab, mab) = entropy_of_counts(&joint, n);
    (ha + hb - hab, (mab as f64 - ma as f64 - mb as f64 + 1.0) / (2.0 * n))
}

/// MI of two discrete label sequences with the Miller-Madow bias
/// correction, clipped at 0.
pub fn discrete_mi(a: &[usize], b: &[usize], bins_a: usize, bins_b: usize) -> f64 {
    let (plug_in, correction) = plug_in_mi(a, b, bins_a, bins_b);
    (plug_in - correction).max(0.0)
}

/// Shuffles used to estimate the plug-in bias under independence.
pub const NULL_SHUFFLES: usize = 8;
const NULL_SEED: u64 = 0x6e75_6c6c;

/// Histogram MI in nats over a `bins x bins` grid spanning each variable's
/// min-max range. The plug-in value has the mean plug-in MI of
/// `NULL_SHUFFLES` fixed-seed permutations of `b` subtracted, which keeps
/// the marginals and removes the finite-sample bias of a sparse grid.
pub fn histogram_mi(a: &[f64], b: &[f64], bins: usize) -> Result<MiEstimate> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("histogram_mi: lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 100 {
        return Err(Error::invalid(format!("histogram_mi needs at least 100 samples, got {}", a.len())));
    }
    if bins < 2 {
        return Err(Error::invalid("histogram_mi needs at least 2 bins"));
    }
    let (Some(ia), Some(mut ib)) = (bin_indices(a, bins), bin_indices(b, bins)) else {
        return Ok(MiEstimate { value: 0.0, degenerate: true });
    };
    let observed = plug_in_mi(&ia, &ib, bins, bins).0;
    let mut rng = stream(NULL_SEED, Stream::Aux(0));
    let mut null = 0.0;
    for _ in 0..NULL_SHUFFLES {
        ib.shuffle(&mut rng);
        null += plug_in_mi(&ia, &ib, bins, bins).0;
    }
    Ok(MiEstimate { value: (observed - null / NULL_SHUFFLES as f64).max(0.0), degenerate: false })
}

/// Between-dimension TC; for 1-D components this is their MI.
pub fn pair_tc(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(histogram_mi(a, b, PAIR_TC_BINS)?.value)
}

/// `(JB, p)` with `JB = n/6 (S^2 + C^2/4)` and the chi-square(2) tail
/// `p = exp(-JB/2)`.
pub fn jarque_bera(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in x {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    if m2 == 0.0 {
        return (f64::INFINITY, 0.0);
    }
    let skew = m3 / m2.powf(1.5);
    let kurt = m4 / (m2 * m2) - 3.0;
    let jb = n / 6.0 * (skew * skew + kurt * kurt / 4.0);
    (jb, (-jb / 2.0).exp())
}

fn two_columns(samples: &Tensor, op: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    if samples.cols() != 2 || samples.shape().len() != 2 {
        return Err(Error::Unsupported(format!("{op} needs rank-2 groups, got shape {:?}", samples.shape())));
    }
    Ok((samples.column(0), samples.column(1)))
}

fn covariance(samples: &Tensor) -> (Vec<f64>, DMatrix<f64>) {
    let (n, h) = (samples.rows(), samples.cols());
    let means: Vec<f64> = (0..h).map(|c| samples.column(c).iter().sum::<f64>() / n as f64).collect();
    let mut cov = DMatrix::zeros(h, h);
    for r in 0..n {
        let row = samples.row(r);
        for i in 0..h {
            for j in 0..=i {
                cov[(i, j)] += (row[i] - means[i]) * (row[j] - means[j]);
            }
        }
    }
    for i in 0..h {
        for j in 0..=i {
            let v = cov[(i, j)] / (n as f64 - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (means, cov)
}

/// Explained-variance ratios of the sample covariance, descending.
pub fn group_pca_evr(samples: &Tensor) -> Result<Vec<f64>> {
    if samples.rows() <= samples.cols() {
        return Err(Error::invalid("group_pca_evr needs more samples than dims"));
    }
    let (_, cov) = covariance(samples);
    let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|v| v.max(0.0)).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = eig.iter().sum();
    if total == 0.0 {
        return Err(Error::invalid("group_pca_evr: zero variance"));
    }
    Ok(eig.iter().map(|v| v / total).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinTc {
    pub value: f64,
    /// Rotation (radians) of the whitened sample achieving `value`.
    pub angle: f64,
    pub rank_deficient: bool,
}

/// Zero-mean, identity-covariance version of a 2-column sample via the
/// symmetric inverse square root; `None` if the covariance is singular.
pub fn whiten2(samples: &Tensor) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    let (a, b) = two_columns(samples, "whiten")?;
    let (means, cov) = covariance(samples);
    let eig = SymmetricEigen::new(Matrix2::new(cov[(0, 0)], cov[(0, 1)], cov[(1, 0)], cov[(1, 1)]));
    let (l0, l1) = (eig.eigenvalues[0], eig.eigenvalues[1]);
    if l0.min(l1) <= 1e-10 * l0.max(l1).max(f64::MIN_POSITIVE) {
        return Ok(None);
    }
    let v = eig.eigenvectors;
    let inv_sqrt = v * Matrix2::new(1.0 / l0.sqrt(), 0.0, 0.0, 1.0 / l1.sqrt()) * v.transpose();
    let (mut u, mut w) = (Vec::with_capacity(a.len()), Vec::with_capacity(a.len()));
    for (x, y) in a.iter().zip(&b) {
        let (x, y) = (x - means[0], y - means[1]);
        u.push(inv_sqrt[(0, 0)] * x + inv_sqrt[(0, 1)] * y);
        w.push(inv_sqrt[(1, 0)] * x + inv_sqrt[(1, 1)] * y);
    }
    Ok(Some((u, w)))
}

/// Minimum over linear transforms of the TC of a rank-2 group: whiten, then
/// scan rotations and keep the smallest histogram MI.
pub fn within_group_min_tc(samples: &Tensor) -> Result<MinTc> {
    within_group_min_tc_bins(samples, PAIR_TC_BINS)
}

pub fn within_group_min_tc_bins(samples: &Tensor, bins: usize) -> Result<MinTc> {
    let Some((u, w)) = whiten2(samples)? else {
        return Ok(MinTc { value: 0.0, angle: 0.0, rank_deficient: true });
    };
    let mut best = MinTc { value: f64::INFINITY, angle: 0.0, rank_deficient: false };
    let mut p = vec![0.0; u.len()];
    let mut q = vec![0.0; u.len()];
    for i in 0..SCAN_STEPS {
        let (s, c) = scan_angle(i).sin_cos();
        for k in 0..u.len() {
            p[k] = c * u[k] + s * w[k];
            q[k] = -s * u[k] + c * w[k];
        }
        let mi = histogram_mi(&p, &q, bins)?.value;
        if mi < best.value {
            best.value = mi;
            best.angle = scan_angle(i);
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalityScan {
    pub max_p: f64,
    /// Angle (radians, in `[0, pi)`) of the most Gaussian-looking projection.
    pub angle: f64,
}

/// Jarque-Bera p-value of the projection onto each scanned direction.
pub fn normality_scan(samples: &Tensor) -> Result<NormalityScan> {
    let (a, b) = two_columns(samples, "normality_scan")?;
    if a.len() < 100 {
        return Err(Error::invalid("normality_scan needs at least 100 samples"));
    }
    let mut best = NormalityScan { max_p: -1.0, angle: 0.0 };
    let mut proj = vec![0.0; a.len()];
    for i in 0..SCAN_STEPS {
        let (s, c) = scan_angle(i).sin_cos();
        for k in 0..a.len() {
            proj[k] = c * a[k] + s * b[k];
        }
        let (_, p) = jarque_bera(&proj);
        if p > best.max_p {
            best = NormalityScan { max_p: p, angle: scan_angle(i) };
        }
    }
    Ok(best)
}

/// OLS map from one estimated group onto one true group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    /// `(h_est, h_true)`.
    pub weights: Vec<Vec<f64>>,
    pub intercept: Vec<f64>,
}

impl AffineMap {
    pub fn apply(&self, est_row: &[f64]) -> Vec<f64> {
        let mut out = self.intercept.clone();
        for (x, w) in est_row.iter().zip(&self.weights) {
            for (o, wi) in out.iter_mut().zip(w) {
                *o += x * wi;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// `group_permutation[e]` is the true group matched to estimated group `e`.
    pub group_permutation: Vec<usize>,
    pub maps: Vec<AffineMap>,
    pub latent_r2: f64,
    /// R^2 of each true group (indexed by true group).
    pub group_r2: Vec<f64>,
    pub est_groups: Vec<Range<usize>>,
    pub true_groups: Vec<Range<usize>>,
}

impl AlignmentResult {
    /// Estimated latents mapped into true-latent coordinates.
    pub fn aligned(&self, est: &Tensor) -> Tensor {
        let k_true = self.true_groups.last().map_or(0, |g| g.end);
        let mut out = Tensor::zeros(&[est.rows(), k_true]);
        for r in 0..est.rows() {
            for (e, map) in self.maps.iter().enumerate() {
                let eg = &self.est_groups[e];
                let tg = &self.true_groups[self.group_permutation[e]];
                for (c, v) in tg.clone().zip(map.apply(&est.row(r)[eg.clone()])) {
                    out.set(r, c, v);
                }
            }
        }
        out
    }
}

fn column_ss(t: &Tensor, cols: Range<usize>) -> f64 {
    let n = t.rows() as f64;
    cols.map(|c| {
        let v = t.column(c);
        let mean = v.iter().sum::<f64>() / n;
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
    })
    .sum()
}

/// Least squares with intercept from `est[:, ecols]` to `truth[:, tcols]`;
/// returns the map and its residual sum of squares.
fn fit_affine(est: &Tensor, ecols: &[usize], truth: &Tensor, tcols: Range<usize>) -> (AffineMap, f64) {
    let n = est.rows();
    let (he, ht) = (ecols.len(), tcols.len());
    let x = DMatrix::from_fn(n, he, |r, c| est.get(r, ecols[c]));
    let y = DMatrix::from_fn(n, ht, |r, c| truth.get(r, tcols.start + c));
    let xm = x.row_mean();
    let ym = y.row_mean();
    let xc = DMatrix::from_fn(n, he, |r, c| x[(r, c)] - xm[c]);
    let yc = DMatrix::from_fn(n, ht, |r, c| y[(r, c)] - ym[c]);
    let svd = xc.clone().svd(true, true);
    let tol = svd.singular_values.max() * 1e-12 * n as f64;
    let beta = svd.solve(&yc, tol).unwrap_or_else(|_| DMatrix::zeros(he, ht));
    let resid = &yc - &xc * &beta;
    let ss = resid.iter().map(|v| v * v).sum();
    let intercept: Vec<f64> = (0..ht).map(|t| ym[t] - (0..he).map(|e| xm[e] * beta[(e, t)]).sum::<f64>()).collect();
    let weights = (0..he).map(|e| (0..ht).map(|t| beta[(e, t)]).collect()).collect();
    (AffineMap { weights, intercept }, ss)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Matches estimated groups to true groups by exhaustive permutation search
/// over per-pair affine least-squares fits, maximizing pooled R^2.
pub fn align_groups(
    est: &Tensor,
    truth: &Tensor,
    est_groups: &[Range<usize>],
    true_groups: &[Range<usize>],
) -> Result<AlignmentResult> {
    if est.rows() != truth.rows() {
        return Err(Error::invalid(format!("align_groups: {} vs {} rows", est.rows(), truth.rows())));
    }
    let g = est_groups.len();
    if g != true_groups.len() {
        return Err(Error::invalid(format!("align_groups: {g} estimated vs {} true groups", true_groups.len())));
    }
    if g > MAX_ALIGN_GROUPS {
        return Err(Error::invalid(format!("align_groups searches at most {MAX_ALIGN_GROUPS} groups, got {g}")));
    }
    let fits: Vec<Vec<(AffineMap, f64)>> = est_groups
        .iter()
        .map(|eg| {
            let cols: Vec<usize> = eg.clone().collect();
            true_groups.iter().map(|tg| fit_affine(est, &cols, truth, tg.clone())).collect()
        })
        .collect();
    let ss_tot: Vec<f64> = true_groups.iter().map(|tg| column_ss(truth, tg.clone())).collect();
    let total: f64 = ss_tot.iter().sum();
    if total == 0.0 {
        return Err(Error::invalid("align_groups: true latents have zero variance"));
    }
    let best = permutations(g)
        .into_iter()
        .map(|p| {
            let ss: f64 = p.iter().enumerate().map(|(e, &t)| fits[e][t].1).sum();
            (ss, p)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("at least one permutation");
    let (ss_res, perm) = best;
    let mut group_r2 = vec![0.0; g];
    for (e, &t) in perm.iter().enumerate() {
        group_r2[t] = 1.0 - fits[e][t].1 / ss_tot[t];
    }
    Ok(AlignmentResult {
        maps: perm.iter().enumerate().map(|(e, &t)| fits[e][t].0.clone()).collect(),
        group_permutation: perm,
        latent_r2: 1.0 - ss_res / total,
        group_r2,
        est_groups: est_groups.to_vec(),
        true_groups: true_groups.to_vec(),
    })
}

/// Pooled R^2 of an alignment recomputed from its maps.
pub fn pooled_r2(result: &AlignmentResult, est: &Tensor, truth: &Tensor) -> f64 {
    let pred = result.aligned(est);
    let cols = 0..truth.cols();
    let ss_res: f64 = truth.data().iter().zip(pred.data()).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - ss_res / column_ss(truth, cols)
}

/// All ways to split `0..k` into blocks of size `h`, each block ascending
/// and blocks ordered by their first element.
pub fn equal_partitions(k: usize, h: usize) -> Vec<Vec<Vec<usize>>> {
    fn rec(free: Vec<usize>, h: usize, acc: &mut Vec<Vec<usize>>, out: &mut Vec<Vec<Vec<usize>>>) {
        if free.is_empty() {
            out.push(acc.clone());
            return;
        }
        let first = free[0];
        let rest = &free[1..];
        for combo in combinations(rest, h - 1) {
            let mut block = vec![first];
            block.extend(&combo);
            let remaining: Vec<usize> = rest.iter().copied().filter(|x| !combo.contains(x)).collect();
            acc.push(block);
            rec(remaining, h, acc, out);
            acc.pop();
        }
    }
    fn combinations(items: &[usize], r: usize) -> Vec<Vec<usize>> {
        if r == 0 {
            return vec![vec![]];
        }
        if items.len() < r {
            return vec![];
        }
        let mut out: Vec<Vec<usize>> =
            combinations(&items[1..], r - 1).into_iter().map(|mut c| {
                c.insert(0, items[0]);
                c
            }).collect();
        out.extend(combinations(&items[1..], r));
        out
    }
    let mut out = Vec::new();
    if h > 0 && k % h == 0 {
        rec((0..k).collect(), h, &mut Vec::new(), &mut out);
    }
    out
}

/// Alignment after regrouping the estimated dims: tries every split of the
/// `k` dims into `true_groups.len()` equal blocks and keeps the best pooled
/// R^2. Returns the alignment (on reordered columns) and the column order.
pub fn align_best_partition(
    est: &Tensor,
    truth: &Tensor,
    true_groups: &[Range<usize>],
) -> Result<(AlignmentResult, Vec<usize>)> {
    let (k, g) = (est.cols(), true_groups.len());
    if g == 0 || k % g != 0 {
        return Err(Error::invalid(format!("cannot split {k} dims into {g} equal groups")));
    }
    let h = k / g;
    let est_groups: Vec<Range<usize>> = (0..g).map(|i| i * h..(i + 1) * h).collect();
    let mut best: Option<(AlignmentResult, Vec<usize>)> = None;
    for partition in equal_partitions(k, h) {
        let order: Vec<usize> = partition.concat();
        let mut data = Vec::with_capacity(est.len());
        for r in 0..est.rows() {
            let row = est.row(r);
            data.extend(order.iter().map(|&c| row[c]));
        }
        let reordered = Tensor::matrix(est.rows(), k, data)?;
        let res = align_groups(&reordered, truth, &est_groups, true_groups)?;
        if best.as_ref().is_none_or(|b| res.latent_r2 > b.0.latent_r2) {
            best = Some((res, order));
        }
    }
    best.ok_or_else(|| Error::invalid("no partition evaluated"))
}

/// Column `i` of `t` z-scored.
pub fn standardize(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    crate::datagen::standardize_columns(&mut out);
    out
}

/// FULL-estimator PC of a dataset's posteriors, one draw per sample.
pub fn pc_of_latents(moments: &GaussianMoments, groups: &GroupStructure, rng: &mut Rng) -> Result<f64> {
    if groups.g() == 1 {
        return Ok(0.0);
    }
    let eps = standard_normal(rng, moments.mean.shape());
    let z = reparameterize(moments, &eps)?;
    pc_estimate(&z, moments, groups, EstimatorKind::Full, moments.mean.rows())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupDiagnostics {
    pub group: usize,
    pub dims: Vec<usize>,
    /// `None` for groups that are not rank 2.
    pub min_within_tc: Option<f64>,
    pub min_tc_angle: Option<f64>,
    pub rank_deficient: bool,
    pub pca_evr: Vec<f64>,
    pub normality_max_p: Option<f64>,
    pub normality_angle: Option<f64>,
}

pub fn group_diagnostics(latents: &Tensor, groups: &[Range<usize>]) -> Result<Vec<GroupDiagnostics>> {
    groups
        .iter()
        .enumerate()
        .map(|(gi, g)| {
            let samples = latents.columns(g.start, g.end);
            let pca_evr = if g.len() == 1 { vec![1.0] } else { group_pca_evr(&samples)? };
            let (tc, scan) = if g.len() == 2 {
                (Some(within_group_min_tc(&samples)?), Some(normality_scan(&samples)?))
            } else {
                (None, None)
            };
            Ok(GroupDiagnostics {
                group: gi,
                dims: g.clone().collect(),
                min_within_tc: tc.map(|t| t.value),
                min_tc_angle: tc.map(|t| t.angle),
                rank_deficient: tc.is_some_and(|t| t.rank_deficient),
                pca_evr,
                normality_max_p: scan.map(|s| s.max_p),
                normality_angle: scan.map(|s| s.angle),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTc {
    pub dim_a: usize,
    pub dim_b: usize,
    pub value: f64,
}

/// Pair TC for every two dims that sit in different groups.
pub fn pair_tc_matrix(latents: &Tensor, groups: &[Range<usize>]) -> Result<Vec<PairTc>> {
    let group_of = |d: usize| groups.iter().position(|g| g.contains(&d));
    let k = latents.cols();
    let mut out = Vec::new();
    for a in 0..k {
        for b in a + 1..k {
            if group_of(a) != group_of(b) {
                out.push(PairTc { dim_a: a, dim_b: b, value: pair_tc(&latents.column(a), &latents.column(b))? });
            }
        }
    }
    Ok(out)
}

/// Factor column as labels: its distinct values if there are at most
/// `bins` of them, else equal-width bins.
fn factor_labels(f: &[f64], bins: usize) -> (Vec<usize>, usize) {
    let mut distinct: Vec<f64> = f.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() <= bins {
        let labels = f.iter().map(|v| distinct.partition_point(|d| d < v)).collect();
        (labels, distinct.len())
    } else {
        (bin_indices(f, bins).expect("non-constant"), bins)
    }
}

fn labels_entropy(labels: &[usize], k: usize) -> f64 {
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    entropy_of_counts(&counts, labels.len() as f64).0
}

fn projection_mi(labels: &[usize], k: usize, projection: &[f64]) -> f64 {
    match bin_indices(projection, MIG_BINS) {
        Some(p) => discrete_mi(labels, &p, k, MIG_BINS),
        None => 0.0,
    }
}

/// MI between a discretized factor and a latent group: the dim itself for
/// rank 1, else the best of the scanned 1-D projections.
fn group_factor_mi(latents: &Tensor, group: &Range<usize>, labels: &[usize], k: usize) -> f64 {
    match group.len() {
        1 => projection_mi(labels, k, &latents.column(group.start)),
        2 => {
            let (a, b) = (latents.column(group.start), latents.column(group.start + 1));
            let mut proj = vec![0.0; a.len()];
            (0..SCAN_STEPS)
                .map(|i| {
                    let (s, c) = scan_angle(i).sin_cos();
                    for j in 0..a.len() {
                        proj[j] = c * a[j] + s * b[j];
                    }
                    projection_mi(labels, k, &proj)
                })
                .fold(0.0, f64::max)
        }
        _ => group.clone().map(|d| projection_mi(labels, k, &latents.column(d))).fold(0.0, f64::max),
    }
}

/// Adapted mutual information gap over latent groups.
pub fn mig_grouped(latents: &Tensor, factors: &Tensor, est_groups: &[Range<usize>]) -> Result<f64> {
    if est_groups.len() < 2 {
        return Err(Error::invalid("mig_grouped needs at least two groups"));
    }
    if latents.rows() != factors.rows() {
        return Err(Error::invalid("mig_grouped: latents and factors differ in length"));
    }
    let mut gaps = Vec::new();
    for f in 0..factors.cols() {
        let col = factors.column(f);
        if col.iter().all(|&v| v == col[0]) {
            continue;
        }
        let (labels, k) = factor_labels(&col, MIG_BINS);
        let h = labels_entropy(&labels, k);
        let mut mis: Vec<f64> = est_groups.iter().map(|g| group_factor_mi(latents, g, &labels, k)).collect();
        mis.sort_by(|a, b| b.total_cmp(a));
        gaps.push(((mis[0] - mis[1]) / h).clamp(0.0, 1.0));
    }
    if gaps.is_empty() {
        return Err(Error::invalid("mig_grouped: all factors are constant"));
    }
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use rand::Rng as _;

    fn uniform(rng: &mut Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn gaussian_pair(seed: u64, n: usize, rho: f64) -> (Vec<f64>, Vec<f64>) {
        let t = standard_normal(&mut stream(seed, Stream::Aux(0)), &[n, 2]);
        let a = t.column(0);
        let b = t.column(1).iter().zip(&a).map(|(v, u)| rho * u + (1.0 - rho * rho).sqrt() * v).collect();
        (a, b)
    }

    fn from_columns(cols: &[Vec<f64>]) -> Tensor {
        let n = cols[0].len();
        let data = (0..n).flat_map(|r| cols.iter().map(move |c| c[r])).collect();
        Tensor::matrix(n, cols.len(), data).unwrap()
    }

    #[test]
    fn reconstruction_r2_cases() {
        let x = standard_normal(&mut stream(1, Stream::Aux(0)), &[2000, 4]);
        assert_eq!(reconstruction_r2(&x, &x).unwrap(), 1.0);
        let mut means = x.clone();
        for c in 0..4 {
            let m = x.column(c).iter().sum::<f64>() / 2000.0;
            for r in 0..2000 {
                means.set(r, c, m);
            }
        }
        assert!(reconstruction_r2(&x, &means).unwrap().abs() < 1e-12);
        let noise = standard_normal(&mut stream(2, Stream::Aux(0)), &[2000, 4]);
        let noisy = Tensor::new(vec![2000, 4], x.data().iter().zip(noise.data()).map(|(a, e)| a + 0.3 * e).collect())
            .unwrap();
        let r2 = reconstruction_r2(&x, &noisy).unwrap();
        assert!((r2 - 0.91).abs() < 0.02, "{r2}");
        assert!(reconstruction_r2(&Tensor::zeros(&[5, 2]), &Tensor::zeros(&[5, 2])).is_err());
    }

    #[test]
    fn histogram_mi_examples() {
        let mut rng = stream(3, Stream::Aux(0));
        let (a, b) = (uniform(&mut rng, 10_000), uniform(&mut rng, 10_000));
        assert!(histogram_mi(&a, &b, 30).unwrap().value < 0.03);
        let same = histogram_mi(&a, &a, 30).unwrap().value;
        assert!((same - 30f64.ln()).abs() < 0.05, "{same}");
        let (g1, g2) = gaussian_pair(4, 100_000, 0.8);
        let mi = histogram_mi(&g1, &g2, 30).unwrap().value;
        assert!((mi - 0.5108).abs() < 0.07, "{mi}");
        assert!(pair_tc(&g1, &g2).unwrap() == mi);
        let constant = vec![1.0; 200];
        let d = histogram_mi(&constant, &a[..200], 30).unwrap();
        assert!(d.degenerate && d.value == 0.0);
        assert!(histogram_mi(&a[..50], &b[..50], 10).is_err());
    }

    #[test]
    fn jarque_bera_calibration() {
        let g = standard_normal(&mut stream(5, Stream::Aux(0)), &[10_000, 1]).into_data();
        let (_, p) = jarque_bera(&g);
        assert!(p > 0.001);
        let u = uniform(&mut stream(5, Stream::Aux(1)), 10_000);
        assert!(jarque_bera(&u).1 < 1e-10);
    }

    #[test]
    fn pca_examples() {
        let iso = standard_normal(&mut stream(6, Stream::Aux(0)), &[5000, 2]);
        let evr = group_pca_evr(&iso).unwrap();
        assert!((evr[0] - 0.5).abs() < 0.05 && (evr[1] - 0.5).abs() < 0.05);
        let a = uniform(&mut stream(6, Stream::Aux(1)), 500);
        let line = from_columns(&[a.clone(), a.iter().map(|v| 2.0 * v).collect()]);
        let evr = group_pca_evr(&line).unwrap();
        assert!((evr[0] - 1.0).abs() < 1e-12 && evr[1].abs() < 1e-12);
        let scaled = from_columns(&[iso.column(0).iter().map(|v| 2.0 * v).collect(), iso.column(1)]);
        let evr = group_pca_evr(&scaled).unwrap();
        assert!((evr[0] - 0.8).abs() < 0.03, "{evr:?}");
        let sum: f64 = evr.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn min_tc_of_independent_and_rotated_uniforms() {
        let mut rng = stream(7, Stream::Aux(0));
        let (a, b) = (uniform(&mut rng, 20_000), uniform(&mut rng, 20_000));
        let res = within_group_min_tc(&from_columns(&[a.clone(), b.clone()])).unwrap();
        assert!(res.value < 0.03);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let ra: Vec<f64> = a.iter().zip(&b).map(|(x, y)| s * (x - y)).collect();
        let rb: Vec<f64> = a.iter().zip(&b).map(|(x, y)| s * (x + y)).collect();
        let res = within_group_min_tc(&from_columns(&[ra, rb])).unwrap();
        assert!(res.value < 0.03, "{}", res.value);
        let step = PI / SCAN_STEPS as f64;
        let off = (res.angle - PI / 4.0).rem_euclid(PI / 2.0);
        let dist = off.min(PI / 2.0 - off);
        assert!(dist <= step + 1e-12, "angle {} ({} steps off)", res.angle, dist / step);
    }

    #[test]
    fn min_tc_of_annulus_stays_positive() {
        let mut p = crate::datagen::pair_annulus(&mut stream(8, Stream::Aux(0)), 2000);
        crate::datagen::standardize_columns(&mut p);
        let res = within_group_min_tc(&p).unwrap();
        assert!(res.value > 0.1, "{}", res.value);
    }

    #[test]
    fn min_tc_flags_rank_deficiency() {
        let a = uniform(&mut stream(9, Stream::Aux(0)), 600);
        let res = within_group_min_tc(&from_columns(&[a.clone(), a.iter().map(|v| -3.0 * v).collect()])).unwrap();
        assert!(res.rank_deficient && res.value == 0.0);
        assert!(within_group_min_tc(&Tensor::zeros(&[600, 3])).is_err());
    }

    #[test]
    fn min_tc_invariant_to_prerotation_and_scaling() {
        let mut p = crate::datagen::pair_cross(&mut stream(10, Stream::Aux(0)), 4000);
        crate::datagen::standardize_columns(&mut p);
        let base = within_group_min_tc(&p).unwrap().value;
        let (s, c) = 0.6f64.sin_cos();
        let mut q = Tensor::zeros(&[4000, 2]);
        for r in 0..4000 {
            let (x, y) = (p.get(r, 0), p.get(r, 1));
            q.set(r, 0, 3.0 * (c * x - s * y));
            q.set(r, 1, 0.5 * (s * x + c * y));
        }
        let moved = within_group_min_tc(&q).unwrap().value;
        assert!((base - moved).abs() < 0.02 + 0.01, "{base} vs {moved}");
    }

    #[test]
    fn normality_scan_examples() {
        let g = standard_normal(&mut stream(11, Stream::Aux(0)), &[10_000, 2]);
        assert!(normality_scan(&g).unwrap().max_p > 0.05);
        let mut rng = stream(11, Stream::Aux(1));
        let u = from_columns(&[uniform(&mut rng, 10_000), uniform(&mut rng, 10_000)]);
        assert!(normality_scan(&u).unwrap().max_p < 0.01);
        // a wide uniform next to a standard Gaussian axis
        let mixed = from_columns(&[g.column(0), uniform(&mut rng, 10_000).iter().map(|v| 5.0 * v).collect()]);
        let scan = normality_scan(&mixed).unwrap();
        let off = scan.angle.min(PI - scan.angle);
        assert!(off <= 10f64.to_radians(), "{}", scan.angle.to_degrees());
    }

    #[test]
    fn normality_scan_rotation_invariance() {
        let mut rng = stream(12, Stream::Aux(0));
        let g = standard_normal(&mut rng, &[5000, 1]).into_data();
        let u: Vec<f64> = uniform(&mut rng, 5000).iter().map(|v| 4.0 * v).collect();
        let base = normality_scan(&from_columns(&[g.clone(), u.clone()])).unwrap();
        // rotate by exactly ten scan steps
        let (s, c) = scan_angle(10).sin_cos();
        let a: Vec<f64> = g.iter().zip(&u).map(|(x, y)| c * x - s * y).collect();
        let b: Vec<f64> = g.iter().zip(&u).map(|(x, y)| s * x + c * y).collect();
        let rotated = normality_scan(&from_columns(&[a, b])).unwrap();
        assert!((base.max_p - rotated.max_p).abs() < 1e-6, "{} vs {}", base.max_p, rotated.max_p);
    }

    fn groupwise_truth() -> Tensor {
        crate::datagen::gen_groupwise(0).unwrap().true_latents.unwrap()
    }

    #[test]
    fn alignment_identity_and_noise() {
        let z = groupwise_truth();
        let groups = vec![0..2, 2..4, 4..6];
        let res = align_groups(&z, &z, &groups, &groups).unwrap();
        assert_eq!(res.group_permutation, vec![0, 1, 2]);
        assert!((res.latent_r2 - 1.0).abs() < 1e-12);
        let noise = standard_normal(&mut stream(13, Stream::Aux(0)), &[2000, 6]);
        let res = align_groups(&noise, &z, &groups, &groups).unwrap();
        assert!(res.latent_r2 <= 0.05, "{}", res.latent_r2);
    }

    #[test]
    fn alignment_recovers_swapped_mixed_groups() {
        let z = groupwise_truth();
        let mut rng = stream(14, Stream::Aux(0));
        let order = [2usize, 0, 1];
        let mut est = Tensor::zeros(&[2000, 6]);
        for (e, &t) in order.iter().enumerate() {
            let m: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            for r in 0..2000 {
                let (x, y) = (z.get(r, 2 * t), z.get(r, 2 * t + 1));
                est.set(r, 2 * e, m[0] * x + m[1] * y + 0.3);
                est.set(r, 2 * e + 1, m[2] * x + m[3] * y - 1.0);
            }
        }
        let groups = vec![0..2, 2..4, 4..6];
        let res = align_groups(&est, &z, &groups, &groups).unwrap();
        assert_eq!(res.group_permutation, vec![2, 0, 1]);
        assert!(res.latent_r2 > 0.999);
        assert!((pooled_r2(&res, &est, &z) - res.latent_r2).abs() < 1e-10);
    }

    #[test]
    fn alignment_invariant_to_within_group_affine_maps() {
        let z = groupwise_truth();
        let noise = standard_normal(&mut stream(15, Stream::Aux(0)), &[2000, 6]);
        let est = Tensor::new(vec![2000, 6], z.data().iter().zip(noise.data()).map(|(a, e)| a + 0.7 * e).collect())
            .unwrap();
        let groups = vec![0..2, 2..4, 4..6];
        let base = align_groups(&est, &z, &groups, &groups).unwrap().latent_r2;
        let mut moved = est.clone();
        for r in 0..2000 {
            let (x, y) = (est.get(r, 2), est.get(r, 3));
            moved.set(r, 2, 2.0 * x - 0.5 * y + 4.0);
            moved.set(r, 3, 0.3 * x + 1.5 * y - 2.0);
        }
        let after = align_groups(&moved, &z, &groups, &groups).unwrap().latent_r2;
        assert!((base - after).abs() < 1e-8);
        assert!(align_groups(&est, &z, &vec![0..1; 9], &vec![0..1; 9]).is_err());
    }

    #[test]
    fn partition_search_finds_scrambled_pairs() {
        assert_eq!(equal_partitions(6, 2).len(), 15);
        assert_eq!(equal_partitions(4, 2).len(), 3);
        assert_eq!(equal_partitions(6, 3).len(), 10);
        let z = groupwise_truth();
        let perm = [3usize, 0, 5, 2, 1, 4];
        let mut est = Tensor::zeros(&[2000, 6]);
        for r in 0..2000 {
            for (c, &p) in perm.iter().enumerate() {
                est.set(r, c, z.get(r, p));
            }
        }
        let (res, _) = align_best_partition(&est, &z, &[0..2, 2..4, 4..6]).unwrap();
        assert!(res.latent_r2 > 1.0 - 1e-10);
    }

    #[test]
    fn pc_of_latents_examples() {
        let n = 2000;
        let mean = standard_normal(&mut stream(16, Stream::Aux(0)), &[n, 4]);
        let moments = GaussianMoments { mean, logvar: Tensor::zeros(&[n, 4]) };
        let g1 = GroupStructure::new(4, 1).unwrap();
        assert_eq!(pc_of_latents(&moments, &g1, &mut stream(0, Stream::Eval)).unwrap(), 0.0);
        let g2 = GroupStructure::new(4, 2).unwrap();
        let pc = pc_of_latents(&moments, &g2, &mut stream(0, Stream::Eval)).unwrap();
        assert!(pc.abs() < 0.05, "{pc}");
        // swapping the two groups' columns leaves the value unchanged
        let swap = |t: &Tensor| {
            let mut out = t.clone();
            for r in 0..n {
                for c in 0..4 {
                    out.set(r, c, t.get(r, (c + 2) % 4));
                }
            }
            out
        };
        let swapped = GaussianMoments { mean: swap(&moments.mean), logvar: swap(&moments.logvar) };
        let eps = standard_normal(&mut stream(1, Stream::Eval), &[n, 4]);
        let z = reparameterize(&moments, &eps).unwrap();
        let a = pc_estimate(&z, &moments, &g2, EstimatorKind::Full, n).unwrap();
        let b = pc_estimate(&swap(&z), &swapped, &g2, EstimatorKind::Full, n).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn mig_examples() {
        let n = 2000;
        let mut rng = stream(17, Stream::Aux(0));
        let factors = from_columns(&[
            (0..n).map(|_| rng.random_range(0..5) as f64).collect(),
            uniform(&mut rng, n),
        ]);
        let noise = standard_normal(&mut stream(17, Stream::Aux(1)), &[n, 4]);
        let groups = vec![0..2, 2..4];
        let code = from_columns(&[
            factors.column(0).iter().zip(noise.column(0)).map(|(f, e)| f + 1e-3 * e).collect(),
            noise.column(1),
            factors.column(1).iter().zip(noise.column(2)).map(|(f, e)| f + 1e-4 * e).collect(),
            noise.column(3),
        ]);
        let good = mig_grouped(&code, &factors, &groups).unwrap();
        assert!(good > 0.9, "{good}");
        let none = mig_grouped(&noise, &factors, &groups).unwrap();
        assert!(none < 0.05, "{none}");
        let dup = from_columns(&[code.column(0), code.column(2), code.column(0), code.column(2)]);
        let tie = mig_grouped(&dup, &factors, &groups).unwrap();
        assert!(tie < 1e-12, "{tie}");
        assert!(mig_grouped(&code, &factors, &[0..4]).is_err());
    }
}
