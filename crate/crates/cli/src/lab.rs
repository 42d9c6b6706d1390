//! Estimator lab and the XOR demonstration.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use pdisvae_core::datagen::xor_table;
use pdisvae_core::estlab::{analytic_row, empirical_estimator_eval, toy_posteriors, AnalyticRow, EstimatorReport};
use pdisvae_core::nn::GaussianMoments;
use pdisvae_core::objective::{ratio_to_f64, Rational};
use pdisvae_core::rng::{stream, Stream};
use pdisvae_core::Result;
use serde::Serialize;

pub const ANALYTIC_PAIRS: [(usize, usize); 3] = [(10, 3), (100, 7), (2000, 128)];
pub const EMPIRICAL_FILE: &str = "estimator_report.csv";
pub const ANALYTIC_FILE: &str = "analytic.csv";
pub const TOY_FILE: &str = "estlab_toy.json";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabConfig {
    pub n: usize,
    pub m: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for LabConfig {
    fn default() -> Self {
        LabConfig { n: 10, m: 3, repeats: 1000, seed: 0 }
    }
}

#[derive(Serialize)]
struct ToyRecord<'a> {
    config: &'a LabConfig,
    means: Vec<Vec<f64>>,
    logvars: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabOutput {
    pub toy: GaussianMoments,
    pub report: EstimatorReport,
    pub analytic: Vec<AnalyticRow>,
}

/// Toy posteriors come from the seed's data stream, batches from its
/// estimator-lab stream.
pub fn run_lab(cfg: &LabConfig) -> Result<LabOutput> {
    let toy = toy_posteriors(&mut stream(cfg.seed, Stream::Data), cfg.n);
    let report = empirical_estimator_eval(&toy, cfg.m, cfg.repeats, &mut stream(cfg.seed, Stream::Estlab))?;
    let mut pairs = ANALYTIC_PAIRS.to_vec();
    if !pairs.contains(&(cfg.n, cfg.m)) {
        pairs.insert(0, (cfg.n, cfg.m));
    }
    let analytic = pairs.into_iter().map(|(n, m)| analytic_row(n, m)).collect::<Result<_>>()?;
    Ok(LabOutput { toy, report, analytic })
}

fn rational(r: &Rational) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

pub fn analytic_csv(rows: &[AnalyticRow]) -> String {
    let mut s = String::from("n,m,mean,var_is,var_mss,var_diff,var_diff_f64\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{:e}",
            r.n,
            r.m,
            rational(&r.mean),
            rational(&r.var_is),
            rational(&r.var_mss),
            rational(&r.var_diff),
            ratio_to_f64(&r.var_diff)
        )
        .expect("string write");
    }
    s
}

/// Runs the lab and writes the empirical CSV, analytic CSV and toy JSON.
pub fn run_estlab(cfg: &LabConfig, out: &Path) -> Result<LabOutput> {
    let res = run_lab(cfg)?;
    fs::create_dir_all(out)?;
    let mut csv = Vec::new();
    res.report.write_csv(&mut csv)?;
    fs::write(out.join(EMPIRICAL_FILE), csv)?;
    fs::write(out.join(ANALYTIC_FILE), analytic_csv(&res.analytic))?;
    let rows = |t: &pdisvae_core::Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
    let toy = ToyRecord { config: cfg, means: rows(&res.toy.mean), logvars: rows(&res.toy.logvar) };
    fs::write(out.join(TOY_FILE), serde_json::to_string_pretty(&toy)? + "\n")?;
    Ok(res)
}

/// Exact mutual informations of the XOR table, as printable lines.
pub fn xor_demo() -> Vec<(String, f64)> {
    let t = xor_table();
    vec![
        ("I(z1; z3)".to_string(), t.mutual_information(&[0], &[2])),
        ("I(z2; z3)".to_string(), t.mutual_information(&[1], &[2])),
        ("I(z1; z2)".to_string(), t.mutual_information(&[0], &[1])),
        ("I((z1, z2); z3)".to_string(), t.mutual_information(&[0, 1], &[2])),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_table_rows() {
        let res = run_lab(&LabConfig { repeats: 10, ..Default::default() }).unwrap();
        let first = &res.analytic[0];
        assert_eq!((first.n, first.m), (10, 3));
        assert_eq!(first.var_is, Rational::new(49, 18));
        for r in &res.analytic {
            let m = r.m as i128;
            assert_eq!(r.var_diff, Rational::new(m - 2, m * (m - 1)));
        }
        assert!(analytic_csv(&res.analytic).contains("10,3,10/3,49/18,26/9,1/6,"));
    }

    #[test]
    fn xor_values() {
        let v = xor_demo();
        assert!(v[0].1.abs() < 1e-12 && v[1].1.abs() < 1e-12 && v[2].1.abs() < 1e-12);
        assert!((v[3].1 - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn writes_three_files() {
        let dir = tempfile::tempdir().unwrap();
        run_estlab(&LabConfig { repeats: 20, ..Default::default() }, dir.path()).unwrap();
        for f in [EMPIRICAL_FILE, ANALYTIC_FILE, TOY_FILE] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
    }
}
