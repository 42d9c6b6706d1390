//! One-axis sweeps over a base config, aggregated into a CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pdisvae_core::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{normalize, ExperimentConfig, RawConfig};
use crate::eval::MetricsReport;
use crate::train::run_training;

pub const SWEEP_FILE: &str = "sweep.csv";

/// Metric columns of the aggregated CSV, in order.
pub const SWEEP_METRICS: [&str; 11] = [
    "recon_r2",
    "rmse",
    "latent_r2",
    "pc",
    "pc_model",
    "min_within_tc_min",
    "pair_tc_max",
    "normality_max_p_min",
    "mig",
    "triangle_mass",
    "mse",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Beta,
    Groups,
    Seed,
    Model,
}

impl Axis {
    pub fn parse(s: &str) -> Result<Axis> {
        match s {
            "beta" => Ok(Axis::Beta),
            "groups" | "g" => Ok(Axis::Groups),
            "seed" => Ok(Axis::Seed),
            "model" => Ok(Axis::Model),
            other => Err(Error::Config(format!("unknown sweep axis {other:?} (beta, groups, seed, model)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Beta => "beta",
            Axis::Groups => "groups",
            Axis::Seed => "seed",
            Axis::Model => "model",
        }
    }
}

/// A sweep recipe file: an axis, its values and a base config table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<toml::Value>,
    #[serde(default)]
    pub base: RawConfig,
}

impl SweepSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Parses `a,b,c` into values of the axis' type.
    pub fn values_from_list(axis: Axis, list: &str) -> Result<Vec<toml::Value>> {
        list.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                let bad = || Error::Config(format!("bad {} value {s:?}", axis.name()));
                Ok(match axis {
                    Axis::Beta => toml::Value::Float(s.parse().map_err(|_| bad())?),
                    Axis::Groups | Axis::Seed => toml::Value::Integer(s.parse().map_err(|_| bad())?),
                    Axis::Model => toml::Value::String(s.to_string()),
                })
            })
            .collect()
    }
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn apply(base: &RawConfig, axis: Axis, value: &toml::Value, root: &Path) -> Result<ExperimentConfig> {
    let mut raw = base.clone();
    let bad = || Error::Config(format!("value {value} does not fit axis {}", axis.name()));
    let as_uint = || value.as_integer().filter(|&i| i >= 0).ok_or_else(bad);
    match axis {
        Axis::Beta => raw.beta = Some(value.as_float().or_else(|| value.as_integer().map(|i| i as f64)).ok_or_else(bad)?),
        Axis::Groups => raw.groups = Some(as_uint()? as usize),
        Axis::Seed => raw.seed = Some(as_uint()? as u64),
        Axis::Model => raw.model = Some(value.as_str().ok_or_else(bad)?.to_string()),
    }
    raw.out = Some(root.join(format!("{}-{}", axis.name(), value_label(value))));
    normalize(raw)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub axis: Axis,
    pub value: String,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub outcome: std::result::Result<MetricsReport, String>,
}

/// Runs every point of the sweep; failures are kept per row.
pub fn run_sweep(spec: &SweepSpec, root: &Path) -> Result<Vec<SweepRow>> {
    if spec.values.is_empty() {
        return Err(Error::Config("sweep axis has no values".into()));
    }
    fs::create_dir_all(root)?;
    let rows: Vec<SweepRow> = spec
        .values
        .par_iter()
        .map(|v| {
            let label = value_label(v);
            match apply(&spec.base, spec.axis, v, root) {
                Ok(cfg) => {
                    let outcome = run_training(&cfg)
                        .and_then(|art| crate::eval::read_metrics(&art.dir))
                        .map_err(|e| e.to_string());
                    SweepRow { axis: spec.axis, value: label, seed: Some(cfg.seed), out: cfg.out, outcome }
                }
                Err(e) => SweepRow {
                    axis: spec.axis,
                    value: label,
                    seed: None,
                    out: root.to_path_buf(),
                    outcome: Err(e.to_string()),
                },
            }
        })
        .collect();
    fs::write(root.join(SWEEP_FILE), sweep_csv(&rows))?;
    Ok(rows)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("axis,value,seed,status");
    for m in SWEEP_METRICS {
        s.push(',');
        s.push_str(m);
    }
    s.push('\n');
    for r in rows {
        let seed = r.seed.map(|v| v.to_string()).unwrap_or_default();
        let status = match &r.outcome {
            Ok(_) => "ok".to_string(),
            Err(e) => format!("error: {e}"),
        };
        write!(s, "{},{},{},{}", r.axis.name(), csv_field(&r.value), seed, csv_field(&status)).expect("string write");
        for m in SWEEP_METRICS {
            let v = r.outcome.as_ref().ok().and_then(|rep| rep.get(m));
            s.push(',');
            if let Some(v) = v {
                s.push_str(&v.to_string());
            }
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> RawConfig {
        RawConfig {
            dataset: Some("groupwise".into()),
            epochs: Some(2),
            batch_size: Some(500),
            ..Default::default()
        }
    }

    #[test]
    fn seed_axis_rows_echo_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SweepSpec {
            axis: Axis::Seed,
            values: SweepSpec::values_from_list(Axis::Seed, "0,1,2,3,4").unwrap(),
            base: base(),
        };
        let rows = run_sweep(&spec, dir.path()).unwrap();
        assert_eq!(rows.len(), 5);
        let seeds: Vec<u64> = rows.iter().map(|r| r.seed.unwrap()).collect();
        assert_eq!(seeds, vec![0, 1, 2, 3, 4]);
        let csv = fs::read_to_string(dir.path().join(SWEEP_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.lines().skip(1).all(|l| l.split(',').nth(3) == Some("ok")));
    }

    #[test]
    fn failing_point_is_recorded_and_sweep_continues() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SweepSpec {
            axis: Axis::Groups,
            values: SweepSpec::values_from_list(Axis::Groups, "3,4").unwrap(),
            base: base(),
        };
        let rows = run_sweep(&spec, dir.path()).unwrap();
        assert!(rows[0].outcome.is_ok());
        assert!(rows[1].outcome.as_ref().unwrap_err().contains("G=4"));
        let csv = sweep_csv(&rows);
        assert!(csv.lines().nth(2).unwrap().contains("error:"));
    }

    #[test]
    fn empty_axis_rejected() {
        let spec = SweepSpec { axis: Axis::Beta, values: vec![], base: base() };
        assert!(run_sweep(&spec, Path::new("/nonexistent")).is_err());
        assert!(Axis::parse("lr").is_err());
    }
}
