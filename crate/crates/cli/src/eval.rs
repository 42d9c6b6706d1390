//! Deterministic evaluation of a trained run into `metrics.json`.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use pdisvae_core::datagen::{point_in_triangle, DatasetBundle};
use pdisvae_core::metrics::{
    align_best_partition, align_groups, group_diagnostics, mig_grouped, pair_tc_matrix, pc_of_latents,
    reconstruction_r2, rmse, standardize, AlignmentResult, GroupDiagnostics, PairTc, MIG_VERSION,
};
use pdisvae_core::nn::{decode, encode, load_checkpoint, GaussianMoments};
use pdisvae_core::objective::GroupStructure;
use pdisvae_core::rng::{stream, Stream};
use pdisvae_core::{Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::train::{load_dataset, read_meta, RunArtifacts, CHECKPOINT_STEM, METRICS_FILE};

pub const METRICS_SCHEMA: &str = "pdisvae-metrics/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSummary {
    /// Estimated dims in evaluation order; eval group `i` is the `i`-th run
    /// of `h` dims.
    pub dim_order: Vec<usize>,
    pub group_size: usize,
    /// True group matched to each eval group.
    pub group_permutation: Vec<usize>,
    pub group_r2: Vec<f64>,
    /// Whether the model's own grouping was used (otherwise searched).
    pub model_groups: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub mig_version: String,
    /// Flat name -> value map of every scalar metric.
    pub metrics: BTreeMap<String, f64>,
    pub alignment: Option<AlignmentSummary>,
    pub groups: Vec<GroupDiagnostics>,
    pub pair_tc: Vec<PairTc>,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

fn reorder_columns(t: &Tensor, order: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(t.len());
    for r in 0..t.rows() {
        let row = t.row(r);
        data.extend(order.iter().map(|&c| row[c]));
    }
    Tensor::matrix(t.rows(), order.len(), data).expect("sized")
}

fn contiguous_groups(k: usize, g: usize) -> Vec<Range<usize>> {
    let h = k / g;
    (0..g).map(|i| i * h..(i + 1) * h).collect()
}

/// Share of aligned location codes falling inside the forbidden triangles.
fn triangle_mass(bundle: &DatasetBundle, aligned_std: &Tensor, truth: &Tensor) -> Option<f64> {
    let cfg = bundle.meta.pdsprites.as_ref()?;
    let n = truth.rows() as f64;
    let stats = |c: usize| {
        let col = truth.column(c);
        let mean = col.iter().sum::<f64>() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        (mean, sd)
    };
    let ((mx, sx), (my, sy)) = (stats(0), stats(1));
    let inside = (0..truth.rows())
        .filter(|&r| {
            let p = (aligned_std.get(r, 0) * sx + mx, aligned_std.get(r, 1) * sy + my);
            cfg.triangles.iter().any(|t| point_in_triangle(p, t))
        })
        .count();
    Some(inside as f64 / n)
}

/// Computes every metric for a model's posteriors on a dataset.
pub fn evaluate(
    moments: &GaussianMoments,
    reconstruction: &Tensor,
    bundle: &DatasetBundle,
    model_groups: &GroupStructure,
    seed: u64,
) -> Result<MetricsReport> {
    let mut m = BTreeMap::new();
    let x = &bundle.observations;
    m.insert("recon_r2".to_string(), reconstruction_r2(x, reconstruction)?);
    m.insert("rmse".to_string(), rmse(x, reconstruction)?);
    m.insert("mse".to_string(), rmse(x, reconstruction)?.powi(2));
    m.insert("pc_model".to_string(), pc_of_latents(moments, model_groups, &mut stream(seed, Stream::Eval))?);

    let k = moments.mean.cols();
    let means = &moments.mean;
    let truth = bundle.true_latents.as_ref().map(standardize);
    let true_groups = bundle.true_groups();
    let mut alignment = None;
    let (order, eval_g) = match &truth {
        Some(t) if !true_groups.is_empty() && k % true_groups.len() == 0 => {
            let g = true_groups.len();
            let (res, order, own): (AlignmentResult, Vec<usize>, bool) = if model_groups.g() == g {
                let res = align_groups(means, t, &model_groups.ranges(), &true_groups)?;
                (res, (0..k).collect(), true)
            } else {
                let (res, order) = align_best_partition(means, t, &true_groups)?;
                (res, order, false)
            };
            m.insert("latent_r2".to_string(), res.latent_r2);
            let reordered = reorder_columns(means, &order);
            let aligned = res.aligned(&reordered);
            if let Some(mass) = triangle_mass(bundle, &aligned, bundle.true_latents.as_ref().expect("present")) {
                m.insert("triangle_mass".to_string(), mass);
            }
            alignment = Some(AlignmentSummary {
                dim_order: order.clone(),
                group_size: k / g,
                group_permutation: res.group_permutation.clone(),
                group_r2: res.group_r2.clone(),
                model_groups: own,
            });
            (order, g)
        }
        _ => ((0..k).collect(), model_groups.g()),
    };

    let eval_means = reorder_columns(means, &order);
    let eval_moments = GaussianMoments { mean: eval_means.clone(), logvar: reorder_columns(&moments.logvar, &order) };
    let eval_structure = GroupStructure::new(k, eval_g)?;
    let groups = contiguous_groups(k, eval_g);
    m.insert("pc".to_string(), pc_of_latents(&eval_moments, &eval_structure, &mut stream(seed, Stream::Eval))?);

    let diagnostics = group_diagnostics(&eval_means, &groups)?;
    let tcs: Vec<f64> = diagnostics.iter().filter_map(|d| d.min_within_tc).collect();
    if !tcs.is_empty() {
        m.insert("min_within_tc_min".to_string(), tcs.iter().copied().fold(f64::INFINITY, f64::min));
    }
    let ps: Vec<f64> = diagnostics.iter().filter_map(|d| d.normality_max_p).collect();
    if !ps.is_empty() {
        m.insert("normality_max_p_min".to_string(), ps.iter().copied().fold(f64::INFINITY, f64::min));
    }
    let pair_tc = pair_tc_matrix(&eval_means, &groups)?;
    if !pair_tc.is_empty() {
        m.insert("pair_tc_max".to_string(), pair_tc.iter().map(|p| p.value).fold(0.0, f64::max));
    }
    if let Some(f) = &bundle.factors {
        if groups.len() >= 2 {
            m.insert("mig".to_string(), mig_grouped(&eval_means, f, &groups)?);
        }
    }
    // pair TC entries refer to eval-order columns; report original dims
    let pair_tc = pair_tc
        .into_iter()
        .map(|p| PairTc { dim_a: order[p.dim_a], dim_b: order[p.dim_b], value: p.value })
        .collect();
    let groups_out = diagnostics
        .into_iter()
        .map(|mut d| {
            d.dims = d.dims.iter().map(|&i| order[i]).collect();
            d
        })
        .collect();
    Ok(MetricsReport {
        schema: METRICS_SCHEMA.to_string(),
        mig_version: MIG_VERSION.to_string(),
        metrics: m,
        alignment,
        groups: groups_out,
        pair_tc,
    })
}

/// Evaluates the checkpoint in `dir` and writes `metrics.json`.
pub fn run_eval(dir: &Path, dataset: Option<&DatasetBundle>) -> Result<MetricsReport> {
    let meta = read_meta(dir)?;
    let cfg = &meta.config;
    let owned;
    let bundle = match dataset {
        Some(b) => b,
        None => {
            owned = load_dataset(cfg)?;
            &owned
        }
    };
    let (header, params) = load_checkpoint(&dir.join(CHECKPOINT_STEM))?;
    let spec = header.spec;
    let moments = encode(&params, &spec, &bundle.observations)?;
    let reconstruction = decode(&params, &spec, &moments.mean)?.mean;
    let report = evaluate(&moments, &reconstruction, bundle, &cfg.group_structure()?, cfg.seed)?;
    fs::write(RunArtifacts::in_dir(dir).metrics, serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

pub fn read_metrics(dir: &Path) -> Result<MetricsReport> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(METRICS_FILE))?)?)
}
