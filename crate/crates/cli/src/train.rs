//! Training loop and run artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pdisvae_core::adam::{AdamConfig, AdamState};
use pdisvae_core::datagen::{self, DatasetBundle};
use pdisvae_core::nn::{init_params, save_checkpoint, LayerKind, ModelParams, ModelSpec};
use pdisvae_core::objective::{total_loss, LossBreakdown, Objective};
use pdisvae_core::rng::{standard_normal, stream, Stream};
use pdisvae_core::{Error, Result, Tape, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::eval::run_eval;

pub const CHECKPOINT_STEM: &str = "checkpoint";
pub const CURVES_FILE: &str = "curves.csv";
pub const META_FILE: &str = "meta.json";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub curves: PathBuf,
    pub metrics: PathBuf,
    pub meta: PathBuf,
}

impl RunArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        RunArtifacts {
            dir: dir.to_path_buf(),
            checkpoint: dir.join(CHECKPOINT_STEM),
            curves: dir.join(CURVES_FILE),
            metrics: dir.join(METRICS_FILE),
            meta: dir.join(META_FILE),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config: ExperimentConfig,
    pub code_version: String,
    pub network: String,
    pub dataset: datagen::DatasetMeta,
    pub steps: u64,
    pub wall_time_s: f64,
}

pub fn network_description(spec: &ModelSpec) -> String {
    match spec.encoder.kind {
        LayerKind::Linear => "linear encoder and decoder".to_string(),
        LayerKind::Mlp => {
            let widths: Vec<String> = spec.encoder.widths.iter().map(usize::to_string).collect();
            format!("tanh MLP encoder/decoder, hidden widths {} (stands in for a convolutional network)", widths.join("-"))
        }
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<DatasetBundle> {
    let path = Path::new(&cfg.dataset);
    if path.is_dir() {
        datagen::read_bundle(path)
    } else {
        datagen::generate(&cfg.dataset, cfg.data_seed)
    }
}

/// One epoch's size-weighted averages of the batch losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub pc: f64,
    pub total: f64,
}

fn write_curves(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let mut s = String::from("epoch,recon,kl,pc,total\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.epoch, r.recon, r.kl, r.pc, r.total).expect("string write");
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_curves(path: &Path) -> Result<Vec<EpochRow>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Config(format!("{}: bad row {line:?}", path.display())))
            };
            Ok(EpochRow { epoch: num(0)? as usize, recon: num(1)?, kl: num(2)?, pc: num(3)?, total: num(4)? })
        })
        .collect()
}

/// One Adam step on a batch; returns the batch's loss components.
fn train_step(
    params: &mut ModelParams,
    adam: &mut AdamState,
    names: &[String],
    spec: &ModelSpec,
    objective: &Objective,
    x: Tensor,
    eps: Tensor,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let xv = tape.constant(x);
    let ev = tape.constant(eps);
    let loss = total_loss(&mut tape, &vars, spec, xv, ev, objective)?;
    let breakdown = loss.breakdown(&tape, objective.beta)?;
    let grads = tape.backward(loss.total)?;
    let grad_refs: Vec<&Tensor> = vars.blocks().into_iter().map(|v| grads.wrt(v)).collect();
    let mut blocks = params.blocks_mut();
    adam.step(&mut blocks, &grad_refs, names)?;
    Ok(breakdown)
}

/// Trains, writes checkpoint, curves, meta and metrics into `cfg.out`.
pub fn run_training(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    let started = Instant::now();
    let data = load_dataset(cfg)?;
    let art = RunArtifacts::in_dir(&cfg.out);
    fs::create_dir_all(&art.dir)?;

    let n = data.n();
    let spec = cfg.model_spec(data.observations.cols());
    spec.validate()?;
    let objective = Objective {
        groups: cfg.group_structure()?,
        estimator: cfg.estimator,
        beta: cfg.beta,
        prior: cfg.prior,
        dataset_size: n,
    };
    let mut params = init_params(&spec, &mut stream(cfg.seed, Stream::Init));
    let names = params.block_names();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.learning_rate), &params.blocks());
    let mut shuffle_rng = stream(cfg.seed, Stream::Shuffle);
    let mut eps_rng = stream(cfg.seed, Stream::Eps);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rows = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut acc = [0.0; 4];
        let mut seen = 0usize;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let x = data.observations.select_rows(batch);
            let eps = standard_normal(&mut eps_rng, &[batch.len(), cfg.latent_dim]);
            // a rejected step leaves `params` untouched, so they are the last good values
            let b = match train_step(&mut params, &mut adam, &names, &spec, &objective, x, eps) {
                Ok(b) => b,
                Err(Error::NonFinite(what)) => {
                    save_checkpoint(&art.checkpoint, &spec, &params, cfg.seed, adam.step)?;
                    write_curves(&art.curves, &rows)?;
                    return Err(Error::NonFinite(format!("{what} at epoch {epoch}, batch {bi}")));
                }
                Err(e) => return Err(e),
            };
            let w = batch.len() as f64;
            for (a, v) in acc.iter_mut().zip([b.recon, b.kl, b.pc, b.total]) {
                *a += w * v;
            }
            seen += batch.len();
        }
        let s = seen as f64;
        rows.push(EpochRow { epoch, recon: acc[0] / s, kl: acc[1] / s, pc: acc[2] / s, total: acc[3] / s });
    }

    save_checkpoint(&art.checkpoint, &spec, &params, cfg.seed, adam.step)?;
    write_curves(&art.curves, &rows)?;
    let meta = RunMeta {
        config: cfg.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        network: network_description(&spec),
        dataset: data.meta.clone(),
        steps: adam.step,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    fs::write(&art.meta, serde_json::to_string_pretty(&meta)?)?;
    run_eval(&art.dir, Some(&data))?;
    Ok(art)
}

pub fn read_meta(dir: &Path) -> Result<RunMeta> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join(META_FILE))?)?)
}
