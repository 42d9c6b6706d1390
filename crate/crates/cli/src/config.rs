//! Experiment configuration: TOML file plus flag overrides, normalized per
//! model family.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pdisvae_core::datagen;
use pdisvae_core::nn::{LayerKind, ModelSpec};
use pdisvae_core::objective::{EstimatorKind, GroupStructure, PriorKind};
use pdisvae_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_EPOCHS: usize = 2000;
pub const FULL_EPOCHS: usize = 5000;
pub const DEFAULT_BATCH: usize = 128;
pub const DEFAULT_LR: f64 = 5e-4;
pub const IMAGE_LR: f64 = 1e-3;
pub const DEFAULT_BETA: f64 = 4.0;
pub const IMAGE_WIDTHS: [usize; 2] = [256, 256];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vae,
    Ica,
    Btcvae,
    Pdisvae,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Vae, ModelKind::Ica, ModelKind::Btcvae, ModelKind::Pdisvae];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Vae => "vae",
            ModelKind::Ica => "ica",
            ModelKind::Btcvae => "btcvae",
            ModelKind::Pdisvae => "pdisvae",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown model {s:?} (expected vae, ica, btcvae or pdisvae)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub kind: LayerKind,
    #[serde(default)]
    pub widths: Vec<usize>,
}

/// Partially specified config, as read from TOML or assembled from flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub model: Option<String>,
    pub latent_dim: Option<usize>,
    pub groups: Option<usize>,
    pub beta: Option<f64>,
    pub estimator: Option<String>,
    pub dataset: Option<String>,
    pub data_seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
    pub layers: Option<LayerConfig>,
    pub out: Option<PathBuf>,
    pub full: Option<bool>,
}

impl RawConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Values set in `over` replace those in `self`.
    pub fn merged(self, over: RawConfig) -> RawConfig {
        RawConfig {
            model: over.model.or(self.model),
            latent_dim: over.latent_dim.or(self.latent_dim),
            groups: over.groups.or(self.groups),
            beta: over.beta.or(self.beta),
            estimator: over.estimator.or(self.estimator),
            dataset: over.dataset.or(self.dataset),
            data_seed: over.data_seed.or(self.data_seed),
            epochs: over.epochs.or(self.epochs),
            batch_size: over.batch_size.or(self.batch_size),
            learning_rate: over.learning_rate.or(self.learning_rate),
            seed: over.seed.or(self.seed),
            layers: over.layers.or(self.layers),
            out: over.out.or(self.out),
            full: over.full.or(self.full),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub latent_dim: usize,
    pub groups: usize,
    pub beta: f64,
    pub estimator: EstimatorKind,
    pub prior: PriorKind,
    /// Generator id or a directory written by `gen-data`.
    pub dataset: String,
    pub data_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub layers: LayerConfig,
    pub out: PathBuf,
}

fn is_generator(name: &str) -> bool {
    [datagen::GROUPWISE, datagen::INDEPENDENT, datagen::PDSPRITES].contains(&name)
}

impl ExperimentConfig {
    pub fn group_structure(&self) -> Result<GroupStructure> {
        GroupStructure::new(self.latent_dim, self.groups)
    }

    pub fn model_spec(&self, data_dim: usize) -> ModelSpec {
        ModelSpec::new(self.layers.kind, &self.layers.widths, data_dim, self.latent_dim)
    }

    pub fn is_image_dataset(&self) -> bool {
        self.dataset == datagen::PDSPRITES
    }

    /// Applies a normalized config back through `parse` unchanged.
    pub fn to_raw(&self) -> RawConfig {
        RawConfig {
            model: Some(self.model.name().into()),
            latent_dim: Some(self.latent_dim),
            groups: Some(self.groups),
            beta: Some(self.beta),
            estimator: Some(self.estimator.name().into()),
            dataset: Some(self.dataset.clone()),
            data_seed: Some(self.data_seed),
            epochs: Some(self.epochs),
            batch_size: Some(self.batch_size),
            learning_rate: Some(self.learning_rate),
            seed: Some(self.seed),
            layers: Some(self.layers.clone()),
            out: Some(self.out.clone()),
            full: None,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.to_raw()).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Validates and normalizes: `vae` forces one group and no penalty, `ica`
/// adds the logcosh prior with one group and no penalty, `btcvae` uses
/// singleton groups. Every violation is reported at once.
pub fn normalize(raw: RawConfig) -> Result<ExperimentConfig> {
    let mut errors = Vec::new();
    let model = match raw.model.as_deref().unwrap_or("pdisvae").parse::<ModelKind>() {
        Ok(m) => Some(m),
        Err(e) => {
            errors.push(e.to_string());
            None
        }
    };
    let estimator = match raw.estimator.as_deref().unwrap_or("is").parse::<EstimatorKind>() {
        Ok(e) => Some(e),
        Err(e) => {
            errors.push(e.to_string());
            None
        }
    };
    let dataset = match raw.dataset {
        Some(d) if !d.is_empty() => {
            if !is_generator(&d) && !Path::new(&d).is_dir() {
                errors.push(format!("dataset {d:?} is neither a generator id nor an existing directory"));
            }
            d
        }
        _ => {
            errors.push("missing dataset".to_string());
            String::new()
        }
    };
    let image = dataset == datagen::PDSPRITES;
    let k = raw.latent_dim.unwrap_or(6);
    if k == 0 {
        errors.push("latent_dim must be positive".into());
    }
    let mut g = raw.groups.unwrap_or(3);
    let mut beta = raw.beta.unwrap_or(DEFAULT_BETA);
    let mut prior = PriorKind::Gaussian;
    match model {
        Some(ModelKind::Vae) => {
            g = 1;
            beta = 0.0;
        }
        Some(ModelKind::Ica) => {
            g = 1;
            beta = 0.0;
            prior = PriorKind::Logcosh;
        }
        Some(ModelKind::Btcvae) => g = k,
        Some(ModelKind::Pdisvae) | None => {}
    }
    if g == 0 || (k > 0 && k % g != 0) {
        errors.push(format!("groups G={g} must divide latent_dim K={k}"));
    }
    if !(beta.is_finite() && beta >= 0.0) {
        errors.push(format!("beta must be finite and nonnegative, got {beta}"));
    }
    let full = raw.full.unwrap_or(false);
    let epochs = raw.epochs.unwrap_or(if full { FULL_EPOCHS } else { DEFAULT_EPOCHS });
    if epochs == 0 {
        errors.push("epochs must be positive".into());
    }
    let batch_size = raw.batch_size.unwrap_or(DEFAULT_BATCH);
    if batch_size < 2 {
        errors.push(format!("batch_size must be at least 2, got {batch_size}"));
    }
    let learning_rate = raw.learning_rate.unwrap_or(if image { IMAGE_LR } else { DEFAULT_LR });
    if !(learning_rate.is_finite() && learning_rate > 0.0) {
        errors.push(format!("learning_rate must be positive, got {learning_rate}"));
    }
    let layers = raw.layers.unwrap_or_else(|| {
        if image {
            LayerConfig { kind: LayerKind::Mlp, widths: IMAGE_WIDTHS.to_vec() }
        } else {
            LayerConfig { kind: LayerKind::Linear, widths: vec![] }
        }
    });
    match layers.kind {
        LayerKind::Linear if !layers.widths.is_empty() => errors.push("linear layers take no widths".into()),
        LayerKind::Mlp if layers.widths.is_empty() || layers.widths.contains(&0) => {
            errors.push("mlp layers need nonempty positive widths".into())
        }
        _ => {}
    }
    if !errors.is_empty() {
        return Err(Error::Config(errors.join("; ")));
    }
    let model = model.expect("checked");
    let seed = raw.seed.unwrap_or(0);
    let out = raw.out.unwrap_or_else(|| PathBuf::from(format!("runs/{model}-k{k}-g{g}-s{seed}")));
    Ok(ExperimentConfig {
        model,
        latent_dim: k,
        groups: g,
        beta,
        estimator: estimator.expect("checked"),
        prior,
        dataset,
        data_seed: raw.data_seed.unwrap_or(0),
        epochs,
        batch_size,
        learning_rate,
        seed,
        layers,
        out,
    })
}

/// Reads an optional TOML file, applies flag overrides and normalizes.
pub fn parse_config(path: Option<&Path>, flags: RawConfig) -> Result<ExperimentConfig> {
    let base = match path {
        Some(p) => RawConfig::from_file(p)?,
        None => RawConfig::default(),
    };
    let mut raw = base.merged(flags);
    if raw.dataset.is_none() {
        raw.dataset = Some(datagen::GROUPWISE.to_string());
    }
    normalize(raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(model: &str, k: usize, g: usize) -> RawConfig {
        RawConfig {
            model: Some(model.into()),
            latent_dim: Some(k),
            groups: Some(g),
            dataset: Some("groupwise".into()),
            ..Default::default()
        }
    }

    #[test]
    fn pdisvae_k6_g3_is_valid() {
        let cfg = normalize(raw("pdisvae", 6, 3)).unwrap();
        assert_eq!(cfg.group_structure().unwrap().h(), 2);
        assert_eq!(cfg.estimator, EstimatorKind::Is);
        assert_eq!(cfg.beta, 4.0);
        assert_eq!(cfg.epochs, DEFAULT_EPOCHS);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.learning_rate, 5e-4);
    }

    #[test]
    fn indivisible_groups_rejected() {
        let err = normalize(raw("pdisvae", 6, 4)).unwrap_err().to_string();
        assert!(err.contains("G=4"), "{err}");
    }

    #[test]
    fn reductions_normalize_groups() {
        let bt = normalize(raw("btcvae", 6, 3)).unwrap();
        assert_eq!(bt.groups, 6);
        let vae = normalize(raw("vae", 6, 3)).unwrap();
        assert_eq!((vae.groups, vae.beta), (1, 0.0));
        let ica = normalize(raw("ica", 6, 3)).unwrap();
        assert_eq!((ica.groups, ica.beta, ica.prior), (1, 0.0, PriorKind::Logcosh));
    }

    #[test]
    fn all_violations_reported() {
        let mut r = raw("nope", 6, 4);
        r.estimator = Some("bogus".into());
        r.batch_size = Some(1);
        r.dataset = None;
        let err = normalize(r).unwrap_err().to_string();
        for needle in ["unknown model", "bogus", "batch_size", "missing dataset", "G=4"] {
            assert!(err.contains(needle), "{needle} not in {err}");
        }
    }

    #[test]
    fn flags_override_file_and_full_sets_epochs() {
        let file = RawConfig::from_toml_str("model = \"vae\"\nepochs = 10\nbeta = 2.0\n").unwrap();
        let flags = RawConfig { model: Some("pdisvae".into()), ..Default::default() };
        let cfg = parse_config(None, file.clone().merged(flags)).unwrap();
        assert_eq!((cfg.model, cfg.epochs, cfg.beta), (ModelKind::Pdisvae, 10, 2.0));
        let full = RawConfig { full: Some(true), ..Default::default() };
        assert_eq!(parse_config(None, full).unwrap().epochs, FULL_EPOCHS);
        assert!(RawConfig::from_toml_str("unknown_key = 1").is_err());
    }

    #[test]
    fn image_dataset_defaults() {
        let mut r = raw("pdisvae", 4, 2);
        r.dataset = Some("pdsprites".into());
        let cfg = normalize(r).unwrap();
        assert_eq!(cfg.layers.kind, LayerKind::Mlp);
        assert_eq!(cfg.layers.widths, vec![256, 256]);
        assert_eq!(cfg.learning_rate, 1e-3);
    }

    #[test]
    fn echo_round_trips() {
        for model in ["vae", "ica", "btcvae", "pdisvae"] {
            let cfg = normalize(raw(model, 6, 3)).unwrap();
            let again = normalize(RawConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap()).unwrap();
            assert_eq!(cfg, again);
            let json = serde_json::to_string(&cfg).unwrap();
            assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), cfg);
        }
    }
}
