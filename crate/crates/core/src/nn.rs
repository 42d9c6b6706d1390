//! Encoder/decoder networks with Gaussian heads.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Bound applied to every emitted log-variance.
pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Linear,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
}

/// One network: `input_dim -> widths... -> 2 * output_dim` (mean and
/// log-variance heads, concatenated).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl LayerSpec {
    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Linear,
            widths: vec![],
            activation: Activation::Tanh,
            input_dim,
            output_dim,
        }
    }

    pub fn mlp(input_dim: usize, widths: Vec<usize>, output_dim: usize) -> Self {
        LayerSpec { kind: LayerKind::Mlp, widths, activation: Activation::Tanh, input_dim, output_dim }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.widths.is_empty()) {
            (LayerKind::Linear, false) => return Err(Error::invalid("linear layer spec has hidden widths")),
            (LayerKind::Mlp, true) => return Err(Error::invalid("mlp layer spec needs hidden widths")),
            _ => {}
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.widths.contains(&0) {
            return Err(Error::invalid("layer dimensions must be positive"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each dense layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![self.input_dim];
        sizes.extend(&self.widths);
        sizes.push(2 * self.output_dim);
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub encoder: LayerSpec,
    pub decoder: LayerSpec,
}

impl ModelSpec {
    pub fn new(kind: LayerKind, widths: &[usize], data_dim: usize, latent_dim: usize) -> Self {
        let (encoder, decoder) = match kind {
            LayerKind::Linear => (LayerSpec::linear(data_dim, latent_dim), LayerSpec::linear(latent_dim, data_dim)),
            LayerKind::Mlp => (
                LayerSpec::mlp(data_dim, widths.to_vec(), latent_dim),
                LayerSpec::mlp(latent_dim, widths.iter().rev().copied().collect(), data_dim),
            ),
        };
        ModelSpec { encoder, decoder }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.output_dim != self.decoder.input_dim || self.encoder.input_dim != self.decoder.output_dim {
            return Err(Error::invalid("encoder and decoder dimensions disagree"));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim
    }

    pub fn data_dim(&self) -> usize {
        self.encoder.input_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Encoder (phi) and decoder (theta) weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<Dense>,
    pub decoder: Vec<Dense>,
}

impl ModelParams {
    /// Parameter blocks in checkpoint order: encoder layers then decoder
    /// layers, weight before bias.
    pub fn blocks(&self) -> Vec<&Tensor> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|d| [&d.weight, &d.bias])
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(|d| [&mut d.weight, &mut d.bias])
            .collect()
    }

    pub fn block_names(&self) -> Vec<String> {
        let named = |prefix: &str, layers: &[Dense]| -> Vec<String> {
            (0..layers.len())
                .flat_map(|i| [format!("{prefix}.{i}.weight"), format!("{prefix}.{i}.bias")])
                .collect()
        };
        let mut names = named("encoder", &self.encoder);
        names.extend(named("decoder", &self.decoder));
        names
    }

    pub fn from_blocks(spec: &ModelSpec, blocks: Vec<Tensor>) -> Result<Self> {
        let mut it = blocks.into_iter();
        let mut take = |ls: &LayerSpec| -> Result<Vec<Dense>> {
            ls.layer_dims()
                .into_iter()
                .map(|(fan_in, fan_out)| {
                    let weight = it.next().ok_or_else(|| Error::invalid("missing weight block"))?;
                    let bias = it.next().ok_or_else(|| Error::invalid("missing bias block"))?;
                    if weight.shape() != [fan_in, fan_out] || bias.shape() != [1, fan_out] {
                        return Err(Error::invalid(format!(
                            "block shapes {:?}/{:?} do not match layer {fan_in}x{fan_out}",
                            weight.shape(),
                            bias.shape()
                        )));
                    }
                    Ok(Dense { weight, bias })
                })
                .collect()
        };
        let encoder = take(&spec.encoder)?;
        let decoder = take(&spec.decoder)?;
        if it.next().is_some() {
            return Err(Error::invalid("extra parameter blocks"));
        }
        Ok(ModelParams { encoder, decoder })
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Records every block on `tape`, as trainable leaves or as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut leaf = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let encoder = self.encoder.iter().map(|d| (leaf(&d.weight), leaf(&d.bias))).collect();
        let decoder = self.decoder.iter().map(|d| (leaf(&d.weight), leaf(&d.bias))).collect();
        ParamVars { encoder, decoder }
    }
}

/// Tape handles for a registered [`ModelParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub encoder: Vec<(Var, Var)>,
    pub decoder: Vec<(Var, Var)>,
}

impl ParamVars {
    /// Handles in the same order as [`ModelParams::blocks`].
    pub fn blocks(&self) -> Vec<Var> {
        self.encoder.iter().chain(&self.decoder).flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Diagonal-Gaussian moments, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMoments {
    pub mean: Tensor,
    pub logvar: Tensor,
}

/// Weights `~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
pub fn init_params(spec: &ModelSpec, rng: &mut Rng) -> ModelParams {
    let mut init = |ls: &LayerSpec| -> Vec<Dense> {
        ls.layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
                Dense {
                    weight: Tensor::from_parts(vec![fan_in, fan_out], data),
                    bias: Tensor::zeros(&[1, fan_out]),
                }
            })
            .collect()
    };
    let encoder = init(&spec.encoder);
    let decoder = init(&spec.decoder);
    ModelParams { encoder, decoder }
}

fn network_on_tape(tape: &mut Tape, layers: &[(Var, Var)], spec: &LayerSpec, input: Var) -> Result<(Var, Var)> {
    let cols = tape.shape(input).get(1).copied();
    if cols != Some(spec.input_dim) {
        return Err(Error::shape("network input", &[tape.shape(input), &[spec.input_dim]]));
    }
    let mut h = input;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let wx = tape.matmul(h, w)?;
        h = tape.add(wx, b)?;
        if i + 1 < layers.len() {
            h = tape.tanh(h)?;
        }
    }
    let k = spec.output_dim;
    let mean = tape.slice_cols(h, 0, k)?;
    let raw_logvar = tape.slice_cols(h, k, 2 * k)?;
    let logvar = tape.clamp(raw_logvar, -LOGVAR_CLAMP, LOGVAR_CLAMP)?;
    Ok((mean, logvar))
}

/// Encoder on the tape: `x (B, D)` to `(mean, logvar)`, each `(B, K)`.
pub fn encode_on_tape(tape: &mut Tape, vars: &ParamVars, spec: &ModelSpec, x: Var) -> Result<(Var, Var)> {
    network_on_tape(tape, &vars.encoder, &spec.encoder, x)
}

/// Decoder on the tape: `z (B, K)` to `(mean, logvar)`, each `(B, D)`.
pub fn decode_on_tape(tape: &mut Tape, vars: &ParamVars, spec: &ModelSpec, z: Var) -> Result<(Var, Var)> {
    network_on_tape(tape, &vars.decoder, &spec.decoder, z)
}

fn run_plain(params: &ModelParams, spec: &ModelSpec, input: &Tensor, encoder: bool) -> Result<GaussianMoments> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let x = tape.constant(input.clone());
    let (m, lv) = if encoder {
        encode_on_tape(&mut tape, &vars, spec, x)?
    } else {
        decode_on_tape(&mut tape, &vars, spec, x)?
    };
    Ok(GaussianMoments { mean: tape.value(m).clone(), logvar: tape.value(lv).clone() })
}

pub fn encode(params: &ModelParams, spec: &ModelSpec, x: &Tensor) -> Result<GaussianMoments> {
    run_plain(params, spec, x, true)
}

pub fn decode(params: &ModelParams, spec: &ModelSpec, z: &Tensor) -> Result<GaussianMoments> {
    run_plain(params, spec, z, false)
}

/// `z = mean + exp(logvar / 2) * eps` on the tape.
pub fn reparameterize_on_tape(tape: &mut Tape, mean: Var, logvar: Var, eps: Var) -> Result<Var> {
    if tape.shape(eps) != tape.shape(mean) {
        return Err(Error::shape("reparameterize", &[tape.shape(mean), tape.shape(eps)]));
    }
    let half = tape.scale(logvar, 0.5)?;
    let sd = tape.exp(half)?;
    let noise = tape.mul(sd, eps)?;
    tape.add(mean, noise)
}

pub fn reparameterize(moments: &GaussianMoments, eps: &Tensor) -> Result<Tensor> {
    if eps.shape() != moments.mean.shape() {
        return Err(Error::shape("reparameterize", &[moments.mean.shape(), eps.shape()]));
    }
    let data = moments
        .mean
        .data()
        .iter()
        .zip(moments.logvar.data())
        .zip(eps.data())
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    Tensor::new(moments.mean.shape().to_vec(), data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

/// JSON half of a checkpoint; the float blob lives in a sibling `.bin` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub spec: ModelSpec,
    pub blocks: Vec<BlockInfo>,
    pub seed: u64,
    pub step: u64,
}

pub const CHECKPOINT_FORMAT: &str = "pdisvae-checkpoint/v1";

fn sibling(stem: &Path, ext: &str) -> PathBuf {
    stem.with_extension(ext)
}

/// Writes `<stem>.json` (header) and `<stem>.bin` (little-endian f64 blob in
/// block order).
pub fn save_checkpoint(stem: &Path, spec: &ModelSpec, params: &ModelParams, seed: u64, step: u64) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        spec: spec.clone(),
        blocks: params
            .block_names()
            .into_iter()
            .zip(params.blocks())
            .map(|(name, t)| BlockInfo { name, shape: t.shape().to_vec() })
            .collect(),
        seed,
        step,
    };
    let mut blob = Vec::with_capacity(params.num_params() * 8);
    for block in params.blocks() {
        for v in block.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(sibling(stem, "json"), serde_json::to_string_pretty(&header)?)?;
    fs::write(sibling(stem, "bin"), blob)?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<(CheckpointHeader, ModelParams)> {
    let header: CheckpointHeader = serde_json::from_str(&fs::read_to_string(sibling(stem, "json"))?)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::invalid(format!("unknown checkpoint format {}", header.format)));
    }
    let blob = fs::read(sibling(stem, "bin"))?;
    let total: usize = header.blocks.iter().map(|b| b.shape.iter().product::<usize>()).sum();
    if blob.len() != total * 8 {
        return Err(Error::invalid(format!("checkpoint blob has {} bytes, expected {}", blob.len(), total * 8)));
    }
    let mut values = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let blocks = header
        .blocks
        .iter()
        .map(|b| {
            let n = b.shape.iter().product();
            Tensor::new(b.shape.clone(), values.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParams::from_blocks(&header.spec, blocks)?;
    Ok((header, params))
}
