//! Synthetic datasets: group-wise entangled latents, fully independent
//! latents, partial dsprites images, and the XOR table.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{ratio_to_f64, Rational};
use crate::rng::{standard_normal, stream, Rng, Stream};
use crate::tensor::Tensor;

pub const GROUPWISE: &str = "groupwise";
pub const INDEPENDENT: &str = "independent";
pub const PDSPRITES: &str = "pdsprites";

const SYNTHETIC_N: usize = 2000;
const SYNTHETIC_D: usize = 20;
const SYNTHETIC_SIGMA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    pub noise_sigma: f64,
    pub n: usize,
    pub d: usize,
    /// Sizes of the true latent groups, in column order.
    pub latent_groups: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pdsprites: Option<PdspritesConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub latent_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub factor_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub observations: Tensor,
    pub true_latents: Option<Tensor>,
    pub factors: Option<Tensor>,
    pub mixing: Option<Tensor>,
    pub meta: DatasetMeta,
}

impl DatasetBundle {
    pub fn n(&self) -> usize {
        self.observations.rows()
    }

    /// Column ranges of the true latent groups.
    pub fn true_groups(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.meta
            .latent_groups
            .iter()
            .map(|&s| {
                start += s;
                start - s..start
            })
            .collect()
    }
}

/// Streams used inside one bundle; each latent group has its own.
fn data_stream(seed: u64, slot: u32) -> Rng {
    stream(seed, Stream::Aux(100 + slot))
}

/// Shifts and scales every column to zero mean and unit (population) variance.
pub fn standardize_columns(t: &mut Tensor) {
    let (rows, cols) = (t.rows(), t.cols());
    for c in 0..cols {
        let col = t.column(c);
        let mean = col.iter().sum::<f64>() / rows as f64;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64).sqrt();
        for r in 0..rows {
            let v = t.get(r, c);
            t.set(r, c, (v - mean) / sd);
        }
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `z1 ~ U(-sqrt3, sqrt3)`, `z2 | z1 ~ N(sin(pi z1 / 2), (0.15 + 0.4 |z1|)^2)`.
pub fn pair_sine(rng: &mut Rng, n: usize) -> Tensor {
    let s3 = 3f64.sqrt();
    let mut out = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let z1: f64 = rng.random_range(-s3..s3);
        let z2 = (PI * z1 / 2.0).sin() + (0.15 + 0.4 * z1.abs()) * normal(rng);
        out.extend([z1, z2]);
    }
    Tensor::from_parts(vec![n, 2], out)
}

/// Uniform on the annulus with radii 0.6 and 1.0.
pub fn pair_annulus(rng: &mut Rng, n: usize) -> Tensor {
    let mut out = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let theta: f64 = rng.random_range(0.0..2.0 * PI);
        let r = rng.random_range(0.36f64..1.0).sqrt();
        out.extend([r * theta.cos(), r * theta.sin()]);
    }
    Tensor::from_parts(vec![n, 2], out)
}

/// Points along both diagonals of `[-1, 1]^2` with N(0, 0.1^2) jitter.
pub fn pair_cross(rng: &mut Rng, n: usize) -> Tensor {
    let mut out = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let t: f64 = rng.random_range(-1.0..1.0);
        let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        out.extend([t + 0.1 * normal(rng), s * t + 0.1 * normal(rng)]);
    }
    Tensor::from_parts(vec![n, 2], out)
}

fn hstack(parts: &[Tensor]) -> Tensor {
    let n = parts[0].rows();
    let width: usize = parts.iter().map(Tensor::cols).sum();
    let mut out = Vec::with_capacity(n * width);
    for r in 0..n {
        for p in parts {
            out.extend_from_slice(p.row(r));
        }
    }
    Tensor::from_parts(vec![n, width], out)
}

/// `X = Z W^T + eps` with `W (D, K)` entries N(0, 1) and `eps ~ N(0, sigma^2)`.
pub fn gen_linear_observations(latents: &Tensor, d: usize, sigma: f64, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("noise sigma must be nonnegative, got {sigma}")));
    }
    let mixing = standard_normal(rng, &[d, latents.cols()]);
    let noise = standard_normal(rng, &[latents.rows(), d]);
    let x = linear_observations_with(latents, &mixing, sigma, &noise)?;
    Ok((x, mixing))
}

/// `X = Z W^T + sigma * noise` for a given mixing matrix and noise draws.
pub fn linear_observations_with(latents: &Tensor, mixing: &Tensor, sigma: f64, noise: &Tensor) -> Result<Tensor> {
    let mut x = latents.matmul(&mixing.transpose())?;
    if noise.shape() != x.shape() {
        return Err(Error::shape("linear_observations", &[x.shape(), noise.shape()]));
    }
    for (v, e) in x.data_mut().iter_mut().zip(noise.data()) {
        *v += sigma * e;
    }
    Ok(x)
}

fn synthetic_bundle(generator: &str, seed: u64, latents: Tensor, groups: Vec<usize>) -> Result<DatasetBundle> {
    let mut rng = data_stream(seed, 50);
    let (observations, mixing) = gen_linear_observations(&latents, SYNTHETIC_D, SYNTHETIC_SIGMA, &mut rng)?;
    let k = latents.cols();
    Ok(DatasetBundle {
        meta: DatasetMeta {
            generator: generator.to_string(),
            seed,
            noise_sigma: SYNTHETIC_SIGMA,
            n: latents.rows(),
            d: SYNTHETIC_D,
            latent_groups: groups,
            pdsprites: None,
            latent_names: (0..k).map(|i| format!("z{i}")).collect(),
            factor_names: vec![],
        },
        observations,
        true_latents: Some(latents),
        factors: None,
        mixing: Some(mixing),
    })
}

/// Three mutually independent entangled pairs (sine, annulus, cross), each
/// dim standardized, linearly mixed into 20 noisy observations.
pub fn gen_groupwise(seed: u64) -> Result<DatasetBundle> {
    let n = SYNTHETIC_N;
    let pairs: Vec<Tensor> = [pair_sine, pair_annulus, pair_cross]
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut p = f(&mut data_stream(seed, i as u32), n);
            standardize_columns(&mut p);
            p
        })
        .collect();
    synthetic_bundle(GROUPWISE, seed, hstack(&pairs), vec![2, 2, 2])
}

/// Three independent non-Gaussian dims: uniform, centered exponential, and
/// a symmetric two-component mixture.
pub fn gen_fully_independent(seed: u64) -> Result<DatasetBundle> {
    let n = SYNTHETIC_N;
    let s3 = 3f64.sqrt();
    let samplers: [&dyn Fn(&mut Rng) -> f64; 3] = [
        &|r: &mut Rng| r.random_range(-s3..s3),
        &|r: &mut Rng| {
            let e: f64 = Exp1.sample(r);
            e - 1.0
        },
        &|r: &mut Rng| {
            let sign = if r.random_bool(0.5) { 1.0 } else { -1.0 };
            sign + 0.3 * normal(r)
        },
    ];
    let cols: Vec<Tensor> = samplers
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut rng = data_stream(seed, i as u32);
            let mut t = Tensor::from_parts(vec![n, 1], (0..n).map(|_| f(&mut rng)).collect());
            standardize_columns(&mut t);
            t
        })
        .collect();
    synthetic_bundle(INDEPENDENT, seed, hstack(&cols), vec![1, 1, 1])
}

pub type Triangle = [(f64, f64); 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdspritesConfig {
    pub canvas: usize,
    /// Odd square side lengths in pixels, strictly increasing.
    pub sizes: Vec<usize>,
    /// Locations per axis; centers sit at `(i + 0.5) / grid_points`.
    pub grid_points: usize,
    pub triangles: [Triangle; 2],
}

impl Default for PdspritesConfig {
    fn default() -> Self {
        PdspritesConfig {
            canvas: 32,
            sizes: vec![3, 5, 7, 9, 11],
            grid_points: 14,
            triangles: [
                [(0.25, 1.0), (0.75, 1.0), (0.5, 0.55)],
                [(0.25, 0.0), (0.75, 0.0), (0.5, 0.45)],
            ],
        }
    }
}

pub fn point_in_triangle(p: (f64, f64), t: &Triangle) -> bool {
    let cross = |a: (f64, f64), b: (f64, f64)| (p.0 - b.0) * (a.1 - b.1) - (a.0 - b.0) * (p.1 - b.1);
    let d = [cross(t[0], t[1]), cross(t[1], t[2]), cross(t[2], t[0])];
    let neg = d.iter().any(|&v| v < 0.0);
    let pos = d.iter().any(|&v| v > 0.0);
    !(neg && pos)
}

impl PdspritesConfig {
    pub fn grid_step(&self) -> f64 {
        1.0 / self.grid_points as f64
    }

    pub fn validate(&self) -> Result<()> {
        let largest = *self.sizes.last().ok_or_else(|| Error::Config("no sprite sizes".into()))?;
        if self.sizes.len() != 5 {
            return Err(Error::Config(format!("expected five sizes, got {}", self.sizes.len())));
        }
        if self.sizes.windows(2).any(|w| w[0] >= w[1]) || self.sizes.iter().any(|s| s % 2 == 0) {
            return Err(Error::Config("sizes must be odd and strictly increasing".into()));
        }
        if largest + 1 >= self.canvas {
            return Err(Error::Config(format!("a {largest}px square cannot move on a {}px canvas", self.canvas)));
        }
        if self.grid_points < 2 {
            return Err(Error::Config("grid needs at least 2 points per axis".into()));
        }
        let inside = |t: &Triangle| t.iter().all(|&(x, y)| (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
        if !self.triangles.iter().all(inside) {
            return Err(Error::Config("forbidden triangles must lie in the unit square".into()));
        }
        let [top, bottom] = &self.triangles;
        let mirrored = top.iter().all(|&(x, y)| bottom.iter().any(|&(bx, by)| bx == x && (by - (1.0 - y)).abs() < 1e-12));
        if !mirrored {
            return Err(Error::Config("forbidden triangles must mirror about y = 0.5".into()));
        }
        Ok(())
    }

    fn margin(&self) -> usize {
        (self.sizes.last().copied().unwrap_or(1) - 1) / 2
    }

    /// Pixel column (or row from the top) of a unit coordinate.
    pub fn to_pixel(&self, u: f64) -> usize {
        let span = (self.canvas - 1 - 2 * self.margin()) as f64;
        self.margin() + (u * span).round() as usize
    }

    pub fn forbidden(&self, p: (f64, f64)) -> bool {
        self.triangles.iter().any(|t| point_in_triangle(p, t))
    }

    /// Allowed sprite centers in unit coordinates, row-major from the bottom.
    pub fn locations(&self) -> Vec<(f64, f64)> {
        let g = self.grid_points;
        let coord = |i: usize| (i as f64 + 0.5) / g as f64;
        (0..g)
            .flat_map(|j| (0..g).map(move |i| (coord(i), coord(j))))
            .filter(|&p| !self.forbidden(p))
            .collect()
    }
}

/// Filled white squares on black at every allowed location and size.
/// Observations are flattened images with values in {0, 1}.
pub fn gen_pdsprites(config: &PdspritesConfig) -> Result<DatasetBundle> {
    config.validate()?;
    let locations = config.locations();
    let c = config.canvas;
    let n = locations.len() * config.sizes.len();
    let mut images = Vec::with_capacity(n * c * c);
    let mut latents = Vec::with_capacity(n * 3);
    let mut factors = Vec::with_capacity(n * 3);
    for &(x, y) in &locations {
        let col = config.to_pixel(x);
        let row = config.to_pixel(1.0 - y);
        for (si, &size) in config.sizes.iter().enumerate() {
            let h = size / 2;
            let mut img = vec![0.0; c * c];
            for r in row - h..=row + h {
                img[r * c + col - h..=r * c + col + h].fill(1.0);
            }
            images.extend(img);
            latents.extend([x, y, size as f64]);
            factors.extend([x, y, si as f64]);
        }
    }
    Ok(DatasetBundle {
        observations: Tensor::from_parts(vec![n, c * c], images),
        true_latents: Some(Tensor::from_parts(vec![n, 3], latents)),
        factors: Some(Tensor::from_parts(vec![n, 3], factors)),
        mixing: None,
        meta: DatasetMeta {
            generator: PDSPRITES.to_string(),
            seed: 0,
            noise_sigma: 0.0,
            n,
            d: c * c,
            latent_groups: vec![2, 1],
            pdsprites: Some(config.clone()),
            latent_names: vec!["x".into(), "y".into(), "size_px".into()],
            factor_names: vec!["x".into(), "y".into(), "size_index".into()],
        },
    })
}

/// Dispatches on a generator id.
pub fn generate(generator: &str, seed: u64) -> Result<DatasetBundle> {
    match generator {
        GROUPWISE => gen_groupwise(seed),
        INDEPENDENT => gen_fully_independent(seed),
        PDSPRITES => gen_pdsprites(&PdspritesConfig::default()),
        other => Err(Error::Config(format!("unknown dataset generator {other:?}"))),
    }
}

/// Finite joint distribution over integer tuples.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    pub support: Vec<Vec<u8>>,
    pub probs: Vec<Rational>,
}

impl DiscreteJoint {
    fn marginal(&self, vars: &[usize]) -> Vec<(Vec<u8>, Rational)> {
        let mut out: Vec<(Vec<u8>, Rational)> = Vec::new();
        for (x, &p) in self.support.iter().zip(&self.probs) {
            let key: Vec<u8> = vars.iter().map(|&v| x[v]).collect();
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some(entry) => entry.1 += p,
                None => out.push((key, p)),
            }
        }
        out
    }

    /// Exact-enumeration `I(X_a; X_b)` in nats.
    pub fn mutual_information(&self, a: &[usize], b: &[usize]) -> f64 {
        let joint_vars: Vec<usize> = a.iter().chain(b).copied().collect();
        let pa = self.marginal(a);
        let pb = self.marginal(b);
        let lookup = |m: &[(Vec<u8>, Rational)], key: &[u8]| m.iter().find(|(k, _)| k == key).map(|e| e.1).unwrap();
        self.marginal(&joint_vars)
            .iter()
            .filter(|(_, p)| *p.numer() != 0)
            .map(|(key, p)| {
                let ratio = *p / (lookup(&pa, &key[..a.len()]) * lookup(&pb, &key[a.len()..]));
                ratio_to_f64(p) * ratio_to_f64(&ratio).ln()
            })
            .sum()
    }
}

/// The four equiprobable rows (0,0,1), (0,1,0), (1,0,0), (1,1,1).
pub fn xor_table() -> DiscreteJoint {
    let support = vec![vec![0, 0, 1], vec![0, 1, 0], vec![1, 0, 0], vec![1, 1, 1]];
    DiscreteJoint { probs: vec![Rational::new(1, 4); 4], support }
}

fn write_csv(path: &Path, names: &[String], t: &Tensor) -> Result<()> {
    let mut s = names.join(",");
    s.push('\n');
    for r in 0..t.rows() {
        for (c, v) in t.row(r).iter().enumerate() {
            if c > 0 {
                s.push(',');
            }
            write!(s, "{v:.16e}").expect("string write");
        }
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap_or("").split(',').map(str::to_string).collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let before = data.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("{}:{}: bad number {field:?}", path.display(), i + 2)))?;
            data.push(v);
        }
        if data.len() - before != header.len() {
            return Err(Error::invalid(format!("{}:{}: wrong field count", path.display(), i + 2)));
        }
        rows += 1;
    }
    let t = Tensor::matrix(rows, header.len(), data)?;
    Ok((header, t))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let bad = || Error::invalid(format!("{} is not a binary PGM", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad());
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad());
    let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    let body = bytes.get(pos..pos + w * h).ok_or_else(bad)?;
    Ok((w, h, body.iter().map(|&b| b as f64 / max as f64).collect()))
}

fn index_names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Persists a bundle: CSV tables, numbered PGM images for image datasets,
/// and `meta.json`.
pub fn write_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    if let Some(cfg) = &bundle.meta.pdsprites {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir)?;
        for i in 0..bundle.n() {
            write_pgm(&img_dir.join(format!("{i:05}.pgm")), cfg.canvas, cfg.canvas, bundle.observations.row(i))?;
        }
    } else {
        write_csv(
            &dir.join("observations.csv"),
            &index_names("x", bundle.observations.cols()),
            &bundle.observations,
        )?;
    }
    if let Some(z) = &bundle.true_latents {
        let names = if bundle.meta.latent_names.len() == z.cols() {
            bundle.meta.latent_names.clone()
        } else {
            index_names("z", z.cols())
        };
        write_csv(&dir.join("latents.csv"), &names, z)?;
    }
    if let Some(f) = &bundle.factors {
        let names = if bundle.meta.factor_names.len() == f.cols() {
            bundle.meta.factor_names.clone()
        } else {
            index_names("f", f.cols())
        };
        write_csv(&dir.join("factors.csv"), &names, f)?;
    }
    if let Some(w) = &bundle.mixing {
        write_csv(&dir.join("mixing.csv"), &index_names("k", w.cols()), w)?;
    }
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&bundle.meta)?)?;
    Ok(())
}

pub fn read_bundle(dir: &Path) -> Result<DatasetBundle> {
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let optional = |name: &str| -> Result<Option<Tensor>> {
        let p = dir.join(name);
        if p.exists() {
            Ok(Some(read_csv(&p)?.1))
        } else {
            Ok(None)
        }
    };
    let observations = if meta.pdsprites.is_some() {
        let mut data = Vec::with_capacity(meta.n * meta.d);
        for i in 0..meta.n {
            let (w, h, px) = read_pgm(&dir.join("images").join(format!("{i:05}.pgm")))?;
            if w * h != meta.d {
                return Err(Error::invalid(format!("image {i} has {w}x{h} pixels, expected {}", meta.d)));
            }
            data.extend(px);
        }
        Tensor::matrix(meta.n, meta.d, data)?
    } else {
        read_csv(&dir.join("observations.csv"))?.1
    };
    Ok(DatasetBundle {
        observations,
        true_latents: optional("latents.csv")?,
        factors: optional("factors.csv")?,
        mixing: optional("mixing.csv")?,
        meta,
    })
}
