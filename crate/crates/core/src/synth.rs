//! Reproducible synthetic data: i.i.d. Gaussian-prior images, additive noise
//! injection, spatially varying noise fields and the per-epoch training set.
//!
//! Noise levels in this module are on the 0–255 scale; images are normalized
//! to `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::bayes::GaussianPrior;
use crate::error::{Error, Result};
use crate::rng::{tag, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub prior_mean: f64,
    pub prior_std: f64,
    /// Training patch `[height, width]`.
    pub train_patch: [usize; 2],
    pub train_count: usize,
    /// Test image `[height, width]`.
    pub test_image: [usize; 2],
    pub test_count: usize,
    /// Training noise range `[lo, hi]`.
    pub noise_range: [f64; 2],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            prior_mean: 127.0,
            prior_std: 25.0,
            train_patch: [40, 40],
            train_count: 5000,
            test_image: [256, 256],
            test_count: 256,
            noise_range: [5.0, 25.0],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.noise_range;
        if !(lo >= 0.0 && lo <= hi) {
            return Err(Error::Config(format!("noise range [{lo}, {hi}] must satisfy 0 <= lo <= hi")));
        }
        if self.train_patch.contains(&0) || self.test_image.contains(&0) || self.train_count == 0 || self.test_count == 0 {
            return Err(Error::Config("all synthetic data dimensions must be positive".into()));
        }
        GaussianPrior::from_255(self.prior_mean, self.prior_std).map(|_| ())
    }

    pub fn prior(&self) -> Result<GaussianPrior> {
        GaussianPrior::from_255(self.prior_mean, self.prior_std)
    }
}

/// Per-pixel noise standard deviation map (0–255 units).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseField {
    height: usize,
    width: usize,
    sigma: Vec<f64>,
}

impl NoiseField {
    pub fn new(height: usize, width: usize, sigma: Vec<f64>) -> Result<Self> {
        if sigma.len() != height * width {
            return Err(Error::Shape(format!("noise field of {} entries for {height}×{width}", sigma.len())));
        }
        if sigma.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::invalid("noise field entries must be non-negative"));
        }
        Ok(Self { height, width, sigma })
    }

    pub fn constant(height: usize, width: usize, sigma: f64) -> Result<Self> {
        Self::new(height, width, vec![sigma; height * width])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.sigma
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.sigma[r * self.width..(r + 1) * self.width]
    }
}

/// Noise level of an image: one value everywhere or a per-pixel field.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSpec {
    Scalar(f64),
    Field(NoiseField),
}

impl NoiseSpec {
    /// Standard deviation at pixel `p` of an `h×w` plane.
    pub fn sigma_at(&self, p: usize) -> f64 {
        match self {
            NoiseSpec::Scalar(s) => *s,
            NoiseSpec::Field(f) => f.sigma[p],
        }
    }
}

fn draw_pixel(rng: &mut Rng, mean: f64, std: f64) -> f32 {
    (mean + std * rng.gaussian()) as f32
}

/// Clean image with i.i.d. pixels from the prior, clipped to `[0, 1]`.
pub fn gen_clean(shape: &[usize], config: &SynthConfig, rng: &mut Rng) -> Result<Tensor<f32>> {
    let prior = config.prior()?;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| draw_pixel(rng, prior.mean, prior.std).clamp(0.0, 1.0)).collect();
    Tensor::from_vec(shape, data)
}

fn noise_inner(clean: &Tensor<f32>, spec: &NoiseSpec, rng: &mut Rng, clip: bool) -> Result<Tensor<f32>> {
    let (_, _, h, w) = clean.dims4()?;
    if let NoiseSpec::Field(f) = spec {
        if f.dims() != (h, w) {
            return Err(Error::Shape(format!("noise field {:?} does not match image {h}×{w}", f.dims())));
        }
    }
    if let NoiseSpec::Scalar(s) = spec {
        if !(*s >= 0.0) {
            return Err(Error::invalid(format!("noise level must be non-negative, got {s}")));
        }
    }
    let plane = h * w;
    let mut out = clean.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let sigma = spec.sigma_at(i % plane) / 255.0;
        let noisy = *v as f64 + sigma * rng.gaussian();
        *v = if clip { noisy.clamp(0.0, 1.0) as f32 } else { noisy as f32 };
    }
    Ok(out)
}

/// `clean + n` with `n ~ N(0, (σ/255)²)` per pixel, clipped to `[0, 1]`.
pub fn add_noise(clean: &Tensor<f32>, spec: &NoiseSpec, rng: &mut Rng) -> Result<Tensor<f32>> {
    noise_inner(clean, spec, rng, true)
}

/// As [`add_noise`] without the final clipping.
pub fn add_noise_unclipped(clean: &Tensor<f32>, spec: &NoiseSpec, rng: &mut Rng) -> Result<Tensor<f32>> {
    noise_inner(clean, spec, rng, false)
}

/// Field growing linearly down the rows from `σc − 10` to `σc + 10`.
pub fn row_linear_field(h: usize, w: usize, sigma_c: f64) -> Result<NoiseField> {
    if h < 2 {
        return Err(Error::invalid(format!("row-linear field needs at least 2 rows, got {h}")));
    }
    if sigma_c < 10.0 {
        return Err(Error::invalid(format!("central noise level {sigma_c} < 10 would make the field negative")));
    }
    let mut sigma = Vec::with_capacity(h * w);
    for r in 0..h {
        let s = sigma_c - 10.0 + 20.0 * r as f64 / (h - 1) as f64;
        sigma.extend(std::iter::repeat_n(s, w));
    }
    NoiseField::new(h, w, sigma)
}

/// Smooth oriented gratings plus a few hard-edged rectangles, in `[0, 1]`.
///
/// Stands in for natural-image patches where only structure (edges, smooth
/// regions, varying contrast) matters.
pub fn gen_texture(channels: usize, h: usize, w: usize, rng: &mut Rng) -> Result<Tensor<f32>> {
    let mut plane = vec![0.0f64; h * w];
    let gratings = 2 + (rng.uniform() * 2.0) as usize;
    for _ in 0..gratings {
        let theta = rng.uniform_in(0.0, std::f64::consts::PI);
        let freq = rng.uniform_in(0.05, 0.6);
        let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
        let amp = rng.uniform_in(0.05, 0.2);
        let (c, s) = (theta.cos(), theta.sin());
        for i in 0..h {
            for j in 0..w {
                plane[i * w + j] += amp * (freq * (c * j as f64 + s * i as f64) + phase).sin();
            }
        }
    }
    for _ in 0..2 {
        let (i0, j0) = ((rng.uniform() * h as f64) as usize, (rng.uniform() * w as f64) as usize);
        let (i1, j1) = (i0 + 1 + (rng.uniform() * h as f64) as usize, j0 + 1 + (rng.uniform() * w as f64) as usize);
        let step = rng.uniform_in(-0.3, 0.3);
        for i in i0..i1.min(h) {
            for j in j0..j1.min(w) {
                plane[i * w + j] += step;
            }
        }
    }
    let base = rng.uniform_in(0.35, 0.65);
    let mut data = Vec::with_capacity(channels * h * w);
    for ch in 0..channels {
        let tint = if channels > 1 { rng.uniform_in(-0.05, 0.05) + 0.02 * ch as f64 } else { 0.0 };
        data.extend(plane.iter().map(|v| (base + tint + v).clamp(0.0, 1.0) as f32));
    }
    Tensor::from_vec(&[1, channels, h, w], data)
}

/// Clean patches with their current noisy views.
///
/// Noisy views are a pure function of `(seed, epoch, item)`; clean patches of
/// `(seed, item)`.
#[derive(Debug, Clone)]
pub struct Dataset {
    dims: [usize; 3],
    clean: Vec<f32>,
    sigmas: Vec<f64>,
    noisy: Vec<f32>,
    noise_range: [f64; 2],
    seed: u64,
    epoch: usize,
}

impl Dataset {
    /// Training set of Gaussian-prior patches, with epoch-0 noise applied.
    pub fn synthetic(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let [h, w] = config.train_patch;
        let mut clean = Vec::with_capacity(config.train_count * h * w);
        for i in 0..config.train_count {
            let mut rng = Rng::stream(config.seed, &[tag::CLEAN, i as u64]);
            clean.extend_from_slice(gen_clean(&[1, 1, h, w], config, &mut rng)?.data());
        }
        Self::from_clean_data([1, h, w], clean, config.noise_range, config.seed)
    }

    /// Training set of procedural texture patches.
    pub fn textures(count: usize, dims: [usize; 3], noise_range: [f64; 2], seed: u64) -> Result<Self> {
        let [c, h, w] = dims;
        let mut clean = Vec::with_capacity(count * c * h * w);
        for i in 0..count {
            let mut rng = Rng::stream(seed, &[tag::TEXTURE, i as u64]);
            clean.extend_from_slice(gen_texture(c, h, w, &mut rng)?.data());
        }
        Self::from_clean_data(dims, clean, noise_range, seed)
    }

    pub fn from_clean_data(dims: [usize; 3], clean: Vec<f32>, noise_range: [f64; 2], seed: u64) -> Result<Self> {
        let item: usize = dims.iter().product();
        if item == 0 || clean.is_empty() || clean.len() % item != 0 {
            return Err(Error::Shape(format!("{} values do not split into {dims:?} items", clean.len())));
        }
        if clean.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("clean values must lie in [0, 1]"));
        }
        if !(noise_range[0] >= 0.0 && noise_range[0] <= noise_range[1]) {
            return Err(Error::invalid(format!("bad noise range {noise_range:?}")));
        }
        let n = clean.len() / item;
        let mut ds = Self {
            dims,
            noisy: clean.clone(),
            clean,
            sigmas: vec![0.0; n],
            noise_range,
            seed,
            epoch: 0,
        };
        ds.regenerate()?;
        Ok(ds)
    }

    fn regenerate(&mut self) -> Result<()> {
        let [c, h, w] = self.dims;
        let item = c * h * w;
        let mut sigma_rng = Rng::stream(self.seed, &[tag::SIGMA, self.epoch as u64]);
        for i in 0..self.len() {
            let sigma = sigma_rng.uniform_in(self.noise_range[0], self.noise_range[1]);
            self.sigmas[i] = sigma;
            let mut rng = Rng::stream(self.seed, &[tag::NOISE, self.epoch as u64, i as u64]);
            let clean = Tensor::from_vec(&[1, c, h, w], self.clean[i * item..(i + 1) * item].to_vec())?;
            let noisy = add_noise(&clean, &NoiseSpec::Scalar(sigma), &mut rng)?;
            self.noisy[i * item..(i + 1) * item].copy_from_slice(noisy.data());
        }
        Ok(())
    }

    /// Moves to the next epoch: fresh noise level and fresh noise for every item.
    pub fn resample_epoch(&mut self) -> Result<()> {
        self.epoch += 1;
        self.regenerate()
    }

    pub fn len(&self) -> usize {
        self.sigmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigmas.is_empty()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn item_dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn noise_range(&self) -> [f64; 2] {
        self.noise_range
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.sigmas[i]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    fn item_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn clean_item(&self, i: usize) -> &[f32] {
        let n = self.item_len();
        &self.clean[i * n..(i + 1) * n]
    }

    pub fn noisy_item(&self, i: usize) -> &[f32] {
        let n = self.item_len();
        &self.noisy[i * n..(i + 1) * n]
    }

    /// Gathers `(noisy, clean)` batches for the given item indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let [c, h, w] = self.dims;
        let n = self.item_len();
        let mut noisy = Vec::with_capacity(indices.len() * n);
        let mut clean = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            noisy.extend_from_slice(self.noisy_item(i));
            clean.extend_from_slice(self.clean_item(i));
        }
        let shape = [indices.len(), c, h, w];
        Ok((Tensor::from_vec(&shape, noisy)?, Tensor::from_vec(&shape, clean)?))
    }
}
