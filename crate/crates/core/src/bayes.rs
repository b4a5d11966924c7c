//! Closed-form Bayesian denoising under a Gaussian prior and additive Gaussian noise.
//!
//! All intensities and standard deviations here are in normalized `[0, 1]`
//! units. Noise levels quoted on the 0–255 scale go through [`from_255`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR reported when the error is exactly zero.
pub const PSNR_SATURATION_DB: f64 = 99.0;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn from_255(v: f64) -> f64 {
    v / 255.0
}

/// Prior `N(mean, std²)` on clean intensities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: f64,
    pub std: f64,
}

impl GaussianPrior {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::invalid(format!("prior std must be positive, got {std}")));
        }
        Ok(Self { mean, std })
    }

    /// Builds a prior from 0–255 values.
    pub fn from_255(mean: f64, std: f64) -> Result<Self> {
        Self::new(mean / 255.0, std / 255.0)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        gaussian_pdf(x, self.mean, self.std)
    }

    pub fn snr(&self, sigma_n: f64) -> Snr {
        Snr::from_sigmas(self.std, sigma_n)
    }
}

/// Signal-to-noise ratio `σx² / σn²`; infinite when the noise vanishes.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Snr(pub f64);

impl Snr {
    pub fn from_sigmas(sigma_x: f64, sigma_n: f64) -> Self {
        if sigma_n == 0.0 {
            Snr(f64::INFINITY)
        } else {
            Snr((sigma_x * sigma_x) / (sigma_n * sigma_n))
        }
    }

    pub fn weight(self) -> f64 {
        snr_weight(self.0)
    }
}

fn gaussian_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    INV_SQRT_2PI / std * (-0.5 * z * z).exp()
}

fn require_noise(sigma_n: f64) -> Result<()> {
    if sigma_n > 0.0 && sigma_n.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("density undefined for noise std {sigma_n}")))
    }
}

/// `p(y | x)`: density of `N(x, σn²)` at `y`.
pub fn likelihood_pdf(y: f64, x: f64, sigma_n: f64) -> Result<f64> {
    require_noise(sigma_n)?;
    Ok(gaussian_pdf(y, x, sigma_n))
}

/// `p(y)`: the prior convolved with the noise, `N(x̄, σx² + σn²)`.
pub fn evidence_pdf(y: f64, prior: &GaussianPrior, sigma_n: f64) -> Result<f64> {
    if !(sigma_n >= 0.0) {
        return Err(Error::invalid(format!("noise std must be non-negative, got {sigma_n}")));
    }
    let s = (prior.std * prior.std + sigma_n * sigma_n).sqrt();
    Ok(gaussian_pdf(y, prior.mean, s))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub mean: f64,
    pub var: f64,
}

pub fn posterior_params(prior: &GaussianPrior, y: f64, sigma_n: f64) -> Posterior {
    let vx = prior.std * prior.std;
    let vn = sigma_n * sigma_n;
    Posterior { mean: (vn * prior.mean + vx * y) / (vx + vn), var: vx * vn / (vx + vn) }
}

/// `p(x | y)` from the closed-form posterior.
pub fn posterior_pdf(x: f64, prior: &GaussianPrior, y: f64, sigma_n: f64) -> Result<f64> {
    require_noise(sigma_n)?;
    let p = posterior_params(prior, y, sigma_n);
    Ok(gaussian_pdf(x, p.mean, p.var.sqrt()))
}

/// `f(S) = 1 / (1 + S)`, the weight given to the prior mean.
pub fn snr_weight(s: f64) -> f64 {
    1.0 / (1.0 + s)
}

/// Optimal fusion of prior mean and observation: `x̄/(1+S) + y/(1+1/S)`.
pub fn fuse(prior_mean: f64, y: f64, s: f64) -> f64 {
    if s.is_infinite() {
        return y;
    }
    prior_mean / (1.0 + s) + y / (1.0 + 1.0 / s)
}

/// Per-pixel SNR for [`fuse_image`].
pub enum SnrMap<'a> {
    Uniform(f64),
    PerPixel(&'a [f64]),
}

/// Applies [`fuse`] to every pixel of `y`.
pub fn fuse_image(prior_mean: f64, y: &Tensor<f32>, snr: SnrMap<'_>) -> Result<Tensor<f32>> {
    let mut out = y.clone();
    match snr {
        SnrMap::Uniform(s) => {
            for v in out.data_mut() {
                *v = fuse(prior_mean, *v as f64, s) as f32;
            }
        }
        SnrMap::PerPixel(s) => {
            if s.len() != y.len() {
                return Err(Error::Shape(format!("SNR map has {} entries for {} pixels", s.len(), y.len())));
            }
            for (v, &si) in out.data_mut().iter_mut().zip(s) {
                *v = fuse(prior_mean, *v as f64, si) as f32;
            }
        }
    }
    Ok(out)
}

/// Brute-force MAP: the grid point maximizing `p(y|x)·p(x)`.
///
/// Searches the hull of `[0, 1]`, `x̄` and `y`, which always contains the
/// maximizer. For `σn = 0` the answer is `y`.
pub fn map_grid_oracle(prior: &GaussianPrior, y: f64, sigma_n: f64, grid_step: f64) -> Result<f64> {
    if !(grid_step > 0.0) {
        return Err(Error::invalid(format!("grid step must be positive, got {grid_step}")));
    }
    if sigma_n == 0.0 {
        return Ok(y);
    }
    let lo = prior.mean.min(y).min(0.0);
    let hi = prior.mean.max(y).max(1.0);
    let n = ((hi - lo) / grid_step).ceil() as usize;
    let (vx, vn) = (prior.std * prior.std, sigma_n * sigma_n);
    // Log of the unnormalized posterior numerator.
    let score = |x: f64| -(y - x) * (y - x) / (2.0 * vn) - (x - prior.mean) * (x - prior.mean) / (2.0 * vx);
    let mut best = (lo, f64::NEG_INFINITY);
    for i in 0..=n {
        let x = lo + i as f64 * grid_step;
        let s = score(x);
        if s > best.1 {
            best = (x, s);
        }
    }
    Ok(best.0)
}

/// Composite Simpson's rule with `intervals` (rounded up to even) subintervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, intervals: usize) -> f64 {
    let n = intervals.max(2).next_multiple_of(2);
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Posterior `p(x|y)` assembled as `p(y|x)·p(x)/p(y)`, independent of [`posterior_params`].
pub fn bayes_ratio_pdf(x: f64, prior: &GaussianPrior, y: f64, sigma_n: f64) -> Result<f64> {
    Ok(likelihood_pdf(y, x, sigma_n)? * prior.pdf(x) / evidence_pdf(y, prior, sigma_n)?)
}

/// Posterior mean `∫ x·p(x|y) dx` by quadrature of the Bayes ratio.
pub fn posterior_mean_quadrature(prior: &GaussianPrior, y: f64, sigma_n: f64) -> Result<f64> {
    require_noise(sigma_n)?;
    let spread = 8.0 * prior.std.min(sigma_n);
    let (a, b) = (prior.mean.min(y) - spread, prior.mean.max(y) + spread);
    let f = |x: f64| x * bayes_ratio_pdf(x, prior, y, sigma_n).unwrap_or(0.0);
    Ok(simpson(f, a, b, 1 << 16))
}

/// PSNR of the optimal estimator, whose expected squared error is the posterior variance.
pub fn analytic_optimal_psnr(sigma_x: f64, sigma_n: f64, peak: f64) -> Result<f64> {
    if !(sigma_x > 0.0) || !(sigma_n >= 0.0) || !(peak > 0.0) {
        return Err(Error::invalid(format!(
            "need sigma_x > 0, sigma_n >= 0, peak > 0 (got {sigma_x}, {sigma_n}, {peak})"
        )));
    }
    if sigma_n == 0.0 {
        return Ok(PSNR_SATURATION_DB);
    }
    let (vx, vn) = (sigma_x * sigma_x, sigma_n * sigma_n);
    Ok(10.0 * (peak * peak * (vx + vn) / (vx * vn)).log10())
}
