//! PSNR, SSIM, the pooled two-sample t-test, and the benchmark runners.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::bayes::{fuse_image, GaussianPrior, SnrMap, PSNR_SATURATION_DB};
use crate::error::{Error, Result};
use crate::io::Stanza;
use crate::models::Denoiser;
use crate::rng::{tag, Rng};
use crate::synth::{add_noise, add_noise_unclipped, gen_clean, row_linear_field, NoiseField, NoiseSpec, SynthConfig};
use crate::tensor::Tensor;

pub fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.check_same_shape(b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.len() as f64)
}

/// `10·log10(peak²/mse)`, saturating at [`PSNR_SATURATION_DB`] for identical inputs.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("peak must be positive, got {peak}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_SATURATION_DB);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Per-item luminance planes (`0.299 R + 0.587 G + 0.114 B` for color).
fn luminance(t: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
    let (b, c, h, w) = t.dims4()?;
    let plane = h * w;
    let d = t.data();
    (0..b)
        .map(|i| {
            let item = &d[i * c * plane..(i + 1) * c * plane];
            match c {
                1 => Ok(item.iter().map(|&v| v as f64).collect()),
                3 => Ok((0..plane)
                    .map(|p| 0.299 * item[p] as f64 + 0.587 * item[plane + p] as f64 + 0.114 * item[2 * plane + p] as f64)
                    .collect()),
                _ => Err(Error::Shape(format!("SSIM needs 1 or 3 channels, got {c}"))),
            }
        })
        .collect()
}

/// Valid-mode separable filtering with the SSIM window.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let src = &x[r * w..(r + 1) * w];
        for c in 0..ow {
            rows[r * ow + c] = k.iter().zip(&src[c..c + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for (t, kt) in k.iter().enumerate() {
            let src = &rows[(r + t) * ow..(r + t + 1) * ow];
            for (o, s) in out[r * ow..(r + 1) * ow].iter_mut().zip(src) {
                *o += kt * s;
            }
        }
    }
    out
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_window();
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(x, h, w, &k);
    let my = filter_valid(y, h, w, &k);
    let exx = filter_valid(&prod(x, x), h, w, &k);
    let eyy = filter_valid(&prod(y, y), h, w, &k);
    let exy = filter_valid(&prod(x, y), h, w, &k);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let (vx, vy, cxy) = (exx[i] - ux * ux, eyy[i] - uy * uy, exy[i] - ux * uy);
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    total / mx.len() as f64
}

/// Single-scale SSIM on luminance for images in `[0, 1]`, averaged over the batch.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.check_same_shape(b)?;
    let (_, _, h, w) = a.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}")));
    }
    let (la, lb) = (luminance(a)?, luminance(b)?);
    let s: f64 = la.iter().zip(&lb).map(|(x, y)| ssim_plane(x, y, h, w)).sum();
    Ok(s / la.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

/// Two-tailed Student-t p-value, `I_{ν/(ν+t²)}(ν/2, 1/2)`.
pub fn student_t_two_tailed(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t))
}

/// Pooled-variance two-sample t-test for equal sample sizes.
///
/// Zero pooled variance gives `t = 0, p = 1` for equal means and `p = 0` otherwise.
pub fn t_test_two_sample(xs: &[f64], ys: &[f64]) -> Result<TTest> {
    let n = xs.len();
    if n != ys.len() {
        return Err(Error::invalid(format!("sample sizes differ: {n} vs {}", ys.len())));
    }
    if n < 2 {
        return Err(Error::invalid(format!("t-test needs at least 2 samples per group, got {n}")));
    }
    let nf = n as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / nf;
    let (mx, my) = (mean(xs), mean(ys));
    let ss = |v: &[f64], m: f64| v.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    let df = 2.0 * nf - 2.0;
    let pooled = (ss(xs, mx) + ss(ys, my)) / df;
    let diff = mx - my;
    if pooled == 0.0 {
        return Ok(if diff == 0.0 {
            TTest { t: 0.0, df, p: 1.0 }
        } else {
            TTest { t: diff.signum() * f64::INFINITY, df, p: 0.0 }
        });
    }
    let t = diff / (pooled * 2.0 / nf).sqrt();
    Ok(TTest { t, df, p: student_t_two_tailed(t, df) })
}

/// Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("pearson needs two equal-length samples of size ≥ 2"));
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// What a method may know about the noise of the image it is given.
pub struct NoiseInfo<'a> {
    /// Nominal level (0–255): the constant σ, or the central σc of a field.
    pub sigma: f64,
    /// True per-pixel levels when the noise is spatially varying.
    pub field: Option<&'a NoiseField>,
}

pub trait Method: Sync {
    fn name(&self) -> &str;
    fn denoise(&self, y: &Tensor<f32>, noise: &NoiseInfo<'_>) -> Result<Tensor<f32>>;
}

/// Closed-form fusion with the true prior and true (per-pixel if available) noise level.
pub struct OptimalFusion {
    pub prior: GaussianPrior,
}

impl Method for OptimalFusion {
    fn name(&self) -> &str {
        "optimal"
    }

    fn denoise(&self, y: &Tensor<f32>, noise: &NoiseInfo<'_>) -> Result<Tensor<f32>> {
        match noise.field {
            None => fuse_image(self.prior.mean, y, SnrMap::Uniform(self.prior.snr(noise.sigma / 255.0).0)),
            Some(f) => {
                let per_plane: Vec<f64> = f.values().iter().map(|&s| self.prior.snr(s / 255.0).0).collect();
                if y.len() % per_plane.len() != 0 {
                    return Err(Error::Shape("noise field does not tile the image".into()));
                }
                let map: Vec<f64> = per_plane.iter().cycle().take(y.len()).copied().collect();
                fuse_image(self.prior.mean, y, SnrMap::PerPixel(&map))
            }
        }
    }
}

/// Closed-form fusion that only knows the nominal (central) level.
pub struct OptimalCentral {
    pub prior: GaussianPrior,
}

impl Method for OptimalCentral {
    fn name(&self) -> &str {
        "optimal-central"
    }

    fn denoise(&self, y: &Tensor<f32>, noise: &NoiseInfo<'_>) -> Result<Tensor<f32>> {
        fuse_image(self.prior.mean, y, SnrMap::Uniform(self.prior.snr(noise.sigma / 255.0).0))
    }
}

/// Returns the noisy input unchanged.
pub struct Identity;

impl Method for Identity {
    fn name(&self) -> &str {
        "noisy"
    }

    fn denoise(&self, y: &Tensor<f32>, _: &NoiseInfo<'_>) -> Result<Tensor<f32>> {
        Ok(y.clone())
    }
}

/// A trained network; blind, so it ignores [`NoiseInfo`].
pub struct ModelMethod {
    pub name: String,
    pub model: Denoiser,
}

impl Method for ModelMethod {
    fn name(&self) -> &str {
        &self.name
    }

    fn denoise(&self, y: &Tensor<f32>, _: &NoiseInfo<'_>) -> Result<Tensor<f32>> {
        Ok(self.model.predict(y)?.denoised)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Constant noise level per image.
    Table1,
    /// Noise growing linearly down the rows, `σc ± 10`.
    Spatial,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Table1 => "table1",
            Protocol::Spatial => "spatial",
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(Protocol::Table1),
            "spatial" => Ok(Protocol::Spatial),
            other => Err(Error::invalid(format!("unknown protocol `{other}` (table1|spatial)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TestConfig {
    pub synth: SynthConfig,
    /// Clip noisy inputs and denoised outputs to `[0, 1]`.
    pub clip: bool,
    pub ssim: bool,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self { synth: SynthConfig::default(), clip: true, ssim: true }
    }
}

/// Clean test image `i`; independent of the noise level.
pub fn test_image(cfg: &SynthConfig, i: usize) -> Result<Tensor<f32>> {
    let [h, w] = cfg.test_image;
    gen_clean(&[1, 1, h, w], cfg, &mut Rng::stream(cfg.seed, &[tag::TEST, i as u64]))
}

/// Noise stream for test image `i` at nominal level `level`.
pub fn test_noise_rng(seed: u64, level: f64, i: usize) -> Rng {
    Rng::stream(seed, &[tag::TEST, tag::NOISE, level.to_bits(), i as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub sigma: f64,
    pub mean_psnr: f64,
    pub std_psnr: f64,
    pub mean_ssim: Option<f64>,
    pub n: usize,
    #[serde(skip)]
    pub psnrs: Vec<f64>,
}

/// Two-tailed p-values between every pair of methods at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueMatrix {
    pub sigma: f64,
    pub methods: Vec<String>,
    pub p: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub method: String,
    pub sigma: f64,
    pub image: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub seed: u64,
    pub clip: bool,
    pub test_count: usize,
    pub test_image: [usize; 2],
    pub rows: Vec<ReportRow>,
    pub p_values: Vec<PValueMatrix>,
    pub failures: Vec<Failure>,
}

#[derive(Serialize, Deserialize)]
struct ReportDocument {
    run: Option<Stanza>,
    report: EvalReport,
}

type ImageScores = Vec<std::result::Result<(f64, Option<f64>), String>>;

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Runs every method on identical noisy test images at each level.
///
/// `noise_for(level, h, w)` gives the noise to inject; the noise stream of each
/// image depends only on `(seed, level, image)`.
pub fn benchmark(
    methods: &[&dyn Method],
    levels: &[f64],
    protocol: &str,
    noise_for: impl Fn(f64, usize, usize) -> Result<NoiseSpec> + Sync,
    cfg: &TestConfig,
) -> Result<EvalReport> {
    cfg.synth.validate()?;
    if methods.is_empty() {
        return Err(Error::invalid("no methods to evaluate"));
    }
    let mut names: Vec<&str> = methods.iter().map(|m| m.name()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("method names must be unique"));
    }
    let [h, w] = cfg.synth.test_image;
    let count = cfg.synth.test_count;
    let mut report = EvalReport {
        protocol: protocol.to_string(),
        seed: cfg.synth.seed,
        clip: cfg.clip,
        test_count: count,
        test_image: cfg.synth.test_image,
        rows: Vec::new(),
        p_values: Vec::new(),
        failures: Vec::new(),
    };
    for &level in levels {
        let spec = noise_for(level, h, w)?;
        let field = match &spec {
            NoiseSpec::Field(f) => Some(f),
            NoiseSpec::Scalar(_) => None,
        };
        let info = NoiseInfo { sigma: level, field };
        let per_image: Vec<ImageScores> = (0..count)
            .into_par_iter()
            .map(|i| -> Result<ImageScores> {
                let clean = test_image(&cfg.synth, i)?;
                let mut rng = test_noise_rng(cfg.synth.seed, level, i);
                let noisy = if cfg.clip {
                    add_noise(&clean, &spec, &mut rng)?
                } else {
                    add_noise_unclipped(&clean, &spec, &mut rng)?
                };
                Ok(methods
                    .iter()
                    .map(|m| {
                        let out = m.denoise(&noisy, &info).map_err(|e| e.to_string())?;
                        let out = if cfg.clip { out.clamp(0.0, 1.0) } else { out };
                        let p = psnr(&out, &clean, 1.0).map_err(|e| e.to_string())?;
                        let s = if cfg.ssim { Some(ssim(&out, &clean).map_err(|e| e.to_string())?) } else { None };
                        Ok((p, s))
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;

        let mut ok: Vec<(String, Vec<f64>)> = Vec::new();
        for (k, m) in methods.iter().enumerate() {
            let mut psnrs = Vec::with_capacity(count);
            let mut ssims = Vec::with_capacity(count);
            let mut failed = None;
            for (i, scores) in per_image.iter().enumerate() {
                match &scores[k] {
                    Ok((p, s)) => {
                        psnrs.push(*p);
                        ssims.extend(s);
                    }
                    Err(msg) => {
                        failed = Some((i, msg.clone()));
                        break;
                    }
                }
            }
            if let Some((image, message)) = failed {
                report.failures.push(Failure { method: m.name().to_string(), sigma: level, image, message });
                continue;
            }
            let (mean_psnr, std_psnr) = mean_std(&psnrs);
            let mean_ssim = (!ssims.is_empty()).then(|| mean_std(&ssims).0);
            report.rows.push(ReportRow {
                method: m.name().to_string(),
                sigma: level,
                mean_psnr,
                std_psnr,
                mean_ssim,
                n: psnrs.len(),
                psnrs: psnrs.clone(),
            });
            ok.push((m.name().to_string(), psnrs));
        }
        let mut p = vec![vec![1.0; ok.len()]; ok.len()];
        for i in 0..ok.len() {
            for j in i + 1..ok.len() {
                let v = if ok[i].1.len() >= 2 { t_test_two_sample(&ok[i].1, &ok[j].1)?.p } else { f64::NAN };
                p[i][j] = v;
                p[j][i] = v;
            }
        }
        report.p_values.push(PValueMatrix { sigma: level, methods: ok.into_iter().map(|(n, _)| n).collect(), p });
    }
    Ok(report)
}

/// Constant noise level `σ` per image.
pub fn benchmark_table1(methods: &[&dyn Method], sigmas: &[f64], cfg: &TestConfig) -> Result<EvalReport> {
    benchmark(methods, sigmas, Protocol::Table1.as_str(), |s, _, _| Ok(NoiseSpec::Scalar(s)), cfg)
}

/// Row-linear noise over `[σc − 10, σc + 10]`.
pub fn benchmark_spatial(methods: &[&dyn Method], centers: &[f64], cfg: &TestConfig) -> Result<EvalReport> {
    benchmark(methods, centers, Protocol::Spatial.as_str(), |s, h, w| Ok(NoiseSpec::Field(row_linear_field(h, w, s)?)), cfg)
}

pub fn run_protocol(protocol: Protocol, methods: &[&dyn Method], levels: &[f64], cfg: &TestConfig) -> Result<EvalReport> {
    match protocol {
        Protocol::Table1 => benchmark_table1(methods, levels, cfg),
        Protocol::Spatial => benchmark_spatial(methods, levels, cfg),
    }
}

const CSV_HEADER: [&str; 6] = ["method", "sigma", "meanPSNR", "stdPSNR", "meanSSIM", "n"];

impl EvalReport {
    pub fn row(&self, method: &str, sigma: f64) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.method == method && r.sigma == sigma)
    }

    pub fn p_value(&self, sigma: f64, a: &str, b: &str) -> Option<f64> {
        let m = self.p_values.iter().find(|m| m.sigma == sigma)?;
        let i = m.methods.iter().position(|x| x == a)?;
        let j = m.methods.iter().position(|x| x == b)?;
        Some(m.p[i][j])
    }

    /// CSV with one row per (method, level), preceded by `#` provenance lines.
    pub fn write_csv(&self, mut out: impl Write, stanza: Option<&Stanza>) -> Result<()> {
        if let Some(s) = stanza {
            for line in s.comment_lines() {
                writeln!(out, "{line}")?;
            }
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                format!("{}", r.sigma),
                format!("{:.6}", r.mean_psnr),
                format!("{:.6}", r.std_psnr),
                r.mean_ssim.map(|s| format!("{s:.6}")).unwrap_or_default(),
                r.n.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the rows of a CSV written by [`EvalReport::write_csv`].
    pub fn read_csv_rows(input: impl Read) -> Result<Vec<ReportRow>> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != CSV_HEADER {
            return Err(Error::invalid(format!("unexpected report header {header:?}")));
        }
        let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| Error::invalid(format!("bad {what} `{s}`")));
        r.records()
            .map(|rec| {
                let rec = rec?;
                Ok(ReportRow {
                    method: rec[0].to_string(),
                    sigma: num(&rec[1], "sigma")?,
                    mean_psnr: num(&rec[2], "meanPSNR")?,
                    std_psnr: num(&rec[3], "stdPSNR")?,
                    mean_ssim: if rec[4].is_empty() { None } else { Some(num(&rec[4], "meanSSIM")?) },
                    n: rec[5].parse().map_err(|_| Error::invalid(format!("bad n `{}`", &rec[5])))?,
                    psnrs: Vec::new(),
                })
            })
            .collect()
    }

    pub fn write_json(&self, out: impl Write, stanza: Option<&Stanza>) -> Result<()> {
        let doc = ReportDocument { run: stanza.cloned(), report: self.clone() };
        serde_json::to_writer_pretty(out, &doc)?;
        Ok(())
    }

    pub fn read_json(input: impl Read) -> Result<(EvalReport, Option<Stanza>)> {
        let doc: ReportDocument = serde_json::from_reader(input)?;
        Ok((doc.report, doc.run))
    }
}

/// Aligned text table of report rows.
pub fn render_rows(rows: &[ReportRow]) -> String {
    let mut cells: Vec<[String; 6]> = vec![CSV_HEADER.map(str::to_string)];
    for r in rows {
        cells.push([
            r.method.clone(),
            format!("{}", r.sigma),
            format!("{:.3}", r.mean_psnr),
            format!("{:.3}", r.std_psnr),
            r.mean_ssim.map(|s| format!("{s:.4}")).unwrap_or_else(|| "-".into()),
            r.n.to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..6).map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, &w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Text rendering of a full report: the score table, then one p-value matrix per level.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = format!(
        "protocol {} | seed {} | {} images {}x{} | clip {}\n\n",
        report.protocol, report.seed, report.test_count, report.test_image[0], report.test_image[1], report.clip
    );
    out.push_str(&render_rows(&report.rows));
    for m in report.p_values.iter().filter(|m| m.methods.len() > 1) {
        let w = m.methods.iter().map(|s| s.len()).max().unwrap_or(0).max(8);
        let _ = writeln!(out, "\np-values, sigma {}", m.sigma);
        let _ = write!(out, "{:w$}", "");
        for name in &m.methods {
            let _ = write!(out, "  {name:>w$}");
        }
        out.push('\n');
        for (i, name) in m.methods.iter().enumerate() {
            let _ = write!(out, "{name:<w$}");
            for v in &m.p[i] {
                let _ = write!(out, "  {:>w$}", format!("{v:.4}"));
            }
            out.push('\n');
        }
    }
    for f in &report.failures {
        let _ = writeln!(out, "\nfailed: {} at sigma {} on image {}: {}", f.method, f.sigma, f.image, f.message);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::{analytic_optimal_psnr, simpson};
    use statrs::function::gamma::ln_gamma;

    fn img(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = Rng::new(seed);
        Tensor::from_vec(&[1, 1, h, w], (0..h * w).map(|_| rng.uniform() as f32).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = img(4, 4, 1);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_SATURATION_DB);
        let zero = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        let half = Tensor::<f32>::full(&[1, 1, 3, 3], 0.5);
        assert!((psnr(&zero, &half, 1.0).unwrap() - 6.0206).abs() < 1e-4);
        let b = img(4, 4, 2);
        let m = mse(&a, &b).unwrap();
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), 10.0 * (1.0 / m).log10());
        assert!(psnr(&a, &img(4, 5, 2), 1.0).is_err());
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    /// Direct windowed statistics per output position, no separability.
    fn ssim_oracle(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
        let mut g = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
        let mut s = 0.0;
        for (i, row) in g.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
                s += *v;
            }
        }
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..=h - SSIM_WINDOW {
            for c in 0..=w - SSIM_WINDOW {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let k = g[i][j] / s;
                        let (a, b) = (x[(r + i) * w + c + j], y[(r + i) * w + c + j]);
                        mx += k * a;
                        my += k * b;
                        xx += k * a * a;
                        yy += k * b * b;
                        xy += k * a * b;
                    }
                }
                let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_direct_windows() {
        let (h, w) = (17, 14);
        let a = img(h, w, 3);
        let b = a.zip_map(&img(h, w, 4), |x, y| 0.7 * x + 0.3 * y).unwrap();
        let f = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&f(&a), &f(&b), h, w)).abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_symmetry_and_size() {
        let a = img(16, 16, 5);
        let b = img(16, 16, 6);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!(ssim(&img(10, 16, 1), &img(10, 16, 2)).is_err());
    }

    #[test]
    fn ssim_color_uses_luminance() {
        let g = img(12, 12, 7);
        let rgb = Tensor::from_vec(&[1, 3, 12, 12], [g.data(), g.data(), g.data()].concat()).unwrap();
        let n = img(12, 12, 8);
        let rgb_n = Tensor::from_vec(&[1, 3, 12, 12], [n.data(), n.data(), n.data()].concat()).unwrap();
        assert!((ssim(&rgb, &rgb_n).unwrap() - ssim(&g, &n).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn ssim_orders_noise_levels() {
        let cfg = SynthConfig { test_image: [32, 32], ..SynthConfig::default() };
        let clean = test_image(&cfg, 0).unwrap();
        let mut rng = Rng::new(9);
        let light = add_noise(&clean, &NoiseSpec::Scalar(5.0), &mut rng).unwrap();
        let heavy = add_noise(&clean, &NoiseSpec::Scalar(75.0), &mut rng).unwrap();
        let (sl, sh) = (ssim(&clean, &light).unwrap(), ssim(&clean, &heavy).unwrap());
        assert!(sh < 0.5 * sl, "{sh} vs {sl}");
    }

    #[test]
    fn ssim_decreases_with_noise_sign_test() {
        let cfg = SynthConfig { test_image: [16, 16], ..SynthConfig::default() };
        let mut wins = 0;
        for i in 0..100 {
            let clean = test_image(&cfg, i).unwrap();
            let mut rng = Rng::stream(1, &[i as u64]);
            let a = add_noise(&clean, &NoiseSpec::Scalar(10.0), &mut rng).unwrap();
            let b = add_noise(&clean, &NoiseSpec::Scalar(20.0), &mut rng).unwrap();
            if ssim(&clean, &a).unwrap() > ssim(&clean, &b).unwrap() {
                wins += 1;
            }
        }
        // One-sided binomial tail P(X ≥ wins | p = 1/2) for 100 trials.
        let mut tail = 0.0;
        let mut c = 1.0f64;
        for k in 0..=100u32 {
            if k > 0 {
                c *= (101 - k) as f64 / k as f64;
            }
            if k >= wins {
                tail += c * 0.5f64.powi(100);
            }
        }
        assert!(tail < 0.01, "wins {wins}, tail {tail}");
    }

    /// `1 − 2∫₀^|t| f_ν` by Simpson's rule on the Student-t density.
    fn t_p_oracle(t: f64, df: f64) -> f64 {
        let ln_c = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
        let f = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
        1.0 - 2.0 * simpson(f, 0.0, t.abs(), 1 << 14)
    }

    #[test]
    fn t_test_hand_case() {
        let r = t_test_two_sample(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert!((r.t + 1.0).abs() < 1e-12);
        assert_eq!(r.df, 8.0);
        let oracle = t_p_oracle(-1.0, 8.0);
        assert!((oracle - 0.3466).abs() < 1e-4, "oracle {oracle}");
        assert!((r.p - oracle).abs() < 1e-9);
    }

    #[test]
    fn t_test_matches_quadrature() {
        for (t, df) in [(0.3, 4.0), (2.1, 10.0), (-3.5, 30.0), (1.96, 510.0)] {
            assert!((student_t_two_tailed(t, df) - t_p_oracle(t, df)).abs() < 1e-8, "t={t} df={df}");
        }
    }

    #[test]
    fn t_test_edge_cases() {
        let x = [1.0, 2.0, 4.0];
        let r = t_test_two_sample(&x, &x).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        assert_eq!(t_test_two_sample(&[2.0, 2.0], &[2.0, 2.0]).unwrap().p, 1.0);
        assert_eq!(t_test_two_sample(&[2.0, 2.0], &[3.0, 3.0]).unwrap().p, 0.0);
        assert!(t_test_two_sample(&[1.0], &[2.0]).is_err());
        assert!(t_test_two_sample(&[1.0, 2.0], &[2.0, 3.0, 4.0]).is_err());
    }

    #[test]
    fn pearson_examples() {
        // deviations (−1, 0, 1) and (−13/6, −1/6, 7/3): r = 4.5 / √(2 · 61/6)
        let r = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]).unwrap();
        assert!((r - 4.5 / (2.0f64 * 61.0 / 6.0).sqrt()).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[5.0, 7.0, 9.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    }

    fn small_cfg(count: usize, size: usize) -> TestConfig {
        TestConfig {
            synth: SynthConfig { test_image: [size, size], test_count: count, seed: 5, ..SynthConfig::default() },
            clip: true,
            ssim: true,
        }
    }

    fn prior() -> GaussianPrior {
        GaussianPrior::from_255(127.0, 25.0).unwrap()
    }

    #[test]
    fn self_comparison_and_determinism() {
        let opt = OptimalFusion { prior: prior() };
        struct Alias(OptimalFusion);
        impl Method for Alias {
            fn name(&self) -> &str {
                "alias"
            }
            fn denoise(&self, y: &Tensor<f32>, n: &NoiseInfo<'_>) -> Result<Tensor<f32>> {
                self.0.denoise(y, n)
            }
        }
        let alias = Alias(OptimalFusion { prior: prior() });
        let cfg = small_cfg(6, 24);
        let r = benchmark_table1(&[&opt, &alias, &Identity], &[5.0, 50.0], &cfg).unwrap();
        for s in [5.0, 50.0] {
            assert_eq!(r.p_value(s, "optimal", "alias"), Some(1.0));
            assert!(r.row("optimal", s).unwrap().mean_psnr > r.row("noisy", s).unwrap().mean_psnr);
        }
        assert!(r.p_value(50.0, "optimal", "noisy").unwrap() < 0.05);
        let again = benchmark_table1(&[&opt, &alias, &Identity], &[5.0, 50.0], &cfg).unwrap();
        assert_eq!(r, again);
        assert!(benchmark_table1(&[&opt, &opt], &[5.0], &cfg).is_err());
    }

    #[test]
    fn optimal_near_reference_at_25() {
        let r = benchmark_table1(&[&OptimalFusion { prior: prior() }], &[25.0], &small_cfg(8, 128)).unwrap();
        let p = r.row("optimal", 25.0).unwrap().mean_psnr;
        assert!((p - 23.185).abs() < 0.1, "{p}");
    }

    #[test]
    fn unclipped_matches_analytic() {
        let mut cfg = small_cfg(8, 128);
        cfg.clip = false;
        cfg.ssim = false;
        let r = benchmark_table1(&[&OptimalFusion { prior: prior() }], &[10.0], &cfg).unwrap();
        let p = r.row("optimal", 10.0).unwrap().mean_psnr;
        assert!((p - analytic_optimal_psnr(25.0, 10.0, 255.0).unwrap()).abs() < 0.05);
        assert!(r.rows[0].mean_ssim.is_none());
    }

    #[test]
    fn spatial_oracle_ordering_and_reduction() {
        let cfg = small_cfg(6, 64);
        let (opt, central) = (OptimalFusion { prior: prior() }, OptimalCentral { prior: prior() });
        let r = benchmark_spatial(&[&opt, &central], &[25.0, 50.0], &cfg).unwrap();
        for s in [25.0, 50.0] {
            let (a, b) = (r.row("optimal", s).unwrap(), r.row("optimal-central", s).unwrap());
            assert!(a.mean_psnr > b.mean_psnr, "σc {s}: {} vs {}", a.mean_psnr, b.mean_psnr);
        }
        let constant = benchmark(
            &[&opt],
            &[25.0],
            "table1",
            |s, h, w| Ok(NoiseSpec::Field(NoiseField::constant(h, w, s)?)),
            &cfg,
        )
        .unwrap();
        let t1 = benchmark_table1(&[&opt], &[25.0], &cfg).unwrap();
        assert_eq!(constant.rows, t1.rows);
        assert!(benchmark_spatial(&[&opt], &[5.0], &cfg).is_err());
    }

    #[test]
    fn failing_method_is_reported() {
        struct Broken;
        impl Method for Broken {
            fn name(&self) -> &str {
                "broken"
            }
            fn denoise(&self, _: &Tensor<f32>, _: &NoiseInfo<'_>) -> Result<Tensor<f32>> {
                Err(Error::invalid("no"))
            }
        }
        let r = benchmark_table1(&[&Identity, &Broken], &[15.0], &small_cfg(3, 16)).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].image, 0);
    }

    #[test]
    fn csv_and_json_round_trip() {
        let r = benchmark_table1(&[&OptimalFusion { prior: prior() }, &Identity], &[5.0, 25.0], &small_cfg(3, 16)).unwrap();
        let stanza = Stanza::new(5, "abc");
        let mut buf = Vec::new();
        r.write_csv(&mut buf, Some(&stanza)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with('#'));
        assert!(text.contains("method,sigma,meanPSNR,stdPSNR,meanSSIM,n\n"));
        let rows = EvalReport::read_csv_rows(buf.as_slice()).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[1].method, "noisy");
        assert!((rows[0].mean_psnr - r.rows[0].mean_psnr).abs() < 1e-6);

        let mut js = Vec::new();
        r.write_json(&mut js, Some(&stanza)).unwrap();
        let (back, run) = EvalReport::read_json(js.as_slice()).unwrap();
        assert_eq!(run.unwrap().seed, 5);
        assert_eq!(back.p_values, r.p_values);
        let text = render_report(&back);
        assert!(text.contains("optimal") && text.contains("p-values, sigma 25"));
    }
}
