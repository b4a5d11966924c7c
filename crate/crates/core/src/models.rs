//! The three denoising architectures and their training losses.
//!
//! * `Residual`: a plain CNN predicts the noise, which is subtracted from the input.
//! * `Fusion`: two CNNs predict the prior mean `a` and the SNR weight `b`, combined
//!   as `a·b + y·(1 − b)`.
//! * `Buifd`: a prior CNN and a sigmoid-capped noise-level CNN feed a product-fusion
//!   stack into a few purely linear convolutions.
//!
//! Every branch is a stack of 3×3 convolutions; blocks between the first and the
//! last carry batch norm and ReLU.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, NormStats, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParameterSet};
use crate::rng::{tag, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Residual,
    Fusion,
    Buifd,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Residual => "residual",
            Variant::Fusion => "fusion",
            Variant::Buifd => "buifd",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(Variant::Residual),
            "fusion" => Ok(Variant::Fusion),
            "buifd" => Ok(Variant::Buifd),
            other => Err(Error::invalid(format!("unknown variant `{other}` (residual|fusion|buifd)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Blocks in the main (noise / prior / weight) CNNs.
    pub backbone_depth: usize,
    /// Conv+BN+ReLU blocks in the noise-level head, before its output conv.
    pub noise_head_depth: usize,
    pub width: usize,
    pub fusion_channels: usize,
    pub fusion_layers: usize,
    pub channels: usize,
    /// Largest training noise level (0–255); the noise head's output 1 maps to it.
    pub sigma_max_train: f64,
    /// Weight of the reconstruction term in the fusion loss.
    pub alpha: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper(Variant::Fusion)
    }
}

impl ModelConfig {
    /// Full-size architecture (18 blocks, 64 features).
    pub fn paper(variant: Variant) -> Self {
        Self {
            variant,
            backbone_depth: 18,
            noise_head_depth: 5,
            width: 64,
            fusion_channels: 16,
            fusion_layers: 3,
            channels: 1,
            sigma_max_train: 25.0,
            alpha: 0.1,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Desk-scale architecture used by the toy experiments.
    pub fn desk(variant: Variant) -> Self {
        Self { backbone_depth: 4, noise_head_depth: 3, width: 16, ..Self::paper(variant) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.backbone_depth == 0 || self.noise_head_depth == 0 || self.fusion_layers == 0 {
            return bad("depths and fusion layer count must be at least 1".into());
        }
        if self.width == 0 || self.fusion_channels == 0 || self.channels == 0 {
            return bad("widths and channel counts must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.sigma_max_train > 0.0) {
            return bad(format!("sigma_max_train must be positive, got {}", self.sigma_max_train));
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return bad("batch-norm eps must be positive and momentum in (0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone)]
struct ConvLayer {
    name: String,
    in_ch: usize,
    out_ch: usize,
    bias: bool,
    bn: bool,
    relu: bool,
}

impl ConvLayer {
    fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }
    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }
    fn gamma(&self) -> String {
        format!("{}.gamma", self.name)
    }
    fn beta(&self) -> String {
        format!("{}.beta", self.name)
    }
}

fn layer(prefix: &str, i: usize, in_ch: usize, out_ch: usize, bn: bool, relu: bool) -> ConvLayer {
    // A bias ahead of batch norm would be cancelled by the centering.
    ConvLayer { name: format!("{prefix}.{i}"), in_ch, out_ch, bias: !bn, bn, relu }
}

/// conv+ReLU, (depth−2)×(conv+BN+ReLU), conv.
fn backbone(prefix: &str, depth: usize, in_ch: usize, width: usize, out_ch: usize) -> Vec<ConvLayer> {
    if depth == 1 {
        return vec![layer(prefix, 0, in_ch, out_ch, false, false)];
    }
    let mut v = vec![layer(prefix, 0, in_ch, width, false, true)];
    for i in 1..depth - 1 {
        v.push(layer(prefix, i, width, width, true, true));
    }
    v.push(layer(prefix, depth - 1, width, out_ch, false, false));
    v
}

/// depth×(conv+BN+ReLU), then an output conv (the sigmoid is applied by the caller).
fn noise_head(prefix: &str, depth: usize, in_ch: usize, width: usize, out_ch: usize) -> Vec<ConvLayer> {
    let mut v: Vec<ConvLayer> =
        (0..depth).map(|i| layer(prefix, i, if i == 0 { in_ch } else { width }, width, true, true)).collect();
    v.push(layer(prefix, depth, width, out_ch, false, false));
    v
}

/// Purely linear convolutions.
fn linear_stack(prefix: &str, layers: usize, in_ch: usize, width: usize, out_ch: usize) -> Vec<ConvLayer> {
    (0..layers)
        .map(|i| {
            let cin = if i == 0 { in_ch } else { width };
            let cout = if i + 1 == layers { out_ch } else { width };
            layer(prefix, i, cin, cout, false, false)
        })
        .collect()
}

/// Number of channel groups in the product-fusion stack.
pub const PRODUCT_FUSION_GROUPS: usize = 5;

#[derive(Debug, Clone)]
struct Architecture {
    main: Vec<ConvLayer>,
    aux: Vec<ConvLayer>,
    fusion: Vec<ConvLayer>,
}

impl Architecture {
    fn of(cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        match cfg.variant {
            Variant::Residual => Self {
                main: backbone("noise", cfg.backbone_depth, c, cfg.width, c),
                aux: vec![],
                fusion: vec![],
            },
            Variant::Fusion => Self {
                main: backbone("prior", cfg.backbone_depth, c, cfg.width, c),
                aux: backbone("weight", cfg.backbone_depth, c, cfg.width, c),
                fusion: vec![],
            },
            Variant::Buifd => Self {
                main: backbone("prior", cfg.backbone_depth, c, cfg.width, c),
                aux: noise_head("level", cfg.noise_head_depth, c, cfg.width, c),
                fusion: linear_stack("fuse", cfg.fusion_layers, PRODUCT_FUSION_GROUPS * c, cfg.fusion_channels, c),
            },
        }
    }

    fn layers(&self) -> impl Iterator<Item = &ConvLayer> {
        self.main.iter().chain(&self.aux).chain(&self.fusion)
    }
}

/// Intermediate and final outputs of a forward pass, as tape handles.
#[derive(Debug, Clone, Copy)]
pub struct OutputVars {
    pub denoised: Var,
    /// Prior prediction `a` / `f_P`.
    pub prior: Option<Var>,
    /// SNR weight `b` (fusion) or normalized noise level `f_N` (buifd).
    pub weight: Option<Var>,
}

pub struct Forward {
    pub outputs: OutputVars,
    pub bn_updates: Vec<(String, BatchStats<f32>)>,
}

/// Materialized outputs of an inference pass.
#[derive(Debug, Clone)]
pub struct ModelOutputs {
    pub denoised: Tensor<f32>,
    pub prior: Option<Tensor<f32>>,
    pub weight: Option<Tensor<f32>>,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    config: ModelConfig,
    arch: Architecture,
    params: ParameterSet<f32>,
}

impl Denoiser {
    /// Fresh model: kernels uniform in ±√(1/(Cin·9)), biases and β zero, γ one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::of(&config);
        let mut rng = Rng::stream(seed, &[tag::INIT]);
        let mut params = ParameterSet::new();
        for l in arch.layers() {
            let bound = (1.0 / (l.in_ch * 9) as f64).sqrt();
            let n = l.out_ch * l.in_ch * 9;
            let w = (0..n).map(|_| rng.uniform_in(-bound, bound) as f32).collect();
            params.insert(l.weight(), Tensor::from_vec(&[l.out_ch, l.in_ch, 3, 3], w)?)?;
            if l.bias {
                params.insert(l.bias_name(), Tensor::zeros(&[l.out_ch]))?;
            }
            if l.bn {
                params.insert(l.gamma(), Tensor::ones(&[l.out_ch]))?;
                params.insert(l.beta(), Tensor::zeros(&[l.out_ch]))?;
            }
        }
        Ok(Self { config, arch, params })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParameterSet<f32>) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Config(format!(
                "{} parameters given, architecture needs {}",
                params.len(),
                reference.params.len()
            )));
        }
        for p in reference.params.iter() {
            let got = params.get(&p.name)?;
            if got.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{}` has shape {:?}, architecture needs {:?}",
                    p.name,
                    got.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(Self { config, arch: reference.arch, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn params(&self) -> &ParameterSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<f32> {
        &mut self.params
    }

    /// Names of the batch-norm layers, i.e. the keys of the running statistics.
    pub fn bn_layers(&self) -> Vec<String> {
        self.arch.layers().filter(|l| l.bn).map(|l| l.name.clone()).collect()
    }

    fn run_stack(
        &self,
        tape: &mut Tape<f32>,
        bound: &Bound,
        layers: &[ConvLayer],
        mut x: Var,
        mode: Mode,
        updates: &mut Vec<(String, BatchStats<f32>)>,
    ) -> Result<Var> {
        for l in layers {
            let bias = if l.bias { Some(bound.var(&l.bias_name())?) } else { None };
            x = tape.conv2d(x, bound.var(&l.weight())?, bias)?;
            if l.bn {
                let (gamma, beta) = (bound.var(&l.gamma())?, bound.var(&l.beta())?);
                let eps = self.config.bn_eps as f32;
                x = match mode {
                    Mode::Train => {
                        let (y, stats) = tape.batch_norm(x, gamma, beta, NormStats::Batch, eps)?;
                        updates.push((l.name.clone(), stats.expect("batch statistics in train mode")));
                        y
                    }
                    Mode::Infer => {
                        let rs = self.params.running(&l.name).ok_or_else(|| Error::MissingRunningStats(l.name.clone()))?;
                        let stats = NormStats::Fixed { mean: rs.mean.data(), var: rs.var.data() };
                        tape.batch_norm(x, gamma, beta, stats, eps)?.0
                    }
                };
            }
            if l.relu {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    fn check_input(&self, tape: &Tape<f32>, y: Var) -> Result<()> {
        let (_, c, _, _) = tape.value(y).dims4()?;
        if c != self.config.channels {
            return Err(Error::Shape(format!("model expects {} channels, input has {c}", self.config.channels)));
        }
        Ok(())
    }

    /// Records a forward pass of `y` on `tape`, using parameters bound with
    /// [`ParameterSet::bind`] or [`ParameterSet::bind_frozen`].
    pub fn forward(&self, tape: &mut Tape<f32>, bound: &Bound, y: Var, mode: Mode) -> Result<Forward> {
        self.check_input(tape, y)?;
        let mut updates = Vec::new();
        let outputs = match self.config.variant {
            Variant::Residual => self.forward_residual(tape, bound, y, mode, &mut updates)?,
            Variant::Fusion => self.forward_fusion_net(tape, bound, y, mode, &mut updates)?,
            Variant::Buifd => self.forward_buifd(tape, bound, y, mode, &mut updates)?,
        };
        Ok(Forward { outputs, bn_updates: updates })
    }

    fn forward_residual(
        &self,
        tape: &mut Tape<f32>,
        bound: &Bound,
        y: Var,
        mode: Mode,
        updates: &mut Vec<(String, BatchStats<f32>)>,
    ) -> Result<OutputVars> {
        let noise = self.run_stack(tape, bound, &self.arch.main, y, mode, updates)?;
        let denoised = tape.sub(y, noise)?;
        Ok(OutputVars { denoised, prior: None, weight: None })
    }

    fn forward_fusion_net(
        &self,
        tape: &mut Tape<f32>,
        bound: &Bound,
        y: Var,
        mode: Mode,
        updates: &mut Vec<(String, BatchStats<f32>)>,
    ) -> Result<OutputVars> {
        let a = self.run_stack(tape, bound, &self.arch.main, y, mode, updates)?;
        let b = self.run_stack(tape, bound, &self.arch.aux, y, mode, updates)?;
        let denoised = fusion_combine(tape, a, b, y)?;
        Ok(OutputVars { denoised, prior: Some(a), weight: Some(b) })
    }

    fn forward_buifd(
        &self,
        tape: &mut Tape<f32>,
        bound: &Bound,
        y: Var,
        mode: Mode,
        updates: &mut Vec<(String, BatchStats<f32>)>,
    ) -> Result<OutputVars> {
        let prior = self.run_stack(tape, bound, &self.arch.main, y, mode, updates)?;
        let logits = self.run_stack(tape, bound, &self.arch.aux, y, mode, updates)?;
        let level = tape.sigmoid(logits);
        let stack = product_fusion_inputs(tape, y, prior, level)?;
        let denoised = self.run_stack(tape, bound, &self.arch.fusion, stack, mode, updates)?;
        Ok(OutputVars { denoised, prior: Some(prior), weight: Some(level) })
    }

    /// Applies the learned fusion convolutions alone to a product-fusion stack.
    pub fn fusion_stage(&self, tape: &mut Tape<f32>, bound: &Bound, stack: Var) -> Result<Var> {
        if self.arch.fusion.is_empty() {
            return Err(Error::invalid(format!("{} model has no fusion stage", self.variant())));
        }
        self.run_stack(tape, bound, &self.arch.fusion, stack, Mode::Infer, &mut Vec::new())
    }

    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats<f32>)]) {
        let m = self.config.bn_momentum as f32;
        for (name, stats) in updates {
            self.params.update_running(name, stats, m);
        }
    }

    /// Inference with frozen parameters and running batch-norm statistics.
    pub fn predict(&self, y: &Tensor<f32>) -> Result<ModelOutputs> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let yv = tape.constant(y.clone());
        let fwd = self.forward(&mut tape, &bound, yv, Mode::Infer)?;
        let o = fwd.outputs;
        Ok(ModelOutputs {
            denoised: tape.value(o.denoised).clone(),
            prior: o.prior.map(|v| tape.value(v).clone()),
            weight: o.weight.map(|v| tape.value(v).clone()),
        })
    }
}

/// `a·b + y·(1 − b)`.
pub fn fusion_combine(tape: &mut Tape<f32>, a: Var, b: Var, y: Var) -> Result<Var> {
    let ab = tape.mul(a, b)?;
    let one_minus_b = tape.scalar_sub(1.0, b);
    let yb = tape.mul(y, one_minus_b)?;
    tape.add(ab, yb)
}

/// Channel stack `{y, f_P, f_N, f_P⊙f_N, y⊙(1−f_N)}`.
pub fn product_fusion_inputs(tape: &mut Tape<f32>, y: Var, prior: Var, level: Var) -> Result<Var> {
    let pn = tape.mul(prior, level)?;
    let one_minus = tape.scalar_sub(1.0, level);
    let y_rest = tape.mul(y, one_minus)?;
    tape.concat_channels(&[y, prior, level, pn, y_rest])
}

/// Loss handles: the optimized total and its parts.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub reconstruction: Var,
    pub auxiliary: Option<Var>,
}

pub fn residual_loss(tape: &mut Tape<f32>, out: &OutputVars, clean: Var) -> Result<LossVars> {
    let reconstruction = tape.mse(out.denoised, clean)?;
    Ok(LossVars { total: reconstruction, reconstruction, auxiliary: None })
}

/// `α·‖a·b + y·(1−b) − x‖² + (1−α)·‖b − f(S)‖²`, both terms as means.
pub fn fusion_loss(tape: &mut Tape<f32>, out: &OutputVars, clean: Var, true_f: Var, alpha: f64) -> Result<LossVars> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let b = out.weight.ok_or_else(|| Error::invalid("fusion loss needs the weight output"))?;
    let reconstruction = tape.mse(out.denoised, clean)?;
    let auxiliary = tape.mse(b, true_f)?;
    let r = tape.mul_scalar(reconstruction, alpha as f32);
    let a = tape.mul_scalar(auxiliary, (1.0 - alpha) as f32);
    let total = tape.add(r, a)?;
    Ok(LossVars { total, reconstruction, auxiliary: Some(auxiliary) })
}

/// `‖F̂(C) − x‖² + ‖f_N − N‖²`, both terms as means.
pub fn buifd_loss(tape: &mut Tape<f32>, out: &OutputVars, clean: Var, true_level: Var) -> Result<LossVars> {
    let level = out.weight.ok_or_else(|| Error::invalid("buifd loss needs the noise-level output"))?;
    let reconstruction = tape.mse(out.denoised, clean)?;
    let auxiliary = tape.mse(level, true_level)?;
    let total = tape.add(reconstruction, auxiliary)?;
    Ok(LossVars { total, reconstruction, auxiliary: Some(auxiliary) })
}

/// Per-item auxiliary targets for a batch, given each item's noise level (0–255).
///
/// Fusion: `f(S) = σn²/(σx²+σn²)`; buifd: `σn / σmaxTrain`; residual: none.
pub fn auxiliary_targets(config: &ModelConfig, prior_std_255: f64, sigmas: &[f64]) -> Option<Vec<f64>> {
    match config.variant {
        Variant::Residual => None,
        Variant::Fusion => Some(
            sigmas
                .iter()
                .map(|&s| {
                    let (vn, vx) = (s * s, prior_std_255 * prior_std_255);
                    vn / (vx + vn)
                })
                .collect(),
        ),
        Variant::Buifd => Some(sigmas.iter().map(|&s| s / config.sigma_max_train).collect()),
    }
}

/// Spreads one value per batch item across that item's `C×H×W` block.
pub fn broadcast_items(values: &[f64], item_dims: [usize; 3]) -> Result<Tensor<f32>> {
    let n: usize = item_dims.iter().product();
    let data = values.iter().flat_map(|&v| std::iter::repeat(v as f32).take(n)).collect();
    let [c, h, w] = item_dims;
    Tensor::from_vec(&[values.len(), c, h, w], data)
}

/// Builds the variant's loss on the tape.
pub fn loss_for(
    config: &ModelConfig,
    tape: &mut Tape<f32>,
    out: &OutputVars,
    clean: Var,
    aux_target: Option<Var>,
) -> Result<LossVars> {
    match (config.variant, aux_target) {
        (Variant::Residual, _) => residual_loss(tape, out, clean),
        (Variant::Fusion, Some(t)) => fusion_loss(tape, out, clean, t, config.alpha),
        (Variant::Buifd, Some(t)) => buifd_loss(tape, out, clean, t),
        (v, None) => Err(Error::invalid(format!("{v} loss needs an auxiliary target"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            backbone_depth: 3,
            noise_head_depth: 2,
            width: 2,
            fusion_channels: 3,
            ..ModelConfig::paper(variant)
        }
    }

    fn with_running_stats(mut m: Denoiser) -> Denoiser {
        for name in m.bn_layers() {
            let c = m.params.get(&format!("{name}.gamma")).unwrap().len();
            let stats = crate::params::RunningStats {
                mean: Tensor::from_vec(&[c], (0..c).map(|i| 0.1 * i as f32).collect()).unwrap(),
                var: Tensor::from_vec(&[c], (0..c).map(|i| 0.5 + 0.25 * i as f32).collect()).unwrap(),
            };
            m.params.set_running(name, stats).unwrap();
        }
        m
    }

    fn ramp(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_vec(&[1, 1, h, w], (0..h * w).map(|i| ((i * 7 % 13) as f32) / 13.0).collect()).unwrap()
    }

    #[test]
    fn parameter_layout() {
        let m = Denoiser::new(tiny(Variant::Buifd), 1).unwrap();
        let names: Vec<&str> = m.params.iter().map(|p| p.name.as_str()).collect();
        assert!(names.contains(&"prior.0.weight"));
        assert!(names.contains(&"prior.1.gamma"));
        assert!(!names.contains(&"prior.1.bias"));
        assert!(names.contains(&"level.2.bias"));
        assert_eq!(m.params.get("fuse.0.weight").unwrap().shape(), &[3, 5, 3, 3]);
        assert_eq!(m.params.get("fuse.2.weight").unwrap().shape(), &[1, 3, 3, 3]);
        for p in m.params.iter().filter(|p| p.name.ends_with("weight")) {
            let cin = p.value.shape()[1] as f32;
            let bound = (1.0 / (cin * 9.0)).sqrt();
            assert!(p.value.data().iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn infer_without_running_stats_fails() {
        let m = Denoiser::new(tiny(Variant::Residual), 1).unwrap();
        assert!(matches!(m.predict(&ramp(4, 4)), Err(Error::MissingRunningStats(_))));
    }

    #[test]
    fn zero_final_layer_returns_input() {
        let mut m = with_running_stats(Denoiser::new(tiny(Variant::Residual), 2).unwrap());
        m.params.set("noise.2.weight", Tensor::zeros(&[1, 2, 3, 3])).unwrap();
        let y = ramp(5, 6);
        assert_eq!(m.predict(&y).unwrap().denoised, y);
    }

    fn naive_conv(x: &[f32], c_in: usize, h: usize, w: usize, k: &[f32], c_out: usize) -> Vec<f32> {
        let mut out = vec![0.0; c_out * h * w];
        for o in 0..c_out {
            for r in 0..h {
                for c in 0..w {
                    let mut acc = 0.0;
                    for i in 0..c_in {
                        for dr in 0..3 {
                            for dc in 0..3 {
                                let (rr, cc) = (r as isize + dr as isize - 1, c as isize + dc as isize - 1);
                                if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                                    continue;
                                }
                                acc += k[((o * c_in + i) * 3 + dr) * 3 + dc] * x[(i * h + rr as usize) * w + cc as usize];
                            }
                        }
                    }
                    out[(o * h + r) * w + c] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn residual_matches_hand_composition() {
        let m = with_running_stats(Denoiser::new(tiny(Variant::Residual), 4).unwrap());
        let (h, w) = (4, 5);
        let y = ramp(h, w);
        let p = |n: &str| m.params.get(n).unwrap().data().to_vec();
        let b0 = p("noise.0.bias");
        let mut z = naive_conv(y.data(), 1, h, w, &p("noise.0.weight"), 2);
        for (i, v) in z.iter_mut().enumerate() {
            *v = (*v + b0[i / (h * w)]).max(0.0);
        }
        let mut z = naive_conv(&z, 2, h, w, &p("noise.1.weight"), 2);
        let rs = m.params.running("noise.1").unwrap();
        let (g, be) = (p("noise.1.gamma"), p("noise.1.beta"));
        for (i, v) in z.iter_mut().enumerate() {
            let ch = i / (h * w);
            let norm = (*v - rs.mean.data()[ch]) / (rs.var.data()[ch] + 1e-5).sqrt();
            *v = (g[ch] * norm + be[ch]).max(0.0);
        }
        let b2 = p("noise.2.bias");
        let noise = naive_conv(&z, 2, h, w, &p("noise.2.weight"), 1);
        let out = m.predict(&y).unwrap().denoised;
        for (i, (&o, &n)) in out.data().iter().zip(&noise).enumerate() {
            assert!((o - (y.data()[i] - n - b2[0])).abs() < 1e-6);
        }
    }

    fn naive_stack(m: &Denoiser, layers: &[ConvLayer], mut x: Vec<f32>, h: usize, w: usize) -> Vec<f32> {
        let p = |n: String| m.params.get(&n).unwrap().data().to_vec();
        for l in layers {
            x = naive_conv(&x, l.in_ch, h, w, &p(l.weight()), l.out_ch);
            for (i, v) in x.iter_mut().enumerate() {
                let ch = i / (h * w);
                if l.bias {
                    *v += p(l.bias_name())[ch];
                }
                if l.bn {
                    let rs = m.params.running(&l.name).unwrap();
                    let norm = (*v - rs.mean.data()[ch]) / (rs.var.data()[ch] + 1e-5).sqrt();
                    *v = p(l.gamma())[ch] * norm + p(l.beta())[ch];
                }
                if l.relu {
                    *v = v.max(0.0);
                }
            }
        }
        x
    }

    #[test]
    fn buifd_matches_hand_composition() {
        let mut m = with_running_stats(Denoiser::new(tiny(Variant::Buifd), 6).unwrap());
        let names: Vec<String> = m.params.iter().filter(|p| p.name.ends_with("bias")).map(|p| p.name.clone()).collect();
        for (k, name) in names.iter().enumerate() {
            let c = m.params.get(name).unwrap().len();
            let v = (0..c).map(|j| 0.03 * (k + j) as f32 - 0.05).collect();
            m.params.set(name, Tensor::from_vec(&[c], v).unwrap()).unwrap();
        }
        let (h, w) = (5, 4);
        let y = ramp(h, w);
        let prior = naive_stack(&m, &m.arch.main, y.data().to_vec(), h, w);
        let level: Vec<f32> = naive_stack(&m, &m.arch.aux, y.data().to_vec(), h, w)
            .into_iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let yd = y.data();
        let mut stack = yd.to_vec();
        stack.extend(&prior);
        stack.extend(&level);
        stack.extend(prior.iter().zip(&level).map(|(p, n)| p * n));
        stack.extend(yd.iter().zip(&level).map(|(y, n)| y * (1.0 - n)));
        let expect = naive_stack(&m, &m.arch.fusion, stack, h, w);
        let out = m.predict(&y).unwrap();
        for (a, b) in out.denoised.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        for (a, b) in out.weight.unwrap().data().iter().zip(&level) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn noise_level_term_ignores_prior_branch() {
        let m = Denoiser::new(tiny(Variant::Buifd), 8).unwrap();
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape);
        let y = tape.constant(Tensor::stack_batch(&[ramp(4, 4), ramp(4, 4).map(|v| 1.0 - v)]).unwrap());
        let fwd = m.forward(&mut tape, &bound, y, Mode::Train).unwrap();
        let target = tape.constant(Tensor::full(&[2, 1, 4, 4], 0.4));
        let loss = buifd_loss(&mut tape, &fwd.outputs, y, target).unwrap();
        let grads = tape.backward(loss.auxiliary.unwrap()).unwrap();
        let all = bound.gradients(&tape, &grads);
        for (p, g) in m.params.iter().zip(&all) {
            let touched = g.data().iter().any(|&v| v != 0.0);
            assert_eq!(touched, p.name.starts_with("level."), "{}", p.name);
        }
    }

    #[test]
    fn shapes_preserved_for_all_variants() {
        for v in [Variant::Residual, Variant::Fusion, Variant::Buifd] {
            let m = with_running_stats(Denoiser::new(tiny(v), 3).unwrap());
            for (h, w) in [(3, 3), (7, 4), (10, 13)] {
                let out = m.predict(&ramp(h, w)).unwrap();
                assert_eq!(out.denoised.shape(), &[1, 1, h, w]);
                if v == Variant::Buifd {
                    assert!(out.weight.unwrap().data().iter().all(|x| (0.0..=1.0).contains(x)));
                }
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let m = with_running_stats(Denoiser::new(tiny(Variant::Fusion), 3).unwrap());
        let rgb = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        assert!(matches!(m.predict(&rgb), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(Variant::Fusion);
        c.alpha = 1.5;
        assert!(Denoiser::new(c, 0).is_err());
        let mut c = tiny(Variant::Fusion);
        c.backbone_depth = 0;
        assert!(c.validate().is_err());
        assert_eq!("buifd".parse::<Variant>().unwrap(), Variant::Buifd);
        assert!("dncnn".parse::<Variant>().is_err());
    }

    fn combine(a: &[f32], b: &[f32], y: &[f32]) -> Vec<f32> {
        let mut tape = Tape::<f32>::new();
        let shape = [1, 1, 1, a.len()];
        let av = tape.constant(Tensor::from_vec(&shape, a.to_vec()).unwrap());
        let bv = tape.constant(Tensor::from_vec(&shape, b.to_vec()).unwrap());
        let yv = tape.constant(Tensor::from_vec(&shape, y.to_vec()).unwrap());
        let d = fusion_combine(&mut tape, av, bv, yv).unwrap();
        tape.value(d).data().to_vec()
    }

    #[test]
    fn fusion_combine_limits() {
        let (a, y) = ([0.2, 0.9, 0.4], [0.7, 0.1, 0.5]);
        assert_eq!(combine(&a, &[0.0; 3], &y), y.to_vec());
        assert_eq!(combine(&a, &[1.0; 3], &y), a.to_vec());
        // denoised − y = b·(a − y)
        let b = [0.3, 0.6, 0.05];
        for (i, d) in combine(&a, &b, &y).iter().enumerate() {
            assert!((d - y[i] - b[i] * (a[i] - y[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn fusion_combine_with_true_prior_equals_optimal_fusion() {
        let prior = crate::bayes::GaussianPrior::from_255(127.0, 25.0).unwrap();
        let ys = [0.1f32, 0.45, 0.52, 0.9];
        for sigma in [5.0, 25.0, 70.0] {
            let s = prior.snr(sigma / 255.0).0;
            let f = crate::bayes::snr_weight(s) as f32;
            let out = combine(&[prior.mean as f32; 4], &[f; 4], &ys);
            for (o, &y) in out.iter().zip(&ys) {
                assert!((*o as f64 - crate::bayes::fuse(prior.mean, y as f64, s)).abs() < 1e-6);
            }
        }
    }

    fn stack_of(level: f32) -> Vec<f32> {
        let mut tape = Tape::<f32>::new();
        let y = tape.constant(Tensor::from_vec(&[1, 1, 1, 2], vec![0.3, 0.8]).unwrap());
        let p = tape.constant(Tensor::from_vec(&[1, 1, 1, 2], vec![0.5, 0.6]).unwrap());
        let n = tape.constant(Tensor::full(&[1, 1, 1, 2], level));
        let s = product_fusion_inputs(&mut tape, y, p, n).unwrap();
        assert_eq!(tape.value(s).shape(), &[1, PRODUCT_FUSION_GROUPS, 1, 2]);
        tape.value(s).data().to_vec()
    }

    #[test]
    fn fusion_stage_is_affine() {
        let mut m = Denoiser::new(tiny(Variant::Buifd), 9).unwrap();
        for i in 0..3 {
            let name = format!("fuse.{i}.bias");
            let c = m.params.get(&name).unwrap().len();
            m.params.set(&name, Tensor::from_vec(&[c], (0..c).map(|j| 0.1 + 0.05 * j as f32).collect()).unwrap()).unwrap();
        }
        let mut rng = Rng::new(3);
        let mut rand = |_: usize| {
            let v = (0..5 * 36).map(|_| rng.uniform_in(-1.0, 1.0) as f32).collect();
            Tensor::from_vec(&[1, 5, 6, 6], v).unwrap()
        };
        let (u, v) = (rand(0), rand(1));
        let (alpha, beta) = (0.7f32, -1.3f32);
        let mix = u.zip_map(&v, |a, b| alpha * a + beta * b).unwrap();
        let run = |x: &Tensor<f32>| {
            let mut tape = Tape::new();
            let bound = m.params.bind_frozen(&mut tape);
            let xv = tape.constant(x.clone());
            let out = m.fusion_stage(&mut tape, &bound, xv).unwrap();
            tape.value(out).clone()
        };
        let (fu, fv, fm, f0) = (run(&u), run(&v), run(&mix), run(&Tensor::zeros(&[1, 5, 6, 6])));
        for i in 0..fm.len() {
            let c = f0.data()[i];
            let expect = alpha * (fu.data()[i] - c) + beta * (fv.data()[i] - c) + c;
            assert!((fm.data()[i] - expect).abs() < 1e-5, "{i}: {} vs {expect}", fm.data()[i]);
        }
    }

    #[test]
    fn product_fusion_groups() {
        assert_eq!(stack_of(0.0), vec![0.3, 0.8, 0.5, 0.6, 0.0, 0.0, 0.0, 0.0, 0.3, 0.8]);
        assert_eq!(stack_of(1.0), vec![0.3, 0.8, 0.5, 0.6, 1.0, 1.0, 0.5, 0.6, 0.0, 0.0]);
    }

    fn loss_parts(f: impl FnOnce(&mut Tape<f32>, &OutputVars, Var, Var) -> Result<LossVars>) -> (f32, f32) {
        let mut tape = Tape::<f32>::new();
        let t = |d: [f32; 4]| Tensor::from_vec(&[1, 1, 2, 2], d.to_vec()).unwrap();
        let denoised = tape.param(t([0.5, 0.25, 0.0, 1.0]));
        let weight = tape.param(t([0.1, 0.2, 0.3, 0.4]));
        let clean = tape.constant(t([0.5, 0.5, 0.5, 0.5]));
        let target = tape.constant(t([0.0, 0.2, 0.5, 0.4]));
        let out = OutputVars { denoised, prior: None, weight: Some(weight) };
        let l = f(&mut tape, &out, clean, target).unwrap();
        (tape.value(l.total).item().unwrap(), tape.value(l.reconstruction).item().unwrap())
    }

    #[test]
    fn buifd_loss_hand_arithmetic() {
        // recon = (0 + 0.0625 + 0.25 + 0.25)/4 = 0.140625
        // level = (0.01 + 0 + 0.04 + 0)/4 = 0.0125
        let (total, recon) = loss_parts(buifd_loss);
        assert!((recon - 0.140625).abs() < 1e-7);
        assert!((total - 0.153125).abs() < 1e-7);
    }

    #[test]
    fn fusion_loss_weighting() {
        let (t1, r1) = loss_parts(|t, o, c, f| fusion_loss(t, o, c, f, 1.0));
        assert_eq!(t1, r1);
        let (t0, _) = loss_parts(|t, o, c, f| fusion_loss(t, o, c, f, 0.0));
        assert!((t0 - 0.0125).abs() < 1e-7);
        let (t, _) = loss_parts(|t, o, c, f| fusion_loss(t, o, c, f, 0.1));
        assert!((t - (0.1 * 0.140625 + 0.9 * 0.0125)).abs() < 1e-7);
        let mut tape = Tape::<f32>::new();
        let z = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
        let out = OutputVars { denoised: z, prior: None, weight: Some(z) };
        assert!(fusion_loss(&mut tape, &out, z, z, -0.1).is_err());
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 2, 2], 0.4));
        let f = tape.constant(Tensor::full(&[1, 1, 2, 2], 0.2));
        let out = OutputVars { denoised: x, prior: None, weight: Some(f) };
        for l in [fusion_loss(&mut tape, &out, x, f, 0.1).unwrap(), buifd_loss(&mut tape, &out, x, f).unwrap()] {
            assert_eq!(tape.value(l.total).item().unwrap(), 0.0);
        }
    }

    #[test]
    fn auxiliary_target_values() {
        let f = auxiliary_targets(&ModelConfig::desk(Variant::Fusion), 25.0, &[25.0, 5.0]).unwrap();
        assert!((f[0] - 0.5).abs() < 1e-12);
        assert!((f[1] - 1.0 / 26.0).abs() < 1e-12);
        let mut cfg = ModelConfig::desk(Variant::Buifd);
        cfg.sigma_max_train = 55.0;
        let n = auxiliary_targets(&cfg, 25.0, &[55.0, 11.0]).unwrap();
        assert_eq!(n, vec![1.0, 0.2]);
        assert!(auxiliary_targets(&ModelConfig::desk(Variant::Residual), 25.0, &[5.0]).is_none());
    }
}
