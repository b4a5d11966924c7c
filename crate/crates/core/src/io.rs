//! Files: binary PGM/PPM images, `BUFD` checkpoints, JSON run configs, and
//! atomic output writing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Error, PnmError, Result};
use crate::eval::TestConfig;
use crate::models::{Denoiser, ModelConfig, Variant};
use crate::params::{ParameterSet, RunningStats};
use crate::synth::SynthConfig;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::File { path: path.to_path_buf(), source }
}

/// Writes `bytes` to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(file_err(path))?;
    tmp.write_all(bytes).map_err(file_err(path))?;
    tmp.as_file().sync_all().map_err(file_err(path))?;
    tmp.persist(path).map_err(|e| Error::File { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(file_err(path))
}

// ---- PGM / PPM ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PnmKind {
    /// `P5`, grayscale.
    Pgm,
    /// `P6`, RGB.
    Ppm,
}

impl PnmKind {
    fn magic(self) -> &'static str {
        match self {
            PnmKind::Pgm => "P5",
            PnmKind::Ppm => "P6",
        }
    }
    fn channels(self) -> usize {
        match self {
            PnmKind::Pgm => 1,
            PnmKind::Ppm => 3,
        }
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, PnmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PnmError::Header(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PnmError::Header(format!("{what} out of range")))
    }
}

/// Parses a binary PGM or PPM; `expect` pins the format.
pub fn decode_pnm(bytes: &[u8], expect: Option<PnmKind>) -> Result<Tensor<f32>, PnmError> {
    let expected = expect.map(PnmKind::magic).unwrap_or("P5 or P6");
    let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
    let kind = match bytes.get(..2) {
        Some(b"P5") => PnmKind::Pgm,
        Some(b"P6") => PnmKind::Ppm,
        _ => return Err(PnmError::BadMagic { expected, found }),
    };
    if expect.is_some_and(|k| k != kind) {
        return Err(PnmError::BadMagic { expected, found });
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(PnmError::Header(format!("empty image {width}×{height}")));
    }
    if maxval != 255 {
        return Err(PnmError::UnsupportedMaxval(maxval));
    }
    match bytes.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(PnmError::Header("missing whitespace after maxval".into())),
    }
    let c = kind.channels();
    let expected = width * height * c;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(PnmError::Truncated { expected, found: payload.len() });
    }
    // Interleaved samples to planar channels.
    let plane = width * height;
    let mut data = vec![0.0f32; expected];
    for (p, px) in payload[..expected].chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            data[ch * plane + p] = v as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[1, c, height, width], data).expect("sizes computed above"))
}

/// Encodes a `1×C×H×W` tensor (C = 1 or 3) as P5/P6, rounding `v·255` and clamping.
pub fn encode_pnm(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let (b, c, h, w) = t.dims4()?;
    let kind = match (b, c) {
        (1, 1) => PnmKind::Pgm,
        (1, 3) => PnmKind::Ppm,
        _ => return Err(Error::Shape(format!("PNM export needs 1×1×H×W or 1×3×H×W, got {:?}", t.shape()))),
    };
    let mut out = format!("{}\n{w} {h}\n255\n", kind.magic()).into_bytes();
    let plane = h * w;
    let d = t.data();
    out.reserve(plane * c);
    for p in 0..plane {
        for ch in 0..c {
            out.push((d[ch * plane + p] as f64 * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

pub fn read_pnm(path: &Path) -> Result<Tensor<f32>> {
    Ok(decode_pnm(&read_file(path)?, None)?)
}

pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    Ok(decode_pnm(&read_file(path)?, Some(PnmKind::Pgm))?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    Ok(decode_pnm(&read_file(path)?, Some(PnmKind::Ppm))?)
}

fn write_pnm_checked(path: &Path, t: &Tensor<f32>, channels: usize) -> Result<()> {
    let (_, c, _, _) = t.dims4()?;
    if c != channels {
        return Err(Error::Shape(format!("expected {channels} channel(s), got {c}")));
    }
    write_atomic(path, &encode_pnm(t)?)
}

pub fn write_pgm(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_pnm_checked(path, t, 1)
}

pub fn write_ppm(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_pnm_checked(path, t, 3)
}

/// Writes P5 or P6 depending on the channel count.
pub fn write_pnm(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode_pnm(t)?)
}

// ---- checkpoints ----

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BUFD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    RunningMean,
    RunningVar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub variant: Variant,
    pub model: ModelConfig,
    pub sigma_max_train: f64,
    pub seed: u64,
    pub epoch: usize,
    pub val_psnr: Option<f64>,
    pub tensors: Vec<TensorEntry>,
}

/// Run metadata stored alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub val_psnr: Option<f64>,
}

pub fn encode_checkpoint(model: &Denoiser, meta: CheckpointMeta) -> Result<Vec<u8>> {
    let mut payload: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: &str, kind: TensorKind, t: &Tensor<f32>| {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            kind,
            shape: t.shape().to_vec(),
            offset,
            bytes: payload.len() as u64 - offset,
        });
    };
    for p in model.params().iter() {
        push(&p.name, TensorKind::Param, &p.value);
    }
    for (layer, rs) in model.params().running_iter() {
        push(layer, TensorKind::RunningMean, &rs.mean);
        push(layer, TensorKind::RunningVar, &rs.var);
    }
    let cfg = model.config();
    let manifest = Manifest {
        variant: cfg.variant,
        model: cfg.clone(),
        sigma_max_train: cfg.sigma_max_train,
        seed: meta.seed,
        epoch: meta.epoch,
        val_psnr: meta.val_psnr,
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32, CheckpointError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| CheckpointError::Truncated(format!("missing {what}")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Denoiser, Manifest)> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated("missing magic".into()).into());
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = read_u32(bytes, 4, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch { expected: CHECKPOINT_VERSION, found: version }.into());
    }
    let mlen = read_u32(bytes, 8, "manifest length")? as usize;
    let manifest_bytes = bytes
        .get(12..12 + mlen)
        .ok_or_else(|| CheckpointError::Truncated(format!("manifest needs {mlen} bytes")))?;
    let manifest: Manifest =
        serde_json::from_slice(manifest_bytes).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    if manifest.variant != manifest.model.variant || manifest.sigma_max_train != manifest.model.sigma_max_train {
        return Err(CheckpointError::Manifest("top-level fields disagree with the model config".into()).into());
    }
    let payload = &bytes[12 + mlen..];

    let mut params = ParameterSet::new();
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for e in &manifest.tensors {
        let end = e.offset.saturating_add(e.bytes);
        if end > payload.len() as u64 {
            return Err(CheckpointError::OffsetOutOfRange {
                name: e.name.clone(),
                offset: e.offset,
                end,
                payload: payload.len() as u64,
            }
            .into());
        }
        let n: usize = e.shape.iter().product();
        if e.shape.is_empty() || n as u64 * 4 != e.bytes {
            return Err(
                CheckpointError::LengthMismatch { name: e.name.clone(), shape: e.shape.clone(), bytes: e.bytes }.into()
            );
        }
        let raw = &payload[e.offset as usize..end as usize];
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::from_vec(&e.shape, data)
            .map_err(|err| CheckpointError::Manifest(format!("tensor `{}`: {err}", e.name)))?;
        match e.kind {
            TensorKind::Param => params.insert(e.name.clone(), t)?,
            TensorKind::RunningMean => means.push((e.name.clone(), t)),
            TensorKind::RunningVar => vars.push((e.name.clone(), t)),
        }
    }
    for (layer, mean) in means {
        let var = vars
            .iter()
            .position(|(n, _)| *n == layer)
            .map(|i| vars.swap_remove(i).1)
            .ok_or_else(|| CheckpointError::Manifest(format!("running mean of `{layer}` has no variance")))?;
        params.set_running(layer, RunningStats { mean, var })?;
    }
    if let Some((layer, _)) = vars.first() {
        return Err(CheckpointError::Manifest(format!("running variance of `{layer}` has no mean")).into());
    }
    let model = Denoiser::from_parts(manifest.model.clone(), params)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    Ok((model, manifest))
}

pub fn save_checkpoint(path: &Path, model: &Denoiser, meta: CheckpointMeta) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, meta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(Denoiser, Manifest)> {
    decode_checkpoint(&read_file(path)?)
}

// ---- run configuration and provenance ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub clip: bool,
    pub ssim: bool,
    /// Noise levels of the constant-noise protocol.
    pub sigmas: Vec<f64>,
    /// Central levels of the spatially varying protocol.
    pub centers: Vec<f64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            clip: true,
            ssim: true,
            sigmas: vec![5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 40.0, 50.0, 60.0, 70.0],
            centers: vec![15.0, 25.0, 40.0, 55.0, 65.0],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out_dir: Option<PathBuf>,
}

/// Everything a run needs, as one JSON document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(file_err(path))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.sigmas.iter().chain(&self.eval.centers).any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("evaluation noise levels must be non-negative".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn sha256(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex_digest(&json)
    }

    pub fn test_config(&self) -> TestConfig {
        TestConfig { synth: self.synth.clone(), clip: self.eval.clip, ssim: self.eval.ssim }
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance recorded in every output: tool version, seed and config hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stanza {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
}

impl Stanza {
    pub fn new(seed: u64, config_sha256: impl Into<String>) -> Self {
        Self {
            tool: "bayesfuse".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config_sha256: config_sha256.into(),
        }
    }

    pub fn comment_lines(&self) -> Vec<String> {
        vec![
            format!("# {} {}", self.tool, self.version),
            format!("# seed {}", self.seed),
            format!("# config_sha256 {}", self.config_sha256),
        ]
    }
}
