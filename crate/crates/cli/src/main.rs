use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bayesfuse::eval::{self, EvalReport, Identity, Method, ModelMethod, OptimalCentral, OptimalFusion, Protocol};
use bayesfuse::io::{self, CheckpointMeta, RunConfig, Stanza};
use bayesfuse::models::{Denoiser, Variant};
use bayesfuse::synth::{add_noise, Dataset, NoiseSpec};
use bayesfuse::train::{self, EpochRow, Supervision};
use bayesfuse::{bayes, Error, Result};
use clap::{Args, Parser, Subcommand};

/// Gaussian-prior fusion denoising toolkit.
#[derive(Parser, Debug)]
#[command(name = "bayesfuse", version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON run config; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.synth.seed = s;
            cfg.train.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Export sample training patches and test images as PGM, with a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Number of training patches and test images to export.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Train a denoiser on synthetic Gaussian-prior patches.
    Train {
        #[command(flatten)]
        common: Common,
        /// residual | fusion | buifd (overrides the config).
        #[arg(long)]
        variant: Option<Variant>,
        /// Output directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoise one PGM/PPM image.
    Denoise {
        #[command(flatten)]
        common: Common,
        /// A `.bufd` checkpoint, or `optimal` for the closed-form estimator.
        #[arg(long)]
        model: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Noise level (0–255); required by `optimal`.
        #[arg(long)]
        sigma: Option<f64>,
        /// Print the model's estimate of the noise level.
        #[arg(long)]
        sigma_report: bool,
    },
    /// Benchmark methods on the synthetic test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "table1")]
        protocol: Protocol,
        /// Comma-separated: optimal, optimal-central, noisy, or NAME=PATH.bufd.
        #[arg(long, value_delimiter = ',', default_value = "optimal")]
        methods: Vec<String>,
        /// Noise levels (or central levels for `spatial`); defaults from the config.
        #[arg(long, value_delimiter = ',')]
        sigmas: Vec<f64>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        out_json: Option<PathBuf>,
    },
    /// Render a CSV or JSON report as aligned text.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common, out, count } => gen_data(&common.load()?, &out, count),
        Command::Train { common, variant, out } => {
            let mut cfg = common.load()?;
            if let Some(v) = variant {
                cfg.model.variant = v;
            }
            train_cmd(&cfg, &out)
        }
        Command::Denoise { common, model, input, out, sigma, sigma_report } => {
            denoise(&common.load()?, &model, &input, &out, sigma, sigma_report)
        }
        Command::Eval { common, protocol, methods, sigmas, out_csv, out_json } => {
            eval_cmd(&common.load()?, protocol, &methods, &sigmas, out_csv.as_deref(), out_json.as_deref())
        }
        Command::Report { input } => report(&input),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::File { path: path.to_path_buf(), source })
}

fn gen_data(cfg: &RunConfig, out: &Path, count: usize) -> Result<()> {
    create_dir(out)?;
    let synth = bayesfuse::synth::SynthConfig { train_count: count.min(cfg.synth.train_count), ..cfg.synth.clone() };
    let data = Dataset::synthetic(&synth)?;
    let mut samples = Vec::new();
    for i in 0..data.len() {
        let (noisy, clean) = data.batch(&[i])?;
        for (kind, t) in [("clean", &clean), ("noisy", &noisy)] {
            let name = format!("train_{i:04}_{kind}.pgm");
            io::write_pgm(&out.join(&name), t)?;
            samples.push(serde_json::json!({ "file": name, "split": "train", "index": i, "kind": kind, "sigma": data.sigma(i) }));
        }
    }
    let sigma = cfg.eval.sigmas.first().copied().unwrap_or(25.0);
    for i in 0..count.min(cfg.synth.test_count) {
        let clean = eval::test_image(&cfg.synth, i)?;
        let noisy = add_noise(&clean, &NoiseSpec::Scalar(sigma), &mut eval::test_noise_rng(cfg.synth.seed, sigma, i))?;
        for (kind, t) in [("clean", &clean), ("noisy", &noisy)] {
            let name = format!("test_{i:04}_{kind}.pgm");
            io::write_pgm(&out.join(&name), t)?;
            samples.push(serde_json::json!({ "file": name, "split": "test", "index": i, "kind": kind, "sigma": sigma }));
        }
    }
    let manifest = serde_json::json!({
        "run": Stanza::new(cfg.synth.seed, cfg.sha256()),
        "synth": cfg.synth,
        "samples": samples,
    });
    io::write_atomic(&out.join("dataset.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    eprintln!("wrote {} images to {}", samples.len(), out.display());
    Ok(())
}

fn train_cmd(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let mut model = Denoiser::new(cfg.model.clone(), cfg.train.seed)?;
    let mut data = Dataset::synthetic(&cfg.synth)?;
    let stanza = Stanza::new(cfg.train.seed, cfg.sha256());
    io::write_atomic(&out.join("config.json"), serde_json::to_string_pretty(cfg)?.as_bytes())?;
    let (latest, best) = (out.join("latest.bufd"), out.join("best.bufd"));
    let mut csv = stanza.comment_lines().join("\n");
    csv.push('\n');
    csv.push_str(EpochRow::CSV_HEADER);
    csv.push('\n');
    let log_path = out.join("train_log.csv");
    let seed = cfg.train.seed;
    let outcome = train::train(
        &mut model,
        &mut data,
        &cfg.train,
        Supervision { prior_std: Some(cfg.synth.prior_std) },
        |ev| {
            let r = ev.row;
            eprintln!(
                "epoch {:>3}  lr {:.1e}  total {:.6}  rec {:.6}  aux {:.6}  val {}  ({:.1}s)",
                r.epoch,
                r.lr,
                r.total,
                r.reconstruction,
                r.auxiliary,
                r.val_psnr.map(|v| format!("{v:.3} dB")).unwrap_or_else(|| "-".into()),
                r.wall_seconds
            );
            csv.push_str(&r.csv_line());
            csv.push('\n');
            io::write_atomic(&log_path, csv.as_bytes())?;
            let meta = CheckpointMeta { seed, epoch: r.epoch, val_psnr: r.val_psnr };
            if ev.checkpoint_due {
                io::save_checkpoint(&latest, ev.model, meta)?;
            }
            if ev.new_best {
                io::save_checkpoint(&best, ev.model, meta)?;
            }
            Ok(())
        },
    )?;
    if outcome.best.is_none() {
        let last = outcome.log.rows.last().map(|r| r.epoch).unwrap_or(0);
        io::save_checkpoint(&best, &model, CheckpointMeta { seed, epoch: last, val_psnr: None })?;
    }
    eprintln!("checkpoints in {}", out.display());
    Ok(())
}

fn denoise(cfg: &RunConfig, model: &str, input: &Path, out: &Path, sigma: Option<f64>, sigma_report: bool) -> Result<()> {
    let y = io::read_pnm(input)?;
    let denoised = if model == "optimal" {
        let sigma = sigma.ok_or_else(|| Error::InvalidArgument("`--model optimal` needs --sigma".into()))?;
        let prior = cfg.synth.prior()?;
        if sigma_report {
            println!("sigma_estimate {sigma}");
        }
        bayes::fuse_image(prior.mean, &y, bayes::SnrMap::Uniform(prior.snr(sigma / 255.0).0))?
    } else {
        let (net, _) = io::load_checkpoint(Path::new(model))?;
        let o = net.predict(&y)?;
        if sigma_report {
            println!("sigma_estimate {:.3}", estimate_sigma(&net, &y, &o, cfg.synth.prior_std));
        }
        o.denoised
    };
    io::write_pnm(out, &denoised.clamp(0.0, 1.0))
}

/// Noise level (0–255) implied by a model's intermediate outputs.
fn estimate_sigma(net: &Denoiser, y: &bayesfuse::Tensor, o: &bayesfuse::models::ModelOutputs, prior_std: f64) -> f64 {
    match (net.variant(), &o.weight) {
        (Variant::Buifd, Some(level)) => level.mean() as f64 * net.config().sigma_max_train,
        (Variant::Fusion, Some(b)) => {
            // b = σn² / (σx² + σn²)
            let b = (b.mean() as f64).clamp(1e-6, 1.0 - 1e-6);
            prior_std * (b / (1.0 - b)).sqrt()
        }
        _ => {
            let resid: Vec<f64> = y.data().iter().zip(o.denoised.data()).map(|(a, b)| (a - b) as f64).collect();
            let m = resid.iter().sum::<f64>() / resid.len() as f64;
            (resid.iter().map(|r| (r - m).powi(2)).sum::<f64>() / resid.len() as f64).sqrt() * 255.0
        }
    }
}

fn parse_methods(cfg: &RunConfig, specs: &[String]) -> Result<Vec<Box<dyn Method>>> {
    let prior = cfg.synth.prior()?;
    specs
        .iter()
        .map(|s| -> Result<Box<dyn Method>> {
            Ok(match s.as_str() {
                "optimal" => Box::new(OptimalFusion { prior }),
                "optimal-central" => Box::new(OptimalCentral { prior }),
                "noisy" => Box::new(Identity),
                other => {
                    let (name, path) = match other.split_once('=') {
                        Some((n, p)) => (n.to_string(), PathBuf::from(p)),
                        None if other.ends_with(".bufd") => {
                            let p = PathBuf::from(other);
                            let n = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                            (n, p)
                        }
                        None => {
                            return Err(Error::InvalidArgument(format!(
                                "unknown method `{other}` (optimal|optimal-central|noisy|NAME=PATH.bufd)"
                            )))
                        }
                    };
                    let (model, _) = io::load_checkpoint(&path)?;
                    Box::new(ModelMethod { name, model })
                }
            })
        })
        .collect()
}

fn eval_cmd(
    cfg: &RunConfig,
    protocol: Protocol,
    methods: &[String],
    sigmas: &[f64],
    out_csv: Option<&Path>,
    out_json: Option<&Path>,
) -> Result<()> {
    let boxed = parse_methods(cfg, methods)?;
    let refs: Vec<&dyn Method> = boxed.iter().map(|b| b.as_ref()).collect();
    let levels = match (sigmas.is_empty(), protocol) {
        (false, _) => sigmas.to_vec(),
        (true, Protocol::Table1) => cfg.eval.sigmas.clone(),
        (true, Protocol::Spatial) => cfg.eval.centers.clone(),
    };
    let report = eval::run_protocol(protocol, &refs, &levels, &cfg.test_config())?;
    let stanza = Stanza::new(cfg.synth.seed, cfg.sha256());
    if let Some(p) = out_csv {
        let mut buf = Vec::new();
        report.write_csv(&mut buf, Some(&stanza))?;
        io::write_atomic(p, &buf)?;
    }
    if let Some(p) = out_json {
        let mut buf = Vec::new();
        report.write_json(&mut buf, Some(&stanza))?;
        io::write_atomic(p, &buf)?;
    }
    print!("{}", eval::render_report(&report));
    Ok(())
}

fn report(input: &Path) -> Result<()> {
    let bytes = io::read_file(input)?;
    let first = bytes.iter().find(|b| !b.is_ascii_whitespace());
    if first == Some(&b'{') {
        let (r, run) = EvalReport::read_json(bytes.as_slice())?;
        if let Some(s) = run {
            println!("{} {} | seed {} | config {}", s.tool, s.version, s.seed, s.config_sha256);
        }
        print!("{}", eval::render_report(&r));
    } else {
        print!("{}", eval::render_rows(&EvalReport::read_csv_rows(bytes.as_slice())?));
    }
    Ok(())
}
