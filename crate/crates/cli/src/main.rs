use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dcganet::config::{ConfigError, KvMap};
use dcganet::data::{gen_dataset, load_dataset, read_pgm, save_dataset, write_pgm, Range, Sample, SceneConfig};
use dcganet::metrics::{default_thresholds, roc_csv, roc_sweep, MetricsReport};
use dcganet::nn::ModelError;
use dcganet::params::CheckpointError;
use dcganet::run::RunConfig;
use dcganet::training::{evaluate_net, fit, predict_probs, EpochReport, FitOptions, Precision, TrainError, Trainer};
use dcganet::{DcgaNet, NetConfig, ParamStore, Scalar, Tensor4};

mod ablate;

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct Fail {
    code: u8,
    message: String,
}

impl Fail {
    pub fn usage(message: impl Into<String>) -> Self {
        Fail {
            code: 2,
            message: message.into(),
        }
    }

    pub fn message_text(&self) -> &str {
        &self.message
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Fail {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<TrainError> for Fail {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            Fail::numeric(e.to_string())
        } else {
            Fail::usage(e.to_string())
        }
    }
}

macro_rules! usage_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Fail {
            fn from(e: $t) -> Self {
                Fail::usage(e.to_string())
            }
        }
    )*};
}
usage_from!(ConfigError, ModelError, CheckpointError, dcganet::data::DatasetError, dcganet::metrics::MetricsError);

pub type Result<T, E = Fail> = std::result::Result<T, E>;

#[derive(Parser)]
#[command(name = "dcganet", version, about = "Infrared small-target segmentation: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a manifest.
    Gen(GenArgs),
    /// Train a model and write logs and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Predict a mask for one image, optionally exporting attention maps.
    Predict(PredictArgs),
    /// Train and compare model variants listed in a grid file.
    Ablate(ablate::AblateArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Index of the first scene.
    #[arg(long, default_value_t = 0)]
    start: usize,
    /// Scene settings as key=value text (`scene_*` keys).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    size: Option<usize>,
    /// Target count range, `min,max`.
    #[arg(long)]
    targets: Option<String>,
    /// Blob sigma range in px, `min,max`.
    #[arg(long)]
    sigma: Option<String>,
    /// Blob peak range, `min,max`.
    #[arg(long)]
    peak: Option<String>,
    #[arg(long)]
    clutter_scale: Option<f64>,
    #[arg(long)]
    clutter_contrast: Option<f64>,
    #[arg(long)]
    edges: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Run configuration (key=value); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Use 64-bit arithmetic.
    #[arg(long)]
    f64: bool,
    /// Continue from the last checkpoint in --out.
    #[arg(long)]
    resume: bool,
    /// Stop after this many completed epochs (the schedule still spans all).
    #[arg(long)]
    stop_after: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Also write the Pd/Fa threshold sweep.
    #[arg(long)]
    roc: bool,
    #[arg(long, default_value_t = 101)]
    roc_steps: usize,
    /// Add connected-component detection counts alongside the pixel metrics.
    #[arg(long)]
    target_level: bool,
    /// Expected run configuration; its channel schedule must match the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for metrics.csv and roc.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Zero-pad the image to the network's size multiple (outputs are cropped back).
    #[arg(long)]
    pad: bool,
    /// Write each attention map, averaged over channels, as a graymap.
    #[arg(long)]
    export_attention: bool,
    /// With --export-attention, write every channel separately.
    #[arg(long)]
    full_attention: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Ablate(a) => ablate::cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Fail::usage(format!("{}: {e}", path.display())))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Fail::usage(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Fail::usage(format!("{}: {e}", path.display())))
}

fn parse_range<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Range<T>> {
    let parts: Vec<&str> = s.split(',').collect();
    let bad = || Fail::usage(format!("--{flag} expects min,max, got {s:?}"));
    if parts.len() != 2 {
        return Err(bad());
    }
    Ok(Range {
        min: parts[0].trim().parse().map_err(|_| bad())?,
        max: parts[1].trim().parse().map_err(|_| bad())?,
    })
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut scene = match &a.config {
        Some(p) => {
            let mut kv = KvMap::parse(&read_text(p)?)?;
            let s = SceneConfig::take_from(&mut kv)?;
            kv.finish()?;
            s
        }
        None => SceneConfig::default(),
    };
    scene.seed = a.seed;
    if let Some(v) = a.size {
        scene.size = v;
    }
    if let Some(v) = &a.targets {
        scene.targets = parse_range("targets", v)?;
    }
    if let Some(v) = &a.sigma {
        scene.sigma = parse_range("sigma", v)?;
    }
    if let Some(v) = &a.peak {
        scene.peak = parse_range("peak", v)?;
    }
    if let Some(v) = a.clutter_scale {
        scene.clutter_scale = v;
    }
    if let Some(v) = a.clutter_contrast {
        scene.clutter_contrast = v;
    }
    if let Some(v) = a.edges {
        scene.edges = v;
    }
    scene.validate()?;
    let samples = gen_dataset(&scene, a.start, a.count);
    save_dataset(&samples, &a.out)?;
    let manifest = format!("{}start={}\ncount={}\n", scene.to_text(), a.start, a.count);
    write_file(&a.out.join("manifest.txt"), manifest)?;
    println!("wrote {} scenes to {}", a.count, a.out.display());
    Ok(())
}

pub fn load_data(dir: &Path) -> Result<Vec<Sample>> {
    Ok(load_dataset(dir)?)
}

/// Merge the config file with command-line overrides.
fn train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut run = match &a.config {
        Some(p) => RunConfig::parse(&read_text(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    if let Some(lr) = a.lr {
        run.train.base_lr = lr;
    }
    if a.f64 {
        run.train.precision = Precision::F64;
    }
    run.train_data = Some(a.data.display().to_string());
    run.val_data = a.val.as_ref().map(|v| v.display().to_string());
    run.train.validate()?;
    Ok(run)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let run = train_config(&a)?;
    let train = load_data(&a.data)?;
    if train.is_empty() {
        return Err(Fail::usage(format!("{} holds no samples", a.data.display())));
    }
    let val = match &a.val {
        Some(v) => load_data(v)?,
        None => Vec::new(),
    };
    if !a.resume {
        write_file(&a.out.join("config.txt"), run.to_text())?;
    }
    let best = match run.train.precision {
        Precision::F32 => train_with::<f32>(&run, &train, &val, &a)?,
        Precision::F64 => train_with::<f64>(&run, &train, &val, &a)?,
    };
    if let Some((iou, epoch)) = best {
        println!("best validation IoU {iou:.4} at epoch {epoch}");
    }
    Ok(())
}

fn train_with<T: Scalar>(
    run: &RunConfig,
    train: &[Sample],
    val: &[Sample],
    a: &TrainArgs,
) -> Result<Option<(f64, usize)>> {
    let mut trainer = Trainer::<T>::new(run.net.clone(), run.train.clone())?;
    for s in train.iter().chain(val) {
        trainer.net.check_input(s.height, s.width)?;
    }
    let quiet = a.quiet;
    let mut progress = |r: &EpochReport, v: Option<&MetricsReport>| {
        if !quiet {
            match v {
                Some(v) => println!("{}\tval_iou={:.4}\tval_pd={:.4}", r.log_line(), v.iou, v.pd),
                None => println!("{}", r.log_line()),
            }
        }
    };
    let mut opts = FitOptions::new(run.to_text());
    opts.out_dir = Some(a.out.clone());
    opts.resume = a.resume;
    opts.stop_after = a.stop_after;
    opts.on_epoch = Some(&mut progress);
    let summary = fit(&mut trainer, train, val, opts)?;
    if val.is_empty() {
        trainer.net.save(&trainer.params, &run.to_text(), &a.out.join("best.ckpt"))?;
    }
    Ok(summary.best_iou.zip(summary.best_epoch))
}

/// A loaded checkpoint in whichever precision it was written.
pub enum Loaded {
    F32(DcgaNet, ParamStore<f32>),
    F64(DcgaNet, ParamStore<f64>),
}

pub fn load_ckpt(path: &Path, expected: Option<&NetConfig>) -> Result<Loaded> {
    if !path.exists() {
        return Err(Fail::usage(format!("checkpoint {} not found", path.display())));
    }
    fn load<T: Scalar>(path: &Path, expected: Option<&NetConfig>) -> Result<(DcgaNet, ParamStore<T>), ModelError> {
        let (net, params, _) = match expected {
            Some(e) => DcgaNet::load_expecting::<T>(path, e)?,
            None => DcgaNet::load::<T>(path)?,
        };
        Ok((net, params))
    }
    match load::<f32>(path, expected) {
        Ok((n, p)) => Ok(Loaded::F32(n, p)),
        Err(ModelError::Checkpoint(CheckpointError::DType { .. })) => {
            let (n, p) = load::<f64>(path, expected)?;
            Ok(Loaded::F64(n, p))
        }
        Err(ModelError::Schedule { expected, found }) => Err(Fail::usage(format!(
            "channel schedule mismatch: configuration expects {expected}, checkpoint has {found}"
        ))),
        Err(e) => Err(Fail::usage(format!("{}: {e}", path.display()))),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let expected = match &a.config {
        Some(p) => Some(RunConfig::parse(&read_text(p)?)?.net),
        None => None,
    };
    let model = load_ckpt(&a.ckpt, expected.as_ref())?;
    let data = load_data(&a.data)?;
    let (report, probs) = match &model {
        Loaded::F32(n, p) => eval_with(n, p, &data, &a)?,
        Loaded::F64(n, p) => eval_with(n, p, &data, &a)?,
    };
    print!("{}", report.to_table());
    if report.pd_undefined > 0 {
        eprintln!(
            "warning: {} image(s) without target pixels excluded from Pd and nIoU",
            report.pd_undefined
        );
    }
    write_file(&a.out.join("metrics.csv"), report.to_csv())?;
    if a.roc {
        let maps: Vec<&[f64]> = probs.iter().map(|p| p.as_slice()).collect();
        let gts: Vec<&[u8]> = data.iter().map(|s| s.mask.as_slice()).collect();
        let points = roc_sweep(&maps, &gts, &default_thresholds(a.roc_steps))?;
        write_file(&a.out.join("roc.csv"), roc_csv(&points))?;
    }
    Ok(())
}

fn eval_with<T: Scalar>(
    net: &DcgaNet,
    params: &ParamStore<T>,
    data: &[Sample],
    a: &EvalArgs,
) -> Result<(MetricsReport, Vec<Vec<f64>>)> {
    for s in data {
        net.check_input(s.height, s.width)?;
    }
    let report = evaluate_net(net, params, data, a.threshold, a.target_level)?;
    let probs = if a.roc {
        data.iter()
            .map(|s| predict_probs(net, params, s))
            .collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    Ok((report, probs))
}

fn to_levels(values: &[f64]) -> Vec<u8> {
    values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Crop the top-left `h×w` window of a plane with row length `w_full`.
fn crop(plane: &[f64], w_full: usize, h: usize, w: usize) -> Vec<f64> {
    (0..h).flat_map(|y| plane[y * w_full..y * w_full + w].iter().copied()).collect()
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let model = load_ckpt(&a.ckpt, None)?;
    let bytes = fs::read(&a.image).map_err(|e| Fail::usage(format!("{}: {e}", a.image.display())))?;
    let pgm = read_pgm(&bytes)
        .map_err(|(off, msg)| Fail::usage(format!("{}: byte {off}: {msg}", a.image.display())))?;
    match &model {
        Loaded::F32(n, p) => predict_with(n, p, &pgm, &a),
        Loaded::F64(n, p) => predict_with(n, p, &pgm, &a),
    }
}

fn predict_with<T: Scalar>(net: &DcgaNet, params: &ParamStore<T>, pgm: &dcganet::data::Pgm, a: &PredictArgs) -> Result<()> {
    let (h, w) = (pgm.height, pgm.width);
    let m = net.config().size_multiple();
    let (ph, pw) = if a.pad {
        (h.div_ceil(m) * m, w.div_ceil(m) * m)
    } else {
        net.check_input(h, w)
            .map_err(|_| Fail::usage(format!("image is {h}×{w}, not a multiple of {m}; rerun with --pad")))?;
        (h, w)
    };
    let image = Tensor4::from_fn(dcganet::Shape::new(1, 1, ph, pw), |_, _, y, x| {
        if y < h && x < w {
            T::lit(pgm.pixels[y * w + x] as f64 / 255.0)
        } else {
            T::zero()
        }
    });
    let pred = net.predict(params, &image)?;
    let probs: Vec<f64> = pred
        .logits
        .data()
        .iter()
        .map(|&z| 1.0 / (1.0 + (-z.as_f64()).exp()))
        .collect();
    let probs = crop(&probs, pw, h, w);
    let stem = a
        .image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string();
    let mask: Vec<u8> = probs.iter().map(|&p| if p >= a.threshold { 255 } else { 0 }).collect();
    write_file(&a.out.join(format!("{stem}_mask.pgm")), write_pgm(h, w, &mask))?;
    write_file(&a.out.join(format!("{stem}_prob.pgm")), write_pgm(h, w, &to_levels(&probs)))?;
    if a.export_attention {
        for (name, map) in &pred.attention {
            let s = map.shape();
            // Maps are sigmoid outputs in (0, 1); levels are round(255·value)
            // at the map's own resolution, cropped to the unpadded region.
            let (mh, mw) = ((h * s.h).div_ceil(ph), (w * s.w).div_ceil(pw));
            let plane = |c: usize| -> Vec<f64> { map.plane(0, c).iter().map(|v| v.as_f64()).collect() };
            if a.full_attention {
                for c in 0..s.c {
                    let vals = crop(&plane(c), s.w, mh, mw);
                    write_file(
                        &a.out.join(format!("{stem}_{name}_c{c:03}.pgm")),
                        write_pgm(mh, mw, &to_levels(&vals)),
                    )?;
                }
            } else {
                let mut mean = vec![0.0; s.h * s.w];
                for c in 0..s.c {
                    for (acc, v) in mean.iter_mut().zip(plane(c)) {
                        *acc += v / s.c as f64;
                    }
                }
                let vals = crop(&mean, s.w, mh, mw);
                write_file(
                    &a.out.join(format!("{stem}_{name}.pgm")),
                    write_pgm(mh, mw, &to_levels(&vals)),
                )?;
            }
        }
    }
    Ok(())
}
