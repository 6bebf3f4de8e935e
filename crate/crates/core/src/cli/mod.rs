//! The `crackseg` command-line interface.
//!
//! Exit codes: 0 success, 1 failed gradient check, 2 configuration or
//! output error, 3 data/shape/checkpoint error, 4 non-finite loss.

pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{self, image, load_dataset_root, split, Dataset};
use crate::error::Error;
use crate::gradsuite;
use crate::metrics::{evaluate, format_table, EvalReport};
use crate::nn::{Architecture, Family, Model};
use crate::tensor::{OpKind, Tensor};
use crate::train::{load_checkpoint, save_checkpoint, train_ensemble_two_stage, train_model_observed, EpochSummary};

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "crackseg", version, about = "Crack segmentation with residual U-Net ensembles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic crack dataset (images/ and masks/).
    GenSynth {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one network.
    Train {
        /// unet, segnet or resunet.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        kernel: Option<usize>,
        #[command(flatten)]
        common: RunArgs,
    },
    /// Train the base networks, then the meta block on top of the frozen bases.
    TrainEnsemble {
        #[command(flatten)]
        common: RunArgs,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = crate::metrics::DEFAULT_THRESHOLD)]
        threshold: f32,
        /// Side length images are resized to.
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Directory for eval.csv (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Row label in the printed table.
        #[arg(long)]
        name: Option<String>,
    },
    /// Write the predicted probability mask of one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output PNG.
        #[arg(long)]
        out: PathBuf,
        /// Resize the input to size x size first.
        #[arg(long)]
        size: Option<usize>,
        /// Also write a binarized mask next to the output.
        #[arg(long)]
        threshold: Option<f32>,
    },
    /// Check every backward rule against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds to run.
        #[arg(long, default_value_t = 10)]
        trials: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Merge history CSVs into one long table.
    Report {
        #[arg(required = true)]
        histories: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Dataset root with images/ and masks/.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// A command failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Unsupported(_) => 2,
            Error::NonFinite { .. } => 4,
            Error::Shape(_) | Error::Data(_) | Error::Io { .. } | Error::Format { .. } | Error::Checkpoint(_) => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

/// Output files that cannot be written are configuration errors (exit 2).
fn write_output(path: &Path, bytes: impl AsRef<[u8]>) -> CmdResult {
    std::fs::write(path, bytes).map_err(|e| Failure::config(format!("cannot write {}: {e}", path.display())))
}

fn create_dir(path: &Path) -> CmdResult {
    std::fs::create_dir_all(path).map_err(|e| Failure::config(format!("cannot create {}: {e}", path.display())))
}

fn save_model(model: &Model, path: &Path) -> CmdResult {
    save_checkpoint(model, path).map_err(|e| Failure::config(e.to_string()))
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn execute(cmd: Command) -> CmdResult {
    match cmd {
        Command::GenSynth { n, size, seed, out } => cmd_gen_synth(n, size, seed, &out),
        Command::Train { model, kernel, common } => cmd_train(model, kernel, &common),
        Command::TrainEnsemble { common } => cmd_train_ensemble(&common),
        Command::Eval {
            checkpoint,
            data,
            threshold,
            size,
            out,
            name,
        } => cmd_eval(&checkpoint, &data, threshold, size, out.as_deref(), name.as_deref()),
        Command::Predict {
            checkpoint,
            image,
            out,
            size,
            threshold,
        } => cmd_predict(&checkpoint, &image, &out, size, threshold),
        Command::Gradcheck {
            seed,
            trials,
            inject_fault,
        } => cmd_gradcheck(seed, trials, inject_fault.as_deref()),
        Command::Report { histories, out } => cmd_report(&histories, &out),
    }
}

pub fn cmd_gen_synth(n: usize, size: usize, seed: u64, out: &Path) -> CmdResult {
    let ds = data::gen_synthetic(n, size, seed)?;
    for sub in ["images", "masks"] {
        create_dir(&out.join(sub))?;
    }
    ds.export(out).map_err(|e| Failure::config(e.to_string()))?;
    println!("wrote {n} samples of {size}x{size} to {}", out.display());
    Ok(())
}

fn resolve(common: &RunArgs) -> Result<(RunConfig, PathBuf, PathBuf), Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    for pair in &common.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(d) = &common.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(e) = common.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let data = cfg.data.clone().ok_or_else(|| Failure::config("no dataset given (--data or data=)"))?;
    let out = cfg.out.clone().ok_or_else(|| Failure::config("no output directory given (--out or out=)"))?;
    Ok((cfg, data, out))
}

fn progress(s: &EpochSummary<'_>) {
    eprintln!(
        "[{}] epoch {}/{}  train {:.5}  val {:.5}",
        s.stage,
        s.epoch + 1,
        s.epochs,
        s.train_loss,
        s.val_loss
    );
}

fn load_splits(cfg: &RunConfig, data: &Path) -> Result<(Dataset, Dataset, Dataset), Failure> {
    let ds = load_dataset_root(data, cfg.size)?;
    let (train, val, test) = split(&ds, cfg.split, cfg.seed).map_err(|e| match e {
        Error::Config(m) => Failure::config(m),
        other => Failure::from(other),
    })?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "split {:?} of {} samples leaves an empty train or validation set",
            cfg.split,
            ds.len()
        ))
        .into());
    }
    Ok((train, val, test))
}

pub fn cmd_train(model: Option<String>, kernel: Option<usize>, common: &RunArgs) -> CmdResult {
    let (mut cfg, data, out) = resolve(common)?;
    if let Some(m) = model {
        cfg.set("model", &m)?;
    }
    if let Some(k) = kernel {
        cfg.kernel = k;
    }
    let arch = match cfg.model {
        Family::UNet => Architecture::UNet(cfg.net()),
        Family::SegNet => Architecture::SegNet(cfg.net()),
        Family::ResUNet => Architecture::ResUNet(cfg.net()),
        other => {
            return Err(Failure::config(format!(
                "train supports unet, segnet and resunet, not {other} (see train-ensemble)"
            )))
        }
    };
    arch.validate()?;
    create_dir(&out)?;
    write_output(&out.join("config.txt"), cfg.to_text())?;

    let (train, val, test) = load_splits(&cfg, &data)?;
    let mut net = Model::build(arch, cfg.seed)?;
    let history = train_model_observed(&mut net, &train, &val, &cfg.stage1(), &mut progress)?;
    save_model(&net, &out.join("model.ckpt"))?;
    write_output(&out.join("history.csv"), history.to_csv())?;
    if !test.is_empty() {
        let report = evaluate(&net, &test, cfg.threshold)?;
        print!("{}", format_table(&[(&label(&net), &report)]));
    }
    Ok(())
}

fn label(model: &Model) -> String {
    match model.architecture() {
        Architecture::UNet(c) | Architecture::SegNet(c) | Architecture::ResUNet(c) => {
            format!("{} k={}", model.family(), c.kernel_size)
        }
        _ => model.family().to_string(),
    }
}

pub fn cmd_train_ensemble(common: &RunArgs) -> CmdResult {
    let (cfg, data, out) = resolve(common)?;
    let ens = cfg.ensemble();
    ens.validate()?;
    create_dir(&out)?;
    write_output(&out.join("config.txt"), cfg.to_text())?;

    let (train, val, test) = load_splits(&cfg, &data)?;
    let run = train_ensemble_two_stage(
        &ens.base_configs(),
        &ens,
        &train,
        &val,
        &cfg.stage1(),
        &cfg.stage2(),
        &mut progress,
    )?;
    let names: Vec<String> = ens
        .base_kernel_sizes
        .iter()
        .enumerate()
        .map(|(i, k)| format!("base{i}_k{k}"))
        .chain(["ensemble".to_string()])
        .collect();
    for (i, base) in run.bases.iter().enumerate() {
        save_model(base, &out.join(format!("{}.ckpt", names[i])))?;
    }
    save_model(&run.ensemble, &out.join("ensemble.ckpt"))?;
    for (name, h) in names.iter().zip(&run.histories) {
        write_output(&out.join(format!("history_{name}.csv")), h.to_csv())?;
    }
    if !test.is_empty() {
        let mut reports: Vec<EvalReport> = Vec::new();
        for m in run.bases.iter().chain([&run.ensemble]) {
            reports.push(evaluate(m, &test, cfg.threshold)?);
        }
        let rows: Vec<(&str, &EvalReport)> = names.iter().map(String::as_str).zip(&reports).collect();
        print!("{}", format_table(&rows));
        let mut csv = String::from("model,test_loss,iou,dice\n");
        for (n, r) in &rows {
            csv.push_str(&format!("{n},{},{},{}\n", r.mean_loss, r.mean_iou, r.mean_dice));
        }
        write_output(&out.join("summary.csv"), csv)?;
    }
    Ok(())
}

pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    threshold: f32,
    size: usize,
    out: Option<&Path>,
    name: Option<&str>,
) -> CmdResult {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Failure::config(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    let model = load_checkpoint(checkpoint)?;
    let ds = load_dataset_root(data, size)?;
    let report = evaluate(&model, &ds, threshold)?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    if !dir.as_os_str().is_empty() {
        create_dir(&dir)?;
    }
    write_output(&dir.join("eval.csv"), report.to_csv())?;
    let label = name.map(str::to_string).unwrap_or_else(|| label(&model));
    print!("{}", format_table(&[(&label, &report)]));
    Ok(())
}

pub fn cmd_predict(checkpoint: &Path, image_path: &Path, out: &Path, size: Option<usize>, threshold: Option<f32>) -> CmdResult {
    if let Some(t) = threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(Failure::config(format!("threshold must lie in [0, 1], got {t}")));
        }
    }
    let model = load_checkpoint(checkpoint)?;
    let mut grid = image::load_image_grayscale(image_path)?;
    if let Some(s) = size {
        grid = image::resize_bilinear(&grid, s, s)?;
    }
    let (h, w) = grid.dims();
    let x = Tensor::new([1, 1, h, w], grid.into_data())?;
    let y = model.predict(&x)?;
    let prob = image::Grid::new(h, w, y.into_data())?;
    write_output(out, image::encode_png(&prob))?;
    if let Some(t) = threshold {
        let path = binary_path(out);
        write_output(&path, image::encode_png(&crate::metrics::binarize(&prob, t)))?;
    }
    Ok(())
}

/// `dir/name.png` becomes `dir/name_mask.png`.
pub fn binary_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_mask.png"))
}

pub fn cmd_gradcheck(seed: u64, trials: u64, fault: Option<&str>) -> CmdResult {
    let fault = match fault {
        Some(name) => Some(OpKind::parse(name).ok_or_else(|| Failure::config(format!("unknown op {name:?}")))?),
        None => None,
    };
    if trials == 0 {
        return Err(Failure::config("trials must be at least 1"));
    }
    let mut worst = vec![0.0f64; gradsuite::CHECKS.len()];
    for s in seed..seed.saturating_add(trials) {
        for (i, c) in gradsuite::run_suite(s, fault)?.iter().enumerate() {
            worst[i] = worst[i].max(c.report.max_rel_error);
        }
    }
    println!("{:<18} {:>14}  result", "op", "max rel error");
    let mut failed = 0;
    for (name, err) in gradsuite::CHECKS.iter().zip(&worst) {
        let ok = *err < gradsuite::TOLERANCE;
        failed += usize::from(!ok);
        println!("{name:<18} {err:>14.3e}  {}", if ok { "PASS" } else { "FAIL" });
    }
    if failed > 0 {
        return Err(Failure {
            code: 1,
            message: format!("{failed} gradient check(s) exceeded {:e}", gradsuite::TOLERANCE),
        });
    }
    Ok(())
}

const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,seconds";

pub fn cmd_report(histories: &[PathBuf], out: &Path) -> CmdResult {
    let mut merged = String::from("model,epoch,train_loss,val_loss,seconds\n");
    for path in histories {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(HISTORY_HEADER) {
            return Err(Error::Data(format!("{} is not a history CSV", path.display())).into());
        }
        let name = report_name(path);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            if line.split(',').count() != 4 {
                return Err(Error::Data(format!("{}: malformed row {line:?}", path.display())).into());
            }
            merged.push_str(&format!("{name},{line}\n"));
        }
    }
    write_output(out, merged)
}

/// `history_base0_k3.csv` is reported as `base0_k3`; a bare `history.csv`
/// takes its directory's name.
fn report_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match stem.strip_prefix("history_") {
        Some(rest) if !rest.is_empty() => rest.to_string(),
        _ => path
            .parent()
            .and_then(Path::file_name)
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or(stem),
    }
}
