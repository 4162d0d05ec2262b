//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3
//! numerical failure. Failures print one line to standard error. Every run
//! writes `reproducibility.txt` (seed, config hash, version) into its output
//! directory.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::dynamics::{fit_var, latents_to_matrix, synthesize_dynamic, BURN_IN};
use crate::error::Error;
use crate::generator::{expand_synthesize, forward_batch, parse_shape, NetSpec};
use crate::inference::{InferConfig, Sample};
use crate::io::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::io::codec::{broadcast_mask, decode_mask, read_signal, signal_extension, write_signal};
use crate::io::config::{hyper_to_text, TrainConfig};
use crate::io::dataset::{observe_dataset, DatasetManifest};
use crate::latent_tools::{latent_grid, sample_prior, GridSpec};
use crate::learning::{infer_from_prior, Schedule, TrainState, Trainer};
use crate::linalg::Matrix;
use crate::linear_baselines::{pca_fit, pca_reconstruct};
use crate::observation::{composite, recovery_error, ObservationModel, Region};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

#[derive(Parser, Debug)]
#[command(
    name = "abp",
    version,
    about = "Train and use generator networks learned by alternating back-propagation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a generator from a configuration file.
    Train(TrainArgs),
    /// Sample latents from the prior and render them.
    Synthesize(SynthesizeArgs),
    /// Infer the latents of one occluded, projected or complete signal.
    Recover(RecoverArgs),
    /// Test-time reconstruction or recovery error over a dataset.
    Evaluate(EvaluateArgs),
    /// Render a latent grid from stored corner latents or a coordinate range.
    Interpolate(InterpolateArgs),
    /// Fit latent dynamics to the stored latents and synthesize a sequence.
    Dyntex(DyntexArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training configuration (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print progress every this many iterations (0 = never).
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct SynthesizeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 1)]
    num: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Latent extent for expanded synthesis, e.g. 14x14 (or 12 for sound).
    #[arg(long)]
    expand: Option<String>,
}

#[derive(Args, Debug)]
struct RecoverArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Image or sound to recover, in the training data's format.
    #[arg(long)]
    input: PathBuf,
    /// Graymap mask: 0 = occluded, 255 = observed.
    #[arg(long, conflicts_with = "sensing")]
    mask: Option<PathBuf>,
    /// Observe the input through the checkpoint's sensing matrix.
    #[arg(long)]
    sensing: bool,
    /// Reconstruction to write; masked inputs also get a `.composite` file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Langevin steps [default: 300].
    #[arg(long)]
    steps: Option<usize>,
    /// Langevin step size [default: 0.05].
    #[arg(long)]
    step_size: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Metric {
    Recon,
    Recovery,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    test_manifest: PathBuf,
    #[arg(long, value_enum)]
    metric: Metric,
    /// CSV report to write.
    #[arg(long)]
    report: PathBuf,
    /// PCA baseline with d components, written `pca-d`.
    #[arg(long)]
    baseline: Option<String>,
    /// Training data for the baseline fit.
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct InterpolateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Indices of four stored latents: top-left, top-right, bottom-left, bottom-right.
    #[arg(long, conflicts_with = "grid", required_unless_present = "grid")]
    corners: Option<String>,
    /// lo:hi:n grid over a 2-dimensional latent.
    #[arg(long, allow_hyphen_values = true)]
    grid: Option<String>,
    /// Grid side for corner interpolation.
    #[arg(long, default_value_t = 9)]
    steps: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct DyntexArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Frames to emit after the burn-in.
    #[arg(long)]
    frames: usize,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = BURN_IN)]
    burn_in: usize,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(Error::Io(e))
    }
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Run(Error::Numerical(_)) => 3,
            CliError::Run(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parse `argv` (program name first), run the command and return the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("abp: {}", line.trim_start_matches("error: "));
            return 1;
        }
    };
    let result = configure_threads().and_then(|_| run(cli.command));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("abp: {}", e.to_string().replace('\n', " "));
            e.code()
        }
    }
}

/// Honour `ABP_THREADS` (0 or unset = one worker per core).
fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("ABP_THREADS") else {
        return Ok(());
    };
    let n: usize = value.trim().parse().map_err(|_| {
        usage(format!(
            "ABP_THREADS must be a non-negative integer, got {value:?}"
        ))
    })?;
    if n > 0 {
        // The global pool can only be set once per process; later calls keep it.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Train(a) => train(a),
        Command::Synthesize(a) => synthesize(a),
        Command::Recover(a) => recover(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Interpolate(a) => interpolate(a),
        Command::Dyntex(a) => dyntex(a),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn write_stanza(dir: &Path, command: &str, seed: u64, config_text: &str) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    let text = format!(
        "command = {command}\nseed = {seed}\nconfig_sha256 = {}\nversion = {}\n",
        sha256_hex(config_text.as_bytes()),
        env!("CARGO_PKG_VERSION")
    );
    std::fs::write(dir.join("reproducibility.txt"), text)?;
    Ok(())
}

/// The model-defining part of a checkpoint, as canonical text.
fn checkpoint_config(ck: &Checkpoint) -> String {
    let mut s: String = ck
        .spec
        .to_text()
        .lines()
        .map(|l| format!("net.{l}\n"))
        .collect();
    s.push_str(&hyper_to_text(&ck.hyper));
    s.push_str(&ck.observation.to_text());
    s
}

fn out_name(dir: &Path, stem: &str, shape: &[usize]) -> CliResult<PathBuf> {
    Ok(dir.join(format!("{stem}.{}", signal_extension(shape)?)))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    parent_dir(path).join(format!("{stem}.{suffix}"))
}

fn check_signal_shape(t: &Tensor, spec: &NetSpec, what: &str) -> CliResult<()> {
    if t.shape() != spec.output_shape() {
        return Err(CliError::Run(Error::Shape(format!(
            "{what} has shape {:?}, the network produces {:?}",
            t.shape(),
            spec.output_shape()
        ))));
    }
    Ok(())
}

fn train(a: TrainArgs) -> CliResult<()> {
    let cfg = TrainConfig::from_file(&a.config)?;
    let manifest = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| CliError::Run(Error::Format("configuration lacks data.manifest".into())))?;
    let data = DatasetManifest::from_file(manifest)?.load()?;
    check_signal_shape(&data.signals[0], &cfg.spec, "training data")?;
    let observed = observe_dataset(&data, &cfg.observation, cfg.hyper.seed)?;
    let state = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.spec != cfg.spec {
                return Err(CliError::Run(Error::Format(
                    "resume checkpoint was trained with a different network".into(),
                )));
            }
            ck.train_state()?
        }
        None => TrainState::init(&cfg.spec, observed.samples.len(), &cfg.hyper),
    };
    let mut trainer = Trainer::resume(
        &cfg.spec,
        &observed.samples,
        cfg.hyper.clone(),
        Schedule::Alternating,
        state,
    )?;
    while !trainer.finished() {
        let rec = trainer.step()?;
        if a.log_every > 0 && (rec.iteration % a.log_every == 0 || trainer.finished()) {
            println!(
                "iteration {}/{}  loss {:.6e}  |z|^2/d {:.4}",
                rec.iteration, cfg.hyper.iterations, rec.mean_loss, rec.mean_latent_sq
            );
        }
    }
    let mut extra = Vec::new();
    for (i, m) in observed.masks.iter().enumerate() {
        if let Some(m) = m {
            extra.push((format!("mask.{i}"), m.clone()));
        }
    }
    if let Some(s) = &observed.sensing {
        extra.push((
            "sensing".to_string(),
            Tensor::new(vec![s.rows(), s.cols()], s.data().to_vec())?,
        ));
    }
    let ck = Checkpoint::from_training(
        &cfg.spec,
        &cfg.hyper,
        &cfg.observation,
        &trainer.state,
        extra,
    );
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_checkpoint(&a.out, &ck)?;
    std::fs::write(
        with_suffix(&a.out, "history.csv"),
        trainer.state.history.to_csv(),
    )?;
    write_stanza(&parent_dir(&a.out), "train", cfg.hyper.seed, &cfg.to_text())
}

fn synthesize(a: SynthesizeArgs) -> CliResult<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let w = ck.weights()?;
    let latent_shape = match &a.expand {
        None => ck.spec.latent_shape().to_vec(),
        Some(extent) => {
            let mut shape = vec![ck.spec.latent_shape()[0]];
            shape.extend(
                parse_shape(extent)
                    .map_err(|_| usage(format!("bad --expand extent {extent:?}")))?,
            );
            shape
        }
    };
    std::fs::create_dir_all(&a.out_dir)?;
    for i in 0..a.num {
        let z = sample_prior(&latent_shape, &mut stream(a.seed, Purpose::Synthesis, i, 0));
        let y = match a.expand {
            Some(_) => expand_synthesize(&w, &ck.spec, &z)?,
            None => forward_batch(&ck.spec, &w, std::slice::from_ref(&z))?
                .0
                .remove(0),
        };
        write_signal(
            &out_name(&a.out_dir, &format!("sample_{i:03}"), y.shape())?,
            &y,
        )?;
    }
    write_stanza(&a.out_dir, "synthesize", a.seed, &checkpoint_config(&ck))
}

fn test_time_config(ck: &Checkpoint, steps: Option<usize>, step_size: Option<f64>) -> InferConfig {
    let mut cfg = InferConfig {
        sigma: ck.hyper.infer.sigma,
        ..InferConfig::test_time()
    };
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(s) = step_size {
        cfg.step_size = s;
    }
    cfg
}

fn sensing_model(ck: &Checkpoint) -> CliResult<ObservationModel> {
    let s = ck
        .sensing()?
        .ok_or_else(|| CliError::Run(Error::Format("checkpoint holds no sensing matrix".into())))?;
    Ok(ObservationModel::projected(Arc::new(s))?)
}

fn recover(a: RecoverArgs) -> CliResult<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let w = ck.weights()?;
    let input = read_signal(&a.input)?;
    check_signal_shape(&input, &ck.spec, "input")?;
    let mask = match &a.mask {
        Some(p) => Some(broadcast_mask(
            &decode_mask(
                &std::fs::read(p)
                    .map_err(|e| Error::Format(format!("cannot read {}: {e}", p.display())))?,
            )?,
            input.shape()[0],
        )?),
        None => None,
    };
    let model = match (&mask, a.sensing) {
        (Some(m), _) => ObservationModel::masked(m.clone())?,
        (None, true) => sensing_model(&ck)?,
        (None, false) => ObservationModel::Full,
    };
    let sample = Sample::observe(&input, model)?;
    let cfg = test_time_config(&ck, a.steps, a.step_size);
    let z = infer_from_prior(std::slice::from_ref(&sample), &w, &ck.spec, &cfg, a.seed)?;
    let recon = forward_batch(&ck.spec, &w, &z)?.0.remove(0);
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_signal(&a.out, &recon)?;
    if let Some(m) = &mask {
        let filled = composite(&input, &recon, m)?;
        let ext = signal_extension(filled.shape())?;
        write_signal(&with_suffix(&a.out, &format!("composite.{ext}")), &filled)?;
    }
    write_stanza(
        &parent_dir(&a.out),
        "recover",
        a.seed,
        &checkpoint_config(&ck),
    )
}

fn parse_baseline(spec: &str) -> CliResult<usize> {
    spec.strip_prefix("pca-")
        .and_then(|d| d.parse().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| usage(format!("baseline must look like pca-<d>, got {spec:?}")))
}

fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let w = ck.weights()?;
    let baseline = a.baseline.as_deref().map(parse_baseline).transpose()?;
    if baseline.is_some() && a.metric != Metric::Recon {
        return Err(usage("the PCA baseline is defined for --metric recon only"));
    }
    if baseline.is_some() && a.train_manifest.is_none() {
        return Err(usage("--baseline needs --train-manifest for the PCA fit"));
    }
    let test = DatasetManifest::from_file(&a.test_manifest)?.load()?;
    check_signal_shape(&test.signals[0], &ck.spec, "test data")?;
    let sensing = if a.metric == Metric::Recovery && test.masks.iter().any(Option::is_none) {
        Some(sensing_model(&ck)?)
    } else {
        None
    };
    let mut samples = Vec::with_capacity(test.signals.len());
    for (signal, mask) in test.signals.iter().zip(&test.masks) {
        let model = match (a.metric, mask, &sensing) {
            (Metric::Recon, _, _) => ObservationModel::Full,
            (Metric::Recovery, Some(m), _) => ObservationModel::masked(m.clone())?,
            (Metric::Recovery, None, Some(s)) => s.clone(),
            (Metric::Recovery, None, None) => unreachable!("sensing model resolved above"),
        };
        samples.push(Sample::observe(signal, model)?);
    }
    let cfg = test_time_config(&ck, None, None);
    let z = infer_from_prior(&samples, &w, &ck.spec, &cfg, a.seed)?;
    let recon = forward_batch(&ck.spec, &w, &z)?.0;
    let mut abp = Vec::with_capacity(recon.len());
    for ((truth, r), mask) in test.signals.iter().zip(&recon).zip(&test.masks) {
        let region = match (a.metric, mask) {
            (Metric::Recovery, Some(m)) => Region::OccludedOnly(m),
            _ => Region::All,
        };
        abp.push(recovery_error(truth, r, region)?);
    }
    let pca = match (baseline, &a.train_manifest) {
        (Some(d), Some(path)) => {
            let train = DatasetManifest::from_file(path)?.load()?;
            let big_d = train.signals[0].numel();
            let rows: Vec<f64> = train
                .signals
                .iter()
                .flat_map(|s| s.data().iter().copied())
                .collect();
            let fit = pca_fit(&Matrix::from_vec(train.signals.len(), big_d, rows)?, d)?;
            let mut errs = Vec::with_capacity(test.signals.len());
            for truth in &test.signals {
                let r = Tensor::new(truth.shape().to_vec(), pca_reconstruct(truth.data(), &fit)?)?;
                errs.push(recovery_error(truth, &r, Region::All)?);
            }
            Some((d, errs))
        }
        _ => None,
    };
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut csv = String::from("sample,abp_error");
    if let Some((d, _)) = &pca {
        let _ = write!(csv, ",pca{d}_error");
    }
    csv.push('\n');
    for (i, e) in abp.iter().enumerate() {
        let _ = write!(csv, "{i},{e:.6}");
        if let Some((_, p)) = &pca {
            let _ = write!(csv, ",{:.6}", p[i]);
        }
        csv.push('\n');
    }
    let _ = write!(csv, "mean,{:.6}", mean(&abp));
    print!("abp {:?} error {:.6}", a.metric, mean(&abp));
    if let Some((d, p)) = &pca {
        let _ = write!(csv, ",{:.6}", mean(p));
        print!("  pca-{d} error {:.6}", mean(p));
    }
    println!();
    csv.push('\n');
    if let Some(dir) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&a.report, csv)?;
    write_stanza(
        &parent_dir(&a.report),
        "evaluate",
        a.seed,
        &checkpoint_config(&ck),
    )
}

fn interpolate(a: InterpolateArgs) -> CliResult<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let w = ck.weights()?;
    let (grid, steps) = match (&a.corners, &a.grid) {
        (Some(list), None) => {
            let idx: Vec<usize> = list
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| usage(format!("--corners needs four indices, got {list:?}")))?;
            let latents = ck.latents()?;
            let pick = |i: usize| {
                latents.get(idx[i]).cloned().ok_or_else(|| {
                    usage(format!(
                        "corner index {} exceeds the {} stored latents",
                        idx[i],
                        latents.len()
                    ))
                })
            };
            if idx.len() != 4 {
                return Err(usage(format!(
                    "--corners needs four indices, got {}",
                    idx.len()
                )));
            }
            (
                GridSpec::Corners([pick(0)?, pick(1)?, pick(2)?, pick(3)?]),
                a.steps,
            )
        }
        (None, Some(g)) => {
            let parts: Vec<&str> = g.split(':').collect();
            let bad = || usage(format!("--grid must be lo:hi:n, got {g:?}"));
            if parts.len() != 3 {
                return Err(bad());
            }
            let lo: f64 = parts[0].parse().map_err(|_| bad())?;
            let hi: f64 = parts[1].parse().map_err(|_| bad())?;
            let n: usize = parts[2].parse().map_err(|_| bad())?;
            if ck.spec.latent_dim() != 2 {
                return Err(usage(format!(
                    "--grid needs a 2-dimensional latent, the network has {}",
                    ck.spec.latent_dim()
                )));
            }
            (GridSpec::Range { lo, hi }, n)
        }
        _ => return Err(usage("give exactly one of --corners or --grid")),
    };
    let latents: Vec<Tensor> = latent_grid(&grid, steps)?
        .into_iter()
        .map(|z| z.reshape(ck.spec.latent_shape().to_vec()))
        .collect::<crate::error::Result<_>>()?;
    let images = forward_batch(&ck.spec, &w, &latents)?.0;
    std::fs::create_dir_all(&a.out_dir)?;
    for (k, y) in images.iter().enumerate() {
        let name = format!("grid_{:02}_{:02}", k / steps, k % steps);
        write_signal(&out_name(&a.out_dir, &name, y.shape())?, y)?;
    }
    write_stanza(&a.out_dir, "interpolate", ck.seed, &checkpoint_config(&ck))
}

fn dyntex(a: DyntexArgs) -> CliResult<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let w = ck.weights()?;
    let var = fit_var(&latents_to_matrix(&ck.latents()?)?)?;
    let mut rng = stream(a.seed, Purpose::Synthesis, 0, 0);
    let frames = synthesize_dynamic(
        &w,
        &ck.spec,
        &var,
        a.frames + a.burn_in,
        a.burn_in,
        &mut rng,
    )?;
    std::fs::create_dir_all(&a.out_dir)?;
    let mut index = String::new();
    for (t, y) in frames.iter().enumerate() {
        let path = out_name(&a.out_dir, &format!("frame_{t:04}"), y.shape())?;
        write_signal(&path, y)?;
        let _ = writeln!(index, "{}", path.file_name().unwrap().to_string_lossy());
    }
    std::fs::write(a.out_dir.join("index.txt"), index)?;
    write_stanza(&a.out_dir, "dyntex", a.seed, &checkpoint_config(&ck))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argument_errors_are_usage_errors() {
        assert_eq!(cli_main(["abp"]), 1);
        assert_eq!(cli_main(["abp", "frobnicate"]), 1);
        assert_eq!(cli_main(["abp", "synthesize", "--num", "x"]), 1);
        assert_eq!(cli_main(["abp", "--help"]), 0);
    }

    #[test]
    fn missing_files_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("none.abpc");
        let out = dir.path().join("o");
        let code = cli_main([
            "abp",
            "synthesize",
            "--ckpt",
            ck.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn baseline_names() {
        assert_eq!(parse_baseline("pca-4").unwrap(), 4);
        assert!(parse_baseline("pca-0").is_err());
        assert!(parse_baseline("ica-4").is_err());
    }
}
