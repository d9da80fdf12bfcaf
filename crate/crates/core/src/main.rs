use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, CommandFactory, Parser, Subcommand};

use polsar::classifier::{LogisticConfig, TrainConfig};
use polsar::data::SynthConfig;
use polsar::eval::{AblationConfig, Variant};
use polsar::mrf::BpConfig;
use polsar::patch::{Aggregation, DenoiseConfig};
use polsar::pipeline::{
    check_paths, parse_noise, run_all, stage_ablation, stage_classify, stage_denoise, stage_eval, stage_refine,
    stage_render, stage_seed, stage_synth, stage_train, DenoisePaths, ModelConfig, ModelKind, RefineConfig, RunConfig,
    SynthOutputs, TrainPaths,
};
use polsar::rlrmf::EmConfig;
use polsar::{Error, ErrorClass};

/// PolSAR classification: robust low-rank denoising, CNN classification and
/// MRF label refinement.
#[derive(Parser, Debug)]
#[command(name = "polsar", version, args_override_self = true)]
struct Cli {
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// key=value file whose keys are the long flags of the subcommand.
    /// Flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene.
    Synth(SynthArgs),
    /// Normalize and denoise a feature raster.
    Denoise(DenoiseArgs),
    /// Train a classifier on sparse labels.
    Train(TrainArgs),
    /// Per-pixel class probabilities and their argmax.
    Classify(ClassifyArgs),
    /// MRF refinement of a probability map.
    Refine(RefineArgs),
    /// Score label maps, or run the ablation study.
    Eval(EvalArgs),
    /// Render a label map as PPM.
    Render(RenderArgs),
    /// Every stage in order from one seed.
    RunAll(RunAllArgs),
}

#[derive(clap::Args, Debug)]
#[command(allow_negative_numbers = true)]
struct SynthArgs {
    #[arg(long)]
    noisy: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    clean: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    rank: usize,
    /// Noise mixture as weight:sigma pairs.
    #[arg(long, default_value = "0.9:0.01,0.1:0.3")]
    noise: String,
    #[arg(long)]
    granularity: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args, Debug)]
struct EmArgs {
    #[arg(long, default_value_t = 7)]
    window: usize,
    #[arg(long, default_value = "average")]
    aggregation: String,
    #[arg(long, default_value_t = 2)]
    rank: usize,
    #[arg(long, default_value_t = 4)]
    components: usize,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long, default_value_t = 0.01)]
    u_tol: f64,
}

impl EmArgs {
    fn config(&self, seed: u64) -> Result<DenoiseConfig, Error> {
        Ok(DenoiseConfig {
            window: self.window,
            aggregation: self.aggregation.parse::<Aggregation>()?,
            em: EmConfig {
                rank: self.rank,
                k_init: self.components,
                max_iter: self.max_iter,
                u_tol: self.u_tol,
                seed,
                ..EmConfig::default()
            },
        })
    }
}

#[derive(clap::Args, Debug)]
#[command(allow_negative_numbers = true)]
struct DenoiseArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Where to write the normalized input.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Where to write the Pauli edge features of the output.
    #[arg(long)]
    pauli: Option<PathBuf>,
    /// Where to write the EM trace of one pixel.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Pixel traced, as row,col; defaults to the centre.
    #[arg(long)]
    trace_pixel: Option<String>,
    /// Take the input as already normalized.
    #[arg(long)]
    no_normalize: bool,
    #[command(flatten)]
    em: EmArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args, Debug)]
struct ModelArgs {
    /// cnn or simple.
    #[arg(long, default_value = "cnn")]
    model: String,
    #[arg(long, default_value_t = 12)]
    patch: usize,
    #[arg(long, default_value_t = 0.001)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.0005)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 50)]
    batch_size: usize,
    #[arg(long, default_value_t = 100)]
    max_epochs: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long)]
    no_augment: bool,
}

impl ModelArgs {
    fn config(&self, seed: u64) -> Result<ModelConfig, Error> {
        let cfg = ModelConfig {
            kind: self.model.parse::<ModelKind>()?,
            patch: self.patch,
            train: TrainConfig {
                learning_rate: self.learning_rate,
                weight_decay: self.weight_decay,
                momentum: self.momentum,
                batch_size: self.batch_size,
                max_epochs: self.max_epochs,
                patience: self.patience,
                val_fraction: self.val_fraction,
                augment: !self.no_augment,
                seed,
            },
            logistic: LogisticConfig::default(),
            seed,
        };
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[derive(clap::Args, Debug)]
#[command(allow_negative_numbers = true)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    model_out: PathBuf,
    /// Sparse training labels (0 = unlabelled).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Ground truth to sample training labels from when --labels is absent.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 0.02)]
    label_fraction: f64,
    /// Where to write the sampled training labels.
    #[arg(long)]
    labels_out: Option<PathBuf>,
    /// Where to write the per-epoch training log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args, Debug)]
#[command(allow_negative_numbers = true)]
struct ClassifyArgs {
    #[arg(long)]
    model_in: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Probability raster, one band per class.
    #[arg(long)]
    output: PathBuf,
    /// Where to write the argmax label map.
    #[arg(long)]
    labels_out: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
#[command(allow_negative_numbers = true)]
struct RefineArgs {
    #[arg(long)]
    probs: PathBuf,
    /// Edge features: a Pauli raster, or any 9-band coherency raster.
    #[arg(long)]
    pauli: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    alpha: f64,
    #[arg(long, default_value_t = 50)]
    iterations: usize,
    #[arg(long, default_value_t = 0.5)]
    damping: f64,
}

impl RefineArgs {
    fn config(&self) -> RefineConfig {
        RefineConfig {
            alpha: self.alpha,
            bp: BpConfig {
                iterations: self.iterations,
                damping: self.damping,
                ..BpConfig::default()
            },
        }
    }
}

#[derive(clap::Args, Debug)]
#[command(allow_negative_numbers = true)]
struct EvalArgs {
    #[arg(long)]
    truth: PathBuf,
    /// Label map to score, as name=path or a bare path.
    #[arg(long, action = ArgAction::Append)]
    pred: Vec<String>,
    /// Training labels whose pixels are left out of the score.
    #[arg(long)]
    exclude: Option<PathBuf>,
    /// Run the ablation over feature, model and refinement variants.
    #[arg(long)]
    ablation: bool,
    /// Normalized raw features, for the ablation.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Denoised features, for the ablation.
    #[arg(long)]
    denoised: Option<PathBuf>,
    /// Comma-separated variant names; all eight by default.
    #[arg(long)]
    variants: Option<String>,
    #[arg(long, default_value_t = 0.02)]
    label_fraction: f64,
    #[arg(long, default_value_t = 5.0)]
    alpha: f64,
    /// CSV output; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args, Debug)]
#[command(allow_negative_numbers = true)]
struct RenderArgs {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(clap::Args, Debug)]
#[command(allow_negative_numbers = true)]
struct RunAllArgs {
    #[arg(long, default_value = "out")]
    output_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also run the ablation study.
    #[arg(long)]
    ablation: bool,
    /// Write the EM trace of this pixel, as row,col.
    #[arg(long)]
    trace_pixel: Option<String>,
    #[arg(long, default_value = "average")]
    aggregation: String,
    /// cnn or simple.
    #[arg(long, default_value = "cnn")]
    model: String,
    #[arg(long, default_value_t = 0.02)]
    label_fraction: f64,
    #[arg(long, default_value_t = 5.0)]
    alpha: f64,
}

fn parse_pixel(s: &str) -> Result<(usize, usize), Error> {
    let bad = || Error::InvalidConfig(format!("pixel '{s}' is not row,col"));
    let (r, c) = s.split_once(',').ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

fn write_or_print(text: &str, out: Option<&Path>) -> Result<(), Error> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Synth(a) => {
            let mut cfg = SynthConfig {
                height: a.height,
                width: a.width,
                num_classes: a.classes,
                rank: a.rank,
                noise: parse_noise(&a.noise)?,
                ..SynthConfig::standard(a.seed)
            };
            if let Some(g) = a.granularity {
                cfg.granularity = g;
            }
            cfg.validate()?;
            let mut outs = vec![a.noisy.as_path(), a.truth.as_path()];
            outs.extend(a.clean.as_deref());
            check_paths(&[], &outs)?;
            stage_synth(
                &cfg,
                &SynthOutputs {
                    noisy: &a.noisy,
                    clean: a.clean.as_deref(),
                    truth: &a.truth,
                },
            )
        }
        Command::Denoise(a) => {
            let cfg = a.em.config(a.seed)?;
            cfg.em.validate()?;
            let pixel = a.trace_pixel.as_deref().map(parse_pixel).transpose()?;
            let mut outs = vec![a.output.as_path()];
            outs.extend(a.features.as_deref());
            outs.extend(a.pauli.as_deref());
            outs.extend(a.trace.as_deref());
            check_paths(&[&a.input], &outs)?;
            let fallbacks = stage_denoise(
                &cfg,
                !a.no_normalize,
                pixel,
                &DenoisePaths {
                    input: &a.input,
                    output: &a.output,
                    features: a.features.as_deref(),
                    pauli: a.pauli.as_deref(),
                    trace: a.trace.as_deref(),
                },
            )?;
            log::info!("denoised with {fallbacks} fallback pixels");
            Ok(())
        }
        Command::Train(a) => {
            let cfg = a.model.config(stage_seed(a.seed, "train"))?;
            if a.labels.is_none() && a.truth.is_none() {
                return Err(Error::InvalidConfig("train needs --labels or --truth".into()));
            }
            let mut ins = vec![a.features.as_path()];
            ins.extend(a.labels.as_deref().or(a.truth.as_deref()));
            let mut outs = vec![a.model_out.as_path()];
            outs.extend(a.labels_out.as_deref());
            outs.extend(a.log.as_deref());
            check_paths(&ins, &outs)?;
            let trained = stage_train(
                &cfg,
                a.label_fraction,
                stage_seed(a.seed, "labels"),
                &TrainPaths {
                    features: &a.features,
                    labels: a.labels.as_deref(),
                    truth: a.truth.as_deref(),
                    labels_out: a.labels_out.as_deref(),
                    model: &a.model_out,
                    log: a.log.as_deref(),
                },
            )?;
            if let Some(log) = trained.log() {
                log::info!("kept epoch {} of {}", log.best_epoch, log.epochs.len());
            }
            Ok(())
        }
        Command::Classify(a) => {
            let mut outs = vec![a.output.as_path()];
            outs.extend(a.labels_out.as_deref());
            check_paths(&[&a.model_in, &a.features], &outs)?;
            stage_classify(&a.model_in, &a.features, &a.output, a.labels_out.as_deref())
        }
        Command::Refine(a) => {
            check_paths(&[&a.probs, &a.pauli], &[&a.output])?;
            let r = stage_refine(&a.config(), &a.probs, &a.pauli, &a.output)?;
            log::info!("energy {:.6} from iteration {}", r.energy, r.best_iteration);
            Ok(())
        }
        Command::Eval(a) => {
            let outs: Vec<&Path> = a.output.as_deref().into_iter().collect();
            if a.ablation {
                let (Some(features), Some(denoised)) = (&a.features, &a.denoised) else {
                    return Err(Error::InvalidConfig("--ablation needs --features and --denoised".into()));
                };
                let variants = match &a.variants {
                    Some(v) => v.split(',').map(|s| s.trim().parse::<Variant>()).collect::<Result<_, _>>()?,
                    None => Variant::all(),
                };
                check_paths(&[&a.truth, features, denoised], &outs)?;
                let cfg = AblationConfig {
                    label_fraction: a.label_fraction,
                    variants,
                    refine: RefineConfig {
                        alpha: a.alpha,
                        ..RefineConfig::default()
                    },
                    seed: a.seed,
                    ..AblationConfig::default()
                };
                let report = stage_ablation(&cfg, features, denoised, &a.truth)?;
                eprint!("{}", report.to_table());
                return write_or_print(&report.to_csv(), a.output.as_deref());
            }
            if a.pred.is_empty() {
                return Err(Error::InvalidConfig("eval needs at least one --pred".into()));
            }
            let preds: Vec<(String, PathBuf)> = a
                .pred
                .iter()
                .map(|p| match p.split_once('=') {
                    Some((name, path)) => (name.to_string(), PathBuf::from(path)),
                    None => (p.clone(), PathBuf::from(p)),
                })
                .collect();
            let mut ins: Vec<&Path> = vec![&a.truth];
            ins.extend(preds.iter().map(|(_, p)| p.as_path()));
            ins.extend(a.exclude.as_deref());
            check_paths(&ins, &outs)?;
            let csv = stage_eval(&preds, &a.truth, a.exclude.as_deref())?;
            write_or_print(&csv, a.output.as_deref())
        }
        Command::Render(a) => {
            check_paths(&[&a.labels], &[&a.output])?;
            stage_render(&a.labels, &a.output)
        }
        Command::RunAll(a) => {
            let mut cfg = RunConfig::standard(a.seed);
            cfg.denoise.aggregation = a.aggregation.parse()?;
            cfg.model.kind = a.model.parse()?;
            cfg.label_fraction = a.label_fraction;
            cfg.refine.alpha = a.alpha;
            cfg.ablation = a.ablation;
            cfg.trace_pixel = a.trace_pixel.as_deref().map(parse_pixel).transpose()?;
            if let Some(parent) = a.output_dir.parent().filter(|p| !p.as_os_str().is_empty()) {
                if !parent.is_dir() {
                    return Err(Error::io(
                        parent,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "output directory's parent not found"),
                    ));
                }
            }
            run_all(&cfg, &a.output_dir)
        }
    }
}

/// Index of the subcommand token in `args`, skipping the values of global
/// options.
fn subcommand_index(args: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--threads" || a == "--config" {
            i += 2;
        } else if a.starts_with('-') {
            i += 1;
        } else {
            return Some(i);
        }
    }
    None
}

/// Turns a config file into flags for `sub`, rejecting keys that are not
/// long flags of that subcommand.
fn config_flags(path: &Path, sub: &str) -> Result<Vec<OsString>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = Cli::command();
    let cmd = root
        .find_subcommand(sub)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown subcommand '{sub}'")))?;
    let mut flags = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        let arg = cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(key) && key != "config" && key != "help")
            .ok_or_else(|| Error::InvalidConfig(format!("{}:{}: unknown key '{key}' for {sub}", path.display(), n + 1)))?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value {
                "true" => flags.push(format!("--{key}").into()),
                "false" => {}
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "{}:{}: '{key}' takes true or false",
                        path.display(),
                        n + 1
                    )))
                }
            }
        } else {
            flags.push(format!("--{key}").into());
            flags.push(value.into());
        }
    }
    Ok(flags)
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Io => 3,
        ErrorClass::Validation => 4,
        ErrorClass::Numerical => 5,
        ErrorClass::Format => 6,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<OsString> = std::env::args_os().collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let stage = cli.command_name();
    let cli = match &cli.config {
        None => cli,
        Some(path) => {
            let flags = match config_flags(path, stage) {
                Ok(f) => f,
                Err(e) => {
                    eprintln!("polsar: {stage}: {e}");
                    return ExitCode::from(exit_code(&e));
                }
            };
            let at = subcommand_index(&args).expect("subcommand was parsed") + 1;
            let mut merged = args[..at].to_vec();
            merged.extend(flags);
            merged.extend_from_slice(&args[at..]);
            match Cli::try_parse_from(&merged) {
                Ok(c) => c,
                Err(e) => e.exit(),
            }
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("polsar: {e}");
        return ExitCode::from(4);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("polsar: {stage}: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

impl Cli {
    fn command_name(&self) -> &'static str {
        match self.command {
            Command::Synth(_) => "synth",
            Command::Denoise(_) => "denoise",
            Command::Train(_) => "train",
            Command::Classify(_) => "classify",
            Command::Refine(_) => "refine",
            Command::Eval(_) => "eval",
            Command::Render(_) => "render",
            Command::RunAll(_) => "run-all",
        }
    }
}
