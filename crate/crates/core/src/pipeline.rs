//! Stage functions shared by the command line and the ablation harness.
//!
//! Every stage reads its inputs from and writes its outputs to files, so a
//! chain of stages run one by one produces exactly what `run_all` produces.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::classifier::{
    context_side, extract_input, fit_logistic, load_cnn, load_logistic, predict_map, save_cnn, save_logistic, train, Cnn, CnnSpec,
    LogisticConfig, LogisticModel, ProbabilityMap, Sample, TrainConfig, TrainLog,
};
use crate::data::io::{read_file, write_file};
use crate::data::{
    load_labels, load_raster, normalize_bands, pauli_image, render_ppm, save_labels, save_raster, synth_generate,
    FeatureImage, LabelMap, MogComponent, SynthConfig,
};
use crate::error::{Error, Result};
use crate::eval::{ablation_run, holdout, sample_labels, score, AblationConfig, AblationInputs, AblationReport};
use crate::mrf::{build_model, min_sum_bp, BpConfig, BpResult};
use crate::patch::{denoise_image, fit_pixel, DenoiseConfig};

/// Seed of one stage: the first 8 bytes of SHA-256 over the global seed
/// (little-endian) followed by the stage name.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Parses `weight:sigma` pairs separated by commas.
pub fn parse_noise(s: &str) -> Result<Vec<MogComponent>> {
    s.split(',')
        .map(|part| {
            let (w, sd) = part
                .split_once(':')
                .ok_or_else(|| Error::InvalidConfig(format!("noise component '{part}' is not weight:sigma")))?;
            let num = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidConfig(format!("bad number '{v}' in noise spec")))
            };
            Ok(MogComponent {
                weight: num(w)?,
                sigma: num(sd)?,
            })
        })
        .collect()
}

pub fn format_noise(noise: &[MogComponent]) -> String {
    noise
        .iter()
        .map(|c| format!("{}:{}", c.weight, c.sigma))
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Multinomial logistic regression on single pixels.
    Simple,
    Cnn,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(ModelKind::Simple),
            "cnn" => Ok(ModelKind::Cnn),
            other => Err(Error::InvalidConfig(format!("unknown model '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// CNN input patch side.
    pub patch: usize,
    pub train: TrainConfig,
    pub logistic: LogisticConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Cnn,
            patch: 12,
            train: TrainConfig::default(),
            logistic: LogisticConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Trained {
    Simple(LogisticModel),
    Cnn(Cnn, TrainLog),
}

impl Trained {
    pub fn predict_map(&self, img: &FeatureImage) -> Result<ProbabilityMap> {
        match self {
            Trained::Simple(m) => m.predict_map(img),
            Trained::Cnn(net, _) => predict_map(net, img),
        }
    }

    pub fn log(&self) -> Option<&TrainLog> {
        match self {
            Trained::Simple(_) => None,
            Trained::Cnn(_, log) => Some(log),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            Trained::Simple(m) => save_logistic(m, path),
            Trained::Cnn(net, _) => save_cnn(net, path),
        }
    }

    /// Loads either model type, recognised by its magic bytes.
    pub fn load(path: &Path) -> Result<Trained> {
        let bytes = read_file(path)?;
        if bytes.starts_with(b"PLR1") {
            load_logistic(path).map(Trained::Simple)
        } else {
            load_cnn(path).map(|net| Trained::Cnn(net, TrainLog::default()))
        }
    }
}

/// Trains on the labelled pixels of a sparse label map.
pub fn train_model(img: &FeatureImage, labels: &LabelMap, cfg: &ModelConfig) -> Result<Trained> {
    if img.height() != labels.height() || img.width() != labels.width() {
        return Err(Error::Shape("training labels and features differ in size".into()));
    }
    let pixels: Vec<(usize, usize, u16)> = (0..img.height())
        .flat_map(|r| (0..img.width()).map(move |c| (r, c)))
        .filter_map(|(r, c)| {
            let l = labels.get(r, c);
            (l != 0).then_some((r, c, l))
        })
        .collect();
    match cfg.kind {
        ModelKind::Simple => {
            let px: Vec<&[f64]> = pixels.iter().map(|(r, c, _)| img.pixel(*r, *c)).collect();
            let y: Vec<u16> = pixels.iter().map(|p| p.2).collect();
            Ok(Trained::Simple(fit_logistic(&px, &y, labels.num_classes(), &cfg.logistic)?))
        }
        ModelKind::Cnn => {
            let spec = CnnSpec::new(cfg.patch, img.depth(), labels.num_classes())?;
            let samples: Vec<Sample> = pixels
                .iter()
                .map(|(r, c, l)| Sample {
                    patch: extract_input(img, *r, *c, context_side(cfg.patch)),
                    label: *l,
                })
                .collect();
            let tc = TrainConfig {
                seed: cfg.seed,
                ..cfg.train.clone()
            };
            let (net, log) = train(&samples, spec, &tc)?;
            Ok(Trained::Cnn(net, log))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    pub alpha: f64,
    pub bp: BpConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            alpha: 5.0,
            bp: BpConfig::default(),
        }
    }
}

/// Pauli edge features of a 9-band image; a 3-band image is taken as given.
pub fn edge_features(img: &FeatureImage) -> Result<FeatureImage> {
    if img.depth() == 3 {
        Ok(img.clone())
    } else {
        pauli_image(img)
    }
}

pub fn refine(probs: &ProbabilityMap, features: &FeatureImage, cfg: &RefineConfig) -> Result<BpResult> {
    let z = edge_features(features)?;
    min_sum_bp(&build_model(probs, &z, cfg.alpha)?, &cfg.bp)
}

/// Min-max normalized features of a raw scene.
pub fn prepare_features(raw: &FeatureImage) -> FeatureImage {
    normalize_bands(raw).0
}

fn save_text(text: &str, path: &Path) -> Result<()> {
    write_file(path, text.as_bytes())
}

/// Fails unless every input exists and every output's directory exists.
pub fn check_paths(inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
    for p in inputs {
        if !p.is_file() {
            return Err(Error::io(*p, std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found")));
        }
    }
    for p in outputs {
        let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "output directory not found"),
            ));
        }
    }
    Ok(())
}

pub struct SynthOutputs<'a> {
    pub noisy: &'a Path,
    pub clean: Option<&'a Path>,
    pub truth: &'a Path,
}

pub fn stage_synth(cfg: &SynthConfig, out: &SynthOutputs) -> Result<()> {
    let scene = synth_generate(cfg)?;
    save_raster(&scene.noisy, out.noisy)?;
    if let Some(p) = out.clean {
        save_raster(&scene.clean, p)?;
    }
    save_labels(&scene.truth, out.truth)
}

pub struct DenoisePaths<'a> {
    pub input: &'a Path,
    pub output: &'a Path,
    /// Normalized input features, written when normalizing.
    pub features: Option<&'a Path>,
    pub pauli: Option<&'a Path>,
    pub trace: Option<&'a Path>,
}

/// Normalizes (optionally) and denoises; returns the fallback count.
pub fn stage_denoise(
    cfg: &DenoiseConfig,
    normalize: bool,
    trace_pixel: Option<(usize, usize)>,
    paths: &DenoisePaths,
) -> Result<usize> {
    let raw = load_raster(paths.input)?;
    let img = if normalize { prepare_features(&raw) } else { raw };
    if let Some(p) = paths.features {
        save_raster(&img, p)?;
    }
    // work from the stored precision so a restart from disk gives the same result
    let img = FeatureImage::new(
        img.height(),
        img.width(),
        img.depth(),
        img.data().iter().map(|v| *v as f32 as f64).collect(),
    )?;
    let out = denoise_image(&img, cfg)?;
    if out.fallbacks > 0 {
        log::warn!("denoise: {} pixels fell back to their raw values", out.fallbacks);
    }
    save_raster(&out.image, paths.output)?;
    if let Some(p) = paths.pauli {
        save_raster(&edge_features(&out.image)?, p)?;
    }
    if let Some(p) = paths.trace {
        let (r, c) = trace_pixel.unwrap_or((img.height() / 2, img.width() / 2));
        let fit = fit_pixel(&img, r, c, cfg)?;
        save_text(&fit.trace.to_csv(), p)?;
    }
    Ok(out.fallbacks)
}

pub struct TrainPaths<'a> {
    pub features: &'a Path,
    /// Sparse training labels; read if present, else sampled from `truth`.
    pub labels: Option<&'a Path>,
    pub truth: Option<&'a Path>,
    pub labels_out: Option<&'a Path>,
    pub model: &'a Path,
    pub log: Option<&'a Path>,
}

pub fn stage_train(cfg: &ModelConfig, fraction: f64, label_seed: u64, paths: &TrainPaths) -> Result<Trained> {
    let img = load_raster(paths.features)?;
    let labels = match (paths.labels, paths.truth) {
        (Some(p), _) => load_labels(p)?,
        (None, Some(t)) => sample_labels(&load_labels(t)?, fraction, label_seed)?,
        (None, None) => return Err(Error::InvalidConfig("train needs --labels or --truth".into())),
    };
    if let Some(p) = paths.labels_out {
        save_labels(&labels, p)?;
    }
    let trained = train_model(&img, &labels, cfg)?;
    trained.save(paths.model)?;
    if let (Some(p), Some(log)) = (paths.log, trained.log()) {
        save_text(&log.to_csv(), p)?;
    }
    Ok(trained)
}

pub fn stage_classify(model: &Path, features: &Path, out: &Path, labels_out: Option<&Path>) -> Result<()> {
    let trained = Trained::load(model)?;
    let probs = trained.predict_map(&load_raster(features)?)?;
    save_raster(&probs.to_raster(), out)?;
    if let Some(p) = labels_out {
        save_labels(&probs.argmax(), p)?;
    }
    Ok(())
}

pub fn stage_refine(cfg: &RefineConfig, probs: &Path, pauli: &Path, out: &Path) -> Result<BpResult> {
    let p = ProbabilityMap::from_raster(&load_raster(probs)?)?;
    let result = refine(&p, &load_raster(pauli)?, cfg)?;
    save_labels(&result.labels, out)?;
    Ok(result)
}

/// Scores prediction maps against truth, skipping training pixels if given.
/// One CSV row per prediction.
pub fn stage_eval(preds: &[(String, PathBuf)], truth: &Path, exclude: Option<&Path>) -> Result<String> {
    let mut truth = load_labels(truth)?;
    if let Some(p) = exclude {
        truth = holdout(&truth, &load_labels(p)?)?;
    }
    let c = truth.num_classes();
    let mut out = String::from("prediction,oa");
    for k in 1..=c {
        out.push_str(&format!(",ca_{k}"));
    }
    out.push_str(",discontinuities\n");
    for (name, path) in preds {
        let pred = load_labels(path)?;
        let s = score(&pred, &truth)?;
        out.push_str(&format!("{name},{:.4}", s.oa));
        for ca in &s.ca {
            out.push_str(&format!(",{ca:.4}"));
        }
        out.push_str(&format!(",{}\n", pred.discontinuities()));
    }
    Ok(out)
}

pub fn stage_ablation(cfg: &AblationConfig, features: &Path, denoised: &Path, truth: &Path) -> Result<AblationReport> {
    let raw = load_raster(features)?;
    let rlrmf = load_raster(denoised)?;
    let truth = load_labels(truth)?;
    ablation_run(
        &AblationInputs {
            raw: &raw,
            rlrmf: &rlrmf,
            truth: &truth,
        },
        cfg,
    )
}

pub fn stage_render(labels: &Path, out: &Path) -> Result<()> {
    write_file(out, &render_ppm(&load_labels(labels)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub denoise: DenoiseConfig,
    pub model: ModelConfig,
    pub label_fraction: f64,
    pub refine: RefineConfig,
    pub ablation: bool,
    pub trace_pixel: Option<(usize, usize)>,
}

impl RunConfig {
    pub fn standard(seed: u64) -> Self {
        RunConfig {
            seed,
            synth: SynthConfig::standard(seed),
            denoise: DenoiseConfig::default(),
            model: ModelConfig::default(),
            label_fraction: 0.02,
            refine: RefineConfig::default(),
            ablation: false,
            trace_pixel: None,
        }
    }
}

/// File names written by `run_all` inside its output directory.
pub mod artifacts {
    pub const NOISY: &str = "noisy.pfc";
    pub const CLEAN: &str = "clean.pfc";
    pub const TRUTH: &str = "truth.plm";
    pub const FEATURES: &str = "features.pfc";
    pub const DENOISED: &str = "denoised.pfc";
    pub const PAULI: &str = "pauli.pfc";
    pub const TRACE: &str = "trace.csv";
    pub const TRAIN_LABELS: &str = "train_labels.plm";
    pub const MODEL: &str = "model.pcn";
    pub const TRAIN_LOG: &str = "train_log.csv";
    pub const PROBS: &str = "probs.pfc";
    pub const CLASSIFIED: &str = "classified.plm";
    pub const REFINED: &str = "refined.plm";
    pub const EVAL: &str = "eval.csv";
    pub const ABLATION_CSV: &str = "ablation.csv";
    pub const ABLATION_TXT: &str = "ablation.txt";
    pub const TRUTH_PPM: &str = "truth.ppm";
    pub const REFINED_PPM: &str = "refined.ppm";
}

/// Chains every stage through files in `dir`, each stage seeded from the
/// global seed and its own name.
pub fn run_all(cfg: &RunConfig, dir: &Path) -> Result<()> {
    use artifacts::*;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = |name: &str| dir.join(name);
    let synth = SynthConfig {
        seed: stage_seed(cfg.seed, "synth"),
        ..cfg.synth.clone()
    };
    synth.validate()?;
    log::info!("synth");
    stage_synth(
        &synth,
        &SynthOutputs {
            noisy: &p(NOISY),
            clean: Some(&p(CLEAN)),
            truth: &p(TRUTH),
        },
    )?;
    let mut denoise = cfg.denoise.clone();
    denoise.em.seed = stage_seed(cfg.seed, "denoise");
    log::info!("denoise");
    stage_denoise(
        &denoise,
        true,
        cfg.trace_pixel,
        &DenoisePaths {
            input: &p(NOISY),
            output: &p(DENOISED),
            features: Some(&p(FEATURES)),
            pauli: Some(&p(PAULI)),
            trace: cfg.trace_pixel.map(|_| p(TRACE)).as_deref(),
        },
    )?;
    let model = ModelConfig {
        seed: stage_seed(cfg.seed, "train"),
        ..cfg.model.clone()
    };
    log::info!("train");
    stage_train(
        &model,
        cfg.label_fraction,
        stage_seed(cfg.seed, "labels"),
        &TrainPaths {
            features: &p(DENOISED),
            labels: None,
            truth: Some(&p(TRUTH)),
            labels_out: Some(&p(TRAIN_LABELS)),
            model: &p(MODEL),
            log: Some(&p(TRAIN_LOG)),
        },
    )?;
    log::info!("classify");
    stage_classify(&p(MODEL), &p(DENOISED), &p(PROBS), Some(&p(CLASSIFIED)))?;
    log::info!("refine");
    stage_refine(&cfg.refine, &p(PROBS), &p(PAULI), &p(REFINED))?;
    log::info!("eval");
    let report = stage_eval(
        &[
            ("classified".into(), p(CLASSIFIED)),
            ("refined".into(), p(REFINED)),
        ],
        &p(TRUTH),
        Some(&p(TRAIN_LABELS)),
    )?;
    save_text(&report, &p(EVAL))?;
    if cfg.ablation {
        let ab = AblationConfig {
            label_fraction: cfg.label_fraction,
            model: cfg.model.clone(),
            refine: cfg.refine.clone(),
            seed: cfg.seed,
            ..AblationConfig::default()
        };
        let report = stage_ablation(&ab, &p(FEATURES), &p(DENOISED), &p(TRUTH))?;
        save_text(&report.to_csv(), &p(ABLATION_CSV))?;
        save_text(&report.to_table(), &p(ABLATION_TXT))?;
    }
    stage_render(&p(TRUTH), &p(TRUTH_PPM))?;
    stage_render(&p(REFINED), &p(REFINED_PPM))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_differ_by_stage_and_seed() {
        assert_eq!(stage_seed(7, "train"), stage_seed(7, "train"));
        assert_ne!(stage_seed(7, "train"), stage_seed(7, "synth"));
        assert_ne!(stage_seed(7, "train"), stage_seed(8, "train"));
    }

    #[test]
    fn stage_seed_is_sha256_prefix() {
        // reference values from an independent SHA-256 implementation
        assert_eq!(stage_seed(0, "a"), 7586401852616081111);
        assert_eq!(stage_seed(7, "train"), 5456648705080600330);
    }

    #[test]
    fn noise_spec_round_trips() {
        let n = parse_noise("0.9:0.01,0.1:0.3").unwrap();
        assert_eq!(n.len(), 2);
        assert_eq!(n[1].sigma, 0.3);
        assert_eq!(parse_noise(&format_noise(&n)).unwrap(), n);
        assert!(parse_noise("0.9").is_err());
        assert!(parse_noise("a:b").is_err());
    }
}
