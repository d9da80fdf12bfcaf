//! Accuracy scores and the feature/classifier/refinement ablation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{FeatureImage, LabelMap};
use crate::error::{Error, Result};
use crate::pipeline::{self, ModelConfig, ModelKind, RefineConfig};

/// Counts indexed `[truth - 1][pred - 1]`; unlabelled truth pixels excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[(truth - 1) * self.classes + pred - 1]
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        (1..=self.classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (1..=self.classes).map(|c| self.get(c, c)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub confusion: ConfusionMatrix,
    /// Per-class accuracy in percent; NaN for classes absent from the truth.
    pub ca: Vec<f64>,
    /// Overall accuracy in percent.
    pub oa: f64,
}

pub fn score(pred: &LabelMap, truth: &LabelMap) -> Result<Score> {
    if (pred.height(), pred.width(), pred.num_classes()) != (truth.height(), truth.width(), truth.num_classes()) {
        return Err(Error::Shape(format!(
            "prediction {}x{} with {} classes, truth {}x{} with {}",
            pred.height(),
            pred.width(),
            pred.num_classes(),
            truth.height(),
            truth.width(),
            truth.num_classes()
        )));
    }
    let c = truth.num_classes();
    let mut counts = vec![0u64; c * c];
    for (p, (y, t)) in pred.labels().iter().zip(truth.labels()).enumerate() {
        if *t == 0 {
            continue;
        }
        if *y == 0 {
            return Err(Error::InvalidInput(format!("prediction leaves labelled pixel {p} unlabelled")));
        }
        counts[(*t as usize - 1) * c + *y as usize - 1] += 1;
    }
    let confusion = ConfusionMatrix { classes: c, counts };
    let ca = (1..=c)
        .map(|k| 100.0 * confusion.get(k, k) as f64 / confusion.row_total(k) as f64)
        .collect();
    let total = confusion.total();
    if total == 0 {
        return Err(Error::InsufficientLabels("truth has no labelled pixels".into()));
    }
    let oa = 100.0 * confusion.correct() as f64 / total as f64;
    Ok(Score { confusion, ca, oa })
}

/// Draws `round(fraction * n_c)` pixels of every class, at least two, as a
/// sparse training label map.
pub fn sample_labels(truth: &LabelMap, fraction: f64, seed: u64) -> Result<LabelMap> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!("label fraction {fraction} outside (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0u16; truth.labels().len()];
    for c in 1..=truth.num_classes() as u16 {
        let mut members: Vec<usize> = (0..out.len()).filter(|p| truth.labels()[*p] == c).collect();
        if members.len() < 2 {
            return Err(Error::InsufficientLabels(format!(
                "class {c} has {} pixels, need at least 2",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n = ((fraction * members.len() as f64).round() as usize).clamp(2, members.len());
        for p in &members[..n] {
            out[*p] = c;
        }
    }
    LabelMap::new(truth.height(), truth.width(), truth.num_classes(), out)
}

/// Truth with the training pixels removed, for scoring on held-out pixels.
pub fn holdout(truth: &LabelMap, train: &LabelMap) -> Result<LabelMap> {
    if truth.labels().len() != train.labels().len() {
        return Err(Error::Shape("training labels do not match truth".into()));
    }
    let labels = truth
        .labels()
        .iter()
        .zip(train.labels())
        .map(|(t, s)| if *s != 0 { 0 } else { *t })
        .collect();
    LabelMap::new(truth.height(), truth.width(), truth.num_classes(), labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    Raw,
    Rlrmf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub features: FeatureSource,
    pub model: ModelKind,
    pub mrf: bool,
}

impl Variant {
    pub fn name(&self) -> String {
        let f = match self.features {
            FeatureSource::Raw => "raw",
            FeatureSource::Rlrmf => "rlrmf",
        };
        let m = match self.model {
            ModelKind::Simple => "simple",
            ModelKind::Cnn => "cnn",
        };
        if self.mrf {
            format!("{f}-{m}-mrf")
        } else {
            format!("{f}-{m}")
        }
    }

    /// All eight combinations, raw before denoised, simple before CNN.
    pub fn all() -> Vec<Variant> {
        let mut out = Vec::new();
        for features in [FeatureSource::Raw, FeatureSource::Rlrmf] {
            for model in [ModelKind::Simple, ModelKind::Cnn] {
                for mrf in [false, true] {
                    out.push(Variant { features, model, mrf });
                }
            }
        }
        out
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::all()
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub label_fraction: f64,
    pub variants: Vec<Variant>,
    pub model: ModelConfig,
    pub refine: RefineConfig,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            label_fraction: 0.02,
            variants: Variant::all(),
            model: ModelConfig::default(),
            refine: RefineConfig::default(),
            seed: 0,
        }
    }
}

/// Feature images for the ablation; both are normalized rasters of the
/// same scene.
#[derive(Debug, Clone)]
pub struct AblationInputs<'a> {
    pub raw: &'a FeatureImage,
    pub rlrmf: &'a FeatureImage,
    pub truth: &'a LabelMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub oa: f64,
    pub ca: Vec<f64>,
    /// 4-neighbour label changes in the predicted map.
    pub discontinuities: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub classes: usize,
    pub train_pixels: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn get(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,oa");
        for c in 1..=self.classes {
            write!(out, ",ca_{c}").unwrap();
        }
        out.push_str(",discontinuities\n");
        for r in &self.rows {
            write!(out, "{},{:.4}", r.variant, r.oa).unwrap();
            for ca in &r.ca {
                write!(out, ",{ca:.4}").unwrap();
            }
            writeln!(out, ",{}", r.discontinuities).unwrap();
        }
        out
    }

    pub fn to_table(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max(7);
        let mut out = format!("{:<name_w$}  {:>7}", "variant", "OA");
        for c in 1..=self.classes {
            write!(out, "  {:>7}", format!("CA{c}")).unwrap();
        }
        writeln!(out, "  {:>8}", "edges").unwrap();
        for r in &self.rows {
            write!(out, "{:<name_w$}  {:>7.2}", r.variant, r.oa).unwrap();
            for ca in &r.ca {
                write!(out, "  {ca:>7.2}").unwrap();
            }
            writeln!(out, "  {:>8}", r.discontinuities).unwrap();
        }
        out
    }
}

/// Trains each needed classifier once on the same sampled labels and scores
/// every variant on the held-out pixels.
pub fn ablation_run(inputs: &AblationInputs, cfg: &AblationConfig) -> Result<AblationReport> {
    let truth = inputs.truth;
    for img in [inputs.raw, inputs.rlrmf] {
        if img.height() != truth.height() || img.width() != truth.width() {
            return Err(Error::Shape("feature image and truth differ in size".into()));
        }
    }
    let train = sample_labels(truth, cfg.label_fraction, pipeline::stage_seed(cfg.seed, "labels"))?;
    let test = holdout(truth, &train)?;
    let mut rows = Vec::new();
    let mut cache: Vec<((FeatureSource, ModelKind), crate::classifier::ProbabilityMap)> = Vec::new();
    for v in &cfg.variants {
        let img = match v.features {
            FeatureSource::Raw => inputs.raw,
            FeatureSource::Rlrmf => inputs.rlrmf,
        };
        let key = (v.features, v.model);
        if !cache.iter().any(|(k, _)| *k == key) {
            let model_cfg = ModelConfig {
                kind: v.model,
                seed: pipeline::stage_seed(cfg.seed, "train"),
                ..cfg.model.clone()
            };
            let trained = pipeline::train_model(img, &train, &model_cfg)?;
            cache.push((key, trained.predict_map(img)?));
        }
        let probs = &cache.iter().find(|(k, _)| *k == key).expect("just inserted").1;
        let labels = if v.mrf {
            pipeline::refine(probs, img, &cfg.refine)?.labels
        } else {
            probs.argmax()
        };
        let s = score(&labels, &test)?;
        log::info!("{}: OA {:.2}", v.name(), s.oa);
        rows.push(AblationRow {
            variant: v.name(),
            oa: s.oa,
            ca: s.ca,
            discontinuities: labels.discontinuities(),
        });
    }
    Ok(AblationReport {
        classes: truth.num_classes(),
        train_pixels: train.labels().iter().filter(|l| **l != 0).count(),
        rows,
    })
}
