//! Mini-batch SGD with momentum, early stopping on validation accuracy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::net::{Cnn, CnnSpec, Mode, Params};
use super::{augment, crop_input};
use crate::error::{Error, Result};
use crate::patch::mix_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            weight_decay: 0.0005,
            momentum: 0.9,
            batch_size: 50,
            max_epochs: 100,
            patience: 10,
            val_fraction: 0.2,
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Seed of the initial network drawn by `train_on`.
    pub fn init_seed(&self) -> u64 {
        mix_seed(self.seed, 2)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.patience > 0
            && self.val_fraction > 0.0
            && self.val_fraction < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid training configuration {self:?}")))
        }
    }
}

/// One labelled input patch, laid out as for `Cnn::pack_inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub patch: Vec<f64>,
    pub label: u16,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch's batches.
    pub train_loss: f64,
    pub val_accuracy: f64,
    /// Mean validation cross-entropy, used to break accuracy ties.
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_accuracy,val_loss\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.10},{:.6},{:.10}\n",
                e.epoch, e.train_loss, e.val_accuracy, e.val_loss
            ));
        }
        out
    }
}

/// Stratified split: each class contributes `floor(fraction * n_c)` samples
/// to validation but always keeps at least one for training.
pub fn split_validation(
    samples: &[Sample],
    classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for c in 1..=classes as u16 {
        let mut members: Vec<&Sample> = samples.iter().filter(|s| s.label == c).collect();
        if members.is_empty() {
            return Err(Error::InsufficientLabels(format!("class {c} has no samples")));
        }
        members.shuffle(&mut rng);
        let n_val = ((fraction * members.len() as f64).floor() as usize).min(members.len() - 1);
        val.extend(members[..n_val].iter().map(|s| (*s).clone()));
        train.extend(members[n_val..].iter().map(|s| (*s).clone()));
    }
    Ok((train, val))
}

/// Fraction of samples whose most probable class matches the label.
pub fn accuracy(net: &Cnn, samples: &[Sample]) -> Result<f64> {
    Ok(evaluate(net, samples)?.0)
}

/// Accuracy and mean cross-entropy in inference mode.
pub fn evaluate(net: &Cnn, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut correct = 0;
    let mut loss = 0.0;
    for chunk in samples.chunks(256) {
        let refs: Vec<&[f64]> = chunk.iter().map(|s| s.patch.as_slice()).collect();
        let probs = net.forward(&net.pack_inputs(&refs)?, Mode::Eval)?;
        for (j, s) in chunk.iter().enumerate() {
            let col = probs.column(j);
            let mut best = 0;
            for c in 1..col.len() {
                if col[c] > col[best] {
                    best = c;
                }
            }
            correct += (best + 1 == s.label as usize) as usize;
            loss -= col[s.label as usize - 1].max(super::PROB_FLOOR).ln();
        }
    }
    let n = samples.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

/// Splits off a validation set, augments the training part and trains. Each
/// sample holds the [`context_side`](super::context_side)`(spec.patch)` square
/// around its pixel.
pub fn train(samples: &[Sample], spec: CnnSpec, cfg: &TrainConfig) -> Result<(Cnn, TrainLog)> {
    cfg.validate()?;
    let (tr, val) = split_validation(samples, spec.classes, cfg.val_fraction, mix_seed(cfg.seed, 1))?;
    if val.is_empty() {
        return Err(Error::InsufficientLabels("validation set is empty".into()));
    }
    let crop = |s: &Sample| -> Result<Sample> {
        Ok(Sample {
            patch: crop_input(&s.patch, spec.patch, spec.depth)?,
            label: s.label,
        })
    };
    let val = val.iter().map(crop).collect::<Result<Vec<_>>>()?;
    let tr = if cfg.augment {
        let mut aug = Vec::with_capacity(tr.len() * 8);
        for s in &tr {
            for (patch, label) in augment(&s.patch, s.label, spec.patch, spec.depth)? {
                aug.push(Sample { patch, label });
            }
        }
        aug
    } else {
        tr.iter().map(crop).collect::<Result<Vec<_>>>()?
    };
    train_on(&tr, &val, spec, cfg)
}

/// Splits `n` into `ceil(n / size)` batches whose sizes differ by at most one,
/// so no batch is left with a single sample for batch-norm.
fn batch_bounds(n: usize, size: usize) -> Vec<(usize, usize)> {
    let count = n.div_ceil(size);
    (0..count).map(|b| (b * n / count, (b + 1) * n / count)).collect()
}

/// Trains on a fixed training set, selecting the epoch with the best
/// validation accuracy, ties going to the lower validation loss. The returned
/// network is rounded to single precision.
pub fn train_on(train: &[Sample], val: &[Sample], spec: CnnSpec, cfg: &TrainConfig) -> Result<(Cnn, TrainLog)> {
    cfg.validate()?;
    for c in 1..=spec.classes as u16 {
        if !train.iter().any(|s| s.label == c) {
            return Err(Error::InsufficientLabels(format!("class {c} missing from training set")));
        }
    }
    if let Some(s) = train.iter().chain(val).find(|s| s.label == 0 || s.label as usize > spec.classes) {
        return Err(Error::InvalidInput(format!("label {} outside 1..={}", s.label, spec.classes)));
    }
    let mut net = Cnn::init(spec, cfg.init_seed())?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 3));
    let mut velocity = zero_like(&net.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, f64, Cnn)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (lo, hi) in batch_bounds(train.len(), cfg.batch_size) {
            let batch: Vec<&Sample> = order[lo..hi].iter().map(|i| &train[*i]).collect();
            let refs: Vec<&[f64]> = batch.iter().map(|s| s.patch.as_slice()).collect();
            let labels: Vec<u16> = batch.iter().map(|s| s.label).collect();
            let x = net.pack_inputs(&refs)?;
            let step = net.loss_and_grad(&x, &labels, cfg.weight_decay)?;
            if !step.loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss in epoch {epoch}")));
            }
            total += step.loss;
            for ((v, g), p) in velocity
                .groups_mut()
                .into_iter()
                .zip(step.grads.groups())
                .zip(net.params.groups_mut())
            {
                for ((vi, gi), pi) in v.iter_mut().zip(g).zip(p.iter_mut()) {
                    *vi = cfg.momentum * *vi - cfg.learning_rate * gi;
                    *pi += *vi;
                }
            }
            net.update_running(&step.bn);
        }
        // the running statistics lag the weights; one pass with the weights frozen
        let xs = batch_bounds(train.len(), cfg.batch_size)
            .into_iter()
            .map(|(lo, hi)| {
                let refs: Vec<&[f64]> = order[lo..hi].iter().map(|i| train[*i].patch.as_slice()).collect();
                net.pack_inputs(&refs)
            })
            .collect::<Result<Vec<_>>>()?;
        net.refresh_running(&xs)?;
        let (val_accuracy, val_loss) = evaluate(&net, val)?;
        let train_loss = total / train.len() as f64;
        log::debug!("epoch {epoch}: loss {train_loss:.6} val {val_accuracy:.4}");
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_accuracy,
            val_loss,
        });
        let improved = best
            .as_ref()
            .is_none_or(|(acc, loss, _)| val_accuracy > *acc || (val_accuracy == *acc && val_loss < *loss));
        if improved {
            best = Some((val_accuracy, val_loss, net.clone()));
            log.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, _, mut net) = best.expect("at least one epoch");
    net.round_to_f32();
    Ok((net, log))
}

fn zero_like(p: &Params) -> Params {
    let mut z = p.clone();
    for g in z.groups_mut() {
        g.fill(0.0);
    }
    z
}
