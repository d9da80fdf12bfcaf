//! The convolutional network: parameters, batch forward and backward passes.
//!
//! Activations are stored as `channels x (samples * height * width)` matrices,
//! sample-major then row-major within a sample.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const PROB_FLOOR: f64 = 1e-12;

/// Layer sizes of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CnnSpec {
    /// Side of the square input patch.
    pub patch: usize,
    pub depth: usize,
    pub classes: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
}

/// Spatial sides after each layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sides {
    pub conv1: usize,
    pub pool1: usize,
    pub conv2: usize,
    pub pool2: usize,
}

impl CnnSpec {
    pub const CONV1_KERNEL: usize = 3;
    pub const CONV2_KERNEL: usize = 2;

    /// 20 3x3 filters, 50 2x2 filters and 500 hidden units.
    pub fn new(patch: usize, depth: usize, classes: usize) -> Result<Self> {
        let spec = CnnSpec {
            patch,
            depth,
            classes,
            conv1: 20,
            conv2: 50,
            hidden: 500,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.depth == 0 || self.conv1 == 0 || self.conv2 == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        self.sides().map(|_| ())
    }

    pub fn sides(&self) -> Result<Sides> {
        let bad = || {
            Error::InvalidConfig(format!(
                "patch side {} does not chain through conv3/pool2/conv2/pool2",
                self.patch
            ))
        };
        let conv1 = self.patch.checked_sub(Self::CONV1_KERNEL - 1).filter(|s| *s > 0).ok_or_else(bad)?;
        if conv1 % 2 != 0 {
            return Err(bad());
        }
        let pool1 = conv1 / 2;
        let conv2 = pool1.checked_sub(Self::CONV2_KERNEL - 1).filter(|s| *s > 0).ok_or_else(bad)?;
        if conv2 % 2 != 0 {
            return Err(bad());
        }
        Ok(Sides {
            conv1,
            pool1,
            conv2,
            pool2: conv2 / 2,
        })
    }

    /// Length of the flattened feature vector entering the first dense layer.
    pub fn flat_len(&self) -> usize {
        let s = self.sides().expect("validated spec").pool2;
        self.conv2 * s * s
    }

    pub fn input_len(&self) -> usize {
        self.patch * self.patch * self.depth
    }
}

/// Trainable parameters. Convolution and dense layers feeding batch-norm
/// carry no bias since the batch-norm shift subsumes it.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub conv1_w: DMatrix<f64>,
    pub bn1_gamma: DVector<f64>,
    pub bn1_beta: DVector<f64>,
    pub conv2_w: DMatrix<f64>,
    pub bn2_gamma: DVector<f64>,
    pub bn2_beta: DVector<f64>,
    pub fc1_w: DMatrix<f64>,
    pub bn3_gamma: DVector<f64>,
    pub bn3_beta: DVector<f64>,
    pub fc2_w: DMatrix<f64>,
    pub fc2_b: DVector<f64>,
}

pub const GROUP_NAMES: [&str; 11] = [
    "conv1.weight",
    "bn1.gamma",
    "bn1.beta",
    "conv2.weight",
    "bn2.gamma",
    "bn2.beta",
    "fc1.weight",
    "bn3.gamma",
    "bn3.beta",
    "fc2.weight",
    "fc2.bias",
];

impl Params {
    fn zeros(spec: &CnnSpec) -> Self {
        let k1 = CnnSpec::CONV1_KERNEL * CnnSpec::CONV1_KERNEL;
        let k2 = CnnSpec::CONV2_KERNEL * CnnSpec::CONV2_KERNEL;
        Params {
            conv1_w: DMatrix::zeros(spec.conv1, spec.depth * k1),
            bn1_gamma: DVector::zeros(spec.conv1),
            bn1_beta: DVector::zeros(spec.conv1),
            conv2_w: DMatrix::zeros(spec.conv2, spec.conv1 * k2),
            bn2_gamma: DVector::zeros(spec.conv2),
            bn2_beta: DVector::zeros(spec.conv2),
            fc1_w: DMatrix::zeros(spec.hidden, spec.flat_len()),
            bn3_gamma: DVector::zeros(spec.hidden),
            bn3_beta: DVector::zeros(spec.hidden),
            fc2_w: DMatrix::zeros(spec.classes, spec.hidden),
            fc2_b: DVector::zeros(spec.classes),
        }
    }

    pub fn groups(&self) -> [&[f64]; 11] {
        [
            self.conv1_w.as_slice(),
            self.bn1_gamma.as_slice(),
            self.bn1_beta.as_slice(),
            self.conv2_w.as_slice(),
            self.bn2_gamma.as_slice(),
            self.bn2_beta.as_slice(),
            self.fc1_w.as_slice(),
            self.bn3_gamma.as_slice(),
            self.bn3_beta.as_slice(),
            self.fc2_w.as_slice(),
            self.fc2_b.as_slice(),
        ]
    }

    pub fn groups_mut(&mut self) -> [&mut [f64]; 11] {
        [
            self.conv1_w.as_mut_slice(),
            self.bn1_gamma.as_mut_slice(),
            self.bn1_beta.as_mut_slice(),
            self.conv2_w.as_mut_slice(),
            self.bn2_gamma.as_mut_slice(),
            self.bn2_beta.as_mut_slice(),
            self.fc1_w.as_mut_slice(),
            self.bn3_gamma.as_mut_slice(),
            self.bn3_beta.as_mut_slice(),
            self.fc2_w.as_mut_slice(),
            self.fc2_b.as_mut_slice(),
        ]
    }

    /// Sum of squares of the weight matrices (not batch-norm or bias terms).
    pub fn weight_norm2(&self) -> f64 {
        [&self.conv1_w, &self.conv2_w, &self.fc1_w, &self.fc2_w]
            .iter()
            .map(|w| w.norm_squared())
            .sum()
    }

    pub fn len(&self) -> usize {
        self.groups().iter().map(|g| g.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Running statistics of one batch-norm layer, used in inference.
#[derive(Debug, Clone, PartialEq)]
pub struct BnRunning {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
}

impl BnRunning {
    fn new(n: usize) -> Self {
        BnRunning {
            mean: DVector::zeros(n),
            var: DVector::from_element(n, 1.0),
        }
    }

    fn update(&mut self, batch: &BnBatch) {
        let m = batch.count as f64;
        let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for c in 0..self.mean.len() {
            self.mean[c] = BN_MOMENTUM * self.mean[c] + (1.0 - BN_MOMENTUM) * batch.mean[c];
            self.var[c] = BN_MOMENTUM * self.var[c] + (1.0 - BN_MOMENTUM) * batch.var[c] * unbiased;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cnn {
    pub spec: CnnSpec,
    pub params: Params,
    pub running: [BnRunning; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm.
    Train,
    /// Running statistics in batch-norm.
    Eval,
}

/// Batch-norm statistics of one layer in one training batch.
#[derive(Debug, Clone)]
pub struct BnBatch {
    mean: Vec<f64>,
    var: Vec<f64>,
    count: usize,
}

struct BnCache {
    xhat: DMatrix<f64>,
    inv_std: Vec<f64>,
}

struct Cache {
    n: usize,
    cols1: DMatrix<f64>,
    bn1: BnCache,
    relu1: DMatrix<f64>,
    pool1_arg: Vec<usize>,
    cols2: DMatrix<f64>,
    bn2: BnCache,
    relu2: DMatrix<f64>,
    pool2_arg: Vec<usize>,
    flat: DMatrix<f64>,
    bn3: BnCache,
    hidden: DMatrix<f64>,
    probs: DMatrix<f64>,
}

/// Loss, gradients and batch-norm statistics from one training batch.
pub struct BatchGrad {
    pub loss: f64,
    pub grads: Params,
    pub bn: [BnBatch; 3],
}

impl Cnn {
    /// Fan-in scaled uniform weights, unit batch-norm scale, zero shifts and bias.
    pub fn init(spec: CnnSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::zeros(&spec);
        for w in [
            &mut params.conv1_w,
            &mut params.conv2_w,
            &mut params.fc1_w,
            &mut params.fc2_w,
        ] {
            let bound = (6.0 / w.ncols() as f64).sqrt();
            // row-major draw order so the layout of DMatrix does not leak into seeds
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    w[(r, c)] = rng.random_range(-bound..bound);
                }
            }
        }
        params.bn1_gamma.fill(1.0);
        params.bn2_gamma.fill(1.0);
        params.bn3_gamma.fill(1.0);
        Ok(Cnn {
            spec,
            params,
            running: [
                BnRunning::new(spec.conv1),
                BnRunning::new(spec.conv2),
                BnRunning::new(spec.hidden),
            ],
        })
    }

    /// Packs `n` patches, each `patch x patch x depth` in row-major pixel
    /// order with bands innermost, into the network's input layout.
    pub fn pack_inputs(&self, patches: &[&[f64]]) -> Result<DMatrix<f64>> {
        let p = self.spec.patch;
        let d = self.spec.depth;
        let mut x = DMatrix::zeros(d, patches.len() * p * p);
        for (n, patch) in patches.iter().enumerate() {
            if patch.len() != self.spec.input_len() {
                return Err(Error::Shape(format!(
                    "patch has {} values, network expects {}",
                    patch.len(),
                    self.spec.input_len()
                )));
            }
            for pix in 0..p * p {
                for b in 0..d {
                    x[(b, n * p * p + pix)] = patch[pix * d + b];
                }
            }
        }
        Ok(x)
    }

    /// Class probabilities (`classes x n`) for a packed batch.
    pub fn forward(&self, x: &DMatrix<f64>, mode: Mode) -> Result<DMatrix<f64>> {
        Ok(self.run(x, mode)?.0.probs)
    }

    /// Probabilities for one patch in inference mode.
    pub fn predict(&self, patch: &[f64]) -> Result<Vec<f64>> {
        let x = self.pack_inputs(&[patch])?;
        Ok(self.forward(&x, Mode::Eval)?.column(0).iter().copied().collect())
    }

    fn batch_len(&self, x: &DMatrix<f64>) -> Result<usize> {
        let pp = self.spec.patch * self.spec.patch;
        if x.nrows() != self.spec.depth || x.ncols() % pp != 0 || x.ncols() == 0 {
            return Err(Error::Shape(format!(
                "input is {}x{}, expected {} x (n*{pp})",
                x.nrows(),
                x.ncols(),
                self.spec.depth
            )));
        }
        Ok(x.ncols() / pp)
    }

    fn run(&self, x: &DMatrix<f64>, mode: Mode) -> Result<(Cache, [BnBatch; 3])> {
        let n = self.batch_len(x)?;
        let sides = self.spec.sides()?;
        let p = &self.params;

        let cols1 = im2col(x, n, self.spec.patch, CnnSpec::CONV1_KERNEL);
        let z1 = &p.conv1_w * &cols1;
        let (y1, bn1, s1) = batch_norm(z1, &p.bn1_gamma, &p.bn1_beta, &self.running[0], mode);
        let relu1 = y1.map(|v| v.max(0.0));
        let (pool1, pool1_arg) = max_pool(&relu1, n, sides.conv1);

        let cols2 = im2col(&pool1, n, sides.pool1, CnnSpec::CONV2_KERNEL);
        let z2 = &p.conv2_w * &cols2;
        let (y2, bn2, s2) = batch_norm(z2, &p.bn2_gamma, &p.bn2_beta, &self.running[1], mode);
        let relu2 = y2.map(|v| v.max(0.0));
        let (pool2, pool2_arg) = max_pool(&relu2, n, sides.conv2);

        let flat = flatten(&pool2, n, sides.pool2);
        let z3 = &p.fc1_w * &flat;
        let (y3, bn3, s3) = batch_norm(z3, &p.bn3_gamma, &p.bn3_beta, &self.running[2], mode);
        let hidden = y3.map(|v| v.max(0.0));

        let mut logits = &p.fc2_w * &hidden;
        for mut col in logits.column_iter_mut() {
            col += &p.fc2_b;
        }
        let probs = softmax_columns(logits);
        if probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite class probabilities".into()));
        }
        Ok((
            Cache {
                n,
                cols1,
                bn1,
                relu1,
                pool1_arg,
                cols2,
                bn2,
                relu2,
                pool2_arg,
                flat,
                bn3,
                hidden,
                probs,
            },
            [s1, s2, s3],
        ))
    }

    /// Summed cross-entropy of a batch (probabilities floored at 1e-12) plus
    /// `decay / 2` times the squared weight norm.
    pub fn loss(&self, x: &DMatrix<f64>, labels: &[u16], decay: f64, mode: Mode) -> Result<f64> {
        let probs = self.forward(x, mode)?;
        Ok(loss_from_probs(&probs, labels, self.spec.classes)? + 0.5 * decay * self.params.weight_norm2())
    }

    /// Loss and its gradient for a training batch with batch-norm in train mode.
    pub fn loss_and_grad(&self, x: &DMatrix<f64>, labels: &[u16], decay: f64) -> Result<BatchGrad> {
        let (cache, bn) = self.run(x, Mode::Train)?;
        let loss = loss_from_probs(&cache.probs, labels, self.spec.classes)?
            + 0.5 * decay * self.params.weight_norm2();
        let grads = self.backward(&cache, labels, decay)?;
        Ok(BatchGrad { loss, grads, bn })
    }

    fn backward(&self, c: &Cache, labels: &[u16], decay: f64) -> Result<Params> {
        let sides = self.spec.sides()?;
        let p = &self.params;
        let n = c.n;

        // softmax and cross-entropy together: d/dlogits = P - onehot
        let mut dlogits = c.probs.clone();
        for (j, &y) in labels.iter().enumerate() {
            dlogits[(y as usize - 1, j)] -= 1.0;
        }
        let fc2_w = &dlogits * c.hidden.transpose() + decay * &p.fc2_w;
        let fc2_b = dlogits.column_sum();
        let dhidden = p.fc2_w.transpose() * &dlogits;
        let dy3 = dhidden.zip_map(&c.hidden, |g, h| if h > 0.0 { g } else { 0.0 });
        let (dz3, bn3_gamma, bn3_beta) = batch_norm_backward(&dy3, &c.bn3, &p.bn3_gamma);
        let fc1_w = &dz3 * c.flat.transpose() + decay * &p.fc1_w;
        let dflat = p.fc1_w.transpose() * &dz3;

        let dpool2 = unflatten(&dflat, n, sides.pool2);
        let drelu2 = unpool(&dpool2, &c.pool2_arg, c.relu2.ncols());
        let dy2 = drelu2.zip_map(&c.relu2, |g, a| if a > 0.0 { g } else { 0.0 });
        let (dz2, bn2_gamma, bn2_beta) = batch_norm_backward(&dy2, &c.bn2, &p.bn2_gamma);
        let conv2_w = &dz2 * c.cols2.transpose() + decay * &p.conv2_w;
        let dcols2 = p.conv2_w.transpose() * &dz2;
        let dpool1 = col2im(&dcols2, n, sides.pool1, CnnSpec::CONV2_KERNEL);

        let drelu1 = unpool(&dpool1, &c.pool1_arg, c.relu1.ncols());
        let dy1 = drelu1.zip_map(&c.relu1, |g, a| if a > 0.0 { g } else { 0.0 });
        let (dz1, bn1_gamma, bn1_beta) = batch_norm_backward(&dy1, &c.bn1, &p.bn1_gamma);
        let conv1_w = &dz1 * c.cols1.transpose() + decay * &p.conv1_w;

        Ok(Params {
            conv1_w,
            bn1_gamma,
            bn1_beta,
            conv2_w,
            bn2_gamma,
            bn2_beta,
            fc1_w,
            bn3_gamma,
            bn3_beta,
            fc2_w,
            fc2_b,
        })
    }

    /// Folds one training batch's statistics into the running averages.
    pub fn update_running(&mut self, bn: &[BnBatch; 3]) {
        for (r, b) in self.running.iter_mut().zip(bn) {
            r.update(b);
        }
    }

    /// Folds the batch statistics of `batches` into the running averages
    /// without touching the parameters, so the averages catch up with the
    /// current weights.
    pub fn refresh_running(&mut self, batches: &[DMatrix<f64>]) -> Result<()> {
        for x in batches {
            let (_, stats) = self.run(x, Mode::Train)?;
            self.update_running(&stats);
        }
        Ok(())
    }

    /// Rounds every stored value to single precision, so a network saved to a
    /// checkpoint and read back is identical to the one in memory.
    pub fn round_to_f32(&mut self) {
        for g in self.params.groups_mut() {
            g.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        for r in &mut self.running {
            r.mean.iter_mut().chain(r.var.iter_mut()).for_each(|v| *v = *v as f32 as f64);
        }
    }
}

fn loss_from_probs(probs: &DMatrix<f64>, labels: &[u16], classes: usize) -> Result<f64> {
    if labels.len() != probs.ncols() {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            probs.ncols()
        )));
    }
    let mut loss = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        if y == 0 || y as usize > classes {
            return Err(Error::InvalidInput(format!("label {y} outside 1..={classes}")));
        }
        loss -= probs[(y as usize - 1, j)].max(PROB_FLOOR).ln();
    }
    Ok(loss)
}

pub(crate) fn softmax_columns(mut logits: DMatrix<f64>) -> DMatrix<f64> {
    for mut col in logits.column_iter_mut() {
        let max = col.max();
        col.apply(|v| *v = (*v - max).exp());
        let total = col.sum();
        col /= total;
    }
    logits
}

/// `x` is `c x (n*side*side)`; the result is `(c*k*k) x (n*out*out)` with
/// `out = side - k + 1`, row index `(channel, ky, kx)`.
fn im2col(x: &DMatrix<f64>, n: usize, side: usize, k: usize) -> DMatrix<f64> {
    let c = x.nrows();
    let out = side - k + 1;
    let mut cols = DMatrix::zeros(c * k * k, n * out * out);
    for s in 0..n {
        for oy in 0..out {
            for ox in 0..out {
                let col = s * out * out + oy * out + ox;
                for ch in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let src = s * side * side + (oy + ky) * side + ox + kx;
                            cols[(ch * k * k + ky * k + kx, col)] = x[(ch, src)];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`.
fn col2im(cols: &DMatrix<f64>, n: usize, side: usize, k: usize) -> DMatrix<f64> {
    let c = cols.nrows() / (k * k);
    let out = side - k + 1;
    let mut x = DMatrix::zeros(c, n * side * side);
    for s in 0..n {
        for oy in 0..out {
            for ox in 0..out {
                let col = s * out * out + oy * out + ox;
                for ch in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let dst = s * side * side + (oy + ky) * side + ox + kx;
                            x[(ch, dst)] += cols[(ch * k * k + ky * k + kx, col)];
                        }
                    }
                }
            }
        }
    }
    x
}

fn batch_norm(
    z: DMatrix<f64>,
    gamma: &DVector<f64>,
    beta: &DVector<f64>,
    running: &BnRunning,
    mode: Mode,
) -> (DMatrix<f64>, BnCache, BnBatch) {
    let (rows, m) = z.shape();
    let mut mean = vec![0.0; rows];
    let mut var = vec![0.0; rows];
    match mode {
        Mode::Train => {
            for r in 0..rows {
                let row = z.row(r);
                mean[r] = row.sum() / m as f64;
                var[r] = row.iter().map(|v| (v - mean[r]).powi(2)).sum::<f64>() / m as f64;
            }
        }
        Mode::Eval => {
            mean.copy_from_slice(running.mean.as_slice());
            var.copy_from_slice(running.var.as_slice());
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = z;
    for col in 0..m {
        for r in 0..rows {
            xhat[(r, col)] = (xhat[(r, col)] - mean[r]) * inv_std[r];
        }
    }
    let mut y = xhat.clone();
    for col in 0..m {
        for r in 0..rows {
            y[(r, col)] = gamma[r] * y[(r, col)] + beta[r];
        }
    }
    (y, BnCache { xhat, inv_std }, BnBatch { mean, var, count: m })
}

fn batch_norm_backward(
    dy: &DMatrix<f64>,
    cache: &BnCache,
    gamma: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let (rows, m) = dy.shape();
    let mf = m as f64;
    let mut dgamma = DVector::zeros(rows);
    let mut dbeta = DVector::zeros(rows);
    for col in 0..m {
        for r in 0..rows {
            dgamma[r] += dy[(r, col)] * cache.xhat[(r, col)];
            dbeta[r] += dy[(r, col)];
        }
    }
    let mut dz = DMatrix::zeros(rows, m);
    for col in 0..m {
        for r in 0..rows {
            let dxhat_sum = gamma[r] * dbeta[r];
            let dxhat_xhat = gamma[r] * dgamma[r];
            let dxhat = gamma[r] * dy[(r, col)];
            dz[(r, col)] =
                cache.inv_std[r] / mf * (mf * dxhat - dxhat_sum - cache.xhat[(r, col)] * dxhat_xhat);
        }
    }
    (dz, dgamma, dbeta)
}

/// 2x2 max pooling with stride 2; ties go to the first element in scan order.
/// Returns the pooled activations and the source column of each maximum.
fn max_pool(x: &DMatrix<f64>, n: usize, side: usize) -> (DMatrix<f64>, Vec<usize>) {
    let c = x.nrows();
    let out = side / 2;
    let mut y = DMatrix::zeros(c, n * out * out);
    let mut arg = vec![0; c * n * out * out];
    for s in 0..n {
        for oy in 0..out {
            for ox in 0..out {
                let col = s * out * out + oy * out + ox;
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_src = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let src = s * side * side + (2 * oy + dy) * side + 2 * ox + dx;
                            if x[(ch, src)] > best {
                                best = x[(ch, src)];
                                best_src = src;
                            }
                        }
                    }
                    y[(ch, col)] = best;
                    arg[col * c + ch] = best_src;
                }
            }
        }
    }
    (y, arg)
}

fn unpool(dy: &DMatrix<f64>, arg: &[usize], in_cols: usize) -> DMatrix<f64> {
    let c = dy.nrows();
    let mut dx = DMatrix::zeros(c, in_cols);
    for col in 0..dy.ncols() {
        for ch in 0..c {
            dx[(ch, arg[col * c + ch])] += dy[(ch, col)];
        }
    }
    dx
}

/// `c x (n*side*side)` to `(c*side*side) x n`, feature index `(channel, y, x)`.
fn flatten(x: &DMatrix<f64>, n: usize, side: usize) -> DMatrix<f64> {
    let c = x.nrows();
    let ss = side * side;
    DMatrix::from_fn(c * ss, n, |f, s| x[(f / ss, s * ss + f % ss)])
}

fn unflatten(f: &DMatrix<f64>, n: usize, side: usize) -> DMatrix<f64> {
    let ss = side * side;
    let c = f.nrows() / ss;
    DMatrix::from_fn(c, n * ss, |ch, col| f[(ch * ss + col % ss, col / ss)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_chain() {
        let s = CnnSpec::new(12, 9, 5).unwrap();
        assert_eq!(
            s.sides().unwrap(),
            Sides {
                conv1: 10,
                pool1: 5,
                conv2: 4,
                pool2: 2
            }
        );
        assert_eq!(s.flat_len(), 200);
        assert!(CnnSpec::new(11, 9, 5).is_err());
        assert!(CnnSpec::new(10, 9, 5).is_err());
        assert!(CnnSpec::new(8, 9, 5).is_ok());
        assert!(CnnSpec::new(12, 9, 1).is_err());
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(3, 2 * 25, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(3 * 4, 2 * 16, |_, _| rng.random_range(-1.0..1.0));
        let lhs = im2col(&x, 2, 5, 2).dot(&y);
        let rhs = x.dot(&col2im(&y, 2, 5, 2));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn flatten_round_trips() {
        let x = DMatrix::from_fn(3, 2 * 4, |r, c| (r * 10 + c) as f64);
        assert_eq!(unflatten(&flatten(&x, 2, 2), 2, 2), x);
    }

    #[test]
    fn pooling_picks_block_maxima() {
        let x = DMatrix::from_row_slice(1, 16, &[
            1.0, 2.0, 0.0, 0.0, //
            3.0, 4.0, 0.0, 9.0, //
            5.0, 0.0, 1.0, 1.0, //
            0.0, 0.0, 1.0, 1.0,
        ]);
        let (y, arg) = max_pool(&x, 1, 4);
        assert_eq!(y.as_slice(), &[4.0, 9.0, 5.0, 1.0]);
        // tie resolved to the first element scanned
        assert_eq!(arg, vec![5, 7, 8, 10]);
    }
}
