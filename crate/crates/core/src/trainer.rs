//! A small CNN trained from scratch on a synthetic stripe dataset, with the
//! orthogonality penalty added to the task loss:
//!
//! `conv(1->8, k3, S1) -> ReLU -> conv(8->8, k3, S2) -> ReLU -> GAP -> linear(8->2)`
//!
//! Gradients are written out by hand and checked against finite differences
//! by [`grad_check_model`].

use serde::{Deserialize, Serialize};

use crate::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::gradcheck::{central_diff, max_rel_err};
use crate::orthreg::{
    conv_orth_loss, kernel_orth_loss, select_kernel_orientation, select_orientation, Orientation,
};
use crate::tensor::{KernelTensor, Rng, Tensor};

pub const IMAGE_SIZE: usize = 12;
pub const NUM_CLASSES: usize = 2;
const NOISE_STD: f64 = 0.3;
const STRIPE_PERIOD: usize = 4;

// Independent streams derived from the configured seed.
const INIT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
const SHUFFLE_STREAM: u64 = 0xc2b2_ae3d_27d4_eb4f;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegMode {
    None,
    Kernel,
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: RegMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            lr: 0.02,
            momentum: 0.9,
            epochs: 30,
            batch_size: 10,
            seed: 7,
            mode: RegMode::Conv,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is accepted so a run can be a deliberate no-op.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("{key}: {why}")));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be finite and >= 0");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        Ok(())
    }
}

/// Images `[1, 12, 12]`: class 0 has horizontal stripes, class 1 vertical.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Stripes of period 4 (+1 / -1 bands of width 2) at a random phase, plus
/// Gaussian noise with std 0.3. Samples alternate between the two classes.
pub fn gen_dataset(seed: u64, n_per_class: usize) -> Result<ToyDataset> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    let mut rng = Rng::new(seed);
    let mut images = Vec::with_capacity(2 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for _ in 0..n_per_class {
        for label in 0..NUM_CLASSES {
            let phase = rng.below(STRIPE_PERIOD);
            let mut data = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
            for h in 0..IMAGE_SIZE {
                for w in 0..IMAGE_SIZE {
                    let coord = if label == 0 { h } else { w };
                    let band = if (coord + phase) % STRIPE_PERIOD < STRIPE_PERIOD / 2 { 1.0 } else { -1.0 };
                    data.push(band + NOISE_STD * rng.normal());
                }
            }
            images.push(Tensor::from_vec(&[1, IMAGE_SIZE, IMAGE_SIZE], data)?);
            labels.push(label);
        }
    }
    Ok(ToyDataset {
        images,
        labels,
        num_classes: NUM_CLASSES,
    })
}

/// Closed-form two-feature classifier: horizontal stripes make the row means
/// vary, vertical stripes the column means. Returns its accuracy.
pub fn stripe_baseline_accuracy(data: &ToyDataset) -> f64 {
    let var = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64
    };
    let n = IMAGE_SIZE;
    let correct = data
        .images
        .iter()
        .zip(&data.labels)
        .filter(|(img, &label)| {
            let d = img.data();
            let rows: Vec<f64> = (0..n).map(|h| d[h * n..(h + 1) * n].iter().sum::<f64>() / n as f64).collect();
            let cols: Vec<f64> = (0..n).map(|w| (0..n).map(|h| d[h * n + w]).sum::<f64>() / n as f64).collect();
            let predicted = if var(&rows) - var(&cols) > 0.0 { 0 } else { 1 };
            predicted == label
        })
        .count();
    correct as f64 / data.len() as f64
}

/// Weights of the two-conv network. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub conv1: KernelTensor,
    pub bias1: Vec<f64>,
    pub conv2: KernelTensor,
    pub bias2: Vec<f64>,
    /// `[classes, hidden]`, row-major.
    pub fc_w: Vec<f64>,
    pub fc_b: Vec<f64>,
    geom1: ConvGeometry,
    geom2: ConvGeometry,
}

impl Model {
    /// He-normal conv weights and linear weights, zero biases.
    pub fn init(hidden: usize, rng: &mut Rng) -> Result<Self> {
        let geom1 = ConvGeometry::new(1, IMAGE_SIZE, IMAGE_SIZE, hidden, 3, 1, 0)?;
        let geom2 = ConvGeometry::new(hidden, geom1.h_out(), geom1.w_out(), hidden, 3, 2, 0)?;
        let conv1 = KernelTensor::he_normal(hidden, 1, 3, rng)?;
        let conv2 = KernelTensor::he_normal(hidden, hidden, 3, rng)?;
        let fc_std = (1.0 / hidden as f64).sqrt();
        let fc_w = (0..NUM_CLASSES * hidden).map(|_| fc_std * rng.normal()).collect();
        Ok(Model {
            conv1,
            bias1: vec![0.0; hidden],
            conv2,
            bias2: vec![0.0; hidden],
            fc_w,
            fc_b: vec![0.0; NUM_CLASSES],
            geom1,
            geom2,
        })
    }

    pub fn hidden(&self) -> usize {
        self.bias1.len()
    }

    pub fn geometries(&self) -> [ConvGeometry; 2] {
        [self.geom1, self.geom2]
    }

    pub fn kernels(&self) -> [&KernelTensor; 2] {
        [&self.conv1, &self.conv2]
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.conv1.data_mut().fill(0.0);
        z.conv2.data_mut().fill(0.0);
        z.bias1.fill(0.0);
        z.bias2.fill(0.0);
        z.fc_w.fill(0.0);
        z.fc_b.fill(0.0);
        z
    }

    pub fn num_params(&self) -> usize {
        self.conv1.data().len()
            + self.bias1.len()
            + self.conv2.data().len()
            + self.bias2.len()
            + self.fc_w.len()
            + self.fc_b.len()
    }

    /// Parameters in the order conv1, bias1, conv2, bias2, fc_w, fc_b.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(self.conv1.data());
        out.extend_from_slice(&self.bias1);
        out.extend_from_slice(self.conv2.data());
        out.extend_from_slice(&self.bias2);
        out.extend_from_slice(&self.fc_w);
        out.extend_from_slice(&self.fc_b);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "parameter vector length");
        let mut rest = flat;
        for dst in [
            self.conv1.data_mut(),
            &mut self.bias1[..],
            self.conv2.data_mut(),
            &mut self.bias2[..],
            &mut self.fc_w[..],
            &mut self.fc_b[..],
        ] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
    }

    fn logits(&self, x: &[f64]) -> Forward {
        let hidden = self.hidden();
        let mut a1 = vec![0.0; self.geom1.output_len()];
        conv::correlate(x, self.conv1.data(), &self.geom1, &mut a1);
        add_bias(&mut a1, &self.bias1);
        let r1: Vec<f64> = a1.iter().map(|v| v.max(0.0)).collect();
        let mut a2 = vec![0.0; self.geom2.output_len()];
        conv::correlate(&r1, self.conv2.data(), &self.geom2, &mut a2);
        add_bias(&mut a2, &self.bias2);
        let spatial = self.geom2.h_out() * self.geom2.w_out();
        let pooled: Vec<f64> = a2
            .chunks(spatial)
            .map(|c| c.iter().map(|v| v.max(0.0)).sum::<f64>() / spatial as f64)
            .collect();
        let logits = (0..NUM_CLASSES)
            .map(|o| {
                self.fc_b[o] + (0..hidden).map(|h| self.fc_w[o * hidden + h] * pooled[h]).sum::<f64>()
            })
            .collect();
        Forward {
            a1,
            r1,
            a2,
            pooled,
            logits,
        }
    }

    pub fn predict(&self, x: &Tensor) -> usize {
        argmax(&self.logits(x.data()).logits)
    }
}

struct Forward {
    a1: Vec<f64>,
    r1: Vec<f64>,
    a2: Vec<f64>,
    pooled: Vec<f64>,
    logits: Vec<f64>,
}

fn add_bias(act: &mut [f64], bias: &[f64]) {
    let per = act.len() / bias.len();
    for (chunk, b) in act.chunks_mut(per).zip(bias) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Mean cross-entropy over a batch and its gradient at the logits,
/// `(softmax - onehot) / batch`.
pub fn softmax_cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> (f64, Vec<Vec<f64>>) {
    let batch = labels.len() as f64;
    let mut loss = 0.0;
    let grads = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let mut p = softmax(z);
            loss -= p[y].ln();
            p[y] -= 1.0;
            p.iter_mut().for_each(|g| *g /= batch);
            p
        })
        .collect();
    (loss / batch, grads)
}

/// Task loss, per-layer penalty and the gradient of `task + lambda * penalty`.
pub struct LossEval {
    pub task_loss: f64,
    pub orth_loss: [f64; 2],
    pub grad: Model,
}

/// Per-layer penalty for `mode` and its gradient (unweighted).
fn layer_penalty(kernel: &KernelTensor, geom: &ConvGeometry, mode: RegMode) -> Result<Option<(f64, KernelTensor)>> {
    Ok(match mode {
        RegMode::None => None,
        RegMode::Conv => {
            let r = conv_orth_loss(kernel, geom.stride(), select_orientation(geom))?;
            Some((r.loss, r.grad))
        }
        RegMode::Kernel => {
            let r = kernel_orth_loss(kernel, select_kernel_orientation(kernel))?;
            Some((r.loss, r.grad))
        }
    })
}

/// Forward and backward pass over the samples `idx` of `data`.
pub fn loss_and_grad(
    model: &Model,
    data: &ToyDataset,
    idx: &[usize],
    mode: RegMode,
    lambda: f64,
) -> Result<LossEval> {
    let hidden = model.hidden();
    let mut grad = model.zeros_like();
    let passes: Vec<Forward> = idx.iter().map(|&i| model.logits(data.images[i].data())).collect();
    let logits: Vec<Vec<f64>> = passes.iter().map(|f| f.logits.clone()).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
    let (task_loss, d_logits) = softmax_cross_entropy(&logits, &labels);

    let spatial = model.geom2.h_out() * model.geom2.w_out();
    for ((&i, fwd), dz) in idx.iter().zip(&passes).zip(&d_logits) {
        let mut d_pool = vec![0.0; hidden];
        for (o, &dzo) in dz.iter().enumerate() {
            grad.fc_b[o] += dzo;
            for (h, dp) in d_pool.iter_mut().enumerate() {
                grad.fc_w[o * hidden + h] += dzo * fwd.pooled[h];
                *dp += dzo * model.fc_w[o * hidden + h];
            }
        }
        let mut d_a2 = vec![0.0; fwd.a2.len()];
        for (h, chunk) in d_a2.chunks_mut(spatial).enumerate() {
            let pre = &fwd.a2[h * spatial..(h + 1) * spatial];
            for (d, &a) in chunk.iter_mut().zip(pre) {
                if a > 0.0 {
                    *d = d_pool[h] / spatial as f64;
                }
            }
            grad.bias2[h] += chunk.iter().sum::<f64>();
        }
        conv::accumulate_grad_kernel(&fwd.r1, &d_a2, &model.geom2, grad.conv2.data_mut());
        let mut d_a1 = vec![0.0; fwd.a1.len()];
        conv::accumulate_grad_input(model.conv2.data(), &d_a2, &model.geom2, &mut d_a1);
        for (d, &a) in d_a1.iter_mut().zip(&fwd.a1) {
            if a <= 0.0 {
                *d = 0.0;
            }
        }
        let per = d_a1.len() / hidden;
        for (h, chunk) in d_a1.chunks(per).enumerate() {
            grad.bias1[h] += chunk.iter().sum::<f64>();
        }
        conv::accumulate_grad_kernel(data.images[i].data(), &d_a1, &model.geom1, grad.conv1.data_mut());
    }

    let mut orth_loss = [0.0; 2];
    let geoms = model.geometries();
    for (l, (kernel, geom)) in model.kernels().into_iter().zip(&geoms).enumerate() {
        if let Some((loss, g)) = layer_penalty(kernel, geom, mode)? {
            orth_loss[l] = loss;
            let dst = if l == 0 { grad.conv1.data_mut() } else { grad.conv2.data_mut() };
            dst.iter_mut().zip(g.data()).for_each(|(d, s)| *d += lambda * s);
        }
    }
    Ok(LossEval {
        task_loss,
        orth_loss,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean cross-entropy over the whole dataset after the epoch.
    pub task_loss: f64,
    /// Conv-orthogonality loss of each conv layer.
    pub orth_loss: Vec<f64>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetrics {
    /// State before the first update, reported as epoch 0.
    pub initial: EpochMetrics,
    pub epochs: Vec<EpochMetrics>,
    pub final_kernels: Vec<KernelTensor>,
    pub model: Model,
}

/// Conv-orthogonality loss of every layer, in the orientation each layer is
/// regularized with.
pub fn layer_conv_orth(model: &Model) -> Result<Vec<f64>> {
    model
        .kernels()
        .into_iter()
        .zip(model.geometries())
        .map(|(k, g)| Ok(conv_orth_loss(k, g.stride(), select_orientation(&g))?.loss))
        .collect()
}

fn evaluate(model: &Model, data: &ToyDataset, epoch: usize) -> Result<EpochMetrics> {
    let all: Vec<usize> = (0..data.len()).collect();
    let logits: Vec<Vec<f64>> = all.iter().map(|&i| model.logits(data.images[i].data()).logits).collect();
    let (task_loss, _) = softmax_cross_entropy(&logits, &data.labels);
    let correct = logits.iter().zip(&data.labels).filter(|(z, &y)| argmax(z) == y).count();
    let orth_loss = layer_conv_orth(model)?;
    if !task_loss.is_finite() || orth_loss.iter().any(|v| !v.is_finite()) {
        return Err(Error::Training {
            epoch,
            detail: format!("non-finite loss (task {task_loss}, orth {orth_loss:?})"),
        });
    }
    Ok(EpochMetrics {
        epoch,
        task_loss,
        orth_loss,
        accuracy: correct as f64 / data.len() as f64,
    })
}

/// Minibatch SGD with momentum (`v = mu v + g`, `w -= lr v`) on
/// `L_task + lambda * L_orth`. Deterministic for a given config.
pub fn train(config: &TrainConfig, data: &ToyDataset) -> Result<TrainMetrics> {
    train_with_hidden(config, data, 8)
}

pub fn train_with_hidden(config: &TrainConfig, data: &ToyDataset, hidden: usize) -> Result<TrainMetrics> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let mut model = Model::init(hidden, &mut Rng::new(config.seed ^ INIT_STREAM))?;
    let mut shuffle_rng = Rng::new(config.seed ^ SHUFFLE_STREAM);
    let mut velocity = vec![0.0; model.num_params()];
    let initial = evaluate(&model, data, 0)?;
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=config.epochs {
        shuffle_rng.shuffle(&mut order);
        for batch in order.chunks(config.batch_size) {
            let eval = loss_and_grad(&model, data, batch, config.mode, config.lambda)?;
            let total = eval.task_loss + config.lambda * eval.orth_loss.iter().sum::<f64>();
            if !total.is_finite() {
                return Err(Error::Training {
                    epoch,
                    detail: format!("minibatch loss became {total}"),
                });
            }
            let g = eval.grad.params();
            let mut w = model.params();
            for ((wi, vi), gi) in w.iter_mut().zip(velocity.iter_mut()).zip(&g) {
                *vi = config.momentum * *vi + gi;
                *wi -= config.lr * *vi;
            }
            model.set_params(&w);
        }
        epochs.push(evaluate(&model, data, epoch)?);
    }
    Ok(TrainMetrics {
        initial,
        epochs,
        final_kernels: vec![model.conv1.clone(), model.conv2.clone()],
        model,
    })
}

/// Largest relative error between the backprop gradient of the full loss and
/// central differences, on a width-3 network (122 parameters) and 4 images.
/// The relative error of each entry is `|a - n| / max(|a|, |n|, 1e-7)`.
pub fn grad_check_model(config: &TrainConfig, eps: f64) -> Result<f64> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {eps}")));
    }
    if config.lambda.is_nan() || config.lambda < 0.0 {
        return Err(Error::Config("lambda must be >= 0".into()));
    }
    let data = gen_dataset(config.seed, 2)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut model = Model::init(3, &mut Rng::new(config.seed ^ INIT_STREAM))?;
    let analytic = loss_and_grad(&model, &data, &idx, config.mode, config.lambda)?.grad.params();
    let base = model.params();
    let numeric = central_diff(
        |p| {
            model.set_params(p);
            let e = loss_and_grad(&model, &data, &idx, config.mode, config.lambda)?;
            Ok(e.task_loss + config.lambda * e.orth_loss.iter().sum::<f64>())
        },
        &base,
        eps,
    )?;
    Ok(max_rel_err(&analytic, &numeric, 1e-7))
}

/// Result of [`minimize_orth_only`].
#[derive(Debug, Clone)]
pub struct OrthDescent {
    pub kernel: KernelTensor,
    /// Loss before the first step followed by the loss after every step.
    pub trajectory: Vec<f64>,
    pub final_lr: f64,
}

/// Gradient descent on the row conv-orthogonality loss alone. A step that
/// would raise the loss is rejected and the step size halved.
pub fn minimize_orth_only(kernel: &KernelTensor, stride: usize, steps: usize, lr: f64) -> Result<OrthDescent> {
    if steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
    }
    let mut current = kernel.clone();
    let mut report = conv_orth_loss(&current, stride, Orientation::Row)?;
    let mut lr = lr;
    let mut trajectory = Vec::with_capacity(steps + 1);
    trajectory.push(report.loss);
    for _ in 0..steps {
        if report.loss == 0.0 {
            trajectory.push(0.0);
            continue;
        }
        let mut candidate = current.clone();
        candidate
            .data_mut()
            .iter_mut()
            .zip(report.grad.data())
            .for_each(|(w, g)| *w -= lr * g);
        let next = conv_orth_loss(&candidate, stride, Orientation::Row)?;
        if !next.loss.is_finite() {
            return Err(Error::Numerical(format!("orthogonality descent diverged at lr {lr}")));
        }
        if next.loss <= report.loss {
            current = candidate;
            report = next;
        } else {
            lr *= 0.5;
        }
        trajectory.push(report.loss);
    }
    Ok(OrthDescent {
        kernel: current,
        trajectory,
        final_lr: lr,
    })
}
