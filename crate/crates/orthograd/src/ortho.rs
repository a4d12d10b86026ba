//! Gradient-similarity penalty and the orthogonal training loop.
//!
//! The similarity between two models on a batch is the mean cosine of their
//! per-image input-gradients of the classification loss. Training minimizes
//! `loss + lambda * delta` where the reference model's gradients enter as
//! constants: the penalty reshapes the trained model's gradient field, never
//! the reference. The penalty's parameter gradient is exact (the backward
//! pass is differentiable); a finite-difference fallback path cross-checks
//! it.

use std::time::Instant;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{
    accuracy, build_model, forward, forward_with_input, loss, sgd_step, InitSpec, LayerSpec,
    Model, OptimizerSpec, SgdState,
};
use crate::tensor::Tensor;
use crate::util;

const NORM_FLOOR: f64 = 1e-12;

/// Mean cosine similarity of one batch.
#[derive(Debug, Clone, Copy)]
pub struct SimilaritySample {
    pub delta: f64,
    pub batch_size: usize,
}

/// Similarity statistics over several batches. `mean` keeps the sign of the
/// per-batch deltas; `mean_abs` averages their magnitudes (anti-parallel
/// gradients are still dissimilar to parallel ones, so both are reported).
#[derive(Debug, Clone, Copy)]
pub struct SimilarityStats {
    pub mean: f64,
    pub std: f64,
    pub mean_abs: f64,
    pub batches: usize,
}

/// Normalized per-image input-gradients of the classification loss,
/// flattened to `(batch, d)`. Each row is divided by `max(norm, 1e-12)`, so
/// exactly-zero gradients stay zero instead of becoming NaN.
pub fn input_gradients(model: &Model, batch: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let g = crate::graph::Graph::new();
    let input = g.leaf(batch.clone());
    let logits = forward_with_input(model, &input)?;
    let ce = loss(&logits, labels)?;
    let grad = ce.grad(&[&input])?.remove(0);
    let b = batch.shape()[0];
    let d = batch.numel() / b.max(1);
    let mut rows = grad.reshaped(vec![b, d])?;
    normalize_rows_in_place(&mut rows);
    Ok(rows)
}

fn normalize_rows_in_place(rows: &mut Tensor) {
    let (n, d) = rows.as_rows();
    let data = rows.data_mut();
    for i in 0..n {
        let row = &mut data[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
}

/// Mean over the batch of row-wise dot products. Rows are expected to be
/// already normalized (or exactly zero).
pub fn similarity(g1: &Tensor, g2: &Tensor) -> Result<SimilaritySample> {
    if g1.shape() != g2.shape() {
        return Err(Error::ShapeMismatch {
            op: "similarity",
            lhs: g1.shape().to_vec(),
            rhs: g2.shape().to_vec(),
        });
    }
    let (n, d) = g1.as_rows();
    if n == 0 {
        return Err(Error::InvalidArgument("similarity of an empty batch".into()));
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = &g1.data()[i * d..(i + 1) * d];
        let b = &g2.data()[i * d..(i + 1) * d];
        acc += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    }
    Ok(SimilaritySample { delta: acc / n as f64, batch_size: n })
}

/// The recorded pieces of one regularized objective evaluation.
pub struct OrthoLoss {
    /// `loss + lambda * delta` (or plain loss when `lambda == 0`).
    pub objective: Var,
    /// Classification loss alone.
    pub loss: Var,
    /// Batch similarity to the reference, when a reference was supplied.
    pub delta: Option<Var>,
    /// The forward recording; exposes the parameter leaves for `grad`.
    pub pass: crate::nn::ForwardPass,
}

/// Build the regularized training objective on a fresh graph.
///
/// The reference model's normalized input-gradients are computed on their
/// own graph and enter this one as constants; no gradient flows into the
/// frozen reference. The trained model's gradients are recorded with a
/// differentiable backward pass, so the objective's parameter-gradient is
/// exact.
pub fn ortho_loss(
    model: &Model,
    reference: Option<&Model>,
    batch: &Tensor,
    labels: &[usize],
    lambda: f64,
) -> Result<OrthoLoss> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda {lambda} must be >= 0")));
    }
    let pass = forward(model, batch)?;
    let ce = loss(&pass.logits, labels)?;

    let mut delta = None;
    if let Some(reference) = reference {
        let ref_grads = input_gradients(reference, batch, labels)?;
        let b = batch.shape()[0];
        let d = batch.numel() / b;
        let g1 = pass.graph.constant(ref_grads);

        let gin = ce.grad_graph(&[&pass.input])?.remove(0);
        let g2 = gin.reshape(vec![b, d])?.l2_normalize_rows(NORM_FLOOR)?;
        delta = Some(g1.mul(&g2)?.rowsum()?.mean());
    }

    let objective = match (&delta, lambda) {
        (Some(dv), l) if l > 0.0 => ce.add(&dv.scale(l))?,
        _ => ce.clone(),
    };
    Ok(OrthoLoss { objective, loss: ce, delta, pass })
}

/// Parameter gradients of the regularized objective via the exact
/// (double-backward) path.
pub fn ortho_param_grads(
    model: &Model,
    reference: Option<&Model>,
    batch: &Tensor,
    labels: &[usize],
    lambda: f64,
) -> Result<Vec<(String, Tensor)>> {
    let parts = ortho_loss(model, reference, batch, labels, lambda)?;
    let vars: Vec<&Var> = parts.pass.params.iter().map(|(_, v)| v).collect();
    let grads = parts.objective.grad(&vars)?;
    Ok(parts
        .pass
        .params
        .iter()
        .map(|(n, _)| n.clone())
        .zip(grads)
        .collect())
}

/// Finite-difference fallback for the penalty's parameter gradient: the
/// classification term stays exact, the `lambda * delta` term is replaced by
/// a five-point central stencil in each parameter coordinate. Exists to
/// cross-check the exact path; the exact path is the default everywhere.
pub fn ortho_param_grads_fd(
    model: &Model,
    reference: &Model,
    batch: &Tensor,
    labels: &[usize],
    lambda: f64,
    h: f64,
) -> Result<Vec<(String, Tensor)>> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda {lambda} must be >= 0")));
    }
    let mut grads = ortho_param_grads(model, None, batch, labels, 0.0)?;
    if lambda == 0.0 {
        return Ok(grads);
    }
    let ref_grads = input_gradients(reference, batch, labels)?;

    let delta_at = |m: &Model| -> Result<f64> {
        let g2 = input_gradients(m, batch, labels)?;
        Ok(similarity(&ref_grads, &g2)?.delta)
    };

    let mut probe = model.clone();
    for (pi, (_, tensor)) in model.params().iter().enumerate() {
        for k in 0..tensor.numel() {
            let theta = tensor.data()[k];
            let step = h * theta.abs().max(1.0);
            let mut eval_shift = |s: f64| -> Result<f64> {
                let mut params: Vec<(String, Tensor)> =
                    model.params().iter().map(|(n, t)| (n.clone(), t.clone())).collect();
                params[pi].1.data_mut()[k] = theta + s;
                probe.set_params(params)?;
                delta_at(&probe)
            };
            let f_m2 = eval_shift(-2.0 * step)?;
            let f_m1 = eval_shift(-step)?;
            let f_p1 = eval_shift(step)?;
            let f_p2 = eval_shift(2.0 * step)?;
            let d_delta = (f_m2 - 8.0 * f_m1 + 8.0 * f_p1 - f_p2) / (12.0 * step);
            grads[pi].1.data_mut()[k] += lambda * d_delta;
        }
    }
    Ok(grads)
}

/// Configuration of one training run.
#[derive(Debug, Clone)]
pub struct OrthoConfig {
    pub lambda: f64,
    /// Validation-accuracy check interval in epochs.
    pub epochs_check: usize,
    pub max_epochs: usize,
    pub optimizer: OptimizerSpec,
    /// Seeds both the Xavier init and the epoch shuffles.
    pub seed: u64,
}

impl OrthoConfig {
    pub fn new(lambda: f64, max_epochs: usize, optimizer: OptimizerSpec, seed: u64) -> Result<Self> {
        if lambda < 0.0 {
            return Err(Error::InvalidArgument(format!("lambda {lambda} must be >= 0")));
        }
        Ok(Self { lambda, epochs_check: 20, max_epochs, optimizer, seed })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_delta: f64,
    pub elapsed_sec: f64,
}

/// Per-epoch history plus the accuracy checkpoints of the stopping rule.
#[derive(Debug, Clone, Default)]
pub struct TrainRecord {
    pub epochs: Vec<EpochStats>,
    /// `(epoch, validation accuracy)` at each check.
    pub checks: Vec<(usize, f64)>,
    pub best_epoch: usize,
    pub best_accuracy: f64,
}

impl TrainRecord {
    /// CSV stream `epoch,loss,delta,val_acc`; the accuracy column is empty
    /// on epochs without a validation check. Timing never enters the file,
    /// keeping reruns byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,delta,val_acc\n");
        for e in &self.epochs {
            let acc = self
                .checks
                .iter()
                .find(|(ep, _)| *ep == e.epoch)
                .map(|(_, a)| format!("{a}"))
                .unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.mean_loss, e.mean_delta, acc));
        }
        out
    }
}

/// Train a model on `loss + lambda * delta` against a frozen reference.
///
/// Stopping rule: every `epochs_check` epochs the validation accuracy is
/// measured; training stops once it fails to improve over the previous
/// check, or at `max_epochs`. The best-accuracy parameter snapshot is what
/// gets returned.
pub fn train_orthogonal(
    arch: &[LayerSpec],
    reference: &Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &OrthoConfig,
) -> Result<(Model, TrainRecord)> {
    train_impl(arch, Some(reference), train, val, cfg)
}

/// Ordinary empirical-risk training: the `lambda = 0` degenerate case,
/// sharing the exact code path so seeds produce bit-identical parameters.
pub fn train_ordinary(
    arch: &[LayerSpec],
    train: &Dataset,
    val: &Dataset,
    cfg: &OrthoConfig,
) -> Result<(Model, TrainRecord)> {
    let mut cfg = cfg.clone();
    cfg.lambda = 0.0;
    train_impl(arch, None, train, val, &cfg)
}

fn train_impl(
    arch: &[LayerSpec],
    reference: Option<&Model>,
    train: &Dataset,
    val: &Dataset,
    cfg: &OrthoConfig,
) -> Result<(Model, TrainRecord)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be nonempty".into()));
    }
    if cfg.epochs_check == 0 {
        return Err(Error::InvalidArgument("epochs_check must be positive".into()));
    }
    let input_shape = train.image_shape();
    let mut model = build_model(input_shape, arch.to_vec(), InitSpec::xavier(cfg.seed))?;
    if let Some(r) = reference {
        if r.input_shape() != input_shape {
            return Err(Error::ShapeMismatch {
                op: "train_orthogonal",
                lhs: r.input_shape().to_vec(),
                rhs: input_shape.to_vec(),
            });
        }
        if r.num_classes() != model.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "reference has {} classes, architecture emits {}",
                r.num_classes(),
                model.num_classes()
            )));
        }
    }

    let mut state = SgdState::new(&model);
    let mut shuffle_rng = util::rng_from_seed(util::mix_seed(cfg.seed, 0x5417_F1E5));
    let mut record = TrainRecord::default();
    let mut best: Option<(Vec<(String, Tensor)>, f64, usize)> = None;
    let mut prev_acc: Option<f64> = None;

    'training: for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        util::shuffle(&mut shuffle_rng, &mut order);

        let mut loss_sum = 0.0;
        let mut delta_sum = 0.0;
        let mut seen = 0usize;
        for (bi, chunk) in order.chunks(cfg.optimizer.batch_size).enumerate() {
            let (batch, labels) = train.batch(chunk);
            let parts = ortho_loss(&model, reference, &batch, &labels, cfg.lambda)?;
            let batch_loss = parts.loss.item();
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi });
            }
            let vars: Vec<&Var> = parts.pass.params.iter().map(|(_, v)| v).collect();
            let grads_t = parts.objective.grad(&vars)?;
            let grads: Vec<(String, Tensor)> = parts
                .pass
                .params
                .iter()
                .map(|(n, _)| n.clone())
                .zip(grads_t)
                .collect();
            sgd_step(&mut model, &grads, &cfg.optimizer, &mut state)?;

            loss_sum += batch_loss * chunk.len() as f64;
            if let Some(dv) = &parts.delta {
                delta_sum += dv.item() * chunk.len() as f64;
            }
            seen += chunk.len();
        }
        record.epochs.push(EpochStats {
            epoch,
            mean_loss: loss_sum / seen as f64,
            mean_delta: delta_sum / seen as f64,
            elapsed_sec: t0.elapsed().as_secs_f64(),
        });

        if epoch % cfg.epochs_check == 0 {
            let acc = accuracy(&model, val)?;
            record.checks.push((epoch, acc));
            if best.as_ref().map_or(true, |(_, a, _)| acc > *a) {
                best = Some((model.params().to_vec(), acc, epoch));
            }
            if let Some(prev) = prev_acc {
                if acc <= prev {
                    break 'training;
                }
            }
            prev_acc = Some(acc);
        }
    }

    if best.is_none() {
        // max_epochs below the first check; evaluate once so the record and
        // the returned best checkpoint are always populated.
        let acc = accuracy(&model, val)?;
        record.checks.push((record.epochs.len(), acc));
        best = Some((model.params().to_vec(), acc, record.epochs.len()));
    }
    let (params, acc, epoch) = best.unwrap();
    model.set_params(params)?;
    record.best_accuracy = acc;
    record.best_epoch = epoch;
    Ok((model, record))
}

/// Similarity statistics between two models over `n_batches` deterministic
/// batches cycled from the dataset.
pub fn measure_pair_similarity(
    m1: &Model,
    m2: &Model,
    dataset: &Dataset,
    n_batches: usize,
    batch_size: usize,
) -> Result<SimilarityStats> {
    if n_batches == 0 {
        return Err(Error::InvalidArgument("similarity over zero batches".into()));
    }
    if batch_size == 0 || dataset.is_empty() {
        return Err(Error::InvalidArgument("similarity needs a nonempty batch".into()));
    }
    if m1.input_shape() != dataset.image_shape() || m2.input_shape() != dataset.image_shape() {
        return Err(Error::ShapeMismatch {
            op: "measure_pair_similarity",
            lhs: m1.input_shape().to_vec(),
            rhs: dataset.image_shape().to_vec(),
        });
    }
    let mut deltas = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let indices: Vec<usize> =
            (0..batch_size).map(|i| (b * batch_size + i) % dataset.len()).collect();
        let (batch, labels) = dataset.batch(&indices);
        let g1 = input_gradients(m1, &batch, &labels)?;
        let g2 = input_gradients(m2, &batch, &labels)?;
        deltas.push(similarity(&g1, &g2)?.delta);
    }
    let mean = deltas.iter().sum::<f64>() / n_batches as f64;
    let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n_batches as f64;
    let mean_abs = deltas.iter().map(|d| d.abs()).sum::<f64>() / n_batches as f64;
    Ok(SimilarityStats { mean, std: var.sqrt(), mean_abs, batches: n_batches })
}
