//! Training-loop primitives: adaptive-moment optimizer, mini-batch
//! iteration, one-epoch driver. The loss itself is supplied by the caller
//! (plain cross-entropy here; the multi-task objective lives in
//! `defence`).

use super::{build_loss, LockMode, LossSpec, Model, ModelError, TracedModel};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor};

/// Optimizer hyper-parameters. The defaults (learning rate 1e-3, batch 64)
/// train the desk models in minutes on a CPU.
#[derive(Debug, Clone)]
pub struct OptimizerCfg {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerCfg {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adaptive-moment estimation with bias correction. Frozen parameters are
/// skipped entirely.
pub struct Adam {
    cfg: OptimizerCfg,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(model: &Model, cfg: OptimizerCfg) -> Self {
        let m = model.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        let v = model.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self { cfg, m, v, step: 0 }
    }

    pub fn cfg(&self) -> &OptimizerCfg {
        &self.cfg
    }

    /// Applies one update given per-parameter gradients (aligned with
    /// `model.params()`; `None` for parameters absent from the graph).
    pub fn apply(&mut self, model: &mut Model, grads: &[Option<Tensor>]) {
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - self.cfg.beta1.powf(t);
        let bias2 = 1.0 - self.cfg.beta2.powf(t);
        for (idx, param) in model.params_mut().iter_mut().enumerate() {
            if param.frozen {
                continue;
            }
            let Some(grad) = &grads[idx] else { continue };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let values = param.tensor.values_mut();
            for (i, &g) in grad.values().iter().enumerate() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                values[i] -= self.cfg.learning_rate * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
            }
        }
    }
}

/// One mini-batch: images (N,C,H,W) plus labels.
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<u8>,
    /// index of the batch within the epoch, for diagnostics
    pub index: usize,
}

/// Scalar loss plus named term values for diagnostics.
#[derive(Debug)]
pub struct LossParts {
    pub loss: Tensor,
    pub terms: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub mean_loss: f64,
    pub accuracy: f64,
    pub batches: usize,
}

/// Runs one pass over the dataset, updating all non-frozen parameters.
/// `loss_builder` constructs the scalar objective on the step's tape from
/// the forward heads. Returns mean loss and main-head accuracy; aborts
/// with [`ModelError::NanLoss`] when the objective goes non-finite.
pub fn train_epoch<F>(
    model: &mut Model,
    images: &Tensor,
    labels: &[u8],
    opt: &mut Adam,
    seed: u64,
    mut loss_builder: F,
) -> Result<EpochMetrics, ModelError>
where
    F: FnMut(&mut Tape, &Model, &TracedModel, &Batch) -> Result<LossParts, ModelError>,
{
    let n = images.shape()[0];
    if n == 0 || labels.len() != n {
        return Err(ModelError::SpecInvalid(format!(
            "dataset has {n} images and {} labels",
            labels.len()
        )));
    }
    let batch_size = opt.cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::derive(seed, 0xba7c).shuffle(&mut order);

    let mut total_loss = 0.0;
    let mut correct = 0usize;
    let mut batches = 0usize;

    for (batch_index, chunk) in order.chunks(batch_size).enumerate() {
        let parts: Vec<Tensor> = chunk.iter().map(|&i| images.slice_batch(i)).collect();
        let batch_images = Tensor::stack_batch(&parts)?;
        let batch_labels: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
        let batch = Batch {
            images: batch_images,
            labels: batch_labels,
            index: batch_index,
        };

        let mut tape = Tape::for_training(seed ^ (batch_index as u64).wrapping_mul(0x9e37));
        let x = tape.leaf(&batch.images, false);
        let traced = model.trace(&mut tape, &x, LockMode::Normal)?;
        let parts = loss_builder(&mut tape, model, &traced, &batch)?;
        let loss_value = parts.loss.item();
        if !loss_value.is_finite() {
            return Err(ModelError::NanLoss {
                batch_index,
                terms: parts.terms,
            });
        }

        let main = traced.heads.main();
        for (r, &label) in batch.labels.iter().enumerate() {
            if main.argmax_row(r) == label as usize {
                correct += 1;
            }
        }

        let grad_map = tape.backward(&parts.loss)?;
        let grads: Vec<Option<Tensor>> = traced
            .param_leaves()
            .iter()
            .map(|leaf| grad_map.grad(leaf).ok().map(Tensor::detached))
            .collect();
        opt.apply(model, &grads);

        total_loss += loss_value;
        batches += 1;
    }

    Ok(EpochMetrics {
        mean_loss: total_loss / batches as f64,
        accuracy: correct as f64 / n as f64,
        batches,
    })
}

/// Plain cross-entropy training on the main head for the given number of
/// epochs. Returns per-epoch metrics.
pub fn fit_cross_entropy(
    model: &mut Model,
    images: &Tensor,
    labels: &[u8],
    epochs: usize,
    cfg: OptimizerCfg,
    seed: u64,
) -> Result<Vec<EpochMetrics>, ModelError> {
    let mut opt = Adam::new(model, cfg);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let metrics = train_epoch(
            model,
            images,
            labels,
            &mut opt,
            seed ^ (epoch as u64).wrapping_mul(0x5851f42d4c957f2d),
            |tape, model, traced, batch| {
                let spec = LossSpec::CrossEntropy {
                    head: super::Head::Main,
                    labels: &batch.labels,
                };
                let loss = build_loss(tape, model, traced, &spec)?;
                let value = loss.item();
                Ok(LossParts {
                    loss,
                    terms: vec![("cross_entropy".into(), value)],
                })
            },
        )?;
        history.push(metrics);
    }
    Ok(history)
}
