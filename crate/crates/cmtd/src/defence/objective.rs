//! The collaborative multi-task training objective
//!
//! ```text
//! J_obj = α·J(x, y_true)  +  β·J(x_adv, y_true)  +  γ·J'(x, x_adv, y_robust)
//! J'    = ½ { J(x, y_robust via Z')  +  J̄(x_adv, y_robust via Z') }
//! J̄    = −min(CE, clamp)        (push Z' away from y_robust on x_adv)
//! ```
//!
//! `x_adv` is a single-step signed-gradient example crafted on the
//! current weights at the start of every step and treated as constant
//! thereafter. The negative cross-entropy term is clamped (default 10.0)
//! so the objective stays bounded below.

use super::{Classmap, DefenceError};
use crate::nn::{
    grad_wrt_input, train_epoch, Adam, Batch, EpochMetrics, Head, LossParts, LossSpec, Model,
    ModelError, OptimizerCfg, TracedModel,
};
use crate::tensor::{one_hot, Tape, Tensor};

/// Weights of the three objective terms. Must be non-negative and sum
/// to 1 (±1e-9). The defaults weight both main-head terms at 0.4 and the
/// robust-label term at 0.2.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub loss_weight_alpha: f64,
    pub loss_weight_beta: f64,
    pub loss_weight_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            loss_weight_alpha: 0.4,
            loss_weight_beta: 0.4,
            loss_weight_gamma: 0.2,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self, DefenceError> {
        let weights = Self {
            loss_weight_alpha: alpha,
            loss_weight_beta: beta,
            loss_weight_gamma: gamma,
        };
        weights.validate()?;
        Ok(weights)
    }

    pub fn validate(&self) -> Result<(), DefenceError> {
        let (a, b, g) = (self.loss_weight_alpha, self.loss_weight_beta, self.loss_weight_gamma);
        if a < 0.0 || b < 0.0 || g < 0.0 {
            return Err(DefenceError::InvalidWeights(format!("negative weight in ({a}, {b}, {g})")));
        }
        if (a + b + g - 1.0).abs() > 1e-9 {
            return Err(DefenceError::InvalidWeights(format!(
                "weights sum to {} (need 1)",
                a + b + g
            )));
        }
        Ok(())
    }
}

/// Clamp applied to the negative cross-entropy term.
pub const NEGATIVE_CE_CLAMP: f64 = 10.0;

/// Crafts the in-step signed-gradient example on the current weights:
/// one step of size `eps_reg` along the sign of the main-head
/// cross-entropy input gradient, box-clipped. Returned detached.
fn in_step_adversarial(
    model: &Model,
    images: &Tensor,
    labels: &[u8],
    eps_reg: f64,
) -> Result<Tensor, ModelError> {
    let grad = grad_wrt_input(
        model,
        images,
        &LossSpec::CrossEntropy {
            head: Head::Main,
            labels,
        },
    )?;
    let mut adv = images.detached();
    for (v, &g) in adv.values_mut().iter_mut().zip(grad.values()) {
        *v = (*v + eps_reg * g.signum() * f64::from(u8::from(g != 0.0))).clamp(0.0, 1.0);
    }
    Ok(adv)
}

/// Builds the multi-task objective on `tape` for one batch. The benign
/// forward pass is supplied as `traced`; the adversarial example is
/// crafted here from the current weights and traced a second time on the
/// same tape. Returns the scalar loss plus the term values.
pub fn build_objective(
    tape: &mut Tape,
    model: &Model,
    traced: &TracedModel,
    batch: &Batch,
    classmap: &Classmap,
    weights: &LossWeights,
    eps_reg: f64,
) -> Result<LossParts, DefenceError> {
    if let Some(&bad) = batch.labels.iter().find(|&&l| l as usize >= classmap.class_count()) {
        return Err(DefenceError::MissingRobustLabel(bad));
    }
    let x_adv = in_step_adversarial(model, &batch.images, &batch.labels, eps_reg)?;
    build_objective_with_adv(tape, model, traced, batch, &x_adv, classmap, weights)
}

/// [`build_objective`] with the adversarial batch supplied by the caller.
/// `x_adv` enters as a constant: gradients flow through the network
/// weights and the benign input only, matching the training update.
pub fn build_objective_with_adv(
    tape: &mut Tape,
    model: &Model,
    traced: &TracedModel,
    batch: &Batch,
    x_adv: &Tensor,
    classmap: &Classmap,
    weights: &LossWeights,
) -> Result<LossParts, DefenceError> {
    weights.validate()?;
    if classmap.class_count() != model.class_count() {
        return Err(DefenceError::InvalidClassmap(format!(
            "Classmap covers {} classes, model has {}",
            classmap.class_count(),
            model.class_count()
        )));
    }
    let robust_labels: Vec<u8> = batch
        .labels
        .iter()
        .map(|&l| {
            if (l as usize) < classmap.class_count() {
                Ok(classmap.robust_label(l))
            } else {
                Err(DefenceError::MissingRobustLabel(l))
            }
        })
        .collect::<Result<_, _>>()?;

    let k = model.class_count();
    let y_true = tape.leaf(&one_hot(&batch.labels, k), false);
    let y_robust = tape.leaf(&one_hot(&robust_labels, k), false);

    let x_adv_leaf = tape.leaf(x_adv, false);
    // the adversarial pass shares the benign pass's parameter leaves so
    // weight gradients from both terms accumulate on the same nodes
    let heads_adv =
        model.forward_with_binding(tape, &traced.binding, &x_adv_leaf, crate::nn::LockMode::Normal)?;

    let zp_benign = traced
        .heads
        .auxiliary()
        .ok_or(DefenceError::NotDefended(model.variant()))?;
    let zp_adv = heads_adv.auxiliary().expect("defended variant");

    // α·J(x, y_true) on the main head
    let j_benign = tape.cross_entropy_with_logits(traced.heads.main(), &y_true)?;
    // β·J(x_adv, y_true) on the main head
    let j_adv = tape.cross_entropy_with_logits(heads_adv.main(), &y_true)?;
    // J(x, y_robust) on the auxiliary head
    let j_robust_benign = tape.cross_entropy_with_logits(zp_benign, &y_robust)?;
    // J̄(x_adv, y_robust): clamped negative cross-entropy on the auxiliary head
    let ce_adv = tape.cross_entropy_with_logits(zp_adv, &y_robust)?;
    let clamped = tape.clip(&ce_adv, f64::NEG_INFINITY, NEGATIVE_CE_CLAMP)?;
    let j_robust_adv = tape.negate(&clamped)?;

    let half_sum = {
        let s = tape.add(&j_robust_benign, &j_robust_adv)?;
        tape.scalar_mul(&s, 0.5)?
    };
    let term_a = tape.scalar_mul(&j_benign, weights.loss_weight_alpha)?;
    let term_b = tape.scalar_mul(&j_adv, weights.loss_weight_beta)?;
    let term_g = tape.scalar_mul(&half_sum, weights.loss_weight_gamma)?;
    let partial = tape.add(&term_a, &term_b)?;
    let loss = tape.add(&partial, &term_g)?;

    Ok(LossParts {
        terms: vec![
            ("benign_main".into(), j_benign.item()),
            ("adversarial_main".into(), j_adv.item()),
            ("robust_benign".into(), j_robust_benign.item()),
            ("robust_adversarial_neg".into(), j_robust_adv.item()),
            ("total".into(), loss.item()),
        ],
        loss,
    })
}

/// Trains a defended model under the multi-task objective. In-loop
/// adversarial examples are regenerated from the weights of each step;
/// lock-unit parameters are frozen throughout. Zero epochs returns the
/// model untouched.
#[allow(clippy::too_many_arguments)]
pub fn multitask_train(
    model: &mut Model,
    images: &Tensor,
    labels: &[u8],
    classmap: &Classmap,
    weights: &LossWeights,
    eps_reg: f64,
    epochs: usize,
    cfg: OptimizerCfg,
    seed: u64,
) -> Result<Vec<EpochMetrics>, DefenceError> {
    weights.validate()?;
    if !model.variant().is_defended() {
        return Err(DefenceError::NotDefended(model.variant()));
    }
    let mut opt = Adam::new(model, cfg);
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let metrics = train_epoch(
            model,
            images,
            labels,
            &mut opt,
            seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15),
            |tape, model, traced, batch| {
                build_objective(tape, model, traced, batch, classmap, weights, eps_reg)
                    .map_err(|e| match e {
                        DefenceError::Model(m) => m,
                        other => ModelError::SpecInvalid(other.to_string()),
                    })
            },
        )?;
        history.push(metrics);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, LayerSpec, LockMode, ModelSpec, Variant};
    use crate::tensor::Padding;

    fn small_defended(variant: Variant) -> (Model, Tensor, Vec<u8>) {
        let spec = ModelSpec {
            input_shape: [1, 4, 4],
            class_count: 4,
            variant,
            layers: vec![LayerSpec::Dense { units: 8 }],
            padding: Padding::Valid,
        };
        let model = build_model(&spec, 17).unwrap();
        let mut rng = crate::rng::SplitMix64::new(3);
        let images = Tensor::new(vec![2, 1, 4, 4], (0..32).map(|_| rng.next_f64()).collect()).unwrap();
        (model, images, vec![1, 3])
    }

    fn classmap4() -> Classmap {
        Classmap::new(vec![2, 3, 0, 1], "test", 0.1, "hash", vec![1; 4]).unwrap()
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert!(LossWeights::new(0.4, 0.4, 0.2).is_ok());
        assert!(LossWeights::new(0.5, 0.4, 0.2).is_err());
        assert!(LossWeights::new(-0.1, 0.9, 0.2).is_err());
        let defaults = LossWeights::default();
        assert_eq!(
            (defaults.loss_weight_alpha, defaults.loss_weight_beta, defaults.loss_weight_gamma),
            (0.4, 0.4, 0.2)
        );
    }

    #[test]
    fn alpha_only_reduces_to_plain_cross_entropy() {
        let (model, images, labels) = small_defended(Variant::DefendedNolock);
        let weights = LossWeights::new(1.0, 0.0, 0.0).unwrap();
        let map = classmap4();

        let mut tape = Tape::new();
        let x = tape.leaf(&images, false);
        let traced = model.trace(&mut tape, &x, LockMode::Normal).unwrap();
        let batch = Batch { images: images.clone(), labels: labels.clone(), index: 0 };
        let parts = build_objective(&mut tape, &model, &traced, &batch, &map, &weights, 0.1).unwrap();

        let mut tape2 = Tape::new();
        let x2 = tape2.leaf(&images, false);
        let traced2 = model.trace(&mut tape2, &x2, LockMode::Normal).unwrap();
        let y = tape2.leaf(&one_hot(&labels, 4), false);
        let plain = tape2
            .cross_entropy_with_logits(traced2.heads.main(), &y)
            .unwrap();
        assert!((parts.loss.item() - plain.item()).abs() < 1e-12);
    }

    #[test]
    fn loss_equals_hand_computed_weighted_sum() {
        // recompute the three terms independently from the same forward
        // outputs and compare against the built objective
        let (model, images, labels) = small_defended(Variant::DefendedLocked);
        let weights = LossWeights::default();
        let map = classmap4();

        let mut tape = Tape::new();
        let x = tape.leaf(&images, false);
        let traced = model.trace(&mut tape, &x, LockMode::Normal).unwrap();
        let batch = Batch { images: images.clone(), labels: labels.clone(), index: 0 };
        let parts = build_objective(&mut tape, &model, &traced, &batch, &map, &weights, 0.05).unwrap();

        let by_name: std::collections::HashMap<_, _> = parts.terms.iter().cloned().collect();
        let expected = 0.4 * by_name["benign_main"]
            + 0.4 * by_name["adversarial_main"]
            + 0.2 * 0.5 * (by_name["robust_benign"] + by_name["robust_adversarial_neg"]);
        assert!((parts.loss.item() - expected).abs() < 1e-12);
    }

    #[test]
    fn negative_ce_term_bounded_below() {
        let (model, images, labels) = small_defended(Variant::DefendedNolock);
        let map = classmap4();
        let mut tape = Tape::new();
        let x = tape.leaf(&images, false);
        let traced = model.trace(&mut tape, &x, LockMode::Normal).unwrap();
        let batch = Batch { images, labels, index: 0 };
        let parts =
            build_objective(&mut tape, &model, &traced, &batch, &map, &LossWeights::default(), 0.1)
                .unwrap();
        let by_name: std::collections::HashMap<_, _> = parts.terms.iter().cloned().collect();
        assert!(by_name["robust_adversarial_neg"] >= -NEGATIVE_CE_CLAMP - 1e-12);
    }

    #[test]
    fn objective_differentiable_wrt_inputs_and_weights() {
        // finite differences over the full objective, both through the
        // input pixels and through a trainable weight slice. The in-step
        // adversarial batch enters as a constant, so it is crafted once
        // and held fixed across all probes.
        let (model, images, labels) = small_defended(Variant::DefendedLocked);
        let map = classmap4();
        let weights = LossWeights::default();
        let x_adv = super::in_step_adversarial(&model, &images, &labels, 0.1).unwrap();

        let loss_at = |m: &Model, imgs: &Tensor| -> (f64, u64) {
            let mut tape = Tape::new();
            let x = tape.leaf(imgs, true);
            let traced = m.trace(&mut tape, &x, LockMode::Normal).unwrap();
            let batch = Batch { images: imgs.detached(), labels: labels.clone(), index: 0 };
            let parts =
                build_objective_with_adv(&mut tape, m, &traced, &batch, &x_adv, &map, &weights)
                    .unwrap();
            (parts.loss.item(), tape.activation_fingerprint())
        };

        let analytic = {
            let mut tape = Tape::new();
            let x = tape.leaf(&images, true);
            let traced = model.trace(&mut tape, &x, LockMode::Normal).unwrap();
            let batch = Batch { images: images.clone(), labels: labels.clone(), index: 0 };
            let parts =
                build_objective_with_adv(&mut tape, &model, &traced, &batch, &x_adv, &map, &weights)
                    .unwrap();
            let grads = tape.backward(&parts.loss).unwrap();
            grads.grad(&x).unwrap().detached()
        };
        let report = crate::tensor::check::check_gradient(
            |probe| {
                let (value, fingerprint) = loss_at(&model, probe);
                Ok(crate::tensor::check::LossProbe { value, fingerprint })
            },
            &images,
            &analytic,
            &crate::tensor::check::FdOptions { max_coords: 10, ..Default::default() },
        )
        .unwrap();
        assert!(report.pass, "input-gradient FD failed: {:.3e}", report.max_rel_error);

        // weight-path check through one trainable parameter
        let analytic_w = {
            let mut tape = Tape::new();
            let x = tape.leaf(&images, false);
            let traced = model.trace(&mut tape, &x, LockMode::Normal).unwrap();
            let batch = Batch { images: images.clone(), labels: labels.clone(), index: 0 };
            let parts =
                build_objective_with_adv(&mut tape, &model, &traced, &batch, &x_adv, &map, &weights)
                    .unwrap();
            let grads = tape.backward(&parts.loss).unwrap();
            let idx = model.params().iter().position(|p| p.name == "head_zp.w").unwrap();
            grads.grad(&traced.param_leaves()[idx]).unwrap().detached()
        };
        let base = model.param("head_zp.w").unwrap().tensor.detached();
        let report_w = crate::tensor::check::check_gradient(
            |probe| {
                let mut patched = model.clone();
                patched.set_param("head_zp.w", probe.detached()).unwrap();
                let (value, fingerprint) = loss_at(&patched, &images);
                Ok(crate::tensor::check::LossProbe { value, fingerprint })
            },
            &base,
            &analytic_w,
            &crate::tensor::check::FdOptions { max_coords: 8, ..Default::default() },
        )
        .unwrap();
        assert!(report_w.pass, "weight-gradient FD failed: {:.3e}", report_w.max_rel_error);
    }

    #[test]
    fn missing_robust_label_rejected() {
        let (model, images, _) = small_defended(Variant::DefendedNolock);
        let map = classmap4();
        let mut tape = Tape::new();
        let x = tape.leaf(&images, false);
        let traced = model.trace(&mut tape, &x, LockMode::Normal).unwrap();
        // label 7 outside the 4-class map
        let batch = Batch { images, labels: vec![1, 7], index: 0 };
        let err =
            build_objective(&mut tape, &model, &traced, &batch, &map, &LossWeights::default(), 0.1)
                .unwrap_err();
        assert!(matches!(err, DefenceError::MissingRobustLabel(7)));
    }

    #[test]
    fn zero_epochs_returns_model_unchanged() {
        let (mut model, images, labels) = small_defended(Variant::DefendedLocked);
        let before: Vec<Vec<u64>> = model
            .params()
            .iter()
            .map(|p| p.tensor.values().iter().map(|v| v.to_bits()).collect())
            .collect();
        multitask_train(
            &mut model,
            &images,
            &labels,
            &classmap4(),
            &LossWeights::default(),
            0.1,
            0,
            OptimizerCfg::default(),
            1,
        )
        .unwrap();
        let after: Vec<Vec<u64>> = model
            .params()
            .iter()
            .map(|p| p.tensor.values().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn training_leaves_lock_frozen_and_learns() {
        let (mut model, _, _) = small_defended(Variant::DefendedLocked);
        // small separable problem across 4 classes
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut rng = crate::rng::SplitMix64::new(8);
        for i in 0..80 {
            let class = (i % 4) as u8;
            let mut img = vec![0.05; 16];
            for p in 0..4 {
                img[class as usize * 4 + p] = 0.8 + 0.2 * rng.next_f64();
            }
            images.extend(img);
            labels.push(class);
        }
        let images = Tensor::new(vec![80, 1, 4, 4], images).unwrap();
        let lock_before: Vec<u64> = model
            .param("lock0.w")
            .unwrap()
            .tensor
            .values()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let history = multitask_train(
            &mut model,
            &images,
            &labels,
            &classmap4(),
            &LossWeights::default(),
            0.05,
            4,
            OptimizerCfg { learning_rate: 0.02, batch_size: 8, ..Default::default() },
            5,
        )
        .unwrap();
        assert_eq!(history.len(), 4);
        assert!(history.last().unwrap().accuracy > 0.9, "{:?}", history.last());
        let lock_after: Vec<u64> = model
            .param("lock0.w")
            .unwrap()
            .tensor
            .values()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(lock_before, lock_after);
    }

    #[test]
    fn plain_variant_rejected() {
        let mut model = build_model(&ModelSpec::linear([1, 2, 2], 4), 0).unwrap();
        let images = Tensor::zeros(vec![1, 1, 2, 2]);
        assert!(matches!(
            multitask_train(
                &mut model,
                &images,
                &[0],
                &classmap4(),
                &LossWeights::default(),
                0.1,
                1,
                OptimizerCfg::default(),
                0,
            ),
            Err(DefenceError::NotDefended(_))
        ));
    }
}
