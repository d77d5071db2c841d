//! Fast gradient sign method: one step of size epsilon along the sign of
//! the input gradient of the true-label cross-entropy, clipped to the
//! pixel box.

use super::{clip01, AttackConfig, AttackError, AttackResult};
use crate::data::Dataset;
use crate::nn::{grad_wrt_input, Head, LossSpec, Model};
use crate::tensor::Tensor;

/// Single-example attack. A gradient that is zero everywhere returns the
/// input unchanged with `success = false`.
pub fn fgsm(model: &Model, x: &Tensor, y_true: u8, epsilon: f64) -> Result<AttackResult, AttackError> {
    let mut config = AttackConfig::default_for(super::AttackKind::Fgsm);
    config.epsilon = epsilon;
    let dataset = single_dataset(model, x, y_true)?;
    Ok(fgsm_batch(model, &dataset, &config)?.remove(0))
}

fn single_dataset(model: &Model, x: &Tensor, y: u8) -> Result<Dataset, AttackError> {
    Ok(crate::data::Dataset::new(
        x.detached(),
        vec![y],
        model.class_count(),
        "single",
        crate::data::Provenance::default(),
    )
    .map_err(|e| AttackError::InvalidConfig(e.to_string()))?)
}

pub(crate) fn fgsm_batch(
    model: &Model,
    dataset: &Dataset,
    config: &AttackConfig,
) -> Result<Vec<AttackResult>, AttackError> {
    let grad = grad_wrt_input(
        model,
        &dataset.images,
        &LossSpec::CrossEntropy {
            head: Head::Main,
            labels: &dataset.labels,
        },
    )?;

    let n = dataset.len();
    let per = dataset.images.len() / n;
    let mut results = Vec::with_capacity(n);
    for i in 0..n {
        let x = dataset.images.slice_batch(i);
        let g = &grad.values()[i * per..(i + 1) * per];
        if g.iter().all(|&v| v == 0.0) {
            results.push(AttackResult::unchanged(&x));
            continue;
        }
        let mut adv = x.detached();
        for (v, &gv) in adv.values_mut().iter_mut().zip(g) {
            *v += config.epsilon * sign(gv);
        }
        clip01(adv.values_mut());

        let label = super::fresh_label(model, &adv)?;
        let success = label != dataset.labels[i];
        results.push(
            AttackResult {
                perturbed: adv,
                success,
                iterations: 1,
                final_loss: 0.0,
                margin: 0.0,
                distortion_l2: 0.0,
                distortion_linf: 0.0,
                degenerate: false,
            }
            .with_distortions(&x),
        );
    }
    Ok(results)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
