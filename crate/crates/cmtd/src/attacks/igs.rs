//! Iterative gradient sign attack. Each round takes a signed step of size
//! `igs_step_size` clipped per-step to epsilon, then clips the cumulative
//! perturbation to the epsilon ball and the pixel box, stopping early on
//! misclassification.
//!
//! The literal update subtracts the clipped signed step, which descends
//! the true-label loss; `igs_ascent = true` flips the direction so the
//! iterate climbs the loss like a conventional nontargeted attack. The
//! default follows the literal form.

use super::{clip01, clip_ball, AttackConfig, AttackError, AttackKind, AttackResult};
use crate::data::Dataset;
use crate::nn::{grad_wrt_input, Head, LossSpec, Model};
use crate::tensor::Tensor;

pub fn igs(
    model: &Model,
    x: &Tensor,
    y_true: u8,
    epsilon: f64,
    igs_step_size: f64,
    max_iterations: usize,
    ascent: bool,
) -> Result<AttackResult, AttackError> {
    let mut config = AttackConfig::default_for(AttackKind::Igs);
    config.epsilon = epsilon;
    config.igs_step_size = igs_step_size;
    config.max_iterations = max_iterations;
    config.igs_ascent = ascent;
    let dataset = crate::data::Dataset::new(
        x.detached(),
        vec![y_true],
        model.class_count(),
        "single",
        crate::data::Provenance::default(),
    )
    .map_err(|e| AttackError::InvalidConfig(e.to_string()))?;
    Ok(igs_batch(model, &dataset, &config)?.remove(0))
}

pub(crate) fn igs_batch(
    model: &Model,
    dataset: &Dataset,
    config: &AttackConfig,
) -> Result<Vec<AttackResult>, AttackError> {
    let n = dataset.len();
    let per = dataset.images.len() / n;
    let step = config.igs_step_size.min(config.epsilon); // clip_eps of the signed step
    let direction = if config.igs_ascent { 1.0 } else { -1.0 };

    let mut current = dataset.images.detached();
    let mut done = vec![false; n];
    let mut iterations = vec![0usize; n];

    for iter in 0..config.max_iterations {
        if done.iter().all(|&d| d) {
            break;
        }
        let grad = grad_wrt_input(
            model,
            &current,
            &LossSpec::CrossEntropy {
                head: Head::Main,
                labels: &dataset.labels,
            },
        )?;
        let preds = {
            // forward once per round to apply the early-stop rule
            model.predict(&current)?
        };
        let gv = grad.values();
        let originals = dataset.images.values();
        let cv = current.values_mut();
        for i in 0..n {
            if done[i] {
                continue;
            }
            if preds[i] != dataset.labels[i] {
                done[i] = true;
                continue;
            }
            iterations[i] = iter + 1;
            let row = &mut cv[i * per..(i + 1) * per];
            for (j, v) in row.iter_mut().enumerate() {
                *v += direction * step * sign(gv[i * per + j]);
            }
            clip_ball(row, &originals[i * per..(i + 1) * per], config.epsilon);
            clip01(row);
        }
    }

    let final_preds = model.predict(&current)?;
    let mut results = Vec::with_capacity(n);
    for i in 0..n {
        let x = dataset.images.slice_batch(i);
        let adv = current.slice_batch(i);
        let success = final_preds[i] != dataset.labels[i];
        results.push(
            AttackResult {
                perturbed: adv,
                success,
                iterations: iterations[i],
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
