//! Jacobian saliency-map attack, single-pixel increase variant. Each
//! iteration computes the forward derivatives of all logits w.r.t. the
//! input, scores pixels by the increase-variant saliency
//!
//! ```text
//! S[i] = J_t[i] * |sum_{j != t} J_j[i]|   if J_t[i] > 0 and the sum < 0
//!        0                                otherwise
//! ```
//!
//! and raises the best-scoring pixel by `theta` (clamped to 1.0). A pixel
//! may be revisited until saturated; the budget counts distinct touched
//! pixels, capped at `ceil(max_distortion * pixel_count)`.

use std::collections::HashSet;

use super::{logit_jacobian, AttackError, AttackResult};
use crate::nn::{Head, Model};
use crate::tensor::Tensor;

pub fn jsma(
    model: &Model,
    x: &Tensor,
    target_class: u8,
    theta: f64,
    max_distortion: f64,
    max_iterations: usize,
) -> Result<AttackResult, AttackError> {
    if !(0.0 < max_distortion && max_distortion <= 1.0) {
        return Err(AttackError::InvalidConfig(format!(
            "jsma_max_distortion {max_distortion} outside (0, 1]"
        )));
    }
    if theta <= 0.0 {
        return Err(AttackError::InvalidConfig(format!("jsma_theta {theta} must be positive")));
    }
    let pixel_count = x.len();
    let budget = (max_distortion * pixel_count as f64).ceil() as usize;
    let t = target_class as usize;

    let mut current = x.detached();
    let mut touched: HashSet<usize> = HashSet::new();
    let mut iterations = 0usize;

    loop {
        let label = super::fresh_label(model, &current)?;
        if label == target_class {
            return Ok(AttackResult {
                perturbed: current,
                success: true,
                iterations,
                final_loss: 0.0,
                margin: 0.0,
                distortion_l2: 0.0,
                distortion_linf: 0.0,
                degenerate: iterations == 0,
            }
            .with_distortions(x));
        }
        if iterations >= max_iterations {
            break;
        }

        let (_, jac) = logit_jacobian(model, &current, Head::Main)?;
        let mut best: Option<(usize, f64)> = None;
        for i in 0..pixel_count {
            if current.values()[i] >= 1.0 {
                continue; // no headroom in increase mode
            }
            if !touched.contains(&i) && touched.len() >= budget {
                continue; // only revisits allowed once the budget is spent
            }
            let alpha = jac[t][i];
            let beta: f64 = (0..jac.len()).filter(|&j| j != t).map(|j| jac[j][i]).sum();
            if alpha <= 0.0 || beta >= 0.0 {
                continue;
            }
            let score = alpha * beta.abs();
            if best.map_or(true, |(_, s)| score > s) {
                best = Some((i, score));
            }
        }
        let Some((pixel, _)) = best else { break };
        touched.insert(pixel);
        {
            let v = &mut current.values_mut()[pixel];
            *v = (*v + theta).min(1.0);
        }
        iterations += 1;
    }

    // target not reached: saliency exhausted, saturated, or out of budget
    Ok(AttackResult {
        perturbed: current,
        success: false,
        iterations,
        final_loss: touched.len() as f64, // pixels-modified count
        margin: 0.0,
        distortion_l2: 0.0,
        distortion_linf: 0.0,
        degenerate: false,
    }
    .with_distortions(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, ModelSpec};

    fn linear_softmax() -> crate::nn::Model {
        let mut model = build_model(&ModelSpec::linear([1, 2, 2], 3), 1).unwrap();
        model
            .set_param(
                "head_z.w",
                Tensor::new(vec![4, 3], vec![
                    0.2, -0.9, 0.6,
                    -0.1, 0.4, -0.8,
                    0.9, -0.2, -0.3,
                    -0.5, -0.4, 0.7,
                ])
                .unwrap(),
            )
            .unwrap();
        model
    }

    #[test]
    fn saturated_image_fails_immediately() {
        let model = linear_softmax();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let pred = model.predict(&x).unwrap()[0];
        let target = (pred + 1) % 3;
        let r = jsma(&model, &x, target, 1.0, 0.5, 100).unwrap();
        assert!(!r.success);
        assert_eq!(r.iterations, 0);
        assert_eq!(r.distortion_linf, 0.0);
    }

    #[test]
    fn first_pixel_matches_brute_force_saliency() {
        let model = linear_softmax();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.3, 0.3, 0.3, 0.3]).unwrap();
        let target = 2u8;

        // brute-force oracle straight from the weight matrix: J[class][pixel]
        // equals w[pixel][class] for a linear model
        let w = model.param("head_z.w").unwrap().tensor.values().to_vec();
        let jac = |class: usize, pixel: usize| w[pixel * 3 + class];
        let mut expected: Option<(usize, f64)> = None;
        for pixel in 0..4 {
            let alpha = jac(2, pixel);
            let beta: f64 = (0..3).filter(|&j| j != 2).map(|j| jac(j, pixel)).sum();
            if alpha > 0.0 && beta < 0.0 {
                let score = alpha * beta.abs();
                if expected.map_or(true, |(_, s)| score > s) {
                    expected = Some((pixel, score));
                }
            }
        }
        let expected_pixel = expected.expect("some pixel qualifies").0;

        let r = jsma(&model, &x, target, 0.25, 1.0, 1).unwrap();
        let changed: Vec<usize> = (0..4)
            .filter(|&i| r.perturbed.values()[i] != x.values()[i])
            .collect();
        assert_eq!(changed, vec![expected_pixel]);
    }

    #[test]
    fn budget_bounds_distinct_pixels() {
        let model = linear_softmax();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.1; 4]).unwrap();
        let r = jsma(&model, &x, 2, 0.05, 0.25, 400).unwrap();
        // ceil(0.25 * 4) = 1 pixel may be touched
        let changed = (0..4).filter(|&i| r.perturbed.values()[i] != x.values()[i]).count();
        assert!(changed <= 1, "{changed} pixels changed");
    }
}
