//! Multi-class L∞ closest-boundary attack. Per iteration the class with
//! the smallest linearized boundary distance |f_k| / ||w_k||_1 is chosen
//! (f_k the logit difference to the current class, w_k its input
//! gradient), the iterate steps that distance along sign(w_k) scaled by
//! the overshoot factor, and the loop stops at the first label flip.

use super::{clip01, logit_jacobian, AttackError, AttackResult};
use crate::nn::{Head, Model};
use crate::tensor::Tensor;

pub fn deepfool_linf(
    model: &Model,
    x: &Tensor,
    y_true: u8,
    max_iterations: usize,
    overshoot: f64,
) -> Result<AttackResult, AttackError> {
    let original_label = super::fresh_label(model, x)?;
    if original_label != y_true {
        // already misclassified: nothing to do
        return Ok(AttackResult {
            perturbed: x.detached(),
            success: true,
            iterations: 0,
            final_loss: 0.0,
            margin: 0.0,
            distortion_l2: 0.0,
            distortion_linf: 0.0,
            degenerate: true,
        });
    }

    let k = model.class_count();
    let per = x.len();
    let mut current = x.detached();
    let mut iterations = 0usize;

    while iterations < max_iterations {
        let label = super::fresh_label(model, &current)?;
        if label != original_label {
            break;
        }
        let (z, jac) = logit_jacobian(model, &current, Head::Main)?;
        let l = original_label as usize;

        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for class in (0..k).filter(|&c| c != l) {
            let f_k = z[class] - z[l];
            let w_k: Vec<f64> = (0..per).map(|i| jac[class][i] - jac[l][i]).collect();
            let norm1: f64 = w_k.iter().map(|v| v.abs()).sum();
            if norm1 <= 1e-12 {
                continue;
            }
            let distance = f_k.abs() / norm1;
            if best.as_ref().map_or(true, |(_, d, _)| distance < *d) {
                best = Some((class, distance, w_k));
            }
        }
        let Some((_, distance, w_k)) = best else { break };

        let step = distance + 1e-6; // nudge past the linearized boundary
        {
            let values = current.values_mut();
            for (v, &w) in values.iter_mut().zip(&w_k) {
                *v += overshoot * step * sign(w);
            }
            clip01(values);
        }
        iterations += 1;
    }

    let final_label = super::fresh_label(model, &current)?;
    let success = final_label != original_label;
    Ok(AttackResult {
        perturbed: current,
        success,
        iterations,
        final_loss: 0.0,
        margin: 0.0,
        distortion_l2: 0.0,
        distortion_linf: 0.0,
        degenerate: false,
    }
    .with_distortions(x))
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, ModelSpec};

    fn two_class_linear() -> Model {
        // z0 - z1 = (w0 - w1) . x + (b0 - b1); boundary is a hyperplane
        let mut model = build_model(&ModelSpec::linear([1, 1, 2], 2), 2).unwrap();
        model
            .set_param("head_z.w", Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.5, 0.5]).unwrap())
            .unwrap();
        model
            .set_param("head_z.b", Tensor::new(vec![2], vec![0.0, 0.1]).unwrap())
            .unwrap();
        model
    }

    #[test]
    fn already_misclassified_is_degenerate() {
        let model = two_class_linear();
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.9, 0.2]).unwrap();
        let pred = model.predict(&x).unwrap()[0];
        let wrong_label = 1 - pred;
        let r = deepfool_linf(&model, &x, wrong_label, 50, 1.02).unwrap();
        assert!(r.success && r.degenerate);
        assert_eq!(r.distortion_l2, 0.0);
    }

    #[test]
    fn linear_boundary_crossed_in_one_iteration() {
        let model = two_class_linear();
        let x = Tensor::new(vec![1, 1, 1, 2], vec![0.9, 0.1]).unwrap();
        assert_eq!(model.predict(&x).unwrap()[0], 0);

        // analytic oracle: with weights w[pixel][class] the boundary
        // function is f(x) = z1 - z0 = (w[:,1] - w[:,0]) . x + (b1 - b0);
        // the L∞ distance to the hyperplane is |f| / ||w[:,1] - w[:,0]||_1
        let w = model.param("head_z.w").unwrap().tensor.values().to_vec();
        let b = model.param("head_z.b").unwrap().tensor.values().to_vec();
        let wd = [w[1] - w[0], w[3] - w[2]];
        let f = wd[0] * 0.9 + wd[1] * 0.1 + (b[1] - b[0]);
        let expected = f.abs() / (wd[0].abs() + wd[1].abs());

        let r = deepfool_linf(&model, &x, 0, 50, 1.02).unwrap();
        assert!(r.success);
        assert_eq!(r.iterations, 1, "one step should cross a linear boundary");
        assert_eq!(model.predict(&r.perturbed).unwrap()[0], 1);
        // overshoot-scaled per-iteration bound
        assert!(r.distortion_linf > 0.0);
        assert!(r.distortion_linf <= 1.02 * (expected + 1e-6) + 1e-12);
    }

    #[test]
    fn distortion_positive_and_bounded_by_iteration_sum() {
        let model = two_class_linear();
        let mut rng = crate::rng::SplitMix64::new(77);
        for _ in 0..20 {
            let x = Tensor::new(vec![1, 1, 1, 2], (0..2).map(|_| rng.next_f64()).collect()).unwrap();
            let label = model.predict(&x).unwrap()[0];
            let r = deepfool_linf(&model, &x, label, 50, 1.02).unwrap();
            if r.success && !r.degenerate {
                assert!(r.distortion_l2 > 0.0);
            }
        }
    }
}
