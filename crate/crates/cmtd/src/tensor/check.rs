//! Gradient verification against central finite differences.
//!
//! The checker is the independent oracle for every gradient rule on the
//! tape: it re-evaluates the loss at `x ± step·e_i` on sampled coordinates
//! and compares the quotient to the analytic gradient. A coordinate whose
//! two probes land on different smooth pieces of the network (the
//! activation fingerprint differs, i.e. a relu/maxpool/clip kink sits
//! between them) is excluded rather than failed.

use super::{Tensor, TensorError};
use crate::rng::SplitMix64;

#[derive(Debug, Clone)]
pub struct FdOptions {
    pub step: f64,
    pub tolerance: f64,
    /// number of coordinates sampled (all coordinates when the tensor is
    /// smaller)
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords: 24,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordVerdict {
    Pass,
    Fail,
    /// probe landed near a gradient discontinuity; not counted as a failure
    Excluded,
}

#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub verdict: CoordVerdict,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub coords: Vec<CoordCheck>,
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
    pub pass: bool,
}

/// One probe evaluation: the scalar loss and the tape's activation
/// fingerprint at that point.
pub struct LossProbe {
    pub value: f64,
    pub fingerprint: u64,
}

/// Compares `analytic` (gradient of the loss w.r.t. `x`) against central
/// finite differences of `loss_fn`.
pub fn check_gradient<F>(
    loss_fn: F,
    x: &Tensor,
    analytic: &Tensor,
    opts: &FdOptions,
) -> Result<FdReport, TensorError>
where
    F: Fn(&Tensor) -> Result<LossProbe, TensorError>,
{
    assert_eq!(x.shape(), analytic.shape(), "gradient shape mismatch");
    if opts.step <= 0.0 {
        return Err(TensorError::BadParameter {
            op: "finite_difference_check".into(),
            reason: "step must be positive".into(),
        });
    }

    let mut indices: Vec<usize> = (0..x.len()).collect();
    if x.len() > opts.max_coords {
        let mut rng = SplitMix64::derive(opts.seed, 0xfd);
        rng.shuffle(&mut indices);
        indices.truncate(opts.max_coords);
    }

    let mut coords = Vec::with_capacity(indices.len());
    let mut max_rel = 0.0f64;
    let mut excluded = 0usize;
    let mut checked = 0usize;
    let mut all_pass = true;

    for &i in &indices {
        let mut plus = x.detached();
        plus.values_mut()[i] += opts.step;
        let mut minus = x.detached();
        minus.values_mut()[i] -= opts.step;

        let p = loss_fn(&plus)?;
        let m = loss_fn(&minus)?;

        if p.fingerprint != m.fingerprint {
            excluded += 1;
            coords.push(CoordCheck {
                index: i,
                analytic: analytic.values()[i],
                numeric: f64::NAN,
                rel_error: f64::NAN,
                verdict: CoordVerdict::Excluded,
            });
            continue;
        }

        let numeric = (p.value - m.value) / (2.0 * opts.step);
        let a = analytic.values()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        let rel = (a - numeric).abs() / denom;
        let verdict = if rel < opts.tolerance {
            CoordVerdict::Pass
        } else {
            all_pass = false;
            CoordVerdict::Fail
        };
        checked += 1;
        max_rel = max_rel.max(rel);
        coords.push(CoordCheck {
            index: i,
            analytic: a,
            numeric,
            rel_error: rel,
            verdict,
        });
    }

    Ok(FdReport {
        coords,
        max_rel_error: max_rel,
        checked,
        excluded,
        pass: all_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn quadratic_loss_is_exact() {
        // loss = sum(x*x); gradient 2x, central differences exact for quadratics
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.5]);
        let loss = |t: &Tensor| {
            let mut tape = Tape::new();
            let leaf = tape.leaf(t, true);
            let sq = tape.mul(&leaf, &leaf)?;
            let s = tape.sum(&sq)?;
            Ok(LossProbe {
                value: s.item(),
                fingerprint: tape.activation_fingerprint(),
            })
        };
        let analytic = Tensor::from_vec(x.values().iter().map(|&v| 2.0 * v).collect());
        let report = check_gradient(loss, &x, &analytic, &FdOptions::default()).unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
    }

    #[test]
    fn relu_kink_is_excluded_not_failed() {
        let x = Tensor::from_vec(vec![0.0, 1.0]);
        let loss = |t: &Tensor| {
            let mut tape = Tape::new();
            let leaf = tape.leaf(t, true);
            let r = tape.relu(&leaf)?;
            let s = tape.sum(&r)?;
            Ok(LossProbe {
                value: s.item(),
                fingerprint: tape.activation_fingerprint(),
            })
        };
        let analytic = Tensor::from_vec(vec![0.0, 1.0]);
        let report = check_gradient(loss, &x, &analytic, &FdOptions::default()).unwrap();
        assert!(report.pass);
        assert_eq!(report.excluded, 1);
        assert_eq!(
            report.coords.iter().filter(|c| c.verdict == CoordVerdict::Excluded).count(),
            1
        );
    }

    #[test]
    fn wrong_gradient_fails() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let loss = |t: &Tensor| {
            let mut tape = Tape::new();
            let leaf = tape.leaf(t, true);
            let s = tape.sum(&leaf)?;
            Ok(LossProbe {
                value: s.item(),
                fingerprint: tape.activation_fingerprint(),
            })
        };
        let wrong = Tensor::from_vec(vec![3.0, 3.0]);
        let report = check_gradient(loss, &x, &wrong, &FdOptions::default()).unwrap();
        assert!(!report.pass);
    }
}
