//! Central finite-difference verification of tape gradients.

use super::{Tape, Var};
use crate::linalg::Mat;

/// Outcome of [`check_gradient`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(1, |numeric|)` over every leaf entry.
    pub max_rel_error: f64,
    /// `(leaf, flat entry)` where the maximum occurred.
    pub location: Option<(usize, usize)>,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares the reverse-mode gradient of `f` against central differences
/// with step `h`. Evaluation failures and non-finite values report an
/// infinite error at the offending entry.
pub fn check_gradient<F, E>(f: F, leaves: &[Mat], h: f64) -> GradCheck
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
{
    assert!(h > 0.0, "contract violation: step must be positive");
    let infinite = |location| GradCheck {
        max_rel_error: f64::INFINITY,
        location,
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = leaves.iter().map(|m| tape.leaf(m.clone())).collect();
    let Ok(loss) = f(&tape, &vars) else {
        return infinite(None);
    };
    if !loss.value().is_finite() {
        return infinite(None);
    }
    let Ok(grads) = tape.backward(loss) else {
        return infinite(None);
    };
    let analytic: Vec<Mat> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |perturbed: &[Mat]| -> Option<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|m| tape.leaf(m.clone())).collect();
        let out = f(&tape, &vars).ok()?.item();
        out.is_finite().then_some(out)
    };

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        location: None,
    };
    let mut work: Vec<Mat> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for e in 0..leaf.len() {
            let base = leaf.as_slice()[e];
            work[li].as_mut_slice()[e] = base + h;
            let plus = eval(&work);
            work[li].as_mut_slice()[e] = base - h;
            let minus = eval(&work);
            work[li].as_mut_slice()[e] = base;
            let (Some(p), Some(m)) = (plus, minus) else {
                return infinite(Some((li, e)));
            };
            let numeric = (p - m) / (2.0 * h);
            let a = analytic[li].as_slice()[e];
            if !a.is_finite() {
                return infinite(Some((li, e)));
            }
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if err > worst.max_rel_error {
                worst = GradCheck {
                    max_rel_error: err,
                    location: Some((li, e)),
                };
            }
        }
    }
    worst
}
