//! Central-difference verification of tape gradients.
//!
//! The numeric side is independent of the backward pass by construction: it
//! only ever calls the forward path at perturbed points.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// When a tensor has more coordinates than this, the check samples a random
/// subset instead of sweeping every coordinate.
pub const EXHAUSTIVE_LIMIT: usize = 256;
/// Sampled-coordinate bounds for large tensors.
pub const MIN_SAMPLED: usize = 64;
pub const MAX_SAMPLED: usize = 128;

/// Deviations below this never trigger the multi-epsilon consistency probe.
const REFINE_TRIGGER: f64 = 1e-8;
/// A coordinate is ruled a kink crossing when the numeric estimates disagree
/// with each other by at least this fraction of their deviation from the
/// analytic value.
const KINK_CONSISTENCY_FACTOR: f64 = 0.3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    pub coords_checked: usize,
    /// Coordinates skipped because central differences straddled a
    /// nondifferentiable point (ReLU corner, pooling tie): the numeric
    /// estimates at different epsilons contradicted each other there.
    pub kinks_excluded: usize,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_err < threshold
    }
}

/// Compare the tape gradient of `f` at `point` against central differences
/// (f(x+eps*e) - f(x-eps*e)) / 2eps per coordinate. Relative error uses a
/// max(1, |analytic|, |numeric|) denominator. Runs in whatever precision `S`
/// is; audits should instantiate with f64.
pub fn finite_diff_check<S, F>(
    f: F,
    point: &Tensor<S>,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(Error::arg(
            "finite_diff_check",
            format!("epsilon {eps} outside [1e-6, 1e-2]"),
        ));
    }

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let loss = f(&mut tape, x)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::arg(
            "finite_diff_check",
            "function must return a scalar",
        ));
    }
    tape.backward(loss)?;
    let analytic = tape
        .grad(x)
        .ok_or_else(|| Error::Numerical("no gradient reached the input".into()))?;

    let n = point.numel();
    let coords: Vec<usize> = if n <= EXHAUSTIVE_LIMIT {
        (0..n).collect()
    } else {
        let count = (n / 64).clamp(MIN_SAMPLED, MAX_SAMPLED).min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample(&mut rng, n, count).into_iter().collect()
    };

    let eval = |data: Vec<S>| -> Result<f64> {
        let t = Tensor::from_vec(point.shape(), data)?;
        let mut tape = Tape::new();
        let x = tape.leaf(t, false);
        let loss = f(&mut tape, x)?;
        Ok(tape.value(loss).item().to_f64())
    };

    let central = |idx: usize, step: f64| -> Result<f64> {
        let mut plus = point.data().to_vec();
        plus[idx] += S::from_f64(step);
        let mut minus = point.data().to_vec();
        minus[idx] -= S::from_f64(step);
        Ok((eval(plus)? - eval(minus)?) / (2.0 * step))
    };
    let rel_of = |a: f64, n: f64| (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs());

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: None,
        coords_checked: coords.len(),
        kinks_excluded: 0,
    };
    for idx in coords {
        let a = analytic.data()[idx].to_f64();
        let d1 = central(idx, eps)?;
        let rel1 = rel_of(a, d1);
        let rel = if rel1 <= REFINE_TRIGGER {
            rel1
        } else {
            // The estimate deviates. A genuinely wrong gradient produces
            // numeric estimates that agree with each other while differing
            // from the analytic value; a kink inside the difference stencil
            // produces estimates that contradict each other as the stencil
            // shrinks. Only the former counts as a failure.
            let d2 = central(idx, eps / 2.0)?;
            let d3 = central(idx, eps / 10.0)?;
            let rels = [rel1, rel_of(a, d2), rel_of(a, d3)];
            let best = rels.iter().cloned().fold(f64::INFINITY, f64::min);
            let worst_rel = rels.iter().cloned().fold(0.0, f64::max);
            let spread = rel_of(d1, d2).max(rel_of(d2, d3)).max(rel_of(d1, d3));
            if best > REFINE_TRIGGER && spread > KINK_CONSISTENCY_FACTOR * worst_rel {
                report.kinks_excluded += 1;
                continue;
            }
            best
        };
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = Some(idx);
        }
    }
    Ok(report)
}
