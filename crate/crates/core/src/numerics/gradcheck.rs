use crate::error::{Error, Result};
use crate::numerics::{NodeId, Scalar, Tape, Tensor};

/// Outcome of a central-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_error: Scalar,
    /// `(parameter, element)` at which `max_error` occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Largest `|a - n| / (REL_TOL * max(|a|, |n|) + roundoff)` where
    /// `roundoff = ROUNDOFF_ULPS * eps * max(|f(p+h)|, |f(p-h)|) / h` bounds
    /// the cancellation error of the difference quotient. At most 1 means
    /// every element agrees to `REL_TOL` up to what floating-point
    /// evaluation of `f` can resolve at this `h`.
    pub roundoff_ratio: Scalar,
}

/// Gradients below this magnitude are compared by absolute error.
pub const ABS_FLOOR: Scalar = 1e-8;

/// Relative tolerance used by [`GradCheck::roundoff_ratio`].
pub const REL_TOL: Scalar = 1e-6;

/// Units of machine epsilon, relative to the loss, allowed for rounding in
/// each of the two loss evaluations.
pub const ROUNDOFF_ULPS: Scalar = 16.0;

/// Compares the tape gradient of `f` with `(f(p+h) - f(p-h)) / 2h` for every
/// scalar of every parameter. `f` records a scalar loss given leaf ids for
/// `params`, in order.
pub fn finite_diff_check<F>(params: &[Tensor], h: Scalar, mut f: F) -> Result<GradCheck>
where
    F: FnMut(&mut Tape<'_>, &[NodeId]) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step {h} must be positive")));
    }
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let ids = params.iter().map(|p| tape.param(p)).collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &ids)?;
        let mut grads = tape.backward(loss)?;
        ids.iter()
            .zip(params)
            .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    };

    let mut work = params.to_vec();
    let mut eval = |work: &[Tensor]| -> Result<Scalar> {
        let mut tape = Tape::new();
        let ids = work.iter().map(|p| tape.param(p)).collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &ids)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_check" });
        }
        Ok(v)
    };

    let mut report = GradCheck {
        max_error: 0.0,
        worst: None,
        checked: 0,
        roundoff_ratio: 0.0,
    };
    for p in 0..work.len() {
        for e in 0..work[p].len() {
            let orig = work[p].data()[e];
            work[p].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[p].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[p].data_mut()[e] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let exact = analytic[p].data()[e];
            let err = relative_error(exact, numeric);
            report.checked += 1;
            let roundoff = ROUNDOFF_ULPS * Scalar::EPSILON * plus.abs().max(minus.abs()) / h;
            let bound = REL_TOL * exact.abs().max(numeric.abs()) + roundoff;
            let ratio = (exact - numeric).abs() / bound.max(Scalar::MIN_POSITIVE);
            report.roundoff_ratio = report.roundoff_ratio.max(ratio);
            if err > report.max_error || report.worst.is_none() {
                report.max_error = err;
                report.worst = Some((p, e));
            }
        }
    }
    Ok(report)
}

/// `|a - n| / max(|a|, |n|)`, or `|a - n|` when `|a| < ABS_FLOOR`.
pub fn relative_error(analytic: Scalar, numeric: Scalar) -> Scalar {
    let diff = (analytic - numeric).abs();
    if analytic.abs() < ABS_FLOOR {
        diff
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}
