use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinate at which `max_rel_error` occurred.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    let value = tape.value(out);
    value.item().ok_or_else(|| Error::NonScalarLoss(value.shape().to_vec()))
}

/// Checks the gradient of a scalar function `f` at `x`.
///
/// Each coordinate is perturbed by `h * max(1, |x_i|)` in both directions.
/// The error per coordinate is `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic = tape.grad(v).ok_or(Error::NoDifferentiableLeaves)?.to_vec();

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        let step = h * orig.abs().max(1.0);
        probe.data_mut()[i] = orig + step;
        let plus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let d = (plus - minus) / (2.0 * step);
        if !d.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        numeric.push(d);
    }

    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
    }
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::from_vec(vec![1.0, -2.0]);
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.analytic, vec![2.0, -4.0]);
    }

    #[test]
    fn plain_sum_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -0.75, 0.125, 0.5]);
        let r = grad_check(|t, v| t.sum(v), &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn non_finite_intermediate_is_reported() {
        // log near zero: the minus probe goes negative.
        let x = Tensor::from_vec(vec![1e-7]);
        let r = grad_check(
            |t, v| {
                let l = t.log(v)?;
                t.sum(l)
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }
}
