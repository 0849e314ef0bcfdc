use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Smallest distance from any relu/clip input to its kink at `x`.
    pub kink_margin: f64,
}

/// Central-difference gradient of a scalar function of a flat vector.
pub fn finite_difference_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub(crate) fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Compares the tape gradient of `f` at `x` with central differences of
/// step `h`. `f` builds a scalar from the leaf it is given.
///
/// Evaluation failures are folded into the report as an infinite error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |data: &[f64], with_grad: bool| -> Option<(f64, Option<Vec<f64>>, f64)> {
        let mut tape = Tape::new();
        let mut t = Tensor::new(x.shape().to_vec(), data.to_vec()).ok()?;
        t.requires_grad = with_grad;
        let leaf = tape.leaf(t);
        let out = f(&mut tape, leaf).ok()?;
        let v = tape.data(out).first().copied()?;
        if !with_grad {
            return Some((v, None, f64::INFINITY));
        }
        let margin = tape.kink_margin();
        tape.backward(out).ok()?;
        let g = tape.grad(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; data.len()]);
        Some((v, Some(g), margin))
    };

    let Some((_, Some(analytic), kink_margin)) = eval(x.data(), true) else {
        return GradCheckReport {
            max_rel_err: f64::INFINITY,
            worst_index: 0,
            analytic: vec![],
            numeric: vec![],
            kink_margin: 0.0,
        };
    };
    let numeric = finite_difference_gradient(
        |d| eval(d, false).map_or(f64::NAN, |(v, _, _)| v),
        x.data(),
        h,
    );
    let (mut worst_index, mut max_rel_err) = (0, 0.0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = rel_err(*a, *n);
        let e = if e.is_nan() { f64::INFINITY } else { e };
        if e > max_rel_err {
            max_rel_err = e;
            worst_index = i;
        }
    }
    GradCheckReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
        kink_margin,
    }
}
