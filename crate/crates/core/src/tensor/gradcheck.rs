use super::{Tape, Tensor};
use crate::element::Element;
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x+h) - f(x-h)) / 2h`, returning the max over elements of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    if !(h > 0.0) {
        return Err(Error::input(format!("step h must be positive, got {h}")));
    }
    let tape = Tape::new();
    let xt = tape.track(&x.detach());
    let y = f(&xt)?;
    if y.numel() != 1 {
        return Err(Error::shape(format!(
            "finite_diff_check needs a scalar function, got output {:?}",
            y.shape()
        )));
    }
    // A function that ignores its input produces an untracked output.
    let analytic = if y.is_tracked() {
        y.reshape(&[1])?.backward()?;
        xt.grad().unwrap_or_else(|| vec![T::zero(); x.numel()])
    } else {
        vec![T::zero(); x.numel()]
    };

    let base = x.to_vec();
    let eval = |data: Vec<T>| -> Result<f64> {
        let probe = Tensor::from_vec(x.dims(), data)?;
        Ok(f(&probe)?.item()?.f64())
    };
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] = T::of(base[i].f64() + h);
        let mut minus = base.clone();
        minus[i] = T::of(base[i].f64() - h);
        // Use the actually representable step at low precision.
        let step = plus[i].f64() - minus[i].f64();
        let numeric = (eval(plus)? - eval(minus)?) / step;
        let a = analytic[i].f64();
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
