use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `x . W + b` for `x: [N, D]`, `W: [D, K]`, `b: [K]`.
pub fn dense<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (xd, wd) = (x.dims(), weight.dims());
    if xd.len() != 2 || wd.len() != 2 || xd[1] != wd[0] || bias.dims() != [wd[1]] {
        return Err(Error::shape(format!(
            "dense: x {xd:?}, weight {wd:?}, bias {:?}",
            bias.dims()
        )));
    }
    let y = x.matmul(weight)?;
    let b = bias.reshape(&[1, wd[1]])?.broadcast_to(&[xd[0], wd[1]])?;
    y.add(&b)
}
