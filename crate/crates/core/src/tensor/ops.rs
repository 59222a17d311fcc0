use std::sync::Arc;

use super::{Shape, Tensor};
use crate::element::Element;
use crate::error::{Error, Result};

/// Same-shape elementwise kinds. Binary kinds take a second operand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    Negate,
    Relu,
    SqrtEps(f64),
    Exp,
    Ln,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

fn check_same(a: &Shape, b: &Shape, op: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

/// For each flat input index, the flat output index after gathering along a
/// permutation of axes.
fn permute_map(dims: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = dims.len();
    let in_strides = Shape(dims.to_vec()).strides();
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let n: usize = dims.iter().product();
    // out[o] = in[map[o]]
    let mut map = Vec::with_capacity(n);
    let mut coord = vec![0usize; rank];
    for _ in 0..n {
        let src: usize = (0..rank).map(|i| coord[i] * in_strides[perm[i]]).sum();
        map.push(src);
        for ax in (0..rank).rev() {
            coord[ax] += 1;
            if coord[ax] < out_dims[ax] {
                break;
            }
            coord[ax] = 0;
        }
    }
    map
}

/// Output dims (reduced axes removed, `[1]` if none remain) and, for every
/// flat input index, the flat output index it reduces into.
fn reduce_map(dims: &[usize], axes: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let rank = dims.len();
    let mut kept: Vec<usize> = (0..rank).filter(|&i| !axes[i]).map(|i| dims[i]).collect();
    let kept_strides = Shape(kept.clone()).strides();
    let mut out_stride = vec![0usize; rank];
    let mut k = 0;
    for i in 0..rank {
        if !axes[i] {
            out_stride[i] = kept_strides[k];
            k += 1;
        }
    }
    if kept.is_empty() {
        kept.push(1);
    }
    let n: usize = dims.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut coord = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..n {
        map.push(idx);
        for ax in (0..rank).rev() {
            coord[ax] += 1;
            idx += out_stride[ax];
            if coord[ax] < dims[ax] {
                break;
            }
            idx -= out_stride[ax] * coord[ax];
            coord[ax] = 0;
        }
    }
    (kept, map)
}

impl<T: Element> Tensor<T> {
    fn unary<F, D>(&self, op: &'static str, f: F, df: D) -> Result<Tensor<T>>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let out: Vec<T> = self.data.iter().map(|&x| f(x)).collect();
        let x = self.data_arc();
        let y = Arc::new(out.clone());
        Tensor::from_op(op, &[self], self.shape.clone(), out, move |g, _| {
            let gx = g
                .iter()
                .zip(x.iter().zip(y.iter()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        check_same(&self.shape, &other.shape, "add")?;
        let out = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| a + b).collect();
        Tensor::from_op("add", &[self, other], self.shape.clone(), out, |g, needs| {
            vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
        })
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        check_same(&self.shape, &other.shape, "sub")?;
        let out = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| a - b).collect();
        Tensor::from_op("sub", &[self, other], self.shape.clone(), out, |g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.iter().map(|&v| -v).collect()),
            ]
        })
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        check_same(&self.shape, &other.shape, "mul")?;
        let out = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| a * b).collect();
        let (a, b) = (self.data_arc(), other.data_arc());
        Tensor::from_op("mul", &[self, other], self.shape.clone(), out, move |g, needs| {
            vec![
                needs[0].then(|| g.iter().zip(b.iter()).map(|(&g, &b)| g * b).collect()),
                needs[1].then(|| g.iter().zip(a.iter()).map(|(&g, &a)| g * a).collect()),
            ]
        })
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        check_same(&self.shape, &other.shape, "div")?;
        let out = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| a / b).collect();
        let (a, b) = (self.data_arc(), other.data_arc());
        Tensor::from_op("div", &[self, other], self.shape.clone(), out, move |g, needs| {
            vec![
                needs[0].then(|| g.iter().zip(b.iter()).map(|(&g, &b)| g / b).collect()),
                needs[1].then(|| {
                    g.iter()
                        .zip(a.iter().zip(b.iter()))
                        .map(|(&g, (&a, &b))| -g * a / (b * b))
                        .collect()
                }),
            ]
        })
    }

    pub fn scale(&self, c: f64) -> Result<Tensor<T>> {
        let c = T::of(c);
        self.unary("scale", |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor<T>> {
        let c = T::of(c);
        self.unary("add_scalar", |x| x + c, |_, _| T::one())
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.unary("negate", |x| -x, |_, _| -T::one())
    }

    /// Gradient is passed only where the input is strictly positive.
    pub fn relu(&self) -> Result<Tensor<T>> {
        self.unary(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// `sqrt(x + eps)`, finite-gradient at zero for any `eps > 0`.
    pub fn sqrt_eps(&self, eps: f64) -> Result<Tensor<T>> {
        let e = T::of(eps);
        let two = T::of(2.0);
        self.unary("sqrt_eps", |x| (x + e).sqrt(), move |_, y| T::one() / (two * y))
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Result<Tensor<T>> {
        self.unary("ln", |x| x.ln(), |x, _| T::one() / x)
    }

    /// `ln(1 + e^x)` in the overflow-free form.
    pub fn softplus(&self) -> Result<Tensor<T>> {
        self.unary(
            "softplus",
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            |x, _| T::one() / (T::one() + (-x).exp()),
        )
    }

    pub fn elementwise(&self, op: ElementwiseOp, other: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let rhs = || {
            other.ok_or_else(|| Error::input(format!("{op:?} needs a second operand")))
        };
        match op {
            ElementwiseOp::Add => self.add(rhs()?),
            ElementwiseOp::Sub => self.sub(rhs()?),
            ElementwiseOp::Mul => self.mul(rhs()?),
            ElementwiseOp::Div => self.div(rhs()?),
            ElementwiseOp::Scale(c) => self.scale(c),
            ElementwiseOp::AddScalar(c) => self.add_scalar(c),
            ElementwiseOp::Negate => self.neg(),
            ElementwiseOp::Relu => self.relu(),
            ElementwiseOp::SqrtEps(e) => self.sqrt_eps(e),
            ElementwiseOp::Exp => self.exp(),
            ElementwiseOp::Ln => self.ln(),
            ElementwiseOp::Softplus => self.softplus(),
        }
    }

    /// Reduces over `axes` (all axes when `None`). Reduced axes are removed;
    /// a full reduction yields shape `[1]`.
    pub fn reduce(&self, op: ReduceOp, axes: Option<&[usize]>) -> Result<Tensor<T>> {
        let rank = self.shape.rank();
        let mut mask = vec![axes.is_none(); rank];
        if let Some(axes) = axes {
            for &a in axes {
                if a >= rank {
                    return Err(Error::InvalidAxis { axis: a, rank });
                }
                if mask[a] {
                    return Err(Error::input(format!("axis {a} listed twice")));
                }
                mask[a] = true;
            }
        }
        let (out_dims, map) = reduce_map(self.dims(), &mask);
        let out_n: usize = out_dims.iter().product();
        let group = self.numel() / out_n;
        let shape = Shape(out_dims);
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                let mut out = vec![T::zero(); out_n];
                for (&v, &o) in self.data.iter().zip(&map) {
                    out[o] += v;
                }
                let factor = if op == ReduceOp::Mean {
                    T::one() / T::of(group as f64)
                } else {
                    T::one()
                };
                if op == ReduceOp::Mean {
                    out.iter_mut().for_each(|v| *v *= factor);
                }
                let name = if op == ReduceOp::Mean { "mean" } else { "sum" };
                Tensor::from_op(name, &[self], shape, out, move |g, _| {
                    vec![Some(map.iter().map(|&o| g[o] * factor).collect())]
                })
            }
            ReduceOp::Max => {
                let mut best: Vec<Option<usize>> = vec![None; out_n];
                for (i, (&v, &o)) in self.data.iter().zip(&map).enumerate() {
                    match best[o] {
                        Some(j) if self.data[j] >= v => {}
                        _ => best[o] = Some(i),
                    }
                }
                let arg: Vec<usize> = best.into_iter().map(|b| b.unwrap_or(0)).collect();
                let out = arg.iter().map(|&i| self.data[i]).collect();
                let n = self.numel();
                Tensor::from_op("max", &[self], shape, out, move |g, _| {
                    let mut gx = vec![T::zero(); n];
                    for (&i, &g) in arg.iter().zip(g) {
                        gx[i] += g;
                    }
                    vec![Some(gx)]
                })
            }
        }
    }

    pub fn sum(&self) -> Result<Tensor<T>> {
        self.reduce(ReduceOp::Sum, None)
    }

    pub fn mean(&self) -> Result<Tensor<T>> {
        self.reduce(ReduceOp::Mean, None)
    }

    /// `sqrt(sum(x^2) + eps)`.
    pub fn frobenius(&self, eps: f64) -> Result<Tensor<T>> {
        self.mul(self)?.sum()?.sqrt_eps(eps)
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor<T>> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) into {:?}",
                self.shape,
                self.numel(),
                dims
            )));
        }
        Tensor::from_op("reshape", &[self], shape, self.to_vec(), |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn transpose(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.shape.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::input(format!("{perm:?} is not a permutation of {rank} axes")));
        }
        let map = permute_map(self.dims(), perm);
        let out = map.iter().map(|&i| self.data[i]).collect();
        let dims: Vec<usize> = perm.iter().map(|&p| self.dims()[p]).collect();
        let n = self.numel();
        Tensor::from_op("transpose", &[self], Shape(dims), out, move |g, _| {
            let mut gx = vec![T::zero(); n];
            for (&i, &g) in map.iter().zip(g) {
                gx[i] = g;
            }
            vec![Some(gx)]
        })
    }

    /// Reverses element order along `axis`.
    pub fn reverse(&self, axis: usize) -> Result<Tensor<T>> {
        let rank = self.shape.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let dims = self.dims();
        let outer: usize = dims[..axis].iter().product();
        let len = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let flip = move |src: &[T]| {
            let mut dst = Vec::with_capacity(src.len());
            for o in 0..outer {
                for k in (0..len).rev() {
                    let start = (o * len + k) * inner;
                    dst.extend_from_slice(&src[start..start + inner]);
                }
            }
            dst
        };
        let out = flip(&self.data);
        Tensor::from_op("reverse", &[self], self.shape.clone(), out, move |g, _| {
            vec![Some(flip(g))]
        })
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (a, b) = (self.dims(), other.dims());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::shape(format!("matmul of {a:?} and {b:?}")));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let out = matmul_raw(&self.data, &other.data, m, k, n);
        let (ad, bd) = (self.data_arc(), other.data_arc());
        Tensor::from_op("matmul", &[self, other], Shape(vec![m, n]), out, move |g, needs| {
            // grad_a = g . b^T, grad_b = a^T . g
            let ga = needs[0].then(|| {
                let mut ga = vec![T::zero(); m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc += g[i * n + j] * bd[p * n + j];
                        }
                        ga[i * k + p] = acc;
                    }
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = ad[i * k + p];
                        for j in 0..n {
                            gb[p * n + j] += av * g[i * n + j];
                        }
                    }
                }
                gb
            });
            vec![ga, gb]
        })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::input("concat of zero tensors"))?;
        let rank = first.shape.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        for p in parts {
            let ok = p.shape.rank() == rank
                && (0..rank).all(|i| i == axis || p.dims()[i] == first.dims()[i]);
            if !ok {
                return Err(Error::shape(format!(
                    "concat on axis {axis}: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
        }
        let outer: usize = first.dims()[..axis].iter().product();
        let inner: usize = first.dims()[axis + 1..].iter().product();
        let chunks: Vec<usize> = parts.iter().map(|p| p.dims()[axis] * inner).collect();
        let mut dims = first.dims().to_vec();
        dims[axis] = parts.iter().map(|p| p.dims()[axis]).sum();
        let total: usize = chunks.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &c) in parts.iter().zip(&chunks) {
                out.extend_from_slice(&p.data[o * c..(o + 1) * c]);
            }
        }
        Tensor::from_op("concat", parts, Shape(dims), out, move |g, needs| {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(chunks.len());
            for (pi, &c) in chunks.iter().enumerate() {
                if needs[pi] {
                    let mut gp = Vec::with_capacity(outer * c);
                    for o in 0..outer {
                        let s = o * total + offset;
                        gp.extend_from_slice(&g[s..s + c]);
                    }
                    grads.push(Some(gp));
                } else {
                    grads.push(None);
                }
                offset += c;
            }
            grads
        })
    }

    /// Repeats size-1 axes to reach `dims` (same rank).
    pub fn broadcast_to(&self, dims: &[usize]) -> Result<Tensor<T>> {
        let src = self.dims();
        if src.len() != dims.len() || src.iter().zip(dims).any(|(&s, &d)| s != d && s != 1) {
            return Err(Error::shape(format!("cannot broadcast {src:?} to {dims:?}")));
        }
        let shape = Shape::new(dims)?;
        let src_strides = self.shape.strides();
        let rank = dims.len();
        let n = shape.numel();
        let mut map = Vec::with_capacity(n);
        let mut coord = vec![0usize; rank];
        for _ in 0..n {
            let idx: usize = (0..rank)
                .map(|i| if src[i] == 1 { 0 } else { coord[i] * src_strides[i] })
                .sum();
            map.push(idx);
            for ax in (0..rank).rev() {
                coord[ax] += 1;
                if coord[ax] < dims[ax] {
                    break;
                }
                coord[ax] = 0;
            }
        }
        let out = map.iter().map(|&i| self.data[i]).collect();
        let m = self.numel();
        Tensor::from_op("broadcast", &[self], shape, out, move |g, _| {
            let mut gx = vec![T::zero(); m];
            for (&i, &g) in map.iter().zip(g) {
                gx[i] += g;
            }
            vec![Some(gx)]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Result<Tensor<T>> {
        let k = *self.dims().last().expect("rank >= 1");
        let rows = self.numel() / k;
        let mut out = vec![T::zero(); self.numel()];
        for r in 0..rows {
            let row = &self.data[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for j in 0..k {
                out[r * k + j] = row[j] - lse;
            }
        }
        let y = Arc::new(out.clone());
        Tensor::from_op("log_softmax", &[self], self.shape.clone(), out, move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for r in 0..rows {
                let gs: T = g[r * k..(r + 1) * k].iter().copied().sum();
                for j in 0..k {
                    let i = r * k + j;
                    gx[i] = g[i] - y[i].exp() * gs;
                }
            }
            vec![Some(gx)]
        })
    }
}

pub(crate) fn matmul_raw<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}
