//! Direct 3D convolution and transposed convolution on `[N, C, T, H, W]`.
//!
//! Three loop kernels cover all six passes: `gather` is the convolution
//! forward and the transposed convolution's data gradient, `scatter` is the
//! transposed forward and the convolution's data gradient, and
//! `weight_grad` serves both weight gradients with its operands swapped.

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::shape("channel counts must be >= 1"));
        }
        if kernel.contains(&0) || stride.contains(&0) {
            return Err(Error::shape(format!(
                "kernel {kernel:?} and stride {stride:?} extents must be >= 1"
            )));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// `floor((L + 2p - k) / s) + 1` per axis.
    pub fn conv_output(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            let padded = input[i] + 2 * self.padding[i];
            if padded < self.kernel[i] {
                return Err(Error::shape(format!(
                    "conv output would be empty: input {input:?}, kernel {:?}, padding {:?}",
                    self.kernel, self.padding
                )));
            }
            out[i] = (padded - self.kernel[i]) / self.stride[i] + 1;
        }
        Ok(out)
    }

    /// `(L - 1) s - 2p + k` per axis.
    pub fn transposed_output(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            let full = (input[i] - 1) * self.stride[i] + self.kernel[i];
            if full <= 2 * self.padding[i] {
                return Err(Error::shape(format!(
                    "transposed conv output would be empty: input {input:?}, spec {self:?}"
                )));
            }
            out[i] = full - 2 * self.padding[i];
        }
        Ok(out)
    }

    /// Conv weights are `[Cout, Cin, kt, kh, kw]`.
    pub fn conv_weight_dims(&self) -> Vec<usize> {
        let [kt, kh, kw] = self.kernel;
        vec![self.out_channels, self.in_channels, kt, kh, kw]
    }

    /// Transposed-conv weights are `[Cin, Cout, kt, kh, kw]`.
    pub fn transposed_weight_dims(&self) -> Vec<usize> {
        let [kt, kh, kw] = self.kernel;
        vec![self.in_channels, self.out_channels, kt, kh, kw]
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    in_c: usize,
    out_c: usize,
    /// extents of the strided ("gather side") volume
    big: [usize; 3],
    /// extents of the dense ("scatter side") volume
    small: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

/// Indices `o` in `0..len` with `o * stride + offset` inside `0..bound`.
#[inline]
fn valid(len: usize, bound: usize, stride: usize, offset: isize) -> std::ops::Range<usize> {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let hi_num = bound as isize - 1 - offset;
    if hi_num < 0 {
        return 0..0;
    }
    let hi = (hi_num / s + 1).min(len as isize);
    let lo = lo.min(hi);
    lo as usize..hi as usize
}

fn vol(e: [usize; 3]) -> usize {
    e[0] * e[1] * e[2]
}

/// `out[n,oc,o] = sum_{ic,k} w[oc,ic,k] * x[n,ic,o*s + k - p]`.
/// `x` lives on the big volume, `out` on the small one.
fn gather<T: Element>(x: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let [kt_n, kh_n, kw_n] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding.map(|p| p as isize);
    let [bt, bh, bw] = g.big;
    let [ot_n, oh_n, ow_n] = g.small;
    let (in_vol, out_vol) = (vol(g.big), vol(g.small));
    let kvol = kt_n * kh_n * kw_n;
    let mut out = vec![T::zero(); g.batch * g.out_c * out_vol];
    for n in 0..g.batch {
        for oc in 0..g.out_c {
            let o_base = (n * g.out_c + oc) * out_vol;
            let out_c = &mut out[o_base..o_base + out_vol];
            for ic in 0..g.in_c {
                let x_c = &x[(n * g.in_c + ic) * in_vol..][..in_vol];
                let w_c = &w[(oc * g.in_c + ic) * kvol..][..kvol];
                for kt in 0..kt_n {
                    let rt = valid(ot_n, bt, st, kt as isize - pt);
                    for kh in 0..kh_n {
                        let rh = valid(oh_n, bh, sh, kh as isize - ph);
                        for kw in 0..kw_n {
                            let wv = w_c[(kt * kh_n + kh) * kw_n + kw];
                            let rw = valid(ow_n, bw, sw, kw as isize - pw);
                            if rw.is_empty() {
                                continue;
                            }
                            for ot in rt.clone() {
                                let it = (ot * st + kt) as isize - pt;
                                for oh in rh.clone() {
                                    let ih = (oh * sh + kh) as isize - ph;
                                    let orow = &mut out_c[(ot * oh_n + oh) * ow_n..][..ow_n];
                                    let irow = &x_c[(it as usize * bh + ih as usize) * bw..][..bw];
                                    let off = kw as isize - pw;
                                    if sw == 1 {
                                        let start = (rw.start as isize + off) as usize;
                                        let src = &irow[start..start + rw.len()];
                                        for (o, &v) in orow[rw.clone()].iter_mut().zip(src) {
                                            *o += wv * v;
                                        }
                                    } else {
                                        for ow in rw.clone() {
                                            orow[ow] += wv * irow[(ow * sw) + kw - pw as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `out[n,oc,i*s + k - p] += w[ic,oc,k] * x[n,ic,i]`.
/// `x` lives on the small volume, `out` on the big one.
fn scatter<T: Element>(x: &[T], w: &[T], g: &Geometry) -> Vec<T> {
    let [kt_n, kh_n, kw_n] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding.map(|p| p as isize);
    let [bt, bh, bw] = g.big;
    let [it_n, ih_n, iw_n] = g.small;
    let (in_vol, out_vol) = (vol(g.small), vol(g.big));
    let kvol = kt_n * kh_n * kw_n;
    let mut out = vec![T::zero(); g.batch * g.out_c * out_vol];
    for n in 0..g.batch {
        for oc in 0..g.out_c {
            let o_base = (n * g.out_c + oc) * out_vol;
            let out_c = &mut out[o_base..o_base + out_vol];
            for ic in 0..g.in_c {
                let x_c = &x[(n * g.in_c + ic) * in_vol..][..in_vol];
                let w_c = &w[(ic * g.out_c + oc) * kvol..][..kvol];
                for kt in 0..kt_n {
                    let rt = valid(it_n, bt, st, kt as isize - pt);
                    for kh in 0..kh_n {
                        let rh = valid(ih_n, bh, sh, kh as isize - ph);
                        for kw in 0..kw_n {
                            let wv = w_c[(kt * kh_n + kh) * kw_n + kw];
                            let rw = valid(iw_n, bw, sw, kw as isize - pw);
                            if rw.is_empty() {
                                continue;
                            }
                            for it in rt.clone() {
                                let ot = (it * st + kt) as isize - pt;
                                for ih in rh.clone() {
                                    let oh = (ih * sh + kh) as isize - ph;
                                    let irow = &x_c[(it * ih_n + ih) * iw_n..][..iw_n];
                                    let orow = &mut out_c[(ot as usize * bh + oh as usize) * bw..][..bw];
                                    let off = kw as isize - pw;
                                    if sw == 1 {
                                        let start = (rw.start as isize + off) as usize;
                                        let dst = &mut orow[start..start + rw.len()];
                                        for (o, &v) in dst.iter_mut().zip(&irow[rw.clone()]) {
                                            *o += wv * v;
                                        }
                                    } else {
                                        for iw in rw.clone() {
                                            orow[iw * sw + kw - pw as usize] += wv * irow[iw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `dw[oc,ic,k] = sum_{n,o} dy[n,oc,o] * x[n,ic,o*s + k - p]`, with `x` on
/// the big volume (`in_c` channels) and `dy` on the small one (`out_c`).
fn weight_grad<T: Element>(x: &[T], dy: &[T], g: &Geometry) -> Vec<T> {
    let [kt_n, kh_n, kw_n] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding.map(|p| p as isize);
    let [bt, bh, bw] = g.big;
    let [ot_n, oh_n, ow_n] = g.small;
    let (in_vol, out_vol) = (vol(g.big), vol(g.small));
    let kvol = kt_n * kh_n * kw_n;
    let mut dw = vec![T::zero(); g.out_c * g.in_c * kvol];
    for n in 0..g.batch {
        for oc in 0..g.out_c {
            let dy_c = &dy[(n * g.out_c + oc) * out_vol..][..out_vol];
            for ic in 0..g.in_c {
                let x_c = &x[(n * g.in_c + ic) * in_vol..][..in_vol];
                let dw_c = &mut dw[(oc * g.in_c + ic) * kvol..][..kvol];
                for kt in 0..kt_n {
                    let rt = valid(ot_n, bt, st, kt as isize - pt);
                    for kh in 0..kh_n {
                        let rh = valid(oh_n, bh, sh, kh as isize - ph);
                        for kw in 0..kw_n {
                            let rw = valid(ow_n, bw, sw, kw as isize - pw);
                            if rw.is_empty() {
                                continue;
                            }
                            let mut acc = T::zero();
                            for ot in rt.clone() {
                                let it = (ot * st + kt) as isize - pt;
                                for oh in rh.clone() {
                                    let ih = (oh * sh + kh) as isize - ph;
                                    let drow = &dy_c[(ot * oh_n + oh) * ow_n..][..ow_n];
                                    let irow = &x_c[(it as usize * bh + ih as usize) * bw..][..bw];
                                    if sw == 1 {
                                        let start = (rw.start as isize + kw as isize - pw) as usize;
                                        let src = &irow[start..start + rw.len()];
                                        for (&d, &v) in drow[rw.clone()].iter().zip(src) {
                                            acc += d * v;
                                        }
                                    } else {
                                        for ow in rw.clone() {
                                            acc += drow[ow] * irow[ow * sw + kw - pw as usize];
                                        }
                                    }
                                }
                            }
                            dw_c[(kt * kh_n + kh) * kw_n + kw] += acc;
                        }
                    }
                }
            }
        }
    }
    dw
}

fn channel_sums<T: Element>(dy: &[T], batch: usize, channels: usize, volume: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for n in 0..batch {
        for (c, acc) in db.iter_mut().enumerate() {
            *acc += dy[(n * channels + c) * volume..][..volume].iter().copied().sum::<T>();
        }
    }
    db
}

fn add_bias<T: Element>(out: &mut [T], bias: &[T], batch: usize, volume: usize) {
    let channels = bias.len();
    for n in 0..batch {
        for (c, &b) in bias.iter().enumerate() {
            out[(n * channels + c) * volume..][..volume].iter_mut().for_each(|v| *v += b);
        }
    }
}

fn check_operands<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
    weight_dims: Vec<usize>,
) -> Result<(usize, [usize; 3])> {
    let d = x.dims();
    if d.len() != 5 {
        return Err(Error::shape(format!("expected [N,C,T,H,W], got {d:?}")));
    }
    if d[1] != spec.in_channels {
        return Err(Error::shape(format!(
            "input has {} channels, layer expects {}",
            d[1], spec.in_channels
        )));
    }
    if weight.dims() != weight_dims.as_slice() {
        return Err(Error::shape(format!(
            "weight {:?} does not match spec {:?}",
            weight.dims(),
            weight_dims
        )));
    }
    if bias.dims() != [spec.out_channels] {
        return Err(Error::shape(format!("bias {:?} needs [{}]", bias.dims(), spec.out_channels)));
    }
    Ok((d[0], [d[2], d[3], d[4]]))
}

/// Cross-correlation plus bias. Weight `[Cout, Cin, kt, kh, kw]`, bias `[Cout]`.
pub fn conv3d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (batch, input) = check_operands(x, weight, bias, spec, spec.conv_weight_dims())?;
    let output = spec.conv_output(input)?;
    let geo = Geometry {
        batch,
        in_c: spec.in_channels,
        out_c: spec.out_channels,
        big: input,
        small: output,
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
    };
    let mut out = gather(x.data(), weight.data(), &geo);
    add_bias(&mut out, bias.data(), batch, vol(output));
    let shape = Shape::new(&[batch, spec.out_channels, output[0], output[1], output[2]])?;
    let (xd, wd) = (x.data_arc(), weight.data_arc());
    Tensor::from_op("conv3d", &[x, weight, bias], shape, out, move |dy, needs| {
        // Data gradient: scatter dy (Cout channels) back through w.
        let back = Geometry {
            in_c: geo.out_c,
            out_c: geo.in_c,
            ..geo
        };
        vec![
            needs[0].then(|| scatter(dy, &wd, &back)),
            needs[1].then(|| weight_grad(&xd, dy, &geo)),
            needs[2].then(|| channel_sums(dy, geo.batch, geo.out_c, vol(geo.small))),
        ]
    })
}

/// Transposed convolution (the data-gradient of [`conv3d`] with the same
/// weights). Weight `[Cin, Cout, kt, kh, kw]`, bias `[Cout]`.
pub fn conv_transpose3d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (batch, input) = check_operands(x, weight, bias, spec, spec.transposed_weight_dims())?;
    let output = spec.transposed_output(input)?;
    let geo = Geometry {
        batch,
        in_c: spec.in_channels,
        out_c: spec.out_channels,
        big: output,
        small: input,
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
    };
    let mut out = scatter(x.data(), weight.data(), &geo);
    add_bias(&mut out, bias.data(), batch, vol(output));
    let shape = Shape::new(&[batch, spec.out_channels, output[0], output[1], output[2]])?;
    let (xd, wd) = (x.data_arc(), weight.data_arc());
    Tensor::from_op("conv_transpose3d", &[x, weight, bias], shape, out, move |dy, needs| {
        // dy lives on the big volume with Cout channels.
        let back = Geometry {
            in_c: geo.out_c,
            out_c: geo.in_c,
            ..geo
        };
        vec![
            needs[0].then(|| gather(dy, &wd, &back)),
            needs[1].then(|| weight_grad(dy, &xd, &back)),
            needs[2].then(|| channel_sums(dy, geo.batch, geo.out_c, vol(geo.big))),
        ]
    })
}
