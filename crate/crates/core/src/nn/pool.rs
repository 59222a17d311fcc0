use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Unpadded window pooling over the last three axes of `[N, C, T, H, W]`.
/// Max-pool gradients go to the first maximum in row-major window order.
pub fn pool3d<T: Element>(
    x: &Tensor<T>,
    kind: PoolKind,
    kernel: [usize; 3],
    stride: [usize; 3],
) -> Result<Tensor<T>> {
    let d = x.dims();
    if d.len() != 5 {
        return Err(Error::shape(format!("pool3d expects [N,C,T,H,W], got {d:?}")));
    }
    if kernel.contains(&0) || stride.contains(&0) {
        return Err(Error::shape("pool kernel and stride must be >= 1"));
    }
    let input = [d[2], d[3], d[4]];
    let mut out_e = [0; 3];
    for i in 0..3 {
        if input[i] < kernel[i] {
            return Err(Error::shape(format!(
                "pool window {kernel:?} larger than input {input:?}"
            )));
        }
        out_e[i] = (input[i] - kernel[i]) / stride[i] + 1;
    }
    let planes = d[0] * d[1];
    let in_vol = input.iter().product::<usize>();
    let out_vol = out_e.iter().product::<usize>();
    let win = kernel.iter().product::<usize>();
    let xd = x.data();
    let mut out = Vec::with_capacity(planes * out_vol);
    // For max: source index per output; for avg the window is recomputed.
    let mut arg = Vec::with_capacity(if kind == PoolKind::Max { planes * out_vol } else { 0 });
    for p in 0..planes {
        let base = p * in_vol;
        for ot in 0..out_e[0] {
            for oh in 0..out_e[1] {
                for ow in 0..out_e[2] {
                    let mut best = 0usize;
                    let mut best_v = T::neg_infinity();
                    let mut acc = T::zero();
                    for kt in 0..kernel[0] {
                        for kh in 0..kernel[1] {
                            for kw in 0..kernel[2] {
                                let i = base
                                    + ((ot * stride[0] + kt) * input[1] + oh * stride[1] + kh) * input[2]
                                    + ow * stride[2]
                                    + kw;
                                let v = xd[i];
                                acc += v;
                                if v > best_v {
                                    best_v = v;
                                    best = i;
                                }
                            }
                        }
                    }
                    match kind {
                        PoolKind::Max => {
                            out.push(best_v);
                            arg.push(best);
                        }
                        PoolKind::Avg => out.push(acc / T::of(win as f64)),
                    }
                }
            }
        }
    }
    let shape = Shape::new(&[d[0], d[1], out_e[0], out_e[1], out_e[2]])?;
    let n = x.numel();
    match kind {
        PoolKind::Max => Tensor::from_op("max_pool3d", &[x], shape, out, move |g, _| {
            let mut gx = vec![T::zero(); n];
            for (&i, &g) in arg.iter().zip(g) {
                gx[i] += g;
            }
            vec![Some(gx)]
        }),
        PoolKind::Avg => Tensor::from_op("avg_pool3d", &[x], shape, out, move |g, _| {
            let mut gx = vec![T::zero(); n];
            let share = T::one() / T::of(win as f64);
            for p in 0..planes {
                let base = p * in_vol;
                let mut o = p * out_vol;
                for ot in 0..out_e[0] {
                    for oh in 0..out_e[1] {
                        for ow in 0..out_e[2] {
                            let gv = g[o] * share;
                            o += 1;
                            for kt in 0..kernel[0] {
                                for kh in 0..kernel[1] {
                                    for kw in 0..kernel[2] {
                                        let i = base
                                            + ((ot * stride[0] + kt) * input[1] + oh * stride[1] + kh)
                                                * input[2]
                                            + ow * stride[2]
                                            + kw;
                                        gx[i] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Init, Tape};

    fn rand(dims: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::create(dims, Init::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap()
    }

    fn reference(x: &Tensor<f64>, kind: PoolKind, k: [usize; 3], s: [usize; 3]) -> Vec<f64> {
        let d = x.dims();
        let mut out = Vec::new();
        for p in 0..d[0] * d[1] {
            for ot in 0..(d[2] - k[0]) / s[0] + 1 {
                for oh in 0..(d[3] - k[1]) / s[1] + 1 {
                    for ow in 0..(d[4] - k[2]) / s[2] + 1 {
                        let mut vals = Vec::new();
                        for a in 0..k[0] {
                            for b in 0..k[1] {
                                for c in 0..k[2] {
                                    let t = ot * s[0] + a;
                                    let h = oh * s[1] + b;
                                    let w = ow * s[2] + c;
                                    vals.push(x.data()[((p * d[2] + t) * d[3] + h) * d[4] + w]);
                                }
                            }
                        }
                        out.push(match kind {
                            PoolKind::Max => vals.iter().copied().fold(f64::MIN, f64::max),
                            PoolKind::Avg => vals.iter().sum::<f64>() / vals.len() as f64,
                        });
                    }
                }
            }
        }
        out
    }

    #[test]
    fn max_of_counting_window() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let y = pool3d(&x, PoolKind::Max, [2, 2, 2], [2, 2, 2]).unwrap();
        assert_eq!(y.data(), &[8.0]);
    }

    #[test]
    fn avg_of_constant_is_constant() {
        let x = Tensor::<f64>::create(&[1, 2, 4, 4, 4], Init::Constant(0.7)).unwrap();
        let y = pool3d(&x, PoolKind::Avg, [2, 2, 2], [2, 2, 2]).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn matches_loop_reference() {
        let x = rand(&[2, 3, 5, 6, 7], 3);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            for (k, s) in [([2, 2, 2], [2, 2, 2]), ([1, 3, 2], [1, 2, 1]), ([3, 2, 2], [1, 1, 3])] {
                let got = pool3d(&x, kind, k, s).unwrap();
                let want = reference(&x, kind, k, s);
                for (g, w) in got.data().iter().zip(&want) {
                    assert!((g - w).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn max_backward_ties_go_to_first() {
        let tape = Tape::new();
        let x = tape.track(&Tensor::<f64>::create(&[1, 1, 1, 2, 2], Init::Ones).unwrap());
        pool3d(&x, PoolKind::Max, [1, 2, 2], [1, 2, 2]).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn degenerate_window_is_rejected() {
        let x = rand(&[1, 1, 1, 4, 4], 1);
        assert!(matches!(pool3d(&x, PoolKind::Max, [2, 2, 2], [2, 2, 2]), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Max pooling has kinks at ties, so use well-separated values.
        let r = rand(&[2, 2, 4, 5, 5], 9).to_vec();
        let mut order: Vec<usize> = (0..r.len()).collect();
        order.sort_by(|&a, &b| r[a].total_cmp(&r[b]));
        let mut sep = vec![0.0; r.len()];
        for (rank, &i) in order.iter().enumerate() {
            sep[i] = rank as f64 * 0.01 - 1.0;
        }
        let x = Tensor::from_vec(&[2, 2, 4, 5, 5], sep).unwrap();
        let probe_dims = |k: [usize; 3], s: [usize; 3]| {
            vec![2, 2, (4 - k[0]) / s[0] + 1, (5 - k[1]) / s[1] + 1, (5 - k[2]) / s[2] + 1]
        };
        for kind in [PoolKind::Max, PoolKind::Avg] {
            for (k, s) in [([2, 2, 2], [2, 2, 2]), ([1, 3, 2], [1, 1, 2])] {
                let probe = rand(&probe_dims(k, s), 4);
                let err = finite_diff_check(|v| pool3d(v, kind, k, s)?.mul(&probe)?.sum(), &x, 1e-5).unwrap();
                assert!(err <= 1e-5, "{kind:?} {k:?}: {err}");
            }
        }
    }
}
