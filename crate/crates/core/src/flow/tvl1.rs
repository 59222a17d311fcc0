//! Duality-based TV-L1 optical flow.
//!
//! Coarse-to-fine over an image pyramid. At every level and warp the data
//! term is linearized around the current flow, then the solver alternates a
//! pointwise thresholding step (auxiliary field `v`) with TV denoising of
//! `v` by projected dual ascent.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::plane::Plane;
use crate::error::{Error, Result};

const GRAD_FLOOR: f64 = 1e-10;
const MIN_LEVEL_EXTENT: usize = 8;
/// Inputs live in [0, 1] while the default parameters are tuned for 8-bit
/// intensities, so frames are rescaled before solving.
const INTENSITY_SCALE: f64 = 255.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TvL1Params {
    /// Weight of the L1 data term.
    pub lambda: f64,
    /// Coupling between `u` and the auxiliary field `v`.
    pub theta: f64,
    /// Dual step size; must not exceed 0.25.
    pub tau: f64,
    pub warps: usize,
    /// Inner iterations per warp.
    pub iterations: usize,
    /// Upper bound on pyramid levels. The pyramid also stops before any
    /// extent drops below 8 pixels.
    pub levels: usize,
    /// Downsampling factor between levels, in (0, 1).
    pub scale: f64,
}

impl Default for TvL1Params {
    fn default() -> Self {
        Self {
            lambda: 0.15,
            theta: 0.3,
            tau: 0.25,
            warps: 5,
            iterations: 25,
            levels: 5,
            scale: 0.5,
        }
    }
}

impl TvL1Params {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::config(format!("flow.{field}"), reason));
        if !(self.lambda > 0.0) {
            return bad("lambda", "must be > 0");
        }
        if !(self.theta > 0.0) {
            return bad("theta", "must be > 0");
        }
        if !(self.tau > 0.0 && self.tau <= 0.25) {
            return bad("tau", "must be in (0, 0.25]");
        }
        if self.warps == 0 {
            return bad("warps", "must be >= 1");
        }
        if self.iterations == 0 {
            return bad("iterations", "must be >= 1");
        }
        if self.levels == 0 {
            return bad("levels", "must be >= 1");
        }
        if !(self.scale > 0.0 && self.scale < 1.0) {
            return bad("scale", "must be in (0, 1)");
        }
        Ok(())
    }

    /// Stable short hash used to key cached flow files.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("params serialize");
        hex::encode(&Sha256::digest(&canonical)[..8])
    }
}

/// Sum over pixels of `|I_b(x + u) - I_a(x)|`.
pub fn data_residual(a: &Plane, b: &Plane, u: &Plane, v: &Plane) -> f64 {
    let mut total = 0.0;
    for y in 0..a.height {
        for x in 0..a.width {
            let i = y * a.width + x;
            let warped = b.bilinear(x as f64 + u.data[i], y as f64 + v.data[i]);
            total += (warped - a.data[i]).abs();
        }
    }
    total
}

fn pyramid(image: &Plane, params: &TvL1Params) -> Vec<Plane> {
    let sigma = 0.6 * (1.0 / (params.scale * params.scale) - 1.0).sqrt();
    let mut levels = vec![image.clone()];
    while levels.len() < params.levels {
        let last = levels.last().expect("non-empty");
        let w = (last.width as f64 * params.scale).ceil() as usize;
        let h = (last.height as f64 * params.scale).ceil() as usize;
        if w.min(h) < MIN_LEVEL_EXTENT || (w == last.width && h == last.height) {
            break;
        }
        levels.push(last.blur(sigma).resize(w, h));
    }
    levels
}

/// Estimates the flow `(u, v)` such that `b(x + u, y + v) ~ a(x, y)`.
pub fn tvl1_planes(a: &Plane, b: &Plane, params: &TvL1Params) -> Result<(Plane, Plane)> {
    params.validate()?;
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape(format!(
            "frames differ in size: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::input("frame contains NaN or infinite values"));
    }
    let scaled = |p: &Plane| Plane {
        data: p.data.iter().map(|x| x * INTENSITY_SCALE).collect(),
        ..p.clone()
    };
    let pa = pyramid(&scaled(a), params);
    let pb = pyramid(&scaled(b), params);
    let coarsest = pa.last().expect("non-empty");
    let mut u = Plane::new(coarsest.width, coarsest.height);
    let mut v = Plane::new(coarsest.width, coarsest.height);
    for level in (0..pa.len()).rev() {
        let (ia, ib) = (&pa[level], &pb[level]);
        if u.width != ia.width || u.height != ia.height {
            let fx = ia.width as f64 / u.width as f64;
            let fy = ia.height as f64 / u.height as f64;
            u = u.resize(ia.width, ia.height);
            v = v.resize(ia.width, ia.height);
            u.data.iter_mut().for_each(|d| *d *= fx);
            v.data.iter_mut().for_each(|d| *d *= fy);
        }
        solve_level(ia, ib, &mut u, &mut v, params);
    }
    Ok((u, v))
}

fn solve_level(i0: &Plane, i1: &Plane, u1: &mut Plane, u2: &mut Plane, params: &TvL1Params) {
    let (w, h) = (i0.width, i0.height);
    let n = w * h;
    let (gx, gy) = i1.gradient();
    let lt = params.lambda * params.theta;
    let step = params.tau / params.theta;
    let mut p11 = Plane::new(w, h);
    let mut p12 = Plane::new(w, h);
    let mut p21 = Plane::new(w, h);
    let mut p22 = Plane::new(w, h);
    let mut v1 = vec![0.0; n];
    let mut v2 = vec![0.0; n];

    for _ in 0..params.warps {
        let mut i1w = vec![0.0; n];
        let mut gxw = vec![0.0; n];
        let mut gyw = vec![0.0; n];
        let mut grad2 = vec![0.0; n];
        let mut rho_c = vec![0.0; n];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (sx, sy) = (x as f64 + u1.data[i], y as f64 + u2.data[i]);
                i1w[i] = i1.bilinear(sx, sy);
                gxw[i] = gx.bilinear(sx, sy);
                gyw[i] = gy.bilinear(sx, sy);
                grad2[i] = gxw[i] * gxw[i] + gyw[i] * gyw[i];
                rho_c[i] = i1w[i] - gxw[i] * u1.data[i] - gyw[i] * u2.data[i] - i0.data[i];
            }
        }

        for _ in 0..params.iterations {
            for i in 0..n {
                let rho = rho_c[i] + gxw[i] * u1.data[i] + gyw[i] * u2.data[i];
                let g2 = grad2[i];
                let (d1, d2) = if rho < -lt * g2 {
                    (lt * gxw[i], lt * gyw[i])
                } else if rho > lt * g2 {
                    (-lt * gxw[i], -lt * gyw[i])
                } else {
                    let f = -rho / g2.max(GRAD_FLOOR);
                    (f * gxw[i], f * gyw[i])
                };
                v1[i] = u1.data[i] + d1;
                v2[i] = u2.data[i] + d2;
            }

            let div1 = Plane::divergence(&p11, &p12);
            let div2 = Plane::divergence(&p21, &p22);
            for i in 0..n {
                u1.data[i] = v1[i] + params.theta * div1.data[i];
                u2.data[i] = v2[i] + params.theta * div2.data[i];
            }

            for (u, px, py) in [(&*u1, &mut p11, &mut p12), (&*u2, &mut p21, &mut p22)] {
                let (ux, uy) = u.forward_gradient();
                for i in 0..n {
                    let norm = 1.0 + step * (ux.data[i] * ux.data[i] + uy.data[i] * uy.data[i]).sqrt();
                    px.data[i] = (px.data[i] + step * ux.data[i]) / norm;
                    py.data[i] = (py.data[i] + step * uy.data[i]) / norm;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_hash_is_stable() {
        let p = TvL1Params::default();
        p.validate().unwrap();
        assert_eq!(p.hash(), TvL1Params::default().hash());
        let q = TvL1Params { lambda: 0.2, ..p.clone() };
        assert_ne!(p.hash(), q.hash());
    }

    #[test]
    fn invalid_params_are_rejected() {
        let p = TvL1Params { tau: 0.3, ..Default::default() };
        assert!(matches!(p.validate(), Err(Error::Config { .. })));
        let p = TvL1Params { scale: 1.0, ..Default::default() };
        assert!(p.validate().is_err());
        let p = TvL1Params { warps: 0, ..Default::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn pyramid_stops_at_min_extent() {
        let p = Plane::new(32, 32);
        let levels = pyramid(&p, &TvL1Params::default());
        let widths: Vec<usize> = levels.iter().map(|l| l.width).collect();
        assert_eq!(widths, vec![32, 16, 8]);
    }

    #[test]
    fn mismatched_or_nan_frames_error() {
        let a = Plane::new(8, 8);
        let b = Plane::new(9, 8);
        assert!(matches!(tvl1_planes(&a, &b, &TvL1Params::default()), Err(Error::InvalidShape(_))));
        let mut c = Plane::new(8, 8);
        c.data[3] = f64::NAN;
        assert!(matches!(tvl1_planes(&a, &c, &TvL1Params::default()), Err(Error::InvalidInput(_))));
    }
}
