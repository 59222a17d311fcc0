//! Single-channel float image with the sampling and finite-difference
//! operators the flow solver needs.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::shape(format!(
                "plane {width}x{height} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.at(x, y)
    }

    /// Bilinear sample; coordinates outside the image clamp to the border.
    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bottom = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Central differences in the interior, one-sided at the border.
    pub fn gradient(&self) -> (Plane, Plane) {
        let (w, h) = (self.width, self.height);
        let diff = |lo: f64, hi: f64, span: usize| if span == 0 { 0.0 } else { (hi - lo) / span as f64 };
        let gx = Plane::from_fn(w, h, |x, y| {
            let (l, r) = (x.saturating_sub(1), (x + 1).min(w - 1));
            diff(self.at(l, y), self.at(r, y), r - l)
        });
        let gy = Plane::from_fn(w, h, |x, y| {
            let (t, b) = (y.saturating_sub(1), (y + 1).min(h - 1));
            diff(self.at(x, t), self.at(x, b), b - t)
        });
        (gx, gy)
    }

    /// Forward differences, zero on the last column/row.
    pub fn forward_gradient(&self) -> (Plane, Plane) {
        let (w, h) = (self.width, self.height);
        let gx = Plane::from_fn(w, h, |x, y| if x + 1 < w { self.at(x + 1, y) - self.at(x, y) } else { 0.0 });
        let gy = Plane::from_fn(w, h, |x, y| if y + 1 < h { self.at(x, y + 1) - self.at(x, y) } else { 0.0 });
        (gx, gy)
    }

    /// Negative adjoint of [`Plane::forward_gradient`].
    pub fn divergence(px: &Plane, py: &Plane) -> Plane {
        let (w, h) = (px.width, px.height);
        Plane::from_fn(w, h, |x, y| {
            let dx = if w == 1 {
                0.0
            } else if x == 0 {
                px.at(0, y)
            } else if x == w - 1 {
                -px.at(x - 1, y)
            } else {
                px.at(x, y) - px.at(x - 1, y)
            };
            let dy = if h == 1 {
                0.0
            } else if y == 0 {
                py.at(x, 0)
            } else if y == h - 1 {
                -py.at(x, y - 1)
            } else {
                py.at(x, y) - py.at(x, y - 1)
            };
            dx + dy
        })
    }

    /// Separable gaussian blur with border clamping.
    pub fn blur(&self, sigma: f64) -> Plane {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);
        let (w, h) = (self.width, self.height);
        let horiz = Plane::from_fn(w, h, |x, y| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * self.clamped(x as isize + i as isize - radius, y as isize))
                .sum()
        });
        Plane::from_fn(w, h, |x, y| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * horiz.clamped(x as isize, y as isize + i as isize - radius))
                .sum()
        })
    }

    /// Bilinear resize with pixel-centre alignment.
    pub fn resize(&self, width: usize, height: usize) -> Plane {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Plane::from_fn(width, height, |x, y| {
            self.bilinear((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5)
        })
    }
}
