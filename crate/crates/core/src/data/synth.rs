use rand::Rng;
use serde::{Deserialize, Serialize};

use super::clip::{Domain, TrueMotion, VideoClip};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Generator version tag written into manifests.
pub const GENERATOR_TAG: &str = "sprites-v1";

const SUBSAMPLES: usize = 4;
const MIN_COLOR_GAP: f32 = 0.35;
const NOISE_CELL: f64 = 4.0;
const JITTER: f32 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionClass {
    TranslateLeft,
    TranslateRight,
    TranslateUp,
    TranslateDown,
    Expand,
    Contract,
}

impl ActionClass {
    pub const ALL: [ActionClass; 6] = [
        ActionClass::TranslateLeft,
        ActionClass::TranslateRight,
        ActionClass::TranslateUp,
        ActionClass::TranslateDown,
        ActionClass::Expand,
        ActionClass::Contract,
    ];

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::input(format!("unknown class id {id}")))
    }

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionClass::TranslateLeft => "translate-left",
            ActionClass::TranslateRight => "translate-right",
            ActionClass::TranslateUp => "translate-up",
            ActionClass::TranslateDown => "translate-down",
            ActionClass::Expand => "expand",
            ActionClass::Contract => "contract",
        }
    }

    /// Recovers the class from generator ground truth alone.
    pub fn from_motion(m: &TrueMotion) -> Option<Self> {
        let (ax, ay, ar) = (m.vx.abs(), m.vy.abs(), m.vr.abs());
        if ar > ax && ar > ay {
            return Some(if m.vr > 0.0 { ActionClass::Expand } else { ActionClass::Contract });
        }
        if ax > ay {
            return Some(if m.vx > 0.0 { ActionClass::TranslateRight } else { ActionClass::TranslateLeft });
        }
        if ay > ax {
            return Some(if m.vy > 0.0 { ActionClass::TranslateDown } else { ActionClass::TranslateUp });
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpriteShape {
    Circle,
    Square,
    Triangle,
}

impl SpriteShape {
    /// Whether `(dx, dy)` relative to the sprite centre lies inside a sprite of
    /// size `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            SpriteShape::Circle => dx * dx + dy * dy <= r * r,
            SpriteShape::Square => {
                let half = 0.85 * r;
                dx.abs() <= half && dy.abs() <= half
            }
            SpriteShape::Triangle => {
                // Upward equilateral triangle with circumradius r.
                let s = 3f64.sqrt() / 2.0;
                let v = [(0.0, -r), (r * s, 0.5 * r), (-r * s, 0.5 * r)];
                (0..3).all(|i| {
                    let (x0, y0) = v[i];
                    let (x1, y1) = v[(i + 1) % 3];
                    (x1 - x0) * (dy - y0) - (y1 - y0) * (dx - x0) >= 0.0
                })
            }
        }
    }
}

/// Frame geometry of generated clips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::config("data.frames", "must be >= 2"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("data.height/width", "must be >= 8"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Background {
    Flat([f32; 3]),
    /// Bilinearly interpolated value noise on a coarse grid, per channel.
    Noise {
        cols: usize,
        rows: usize,
        values: Vec<[f32; 3]>,
    },
}

impl Background {
    fn at(&self, x: f64, y: f64) -> [f32; 3] {
        match self {
            Background::Flat(c) => *c,
            Background::Noise { cols, rows, values } => {
                let gx = (x / NOISE_CELL).clamp(0.0, (*cols - 1) as f64);
                let gy = (y / NOISE_CELL).clamp(0.0, (*rows - 1) as f64);
                let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(cols - 1), (y0 + 1).min(rows - 1));
                let (fx, fy) = ((gx - x0 as f64) as f32, (gy - y0 as f64) as f32);
                let g = |xi: usize, yi: usize| values[yi * cols + xi];
                let mut out = [0.0; 3];
                for (c, o) in out.iter_mut().enumerate() {
                    let top = g(x0, y0)[c] * (1.0 - fx) + g(x1, y0)[c] * fx;
                    let bottom = g(x0, y1)[c] * (1.0 - fx) + g(x1, y1)[c] * fx;
                    *o = top * (1.0 - fy) + bottom * fy;
                }
                out
            }
        }
    }
}

/// Every random choice behind one clip. Rendering a recipe is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecipe {
    pub class: ActionClass,
    pub domain: Domain,
    pub geometry: SynthConfig,
    pub background: Background,
    pub shape: SpriteShape,
    pub color: [f32; 3],
    /// Sprite centre at frame 0, in pixel units (pixel `i` spans `[i, i+1)`).
    pub start: (f64, f64),
    pub radius: f64,
    pub motion: TrueMotion,
    /// Additive brightness offset per frame.
    pub jitter: Vec<f32>,
}

impl ClipRecipe {
    /// Draws a recipe. `speed` overrides the domain's random speed.
    pub fn sample(
        class: ActionClass,
        domain: Domain,
        geometry: SynthConfig,
        seed: u64,
        speed: Option<f64>,
    ) -> Result<Self> {
        geometry.validate()?;
        let mut rng = seed::rng(seed);
        let (lo, hi) = match domain {
            Domain::A => (1.0, 1.5),
            Domain::B => (1.5, 2.5),
        };
        let speed = match speed {
            Some(s) if s > 0.0 && s.is_finite() => s,
            Some(s) => return Err(Error::input(format!("speed must be positive, got {s}"))),
            None => rng.random_range(lo..=hi),
        };
        let (w, h) = (geometry.width as f64, geometry.height as f64);
        let travel = speed * (geometry.frames - 1) as f64;
        let scale = w.min(h) / 32.0;

        let background = match domain {
            Domain::A => Background::Flat(random_color(&mut rng)),
            Domain::B => {
                let cols = (w / NOISE_CELL).ceil() as usize + 2;
                let rows = (h / NOISE_CELL).ceil() as usize + 2;
                let values = (0..cols * rows)
                    .map(|_| {
                        let mut c = [0.0f32; 3];
                        for v in &mut c {
                            *v = rng.random_range(0.1..0.9);
                        }
                        c
                    })
                    .collect();
                Background::Noise { cols, rows, values }
            }
        };
        let shape = match domain {
            Domain::A if rng.random_bool(0.5) => SpriteShape::Circle,
            Domain::A => SpriteShape::Square,
            Domain::B => SpriteShape::Triangle,
        };
        let color = match &background {
            Background::Flat(bg) => loop {
                let c = random_color(&mut rng);
                if (0..3).map(|i| (c[i] - bg[i]).abs()).fold(0.0, f32::max) >= MIN_COLOR_GAP {
                    break c;
                }
            },
            Background::Noise { .. } => random_color(&mut rng),
        };

        let mut span = |lo: f64, hi: f64, what: &str| -> Result<f64> {
            if lo > hi {
                return Err(Error::input(format!(
                    "{}x{} frames too small for {} with speed {speed:.2} ({what})",
                    geometry.width, geometry.height, class.name()
                )));
            }
            Ok(if lo == hi { lo } else { rng.random_range(lo..hi) })
        };
        let (start, radius, motion) = match class {
            ActionClass::Expand | ActionClass::Contract => {
                let vr = 0.5 * speed;
                let r_small = span(3.0 * scale, 4.0 * scale, "radius")?;
                let r_big = r_small + vr * (geometry.frames - 1) as f64;
                let cx = span(r_big + 1.0, w - 1.0 - r_big, "centre x")?;
                let cy = span(r_big + 1.0, h - 1.0 - r_big, "centre y")?;
                let (r0, vr) = if class == ActionClass::Expand { (r_small, vr) } else { (r_big, -vr) };
                ((cx, cy), r0, TrueMotion { vx: 0.0, vy: 0.0, vr: vr as f32 })
            }
            _ => {
                let r = span(3.5 * scale, 4.5 * scale, "radius")?;
                let (vx, vy) = match class {
                    ActionClass::TranslateLeft => (-speed, 0.0),
                    ActionClass::TranslateRight => (speed, 0.0),
                    ActionClass::TranslateUp => (0.0, -speed),
                    _ => (0.0, speed),
                };
                let mut axis = |extent: f64, v: f64, what: &str| -> Result<f64> {
                    let (lo, hi) = (r + 1.0, extent - 1.0 - r);
                    if v > 0.0 {
                        span(lo, hi - travel, what)
                    } else if v < 0.0 {
                        span(lo + travel, hi, what)
                    } else {
                        span(lo, hi, what)
                    }
                };
                let cx = axis(w, vx, "start x")?;
                let cy = axis(h, vy, "start y")?;
                ((cx, cy), r, TrueMotion { vx: vx as f32, vy: vy as f32, vr: 0.0 })
            }
        };
        let jitter = (0..geometry.frames)
            .map(|_| match domain {
                Domain::A => 0.0,
                Domain::B => rng.random_range(-JITTER..=JITTER),
            })
            .collect();
        Ok(Self {
            class,
            domain,
            geometry,
            background,
            shape,
            color,
            start,
            radius,
            motion,
            jitter,
        })
    }

    /// Sprite centre and size at frame `t`.
    pub fn sprite_at(&self, t: usize) -> (f64, f64, f64) {
        let t = t as f64;
        (
            self.start.0 + self.motion.vx as f64 * t,
            self.start.1 + self.motion.vy as f64 * t,
            self.radius + self.motion.vr as f64 * t,
        )
    }

    pub fn render(&self, clip_id: impl Into<String>) -> Result<VideoClip> {
        let SynthConfig { frames, height, width } = self.geometry;
        let plane = height * width;
        let mut data = vec![0.0f32; frames * 3 * plane];
        let n2 = (SUBSAMPLES * SUBSAMPLES) as f32;
        for t in 0..frames {
            let (cx, cy, r) = self.sprite_at(t);
            for y in 0..height {
                for x in 0..width {
                    let mut inside = 0usize;
                    for sy in 0..SUBSAMPLES {
                        for sx in 0..SUBSAMPLES {
                            let px = x as f64 + (sx as f64 + 0.5) / SUBSAMPLES as f64;
                            let py = y as f64 + (sy as f64 + 0.5) / SUBSAMPLES as f64;
                            if self.shape.contains(px - cx, py - cy, r) {
                                inside += 1;
                            }
                        }
                    }
                    let cover = inside as f32 / n2;
                    let bg = self.background.at(x as f64 + 0.5, y as f64 + 0.5);
                    for c in 0..3 {
                        let v = bg[c] * (1.0 - cover) + self.color[c] * cover + self.jitter[t];
                        data[(t * 3 + c) * plane + y * width + x] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
        let frames = Tensor::from_vec(&[frames, 3, height, width], data)?;
        VideoClip::new(frames, self.class.id(), self.domain, clip_id, Some(self.motion))
    }
}

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Canonical clip id for the `index`-th clip of a (class, domain) cell.
pub fn clip_id(class: ActionClass, domain: Domain, index: usize) -> String {
    format!("{}-{}-{index:03}", domain.name(), class.name())
}

/// Generates one clip at the default 8x32x32 geometry.
pub fn synth_clip(class: usize, domain: Domain, seed: u64) -> Result<VideoClip> {
    synth_clip_with(class, domain, seed, SynthConfig::default())
}

pub fn synth_clip_with(class: usize, domain: Domain, seed: u64, geometry: SynthConfig) -> Result<VideoClip> {
    let class = ActionClass::from_id(class)?;
    let id = format!("{}-{}-s{seed}", domain.name(), class.name());
    ClipRecipe::sample(class, domain, geometry, seed, None)?.render(id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_ids_and_names() {
        for (i, c) in ActionClass::ALL.iter().enumerate() {
            assert_eq!(c.id(), i);
            assert_eq!(ActionClass::from_id(i).unwrap(), *c);
        }
        assert!(matches!(ActionClass::from_id(6), Err(Error::InvalidInput(_))));
        assert_eq!(clip_id(ActionClass::TranslateRight, Domain::A, 3), "A-translate-right-003");
    }

    #[test]
    fn recipes_respect_domain_ranges() {
        for seed in 0..40 {
            for class in ActionClass::ALL {
                let a = ClipRecipe::sample(class, Domain::A, SynthConfig::default(), seed, None).unwrap();
                let b = ClipRecipe::sample(class, Domain::B, SynthConfig::default(), seed, None).unwrap();
                let speed = |m: TrueMotion| (m.vx.abs() + m.vy.abs() + 2.0 * m.vr.abs()) as f64;
                assert!((1.0..=1.5).contains(&speed(a.motion)), "{:?}", a.motion);
                assert!((1.5..=2.5).contains(&speed(b.motion)), "{:?}", b.motion);
                assert!(matches!(a.shape, SpriteShape::Circle | SpriteShape::Square));
                assert_eq!(b.shape, SpriteShape::Triangle);
                assert!(a.jitter.iter().all(|j| *j == 0.0));
                assert!(b.jitter.iter().all(|j| j.abs() <= JITTER));
                assert_eq!(ActionClass::from_motion(&a.motion), Some(class));
            }
        }
    }

    #[test]
    fn sprite_stays_inside_frame() {
        for seed in 0..20 {
            for class in ActionClass::ALL {
                for domain in Domain::ALL {
                    let r = ClipRecipe::sample(class, domain, SynthConfig::default(), seed, None).unwrap();
                    for t in 0..8 {
                        let (cx, cy, rad) = r.sprite_at(t);
                        assert!(rad > 0.0);
                        assert!(cx - rad >= 0.0 && cx + rad <= 32.0, "{class:?} {seed} {t}");
                        assert!(cy - rad >= 0.0 && cy + rad <= 32.0, "{class:?} {seed} {t}");
                    }
                }
            }
        }
    }

    #[test]
    fn too_small_geometry_is_rejected() {
        let g = SynthConfig { frames: 30, height: 8, width: 8 };
        assert!(ClipRecipe::sample(ActionClass::TranslateLeft, Domain::B, g, 0, None).is_err());
        assert!(SynthConfig { frames: 1, height: 32, width: 32 }.validate().is_err());
    }

    #[test]
    fn triangle_contains_centre_not_corners() {
        assert!(SpriteShape::Triangle.contains(0.0, 0.0, 4.0));
        assert!(!SpriteShape::Triangle.contains(3.9, -3.9, 4.0));
        assert!(SpriteShape::Square.contains(3.3, 3.3, 4.0));
        assert!(!SpriteShape::Circle.contains(3.3, 3.3, 4.0));
    }
}
