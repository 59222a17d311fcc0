use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::flow::Plane;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::A, Domain::B];

    pub fn name(self) -> &'static str {
        match self {
            Domain::A => "A",
            Domain::B => "B",
        }
    }

    pub fn other(self) -> Domain {
        match self {
            Domain::A => Domain::B,
            Domain::B => Domain::A,
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Domain::A),
            "B" | "b" => Ok(Domain::B),
            other => Err(Error::input(format!("unknown domain {other:?}"))),
        }
    }
}

/// Generator ground truth: sprite centre velocity and radius change, all in
/// pixels per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueMotion {
    pub vx: f32,
    pub vy: f32,
    pub vr: f32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipMeta {
    clip_id: String,
    label: usize,
    domain: Domain,
    true_motion: Option<TrueMotion>,
}

/// A labeled clip: frames `[T, 3, H, W]` with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct VideoClip {
    pub frames: Tensor<f32>,
    pub label: usize,
    pub domain: Domain,
    pub clip_id: String,
    pub true_motion: Option<TrueMotion>,
}

impl VideoClip {
    pub fn new(
        frames: Tensor<f32>,
        label: usize,
        domain: Domain,
        clip_id: impl Into<String>,
        true_motion: Option<TrueMotion>,
    ) -> Result<Self> {
        let d = frames.dims();
        if d.len() != 4 || d[1] != 3 {
            return Err(Error::shape(format!("clip frames must be [T,3,H,W], got {d:?}")));
        }
        if d[0] < 2 {
            return Err(Error::input("a clip needs at least 2 frames"));
        }
        if let Some(v) = frames.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::input(format!("pixel value {v} outside [0, 1]")));
        }
        if label >= super::NUM_CLASSES {
            return Err(Error::input(format!("label {label} >= {}", super::NUM_CLASSES)));
        }
        let clip_id = clip_id.into();
        if clip_id.is_empty() || clip_id.contains(['/', '\\']) {
            return Err(Error::input(format!("invalid clip id {clip_id:?}")));
        }
        Ok(Self {
            frames,
            label,
            domain,
            clip_id,
            true_motion,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.dims()[3]
    }

    /// Channel-mean grayscale of frame `t`.
    pub fn luminance(&self, t: usize) -> Plane {
        let (h, w) = (self.height(), self.width());
        let plane = h * w;
        let base = t * 3 * plane;
        let d = self.frames.data();
        let data = (0..plane)
            .map(|i| (d[base + i] as f64 + d[base + plane + i] as f64 + d[base + 2 * plane + i] as f64) / 3.0)
            .collect();
        Plane::from_vec(w, h, data).expect("clip extents are valid")
    }

    /// Frames in reverse temporal order: output frame `t` is input frame
    /// `T - 1 - t`. This is the reconstruction target of the frame decoder.
    pub fn reversed_frames(&self) -> Tensor<f32> {
        self.frames.reverse(0).expect("axis 0 exists")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let meta = ClipMeta {
            clip_id: self.clip_id.clone(),
            label: self.label,
            domain: self.domain,
            true_motion: self.true_motion,
        };
        container::write_file(path, self.frames.dims(), self.frames.data(), &serde_json::to_value(meta)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let c = container::decode::<f32>(&bytes)?;
        let dtype_offset = 9 + 4 * c.dims.len();
        if bytes[dtype_offset] != 0 {
            return Err(Error::format("dtype", "clip payload must be f32"));
        }
        if c.dims.len() != 4 {
            return Err(Error::format("rank", format!("clip rank must be 4, got {}", c.dims.len())));
        }
        let meta: ClipMeta = serde_json::from_value(c.metadata)
            .map_err(|e| Error::format("metadata", e.to_string()))?;
        let frames = Tensor::from_vec(&c.dims, c.data)?;
        VideoClip::new(frames, meta.label, meta.domain, meta.clip_id, meta.true_motion)
            .map_err(|e| Error::format("payload", e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(frames: &[f32], t: usize) -> VideoClip {
        VideoClip::new(Tensor::from_vec(&[t, 3, 1, 1], frames.to_vec()).unwrap(), 1, Domain::A, "c", None).unwrap()
    }

    #[test]
    fn reversal_examples() {
        let c = clip(&[0.1, 0.1, 0.1, 0.2, 0.2, 0.2, 0.3, 0.3, 0.3], 3);
        let r = c.reversed_frames();
        assert_eq!(r.data(), &[0.3, 0.3, 0.3, 0.2, 0.2, 0.2, 0.1, 0.1, 0.1]);
        assert_eq!(r.reverse(0).unwrap().data(), c.frames.data());
        let pal = clip(&[0.1, 0.1, 0.1, 0.5, 0.5, 0.5, 0.1, 0.1, 0.1], 3);
        assert_eq!(pal.reversed_frames().data(), pal.frames.data());
    }

    #[test]
    fn validation() {
        let f = Tensor::from_vec(&[1, 3, 1, 1], vec![0.0f32; 3]).unwrap();
        assert!(VideoClip::new(f, 0, Domain::A, "x", None).is_err());
        let f = Tensor::from_vec(&[2, 3, 1, 1], vec![1.5f32; 6]).unwrap();
        assert!(VideoClip::new(f, 0, Domain::A, "x", None).is_err());
        let f = Tensor::from_vec(&[2, 3, 1, 1], vec![0.5f32; 6]).unwrap();
        assert!(VideoClip::new(f.clone(), 6, Domain::A, "x", None).is_err());
        assert!(VideoClip::new(f, 0, Domain::A, "a/b", None).is_err());
    }

    #[test]
    fn file_roundtrip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.clip.bin");
        let mut c = clip(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 2);
        c.true_motion = Some(TrueMotion { vx: 1.0, vy: 0.0, vr: 0.0 });
        c.write(&path).unwrap();
        let back = VideoClip::read(&path).unwrap();
        assert_eq!(back.frames.data(), c.frames.data());
        assert_eq!(back.frames.dims(), c.frames.dims());
        assert_eq!((back.label, back.domain, &back.clip_id, back.true_motion), (c.label, c.domain, &c.clip_id, c.true_motion));

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(VideoClip::read(&path), Err(Error::Format { field: "magic", .. })));
    }
}
