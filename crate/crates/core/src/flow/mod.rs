//! Optical flow targets: a TV-L1 solver, a brute-force block-matching
//! reference, and per-clip flow fields cached on disk.

mod block_match;
mod plane;
mod tvl1;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use block_match::block_match;
pub use plane::Plane;
pub use tvl1::{data_residual, tvl1_planes, TvL1Params};

use crate::container;
use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Flow between consecutive frames: `[T-1, 2, H, W]`, channel 0 horizontal
/// and channel 1 vertical displacement in pixels.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub flows: Tensor<f32>,
}

impl FlowField {
    pub fn new(flows: Tensor<f32>) -> Result<Self> {
        let d = flows.dims();
        if d.len() != 4 || d[1] != 2 {
            return Err(Error::shape(format!("flow field must be [T-1,2,H,W], got {d:?}")));
        }
        if flows.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::input("flow field contains non-finite values"));
        }
        Ok(Self { flows })
    }

    pub fn num_fields(&self) -> usize {
        self.flows.dims()[0]
    }

    /// `(u, v)` planes of field `t`.
    pub fn planes(&self, t: usize) -> (Plane, Plane) {
        let d = self.flows.dims();
        let (h, w) = (d[2], d[3]);
        let n = h * w;
        let data = self.flows.data();
        let get = |c: usize| {
            let base = (t * 2 + c) * n;
            Plane::from_vec(w, h, data[base..base + n].iter().map(|&x| x as f64).collect())
                .expect("extents are valid")
        };
        (get(0), get(1))
    }
}

fn plane_of(t: &Tensor<f32>, what: &str) -> Result<Plane> {
    let d = t.dims();
    if d.len() != 2 {
        return Err(Error::shape(format!("{what} must be [H,W], got {d:?}")));
    }
    Plane::from_vec(d[1], d[0], t.to_f64_vec())
}

/// TV-L1 flow from grayscale `frame_a` to `frame_b`, both `[H, W]`; returns
/// `[2, H, W]`.
pub fn tvl1_flow(frame_a: &Tensor<f32>, frame_b: &Tensor<f32>, params: &TvL1Params) -> Result<Tensor<f32>> {
    let a = plane_of(frame_a, "frame_a")?;
    let b = plane_of(frame_b, "frame_b")?;
    let (u, v) = tvl1_planes(&a, &b, params)?;
    let data = u.data.iter().chain(&v.data).map(|&x| x as f32).collect();
    Tensor::from_vec(&[2, a.height, a.width], data)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowMeta {
    clip_id: String,
    params_hash: String,
}

pub fn cache_path(dir: &Path, clip_id: &str) -> PathBuf {
    dir.join(format!("{clip_id}.flow.bin"))
}

/// Reads `<dir>/<clip-id>.flow.bin` if it exists and was computed for this
/// clip with these parameters.
pub fn load_cached(dir: &Path, clip: &VideoClip, params: &TvL1Params) -> Option<FlowField> {
    let path = cache_path(dir, &clip.clip_id);
    if !path.is_file() {
        return None;
    }
    let dims = [clip.num_frames() - 1, 2, clip.height(), clip.width()];
    let hash = params.hash();
    let hit = container::read_file::<f32>(&path).ok().and_then(|c| {
        let meta: FlowMeta = serde_json::from_value(c.metadata).ok()?;
        let fresh = c.dims == dims && meta.clip_id == clip.clip_id && meta.params_hash == hash;
        fresh.then(|| FlowField::new(Tensor::from_vec(&dims, c.data).ok()?).ok()).flatten()
    });
    if hit.is_none() {
        log::debug!("ignoring stale flow cache {}", path.display());
    }
    hit
}

/// Flow fields for every consecutive frame pair of `clip`, computed on
/// channel-mean luminance. With a cache directory, a stored field with the
/// same clip id and parameter hash is reused; anything else is recomputed
/// and overwritten.
pub fn flows_for_clip(clip: &VideoClip, params: &TvL1Params, cache_dir: Option<&Path>) -> Result<FlowField> {
    params.validate()?;
    let t = clip.num_frames();
    if t < 2 {
        return Err(Error::input("flow needs at least 2 frames"));
    }
    let (h, w) = (clip.height(), clip.width());
    let dims = [t - 1, 2, h, w];
    if let Some(dir) = cache_dir {
        if let Some(hit) = load_cached(dir, clip, params) {
            return Ok(hit);
        }
    }
    let mut data = Vec::with_capacity((t - 1) * 2 * h * w);
    let mut prev = clip.luminance(0);
    for i in 1..t {
        let next = clip.luminance(i);
        let (u, v) = tvl1_planes(&prev, &next, params)?;
        data.extend(u.data.iter().chain(&v.data).map(|&x| x as f32));
        prev = next;
    }
    let field = FlowField::new(Tensor::from_vec(&dims, data)?)?;
    if let Some(dir) = cache_dir {
        let meta = FlowMeta {
            clip_id: clip.clip_id.clone(),
            params_hash: params.hash(),
        };
        container::write_file(&cache_path(dir, &clip.clip_id), &dims, field.flows.data(), &serde_json::to_value(meta)?)?;
    }
    Ok(field)
}
