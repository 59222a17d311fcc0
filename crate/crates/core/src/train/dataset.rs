use std::collections::BTreeSet;
use std::path::Path;

use crate::data::{DatasetManifest, Domain, Split, VideoClip};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::flow::{flows_for_clip, load_cached, FlowField, TvL1Params};
use crate::tensor::Tensor;

/// Directory name for flow caches, both inside a dataset and a run.
pub const FLOW_DIR: &str = "flows";

#[derive(Debug, Clone)]
pub struct Sample {
    pub clip: VideoClip,
    pub split: Split,
    pub flow: Option<FlowField>,
}

/// What the network sees as input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    #[default]
    Rgb,
    /// Stacked TV-L1 fields `[T-1, 2, H, W]`.
    Flow,
}

impl Modality {
    pub fn label(self) -> &'static str {
        match self {
            Modality::Rgb => "RGB",
            Modality::Flow => "Flow",
        }
    }
}

/// Clips held in memory, optionally with their flow targets.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let samples = manifest
            .entries
            .iter()
            .map(|e| {
                Ok(Sample {
                    clip: manifest.read_clip(e)?,
                    split: e.split,
                    flow: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    pub fn from_clips(clips: Vec<(VideoClip, Split)>) -> Self {
        Self {
            samples: clips.into_iter().map(|(clip, split)| Sample { clip, split, flow: None }).collect(),
        }
    }

    /// Fills in flow fields for the listed samples. Valid entries under
    /// `read_dir` are reused; everything else is computed and, with a
    /// `write_dir`, cached there.
    pub fn attach_flows(
        &mut self,
        indices: &[usize],
        params: &TvL1Params,
        read_dir: Option<&Path>,
        write_dir: Option<&Path>,
    ) -> Result<()> {
        for &i in indices {
            let s = &mut self.samples[i];
            if s.flow.is_some() {
                continue;
            }
            let cached = read_dir.and_then(|d| load_cached(d, &s.clip, params));
            s.flow = Some(match cached {
                Some(f) => f,
                None => flows_for_clip(&s.clip, params, write_dir)?,
            });
        }
        Ok(())
    }

    /// Indices in `split`, optionally restricted to one domain, in storage order.
    pub fn indices(&self, split: Split, domain: Option<Domain>) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split && domain.is_none_or(|d| s.clip.domain == d))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn domains(&self) -> BTreeSet<Domain> {
        self.samples.iter().map(|s| s.clip.domain).collect()
    }

    /// Clip geometry `(T, H, W)`, which must be shared by all samples.
    pub fn geometry(&self) -> Result<(usize, usize, usize)> {
        let first = self.samples.first().ok_or_else(|| Error::input("dataset is empty"))?;
        let g = (first.clip.num_frames(), first.clip.height(), first.clip.width());
        for s in &self.samples {
            if (s.clip.num_frames(), s.clip.height(), s.clip.width()) != g {
                return Err(Error::Data(format!("clip {} has a different geometry", s.clip.clip_id)));
            }
        }
        Ok(g)
    }
}

/// Stacked tensors for one batch of samples.
#[derive(Debug, Clone)]
pub struct Batch<T: Element> {
    pub clip_ids: Vec<String>,
    pub labels: Vec<usize>,
    /// `[N, T, 3, H, W]` or `[N, T-1, 2, H, W]`, depending on modality.
    pub input: Tensor<T>,
    pub flows: Option<Tensor<T>>,
    pub reversed_frames: Option<Tensor<T>>,
}

fn flow_of(s: &Sample) -> Result<&FlowField> {
    s.flow
        .as_ref()
        .ok_or_else(|| Error::Data(format!("missing flow target for clip {}", s.clip.clip_id)))
}

fn stack<T: Element>(parts: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::input("empty batch"))?;
    let mut dims = vec![parts.len()];
    dims.extend_from_slice(first.dims());
    let mut data = Vec::with_capacity(parts.len() * first.numel());
    for p in parts {
        if p.dims() != first.dims() {
            return Err(Error::shape(format!("batch items differ: {:?} vs {:?}", p.dims(), first.dims())));
        }
        data.extend(p.data().iter().map(|&v| T::of(v as f64)));
    }
    Tensor::from_vec(&dims, data)
}

impl<T: Element> Batch<T> {
    /// Builds a batch; `need_flows` and `need_frames` request decoder targets.
    pub fn assemble(
        data: &Dataset,
        indices: &[usize],
        modality: Modality,
        need_flows: bool,
        need_frames: bool,
    ) -> Result<Self> {
        let samples: Vec<&Sample> = indices.iter().map(|&i| &data.samples[i]).collect();
        let input = match modality {
            Modality::Rgb => stack(&samples.iter().map(|s| &s.clip.frames).collect::<Vec<_>>())?,
            Modality::Flow => stack(&samples.iter().map(|s| Ok(&flow_of(s)?.flows)).collect::<Result<Vec<_>>>()?)?,
        };
        let flows = if need_flows {
            Some(stack(&samples.iter().map(|s| Ok(&flow_of(s)?.flows)).collect::<Result<Vec<_>>>()?)?)
        } else {
            None
        };
        let reversed_frames = if need_frames {
            let rev: Vec<Tensor<f32>> = samples.iter().map(|s| s.clip.reversed_frames()).collect();
            Some(stack(&rev.iter().collect::<Vec<_>>())?)
        } else {
            None
        };
        Ok(Self {
            clip_ids: samples.iter().map(|s| s.clip.clip_id.clone()).collect(),
            labels: samples.iter().map(|s| s.clip.label).collect(),
            input,
            flows,
            reversed_frames,
        })
    }
}
