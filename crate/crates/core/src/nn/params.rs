//! Named parameter collections, He initialization and checkpoint I/O.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Init, Tape, Tensor};

/// Shape and fan-in of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub weight_dims: Vec<usize>,
    pub bias_len: usize,
    pub fan_in: usize,
    /// Multiplier on the He standard deviation.
    pub gain: f64,
}

#[derive(Debug, Clone)]
pub struct Param<T: Element> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Param<T> {
    pub fn numel(&self) -> usize {
        self.weights.numel() + self.bias.numel()
    }
}

/// Layer name -> parameters, iterated in name order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T: Element> {
    entries: BTreeMap<String, Param<T>>,
}

#[derive(Serialize, Deserialize)]
struct Slot {
    offset: usize,
    dims: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    weights: Slot,
    bias: Slot,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    kind: String,
    entries: Vec<IndexEntry>,
}

const INDEX_KIND: &str = "rev2net-params";

/// He-gaussian weights (`std = gain * sqrt(2 / fan_in)`), zero biases. Each layer
/// draws from a stream derived from `(seed, layer name)`.
pub fn init_params<T: Element>(specs: &[ParamSpec], seed: u64) -> Result<ParamSet<T>> {
    let mut set = ParamSet::default();
    for spec in specs {
        if spec.fan_in == 0 {
            return Err(Error::input(format!("layer {} has zero fan-in", spec.name)));
        }
        let std = spec.gain * (2.0 / spec.fan_in as f64).sqrt();
        let weights = Tensor::create(
            &spec.weight_dims,
            Init::Gaussian {
                mean: 0.0,
                std,
                seed: seed::child_seed(seed, &spec.name),
            },
        )?;
        let bias = Tensor::zeros(&[spec.bias_len])?;
        set.insert(&spec.name, Param { weights, bias })?;
    }
    Ok(set)
}

impl<T: Element> ParamSet<T> {
    pub fn insert(&mut self, name: &str, param: Param<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::input(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name.to_string(), param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::input(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Param::numel).sum()
    }

    /// Keeps only layers whose name satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Copies of every tensor registered as leaves on `tape`.
    pub fn track(&self, tape: &Tape<T>) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            weights: tape.track(&p.weights),
                            bias: tape.track(&p.bias),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Applies `f` to every tensor (name, is_bias, tensor) to produce a new set.
    pub fn map(&self, mut f: impl FnMut(&str, bool, &Tensor<T>) -> Result<Tensor<T>>) -> Result<ParamSet<T>> {
        let mut out = ParamSet::default();
        for (k, p) in &self.entries {
            let weights = f(k, false, &p.weights)?;
            let bias = f(k, true, &p.bias)?;
            if weights.dims() != p.weights.dims() || bias.dims() != p.bias.dims() {
                return Err(Error::shape(format!("map changed the shape of {k}")));
            }
            out.insert(k, Param { weights, bias })?;
        }
        Ok(out)
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            weights: p.weights.cast(),
                            bias: p.bias.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Bitwise equality of all names, shapes and values.
    pub fn bitwise_eq(&self, other: &ParamSet<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.weights.dims() == b.weights.dims()
                    && a.bias.dims() == b.bias.dims()
                    && a.weights.data().iter().zip(b.weights.data()).all(|(x, y)| x.to_bits_eq(*y))
                    && a.bias.data().iter().zip(b.bias.data()).all(|(x, y)| x.to_bits_eq(*y))
            })
    }

    /// Writes every tensor concatenated into one rank-1 `RV2N` container
    /// whose metadata indexes names to offsets and shapes.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut flat = Vec::with_capacity(self.numel());
        let mut entries = Vec::with_capacity(self.entries.len());
        for (name, p) in &self.entries {
            let w = Slot {
                offset: flat.len(),
                dims: p.weights.dims().to_vec(),
            };
            flat.extend_from_slice(p.weights.data());
            let b = Slot {
                offset: flat.len(),
                dims: p.bias.dims().to_vec(),
            };
            flat.extend_from_slice(p.bias.data());
            entries.push(IndexEntry {
                name: name.clone(),
                weights: w,
                bias: b,
            });
        }
        if flat.is_empty() {
            return Err(Error::input("cannot save an empty parameter set"));
        }
        let index = Index {
            kind: INDEX_KIND.to_string(),
            entries,
        };
        container::write_file(path, &[flat.len()], &flat, &json!(index))
    }

    pub fn load(path: &Path) -> Result<ParamSet<T>> {
        let c = container::read_file::<T>(path)?;
        if c.dims.len() != 1 {
            return Err(Error::format("extents", "parameter payload must be rank 1"));
        }
        let index: Index = serde_json::from_value(c.metadata)
            .map_err(|e| Error::format("metadata", e.to_string()))?;
        if index.kind != INDEX_KIND {
            return Err(Error::format("metadata", format!("unexpected kind {}", index.kind)));
        }
        let take = |slot: &Slot| -> Result<Tensor<T>> {
            let n: usize = slot.dims.iter().product();
            let end = slot
                .offset
                .checked_add(n)
                .filter(|&e| e <= c.data.len())
                .ok_or_else(|| Error::format("metadata", "index slot outside payload"))?;
            Tensor::from_vec(&slot.dims, c.data[slot.offset..end].to_vec())
        };
        let mut set = ParamSet::default();
        for e in &index.entries {
            set.insert(
                &e.name,
                Param {
                    weights: take(&e.weights)?,
                    bias: take(&e.bias)?,
                },
            )?;
        }
        Ok(set)
    }
}

trait BitsEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Element> BitsEq for T {
    fn to_bits_eq(self, other: Self) -> bool {
        self.f64().to_bits() == other.f64().to_bits()
    }
}
