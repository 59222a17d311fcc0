//! N-dimensional tensors with reverse-mode automatic differentiation.
//!
//! Data is stored row-major. A tensor becomes differentiable by
//! [`Tape::track`]; every op whose inputs include a tracked tensor appends a
//! record to that tape, and [`Tensor::backward`] replays the records in
//! reverse.

mod gradcheck;
mod ops;
mod tape;

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::seed;

pub use gradcheck::finite_diff_check;
pub use ops::{ElementwiseOp, ReduceOp};
pub use tape::{RecordInfo, Tape};
pub(crate) use tape::{BackwardFn, Node};

/// Extents of a tensor, outermost first.
#[derive(Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::shape("shape must have at least one extent"));
        }
        if let Some(i) = dims.iter().position(|&d| d == 0) {
            return Err(Error::shape(format!("extent {i} of {dims:?} is zero")));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Fill rule for [`Tensor::create`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    Uniform { lo: f64, hi: f64, seed: u64 },
    Gaussian { mean: f64, std: f64, seed: u64 },
}

#[derive(Clone)]
pub(crate) struct Var<T: Element> {
    pub(crate) tape: Tape<T>,
    pub(crate) id: usize,
}

/// An immutable n-dimensional array, optionally linked to a [`Tape`].
#[derive(Clone)]
pub struct Tensor<T: Element> {
    shape: Shape,
    data: Arc<Vec<T>>,
    var: Option<Var<T>>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("tracked", &self.var.is_some())
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    pub fn create(dims: &[usize], init: Init) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.numel();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Constant(v) => vec![T::of(v); n],
            Init::Uniform { lo, hi, seed } => {
                if !(lo < hi) {
                    return Err(Error::input(format!("uniform range [{lo}, {hi}) is empty")));
                }
                let dist = Uniform::new(lo, hi).map_err(|e| Error::input(e.to_string()))?;
                let mut rng = seed::rng(seed);
                (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
            }
            Init::Gaussian { mean, std, seed } => {
                let dist = Normal::new(mean, std).map_err(|e| Error::input(e.to_string()))?;
                let mut rng = seed::rng(seed);
                (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
            }
        };
        Ok(Self::raw(shape, data))
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::create(dims, Init::Zeros)
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                dims,
                shape.numel(),
                data.len()
            )));
        }
        Ok(Self::raw(shape, data))
    }

    pub fn from_f64(dims: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(dims, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Self::raw(Shape(vec![1]), vec![v])
    }

    /// Draws standard-normal samples from an existing RNG.
    pub fn standard_normal<R: Rng>(dims: &[usize], rng: &mut R) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let dist = Normal::new(0.0, 1.0).expect("unit normal");
        let data = (0..shape.numel()).map(|_| T::of(dist.sample(rng))).collect();
        Ok(Self::raw(shape, data))
    }

    pub(crate) fn raw(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Self {
            shape,
            data: Arc::new(data),
            var: None,
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::shape(format!("item() on shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn is_tracked(&self) -> bool {
        self.var.is_some()
    }

    pub fn tape(&self) -> Option<&Tape<T>> {
        self.var.as_ref().map(|v| &v.tape)
    }

    /// Copy of the data with no tape link.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            var: None,
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor::raw(
            self.shape.clone(),
            self.data.iter().map(|v| U::of(v.f64())).collect(),
        )
    }

    /// Accumulated gradient of a tracked leaf; `None` before any backward
    /// pass reached it, and always `None` for untracked tensors.
    pub fn grad(&self) -> Option<Vec<T>> {
        let var = self.var.as_ref()?;
        var.tape.leaf_grad(var.id)
    }

    /// Reverse pass from this scalar. Gradients accumulate on leaves across
    /// repeated calls until [`Tape::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.shape.dims() != [1] {
            return Err(Error::shape(format!(
                "backward needs a scalar of shape [1], got {:?}",
                self.shape
            )));
        }
        let var = self.var.as_ref().ok_or(Error::NoTape)?;
        var.tape.backward_from(var.id)
    }

    /// Builds an op output, recording it on the inputs' tape when any input
    /// is tracked.
    pub(crate) fn from_op<F>(
        op: &'static str,
        inputs: &[&Tensor<T>],
        shape: Shape,
        data: Vec<T>,
        backward: F,
    ) -> Result<Tensor<T>>
    where
        F: Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    {
        let mut tape: Option<&Tape<T>> = None;
        for t in inputs {
            if let Some(v) = &t.var {
                match tape {
                    None => tape = Some(&v.tape),
                    Some(existing) if !existing.same_as(&v.tape) => {
                        return Err(Error::TapeMismatch)
                    }
                    _ => {}
                }
            }
        }
        let mut out = Tensor::raw(shape, data);
        if let Some(tape) = tape {
            let id = tape.push(Node {
                op,
                len: out.numel(),
                inputs: inputs.iter().map(|t| t.var.as_ref().map(|v| v.id)).collect(),
                backward: Some(Box::new(backward) as BackwardFn<T>),
            });
            out.var = Some(Var {
                tape: tape.clone(),
                id,
            });
        }
        Ok(out)
    }
}

impl<T: Element> Tape<T> {
    /// Registers a copy of `t` as a differentiable leaf on this tape.
    pub fn track(&self, t: &Tensor<T>) -> Tensor<T> {
        let id = self.push(Node {
            op: "leaf",
            len: t.numel(),
            inputs: Vec::new(),
            backward: None,
        });
        Tensor {
            shape: t.shape.clone(),
            data: Arc::clone(&t.data),
            var: Some(Var {
                tape: self.clone(),
                id,
            }),
        }
    }
}
