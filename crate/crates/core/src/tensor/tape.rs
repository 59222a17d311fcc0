//! Define-by-run reverse-mode tape.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::element::Element;
use crate::error::{Error, Result};

/// Backward rule: receives the output gradient and a mask of which inputs
/// are tracked, returns one optional gradient per input.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

pub(crate) struct Node<T> {
    pub(crate) op: &'static str,
    pub(crate) len: usize,
    pub(crate) inputs: Vec<Option<usize>>,
    /// `None` marks a leaf.
    pub(crate) backward: Option<BackwardFn<T>>,
}

struct TapeInner<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: HashMap<usize, Vec<T>>,
}

/// Records operations on tracked tensors so gradients can be replayed in
/// reverse. A tape is single-threaded and is meant to be rebuilt for every
/// training step.
pub struct Tape<T: Element> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Element> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Summary of one tape record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordInfo {
    pub op: &'static str,
    pub inputs: Vec<usize>,
    pub output: usize,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                leaf_grads: HashMap::new(),
            })),
        }
    }

    pub fn same_as(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<RecordInfo> {
        self.inner
            .borrow()
            .nodes
            .iter()
            .enumerate()
            .map(|(id, n)| RecordInfo {
                op: n.op,
                inputs: n.inputs.iter().flatten().copied().collect(),
                output: id,
            })
            .collect()
    }

    pub(crate) fn push(&self, node: Node<T>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    pub(crate) fn leaf_grad(&self, id: usize) -> Option<Vec<T>> {
        self.inner.borrow().leaf_grads.get(&id).cloned()
    }

    /// Drops all accumulated leaf gradients.
    pub fn zero_grad(&self) {
        self.inner.borrow_mut().leaf_grads.clear();
    }

    /// Propagates d(root)/d(root) = 1 back to every leaf reachable from
    /// `root`. Leaf gradients accumulate across calls; intermediate
    /// gradients are discarded.
    pub(crate) fn backward_from(&self, root: usize) -> Result<()> {
        let mut guard = self.inner.borrow_mut();
        let TapeInner { nodes, leaf_grads } = &mut *guard;
        if root >= nodes.len() {
            return Err(Error::NoTape);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(vec![T::one(); nodes[root].len]);

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                None => match leaf_grads.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    None => {
                        leaf_grads.insert(id, g);
                    }
                },
                Some(rule) => {
                    let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
                    let input_grads = rule(&g, &needs);
                    debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
                    for (input, ig) in node.inputs.iter().zip(input_grads) {
                        let (Some(pid), Some(ig)) = (input, ig) else { continue };
                        debug_assert_eq!(ig.len(), nodes[*pid].len, "op {}", node.op);
                        match &mut grads[*pid] {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += *b),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
