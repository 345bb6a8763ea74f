//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to tracked [`Var`]s together
//! with a closure that maps the output gradient to gradients for each
//! input. Tapes are cheap and single-threaded; parallel work creates one
//! tape per worker and reduces gradients afterwards.
//!
//! A tape built with [`Tape::no_grad`] records nothing, so intermediate
//! values are released as soon as their `Var` handles drop. Inference uses
//! that mode.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

/// A value on a tape. Constants carry no node id and receive no gradient.
#[derive(Clone, Debug)]
pub struct Var {
    id: Option<usize>,
    value: Rc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub(crate) fn rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }
}

pub struct Tape {
    record: bool,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            record: true,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn no_grad() -> Self {
        Self {
            record: false,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        if !self.record {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            id: Some(nodes.len() - 1),
            value: Rc::new(value),
        }
    }

    pub fn constant(&self, value: Tensor) -> Var {
        Var {
            id: None,
            value: Rc::new(value),
        }
    }

    /// Records an operation. `backward` receives the output gradient and
    /// returns one gradient per parent, in order.
    pub fn push(
        &self,
        value: Tensor,
        parents: &[&Var],
        backward: impl Fn(&Tensor) -> Vec<Tensor> + 'static,
    ) -> Var {
        if !self.record || parents.iter().all(|p| p.id.is_none()) {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: parents.iter().map(|p| p.id).collect(),
            backward: Some(Box::new(backward)),
        });
        Var {
            id: Some(nodes.len() - 1),
            value: Rc::new(value),
        }
    }

    /// Back-propagates from `output`, seeding it with ones.
    pub fn backward(&self, output: &Var) -> Gradients {
        let seed = Tensor::full(output.shape(), 1.0);
        self.backward_with(output, seed)
    }

    pub fn backward_with(&self, output: &Var, seed: Tensor) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let Some(root) = output.id else {
            return Gradients(grads);
        };
        grads[root] = Some(seed);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let parent_grads = bw(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (pid, pg) in node.parents.iter().zip(parent_grads) {
                    if let Some(pid) = *pid {
                        match &mut grads[pid] {
                            Some(acc) => acc.add_assign(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
        Gradients(grads)
    }
}

pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        var.id.and_then(|id| self.0.get(id).and_then(Option::as_ref))
    }

    /// Gradient of `var`, or zeros of its shape when it did not influence
    /// the output.
    pub fn get_or_zeros(&self, var: &Var) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}
