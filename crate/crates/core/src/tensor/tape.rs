use std::cell::RefCell;
use std::rc::Rc;

use super::Tensor;
use crate::error::{shape_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink<'_>)>;

struct Node {
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

/// Gradient buffers handed to backward closures. Buffers are allocated on
/// first touch; nodes that do not need a gradient yield `None`.
pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    sizes: &'a [usize],
    needs: &'a [bool],
}

impl GradSink<'_> {
    pub fn get(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.needs[v.0] {
            return None;
        }
        let size = self.sizes[v.0];
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; size]))
    }
}

/// Records operations in execution order. Single-threaded by construction.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf; differentiable when `t.requires_grad` is set.
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push_leaf(t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    pub fn variable(&self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        check_len("variable", shape, data.len())?;
        Ok(self.push_leaf(shape.to_vec(), data, true))
    }

    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        check_len("constant", shape, data.len())?;
        Ok(self.push_leaf(shape.to_vec(), data, false))
    }

    fn push_leaf(&self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value: Rc::new(data),
            needs_grad,
            backward: None,
        });
        Var(nodes.len() - 1)
    }

    pub(crate) fn push_op(
        &self,
        shape: Vec<usize>,
        value: Vec<f64>,
        inputs: &[Var],
        backward: impl Fn(&[f64], &mut GradSink<'_>) + 'static,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = inputs.iter().any(|v| nodes[v.0].needs_grad);
        nodes.push(Node {
            shape,
            value: Rc::new(value),
            needs_grad,
            backward: needs_grad.then(|| Box::new(backward) as BackwardFn),
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Vec<f64>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub(crate) fn get(&self, v: Var) -> (Rc<Vec<f64>>, Vec<usize>) {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        (Rc::clone(&n.value), n.shape.clone())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Value of a recorded node as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let (value, shape) = self.get(v);
        Tensor {
            shape,
            data: value.as_ref().clone(),
            grad: self.grad(v),
            requires_grad: self.requires_grad(v),
        }
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[0]
    }

    /// Reverse sweep from a scalar `root`, seeding its gradient with one.
    /// Gradients accumulate across calls.
    pub fn backward(&self, root: Var) -> Result<()> {
        let seed = {
            let nodes = self.nodes.borrow();
            let n = nodes[root.0].value.len();
            if n != 1 {
                return Err(shape_err("backward", format!("root has {n} entries, expected 1")));
            }
            vec![1.0]
        };
        self.backward_with(root, seed)
    }

    /// Reverse sweep from `root` with an explicit output gradient.
    pub fn backward_with(&self, root: Var, seed: Vec<f64>) -> Result<()> {
        let nodes = self.nodes.borrow();
        if seed.len() != nodes[root.0].value.len() {
            return Err(shape_err("backward_with", "seed length differs from root"));
        }
        let sizes: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();
        let needs: Vec<bool> = nodes.iter().map(|n| n.needs_grad).collect();
        let mut grads = self.grads.borrow_mut();
        grads.resize(nodes.len(), None);
        match &mut grads[root.0] {
            Some(g) => g.iter_mut().zip(&seed).for_each(|(a, b)| *a += b),
            slot => *slot = Some(seed),
        }
        for i in (0..=root.0).rev() {
            let Some(backward) = &nodes[i].backward else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let mut sink = GradSink {
                grads: &mut grads,
                sizes: &sizes,
                needs: &needs,
            };
            backward(&g, &mut sink);
            grads[i] = Some(g);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<Vec<f64>> {
        self.grads.borrow().get(v.0).and_then(|g| g.clone())
    }
}

fn check_len(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != len {
        return Err(shape_err(op, format!("shape {shape:?} needs {n} values, got {len}")));
    }
    Ok(())
}
