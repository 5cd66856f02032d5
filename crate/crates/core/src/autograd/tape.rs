use crate::error::{Error, Result};
use crate::tensor::{shape_str, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of one recorded operation.
///
/// `inputs` and `output` are the forward values; `grad` is the upstream
/// gradient with the output's shape. The rule returns one entry per input,
/// and may return `None` for inputs whose `needs` flag is false.
pub trait Backward<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;

    /// Branch taken by each element of a piecewise operation, such as the
    /// ReLU sign mask or the max-pool argmax. Smooth operations return `None`.
    fn branch_pattern(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>) -> Option<Vec<usize>> {
        None
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
}

/// Records operations in execution order; every node's inputs precede it.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the operation that produced `v`, or `None` for leaves.
    pub fn op_name(&self, v: Var) -> Option<&'static str> {
        self.nodes[v.0].op.as_ref().map(|op| op.name())
    }

    /// Records an operation. Public so callers can register custom rules.
    pub fn push_op(&mut self, output: Tensor<T>, inputs: &[Var], op: Box<dyn Backward<T>>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: output,
            requires_grad,
            inputs: inputs.to_vec(),
            op: if requires_grad { Some(op) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Hash of the branch patterns of every recorded piecewise operation.
    /// Two evaluations with equal signatures lie in the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                if let Some(p) = op.branch_pattern(&inputs, &node.value) {
                    p.hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::shape("backward", "scalar loss", shape_str(lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new_unchecked(lv.shape().to_vec(), vec![T::one()]));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let op = match &node.op {
                Some(op) => op,
                None => continue,
            };
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let input_grads = op.backward(&inputs, &node.value, &g, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for ((v, ig), need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                let ig = match ig {
                    Some(ig) if *need => ig,
                    _ => continue,
                };
                debug_assert_eq!(ig.shape(), self.nodes[v.0].value.shape(), "{}", op.name());
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Result of a backward sweep, indexed by [`Var`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape if `v` was unreachable.
    pub fn get_or_zeros(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| tape.value(v).zeros_like())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
