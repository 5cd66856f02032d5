//! Named parameter registry shared by layers, optimizers and checkpoints.

use std::collections::HashMap;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    /// Free per-channel logits of an input-independent gate.
    GateLogit,
    /// Non-learnable running statistic.
    Buffer,
}

impl ParamKind {
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::NormScale => "norm_scale",
            ParamKind::NormShift => "norm_shift",
            ParamKind::GateLogit => "gate_logit",
            ParamKind::Buffer => "buffer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "weight" => ParamKind::Weight,
            "bias" => ParamKind::Bias,
            "norm_scale" => ParamKind::NormScale,
            "norm_shift" => ParamKind::NormShift,
            "gate_logit" => ParamKind::GateLogit,
            "buffer" => ParamKind::Buffer,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    /// Frozen parameters are bound as constants and skipped by optimizers.
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn requires_grad(&self) -> bool {
        self.trainable && self.kind.is_learnable()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name {}", name)));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            kind,
            value,
            grad: None,
            trainable: true,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total element count of learnable tensors whose name starts with `prefix`.
    pub fn learnable_count(&self, prefix: &str) -> u64 {
        self.params
            .iter()
            .filter(|p| p.kind.is_learnable() && p.name.starts_with(prefix))
            .map(|p| p.value.len() as u64)
            .sum()
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Copies tape gradients of every bound, gradient-requiring parameter.
    pub fn store_grads(&mut self, binding: &Binding, tape: &Tape<T>, grads: &Gradients<T>) {
        for (i, slot) in binding.vars.iter().enumerate() {
            if let Some(v) = *slot {
                if self.params[i].requires_grad() {
                    self.params[i].grad = Some(grads.get_or_zeros(tape, v));
                }
            }
        }
    }

    /// Converts every tensor to another precision, keeping names and flags.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(|g| g.cast()),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Lazily places parameters on a tape as leaves, once per forward pass.
#[derive(Debug, Clone, Default)]
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    pub fn new() -> Self {
        Binding { vars: Vec::new() }
    }

    pub fn var<T: Scalar>(&mut self, tape: &mut Tape<T>, store: &ParamStore<T>, id: ParamId) -> Var {
        if self.vars.len() < store.len() {
            self.vars.resize(store.len(), None);
        }
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = store.get(id);
        let v = tape.leaf(p.value.clone(), p.requires_grad());
        self.vars[id.0] = Some(v);
        v
    }

    pub fn get(&self, id: ParamId) -> Option<Var> {
        self.vars.get(id.0).copied().flatten()
    }
}
