use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Process-unique identity of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

static NEXT_PARAM: AtomicU64 = AtomicU64::new(1);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named trainable tensor with its persistent gradient slot.
///
/// The slot is allocated once at construction and accumulated into by
/// [`Gradients::accumulate`]; callers zero it between steps.
pub struct Param<F: Float> {
    id: ParamId,
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

impl<F: Float> Param<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            id: ParamId::fresh(),
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}

impl<F: Float> Clone for Param<F> {
    /// Deep copy with a fresh identity.
    fn clone(&self) -> Self {
        let mut value = self.value.clone();
        value.data_mut();
        let mut grad = self.grad.clone();
        grad.data_mut();
        Self {
            id: ParamId::fresh(),
            name: self.name.clone(),
            value,
            grad,
        }
    }
}

impl<F: Float> std::fmt::Debug for Param<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, {:?})", self.name, self.value.shape())
    }
}

/// Anything that owns parameters, visited in declaration order.
pub trait Module<F: Float> {
    fn params<'a>(&'a self, out: &mut Vec<&'a Param<F>>);
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>);

    fn param_list(&self) -> Vec<&Param<F>> {
        let mut out = Vec::new();
        self.params(&mut out);
        out
    }

    fn param_list_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = Vec::new();
        self.params_mut(&mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.param_list().iter().map(|p| p.numel()).sum()
    }

    fn zero_grad(&mut self) {
        for p in self.param_list_mut() {
            p.zero_grad();
        }
    }
}

/// Backward rule: upstream gradient plus a per-input "needs grad" mask in,
/// one optional gradient per input out.
pub(crate) type BackwardFn<F> =
    Box<dyn FnOnce(&Tensor<F>, &[bool]) -> Result<Vec<Option<Tensor<F>>>>>;

struct Node<F: Float> {
    value: Tensor<F>,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<F>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Linear record of a forward computation. Operations are appended in
/// execution order, so every node's inputs precede it.
pub struct Tape<F: Float> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
    kinks: Option<u64>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            kinks: None,
        }
    }

    /// A tape that never records backward rules (inference).
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
            kinks: None,
        }
    }

    /// Fold the on/off state of every ReLU unit into a running hash, so two
    /// evaluations can be compared for a crossed kink.
    pub fn track_kinks(mut self) -> Self {
        self.kinks = Some(0xcbf2_9ce4_8422_2325);
        self
    }

    /// Hash of the ReLU activation pattern so far, when tracking.
    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks
    }

    pub(crate) fn record_kinks(&mut self, active: impl Iterator<Item = bool>) {
        if let Some(h) = self.kinks.as_mut() {
            for a in active {
                *h = (*h ^ (a as u64 + 1)).wrapping_mul(0x0100_0000_01b3);
            }
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_node(&mut self, node: Node<F>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_node(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        let requires_grad = self.grad_enabled;
        self.push_node(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            param: None,
        })
    }

    /// Bind a parameter as a leaf. Shares its storage; no copy.
    pub fn param(&mut self, p: &Param<F>) -> Var {
        let requires_grad = self.grad_enabled;
        self.push_node(Node {
            value: p.value.clone(),
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            param: Some(p.id),
        })
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record an operation result. The backward rule is dropped immediately
    /// (freeing whatever it captured) when no input needs a gradient.
    pub(crate) fn push(
        &mut self,
        value: Tensor<F>,
        inputs: &[Var],
        backward: impl FnOnce(&Tensor<F>, &[bool]) -> Result<Vec<Option<Tensor<F>>>> + 'static,
    ) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward: Option<BackwardFn<F>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_node(Node {
            value,
            inputs: inputs.to_vec(),
            backward,
            requires_grad,
            param: None,
        })
    }

    /// Reverse-mode sweep from a scalar. Consumes the tape; each node's value,
    /// saved context and gradient are released as soon as it is processed.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        self.sweep(loss, HashMap::new())
    }

    /// As [`Tape::backward`], but gradients of `params` are added into their
    /// slots the moment they are complete instead of being collected.
    pub fn backward_into<'a>(
        self,
        loss: Var,
        params: impl IntoIterator<Item = &'a mut Param<F>>,
    ) -> Result<Gradients<F>>
    where
        F: 'a,
    {
        let sinks = params.into_iter().map(|p| (p.id, p)).collect();
        self.sweep(loss, sinks)
    }

    fn sweep(self, loss: Var, mut sinks: HashMap<ParamId, &mut Param<F>>) -> Result<Gradients<F>> {
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {loss_shape:?}"
            )));
        }
        let mut nodes = self.nodes;
        nodes.truncate(loss.0 + 1);
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(&loss_shape));
        let mut out = Gradients {
            leaves: HashMap::new(),
            params: HashMap::new(),
        };

        while let Some(node) = nodes.pop() {
            let idx = nodes.len();
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let Node {
                value,
                inputs,
                backward,
                param,
                ..
            } = node;
            drop(value);
            match backward {
                Some(rule) => {
                    let needs: Vec<bool> = inputs.iter().map(|v| nodes[v.0].requires_grad).collect();
                    let input_grads = rule(&grad, &needs)?;
                    drop(grad);
                    debug_assert_eq!(input_grads.len(), inputs.len());
                    for ((input, g), need) in inputs.iter().zip(input_grads).zip(needs) {
                        let Some(g) = g else { continue };
                        if !need {
                            continue;
                        }
                        match &mut grads[input.0] {
                            Some(acc) => acc.add_assign(&g)?,
                            slot => *slot = Some(g),
                        }
                    }
                }
                None => match param {
                    Some(id) if sinks.contains_key(&id) => {
                        if let Some(p) = sinks.get_mut(&id) {
                            p.grad.add_assign(&grad)?;
                        }
                    }
                    Some(id) => match out.params.get_mut(&id) {
                        Some(acc) => acc.add_assign(&grad)?,
                        None => {
                            out.params.insert(id, grad);
                        }
                    },
                    None => {
                        out.leaves.insert(idx, grad);
                    }
                },
            }
        }
        Ok(out)
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients<F: Float> {
    leaves: HashMap<usize, Tensor<F>>,
    params: HashMap<ParamId, Tensor<F>>,
}

impl<F: Float> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, p: &Param<F>) -> Option<&Tensor<F>> {
        self.params.get(&p.id)
    }

    /// Add parameter gradients into each parameter's slot.
    pub fn accumulate<'a>(&self, params: impl IntoIterator<Item = &'a mut Param<F>>) -> Result<()> {
        for p in params {
            if let Some(g) = self.params.get(&p.id) {
                p.grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}
