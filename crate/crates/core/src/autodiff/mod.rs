//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so the node list is already a topological order and
//! [`Graph::backward`] simply walks it in reverse. Each recorded operation
//! carries a [`Backward`] rule that maps the upstream gradient to gradients
//! of its inputs, and contributions from several consumers of the same node
//! are summed.

mod gradcheck;
mod ops;
mod param;

pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport, ParamCheck};
pub use param::{ParamStore, Parameter};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward rule sees: its recorded inputs and output, the gradient
/// arriving at the output, and which inputs actually need a gradient.
pub struct BackwardContext<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    pub needs: Vec<bool>,
}

/// Gradient rule of one recorded operation.
///
/// Returns one entry per input; `None` is allowed wherever `needs` is false.
pub trait Backward<T: Real>: Send + Sync {
    fn backward(&self, cx: &BackwardContext<'_, T>) -> Result<Vec<Option<Tensor<T>>>>;
}

impl<T: Real, F> Backward<T> for F
where
    F: Fn(&BackwardContext<'_, T>) -> Result<Vec<Option<Tensor<T>>>> + Send + Sync,
{
    fn backward(&self, cx: &BackwardContext<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        self(cx)
    }
}

struct Node<T> {
    tag: &'static str,
    value: Tensor<T>,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

/// Scales the gradients produced by the first (in backward order) node with
/// a given tag. Exists so tests and the CLI can prove that gradcheck catches
/// a wrong backward rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradFault {
    pub tag: &'static str,
    pub factor: f64,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    fault: Option<GradFault>,
    kinks: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            fault: None,
            kinks: 0xcbf2_9ce4_8422_2325,
        }
    }

    /// A graph that stores values only. Used for inference.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
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

    pub fn inject_fault(&mut self, fault: GradFault) {
        self.fault = Some(fault);
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push("param", value, Vec::new(), None, self.grad_enabled)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push("constant", value, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].tag
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends an operation node. The rule is dropped when no input needs a
    /// gradient or the graph is in inference mode.
    pub fn record(
        &mut self,
        tag: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        rule: impl Backward<T> + 'static,
    ) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let rule: Option<Box<dyn Backward<T>>> = if requires_grad {
            Some(Box::new(rule))
        } else {
            None
        };
        self.push(tag, value, inputs.to_vec(), rule, requires_grad)
    }

    fn push(
        &mut self,
        tag: &'static str,
        value: Tensor<T>,
        inputs: Vec<Var>,
        rule: Option<Box<dyn Backward<T>>>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            tag,
            value,
            inputs,
            rule,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Folds the activation pattern of a non-smooth op into the graph's kink
    /// signature. Two evaluations with different signatures lie on different
    /// smooth pieces of the function.
    pub(crate) fn note_kinks(&mut self, active: impl Iterator<Item = bool>) {
        let mut h = self.kinks;
        for (i, a) in active.enumerate() {
            if a {
                h ^= i as u64 ^ 0x9e37_79b9;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        self.kinks = h.rotate_left(7).wrapping_mul(0x0100_0000_01b3);
    }

    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    /// Reverse sweep from a one-element loss. Every gradient-requiring leaf
    /// gets an entry, zero-filled when the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a one-element loss, got shape {}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.dims(), T::one())?);
        let mut fault = self.fault;
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let Some(rule) = &node.rule else {
                if node.requires_grad {
                    leaves[idx] = Some(grad);
                }
                continue;
            };
            let cx = BackwardContext {
                inputs: node.inputs.iter().map(|v| self.value(*v)).collect(),
                output: &node.value,
                grad: &grad,
                needs: node
                    .inputs
                    .iter()
                    .map(|v| self.nodes[v.0].requires_grad)
                    .collect(),
            };
            let mut input_grads = rule.backward(&cx)?;
            if input_grads.len() != node.inputs.len() {
                return Err(Error::invalid(format!(
                    "backward rule of '{}' returned {} gradients for {} inputs",
                    node.tag,
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            if let Some(f) = fault.filter(|f| f.tag == node.tag) {
                for g in input_grads.iter_mut().flatten() {
                    *g = g.scale(T::of_f64(f.factor));
                }
                fault = None;
            }
            for ((input, g), need) in node.inputs.iter().zip(input_grads).zip(cx.needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                if g.shape() != self.value(*input).shape() {
                    return Err(Error::shape(format!(
                        "backward rule of '{}' produced gradient {} for input {}",
                        node.tag,
                        g.shape(),
                        self.value(*input).shape()
                    )));
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if node.rule.is_none() && node.requires_grad && leaves[idx].is_none() {
                leaves[idx] = Some(Tensor::zeros(node.value.dims())?);
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_data(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let w = g.param(t(&[0.3, -2.0, 5.0]));
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_square_sum() {
        let mut g = Graph::new();
        let w = g.param(t(&[1.0, 2.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let w = g.param(t(&[1.0, 2.0]));
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let mut g = Graph::new();
        let a = g.param(t(&[1.0, 2.0]));
        let b = g.param(t(&[3.0]));
        let loss = g.sum(a);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn scaled_loss_scales_gradient() {
        let mut rng = Rng::new(4);
        let x = rng.normal_tensor::<f64>(&[6], 0.0, 1.0).unwrap();
        let run = |a: f64| {
            let mut g = Graph::new();
            let w = g.param(x.clone());
            let s = g.tanh(w);
            let m = g.mul(s, w).unwrap();
            let l = g.sum(m);
            let l = g.scale(l, a);
            g.backward(l).unwrap().get(w).unwrap().clone()
        };
        let base = run(1.0);
        let scaled = run(3.0);
        for (b, s) in base.data().iter().zip(scaled.data()) {
            assert!((3.0 * b - s).abs() <= 1e-15 * s.abs().max(1.0));
        }
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut g = Graph::new();
        let w = g.param(t(&[0.5, -1.5, 2.0]));
        let s = g.sigmoid(w);
        let p = g.mul(s, w).unwrap();
        let loss = g.sum(p);
        let a = g.backward(loss).unwrap().get(w).unwrap().clone();
        let b = g.backward(loss).unwrap().get(w).unwrap().clone();
        assert_eq!(a, b);
    }

    #[test]
    fn inference_graph_records_no_gradients() {
        let mut g = Graph::<f64>::inference();
        let w = g.param(t(&[1.0]));
        assert!(!g.requires_grad(w));
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(w).is_none());
    }

    #[test]
    fn fault_scales_one_rule() {
        let mut g = Graph::new();
        g.inject_fault(GradFault {
            tag: "sum",
            factor: 1.1,
        });
        let w = g.param(t(&[1.0, 2.0]));
        let loss = g.sum(w);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.1, 1.1]);
    }
}
