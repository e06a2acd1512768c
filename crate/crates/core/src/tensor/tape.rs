//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation evaluates eagerly, appends its output to the tape and,
//! when recording and at least one input needs a gradient, a closure that
//! maps the output gradient back onto the inputs. [`Tape::backward`] walks
//! the tape once in reverse, accumulating gradients additively.

use super::kernels;
use super::{Element, Tensor};
use crate::error::{Result, StmError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<E> = Box<dyn Fn(&Tensor<E>, &[bool]) -> Vec<Option<Tensor<E>>> + Send>;

struct Node<E> {
    value: Tensor<E>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<E>>,
}

pub struct Tape<E = f32> {
    nodes: Vec<Node<E>>,
    recording: bool,
    deterministic: bool,
}

/// Gradients of a scalar with respect to every leaf that requires one.
pub struct Gradients<E = f32> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, var: Var) -> Option<&Tensor<E>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<E>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    /// A recording tape.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
            deterministic: false,
        }
    }

    /// A tape that evaluates operations without keeping backward closures.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    /// In deterministic mode matrix products use a fixed-order `f64`
    /// reduction instead of the blocked kernel.
    pub fn with_deterministic(mut self, deterministic: bool) -> Self {
        self.deterministic = deterministic;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad: requires_grad && self.recording,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, var: Var) -> &Tensor<E> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push<F>(&mut self, value: Tensor<E>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&Tensor<E>, &[bool]) -> Vec<Option<Tensor<E>>> + Send + 'static,
    {
        let requires_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<E>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(StmError::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), E::one())?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&grad, &needs);
            for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let (Some(g), true) = (g, need) else {
                    continue;
                };
                debug_assert_eq!(g.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !(node.requires_grad && node.backward.is_none()) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, &[a, b], |g, _| {
            vec![Some(g.clone()), Some(g.scale(-E::one()))]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let out = av.mul(&bv)?;
        Ok(self.push(out, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| g.mul(&bv).expect("shape checked in forward")),
                needs[1].then(|| g.mul(&av).expect("shape checked in forward")),
            ]
        }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let s = E::of(factor);
        let out = self.value(a).scale(s);
        Ok(self.push(out, &[a], move |g, _| vec![Some(g.scale(s))]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).relu();
        let mask = out.clone();
        Ok(self.push(out, &[a], move |g, _| {
            let grad = g
                .zip_map(&mask, |gv, y| if y > E::zero() { gv } else { E::zero() })
                .expect("shape checked in forward");
            vec![Some(grad)]
        }))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(E::of(x.sum()));
        Ok(self.push(out, &[a], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()).expect("valid shape"))]
        }))
    }

    /// Mean of one-element tensors.
    pub fn mean_scalars(&mut self, items: &[Var]) -> Result<Var> {
        let (first, rest) = items
            .split_first()
            .ok_or_else(|| StmError::invalid("mean of an empty list"))?;
        let mut total = *first;
        for &v in rest {
            total = self.add(total, v)?;
        }
        self.scale(total, 1.0 / items.len() as f64)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let det = self.deterministic;
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let out = kernels::matmul(&av, &bv, det)?;
        Ok(self.push(out, &[a, b], move |g, needs| {
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let gv = kernels::MatView::row_major(g.data(), m, n);
            let da = needs[0].then(|| {
                let mut out = vec![E::zero(); m * k];
                let bt = kernels::MatView::row_major(bv.data(), k, n).t();
                kernels::gemm_into(gv, bt, &mut out, false, det);
                Tensor::from_parts(vec![m, k], out)
            });
            let db = needs[1].then(|| {
                let mut out = vec![E::zero(); k * n];
                let at = kernels::MatView::row_major(av.data(), m, k).t();
                kernels::gemm_into(at, gv, &mut out, false, det);
                Tensor::from_parts(vec![k, n], out)
            });
            vec![da, db]
        }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = kernels::softmax(self.value(x), axis)?;
        let y = out.clone();
        Ok(self.push(out, &[x], move |g, _| {
            vec![Some(kernels::softmax_backward(&y, g, axis))]
        }))
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.value(x).clone();
        let wv = self.value(weight).clone();
        let bv = bias.map(|b| self.value(b).clone());
        let geometry = kernels::conv_geometry(&xv, &wv, bv.as_ref(), stride, pad)?;
        let (out, cols) = kernels::conv2d(&xv, &wv, bv.as_ref(), stride, pad)?;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.push(out, &parents, move |g, needs| {
            let grads = kernels::conv2d_backward(&geometry, &xv, &wv, cols.as_deref(), g, needs[0]);
            let mut out = vec![grads.input, Some(grads.weight)];
            if needs.len() > 2 {
                out.push(Some(grads.bias));
            }
            out
        }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<E>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat(&values, axis)?;
        let extents: Vec<usize> = values.iter().map(|t| t.shape()[axis]).collect();
        Ok(self.push(out, parts, move |g, needs| {
            let mut start = 0;
            extents
                .iter()
                .zip(needs)
                .map(|(&len, &need)| {
                    let part = need.then(|| {
                        kernels::slice_axis(g, axis, start, len).expect("extents recorded in forward")
                    });
                    start += len;
                    part
                })
                .collect()
        }))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let full = self.value(x).shape().to_vec();
        let out = kernels::slice_axis(self.value(x), axis, start, len)?;
        Ok(self.push(out, &[x], move |g, _| {
            vec![Some(kernels::slice_backward(&full, g, axis, start))]
        }))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = kernels::permute(self.value(x), perm)?;
        let inverse = kernels::inverse_permutation(perm);
        Ok(self.push(out, &[x], move |g, _| {
            vec![Some(kernels::permute(g, &inverse).expect("valid inverse permutation"))]
        }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let original = self.value(x).shape().to_vec();
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, &[x], move |g, _| {
            vec![Some(g.reshape(&original).expect("same element count"))]
        }))
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let in_shape = self.value(x).shape().to_vec();
        let out = kernels::upsample_bilinear(self.value(x), factor)?;
        Ok(self.push(out, &[x], move |g, _| {
            vec![Some(kernels::upsample_bilinear_backward(&in_shape, g, factor))]
        }))
    }

    /// `x + conv(relu(conv(relu(x))))` with 3×3 same-padding convolutions.
    pub fn residual_block(&mut self, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
        let h = self.relu(x)?;
        let h = self.conv2d(h, w1, Some(b1), 1, 1)?;
        let h = self.relu(h)?;
        let h = self.conv2d(h, w2, Some(b2), 1, 1)?;
        if self.value(h).shape() != self.value(x).shape() {
            return Err(StmError::dim(format!(
                "residual block changes shape {:?} -> {:?}",
                self.value(x).shape(),
                self.value(h).shape()
            )));
        }
        self.add(x, h)
    }

    /// Mean cross-entropy of class logits (`C×…`) against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u32]) -> Result<Var> {
        let (loss, grad) = kernels::cross_entropy(self.value(logits), labels)?;
        if !loss.is_finite() {
            return Err(StmError::numeric("cross_entropy produced a non-finite loss"));
        }
        Ok(self.push(Tensor::scalar(E::of(loss)), &[logits], move |g, _| {
            vec![Some(grad.scale(g.item()))]
        }))
    }

    /// Soft-aggregation log-odds `(M+1)×H×W` from `M` foreground maps `1×H×W`.
    pub fn aggregate_logits(&mut self, probs: &[Var]) -> Result<Var> {
        let values: Vec<Tensor<E>> = probs.iter().map(|&p| self.value(p).clone()).collect();
        let refs: Vec<&Tensor<E>> = values.iter().collect();
        let out = kernels::aggregate_logits(&refs)?;
        Ok(self.push(out, probs, move |g, _| {
            let refs: Vec<&Tensor<E>> = values.iter().collect();
            kernels::aggregate_logits_backward(&refs, g)
                .into_iter()
                .map(Some)
                .collect()
        }))
    }
}
