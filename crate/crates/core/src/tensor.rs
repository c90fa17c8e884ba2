//! Dense `f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! A [`Tensor`] is an immutable value. Differentiable computation happens on a
//! [`Graph`]: leaves are registered as constants, watched inputs, or named
//! parameters, and every operation appends a node whose inputs precede it.
//! [`Graph::backward`] walks the tape once in reverse and may only run once
//! per graph.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::Op;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("numel", &self.data.len())
            .finish()
    }
}

impl Tensor {
    /// Builds a tensor from row-major `data`. Every dimension must be positive
    /// and every value finite; an empty shape denotes a scalar.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor input at index {i}")));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for kernels whose output length is correct by
    /// construction. Finiteness is checked when the value enters a graph.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_parts(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Self::from_parts(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.data[flat]
    }

    /// Expects a 4-D `[N, C, H, W]` tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::Shape(format!("expected [N,C,H,W], got {:?}", self.shape))),
        }
    }

    /// Sample `index` along the leading axis, keeping a unit batch axis.
    pub fn sample(&self, index: usize) -> Self {
        let n = self.shape[0];
        assert!(index < n);
        let stride = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Self::from_parts(shape, self.data[index * stride..(index + 1) * stride].to_vec())
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Shape(format!("stack: {:?} vs {:?}", t.shape, first.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::from_parts(shape, data))
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    op: Option<Op>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, usize>,
    scope: Option<String>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Label attached to non-finite errors raised by subsequent operations.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = Some(scope.into());
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(self.label("leaf")));
        }
        self.nodes.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that takes no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// A non-parameter leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// A trainable leaf. Registering the same name twice returns the first node.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var> {
        let name = name.into();
        if let Some(&idx) = self.params.get(&name) {
            return Ok(Var(idx));
        }
        let var = self.leaf(value, true)?;
        self.params.insert(name, var.0);
        Ok(var)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Which ReLU inputs on the tape are positive, in tape order. Within one
    /// pattern the recorded function is smooth.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Some(Op::Activation(crate::ops::Activation::Relu)) = node.op {
                let input = &self.nodes[node.inputs[0]].value;
                out.extend(input.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    fn label(&self, op: &str) -> String {
        match &self.scope {
            Some(s) => format!("{op} in {s}"),
            None => op.to_string(),
        }
    }

    pub(crate) fn push(&mut self, op: Op, inputs: &[Var], value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(self.label(op.name())));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: Some(op),
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a scalar `loss`. Each node is visited at most
    /// once; a second call on the same graph fails.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_value.shape().to_vec(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if let Some(&bad) = node.inputs.iter().find(|&&i| i >= idx) {
                return Err(Error::Cycle { node: idx, input: bad });
            }
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let input_grads = op.backward(&inputs, &node.value, &grad, &needs)?;
            grads[idx] = Some(grad);
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params: self.params.clone(),
        })
    }
}

/// Result of one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, usize>,
}

impl Gradients {
    /// Gradient with respect to any node; zeros when the node does not reach the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.0].clone()))
    }

    /// Gradient of a named parameter, or `None` if it was never registered.
    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.params.get(name).map(|&i| self.wrt(Var(i)))
    }

    /// All registered parameters in name order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Tensor)> + '_ {
        self.params.iter().map(|(name, &i)| (name.as_str(), self.wrt(Var(i))))
    }
}

/// Outcome of [`grad_check_report`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Maximum over checked components of `|analytic - central| / max(1, |central|)`.
    pub max_error: f64,
    /// Components whose `±epsilon` stencil crossed a ReLU kink and were
    /// re-measured with a smaller step.
    pub refined: usize,
    /// Components sitting exactly on a kink (no step keeps the stencil in
    /// one linear piece); these are not compared.
    pub skipped: usize,
}

/// Maximum relative error between the tape gradient of the scalar function
/// `f` at `point` and central differences with step `epsilon`.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_report(f, point, epsilon).map(|r| r.max_error)
}

/// Like [`grad_check`], with kink handling made explicit. A central
/// difference whose two evaluations see a different ReLU on/off pattern than
/// the centre spans two linear pieces and does not estimate the derivative;
/// for such components the step is halved (up to 20 times) until all three
/// evaluations share one pattern.
pub fn grad_check_report<F>(f: F, point: &Tensor, epsilon: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let mut g = Graph::new();
    let x = g.input(point.clone())?;
    let y = f(&mut g, x)?;
    let centre = g.relu_pattern();
    let analytic = g.backward(y)?.wrt(x);

    let eval = |p: Tensor| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let x = g.input(p)?;
        let y = f(&mut g, x)?;
        let v = g.value(y);
        if !v.is_scalar() {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok((v.data()[0], g.relu_pattern()))
    };

    let mut report = GradCheck {
        max_error: 0.0,
        refined: 0,
        skipped: 0,
    };
    for i in 0..point.numel() {
        let mut step = epsilon;
        let mut numeric = None;
        for _ in 0..=20 {
            let mut plus = point.clone();
            plus.data_mut()[i] += step;
            let mut minus = point.clone();
            minus.data_mut()[i] -= step;
            let (fp, pp) = eval(plus)?;
            let (fm, pm) = eval(minus)?;
            if pp == centre && pm == centre {
                numeric = Some((fp - fm) / (2.0 * step));
                break;
            }
            step /= 2.0;
        }
        match numeric {
            Some(n) => {
                if step < epsilon {
                    report.refined += 1;
                }
                let err = (analytic.data()[i] - n).abs() / n.abs().max(1.0);
                report.max_error = report.max_error.max(err);
            }
            None => report.skipped += 1,
        }
    }
    Ok(report)
}
