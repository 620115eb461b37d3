//! Dense f64 tensors with a tape for reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Ops take
//! and return [`Var`] handles; the tape records them in execution order,
//! which is a topological order, so `backward` walks the nodes from last to
//! first. Gradients live on the tape and are read back with [`Tape::grad`].
//! A tape supports exactly one `backward` call; a second one is a
//! [`Error::Usage`](crate::Error::Usage).
//!
//! All reductions run in a fixed loop order, so identical inputs give
//! bit-identical values and gradients.

mod ops;

use crate::error::{bail, Error, Result};

pub use ops::{sigmoid, BatchStats, BnMode, BCE_CLAMP};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            bail!(Shape, "shape {:?} needs {} values, got {}", shape, n, data.len());
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            bail!(Shape, "cannot reshape {:?} to {:?}", self.shape, shape);
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Var, pad: (usize, usize), col: Option<Vec<f64>> },
    Crop(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Relu(Var),
    Sigmoid(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    Linear { x: Var, w: Var, b: Var },
    GlobalAvgPool(Var),
    ChannelMul { x: Var, s: Var },
    WeightedBce { p: Var, dp: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input. Parameters use `requires_grad = true`, data `false`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of the last `backward` target with respect to `v`; `None`
    /// before `backward` or when `v` does not influence the target.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// NaN/Inf guard for any intermediate value.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).collect();
        let value = Tensor { shape: self.shape(a).to_vec(), data };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.is_empty() {
            bail!(Shape, "cannot flatten a zero-dimensional tensor");
        }
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(a, vec![n, rest])
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(Shape, "{op}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b));
        }
        Ok(())
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            bail!(Usage, "backward already ran on this tape");
        }
        if self.value(loss).numel() != 1 {
            bail!(Usage, "backward needs a scalar, got shape {:?}", self.shape(loss));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            ops::backward_node(self, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Adds `delta` into the gradient buffer of `v` if it needs one.
    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            slot => *slot = Some(delta.to_vec()),
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        f(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]));
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps entries whose true
/// gradient is near zero from dividing rounding noise by almost nothing.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor used by [`grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Largest relative error between the analytic gradient returned by `f`
/// at `x` and central differences `(f(x+h) - f(x-h)) / 2h` over every
/// coordinate.
pub fn grad_check<F>(f: F, x: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let all: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, h, &all)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords<F>(mut f: F, x: &[f64], h: f64, coords: &[usize]) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (_, analytic) = f(x)?;
    if analytic.len() != x.len() {
        bail!(Shape, "gradient has {} entries for {} inputs", analytic.len(), x.len());
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        probe[i] = x[i] + h;
        let (up, _) = f(&probe)?;
        probe[i] = x[i] - h;
        let (down, _) = f(&probe)?;
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric, GRAD_CHECK_FLOOR));
    }
    Ok(worst)
}
