//! Reverse-mode differentiation over the tensor kernels.
//!
//! A [`Tape`] records every operation of one forward pass in execution order
//! (which is therefore a topological order). [`Tape::backward`] walks the
//! records once in reverse, accumulating gradients additively at each input,
//! and frees intermediate buffers as soon as their record has been processed.

mod gradcheck;

use std::collections::HashMap;

pub use gradcheck::{grad_check, GradCheckReport};

use crate::params::ParamId;
use crate::tensor::{
    self, Argmax, ConvSpec, Scalar, Shape, Tensor4, TensorError,
};
use crate::training::loss;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutogradError {
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("expected a scalar output, got shape {0}")]
    NonScalar(Shape),
    #[error("seed shape {seed} does not match output shape {output}")]
    SeedShape { seed: Shape, output: Shape },
    #[error("finite-difference epsilon {0} outside [1e-7, 1e-3]")]
    Epsilon(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Deform {
        x: Var,
        offsets: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    GlobalAvg(Var),
    ChannelMean(Var),
    /// Max-style reductions: the gradient flows only to the selected inputs.
    Select {
        x: Var,
        arg: Argmax,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Sum(Var),
    Scale {
        x: Var,
        s: T,
    },
    SoftIou {
        pred: Var,
        target: Tensor4<T>,
        smooth: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Option<Tensor4<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: HashMap<Var, Tensor4<T>>,
    params: Vec<(ParamId, Tensor4<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, var: Var) -> Option<&Tensor4<T>> {
        self.leaves.get(&var)
    }

    /// Parameter gradients in ascending id order.
    pub fn params(&self) -> &[(ParamId, Tensor4<T>)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Tensor4<T>)> {
        self.params
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor4<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor4<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf bound to a parameter id; repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId, value: &Tensor4<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(value.clone());
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    /// Make an existing leaf the handle later returned by [`Tape::param`] for
    /// `id`, so a caller-owned tensor stands in for the stored parameter.
    pub fn bind_param(&mut self, id: ParamId, leaf: Var) {
        self.nodes[leaf.0].param = Some(id);
        self.params.insert(id, leaf);
    }

    /// Value of a recorded node. Panics if the buffer was already released
    /// by a backward pass.
    pub fn value(&self, v: Var) -> &Tensor4<T> {
        self.nodes[v.0]
            .value
            .as_ref()
            .expect("value released by backward")
    }

    pub fn take_value(&mut self, v: Var) -> Tensor4<T> {
        self.value(v).clone()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var, TensorError> {
        let bias = b.map(|b| self.value(b).data());
        let out = tensor::conv2d(self.value(x), self.value(w), bias, &spec)?;
        let rg = self.rg(&[x, w]) || b.is_some_and(|b| self.rg(&[b]));
        Ok(self.push(Op::Conv { x, w, b, spec }, out, rg))
    }

    pub fn deform_conv2d(
        &mut self,
        x: Var,
        offsets: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var, TensorError> {
        let bias = b.map(|b| self.value(b).data());
        let out = tensor::deform_conv2d(self.value(x), self.value(offsets), self.value(w), bias, &spec)?;
        let rg = self.rg(&[x, offsets, w]) || b.is_some_and(|b| self.rg(&[b]));
        Ok(self.push(Op::Deform { x, offsets, w, b, spec }, out, rg))
    }

    /// Elementwise sum with broadcasting over unit axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = tensor::broadcast_add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    /// Elementwise product with broadcasting over unit axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = tensor::broadcast_mul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = tensor::relu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(Op::Relu(x), out, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = tensor::sigmoid(self.value(x));
        let rg = self.rg(&[x]);
        self.push(Op::Sigmoid(x), out, rg)
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let vals: Vec<&Tensor4<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = tensor::concat_channels(&vals)?;
        let rg = self.rg(xs);
        Ok(self.push(Op::Concat(xs.to_vec()), out, rg))
    }

    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var, TensorError> {
        let perm = tensor::shuffle_permutation(self.value(x).shape().c, groups)?;
        let out = tensor::permute_channels(self.value(x), &perm);
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Permute { x, perm }, out, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = tensor::global_avg_pool(self.value(x));
        let rg = self.rg(&[x]);
        self.push(Op::GlobalAvg(x), out, rg)
    }

    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let (out, arg) = tensor::global_max_pool_arg(self.value(x));
        let rg = self.rg(&[x]);
        self.push(Op::Select { x, arg }, out, rg)
    }

    pub fn channel_mean_map(&mut self, x: Var) -> Var {
        let out = tensor::channel_mean_map(self.value(x));
        let rg = self.rg(&[x]);
        self.push(Op::ChannelMean(x), out, rg)
    }

    pub fn channel_max_map(&mut self, x: Var) -> Var {
        let (out, arg) = tensor::channel_max_map_arg(self.value(x));
        let rg = self.rg(&[x]);
        self.push(Op::Select { x, arg }, out, rg)
    }

    pub fn max_pool2x2(&mut self, x: Var) -> Result<Var, TensorError> {
        let (out, arg) = tensor::max_pool2x2_arg(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Select { x, arg }, out, rg))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let out = tensor::upsample_nearest(self.value(x), factor);
        let rg = self.rg(&[x]);
        self.push(Op::Upsample { x, factor }, out, rg)
    }

    /// Sum of all elements as a `1×1×1×1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor4::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(Op::Sum(x), out, rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(Op::Scale { x, s }, out, rg)
    }

    /// Batch-mean Soft-IoU loss of probabilities `pred` against a binary target.
    pub fn soft_iou_loss(&mut self, pred: Var, target: &Tensor4<T>, smooth: T) -> Result<Var, TensorError> {
        let value = loss::soft_iou_value(self.value(pred), target, smooth)?;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Op::SoftIou {
                pred,
                target: target.clone(),
                smooth,
            },
            Tensor4::scalar(value),
            rg,
        ))
    }

    /// Backpropagate from a scalar output with a seed of one.
    pub fn backward(&mut self, output: Var) -> Result<Gradients<T>, AutogradError> {
        if self.nodes.is_empty() {
            return Err(AutogradError::EmptyTape);
        }
        let shape = self.value(output).shape();
        if shape.numel() != 1 {
            return Err(AutogradError::NonScalar(shape));
        }
        self.backward_with_seed(output, Tensor4::ones(shape))
    }

    /// Backpropagate an arbitrary upstream gradient `seed` from `output`.
    ///
    /// Every leaf recorded before `output` that requires a gradient receives
    /// one (zeros when it does not influence `output`). Intermediate buffers
    /// are released, so the tape cannot be differentiated twice.
    pub fn backward_with_seed(
        &mut self,
        output: Var,
        seed: Tensor4<T>,
    ) -> Result<Gradients<T>, AutogradError> {
        if self.nodes.is_empty() {
            return Err(AutogradError::EmptyTape);
        }
        let out_shape = self.value(output).shape();
        if seed.shape() != out_shape {
            return Err(AutogradError::SeedShape {
                seed: seed.shape(),
                output: out_shape,
            });
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let mut leaves = HashMap::new();

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                if !matches!(node.op, Op::Leaf) {
                    self.nodes[i].value = None;
                }
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor4::zeros(self.value(Var(i)).shape()));
                leaves.insert(Var(i), g);
                continue;
            }
            let Some(g) = grads[i].take() else {
                self.nodes[i].value = None;
                continue;
            };
            for (input, gi) in self.input_grads(i, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
            self.nodes[i].value = None;
        }

        let mut params: Vec<(ParamId, Tensor4<T>)> = self
            .params
            .iter()
            .filter_map(|(&id, v)| leaves.get(v).map(|g| (id, g.clone())))
            .collect();
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { leaves, params })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradients of node `i`'s inputs given its upstream gradient `g`.
    fn input_grads(&self, i: usize, g: &Tensor4<T>) -> Result<Vec<(Var, Tensor4<T>)>, TensorError> {
        let out = |v: Var| self.value(v);
        let mut res = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let cg = tensor::conv2d_backward(out(*x), out(*w), spec, g, self.needs(*x))?;
                if let Some(dx) = cg.dx {
                    res.push((*x, dx));
                }
                res.push((*w, cg.dw));
                if let Some(b) = b {
                    res.push((*b, Tensor4::from_vec(out(*b).shape(), cg.db)?));
                }
            }
            Op::Deform { x, offsets, w, b, spec } => {
                let dg = tensor::deform_conv2d_backward(
                    out(*x),
                    out(*offsets),
                    out(*w),
                    spec,
                    g,
                    self.needs(*x),
                    self.needs(*offsets),
                )?;
                if let Some(dx) = dg.dx {
                    res.push((*x, dx));
                }
                if let Some(doff) = dg.doffsets {
                    res.push((*offsets, doff));
                }
                res.push((*w, dg.dw));
                if let Some(b) = b {
                    res.push((*b, Tensor4::from_vec(out(*b).shape(), dg.db)?));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        res.push((v, tensor::reduce_to_shape(g, out(v).shape())));
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.needs(v) {
                        let full = tensor::broadcast_mul(g, out(other))?;
                        res.push((v, tensor::reduce_to_shape(&full, out(v).shape())));
                    }
                }
            }
            Op::Relu(x) => {
                let xv = out(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                res.push((*x, Tensor4::from_vec(xv.shape(), data)?));
            }
            Op::Sigmoid(x) => {
                let y = out(Var(i));
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gi, &yi)| gi * yi * (T::one() - yi))
                    .collect();
                res.push((*x, Tensor4::from_vec(y.shape(), data)?));
            }
            Op::Concat(xs) => {
                let sizes: Vec<usize> = xs.iter().map(|&v| out(v).shape().c).collect();
                for (v, part) in xs.iter().zip(tensor::split_channels(g, &sizes)?) {
                    res.push((*v, part));
                }
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (dst, &src) in perm.iter().enumerate() {
                    inverse[src] = dst;
                }
                res.push((*x, tensor::permute_channels(g, &inverse)));
            }
            Op::GlobalAvg(x) => {
                let s = out(*x).shape();
                let inv = T::one() / T::lit(s.plane() as f64);
                let gx = Tensor4::from_fn(s, |n, c, _, _| g.at(n, c, 0, 0) * inv);
                res.push((*x, gx));
            }
            Op::ChannelMean(x) => {
                let s = out(*x).shape();
                let inv = T::one() / T::lit(s.c as f64);
                let gx = Tensor4::from_fn(s, |n, _, y, xx| g.at(n, 0, y, xx) * inv);
                res.push((*x, gx));
            }
            Op::Select { x, arg } => {
                let mut gx = Tensor4::zeros(out(*x).shape());
                let d = gx.data_mut();
                for (&src, &gi) in arg.iter().zip(g.data()) {
                    d[src] += gi;
                }
                res.push((*x, gx));
            }
            Op::Upsample { x, factor } => {
                res.push((
                    *x,
                    tensor::upsample_nearest_backward(g, out(*x).shape(), *factor),
                ));
            }
            Op::Sum(x) => {
                res.push((*x, Tensor4::full(out(*x).shape(), g.data()[0])));
            }
            Op::Scale { x, s } => {
                res.push((*x, g.map(|v| v * *s)));
            }
            Op::SoftIou { pred, target, smooth } => {
                let gp = loss::soft_iou_grad(out(*pred), target, *smooth, g.data()[0])?;
                res.push((*pred, gp));
            }
        }
        Ok(res)
    }
}
