use crate::autograd::{Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::Stream;
use crate::tensor::{ConvSpec, Scalar, Shape, Tensor4, TensorError};

/// A tape paired with the parameter values it reads.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a ParamStore<T>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamStore<T>) -> Self {
        Ctx { tape, params }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(id, self.params.get(id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with standard deviation `√(gain / fan_in)`.
    Kaiming(f64),
    Zero,
}

impl Init {
    /// For convolutions followed by a ReLU.
    pub const RELU: Init = Init::Kaiming(2.0);
    /// For convolutions whose output is used linearly.
    pub const LINEAR: Init = Init::Kaiming(1.0);
}

/// Parameter factory shared by every block constructor.
pub struct Builder<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: Stream,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Builder {
            store,
            rng: Stream::new(seed, 0),
        }
    }

    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        spec: ConvSpec,
        init: Init,
    ) -> ConvLayer {
        let (kh, kw) = spec.kernel;
        let shape = Shape::new(cout, cin / spec.groups, kh, kw);
        let fan_in = (cin / spec.groups * kh * kw) as f64;
        let weight = match init {
            Init::Kaiming(gain) => {
                let std = (gain / fan_in).sqrt();
                Tensor4::from_fn(shape, |_, _, _, _| T::lit(std * self.rng.normal()))
            }
            Init::Zero => Tensor4::zeros(shape),
        };
        let weight = self.store.add(format!("{name}.weight"), weight);
        let bias = self
            .store
            .add(format!("{name}.bias"), Tensor4::zeros(Shape::new(cout, 1, 1, 1)));
        ConvLayer { weight, bias, spec }
    }
}

/// Convolution with a learned per-output-channel bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl ConvLayer {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.conv2d(x, w, Some(b), self.spec)
    }

    pub fn numel<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).shape().numel() + store.get(self.bias).shape().numel()
    }
}

/// Deformable convolution whose per-pixel tap offsets come from a plain
/// convolution over the same input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformLayer {
    pub offsets: ConvLayer,
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl DeformLayer {
    /// Offset predictor starts at zero, so the layer initially equals a
    /// standard convolution.
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        init: Init,
    ) -> Self {
        let spec = ConvSpec::same(k);
        let offsets = b.conv(&format!("{name}.offset"), cin, 2 * k * k, spec, Init::Zero);
        let conv = b.conv(name, cin, cout, spec, init);
        DeformLayer {
            offsets,
            weight: conv.weight,
            bias: conv.bias,
            spec,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        let off = self.offsets.forward(ctx, x)?;
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.deform_conv2d(x, off, w, Some(b), self.spec)
    }
}
