//! The three building blocks of the network plus the plain and baseline
//! substitutes used by ablation variants.

use crate::autograd::Var;
use crate::tensor::{ConvSpec, Scalar, TensorError};

use super::layers::{Builder, ConvLayer, Ctx, DeformLayer, Init};
use super::ModelError;

/// Which optional branches of the selective variable convolution are active.
/// The standard 3×3 branch is always present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SvcBranches {
    pub deform: bool,
    pub dilated: bool,
}

impl SvcBranches {
    pub const ALL: SvcBranches = SvcBranches {
        deform: true,
        dilated: true,
    };

    pub fn count(&self) -> usize {
        1 + self.deform as usize + self.dilated as usize
    }
}

/// Dilation rates of the multi-rate branch.
pub const DILATIONS: [usize; 3] = [2, 4, 8];

/// Selective variable convolution: standard, deformable and multi-rate
/// dilated 3×3 branches, concatenated and fused by a 1×1 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SvcBlock {
    pub cin: usize,
    pub cout: usize,
    pub standard: ConvLayer,
    pub deform: Option<DeformLayer>,
    /// Outputs of the three dilated convolutions are summed.
    pub dilated: Option<[ConvLayer; 3]>,
    pub fuse: ConvLayer,
}

impl SvcBlock {
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        branches: SvcBranches,
    ) -> Self {
        let standard = b.conv(&format!("{name}.sconv"), cin, cout, ConvSpec::same(3), Init::LINEAR);
        let deform = branches
            .deform
            .then(|| DeformLayer::build(b, &format!("{name}.dconv"), cin, cout, 3, Init::LINEAR));
        let dilated = branches.dilated.then(|| {
            DILATIONS.map(|d| {
                b.conv(
                    &format!("{name}.mdconv{d}"),
                    cin,
                    cout,
                    ConvSpec::same_dilated(3, d),
                    // The three outputs are summed, so each carries a third of the variance.
                    Init::Kaiming(1.0 / 3.0),
                )
            })
        });
        let fuse = b.conv(
            &format!("{name}.fuse"),
            cout * branches.count(),
            cout,
            ConvSpec::new(1, 1),
            Init::RELU,
        );
        SvcBlock {
            cin,
            cout,
            standard,
            deform,
            dilated,
            fuse,
        }
    }

    /// Branch outputs in concatenation order (standard, deformable, dilated).
    pub fn branches<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Vec<Var>, ModelError> {
        let c = ctx.tape.value(x).shape().c;
        if c != self.cin {
            return Err(ModelError::Tensor(TensorError::Dimension {
                op: "svc_forward",
                axis: crate::tensor::Axis::Channel,
                expected: self.cin,
                actual: c,
            }));
        }
        let mut outs = vec![self.standard.forward(ctx, x)?];
        if let Some(d) = &self.deform {
            outs.push(d.forward(ctx, x)?);
        }
        if let Some(convs) = &self.dilated {
            let a = convs[0].forward(ctx, x)?;
            let b = convs[1].forward(ctx, x)?;
            let c = convs[2].forward(ctx, x)?;
            let ab = ctx.tape.add(a, b)?;
            outs.push(ctx.tape.add(ab, c)?);
        }
        Ok(outs)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var, ModelError> {
        let outs = self.branches(ctx, x)?;
        let cat = ctx.tape.concat(&outs)?;
        Ok(self.fuse.forward(ctx, cat)?)
    }
}

/// Two 3×3 convolutions with ReLU after each; the plain U-Net stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleConv {
    pub first: ConvLayer,
    pub second: ConvLayer,
}

impl DoubleConv {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize) -> Self {
        DoubleConv {
            first: b.conv(&format!("{name}.conv1"), cin, cout, ConvSpec::same(3), Init::RELU),
            second: b.conv(&format!("{name}.conv2"), cout, cout, ConvSpec::same(3), Init::RELU),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        let h = self.first.forward(ctx, x)?;
        let h = ctx.tape.relu(h);
        let h = self.second.forward(ctx, h)?;
        Ok(ctx.tape.relu(h))
    }
}

/// How the two attention stages are wired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DcgaWiring {
    /// Channel and spatial descriptors computed side by side from the input.
    Parallel,
    /// Spatial attention computed on the channel-reweighted input.
    Cascaded,
    /// Skip the fine stage: the map is `sigmoid(W_coa)`.
    NoRefine,
    /// Fine stage without the channel shuffle.
    NoShuffle,
}

impl DcgaWiring {
    pub fn as_str(&self) -> &'static str {
        match self {
            DcgaWiring::Parallel => "parallel",
            DcgaWiring::Cascaded => "cascaded",
            DcgaWiring::NoRefine => "no-refine",
            DcgaWiring::NoShuffle => "no-shuffle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "parallel" => DcgaWiring::Parallel,
            "cascaded" => DcgaWiring::Cascaded,
            "no-refine" => DcgaWiring::NoRefine,
            "no-shuffle" => DcgaWiring::NoShuffle,
            _ => return None,
        })
    }
}

/// Two-stage content-guided attention producing a per-channel spatial
/// importance map `W ∈ (0,1)^{c×h×w}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DcgaBlock {
    pub channels: usize,
    pub hidden: usize,
    pub squeeze: ConvLayer,
    pub excite: ConvLayer,
    pub spatial: ConvLayer,
    /// Grouped 7×7 convolution, one group per (feature, coarse map) channel pair.
    pub refine: Option<ConvLayer>,
    pub wiring: DcgaWiring,
    pub residual: bool,
}

impl DcgaBlock {
    /// `reduction` is the channel-attention bottleneck ratio; `channels`
    /// must be even and at least `reduction`.
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        channels: usize,
        reduction: usize,
        wiring: DcgaWiring,
        residual: bool,
    ) -> Result<Self, ModelError> {
        if !channels.is_multiple_of(2) {
            return Err(ModelError::Config(format!(
                "{name}: attention needs an even channel count, got {channels}"
            )));
        }
        if reduction == 0 || channels < reduction {
            return Err(ModelError::Config(format!(
                "{name}: {channels} channels cannot be reduced by ratio {reduction}"
            )));
        }
        let hidden = channels / reduction;
        let squeeze = b.conv(&format!("{name}.ca1"), channels, hidden, ConvSpec::new(1, 1), Init::RELU);
        let excite = b.conv(&format!("{name}.ca2"), hidden, channels, ConvSpec::new(1, 1), Init::LINEAR);
        let spatial = b.conv(&format!("{name}.sa"), 2, 1, ConvSpec::same(7), Init::LINEAR);
        let refine = (wiring != DcgaWiring::NoRefine).then(|| {
            b.conv(
                &format!("{name}.refine"),
                2 * channels,
                channels,
                ConvSpec::same(7).with_groups(channels),
                Init::LINEAR,
            )
        });
        Ok(DcgaBlock {
            channels,
            hidden,
            squeeze,
            excite,
            spatial,
            refine,
            wiring,
            residual,
        })
    }

    fn channel_attention<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        let gap = ctx.tape.global_avg_pool(x);
        let h = self.squeeze.forward(ctx, gap)?;
        let h = ctx.tape.relu(h);
        self.excite.forward(ctx, h)
    }

    fn spatial_attention<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        let mean = ctx.tape.channel_mean_map(x);
        let max = ctx.tape.channel_max_map(x);
        let cat = ctx.tape.concat(&[mean, max])?;
        self.spatial.forward(ctx, cat)
    }

    /// Coarse map `W_coa = W_c ⊕ W_s` with shape `n×c×h×w`.
    pub fn stage1<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var, ModelError> {
        let c = ctx.tape.value(x).shape().c;
        if c != self.channels {
            return Err(ModelError::Tensor(TensorError::Dimension {
                op: "dcga_forward",
                axis: crate::tensor::Axis::Channel,
                expected: self.channels,
                actual: c,
            }));
        }
        let wc = self.channel_attention(ctx, x)?;
        let ws = match self.wiring {
            DcgaWiring::Cascaded => {
                let gate = ctx.tape.sigmoid(wc);
                let xc = ctx.tape.mul(x, gate)?;
                self.spatial_attention(ctx, xc)?
            }
            _ => self.spatial_attention(ctx, x)?,
        };
        Ok(ctx.tape.add(wc, ws)?)
    }

    /// Returns the gated features and the importance map `W`.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var), ModelError> {
        let coarse = self.stage1(ctx, x)?;
        let logits = match (&self.refine, self.wiring) {
            (None, _) => coarse,
            (Some(refine), wiring) => {
                let cat = ctx.tape.concat(&[x, coarse])?;
                let mixed = if wiring == DcgaWiring::NoShuffle {
                    cat
                } else {
                    ctx.tape.channel_shuffle(cat, 2)?
                };
                refine.forward(ctx, mixed)?
            }
        };
        let w = ctx.tape.sigmoid(logits);
        let gated = ctx.tape.mul(x, w)?;
        let y = if self.residual {
            ctx.tape.add(gated, x)?
        } else {
            gated
        };
        Ok((y, w))
    }
}

/// Adaptive fusion of same-shaped encoder and decoder features through a
/// shared sigmoid spatial map.
#[derive(Debug, Clone, PartialEq)]
pub struct AdffBlock {
    pub kernel: usize,
    pub conv: ConvLayer,
}

impl AdffBlock {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, kernel: usize) -> Self {
        AdffBlock {
            kernel,
            conv: b.conv(&format!("{name}.conv"), 2, 1, ConvSpec::same(kernel), Init::LINEAR),
        }
    }

    /// Returns the fused features and the attention map `AD_fuse` (`n×1×h×w`).
    pub fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        enc: Var,
        dec: Var,
    ) -> Result<(Var, Var), ModelError> {
        let (se, sd) = (ctx.tape.value(enc).shape(), ctx.tape.value(dec).shape());
        if se != sd {
            return Err(ModelError::Config(format!(
                "adaptive fusion needs matching encoder/decoder shapes, got {se} and {sd}"
            )));
        }
        let cat = ctx.tape.concat(&[enc, dec])?;
        let avg = ctx.tape.channel_mean_map(cat);
        let max = ctx.tape.channel_max_map(cat);
        let desc = ctx.tape.concat(&[avg, max])?;
        let logits = self.conv.forward(ctx, desc)?;
        let ad = ctx.tape.sigmoid(logits);
        let a = ctx.tape.mul(enc, ad)?;
        let b = ctx.tape.mul(dec, ad)?;
        Ok((ctx.tape.add(a, b)?, ad))
    }
}

/// Squeeze-and-excitation channel gate, an alternative attention baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct SeBlock {
    pub squeeze: ConvLayer,
    pub excite: ConvLayer,
}

impl SeBlock {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        SeBlock {
            squeeze: b.conv(&format!("{name}.fc1"), channels, hidden, ConvSpec::new(1, 1), Init::RELU),
            excite: b.conv(&format!("{name}.fc2"), hidden, channels, ConvSpec::new(1, 1), Init::LINEAR),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        let gap = ctx.tape.global_avg_pool(x);
        let h = self.squeeze.forward(ctx, gap)?;
        let h = ctx.tape.relu(h);
        let h = self.excite.forward(ctx, h)?;
        let gate = ctx.tape.sigmoid(h);
        ctx.tape.mul(x, gate)
    }
}

/// Convolutional block attention: shared-MLP channel gate over average and
/// max pooled descriptors, then a 7×7 spatial gate.
#[derive(Debug, Clone, PartialEq)]
pub struct CbamBlock {
    pub squeeze: ConvLayer,
    pub excite: ConvLayer,
    pub spatial: ConvLayer,
}

impl CbamBlock {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        CbamBlock {
            squeeze: b.conv(&format!("{name}.fc1"), channels, hidden, ConvSpec::new(1, 1), Init::RELU),
            excite: b.conv(&format!("{name}.fc2"), hidden, channels, ConvSpec::new(1, 1), Init::LINEAR),
            spatial: b.conv(&format!("{name}.sa"), 2, 1, ConvSpec::same(7), Init::LINEAR),
        }
    }

    fn mlp<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, v: Var) -> Result<Var, TensorError> {
        let h = self.squeeze.forward(ctx, v)?;
        let h = ctx.tape.relu(h);
        self.excite.forward(ctx, h)
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        let avg = ctx.tape.global_avg_pool(x);
        let max = ctx.tape.global_max_pool(x);
        let a = self.mlp(ctx, avg)?;
        let m = self.mlp(ctx, max)?;
        let s = ctx.tape.add(a, m)?;
        let gate = ctx.tape.sigmoid(s);
        let xc = ctx.tape.mul(x, gate)?;
        let mean = ctx.tape.channel_mean_map(xc);
        let mx = ctx.tape.channel_max_map(xc);
        let cat = ctx.tape.concat(&[mean, mx])?;
        let sl = self.spatial.forward(ctx, cat)?;
        let sgate = ctx.tape.sigmoid(sl);
        ctx.tape.mul(xc, sgate)
    }
}
