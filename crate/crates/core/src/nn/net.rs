use std::fmt;
use std::path::Path;

use crate::autograd::{Tape, Var};
use crate::config::{join, ConfigError, KvMap};
use crate::params::ParamStore;
use crate::tensor::{ConvSpec, Scalar, Tensor4};

use super::blocks::{AdffBlock, CbamBlock, DcgaBlock, DcgaWiring, DoubleConv, SeBlock, SvcBlock, SvcBranches};
use super::layers::{Builder, ConvLayer, Ctx, Init};
use super::ModelError;

/// Attention applied after each encoder and bottleneck stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    None,
    Dcga,
    Se,
    Cbam,
}

impl AttentionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionKind::None => "none",
            AttentionKind::Dcga => "dcga",
            AttentionKind::Se => "se",
            AttentionKind::Cbam => "cbam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "none" => AttentionKind::None,
            "dcga" => AttentionKind::Dcga,
            "se" => AttentionKind::Se,
            "cbam" => AttentionKind::Cbam,
            _ => return None,
        })
    }
}

/// Architecture switches. `channels[..len-1]` are the encoder stages and the
/// last entry is the bottleneck width.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub channels: Vec<usize>,
    pub svc: bool,
    pub branches: SvcBranches,
    pub attention: AttentionKind,
    pub wiring: DcgaWiring,
    pub residual: bool,
    pub adff: bool,
    pub reduction: usize,
    pub adff_kernel: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            channels: vec![16, 32, 64, 128],
            svc: true,
            branches: SvcBranches::ALL,
            attention: AttentionKind::Dcga,
            wiring: DcgaWiring::Parallel,
            residual: true,
            adff: true,
            reduction: 8,
            adff_kernel: 7,
        }
    }
}

impl NetConfig {
    /// Small schedule used for gradient checks and fast tests.
    pub fn micro() -> Self {
        NetConfig {
            channels: vec![4, 8, 16, 32],
            ..Self::default()
        }
    }

    /// Plain U-Net: every module disabled.
    pub fn baseline(channels: Vec<usize>) -> Self {
        NetConfig {
            channels,
            svc: false,
            attention: AttentionKind::None,
            adff: false,
            ..Self::default()
        }
    }

    /// Number of encoder stages (resolutions).
    pub fn stages(&self) -> usize {
        self.channels.len() - 1
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.stages() - 1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.channels.len() < 2 {
            return Err(ModelError::Config(format!(
                "channel schedule needs at least two entries, got {:?}",
                self.channels
            )));
        }
        if self.channels.contains(&0) {
            return Err(ModelError::Config("channel counts must be positive".into()));
        }
        if self.attention == AttentionKind::Dcga && self.channels.iter().any(|c| c % 2 != 0) {
            return Err(ModelError::Config(format!(
                "attention needs even channel counts, got {:?}",
                self.channels
            )));
        }
        if self.reduction == 0 {
            return Err(ModelError::Config("reduction ratio must be at least 1".into()));
        }
        if self.adff_kernel.is_multiple_of(2) {
            return Err(ModelError::Config(format!(
                "fusion kernel must be odd, got {}",
                self.adff_kernel
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> String {
        join(&self.channels)
    }

    /// Consume this config's keys from `kv`, leaving the rest.
    pub fn take_from(kv: &mut KvMap) -> Result<Self, ConfigError> {
        let d = NetConfig::default();
        let channels = kv.take_list("channels")?.unwrap_or(d.channels);
        let branches = match kv.take_list::<String>("svc_branches")? {
            None => d.branches,
            Some(list) => parse_branches(&list)?,
        };
        let attention = match kv.take_str("attention") {
            None => d.attention,
            Some(s) => AttentionKind::parse(&s).ok_or_else(|| ConfigError::Value {
                key: "attention".into(),
                value: s.clone(),
                reason: "expected none, dcga, se or cbam".into(),
            })?,
        };
        let wiring = match kv.take_str("dcga_wiring") {
            None => d.wiring,
            Some(s) => DcgaWiring::parse(&s).ok_or_else(|| ConfigError::Value {
                key: "dcga_wiring".into(),
                value: s.clone(),
                reason: "expected parallel, cascaded, no-refine or no-shuffle".into(),
            })?,
        };
        Ok(NetConfig {
            channels,
            svc: kv.take_or("svc", d.svc)?,
            branches,
            attention,
            wiring,
            residual: kv.take_or("dcga_residual", d.residual)?,
            adff: kv.take_or("adff", d.adff)?,
            reduction: kv.take_or("reduction", d.reduction)?,
            adff_kernel: kv.take_or("adff_kernel", d.adff_kernel)?,
        })
    }

    pub fn to_text(&self) -> String {
        let mut branches = vec!["sconv"];
        if self.branches.deform {
            branches.push("dconv");
        }
        if self.branches.dilated {
            branches.push("mdconv");
        }
        format!(
            "channels={}\nsvc={}\nsvc_branches={}\nattention={}\ndcga_wiring={}\ndcga_residual={}\nadff={}\nreduction={}\nadff_kernel={}\n",
            self.schedule(),
            self.svc,
            branches.join(","),
            self.attention.as_str(),
            self.wiring.as_str(),
            self.residual,
            self.adff,
            self.reduction,
            self.adff_kernel,
        )
    }
}

fn parse_branches(list: &[String]) -> Result<SvcBranches, ConfigError> {
    let mut b = SvcBranches {
        deform: false,
        dilated: false,
    };
    let mut standard = false;
    for name in list {
        match name.as_str() {
            "sconv" => standard = true,
            "dconv" => b.deform = true,
            "mdconv" => b.dilated = true,
            other => {
                return Err(ConfigError::Value {
                    key: "svc_branches".into(),
                    value: other.into(),
                    reason: "expected sconv, dconv or mdconv".into(),
                })
            }
        }
    }
    if !standard {
        return Err(ConfigError::Invalid(
            "svc_branches must include sconv (the standard branch is mandatory)".into(),
        ));
    }
    Ok(b)
}

impl fmt::Display for NetConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
enum StageConv {
    Svc(SvcBlock),
    Plain(DoubleConv),
}

#[derive(Debug, Clone, PartialEq)]
enum StageAttention {
    None,
    Dcga(DcgaBlock),
    Se(SeBlock),
    Cbam(CbamBlock),
}

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    name: String,
    conv: StageConv,
    attention: StageAttention,
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderLevel {
    name: String,
    up: ConvLayer,
    fuse: Option<AdffBlock>,
    conv: DoubleConv,
}

/// Variables produced by one forward pass on a tape.
#[derive(Debug, Clone)]
pub struct NetOutput {
    pub logits: Var,
    /// Auxiliary logits upsampled to the input size, coarsest first.
    pub aux: Vec<Var>,
    /// Attention maps by block name: DCGA importance maps (`n×c×h×w`) and
    /// fusion maps (`n×1×h×w`).
    pub attention: Vec<(String, Var)>,
}

/// Materialized outputs of an inference pass.
#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub logits: Tensor4<T>,
    pub aux: Vec<Tensor4<T>>,
    pub attention: Vec<(String, Tensor4<T>)>,
}

/// The assembled encoder/bottleneck/decoder network. Holds only parameter
/// handles; values live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct DcgaNet {
    config: NetConfig,
    encoder: Vec<Stage>,
    bottleneck: Stage,
    decoder: Vec<DecoderLevel>,
    head: ConvLayer,
    aux_heads: Vec<ConvLayer>,
}

fn build_stage<T: Scalar>(
    b: &mut Builder<'_, T>,
    config: &NetConfig,
    name: &str,
    cin: usize,
    cout: usize,
) -> Result<Stage, ModelError> {
    let conv = if config.svc {
        StageConv::Svc(SvcBlock::build(b, &format!("{name}.svc"), cin, cout, config.branches))
    } else {
        StageConv::Plain(DoubleConv::build(b, &format!("{name}.conv"), cin, cout))
    };
    let r = config.reduction.min(cout / 2).max(1);
    let attention = match config.attention {
        AttentionKind::None => StageAttention::None,
        AttentionKind::Dcga => StageAttention::Dcga(DcgaBlock::build(
            b,
            &format!("{name}.dcga"),
            cout,
            r,
            config.wiring,
            config.residual,
        )?),
        AttentionKind::Se => StageAttention::Se(SeBlock::build(b, &format!("{name}.se"), cout, r)),
        AttentionKind::Cbam => StageAttention::Cbam(CbamBlock::build(b, &format!("{name}.cbam"), cout, r)),
    };
    Ok(Stage {
        name: name.to_string(),
        conv,
        attention,
    })
}

impl Stage {
    fn forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        maps: &mut Vec<(String, Var)>,
    ) -> Result<Var, ModelError> {
        let h = match &self.conv {
            StageConv::Svc(svc) => {
                let h = svc.forward(ctx, x)?;
                ctx.tape.relu(h)
            }
            StageConv::Plain(dc) => dc.forward(ctx, x)?,
        };
        Ok(match &self.attention {
            StageAttention::None => h,
            StageAttention::Dcga(block) => {
                let (y, w) = block.forward(ctx, h)?;
                maps.push((format!("{}.dcga", self.name), w));
                y
            }
            StageAttention::Se(block) => block.forward(ctx, h)?,
            StageAttention::Cbam(block) => block.forward(ctx, h)?,
        })
    }
}

impl DcgaNet {
    /// Declare all parameters in `store` (which should be empty) with
    /// seeded initialization.
    pub fn build<T: Scalar>(config: NetConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut b = Builder::new(store, seed);
        let ch = &config.channels;
        let stages = config.stages();
        let mut encoder = Vec::with_capacity(stages);
        let mut cin = 1;
        for (i, &c) in ch[..stages].iter().enumerate() {
            encoder.push(build_stage(&mut b, &config, &format!("enc{i}"), cin, c)?);
            cin = c;
        }
        let bottleneck = build_stage(&mut b, &config, "mid", cin, ch[stages])?;
        let mut decoder = Vec::new();
        let mut prev = ch[stages];
        for j in (0..stages - 1).rev() {
            let name = format!("dec{j}");
            let up = b.conv(&format!("{name}.up"), prev, ch[j], ConvSpec::same(3), Init::RELU);
            let fuse = config
                .adff
                .then(|| AdffBlock::build(&mut b, &format!("{name}.adff"), config.adff_kernel));
            let conv_in = if config.adff { ch[j] } else { 2 * ch[j] };
            let conv = DoubleConv::build(&mut b, &format!("{name}.conv"), conv_in, ch[j]);
            decoder.push(DecoderLevel { name, up, fuse, conv });
            prev = ch[j];
        }
        let mut aux_heads = vec![b.conv("aux.mid", ch[stages], 1, ConvSpec::new(1, 1), Init::LINEAR)];
        for j in (1..stages - 1).rev() {
            aux_heads.push(b.conv(&format!("aux.dec{j}"), ch[j], 1, ConvSpec::new(1, 1), Init::LINEAR));
        }
        let head = b.conv("head", ch[0], 1, ConvSpec::new(1, 1), Init::LINEAR);
        Ok(DcgaNet {
            config,
            encoder,
            bottleneck,
            decoder,
            head,
            aux_heads,
        })
    }

    /// Build a fresh parameter store alongside the network.
    pub fn init<T: Scalar>(config: NetConfig, seed: u64) -> Result<(Self, ParamStore<T>), ModelError> {
        let mut store = ParamStore::new();
        let net = Self::build(config, &mut store, seed)?;
        Ok((net, store))
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<(), ModelError> {
        let m = self.config.size_multiple();
        if !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(ModelError::Config(format!(
                "input {h}×{w} is not a multiple of {m}; pad the image to a multiple of {m}"
            )));
        }
        Ok(())
    }

    /// Record a forward pass of `image` (`n×1×H×W`) on the context's tape.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<NetOutput, ModelError> {
        let shape = ctx.tape.value(image).shape();
        if shape.c != 1 {
            return Err(ModelError::Tensor(crate::tensor::TensorError::Dimension {
                op: "dcganet_forward",
                axis: crate::tensor::Axis::Channel,
                expected: 1,
                actual: shape.c,
            }));
        }
        self.check_input(shape.h, shape.w)?;
        let mut maps = Vec::new();
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = image;
        for (i, stage) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = ctx.tape.max_pool2x2(h)?;
            }
            h = stage.forward(ctx, h, &mut maps)?;
            skips.push(h);
        }
        h = self.bottleneck.forward(ctx, h, &mut maps)?;
        let mut coarse = vec![(h, self.config.size_multiple())];
        for (level, j) in self.decoder.iter().zip((0..skips.len() - 1).rev()) {
            let up = ctx.tape.upsample_nearest(h, 2);
            let up = level.up.forward(ctx, up)?;
            let up = ctx.tape.relu(up);
            let fused = match &level.fuse {
                Some(adff) => {
                    let (y, ad) = adff.forward(ctx, skips[j], up)?;
                    maps.push((format!("{}.adff", level.name), ad));
                    y
                }
                None => ctx.tape.concat(&[skips[j], up])?,
            };
            h = level.conv.forward(ctx, fused)?;
            if j > 0 {
                coarse.push((h, 1 << j));
            }
        }
        let logits = self.head.forward(ctx, h)?;
        let mut aux = Vec::with_capacity(self.aux_heads.len());
        for (head, (feat, factor)) in self.aux_heads.iter().zip(coarse) {
            let a = head.forward(ctx, feat)?;
            aux.push(if factor > 1 {
                ctx.tape.upsample_nearest(a, factor)
            } else {
                a
            });
        }
        Ok(NetOutput {
            logits,
            aux,
            attention: maps,
        })
    }

    /// Forward pass without keeping the tape.
    pub fn predict<T: Scalar>(&self, params: &ParamStore<T>, image: &Tensor4<T>) -> Result<Prediction<T>, ModelError> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let out = self.forward(&mut Ctx::new(&mut tape, params), x)?;
        Ok(Prediction {
            logits: tape.value(out.logits).clone(),
            aux: out.aux.iter().map(|&v| tape.value(v).clone()).collect(),
            attention: out
                .attention
                .iter()
                .map(|(name, v)| (name.clone(), tape.value(*v).clone()))
                .collect(),
        })
    }

    /// Save parameters with `meta` (which must contain this network's
    /// config keys) as the checkpoint text.
    pub fn save<T: Scalar>(&self, params: &ParamStore<T>, meta: &str, path: &Path) -> Result<(), ModelError> {
        params
            .save(meta, path)
            .map_err(|e| ModelError::Checkpoint(e.into()))
    }

    /// Rebuild the network described by a checkpoint's metadata and load
    /// its parameters. Returns the full metadata text.
    pub fn load<T: Scalar>(path: &Path) -> Result<(Self, ParamStore<T>, String), ModelError> {
        let (meta, stored) = ParamStore::<T>::load(path)?;
        let mut kv = KvMap::parse(&meta)?;
        let config = NetConfig::take_from(&mut kv)?;
        let (net, mut params) = Self::init::<T>(config, 0)?;
        params.assign_from(&stored)?;
        Ok((net, params, meta))
    }

    /// Like [`DcgaNet::load`] but fails when the stored schedule differs
    /// from `expected`.
    pub fn load_expecting<T: Scalar>(
        path: &Path,
        expected: &NetConfig,
    ) -> Result<(Self, ParamStore<T>, String), ModelError> {
        let (meta, _) = ParamStore::<T>::load(path)?;
        let mut kv = KvMap::parse(&meta)?;
        let found = NetConfig::take_from(&mut kv)?;
        if found.channels != expected.channels {
            return Err(ModelError::Schedule {
                expected: expected.schedule(),
                found: found.schedule(),
            });
        }
        Self::load(path)
    }
}
