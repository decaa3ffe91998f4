//! Central-difference checks for every differentiable op and block.

use dcganet::autograd::AutogradError;
use dcganet::nn::{AdffBlock, Builder, Ctx, DcgaBlock, DcgaWiring, SvcBlock, SvcBranches};
use dcganet::rng::Stream;
use dcganet::{grad_check, DcgaNet, GradCheckReport, NetConfig, ParamId, ParamStore, Shape, Tape, Tensor4, Var};

use super::{conv_case, random};

pub const EPS: f64 = 1e-5;

/// Reduce `y` to a scalar with fixed pseudo-random weights so every output
/// element contributes a distinct amount.
pub fn probe(tape: &mut Tape<f64>, y: Var) -> Result<Var, AutogradError> {
    let s = tape.value(y).shape();
    let r = random::<f64>(&mut Stream::new(0x5eed, s.numel() as u64), s, 1.0);
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Values `±(0.1 … 1.1)` with distinct magnitudes, so maxima are unique
/// and nothing sits on a ReLU kink.
pub fn separated(rng: &mut Stream, shape: Shape) -> Tensor4<f64> {
    let n = shape.numel();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let data = order
        .iter()
        .map(|&k| {
            let m = 0.1 + k as f64 / n as f64;
            if rng.bool() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor4::from_vec(shape, data).unwrap()
}

/// Offsets whose sampling points stay at least 0.1 px from grid lines.
pub fn off_grid(rng: &mut Stream, shape: Shape) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_, _, _, _| rng.int_in(0, 4) as f64 - 2.0 + rng.range(0.1, 0.9))
}

fn small_shape(rng: &mut Stream) -> Shape {
    Shape::new(rng.int_in(1, 2), rng.int_in(1, 4), rng.int_in(2, 5), rng.int_in(2, 5))
}

fn even_shape(rng: &mut Stream) -> Shape {
    Shape::new(rng.int_in(1, 2), rng.int_in(1, 3), 2 * rng.int_in(1, 3), 2 * rng.int_in(1, 3))
}

fn bias_tensor(b: &[f64]) -> Tensor4<f64> {
    Tensor4::from_vec(Shape::new(b.len(), 1, 1, 1), b.to_vec()).unwrap()
}

type Forward = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutogradError>>;

/// One random instance of the named op: its forward closure and inputs.
pub fn op_instance(op: &str, rng: &mut Stream) -> (Forward, Vec<Tensor4<f64>>) {
    match op {
        "conv2d" => {
            let c = conv_case::<f64>(rng, true);
            let spec = c.spec();
            let f: Forward = Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), spec)?;
                probe(t, y)
            });
            (f, vec![c.x.clone(), c.w.clone(), bias_tensor(&c.b)])
        }
        "dilated_conv2d" => {
            let d = [2, 4, 8][rng.below(3)];
            let xs = Shape::new(1, rng.int_in(1, 3), rng.int_in(5, 10), rng.int_in(5, 10));
            let x = random(rng, xs, 1.0);
            let ws = Shape::new(rng.int_in(1, 3), xs.c, 3, 3);
            let w = random(rng, ws, 1.0);
            let spec = dcganet::ConvSpec::same_dilated(3, d);
            let f: Forward = Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], None, spec)?;
                probe(t, y)
            });
            (f, vec![x, w])
        }
        "deform_conv2d" => {
            let c = conv_case::<f64>(rng, false);
            let spec = c.spec();
            let shape = super::offsets_for::<f64>(rng, &c, 0.0).shape();
            let off = off_grid(rng, shape);
            let f: Forward = Box::new(move |t, v| {
                let y = t.deform_conv2d(v[0], v[1], v[2], Some(v[3]), spec)?;
                probe(t, y)
            });
            (f, vec![c.x.clone(), off, c.w.clone(), bias_tensor(&c.b)])
        }
        "add" | "mul" => {
            let s = small_shape(rng);
            let sb = match rng.below(3) {
                0 => s,
                1 => Shape::new(s.n, s.c, 1, 1),
                _ => Shape::new(s.n, 1, s.h, s.w),
            };
            let mul = op == "mul";
            let f: Forward = Box::new(move |t, v| {
                let y = if mul { t.mul(v[0], v[1])? } else { t.add(v[0], v[1])? };
                probe(t, y)
            });
            (f, vec![random(rng, s, 1.0), random(rng, sb, 1.0)])
        }
        "relu" | "sigmoid" | "global_avg_pool" | "global_max_pool" | "channel_mean_map" | "channel_max_map"
        | "upsample_nearest" | "scale" => {
            let s = small_shape(rng);
            let x = separated(rng, s);
            let op = op.to_string();
            let f: Forward = Box::new(move |t, v| {
                let y = match op.as_str() {
                    "relu" => t.relu(v[0]),
                    "sigmoid" => t.sigmoid(v[0]),
                    "global_avg_pool" => t.global_avg_pool(v[0]),
                    "global_max_pool" => t.global_max_pool(v[0]),
                    "channel_mean_map" => t.channel_mean_map(v[0]),
                    "channel_max_map" => t.channel_max_map(v[0]),
                    "upsample_nearest" => t.upsample_nearest(v[0], 2),
                    _ => t.scale(v[0], -1.75),
                };
                probe(t, y)
            });
            (f, vec![x])
        }
        "max_pool2x2" => {
            let s = even_shape(rng);
            let x = separated(rng, s);
            let f: Forward = Box::new(|t, v| {
                let y = t.max_pool2x2(v[0])?;
                probe(t, y)
            });
            (f, vec![x])
        }
        "concat" => {
            let s = small_shape(rng);
            let s2 = Shape::new(s.n, rng.int_in(1, 3), s.h, s.w);
            let f: Forward = Box::new(|t, v| {
                let y = t.concat(&[v[0], v[1]])?;
                probe(t, y)
            });
            (f, vec![random(rng, s, 1.0), random(rng, s2, 1.0)])
        }
        "channel_shuffle" => {
            let g = rng.int_in(1, 3);
            let s = Shape::new(1, g * rng.int_in(1, 3), 3, 3);
            let f: Forward = Box::new(move |t, v| {
                let y = t.channel_shuffle(v[0], g)?;
                probe(t, y)
            });
            (f, vec![random(rng, s, 1.0)])
        }
        "soft_iou_loss" => {
            let s = small_shape(rng);
            let target = Tensor4::from_fn(s, |_, _, _, _| (rng.uniform() < 0.3) as u8 as f64);
            let f: Forward = Box::new(move |t, v| {
                let p = t.sigmoid(v[0]);
                Ok(t.soft_iou_loss(p, &target, 1.0)?)
            });
            (f, vec![random(rng, s, 2.0)])
        }
        other => panic!("no gradient instance for {other}"),
    }
}

pub const OPS: [&str; 17] = [
    "conv2d",
    "dilated_conv2d",
    "deform_conv2d",
    "add",
    "mul",
    "relu",
    "sigmoid",
    "concat",
    "channel_shuffle",
    "global_avg_pool",
    "global_max_pool",
    "channel_mean_map",
    "channel_max_map",
    "max_pool2x2",
    "upsample_nearest",
    "scale",
    "soft_iou_loss",
];

/// Worst report over `instances` random cases of `op`.
pub fn check_op(op: &str, seed: u64, instances: usize) -> GradCheckReport {
    let mut rng = Stream::new(seed, 0);
    let mut worst: Option<GradCheckReport> = None;
    let mut abs = 0.0f64;
    for _ in 0..instances {
        let (f, inputs) = op_instance(op, &mut rng);
        let r = grad_check(op, f, &inputs, EPS).unwrap();
        abs = abs.max(r.max_abs_error);
        if worst.as_ref().is_none_or(|w| r.max_rel_error > w.max_rel_error) {
            worst = Some(r);
        }
    }
    let mut worst = worst.unwrap();
    worst.max_abs_error = abs;
    worst
}

/// Move every deformable offset predictor off the zero initialization so
/// sampling points sit strictly inside bilinear cells.
pub fn detach_offsets(store: &mut ParamStore<f64>, rng: &mut Stream) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        if name.ends_with(".offset.weight") {
            let s = store.get(id).shape();
            *store.get_mut(id) = random(rng, s, 0.01);
        } else if name.ends_with(".offset.bias") {
            let s = store.get(id).shape();
            *store.get_mut(id) = Tensor4::from_fn(s, |_, _, _, _| rng.range(0.35, 0.65));
        }
    }
}

/// Check gradients with respect to `inputs` and the stored parameters
/// `checked`; other parameters stay fixed at their stored values.
pub fn check_with_params(
    name: &str,
    store: &ParamStore<f64>,
    checked: &[ParamId],
    inputs: Vec<Tensor4<f64>>,
    forward: impl Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var, AutogradError>,
) -> GradCheckReport {
    let k = inputs.len();
    let mut all = inputs;
    all.extend(checked.iter().map(|&id| store.get(id).clone()));
    grad_check(
        name,
        |tape, vars| {
            for (&id, &v) in checked.iter().zip(&vars[k..]) {
                tape.bind_param(id, v);
            }
            let mut ctx = Ctx::new(tape, store);
            let y = forward(&mut ctx, &vars[..k])?;
            probe(ctx.tape, y)
        },
        &all,
        EPS,
    )
    .unwrap()
}

fn model_err(e: dcganet::nn::ModelError) -> AutogradError {
    match e {
        dcganet::nn::ModelError::Tensor(t) => AutogradError::Tensor(t),
        other => panic!("{other}"),
    }
}

pub fn check_svc(seed: u64) -> GradCheckReport {
    let mut rng = Stream::new(seed, 0);
    let mut store = ParamStore::new();
    let block = SvcBlock::build(&mut Builder::new(&mut store, seed), "svc", 2, 3, SvcBranches::ALL);
    detach_offsets(&mut store, &mut rng);
    let ids: Vec<ParamId> = store.ids().collect();
    let x = random(&mut rng, Shape::new(1, 2, 6, 6), 1.0);
    check_with_params("svc", &store, &ids, vec![x], |ctx, v| block.forward(ctx, v[0]).map_err(model_err))
}

pub fn check_dcga(seed: u64, wiring: DcgaWiring) -> GradCheckReport {
    let mut rng = Stream::new(seed, 0);
    let mut store = ParamStore::new();
    let block = DcgaBlock::build(&mut Builder::new(&mut store, seed), "dcga", 4, 2, wiring, true).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    let x = random(&mut rng, Shape::new(1, 4, 5, 5), 1.0);
    check_with_params(wiring.as_str(), &store, &ids, vec![x], |ctx, v| {
        block.forward(ctx, v[0]).map(|(y, _)| y).map_err(model_err)
    })
}

pub fn check_adff(seed: u64) -> GradCheckReport {
    let mut rng = Stream::new(seed, 0);
    let mut store = ParamStore::new();
    let block = AdffBlock::build(&mut Builder::new(&mut store, seed), "adff", 7);
    let ids: Vec<ParamId> = store.ids().collect();
    let enc = random(&mut rng, Shape::new(1, 3, 6, 6), 1.0);
    let dec = random(&mut rng, Shape::new(1, 3, 6, 6), 1.0);
    check_with_params("adff", &store, &ids, vec![enc, dec], |ctx, v| {
        block.forward(ctx, v[0], v[1]).map(|(y, _)| y).map_err(model_err)
    })
}

/// Full micro-schedule network on a 16×16 image with the deep-supervised
/// loss. Checked tensors are the image followed by the selected parameters.
pub struct NetCase {
    net: DcgaNet,
    store: ParamStore<f64>,
    ids: Vec<ParamId>,
    target: Tensor4<f64>,
    pub inputs: Vec<Tensor4<f64>>,
}

impl NetCase {
    pub fn new(seed: u64, select: impl Fn(&str) -> bool) -> Self {
        let mut rng = Stream::new(seed, 0);
        let (net, mut store) = DcgaNet::init::<f64>(NetConfig::micro(), seed).unwrap();
        detach_offsets(&mut store, &mut rng);
        let ids: Vec<ParamId> = store.ids().filter(|&id| select(store.name(id))).collect();
        let image = Tensor4::from_fn(Shape::new(1, 1, 16, 16), |_, _, _, _| rng.uniform());
        let target =
            Tensor4::from_fn(Shape::new(1, 1, 16, 16), |_, _, y, x| ((4..7).contains(&y) && (9..12).contains(&x)) as u8 as f64);
        let mut inputs = vec![image];
        inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
        NetCase { net, store, ids, target, inputs }
    }

    fn loss(&self, tape: &mut Tape<f64>, vars: &[Var]) -> Result<Var, AutogradError> {
        for (&id, &v) in self.ids.iter().zip(&vars[1..]) {
            tape.bind_param(id, v);
        }
        let mut ctx = Ctx::new(tape, &self.store);
        let out = self.net.forward(&mut ctx, vars[0]).map_err(model_err)?;
        let mut total = None;
        for (i, head) in std::iter::once(out.logits).chain(out.aux).enumerate() {
            let p = ctx.tape.sigmoid(head);
            let l = ctx.tape.soft_iou_loss(p, &self.target, 1.0)?;
            let l = ctx.tape.scale(l, if i == 0 { 1.0 } else { 0.5 });
            total = Some(match total {
                None => l,
                Some(t) => ctx.tape.add(t, l)?,
            });
        }
        Ok(total.unwrap())
    }

    pub fn check(&self) -> GradCheckReport {
        grad_check("dcganet", |tape, vars| self.loss(tape, vars), &self.inputs, EPS).unwrap()
    }

    /// Loss and tape derivative with coordinate `at` shifted by `delta`.
    fn shifted(&self, at: (usize, usize), delta: f64) -> (f64, f64) {
        let mut values = self.inputs.clone();
        values[at.0].data_mut()[at.1] += delta;
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.into_iter().map(|v| tape.leaf(v)).collect();
        let y = self.loss(&mut tape, &vars).unwrap();
        let value = tape.value(y).data()[0];
        let grads = tape.backward(y).unwrap();
        (value, grads.wrt(vars[at.0]).unwrap().data()[at.1])
    }

    /// Whether the `±EPS` stencil around `at` straddles a point where the
    /// loss is not differentiable (a ReLU or max switching branches) while
    /// the tape derivative is right at `at` itself. Returns the tape
    /// derivatives on both sides of the stencil when it does.
    pub fn kink(&self, at: (usize, usize), tol: f64) -> Option<(f64, f64)> {
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
        let (_, below) = self.shifted(at, -EPS);
        let (_, here) = self.shifted(at, 0.0);
        let (_, above) = self.shifted(at, EPS);
        let h = 1e-7;
        let numeric = (self.shifted(at, h).0 - self.shifted(at, -h).0) / (2.0 * h);
        (rel(below, above) > tol && rel(here, numeric) <= tol).then_some((below, above))
    }
}

/// [`NetCase`] checked at `EPS`. `select` picks which parameters are perturbed.
pub fn check_net(seed: u64, select: impl Fn(&str) -> bool) -> GradCheckReport {
    NetCase::new(seed, select).check()
}
