//! Library blocks against their compositions of naive oracles.

use dcganet::nn::{AdffBlock, Builder, Ctx, DcgaBlock, DcgaWiring, SvcBlock, SvcBranches};
use dcganet::rng::Stream;
use dcganet::{ParamId, ParamStore, Scalar, Shape, Tape};

use super::{max_rel, random};

/// Replace every parameter with fresh uniform values so the offset
/// predictors are not trivially zero.
fn scramble<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Stream, scale: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let s = store.get(id).shape();
        *store.get_mut(id) = random(rng, s, scale);
    }
}

/// Largest relative deviation between `SvcBlock::forward` and the oracle.
pub fn svc<T: Scalar>(seed: u64, branches: SvcBranches) -> f64 {
    let mut rng = Stream::new(seed, 0);
    let (cin, cout) = (rng.int_in(1, 4), rng.int_in(1, 4));
    let mut store = ParamStore::<T>::new();
    let block = SvcBlock::build(&mut Builder::new(&mut store, seed), "svc", cin, cout, branches);
    scramble(&mut store, &mut rng, 0.5);
    let shape = Shape::new(rng.int_in(1, 2), cin, rng.int_in(4, 10), rng.int_in(4, 10));
    let x = random::<T>(&mut rng, shape, 1.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = block.forward(&mut Ctx::new(&mut tape, &store), v).unwrap();
    max_rel(tape.value(y), &super::svc(&store, &block, &x))
}

pub fn dcga<T: Scalar>(seed: u64, wiring: DcgaWiring, residual: bool) -> f64 {
    let mut rng = Stream::new(seed, 0);
    let c = 2 * rng.int_in(1, 4);
    let mut store = ParamStore::<T>::new();
    let reduction = [1, 2][rng.below(2)].min(c);
    let block = DcgaBlock::build(&mut Builder::new(&mut store, seed), "dcga", c, reduction, wiring, residual).unwrap();
    scramble(&mut store, &mut rng, 0.5);
    let shape = Shape::new(rng.int_in(1, 2), c, rng.int_in(3, 9), rng.int_in(3, 9));
    let x = random::<T>(&mut rng, shape, 1.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let (y, w) = block.forward(&mut Ctx::new(&mut tape, &store), v).unwrap();
    let (oy, ow) = super::dcga(&store, &block, &x);
    max_rel(tape.value(y), &oy).max(max_rel(tape.value(w), &ow))
}

pub fn adff<T: Scalar>(seed: u64) -> f64 {
    let mut rng = Stream::new(seed, 0);
    let k = [3, 5, 7][rng.below(3)];
    let mut store = ParamStore::<T>::new();
    let block = AdffBlock::build(&mut Builder::new(&mut store, seed), "adff", k);
    scramble(&mut store, &mut rng, 0.5);
    let s = Shape::new(rng.int_in(1, 2), rng.int_in(1, 4), rng.int_in(4, 10), rng.int_in(4, 10));
    let enc = random::<T>(&mut rng, s, 1.0);
    let dec = random::<T>(&mut rng, s, 1.0);
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(enc.clone()), tape.constant(dec.clone()));
    let (y, m) = block.forward(&mut Ctx::new(&mut tape, &store), a, b).unwrap();
    let (oy, om) = super::adff(&store, &block, &enc, &dec);
    max_rel(tape.value(y), &oy).max(max_rel(tape.value(m), &om))
}

pub const WIRINGS: [DcgaWiring; 4] = [
    DcgaWiring::Parallel,
    DcgaWiring::Cascaded,
    DcgaWiring::NoRefine,
    DcgaWiring::NoShuffle,
];

pub const BRANCHES: [SvcBranches; 4] = [
    SvcBranches::ALL,
    SvcBranches { deform: true, dilated: false },
    SvcBranches { deform: false, dilated: true },
    SvcBranches { deform: false, dilated: false },
];

